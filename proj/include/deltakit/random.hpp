#pragma once

#include <cstdint>
#include <random>

#include "deltakit/tensor.hpp"

namespace deltakit {

// Seeded generator used for every initialization. std::mt19937_64 output is
// fixed by the standard; the float mapping below is done by hand because
// std::uniform_real_distribution is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

    Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = true) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = uniform(lo, hi);
        return Tensor::from(std::move(shape), std::move(v), requires_grad);
    }

private:
    std::mt19937_64 engine_;
};

// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace deltakit
