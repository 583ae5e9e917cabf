#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deltakit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor;

namespace detail {
struct TensorImpl;
}

// One recorded differentiable operation. `backward` maps the gradient of the
// output to one gradient buffer per input (empty when the input does not
// require a gradient).
struct GradNode {
    std::string op;
    std::vector<Tensor> inputs;
    std::function<std::vector<std::vector<double>>(std::span<const double>)> backward;
};

// Dense row-major float64 tensor with shared ownership. Copies alias the same
// storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(int axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    std::vector<double> to_vector() const;
    double item() const;
    double at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Graph node that produced this tensor, if it was recorded.
    const std::shared_ptr<GradNode>& node() const;

    bool is_same(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    Tensor clone() const;
    Tensor detach() const;

    void backward() const;

private:
    friend struct TensorAccess;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Operations reachable from a loss, in topological order (producers first).
class GradTape {
public:
    struct Entry {
        const GradNode* node;
        Tensor output;
    };

    static GradTape collect(const Tensor& root);

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

private:
    std::vector<Entry> entries_;
};

// Populates grad on every reachable tensor with requires_grad. Gradients
// accumulate across calls.
void backward(const Tensor& loss);

// ---- kernels ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape);
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
// Broadcasts `a` to `shape`; a's shape must be a trailing suffix of `shape`.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
// x[..., s, d] -> x[..., d] taking row `index` of the second-to-last axis.
Tensor select_row(const Tensor& a, std::size_t index);
// scores[b, ..., k]: entries whose key mask (batch-major, b*K + k) is zero are
// overwritten with `fill`; no gradient flows to them.
Tensor mask_keys(const Tensor& scores, std::span<const std::uint8_t> key_mask, double fill = -1e9);

inline constexpr double kGeluCoeff = 0.7978845608;
inline constexpr double kGeluCubic = 0.044715;

} // namespace deltakit
