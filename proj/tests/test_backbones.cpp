#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deltakit/backbones.hpp"
#include "deltakit/errors.hpp"
#include "deltakit/random.hpp"
#include "oracles.hpp"

using namespace deltakit;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major rows

Mat weight(const NodePtr& m, const std::string& path, const std::string& name = "weight") {
    Tensor t = get_by_path(m, path)->param(name);
    std::size_t rows = t.dim() == 2 ? t.size(0) : 1, cols = t.shape().back();
    Mat out(rows, Vec(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i][j] = t.at(i * cols + j);
    return out;
}

Vec vec(const NodePtr& m, const std::string& path, const std::string& name) { return weight(m, path, name)[0]; }

Vec linear(const Vec& x, const NodePtr& m, const std::string& path) {
    Mat w = weight(m, path);
    Vec b = vec(m, path, "bias");
    Vec y = b;
    for (std::size_t j = 0; j < y.size(); ++j)
        for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w[i][j];
    return y;
}

Vec layer_norm(const Vec& x, const NodePtr& m, const std::string& path) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    Vec g = vec(m, path, "weight"), b = vec(m, path, "bias"), y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return y;
}

double gelu(double x) { return 0.5 * x * (1 + std::tanh(0.7978845608 * (x + 0.044715 * x * x * x))); }

Vec add(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

// Step-by-step re-implementation of a one-layer, one-head convention-A model.
Vec scalar_forward_a(const NodePtr& m, const std::vector<std::int64_t>& ids) {
    const std::size_t s = ids.size();
    Mat word = weight(m, "embeddings.word_embeddings"), pos = weight(m, "embeddings.position_embeddings");
    Mat h(s);
    for (std::size_t t = 0; t < s; ++t)
        h[t] = layer_norm(add(word[static_cast<std::size_t>(ids[t])], pos[t]), m, "embeddings.LayerNorm");

    const std::string L = "encoder.layer.0.";
    Mat q(s), k(s), v(s);
    for (std::size_t t = 0; t < s; ++t) {
        q[t] = linear(h[t], m, L + "attention.self.query");
        k[t] = linear(h[t], m, L + "attention.self.key");
        v[t] = linear(h[t], m, L + "attention.self.value");
    }
    const double d = static_cast<double>(h[0].size());
    Mat a(s, Vec(h[0].size(), 0.0));
    for (std::size_t i = 0; i < s; ++i) {
        Vec sc(s);
        double mx = -1e300;
        for (std::size_t j = 0; j < s; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
            sc[j] = dot / std::sqrt(d);
            mx = std::max(mx, sc[j]);
        }
        double z = 0;
        for (double& x : sc) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < s; ++j)
            for (std::size_t c = 0; c < a[i].size(); ++c) a[i][c] += sc[j] / z * v[j][c];
    }
    Mat out(s);
    for (std::size_t t = 0; t < s; ++t) {
        Vec x = layer_norm(add(linear(a[t], m, L + "attention.output.dense"), h[t]), m, L + "attention.output.LayerNorm");
        Vec f = linear(x, m, L + "intermediate.dense");
        for (double& e : f) e = gelu(e);
        out[t] = layer_norm(add(linear(f, m, L + "output.dense"), x), m, L + "output.LayerNorm");
    }
    Vec pooled = linear(out[0], m, "pooler.dense");
    for (double& e : pooled) e = std::tanh(e);
    return linear(pooled, m, "classifier");
}

void randomize_all(const NodePtr& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [k, t] : named_parameters(m))
        for (double& x : t.mutable_data()) x = rng.uniform(-1, 1);
}

TokenBatch fixed_batch() { return TokenBatch::unpadded(2, 5, {3, 1, 2, 2, 1, 3, 2, 1, 1, 2}); }

} // namespace

TEST_CASE("single-layer single-head d_model=2 model matches the scalar oracle") {
    ToyformerConfig cfg;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.d_ff = 3;
    cfg.n_layers = 1;
    cfg.vocab = 5;
    cfg.max_len = 4;
    auto model = build_toyformer(cfg, Convention::A);
    randomize_all(model, 5);
    std::vector<std::int64_t> ids{4, 0, 2};
    Tensor logits = forward(model, TokenBatch::unpadded(1, 3, ids));
    Vec expect = scalar_forward_a(model, ids);
    REQUIRE(logits.numel() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(logits.at(i) - expect[i]) < 1e-10);
}

TEST_CASE("construction is deterministic in the seed") {
    for (auto conv : {Convention::A, Convention::B}) {
        ToyformerConfig cfg;
        CHECK(snapshot(build_toyformer(cfg, conv), false) == snapshot(build_toyformer(cfg, conv), false));
        ToyformerConfig other = cfg;
        other.seed = 2;
        CHECK_FALSE(snapshot(build_toyformer(cfg, conv), false) == snapshot(build_toyformer(other, conv), false));
    }
}

TEST_CASE("conventions expose their attention projection paths") {
    auto a = build_toyformer({}, Convention::A);
    auto b = build_toyformer({}, Convention::B);
    CHECK_NOTHROW(get_by_path(a, "encoder.layer.0.attention.self.query"));
    CHECK_NOTHROW(get_by_path(b, "encoder.block.0.layer.0.SelfAttention.q"));
    CHECK_THROWS_AS(get_by_path(a, "encoder.block"), NotFoundError);
}

TEST_CASE("parameter count equals the declared shape sum") {
    ToyformerConfig c;
    const std::size_t d = c.d_model, f = c.d_ff;
    const std::size_t lin_dd = d * d + d, ln = 2 * d;
    const std::size_t per_layer = 4 * lin_dd + 2 * ln + (d * f + f) + (f * d + d);
    const std::size_t expect = c.vocab * d + c.max_len * d + ln + c.n_layers * per_layer + lin_dd + (d * c.n_classes + c.n_classes);
    CHECK(count_parameters(build_toyformer(c, Convention::A)) == expect);
    CHECK(count_parameters(build_toyformer(c, Convention::B)) == expect);
    CHECK(expect == 20834);
}

TEST_CASE("identical rows give identical logits and batch order is respected") {
    for (auto conv : {Convention::A, Convention::B}) {
        auto m = build_toyformer({}, conv);
        Tensor same = forward(m, TokenBatch::unpadded(2, 3, {3, 1, 2, 3, 1, 2}));
        CHECK(same.at(0) == same.at(2));
        CHECK(same.at(1) == same.at(3));
        Tensor fwd = forward(m, fixed_batch());
        Tensor rev = forward(m, TokenBatch::unpadded(2, 5, {3, 2, 1, 1, 2, 3, 1, 2, 2, 1}));
        CHECK(fwd.at(0) == rev.at(2));
        CHECK(fwd.at(3) == rev.at(1));
    }
}

TEST_CASE("padded keys do not influence unpadded positions") {
    auto m = build_toyformer({}, Convention::A);
    TokenBatch a{1, 4, {3, 1, 2, 7}, {1, 1, 1, 0}};
    TokenBatch b{1, 4, {3, 1, 2, 9}, {1, 1, 1, 0}};
    Tensor la = forward(m, a), lb = forward(m, b);
    CHECK(la.to_vector() == lb.to_vector());
}

TEST_CASE("attention probabilities are reported with unit row sums") {
    auto m = build_toyformer({}, Convention::B);
    ForwardContext ctx{1, 3, {1, 1, 1}, {}};
    std::size_t calls = 0;
    ctx.probe = [&](std::string_view tag, const Tensor& p) {
        CHECK(tag == kAttentionProbe);
        CHECK(p.shape() == Shape{1, 4, 3, 3});
        for (std::size_t r = 0; r < p.numel() / 3; ++r)
            CHECK(p.at(r * 3) + p.at(r * 3 + 1) + p.at(r * 3 + 2) == doctest::Approx(1.0).epsilon(1e-12));
        ++calls;
    };
    (*m)(Tensor::from({1, 3}, {3, 1, 2}), ctx);
    CHECK(calls == 2);
}

TEST_CASE("input violations are index errors") {
    auto m = build_toyformer({}, Convention::A);
    CHECK_THROWS_AS(forward(m, TokenBatch::unpadded(1, 2, {3, 64})), IndexError);
    std::vector<std::int64_t> too_long(17, 1);
    CHECK_THROWS_AS(forward(m, TokenBatch::unpadded(1, 17, too_long)), IndexError);
    CHECK_THROWS_AS(TokenBatch::unpadded(2, 2, {1, 2, 3}), DimensionError);
}

TEST_CASE("invalid configs are config errors") {
    ToyformerConfig c;
    c.n_heads = 5;
    CHECK_THROWS_AS(build_toyformer(c, Convention::A), ConfigError);
    c = {};
    c.n_layers = 0;
    CHECK_THROWS_AS(build_toyformer(c, Convention::B), ConfigError);
    CHECK_THROWS_AS(parse_convention("C"), ConfigError);
}

TEST_CASE("full-model loss gradient matches finite differences on sampled coordinates") {
    auto m = build_toyformer({}, Convention::B);
    auto params = named_parameters(m);
    auto batch = fixed_batch();
    std::vector<std::int64_t> labels{0, 1};
    auto loss = [&] { return cross_entropy(forward(m, batch), labels); };
    backward(loss());
    Rng rng(99);
    double worst = 0;
    for (int s = 0; s < 20; ++s) {
        auto& [key, t] = params[rng.below(params.size())];
        std::size_t i = rng.below(t.numel());
        double analytic = t.grad()[i];
        double numeric = oracle::numeric_grad(t, i, [&] {
            NoGradGuard g;
            return loss().item();
        });
        worst = std::max(worst, oracle::rel_error(analytic, numeric));
    }
    CHECK(worst < 1e-4);
}
