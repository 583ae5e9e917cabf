#include "deltakit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "deltakit/errors.hpp"

namespace deltakit {

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    std::shared_ptr<GradNode> node;
};
} // namespace detail

struct TensorAccess {
    static detail::TensorImpl& impl(const Tensor& t) {
        if (!t.impl_) throw ContractError("operation on an undefined tensor");
        return *t.impl_;
    }
    static detail::TensorImpl* raw(const Tensor& t) { return t.impl_.get(); }
    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }
    static void set_node(Tensor& t, std::shared_ptr<GradNode> node) { t.impl_->node = std::move(node); }
};

namespace {

thread_local bool g_grad_enabled = true;

using Grads = std::vector<std::vector<double>>;
using BackwardFn = std::function<Grads(std::span<const double>)>;

bool needs_grad(const Tensor& t) { return t.requires_grad(); }

// Builds the output tensor and, when any input requires a gradient and
// recording is enabled, attaches the graph node.
Tensor make_result(Shape shape, std::vector<double> data, const std::string& op,
                   std::vector<Tensor> inputs, BackwardFn backward) {
    bool track = g_grad_enabled &&
                 std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return needs_grad(t); });
    Tensor out = TensorAccess::make(std::move(shape), std::move(data), track);
    if (track) {
        auto node = std::make_shared<GradNode>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        TensorAccess::set_node(out, std::move(node));
    }
    return out;
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::vector<double> reduce_to_suffix(std::span<const double> g, std::size_t inner) {
    std::vector<double> out(inner, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) out[i % inner] += g[i];
    return out;
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
    std::ostringstream os;
    os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
    throw DimensionError(os.str());
}

} // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return TensorAccess::make(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                             std::to_string(data.size()) + " elements");
    }
    return TensorAccess::make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return TensorAccess::impl(*this).shape; }

std::size_t Tensor::size(int axis) const {
    const auto& s = shape();
    int n = static_cast<int>(s.size());
    int idx = axis < 0 ? n + axis : axis;
    if (idx < 0 || idx >= n) throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(idx)];
}

std::size_t Tensor::numel() const { return TensorAccess::impl(*this).data.size(); }

std::span<const double> Tensor::data() const { return TensorAccess::impl(*this).data; }
std::span<double> Tensor::mutable_data() { return TensorAccess::impl(*this).data; }
std::vector<double> Tensor::to_vector() const { return TensorAccess::impl(*this).data; }

double Tensor::item() const {
    const auto& impl = TensorAccess::impl(*this);
    if (impl.data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(impl.shape));
    return impl.data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { TensorAccess::impl(*this).requires_grad = flag; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
    const auto& impl = TensorAccess::impl(*this);
    if (!impl.grad) throw ContractError("tensor has no gradient");
    return *impl.grad;
}

void Tensor::zero_grad() { TensorAccess::impl(*this).grad.reset(); }

const std::shared_ptr<GradNode>& Tensor::node() const { return TensorAccess::impl(*this).node; }

Tensor Tensor::clone() const {
    const auto& impl = TensorAccess::impl(*this);
    return TensorAccess::make(impl.shape, impl.data, impl.requires_grad);
}

Tensor Tensor::detach() const {
    const auto& impl = TensorAccess::impl(*this);
    return TensorAccess::make(impl.shape, impl.data, false);
}

void Tensor::backward() const { deltakit::backward(*this); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- tape / backward -------------------------------------------------------

GradTape GradTape::collect(const Tensor& root) {
    GradTape tape;
    std::unordered_set<const detail::TensorImpl*> visited;
    // Iterative post-order DFS so deep graphs do not exhaust the stack.
    struct Frame {
        Tensor t;
        std::size_t next;
    };
    std::vector<Frame> stack;
    if (root.defined() && root.node()) {
        stack.push_back({root, 0});
        visited.insert(TensorAccess::raw(root));
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& node = f.t.node();
        if (f.next < node->inputs.size()) {
            const Tensor& in = node->inputs[f.next++];
            if (in.node() && visited.insert(TensorAccess::raw(in)).second) stack.push_back({in, 0});
            continue;
        }
        tape.entries_.push_back({node.get(), f.t});
        stack.pop_back();
    }
    return tape;
}

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    GradTape tape = GradTape::collect(loss);
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
    std::vector<Tensor> order;  // every tensor that received a gradient, first-seen order
    auto accumulate = [&](const Tensor& t, std::vector<double>&& g) {
        auto* key = TensorAccess::raw(t);
        auto it = grads.find(key);
        if (it == grads.end()) {
            grads.emplace(key, std::move(g));
            order.push_back(t);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
    };
    accumulate(loss, std::vector<double>{1.0});

    const auto& entries = tape.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        auto g = grads.find(TensorAccess::raw(it->output));
        if (g == grads.end()) continue;
        Grads in_grads = it->node->backward(g->second);
        for (std::size_t i = 0; i < it->node->inputs.size(); ++i) {
            const Tensor& in = it->node->inputs[i];
            if (!in.requires_grad() || i >= in_grads.size() || in_grads[i].empty()) continue;
            accumulate(in, std::move(in_grads[i]));
        }
    }

    for (const Tensor& t : order) {
        if (!t.requires_grad()) continue;
        auto& impl = TensorAccess::impl(t);
        auto& g = grads[&impl];
        if (!impl.grad) {
            impl.grad = std::move(g);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) (*impl.grad)[i] += g[i];
        }
    }
}

// ---- kernels ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.empty() || bs.size() != 2 || as.back() != bs[0]) dim_error("matmul", as, bs);
    const std::size_t k = bs[0], n = bs[1], rows = a.numel() / k;
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);

    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(rows * n, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
        }

    return make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                       [a, b, rows, k, n](std::span<const double> g) {
                           Grads r(2);
                           auto ad = a.data();
                           auto bd = b.data();
                           if (a.requires_grad()) {
                               r[0].assign(rows * k, 0.0);
                               for (std::size_t i = 0; i < rows; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double s = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
                                       r[0][i * k + p] = s;
                                   }
                           }
                           if (b.requires_grad()) {
                               r[1].assign(k * n, 0.0);
                               for (std::size_t i = 0; i < rows; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double av = ad[i * k + p];
                                       for (std::size_t j = 0; j < n; ++j) r[1][p * n + j] += av * g[i * n + j];
                                   }
                           }
                           return r;
                       });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_defined(a, "bmm");
    check_defined(b, "bmm");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()) ||
        as[as.size() - 1] != bs[bs.size() - 2]) {
        dim_error("bmm", as, bs);
    }
    const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
    const std::size_t batch = a.numel() / (m * k);
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);

    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t t = 0; t < batch; ++t) {
        const double* ap = ad.data() + t * m * k;
        const double* bp = bd.data() + t * k * n;
        double* op = out.data() + t * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double av = ap[i * k + p];
                for (std::size_t j = 0; j < n; ++j) op[i * n + j] += av * bp[p * n + j];
            }
    }

    return make_result(std::move(out_shape), std::move(out), "bmm", {a, b},
                       [a, b, batch, m, k, n](std::span<const double> g) {
                           Grads r(2);
                           auto ad = a.data();
                           auto bd = b.data();
                           if (a.requires_grad()) r[0].assign(batch * m * k, 0.0);
                           if (b.requires_grad()) r[1].assign(batch * k * n, 0.0);
                           for (std::size_t t = 0; t < batch; ++t) {
                               const double* gp = g.data() + t * m * n;
                               const double* ap = ad.data() + t * m * k;
                               const double* bp = bd.data() + t * k * n;
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       if (!r[0].empty()) {
                                           double s = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) s += gp[i * n + j] * bp[p * n + j];
                                           r[0][t * m * k + i * k + p] = s;
                                       }
                                       if (!r[1].empty()) {
                                           double av = ap[i * k + p];
                                           for (std::size_t j = 0; j < n; ++j)
                                               r[1][t * k * n + p * n + j] += av * gp[i * n + j];
                                       }
                                   }
                           }
                           return r;
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    if (!is_suffix(b.shape(), a.shape())) dim_error("add", a.shape(), b.shape());
    const std::size_t inner = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[inner ? i % inner : 0];
    bool broadcast = a.numel() != inner;
    return make_result(a.shape(), std::move(out), "add", {a, b},
                       [a, b, inner, broadcast](std::span<const double> g) {
                           Grads r(2);
                           if (a.requires_grad()) r[0].assign(g.begin(), g.end());
                           if (b.requires_grad())
                               r[1] = broadcast ? reduce_to_suffix(g, inner) : std::vector<double>(g.begin(), g.end());
                           return r;
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    if (!is_suffix(b.shape(), a.shape())) dim_error("mul", a.shape(), b.shape());
    const std::size_t inner = b.numel();
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % inner];
    return make_result(a.shape(), std::move(out), "mul", {a, b}, [a, b, inner](std::span<const double> g) {
        Grads r(2);
        auto ad = a.data();
        auto bd = b.data();
        if (a.requires_grad()) {
            r[0].resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = g[i] * bd[i % inner];
        }
        if (b.requires_grad()) {
            r[1].assign(inner, 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) r[1][i % inner] += g[i] * ad[i];
        }
        return r;
    });
}

Tensor scale(const Tensor& a, double factor) {
    check_defined(a, "scale");
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
    return make_result(a.shape(), std::move(out), "scale", {a}, [factor](std::span<const double> g) {
        Grads r(1);
        r[0].resize(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = g[i] * factor;
        return r;
    });
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    auto ad = a.data();
    double s = std::accumulate(ad.begin(), ad.end(), 0.0);
    std::size_t n = ad.size();
    return make_result({}, {s}, "sum", {a}, [n](std::span<const double> g) { return Grads{std::vector<double>(n, g[0])}; });
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    if (a.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_rows");
    check_defined(b, "concat_rows");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || as.size() != bs.size()) dim_error("concat_rows", as, bs);
    const std::size_t axis = as.size() - 2;
    for (std::size_t i = 0; i < as.size(); ++i)
        if (i != axis && as[i] != bs[i]) dim_error("concat_rows", as, bs);

    const std::size_t d = as.back(), p = as[axis], s = bs[axis];
    const std::size_t outer = shape_numel(Shape(as.begin(), as.begin() + static_cast<std::ptrdiff_t>(axis)));
    Shape out_shape = as;
    out_shape[axis] = p + s;
    auto ad = a.data();
    auto bd = b.data();
    std::vector<double> out;
    out.reserve(outer * (p + s) * d);
    for (std::size_t o = 0; o < outer; ++o) {
        out.insert(out.end(), ad.begin() + static_cast<std::ptrdiff_t>(o * p * d),
                   ad.begin() + static_cast<std::ptrdiff_t>((o + 1) * p * d));
        out.insert(out.end(), bd.begin() + static_cast<std::ptrdiff_t>(o * s * d),
                   bd.begin() + static_cast<std::ptrdiff_t>((o + 1) * s * d));
    }
    return make_result(std::move(out_shape), std::move(out), "concat_rows", {a, b},
                       [outer, p, s, d](std::span<const double> g) {
                           Grads r(2);
                           r[0].reserve(outer * p * d);
                           r[1].reserve(outer * s * d);
                           for (std::size_t o = 0; o < outer; ++o) {
                               auto base = g.begin() + static_cast<std::ptrdiff_t>(o * (p + s) * d);
                               r[0].insert(r[0].end(), base, base + static_cast<std::ptrdiff_t>(p * d));
                               r[1].insert(r[1].end(), base + static_cast<std::ptrdiff_t>(p * d),
                                           base + static_cast<std::ptrdiff_t>((p + s) * d));
                           }
                           return r;
                       });
}

Tensor softmax(const Tensor& a) {
    check_defined(a, "softmax");
    if (a.dim() == 0 || a.shape().back() == 0) throw DimensionError("softmax: empty last axis in " + shape_str(a.shape()));
    const std::size_t n = a.shape().back(), rows = a.numel() / n;
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = ad.data() + r * n;
        double* y = out.data() + r * n;
        double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= z;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(a.shape(), std::move(out), "softmax", {a}, [y, rows, n](std::span<const double> g) {
        Grads r(1, std::vector<double>(rows * n));
        for (std::size_t i = 0; i < rows; ++i) {
            const double* yi = y->data() + i * n;
            const double* gi = g.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
            for (std::size_t j = 0; j < n; ++j) r[0][i * n + j] = yi[j] * (gi[j] - dot);
        }
        return r;
    });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    check_defined(a, "layer_norm");
    if (a.dim() == 0 || a.shape().back() == 0) throw DimensionError("layer_norm: empty feature axis");
    const std::size_t d = a.shape().back(), rows = a.numel() / d;
    if (gain.shape() != Shape{d}) dim_error("layer_norm(gain)", a.shape(), gain.shape());
    if (bias.shape() != Shape{d}) dim_error("layer_norm(bias)", a.shape(), bias.shape());

    auto ad = a.data();
    auto gd = gain.data();
    auto bd = bias.data();
    auto xhat = std::make_shared<std::vector<double>>(ad.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(ad.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = ad.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (x[j] - mu) * is;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = xh * gd[j] + bd[j];
        }
    }
    return make_result(a.shape(), std::move(out), "layer_norm", {a, gain, bias},
                       [a, gain, bias, xhat, inv_std, rows, d](std::span<const double> g) {
                           Grads r(3);
                           auto gd = gain.data();
                           if (gain.requires_grad()) r[1].assign(d, 0.0);
                           if (bias.requires_grad()) r[2].assign(d, 0.0);
                           if (a.requires_grad()) r[0].assign(rows * d, 0.0);
                           for (std::size_t i = 0; i < rows; ++i) {
                               const double* gi = g.data() + i * d;
                               const double* xh = xhat->data() + i * d;
                               double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   if (!r[1].empty()) r[1][j] += gi[j] * xh[j];
                                   if (!r[2].empty()) r[2][j] += gi[j];
                                   double dxh = gi[j] * gd[j];
                                   mean_dxh += dxh;
                                   mean_dxh_xh += dxh * xh[j];
                               }
                               if (r[0].empty()) continue;
                               mean_dxh /= static_cast<double>(d);
                               mean_dxh_xh /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   double dxh = gi[j] * gd[j];
                                   r[0][i * d + j] = (*inv_std)[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                               }
                           }
                           return r;
                       });
}

namespace {
template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
    check_defined(a, op);
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
    return make_result(a.shape(), std::move(out), op, {a}, [a, df](std::span<const double> g) {
        auto ad = a.data();
        Grads r(1, std::vector<double>(g.size()));
        for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = g[i] * df(ad[i]);
        return r;
    });
}
} // namespace

Tensor gelu(const Tensor& a) {
    return unary(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluCoeff * (x + kGeluCubic * x * x * x))); },
        [](double x) {
            double t = std::tanh(kGeluCoeff * (x + kGeluCubic * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluCoeff * (1.0 + 3.0 * kGeluCubic * x * x);
        });
}

Tensor relu(const Tensor& a) {
    return unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double x) {
            double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
    check_defined(table, "embedding_lookup");
    if (table.dim() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
    if (shape_numel(ids_shape) != ids.size()) throw DimensionError("embedding_lookup: ids do not match " + shape_str(ids_shape));
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    auto td = table.data();
    std::vector<double> out;
    out.reserve(ids.size() * d);
    for (std::int64_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
        auto row = td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d);
        out.insert(out.end(), row, row + static_cast<std::ptrdiff_t>(d));
    }
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    std::vector<std::int64_t> id_copy(ids.begin(), ids.end());
    return make_result(std::move(out_shape), std::move(out), "embedding_lookup", {table},
                       [id_copy, vocab, d](std::span<const double> g) {
                           Grads r(1, std::vector<double>(vocab * d, 0.0));
                           for (std::size_t i = 0; i < id_copy.size(); ++i) {
                               auto row = static_cast<std::size_t>(id_copy[i]) * d;
                               for (std::size_t j = 0; j < d; ++j) r[0][row + j] += g[i * d + j];
                           }
                           return r;
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
    check_defined(logits, "cross_entropy");
    if (logits.dim() != 2) throw DimensionError("cross_entropy: logits must be (batch, classes), got " + shape_str(logits.shape()));
    const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
    if (labels.size() != batch)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
    auto ld = logits.data();
    auto probs = std::make_shared<std::vector<double>>(ld.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        std::int64_t y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw IndexError("cross_entropy: label " + std::to_string(y) + " outside " + std::to_string(classes) + " classes");
        const double* x = ld.data() + b * classes;
        double mx = *std::max_element(x, x + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(x[c] - mx);
        double lse = mx + std::log(z);
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(x[c] - lse);
        loss += lse - x[static_cast<std::size_t>(y)];
    }
    loss /= static_cast<double>(batch);
    std::vector<std::int64_t> label_copy(labels.begin(), labels.end());
    return make_result({}, {loss}, "cross_entropy", {logits},
                       [probs, label_copy, batch, classes](std::span<const double> g) {
                           Grads r(1, *probs);
                           double w = g[0] / static_cast<double>(batch);
                           for (std::size_t b = 0; b < batch; ++b) {
                               r[0][b * classes + static_cast<std::size_t>(label_copy[b])] -= 1.0;
                               for (std::size_t c = 0; c < classes; ++c) r[0][b * classes + c] *= w;
                           }
                           return r;
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
    return make_result(std::move(shape), a.to_vector(), "reshape", {a},
                       [](std::span<const double> g) { return Grads{std::vector<double>(g.begin(), g.end())}; });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    check_defined(a, "transpose");
    const Shape& s = a.shape();
    if (axis0 >= s.size() || axis1 >= s.size())
        throw IndexError("transpose: axes out of range for " + shape_str(s));
    Shape out_shape = s;
    std::swap(out_shape[axis0], out_shape[axis1]);

    const std::size_t n = s.size();
    std::vector<std::size_t> in_strides(n, 1);
    for (std::size_t i = n; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
    std::vector<std::size_t> perm_strides = in_strides;
    std::swap(perm_strides[axis0], perm_strides[axis1]);

    // out flat index -> in flat index
    auto index_map = std::make_shared<std::vector<std::size_t>>(a.numel());
    std::vector<std::size_t> idx(n, 0);
    for (std::size_t flat = 0; flat < a.numel(); ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < n; ++i) src += idx[i] * perm_strides[i];
        (*index_map)[flat] = src;
        for (std::size_t i = n; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[(*index_map)[i]];
    return make_result(std::move(out_shape), std::move(out), "transpose", {a}, [index_map](std::span<const double> g) {
        Grads r(1, std::vector<double>(g.size()));
        for (std::size_t i = 0; i < g.size(); ++i) r[0][(*index_map)[i]] = g[i];
        return r;
    });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    check_defined(a, "broadcast_to");
    if (!is_suffix(a.shape(), shape)) dim_error("broadcast_to", a.shape(), shape);
    const std::size_t inner = a.numel(), total = shape_numel(shape);
    auto ad = a.data();
    std::vector<double> out(total);
    for (std::size_t i = 0; i < total; ++i) out[i] = ad[i % inner];
    return make_result(shape, std::move(out), "broadcast_to", {a},
                       [inner](std::span<const double> g) { return Grads{reduce_to_suffix(g, inner)}; });
}

Tensor select_row(const Tensor& a, std::size_t index) {
    check_defined(a, "select_row");
    const Shape& s = a.shape();
    if (s.size() < 2) throw DimensionError("select_row: need at least 2 axes, got " + shape_str(s));
    const std::size_t rows = s[s.size() - 2], d = s.back();
    if (index >= rows) throw IndexError("select_row: row " + std::to_string(index) + " of " + std::to_string(rows));
    const std::size_t outer = a.numel() / (rows * d);
    Shape out_shape(s.begin(), s.end() - 2);
    out_shape.push_back(d);
    auto ad = a.data();
    std::vector<double> out(outer * d);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < d; ++j) out[o * d + j] = ad[(o * rows + index) * d + j];
    std::size_t total = a.numel();
    return make_result(std::move(out_shape), std::move(out), "select_row", {a},
                       [outer, rows, d, index, total](std::span<const double> g) {
                           Grads r(1, std::vector<double>(total, 0.0));
                           for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < d; ++j) r[0][(o * rows + index) * d + j] = g[o * d + j];
                           return r;
                       });
}

Tensor mask_keys(const Tensor& scores, std::span<const std::uint8_t> key_mask, double fill) {
    check_defined(scores, "mask_keys");
    const Shape& s = scores.shape();
    if (s.size() < 2) throw DimensionError("mask_keys: need at least 2 axes, got " + shape_str(s));
    const std::size_t batch = s[0], keys = s.back();
    if (key_mask.size() != batch * keys)
        throw DimensionError("mask_keys: mask of " + std::to_string(key_mask.size()) + " entries for scores " + shape_str(s));
    const std::size_t per_batch = scores.numel() / batch;
    auto sd = scores.data();
    std::vector<double> out(sd.begin(), sd.end());
    auto keep = std::make_shared<std::vector<std::uint8_t>>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t b = i / per_batch, k = i % keys;
        (*keep)[i] = key_mask[b * keys + k] ? 1 : 0;
        if (!(*keep)[i]) out[i] = fill;
    }
    return make_result(s, std::move(out), "mask_keys", {scores}, [keep](std::span<const double> g) {
        Grads r(1, std::vector<double>(g.size()));
        for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = (*keep)[i] ? g[i] : 0.0;
        return r;
    });
}

} // namespace deltakit
