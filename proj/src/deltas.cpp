#include "deltakit/deltas.hpp"

#include "deltakit/errors.hpp"
#include "deltakit/random.hpp"

namespace deltakit {

std::string_view to_string(DeltaKind kind) {
    switch (kind) {
    case DeltaKind::Lora: return "lora";
    case DeltaKind::Adapter: return "adapter";
    case DeltaKind::Bitfit: return "bitfit";
    case DeltaKind::Prefix: return "prefix";
    }
    return "?";
}

DeltaKind parse_delta_kind(std::string_view name) {
    for (auto k : {DeltaKind::Lora, DeltaKind::Adapter, DeltaKind::Bitfit, DeltaKind::Prefix})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown delta type \"" + std::string(name) + "\" (expected lora, adapter, bitfit or prefix)");
}

std::string_view to_string(Activation act) { return act == Activation::Gelu ? "gelu" : "relu"; }

Activation parse_activation(std::string_view name) {
    if (name == "gelu") return Activation::Gelu;
    if (name == "relu") return Activation::Relu;
    throw ConfigError("unknown activation \"" + std::string(name) + "\" (expected gelu or relu)");
}

// ---- runtime initialization ------------------------------------------------

namespace {

// Swaps in recording behaviors and puts the originals back on scope exit.
class ShapeProbe {
public:
    ShapeProbe(const NodePtr& model, const std::vector<std::string>& paths, ShapeRecord& record) {
        for (const auto& path : paths) {
            NodePtr node = get_by_path(model, path);
            if (!node->behavior()) continue;  // containers never run; reported below
            Behavior inner = node->behavior();
            auto probe = std::make_shared<const ForwardFn>(
                [inner, path, &record](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    Tensor out = (*inner)(self, h, ctx);
                    if (!record.dims.contains(path)) {
                        std::size_t d_in = h.dim() ? h.shape().back() : 1;
                        std::size_t d_out = out.dim() ? out.shape().back() : 1;
                        record.dims[path] = {d_in, d_out};
                    }
                    return out;
                });
            node->replace_behavior(probe);
            restore_.emplace_back(node, inner);
        }
    }
    ~ShapeProbe() {
        for (auto it = restore_.rbegin(); it != restore_.rend(); ++it) it->first->replace_behavior(it->second);
    }
    ShapeProbe(const ShapeProbe&) = delete;
    ShapeProbe& operator=(const ShapeProbe&) = delete;

private:
    std::vector<std::pair<NodePtr, Behavior>> restore_;
};

} // namespace

ShapeRecord capture_shapes(const NodePtr& model, const std::vector<std::string>& target_paths) {
    constexpr std::size_t kPseudoSeq = 4;
    ShapeRecord record;
    {
        ShapeProbe probe(model, target_paths, record);
        NoGradGuard no_grad;
        ForwardContext ctx{1, kPseudoSeq, std::vector<std::uint8_t>(kPseudoSeq, 1), {}};
        (*model)(Tensor::zeros({1, kPseudoSeq}), ctx);
    }
    for (const auto& path : target_paths) {
        auto it = record.dims.find(path);
        if (it == record.dims.end())
            throw CaptureError("module \"" + path + "\" was not executed during the pseudo-input forward pass");
        if (it->second.d_in == 0 || it->second.d_out == 0)
            throw CaptureError("module \"" + path + "\" produced an empty feature axis");
    }
    return record;
}

DeltaSizing DeltaSizing::from_params(const ModuleNode& target) {
    DeltaSizing s;
    if (target.has_param("weight")) {
        Tensor w = target.param("weight");
        if (w.dim() == 2 && target.kind() == "Linear") s.weight_shape = w.shape();
    }
    if (target.has_param("bias")) {
        Tensor b = target.param("bias");
        if (b.dim() == 1) s.bias_length = b.numel();
    }
    return s;
}

// ---- modules ---------------------------------------------------------------

std::size_t delta_parameter_count(DeltaKind kind, std::size_t d_in, std::size_t d_out, const DeltaHyperparams& hp) {
    switch (kind) {
    case DeltaKind::Lora: return hp.rank * (d_in + d_out);
    case DeltaKind::Adapter: return d_out * hp.bottleneck + hp.bottleneck + hp.bottleneck * d_out + d_out;
    case DeltaKind::Bitfit: return d_out;
    case DeltaKind::Prefix:
        return hp.prefix_len * hp.prefix_dp + hp.prefix_dp * hp.prefix_mid + hp.prefix_mid + hp.prefix_mid * d_out + d_out;
    }
    return 0;
}

std::size_t DeltaModule::parameter_count() const { return count_parameters(node); }

namespace {

void check_feature(const Tensor& h, std::size_t expected, std::string_view kind) {
    if (h.dim() == 0 || h.shape().back() != expected) {
        throw ShapeError(std::string(kind) + " delta expects trailing dimension " + std::to_string(expected) + ", got " +
                         shape_str(h.dim() ? h.shape() : Shape{}));
    }
}

Tensor activate(Activation act, const Tensor& x) { return act == Activation::Gelu ? gelu(x) : relu(x); }

[[noreturn]] void runtime_missing(DeltaKind kind) {
    throw InitError(std::string(to_string(kind)) +
                    " delta needs hidden-state shapes; run runtime initialization (capture_shapes) first");
}

} // namespace

DeltaModule create_delta(DeltaKind kind, const DeltaSizing& sizing, const DeltaHyperparams& hp, std::uint64_t seed) {
    Rng rng(seed);
    DeltaModule m{kind, nullptr, 0, 0};
    switch (kind) {
    case DeltaKind::Lora: {
        if (!sizing.weight_shape) throw InitError("lora delta needs a linear target with a 2-D weight");
        if (hp.rank == 0) throw ConfigError("lora rank must be >= 1");
        m.d_in = (*sizing.weight_shape)[0];
        m.d_out = (*sizing.weight_shape)[1];
        const double scaling = hp.alpha / static_cast<double>(hp.rank);
        const std::size_t d_in = m.d_in;
        m.node = ModuleNode::create("lora", "LoRA", [scaling, d_in](ModuleNode& self, const Tensor& h, ForwardContext&) {
            check_feature(h, d_in, "lora");
            return scale(matmul(matmul(h, self.param("A")), self.param("B")), scaling);
        });
        m.node->add_param("A", rng.uniform_tensor({m.d_in, hp.rank}, -0.1, 0.1));
        m.node->add_param("B", Tensor::zeros({hp.rank, m.d_out}, true));
        break;
    }
    case DeltaKind::Adapter: {
        if (!sizing.runtime) runtime_missing(kind);
        if (hp.bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
        m.d_in = m.d_out = sizing.runtime->d_out;
        const std::size_t d = m.d_out;
        const Activation act = hp.activation;
        m.node = ModuleNode::create("adapter", "Adapter", [d, act](ModuleNode& self, const Tensor& h, ForwardContext&) {
            check_feature(h, d, "adapter");
            Tensor mid = activate(act, add(matmul(h, self.param("w1")), self.param("b1")));
            return add(matmul(mid, self.param("w2")), self.param("b2"));
        });
        m.node->add_param("w1", rng.uniform_tensor({d, hp.bottleneck}, -0.1, 0.1));
        m.node->add_param("b1", Tensor::zeros({hp.bottleneck}, true));
        m.node->add_param("w2", Tensor::zeros({hp.bottleneck, d}, true));
        m.node->add_param("b2", Tensor::zeros({d}, true));
        break;
    }
    case DeltaKind::Bitfit: {
        if (sizing.bias_length) m.d_out = *sizing.bias_length;
        else if (sizing.weight_shape) m.d_out = (*sizing.weight_shape)[1];
        else throw InitError("bitfit delta needs a target with a bias vector or linear weight");
        m.d_in = m.d_out;
        const std::size_t d = m.d_out;
        m.node = ModuleNode::create("bitfit", "BitFit", [d](ModuleNode& self, const Tensor& h, ForwardContext&) {
            check_feature(h, d, "bitfit");
            return broadcast_to(self.param("b"), h.shape());
        });
        m.node->add_param("b", Tensor::zeros({d}, true));
        break;
    }
    case DeltaKind::Prefix: {
        if (!sizing.runtime) runtime_missing(kind);
        if (hp.prefix_len == 0 || hp.prefix_dp == 0 || hp.prefix_mid == 0)
            throw ConfigError("prefix_len, prefix_dp and prefix_mid must be >= 1");
        m.d_in = m.d_out = sizing.runtime->d_out;
        const std::size_t d = m.d_out, rows = hp.prefix_len;
        m.node = ModuleNode::create("prefix", "Prefix", [d, rows](ModuleNode& self, const Tensor& h, ForwardContext&) {
            check_feature(h, d, "prefix");
            if (h.dim() < 2) throw ShapeError("prefix delta expects (..., seq, d) hidden states, got " + shape_str(h.shape()));
            Tensor hidden = deltakit::tanh(add(matmul(self.param("p"), self.param("mlp_w1")), self.param("mlp_b1")));
            Tensor prefix = add(matmul(hidden, self.param("mlp_w2")), self.param("mlp_b2"));  // (rows, d)
            Shape target = h.shape();
            target[target.size() - 2] = rows;
            return concat_rows(broadcast_to(prefix, target), h);
        });
        m.node->add_param("p", rng.uniform_tensor({rows, hp.prefix_dp}, -0.1, 0.1));
        m.node->add_param("mlp_w1", rng.uniform_tensor({hp.prefix_dp, hp.prefix_mid}, -0.1, 0.1));
        m.node->add_param("mlp_b1", Tensor::zeros({hp.prefix_mid}, true));
        m.node->add_param("mlp_w2", rng.uniform_tensor({hp.prefix_mid, d}, -0.1, 0.1));
        m.node->add_param("mlp_b2", Tensor::zeros({d}, true));
        break;
    }
    }
    m.node->mark_delta(true);
    return m;
}

Tensor delta_forward(const DeltaModule& module, const Tensor& h) {
    ForwardContext ctx;
    return (*module.node)(h, ctx);
}

} // namespace deltakit
