#include "deltakit/backbones.hpp"

#include <cmath>

#include "deltakit/errors.hpp"
#include "deltakit/random.hpp"

namespace deltakit {

void ToyformerConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid toyformer config: " + what); };
    if (d_model == 0 || n_heads == 0 || d_ff == 0 || n_layers == 0 || vocab == 0 || max_len == 0 || n_classes == 0)
        fail("all extents must be >= 1");
    if (d_model % n_heads != 0)
        fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
}

Convention parse_convention(std::string_view id) {
    if (id == "A") return Convention::A;
    if (id == "B") return Convention::B;
    throw ConfigError("unknown naming convention \"" + std::string(id) + "\" (expected A or B)");
}

std::string_view convention_id(Convention c) { return c == Convention::A ? "A" : "B"; }

TokenBatch TokenBatch::unpadded(std::size_t batch, std::size_t seq, std::vector<std::int64_t> ids) {
    if (ids.size() != batch * seq) throw DimensionError("token batch: expected " + std::to_string(batch * seq) + " ids");
    return TokenBatch{batch, seq, std::move(ids), std::vector<std::uint8_t>(batch * seq, 1)};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            ForwardContext& ctx) {
    if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3)
        throw DimensionError("attention expects (batch, seq, d) projections, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const std::size_t batch = q.size(0), seq = q.size(1), d = q.size(2);
    const std::size_t keys = k.size(1);
    if (k.size(0) != batch || v.size(0) != batch || k.size(2) != d || v.size(2) != d || v.size(1) != keys)
        throw DimensionError("attention key/value shapes " + shape_str(k.shape()) + ", " + shape_str(v.shape()) +
                             " incompatible with query " + shape_str(q.shape()));
    if (keys < seq) throw DimensionError("attention has fewer keys than queries");
    if (ctx.pad_mask.size() != batch * seq) throw DimensionError("attention: pad mask does not match batch");
    const std::size_t dh = d / n_heads, extra = keys - seq;

    auto heads = [&](const Tensor& x, std::size_t rows) {
        return transpose(reshape(x, {batch, rows, n_heads, dh}), 1, 2);  // (b, h, rows, dh)
    };
    Tensor qh = heads(q, seq), kh = heads(k, keys), vh = heads(v, keys);

    std::vector<std::uint8_t> key_mask(batch * keys, 1);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < seq; ++s) key_mask[b * keys + extra + s] = ctx.pad_mask[b * seq + s];

    Tensor scores = scale(bmm(qh, transpose(kh, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = softmax(mask_keys(scores, key_mask));
    if (ctx.probe) ctx.probe(kAttentionProbe, probs);
    return reshape(transpose(bmm(probs, vh), 1, 2), {batch, seq, d});
}

namespace {

class Builder {
public:
    Builder(const ToyformerConfig& c) : cfg_(c), rng_(c.seed) {}

    NodePtr linear(const std::string& name, std::size_t in, std::size_t out) {
        auto node = ModuleNode::create(name, "Linear", [](ModuleNode& self, const Tensor& h, ForwardContext&) {
            return add(matmul(h, self.param("weight")), self.param("bias"));
        });
        node->add_param("weight", rng_.uniform_tensor({in, out}, -0.1, 0.1));
        node->add_param("bias", Tensor::zeros({out}, true));
        return node;
    }

    NodePtr layer_norm_node(const std::string& name) {
        auto node = ModuleNode::create(name, "LayerNorm", [](ModuleNode& self, const Tensor& h, ForwardContext&) {
            return deltakit::layer_norm(h, self.param("weight"), self.param("bias"));
        });
        node->add_param("weight", Tensor::full({cfg_.d_model}, 1.0, true));
        node->add_param("bias", Tensor::zeros({cfg_.d_model}, true));
        return node;
    }

    NodePtr token_embedding(const std::string& name) {
        auto node = ModuleNode::create(name, "Embedding", [](ModuleNode& self, const Tensor& ids, ForwardContext&) {
            std::vector<std::int64_t> idx(ids.numel());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double v = ids.at(i);
                if (v != std::floor(v)) throw IndexError("token id " + std::to_string(v) + " is not an integer");
                idx[i] = static_cast<std::int64_t>(v);
            }
            return embedding_lookup(self.param("weight"), idx, ids.shape());
        });
        node->add_param("weight", rng_.uniform_tensor({cfg_.vocab, cfg_.d_model}, -0.1, 0.1));
        return node;
    }

    // Returns rows 0..S-1 of the position table, S read from `seq_axis` of the input.
    NodePtr position_embedding(const std::string& name, int seq_axis) {
        std::size_t max_len = cfg_.max_len;
        auto node = ModuleNode::create(
            name, "Embedding", [seq_axis, max_len](ModuleNode& self, const Tensor& h, ForwardContext&) {
                std::size_t seq = h.size(seq_axis);
                if (seq > max_len)
                    throw IndexError("sequence length " + std::to_string(seq) + " exceeds max_len " + std::to_string(max_len));
                std::vector<std::int64_t> pos(seq);
                for (std::size_t i = 0; i < seq; ++i) pos[i] = static_cast<std::int64_t>(i);
                return embedding_lookup(self.param("weight"), pos, {seq});
            });
        node->add_param("weight", rng_.uniform_tensor({cfg_.max_len, cfg_.d_model}, -0.1, 0.1));
        return node;
    }

    NodePtr container(const std::string& name, const std::string& kind) { return ModuleNode::create(name, kind); }

    NodePtr pooler() {
        auto node = ModuleNode::create("pooler", "Pooler", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
            return deltakit::tanh((*self.child("dense"))(select_row(h, 0), ctx));
        });
        node->add_child(linear("dense", cfg_.d_model, cfg_.d_model));
        return node;
    }

    NodePtr build_a() {
        const std::size_t d = cfg_.d_model, heads = cfg_.n_heads;
        auto root = ModuleNode::create("model", "ToyformerA", [](ModuleNode& self, const Tensor& ids, ForwardContext& ctx) {
            Tensor h = (*self.child("embeddings"))(ids, ctx);
            h = (*self.child("encoder"))(h, ctx);
            h = (*self.child("pooler"))(h, ctx);
            return (*self.child("classifier"))(h, ctx);
        });

        auto emb = root->add_child(ModuleNode::create(
            "embeddings", "Embeddings", [](ModuleNode& self, const Tensor& ids, ForwardContext& ctx) {
                Tensor h = (*self.child("word_embeddings"))(ids, ctx);
                h = add(h, (*self.child("position_embeddings"))(ids, ctx));
                return (*self.child("LayerNorm"))(h, ctx);
            }));
        emb->add_child(token_embedding("word_embeddings"));
        emb->add_child(position_embedding("position_embeddings", -1));
        emb->add_child(layer_norm_node("LayerNorm"));

        auto encoder = root->add_child(
            ModuleNode::create("encoder", "Encoder", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                Tensor x = h;
                for (const auto& layer : self.child("layer")->children()) x = (*layer)(x, ctx);
                return x;
            }));
        auto layers = encoder->add_child(container("layer", "ModuleList"));
        for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
            auto layer = layers->add_child(ModuleNode::create(
                std::to_string(i), "BertLayer", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    Tensor a = (*self.child("attention"))(h, ctx);
                    Tensor inter = (*self.child("intermediate"))(a, ctx);
                    auto out = self.child("output");
                    return (*out->child("LayerNorm"))(add((*out->child("dense"))(inter, ctx), a), ctx);
                }));

            auto attention = layer->add_child(ModuleNode::create(
                "attention", "BertAttention", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    Tensor a = (*self.child("self"))(h, ctx);
                    auto out = self.child("output");
                    return (*out->child("LayerNorm"))(add((*out->child("dense"))(a, ctx), h), ctx);
                }));
            auto self_attn = attention->add_child(ModuleNode::create(
                "self", "BertSelfAttention", [heads](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    return multi_head_attention((*self.child("query"))(h, ctx), (*self.child("key"))(h, ctx),
                                                (*self.child("value"))(h, ctx), heads, ctx);
                }));
            self_attn->add_child(linear("query", d, d));
            self_attn->add_child(linear("key", d, d));
            self_attn->add_child(linear("value", d, d));
            auto attn_out = attention->add_child(container("output", "BertSelfOutput"));
            attn_out->add_child(linear("dense", d, d));
            attn_out->add_child(layer_norm_node("LayerNorm"));

            auto inter = layer->add_child(ModuleNode::create(
                "intermediate", "BertIntermediate", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    return gelu((*self.child("dense"))(h, ctx));
                }));
            inter->add_child(linear("dense", d, cfg_.d_ff));
            auto out = layer->add_child(container("output", "BertOutput"));
            out->add_child(linear("dense", cfg_.d_ff, d));
            out->add_child(layer_norm_node("LayerNorm"));
        }

        root->add_child(pooler());
        root->add_child(linear("classifier", d, cfg_.n_classes));
        return root;
    }

    NodePtr build_b() {
        const std::size_t d = cfg_.d_model, heads = cfg_.n_heads;
        auto root = ModuleNode::create("model", "ToyformerB", [](ModuleNode& self, const Tensor& ids, ForwardContext& ctx) {
            Tensor h = (*self.child("shared"))(ids, ctx);
            h = (*self.child("encoder"))(h, ctx);
            h = (*self.child("pooler"))(h, ctx);
            return (*self.child("classifier"))(h, ctx);
        });
        root->add_child(token_embedding("shared"));

        auto encoder = root->add_child(
            ModuleNode::create("encoder", "T5Stack", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                Tensor x = add(h, (*self.child("embed_positions"))(h, ctx));
                x = (*self.child("embed_layer_norm"))(x, ctx);
                for (const auto& block : self.child("block")->children()) x = (*block)(x, ctx);
                return x;
            }));
        encoder->add_child(position_embedding("embed_positions", -2));
        encoder->add_child(layer_norm_node("embed_layer_norm"));
        auto blocks = encoder->add_child(container("block", "ModuleList"));
        for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
            auto block = blocks->add_child(
                ModuleNode::create(std::to_string(i), "T5Block", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    Tensor x = h;
                    for (const auto& sub : self.child("layer")->children()) x = (*sub)(x, ctx);
                    return x;
                }));
            auto sublayers = block->add_child(container("layer", "ModuleList"));

            auto attn_layer = sublayers->add_child(ModuleNode::create(
                "0", "T5LayerSelfAttention", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    return (*self.child("layer_norm"))(add((*self.child("SelfAttention"))(h, ctx), h), ctx);
                }));
            auto attn = attn_layer->add_child(ModuleNode::create(
                "SelfAttention", "T5Attention", [heads](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    Tensor a = multi_head_attention((*self.child("q"))(h, ctx), (*self.child("k"))(h, ctx),
                                                    (*self.child("v"))(h, ctx), heads, ctx);
                    return (*self.child("o"))(a, ctx);
                }));
            for (const char* name : {"q", "k", "v", "o"}) attn->add_child(linear(name, d, d));
            attn_layer->add_child(layer_norm_node("layer_norm"));

            auto ff_layer = sublayers->add_child(
                ModuleNode::create("1", "T5LayerFF", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    return (*self.child("layer_norm"))(add((*self.child("DenseReluDense"))(h, ctx), h), ctx);
                }));
            auto ff = ff_layer->add_child(ModuleNode::create(
                "DenseReluDense", "T5DenseReluDense", [](ModuleNode& self, const Tensor& h, ForwardContext& ctx) {
                    return (*self.child("wo"))(relu((*self.child("wi"))(h, ctx)), ctx);
                }));
            ff->add_child(linear("wi", d, cfg_.d_ff));
            ff->add_child(linear("wo", cfg_.d_ff, d));
            ff_layer->add_child(layer_norm_node("layer_norm"));
        }

        root->add_child(pooler());
        root->add_child(linear("classifier", d, cfg_.n_classes));
        return root;
    }

private:
    ToyformerConfig cfg_;
    Rng rng_;
};

} // namespace

NodePtr build_toyformer(const ToyformerConfig& config, Convention convention) {
    config.validate();
    Builder b(config);
    return convention == Convention::A ? b.build_a() : b.build_b();
}

Tensor forward(const NodePtr& model, const TokenBatch& batch) {
    if (batch.ids.size() != batch.batch * batch.seq || batch.mask.size() != batch.batch * batch.seq)
        throw DimensionError("token batch ids/mask do not match (" + std::to_string(batch.batch) + ", " +
                             std::to_string(batch.seq) + ")");
    if (batch.batch == 0 || batch.seq == 0) throw DimensionError("empty token batch");
    ForwardContext ctx{batch.batch, batch.seq, batch.mask, {}};
    std::vector<double> ids(batch.ids.begin(), batch.ids.end());
    return (*model)(Tensor::from({batch.batch, batch.seq}, std::move(ids)), ctx);
}

} // namespace deltakit
