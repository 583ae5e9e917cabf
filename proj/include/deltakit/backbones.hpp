#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "deltakit/modtree.hpp"

namespace deltakit {

struct ToyformerConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t n_layers = 2;
    std::size_t vocab = 64;
    std::size_t max_len = 16;
    std::size_t n_classes = 2;
    std::uint64_t seed = 1;

    void validate() const;
    friend bool operator==(const ToyformerConfig&, const ToyformerConfig&) = default;
};

// "A": BERT-style names (encoder.layer.N.attention.self.query, ...).
// "B": T5-style names (encoder.block.N.layer.0.SelfAttention.q, ...).
enum class Convention { A, B };

Convention parse_convention(std::string_view id);
std::string_view convention_id(Convention c);

NodePtr build_toyformer(const ToyformerConfig& config, Convention convention);

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int64_t> ids;   // batch * seq
    std::vector<std::uint8_t> mask;  // batch * seq, non-zero = real token

    static TokenBatch unpadded(std::size_t batch, std::size_t seq, std::vector<std::int64_t> ids);
};

// Logits of shape (batch, n_classes).
Tensor forward(const NodePtr& model, const TokenBatch& batch);

// Multi-head scaled dot-product attention over already projected q, k, v of
// shape (batch, seq, d). Keys/values may carry extra leading rows beyond the
// query length; those rows are always attendable.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            ForwardContext& ctx);

// Tag used when attention probabilities are reported through ForwardContext.
inline constexpr std::string_view kAttentionProbe = "attention_probs";

} // namespace deltakit
