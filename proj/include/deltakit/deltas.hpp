#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deltakit/modtree.hpp"

namespace deltakit {

enum class DeltaKind { Lora, Adapter, Bitfit, Prefix };
enum class Activation { Gelu, Relu };

std::string_view to_string(DeltaKind kind);
DeltaKind parse_delta_kind(std::string_view name);
std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

struct DeltaHyperparams {
    std::size_t rank = 4;
    double alpha = 4.0;
    std::size_t bottleneck = 8;
    Activation activation = Activation::Gelu;
    std::size_t prefix_len = 4;
    std::size_t prefix_dp = 16;
    std::size_t prefix_mid = 16;

    friend bool operator==(const DeltaHyperparams&, const DeltaHyperparams&) = default;
};

// Feature extents observed on each target during the pseudo-input pass.
struct ShapeRecord {
    struct Dims {
        std::size_t d_in = 0;
        std::size_t d_out = 0;
    };
    std::map<std::string, Dims> dims;
};

// Runs the model once on a pseudo input (batch 1, four zero tokens) with
// recording disabled and reports the last-axis extents of each target's
// input and output.
ShapeRecord capture_shapes(const NodePtr& model, const std::vector<std::string>& target_paths);

// What is known about a target when sizing its delta module.
struct DeltaSizing {
    std::optional<Shape> weight_shape;           // (d_in, d_out) of a linear target
    std::optional<std::size_t> bias_length;      // d_out from the target's bias
    std::optional<ShapeRecord::Dims> runtime;    // filled by capture_shapes

    static DeltaSizing from_params(const ModuleNode& target);
};

struct DeltaModule {
    DeltaKind kind;
    NodePtr node;
    std::size_t d_in = 0;
    std::size_t d_out = 0;

    std::size_t parameter_count() const;
};

// Closed-form parameter count of a delta module of `kind`.
std::size_t delta_parameter_count(DeltaKind kind, std::size_t d_in, std::size_t d_out, const DeltaHyperparams& hp);

DeltaModule create_delta(DeltaKind kind, const DeltaSizing& sizing, const DeltaHyperparams& hp, std::uint64_t seed);

// Evaluates the module's formula on h.
Tensor delta_forward(const DeltaModule& module, const Tensor& h);

} // namespace deltakit
