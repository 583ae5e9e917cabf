#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deltakit/backbones.hpp"
#include "deltakit/deltas.hpp"
#include "deltakit/modtree.hpp"
#include "deltakit/routing.hpp"

namespace deltakit {

inline constexpr std::uint32_t kConfigFormatVersion = 1;

struct DeltaConfig {
    DeltaKind delta_type = DeltaKind::Lora;
    // Absent means "use the defaults for delta_type".
    std::optional<std::vector<std::string>> modified_modules;
    DeltaHyperparams hyperparams;
    // modified_modules are common names (attn.q, ff.w2, ...) rather than patterns.
    bool common_naming = false;

    // Canonical JSON with sorted keys.
    std::string to_json() const;
    static DeltaConfig from_json(std::string_view text);

    friend bool operator==(const DeltaConfig&, const DeltaConfig&) = default;
};

// Model-independent names for the positions delta modules usually target.
inline constexpr std::array<std::string_view, 7> kCommonNames = {"attn.q",  "attn.k", "attn.v",    "attn.proj",
                                                                  "ff.w1", "ff.w2",  "layer_norm"};

struct NameMapping {
    Convention convention;
    std::map<std::string, std::string, std::less<>> patterns;  // common name -> address pattern
};

const NameMapping& name_mapping(Convention convention);
// First registered convention whose mapped patterns all resolve on `model`.
std::optional<Convention> detect_convention(const NodePtr& model);
std::vector<AddressPattern> map_common_names(const std::vector<std::string>& names, Convention convention);

DeltaConfig auto_default(DeltaKind kind);
DeltaConfig auto_default(std::string_view kind);

Route route_for(DeltaKind kind);
MergeOp merge_for(DeltaKind kind);

struct Binding {
    std::string target_path;
    std::optional<std::string> common_name;
    DeltaModule module;
    Route route;
    MergeOp merge;
    std::string slot;  // registration name under "<target>.deltas"

    std::string key_prefix() const;
};

class DeltaObject {
public:
    DeltaObject(DeltaObject&&) noexcept = default;
    DeltaObject& operator=(DeltaObject&&) noexcept = default;
    DeltaObject(const DeltaObject&) = delete;
    DeltaObject& operator=(const DeltaObject&) = delete;

    const DeltaConfig& config() const noexcept { return config_; }
    const std::vector<Binding>& bindings() const noexcept { return bindings_; }
    bool attached() const noexcept { return attached_; }
    std::size_t parameter_count() const;

    // Delta parameters keyed as they appear under the model root when attached.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    ParameterSnapshot delta_snapshot() const;
    LoadReport load_delta_snapshot(const ParameterSnapshot& snap, bool strict);

private:
    DeltaObject() = default;
    friend DeltaObject build(const DeltaConfig&, const NodePtr&, std::uint64_t);
    friend void attach(DeltaObject&, const NodePtr&);
    friend void detach(DeltaObject&, const NodePtr&);

    DeltaConfig config_;
    std::vector<Binding> bindings_;
    bool attached_ = false;
    std::weak_ptr<ModuleNode> model_;
};

// Resolves positions, sizes and creates one delta module per target. Nothing
// is installed until attach().
DeltaObject build(const DeltaConfig& config, const NodePtr& model, std::uint64_t seed = 0);
void attach(DeltaObject& object, const NodePtr& model);
void detach(DeltaObject& object, const NodePtr& model);

// Freezes every parameter outside `exclude`. With set_state_dict, later
// snapshot(model) calls keep only trainable parameters.
std::size_t freeze(const NodePtr& model, const std::vector<AddressPattern>& exclude, bool set_state_dict);

inline constexpr std::string_view kConfigFile = "config.json";
inline constexpr std::string_view kDeltaFile = "delta.bin";

void save_finetuned(const DeltaObject& object, const NodePtr& model, const std::filesystem::path& directory);
DeltaObject from_finetuned(const std::filesystem::path& directory, const NodePtr& model);

} // namespace deltakit
