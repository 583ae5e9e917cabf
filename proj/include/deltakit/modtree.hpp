#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deltakit/pattern.hpp"
#include "deltakit/tensor.hpp"

namespace deltakit {

// Per-forward state shared by every node along one pass.
struct ForwardContext {
    std::size_t batch = 0;
    std::size_t seq = 0;
    // batch-major (batch * seq), non-zero marks a real token
    std::vector<std::uint8_t> pad_mask;
    // Optional observer for intermediate tensors (e.g. attention weights).
    std::function<void(std::string_view tag, const Tensor&)> probe;
};

class ModuleNode;
using NodePtr = std::shared_ptr<ModuleNode>;

// Forward behavior of a node: one hidden-state tensor in, one out.
using ForwardFn = std::function<Tensor(ModuleNode& self, const Tensor& h, ForwardContext& ctx)>;
using Behavior = std::shared_ptr<const ForwardFn>;

// Opaque per-node slot owned by whoever rewires the node's forward behavior.
struct Interceptor {
    virtual ~Interceptor() = default;
};

// Child name reserved for attached delta modules.
inline constexpr std::string_view kDeltasChild = "deltas";

class ModuleNode : public std::enable_shared_from_this<ModuleNode> {
public:
    static NodePtr create(std::string local_name, std::string kind, ForwardFn forward = {});

    ModuleNode(const ModuleNode&) = delete;
    ModuleNode& operator=(const ModuleNode&) = delete;

    const std::string& name() const noexcept { return name_; }
    // Only detached (parentless) nodes may be renamed.
    void rename(std::string local_name);
    const std::string& kind() const noexcept { return kind_; }
    ModuleNode* parent() const noexcept { return parent_; }

    NodePtr add_child(NodePtr child);
    NodePtr remove_child(std::string_view name);
    NodePtr child(std::string_view name) const;
    const std::vector<NodePtr>& children() const noexcept { return children_; }

    Tensor add_param(std::string name, Tensor value);
    bool has_param(std::string_view name) const;
    Tensor param(std::string_view name) const;
    const std::vector<std::pair<std::string, Tensor>>& params() const noexcept { return params_; }

    Tensor operator()(const Tensor& h, ForwardContext& ctx);

    const Behavior& behavior() const noexcept { return behavior_; }
    // Installs a new behavior and returns the previous one.
    Behavior replace_behavior(Behavior next);

    const std::shared_ptr<Interceptor>& interceptor() const noexcept { return interceptor_; }
    void set_interceptor(std::shared_ptr<Interceptor> slot) { interceptor_ = std::move(slot); }

    bool is_delta() const noexcept { return is_delta_; }
    void mark_delta(bool flag) noexcept { is_delta_ = flag; }

    // When set, snapshot(root) without an explicit filter keeps only trainable
    // parameters.
    bool trainable_only_snapshots() const noexcept { return trainable_only_snapshots_; }
    void set_trainable_only_snapshots(bool flag) noexcept { trainable_only_snapshots_ = flag; }

private:
    ModuleNode(std::string name, std::string kind, ForwardFn forward);

    std::string name_;
    std::string kind_;
    ModuleNode* parent_ = nullptr;
    std::vector<NodePtr> children_;
    std::vector<std::pair<std::string, Tensor>> params_;
    Behavior behavior_;
    std::shared_ptr<Interceptor> interceptor_;
    bool is_delta_ = false;
    bool trainable_only_snapshots_ = false;
};

std::vector<std::pair<std::string, NodePtr>> named_submodules(const NodePtr& root);
NodePtr get_by_path(const NodePtr& root, std::string_view path);
std::string path_of(const ModuleNode& root, const ModuleNode& node);
// Path of `node` relative to its topmost ancestor.
std::string full_path(const ModuleNode& node);

// Every parameter keyed by "<node path>.<param name>", DFS order.
std::vector<std::pair<std::string, Tensor>> named_parameters(const NodePtr& root);
std::size_t count_parameters(const NodePtr& root);

// Sets requires_grad on every parameter outside subtrees matched by `exclude`.
// Returns how many parameter tensors changed flag.
std::size_t set_trainable(const NodePtr& root, bool flag, const std::vector<AddressPattern>& exclude = {});

struct ParameterSnapshot {
    struct Entry {
        Shape shape;
        std::vector<double> values;
        friend bool operator==(const Entry&, const Entry&) = default;
    };
    std::map<std::string, Entry> entries;

    std::size_t total_values() const;
    friend bool operator==(const ParameterSnapshot&, const ParameterSnapshot&) = default;
};

ParameterSnapshot snapshot_of(const std::vector<std::pair<std::string, Tensor>>& params, bool trainable_only);
ParameterSnapshot snapshot(const NodePtr& root, bool trainable_only);
ParameterSnapshot snapshot(const NodePtr& root);

struct LoadReport {
    std::vector<std::string> missing;
    std::vector<std::string> unexpected;
};

// Validates every key and shape before writing anything.
LoadReport load_parameters(const std::vector<std::pair<std::string, Tensor>>& params, const ParameterSnapshot& snap,
                           bool strict);
LoadReport load_snapshot(const NodePtr& root, const ParameterSnapshot& snap, bool strict);

// Binary encoding: "ODLT", u32 version, u64 manifest length, JSON manifest,
// then little-endian float64 payloads in manifest order.
inline constexpr std::uint32_t kSnapshotFormatVersion = 1;
std::vector<std::uint8_t> encode_snapshot(const ParameterSnapshot& snap);
ParameterSnapshot decode_snapshot(std::span<const std::uint8_t> bytes);
void write_snapshot(const ParameterSnapshot& snap, const std::filesystem::path& file);
ParameterSnapshot read_snapshot(const std::filesystem::path& file);

} // namespace deltakit
