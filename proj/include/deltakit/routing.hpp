#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "deltakit/modtree.hpp"

namespace deltakit {

// Where a delta module reads its input and which hidden state it modifies.
//   InputModify:  h_in  <- merge(h_in,  delta(h_in)),  then the original forward
//   OutputModify: h_out <- merge(h_out, delta(h_out))
//   Parallel:     h_out <- merge(h_out, delta(h_in))
enum class Route { InputModify, OutputModify, Parallel };

// Add: h + delta (shapes must match). Replace: delta output supersedes h.
enum class MergeOp { Add, Replace };

std::string_view to_string(Route r);
std::string_view to_string(MergeOp m);

// Interception state kept on a wrapped node.
class Interception : public Interceptor {
public:
    struct Entry {
        NodePtr delta;
        Route route;
        MergeOp merge;
    };

    const std::string& target_path() const noexcept { return target_path_; }
    const Behavior& original() const noexcept { return original_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

private:
    friend void install(ModuleNode&, NodePtr, Route, MergeOp);
    friend void uninstall(ModuleNode&, const NodePtr&);

    std::string target_path_;
    Behavior original_;
    std::vector<Entry> entries_;
};

// Splices `delta` into `node`'s forward. Multiple installs stack in order.
void install(ModuleNode& node, NodePtr delta, Route route, MergeOp merge);

// Removes one binding; restores the original behavior once none remain.
void uninstall(ModuleNode& node, const NodePtr& delta);

bool is_installed(const ModuleNode& node, const NodePtr& delta);
const Interception* interception_of(const ModuleNode& node);

// Runs a node that must currently be wrapped.
Tensor wrapped_forward(ModuleNode& node, const Tensor& h_in, ForwardContext& ctx);

} // namespace deltakit
