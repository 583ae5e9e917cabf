#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deltakit/modtree.hpp"

namespace deltakit {

// Render tree of a model. Runs of consecutive index-named siblings ("0", "1",
// ...) with identical structure, flags and delta markers become one node
// covering the range [first, last].
struct TreeView {
    struct Param {
        std::string name;
        Shape shape;
        bool trainable = false;
    };

    std::string name;
    std::optional<std::pair<std::size_t, std::size_t>> range;
    std::string kind;
    bool delta = false;
    std::vector<Param> params;
    std::vector<TreeView> children;

    std::string label() const;
};

struct StructureGraph {
    std::string text;
    TreeView view;
};

TreeView build_view(const NodePtr& root);
StructureGraph structure_graph(const NodePtr& root);

// JSON mirror of build_view(root):
//   {"name", "kind", "range": [first, last] | null, "delta", "params": [{"name", "shape", "trainable"}],
//    "children": [...]}
std::string export_view(const NodePtr& root);

} // namespace deltakit
