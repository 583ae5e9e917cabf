#pragma once

#include <string>
#include <vector>

#include "deltakit/modtree.hpp"
#include "deltakit/pattern.hpp"

namespace deltakit {

struct Resolution {
    struct PerPattern {
        AddressPattern pattern;
        std::vector<std::string> paths;
    };
    std::vector<PerPattern> per_pattern;
    // deduplicated, DFS preorder
    std::vector<std::string> all;
};

// Every module path under root in depth-first preorder; root is "".
std::vector<std::string> enumerate_paths(const NodePtr& root);

Resolution resolve(const NodePtr& root, const std::vector<AddressPattern>& patterns);

} // namespace deltakit
