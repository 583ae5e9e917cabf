#include "deltakit/addressing.hpp"

#include <algorithm>

namespace deltakit {

std::vector<std::string> enumerate_paths(const NodePtr& root) {
    std::vector<std::string> out;
    for (auto& [path, node] : named_submodules(root)) out.push_back(std::move(path));
    return out;
}

Resolution resolve(const NodePtr& root, const std::vector<AddressPattern>& patterns) {
    Resolution r;
    for (const auto& p : patterns) r.per_pattern.push_back({p, {}});
    for (const auto& path : enumerate_paths(root)) {
        bool any = false;
        for (auto& entry : r.per_pattern) {
            if (entry.pattern.matches(path)) {
                entry.paths.push_back(path);
                any = true;
            }
        }
        if (any) r.all.push_back(path);
    }
    return r;
}

} // namespace deltakit
