#include "deltakit/vis.hpp"

#include <charconv>
#include <sstream>

#include <json.hpp>

namespace deltakit {

std::string TreeView::label() const {
    if (!range) return name;
    return "[" + std::to_string(range->first) + "-" + std::to_string(range->second) + "]";
}

namespace {

std::optional<std::size_t> index_name(const std::string& name) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), v);
    if (ec != std::errc() || ptr != name.data() + name.size()) return std::nullopt;
    if (name.size() > 1 && name[0] == '0') return std::nullopt;
    return v;
}

bool has_delta(const ModuleNode& node) { return node.is_delta() || node.child(kDeltasChild) != nullptr; }

// Structural fingerprint ignoring the node's own name and any weights.
std::string signature(const ModuleNode& node) {
    std::ostringstream os;
    os << node.kind() << (has_delta(node) ? "!d" : "") << '{';
    for (const auto& [name, t] : node.params()) os << name << shape_str(t.shape()) << (t.requires_grad() ? "t" : "f") << ';';
    for (const auto& c : node.children()) os << c->name() << '=' << signature(*c) << ';';
    os << '}';
    return os.str();
}

TreeView view_of(const ModuleNode& node) {
    TreeView v;
    v.name = node.name();
    v.kind = node.kind();
    v.delta = has_delta(node);
    for (const auto& [name, t] : node.params()) v.params.push_back({name, t.shape(), t.requires_grad()});

    const auto& kids = node.children();
    for (std::size_t i = 0; i < kids.size();) {
        auto first = index_name(kids[i]->name());
        std::size_t j = i + 1;
        if (first) {
            std::string sig = signature(*kids[i]);
            while (j < kids.size()) {
                auto idx = index_name(kids[j]->name());
                if (!idx || *idx != *first + (j - i) || signature(*kids[j]) != sig) break;
                ++j;
            }
        }
        TreeView child = view_of(*kids[i]);
        if (j - i > 1) child.range = std::make_pair(*first, *first + (j - i - 1));
        v.children.push_back(std::move(child));
        i = j;
    }
    return v;
}

std::string compact_shape(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

void render(const TreeView& v, std::string prefix, int depth, std::ostringstream& os) {
    // A node whose only child is a collapsed range is printed as "name.[i-j]".
    if (v.children.size() == 1 && v.children[0].range && v.params.empty() && !v.delta) {
        const TreeView& only = v.children[0];
        render(only, prefix + v.name + ".", depth, os);
        return;
    }
    os << std::string(static_cast<std::size_t>(depth) * 2, ' ') << prefix << v.label() << " (" << v.kind << ")";
    if (v.delta) os << " [d]";
    for (const auto& p : v.params) os << ' ' << p.name << ':' << compact_shape(p.shape) << (p.trainable ? "[t]" : "");
    os << '\n';
    for (const auto& c : v.children) render(c, "", depth + 1, os);
}

nlohmann::json to_json(const TreeView& v) {
    nlohmann::json j;
    j["name"] = v.name;
    j["kind"] = v.kind;
    j["range"] = v.range ? nlohmann::json::array({v.range->first, v.range->second}) : nlohmann::json(nullptr);
    j["delta"] = v.delta;
    j["params"] = nlohmann::json::array();
    for (const auto& p : v.params) j["params"].push_back({{"name", p.name}, {"shape", p.shape}, {"trainable", p.trainable}});
    j["children"] = nlohmann::json::array();
    for (const auto& c : v.children) j["children"].push_back(to_json(c));
    return j;
}

} // namespace

TreeView build_view(const NodePtr& root) { return view_of(*root); }

StructureGraph structure_graph(const NodePtr& root) {
    StructureGraph g{"", build_view(root)};
    std::ostringstream os;
    render(g.view, "", 0, os);
    g.text = os.str();
    return g;
}

std::string export_view(const NodePtr& root) { return to_json(build_view(root)).dump(2); }

} // namespace deltakit
