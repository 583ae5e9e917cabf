#include "deltakit/modtree.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "deltakit/errors.hpp"

namespace deltakit {

ModuleNode::ModuleNode(std::string name, std::string kind, ForwardFn forward)
    : name_(std::move(name)), kind_(std::move(kind)) {
    if (forward) behavior_ = std::make_shared<const ForwardFn>(std::move(forward));
}

NodePtr ModuleNode::create(std::string local_name, std::string kind, ForwardFn forward) {
    if (local_name.empty() || local_name.find('.') != std::string::npos)
        throw ContractError("invalid module name \"" + local_name + "\": must be non-empty and contain no '.'");
    return NodePtr(new ModuleNode(std::move(local_name), std::move(kind), std::move(forward)));
}

void ModuleNode::rename(std::string local_name) {
    if (parent_) throw ContractError("cannot rename \"" + name_ + "\" while it is registered under a parent");
    if (local_name.empty() || local_name.find('.') != std::string::npos)
        throw ContractError("invalid module name \"" + local_name + "\": must be non-empty and contain no '.'");
    name_ = std::move(local_name);
}

NodePtr ModuleNode::add_child(NodePtr child) {
    if (!child) throw ContractError("add_child: null child");
    if (child->parent_) throw ContractError("module \"" + child->name_ + "\" already has a parent");
    for (const ModuleNode* p = this; p; p = p->parent_)
        if (p == child.get()) throw ContractError("add_child: \"" + child->name_ + "\" would create a cycle");
    if (this->child(child->name_)) throw ContractError("duplicate child \"" + child->name_ + "\" under \"" + name_ + "\"");
    child->parent_ = this;
    children_.push_back(child);
    return child;
}

NodePtr ModuleNode::remove_child(std::string_view name) {
    auto it = std::find_if(children_.begin(), children_.end(), [&](const NodePtr& c) { return c->name_ == name; });
    if (it == children_.end()) throw NotFoundError("no child \"" + std::string(name) + "\" under \"" + name_ + "\"");
    NodePtr removed = *it;
    children_.erase(it);
    removed->parent_ = nullptr;
    return removed;
}

NodePtr ModuleNode::child(std::string_view name) const {
    for (const auto& c : children_)
        if (c->name_ == name) return c;
    return nullptr;
}

Tensor ModuleNode::add_param(std::string name, Tensor value) {
    if (name.empty() || name.find('.') != std::string::npos)
        throw ContractError("invalid parameter name \"" + name + "\"");
    if (has_param(name)) throw ContractError("duplicate parameter \"" + name + "\" on \"" + name_ + "\"");
    params_.emplace_back(std::move(name), value);
    return value;
}

bool ModuleNode::has_param(std::string_view name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.first == name; });
}

Tensor ModuleNode::param(std::string_view name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw NotFoundError("module \"" + name_ + "\" has no parameter \"" + std::string(name) + "\"");
}

Tensor ModuleNode::operator()(const Tensor& h, ForwardContext& ctx) {
    if (!behavior_) throw ContractError("module \"" + name_ + "\" (" + kind_ + ") has no forward behavior");
    // Hold a reference so a behavior may replace itself mid-call.
    Behavior current = behavior_;
    return (*current)(*this, h, ctx);
}

Behavior ModuleNode::replace_behavior(Behavior next) {
    std::swap(behavior_, next);
    return next;
}

// ---- traversal -------------------------------------------------------------

namespace {
template <class Visit>
void preorder(const NodePtr& node, const std::string& path, Visit&& visit) {
    if (!visit(path, node)) return;
    for (const auto& c : node->children()) preorder(c, join_path(path, c->name()), visit);
}
} // namespace

std::vector<std::pair<std::string, NodePtr>> named_submodules(const NodePtr& root) {
    std::vector<std::pair<std::string, NodePtr>> out;
    preorder(root, "", [&](const std::string& path, const NodePtr& node) {
        out.emplace_back(path, node);
        return true;
    });
    return out;
}

NodePtr get_by_path(const NodePtr& root, std::string_view path) {
    NodePtr node = root;
    std::string resolved;
    for (const auto& seg : split_path(path)) {
        NodePtr next = node->child(seg);
        if (!next) {
            throw NotFoundError("no module at \"" + std::string(path) + "\"; longest resolvable prefix is \"" + resolved +
                                "\"");
        }
        resolved = join_path(resolved, seg);
        node = std::move(next);
    }
    return node;
}

std::string path_of(const ModuleNode& root, const ModuleNode& node) {
    std::vector<const std::string*> names;
    const ModuleNode* p = &node;
    for (; p && p != &root; p = p->parent()) names.push_back(&p->name());
    if (p != &root) throw NotFoundError("module \"" + node.name() + "\" is not under \"" + root.name() + "\"");
    std::string out;
    for (auto it = names.rbegin(); it != names.rend(); ++it) out = join_path(out, **it);
    return out;
}

std::string full_path(const ModuleNode& node) {
    const ModuleNode* top = &node;
    while (top->parent()) top = top->parent();
    return path_of(*top, node);
}

std::vector<std::pair<std::string, Tensor>> named_parameters(const NodePtr& root) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [path, node] : named_submodules(root))
        for (const auto& [name, t] : node->params()) out.emplace_back(join_path(path, name), t);
    return out;
}

std::size_t count_parameters(const NodePtr& root) {
    std::size_t n = 0;
    for (const auto& [key, t] : named_parameters(root)) n += t.numel();
    return n;
}

std::size_t set_trainable(const NodePtr& root, bool flag, const std::vector<AddressPattern>& exclude) {
    std::size_t changed = 0;
    preorder(root, "", [&](const std::string& path, const NodePtr& node) {
        if (std::any_of(exclude.begin(), exclude.end(), [&](const AddressPattern& p) { return p.matches(path); }))
            return false;
        for (const auto& [name, t] : node->params()) {
            if (t.requires_grad() != flag) {
                Tensor(t).set_requires_grad(flag);
                ++changed;
            }
        }
        return true;
    });
    return changed;
}

// ---- snapshots -------------------------------------------------------------

std::size_t ParameterSnapshot::total_values() const {
    std::size_t n = 0;
    for (const auto& [key, e] : entries) n += e.values.size();
    return n;
}

ParameterSnapshot snapshot_of(const std::vector<std::pair<std::string, Tensor>>& params, bool trainable_only) {
    ParameterSnapshot snap;
    for (const auto& [key, t] : params) {
        if (trainable_only && !t.requires_grad()) continue;
        snap.entries.emplace(key, ParameterSnapshot::Entry{t.shape(), t.to_vector()});
    }
    return snap;
}

ParameterSnapshot snapshot(const NodePtr& root, bool trainable_only) {
    return snapshot_of(named_parameters(root), trainable_only);
}

ParameterSnapshot snapshot(const NodePtr& root) { return snapshot(root, root->trainable_only_snapshots()); }

LoadReport load_parameters(const std::vector<std::pair<std::string, Tensor>>& params, const ParameterSnapshot& snap,
                           bool strict) {
    LoadReport report;
    std::map<std::string, Tensor> by_key(params.begin(), params.end());

    for (const auto& [key, t] : by_key) {
        auto it = snap.entries.find(key);
        if (it == snap.entries.end()) {
            report.missing.push_back(key);
        } else if (it->second.shape != t.shape()) {
            throw ShapeError("shape mismatch for \"" + key + "\": model " + shape_str(t.shape()) + ", snapshot " +
                             shape_str(it->second.shape));
        }
    }
    for (const auto& [key, e] : snap.entries)
        if (!by_key.contains(key)) report.unexpected.push_back(key);

    if (strict && (!report.missing.empty() || !report.unexpected.empty())) {
        std::string msg = "strict load failed: ";
        if (!report.missing.empty()) msg += "missing key \"" + report.missing.front() + "\"";
        else msg += "unexpected key \"" + report.unexpected.front() + "\"";
        msg += " (" + std::to_string(report.missing.size()) + " missing, " + std::to_string(report.unexpected.size()) +
               " unexpected)";
        throw KeyError(msg);
    }

    for (auto& [key, t] : by_key) {
        auto it = snap.entries.find(key);
        if (it == snap.entries.end()) continue;
        auto dst = t.mutable_data();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
    return report;
}

LoadReport load_snapshot(const NodePtr& root, const ParameterSnapshot& snap, bool strict) {
    return load_parameters(named_parameters(root), snap, strict);
}

namespace {

constexpr char kMagic[4] = {'O', 'D', 'L', 'T'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(std::span<const std::uint8_t> in, std::size_t at) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[at + i]) << (8 * i);
    return v;
}

} // namespace

std::vector<std::uint8_t> encode_snapshot(const ParameterSnapshot& snap) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& [key, e] : snap.entries) manifest.push_back({{"key", key}, {"shape", e.shape}});
    std::string text = manifest.dump();

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le<std::uint32_t>(out, kSnapshotFormatVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + 8 * snap.total_values());
    for (const auto& [key, e] : snap.entries)
        for (double v : e.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

ParameterSnapshot decode_snapshot(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t header = 4 + 4 + 8;
    if (bytes.size() < header || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw FormatError("not a delta snapshot: bad magic bytes");
    auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kSnapshotFormatVersion)
        throw FormatError("unsupported snapshot format version " + std::to_string(version));
    auto manifest_len = get_le<std::uint64_t>(bytes, 8);
    if (manifest_len > bytes.size() - header) throw FormatError("truncated snapshot manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(header + manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt snapshot manifest: ") + e.what());
    }
    if (!manifest.is_array()) throw FormatError("snapshot manifest is not a list");

    ParameterSnapshot snap;
    std::size_t at = header + manifest_len;
    for (const auto& item : manifest) {
        std::string key;
        Shape shape;
        try {
            key = item.at("key").get<std::string>();
            shape = item.at("shape").get<Shape>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("corrupt snapshot manifest entry: ") + e.what());
        }
        std::size_t n = shape_numel(shape);
        if (n > (bytes.size() - at) / 8) throw FormatError("truncated payload for \"" + key + "\"");
        ParameterSnapshot::Entry e{shape, std::vector<double>(n)};
        for (std::size_t i = 0; i < n; ++i, at += 8) e.values[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, at));
        if (!snap.entries.emplace(std::move(key), std::move(e)).second) throw FormatError("duplicate key in snapshot manifest");
    }
    if (at != bytes.size()) throw FormatError("trailing bytes after snapshot payload");
    return snap;
}

void write_snapshot(const ParameterSnapshot& snap, const std::filesystem::path& file) {
    auto bytes = encode_snapshot(snap);
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open \"" + file.string() + "\" for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing \"" + file.string() + "\"");
}

ParameterSnapshot read_snapshot(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open \"" + file.string() + "\" for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_snapshot(bytes);
}

} // namespace deltakit
