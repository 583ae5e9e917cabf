#include "deltakit/lifecycle.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "deltakit/addressing.hpp"
#include "deltakit/errors.hpp"
#include "deltakit/random.hpp"

namespace deltakit {

using nlohmann::json;

// ---- config ----------------------------------------------------------------

namespace {

json config_document(const DeltaConfig& c) {
    const auto& hp = c.hyperparams;
    json doc;
    doc["format_version"] = kConfigFormatVersion;
    doc["delta_type"] = std::string(to_string(c.delta_type));
    doc["modified_modules"] = c.modified_modules ? json(*c.modified_modules) : json(nullptr);
    doc["common_naming"] = c.common_naming;
    doc["hyperparams"] = {{"rank", hp.rank},
                          {"alpha", hp.alpha},
                          {"bottleneck", hp.bottleneck},
                          {"activation", std::string(to_string(hp.activation))},
                          {"prefix_len", hp.prefix_len},
                          {"prefix_dp", hp.prefix_dp},
                          {"prefix_mid", hp.prefix_mid}};
    return doc;
}

DeltaConfig config_from_document(const json& doc) {
    if (!doc.is_object()) throw ConfigError("delta config must be a JSON object");
    static const std::set<std::string> known = {"format_version", "delta_type", "modified_modules", "common_naming",
                                                "hyperparams", "targets"};
    for (const auto& [k, v] : doc.items())
        if (!known.contains(k)) throw ConfigError("unknown delta config field \"" + k + "\"");

    DeltaConfig c;
    try {
        if (doc.contains("format_version") && doc["format_version"].get<std::uint32_t>() != kConfigFormatVersion)
            throw ConfigError("unsupported config format_version " + doc["format_version"].dump());
        if (!doc.contains("delta_type")) throw ConfigError("delta config lacks \"delta_type\"");
        c.delta_type = parse_delta_kind(doc["delta_type"].get<std::string>());
        if (doc.contains("modified_modules") && !doc["modified_modules"].is_null())
            c.modified_modules = doc["modified_modules"].get<std::vector<std::string>>();
        c.common_naming = doc.value("common_naming", false);
        if (doc.contains("hyperparams")) {
            const json& h = doc["hyperparams"];
            if (!h.is_object()) throw ConfigError("\"hyperparams\" must be an object");
            auto& hp = c.hyperparams;
            for (const auto& [k, v] : h.items()) {
                if (k == "rank") hp.rank = v.get<std::size_t>();
                else if (k == "alpha") hp.alpha = v.get<double>();
                else if (k == "bottleneck") hp.bottleneck = v.get<std::size_t>();
                else if (k == "activation") hp.activation = parse_activation(v.get<std::string>());
                else if (k == "prefix_len") hp.prefix_len = v.get<std::size_t>();
                else if (k == "prefix_dp") hp.prefix_dp = v.get<std::size_t>();
                else if (k == "prefix_mid") hp.prefix_mid = v.get<std::size_t>();
                else throw ConfigError("unknown hyperparameter \"" + k + "\"");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed delta config: ") + e.what());
    }
    return c;
}

} // namespace

std::string DeltaConfig::to_json() const { return config_document(*this).dump(2); }

DeltaConfig DeltaConfig::from_json(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("delta config is not valid JSON: ") + e.what());
    }
    return config_from_document(doc);
}

// ---- naming ----------------------------------------------------------------

const NameMapping& name_mapping(Convention convention) {
    static const NameMapping a{Convention::A,
                               {{"attn.q", "attention.self.query"},
                                {"attn.k", "attention.self.key"},
                                {"attn.v", "attention.self.value"},
                                {"attn.proj", "attention.output.dense"},
                                {"ff.w1", "intermediate.dense"},
                                {"ff.w2", R"(re:encoder\.layer\.\d+\.output\.dense)"},
                                {"layer_norm", R"(re:encoder\.layer\.\d+\.(attention\.)?output\.LayerNorm)"}}};
    static const NameMapping b{Convention::B,
                               {{"attn.q", "SelfAttention.q"},
                                {"attn.k", "SelfAttention.k"},
                                {"attn.v", "SelfAttention.v"},
                                {"attn.proj", "SelfAttention.o"},
                                {"ff.w1", "DenseReluDense.wi"},
                                {"ff.w2", "DenseReluDense.wo"},
                                {"layer_norm", "layer_norm"}}};
    return convention == Convention::A ? a : b;
}

std::optional<Convention> detect_convention(const NodePtr& model) {
    for (Convention c : {Convention::A, Convention::B}) {
        const auto& mapping = name_mapping(c);
        std::vector<AddressPattern> patterns;
        for (const auto& [name, pattern] : mapping.patterns) patterns.emplace_back(pattern);
        Resolution r = resolve(model, patterns);
        if (std::all_of(r.per_pattern.begin(), r.per_pattern.end(), [](const auto& p) { return !p.paths.empty(); }))
            return c;
    }
    return std::nullopt;
}

std::vector<AddressPattern> map_common_names(const std::vector<std::string>& names, Convention convention) {
    const auto& mapping = name_mapping(convention);
    std::vector<AddressPattern> out;
    for (const auto& n : names) {
        auto it = mapping.patterns.find(n);
        if (it == mapping.patterns.end())
            throw ConfigError("\"" + n + "\" is not a common module name (expected one of attn.q, attn.k, attn.v, "
                                         "attn.proj, ff.w1, ff.w2, layer_norm)");
        out.emplace_back(it->second);
    }
    return out;
}

DeltaConfig auto_default(DeltaKind kind) {
    DeltaConfig c;
    c.delta_type = kind;
    c.common_naming = true;
    switch (kind) {
    case DeltaKind::Lora: c.modified_modules = {"attn.q", "attn.v"}; break;
    case DeltaKind::Adapter: c.modified_modules = {"attn.proj", "ff.w2"}; break;
    case DeltaKind::Bitfit:
        c.modified_modules = std::vector<std::string>(kCommonNames.begin(), kCommonNames.end());
        break;
    case DeltaKind::Prefix: c.modified_modules = {"attn.k", "attn.v"}; break;
    }
    return c;
}

DeltaConfig auto_default(std::string_view kind) { return auto_default(parse_delta_kind(kind)); }

Route route_for(DeltaKind kind) { return kind == DeltaKind::Lora ? Route::Parallel : Route::OutputModify; }
MergeOp merge_for(DeltaKind kind) { return kind == DeltaKind::Prefix ? MergeOp::Replace : MergeOp::Add; }

// ---- delta object ----------------------------------------------------------

std::string Binding::key_prefix() const { return target_path + "." + std::string(kDeltasChild) + "." + slot; }

std::size_t DeltaObject::parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : bindings_) n += b.module.parameter_count();
    return n;
}

std::vector<std::pair<std::string, Tensor>> DeltaObject::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& b : bindings_)
        for (const auto& [name, t] : deltakit::named_parameters(b.module.node))
            out.emplace_back(b.key_prefix() + "." + name, t);
    return out;
}

ParameterSnapshot DeltaObject::delta_snapshot() const { return snapshot_of(named_parameters(), false); }

LoadReport DeltaObject::load_delta_snapshot(const ParameterSnapshot& snap, bool strict) {
    return load_parameters(named_parameters(), snap, strict);
}

namespace {

bool inside_deltas(const std::string& path) {
    for (const auto& seg : split_path(path))
        if (seg == kDeltasChild) return true;
    return false;
}

} // namespace

DeltaObject build(const DeltaConfig& config, const NodePtr& model, std::uint64_t seed) {
    DeltaObject obj;
    obj.config_ = config;
    if (!obj.config_.modified_modules) {
        obj.config_ = auto_default(config.delta_type);
        obj.config_.hyperparams = config.hyperparams;
    }
    const DeltaConfig& cfg = obj.config_;
    const auto& names = *cfg.modified_modules;
    if (names.empty()) throw ConfigError("modified_modules is empty");

    std::optional<Convention> convention = detect_convention(model);
    std::vector<AddressPattern> patterns;
    if (cfg.common_naming) {
        if (!convention) throw ConfigError("common naming requested but the model matches no registered convention");
        patterns = map_common_names(names, *convention);
    } else {
        patterns.assign(names.begin(), names.end());
    }

    // Resolve, dropping anything that lives inside an attached delta subtree.
    Resolution r = resolve(model, patterns);
    std::vector<std::string> targets;
    std::map<std::string, std::string> common_of;
    for (std::size_t i = 0; i < r.per_pattern.size(); ++i) {
        auto& paths = r.per_pattern[i].paths;
        std::erase_if(paths, inside_deltas);
        if (paths.empty()) {
            std::string shown = names[i];
            if (cfg.common_naming) shown += " (-> " + patterns[i].raw() + ")";
            throw EmptyMatchError("pattern \"" + shown + "\" matches no module");
        }
        if (cfg.common_naming)
            for (const auto& p : paths) common_of.emplace(p, names[i]);
    }
    for (const auto& p : r.all)
        if (!inside_deltas(p)) targets.push_back(p);

    if (cfg.delta_type == DeltaKind::Prefix) {
        std::set<std::string> allowed;
        if (convention) {
            for (const auto& p : resolve(model, map_common_names({"attn.k", "attn.v"}, *convention)).all) allowed.insert(p);
        }
        for (const auto& t : targets)
            if (!allowed.contains(t))
                throw PlacementError("prefix deltas can only be attached to attention key/value projections; \"" + t +
                                     "\" is not one");
        // key and value of one attention must grow together
        const std::set<std::string> chosen(targets.begin(), targets.end());
        auto parent = [](const std::string& p) { return p.substr(0, p.rfind('.')); };
        for (const auto& t : targets)
            for (const auto& a : allowed)
                if (parent(a) == parent(t) && !chosen.contains(a))
                    throw PlacementError("prefix delta on \"" + t + "\" also needs \"" + a +
                                         "\" so keys and values stay the same length");
    }

    ShapeRecord record;
    if (cfg.delta_type == DeltaKind::Adapter || cfg.delta_type == DeltaKind::Prefix) record = capture_shapes(model, targets);

    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& path = targets[i];
        DeltaSizing sizing = DeltaSizing::from_params(*get_by_path(model, path));
        if (auto it = record.dims.find(path); it != record.dims.end()) sizing.runtime = it->second;
        DeltaModule module = create_delta(cfg.delta_type, sizing, cfg.hyperparams, mix_seed(seed, i));
        std::optional<std::string> common;
        if (auto it = common_of.find(path); it != common_of.end()) common = it->second;
        std::string slot = std::string(to_string(cfg.delta_type)) + "_0";
        obj.bindings_.push_back(
            {path, std::move(common), std::move(module), route_for(cfg.delta_type), merge_for(cfg.delta_type), slot});
    }
    obj.model_ = model;
    return obj;
}

namespace {

void check_target(const DeltaObject& obj, const std::weak_ptr<ModuleNode>& bound, const NodePtr& model) {
    (void)obj;
    if (bound.lock() != model) throw StateError("delta object was built for a different model");
}

std::string free_slot(const ModuleNode& container, DeltaKind kind) {
    for (std::size_t i = 0;; ++i) {
        std::string name = std::string(to_string(kind)) + "_" + std::to_string(i);
        if (!container.child(name)) return name;
    }
}

void unregister(const NodePtr& target, const Binding& b) {
    NodePtr container = target->child(kDeltasChild);
    if (!container) return;
    if (container->child(b.slot) == b.module.node) container->remove_child(b.slot);
    if (container->children().empty() && container->params().empty()) target->remove_child(kDeltasChild);
}

} // namespace

void attach(DeltaObject& obj, const NodePtr& model) {
    check_target(obj, obj.model_, model);
    if (obj.attached_) throw StateError("delta object is already attached");

    std::size_t done = 0;
    try {
        for (; done < obj.bindings_.size(); ++done) {
            Binding& b = obj.bindings_[done];
            NodePtr target = get_by_path(model, b.target_path);
            NodePtr container = target->child(kDeltasChild);
            if (!container) {
                container = target->add_child(ModuleNode::create(std::string(kDeltasChild), "Deltas"));
                container->mark_delta(true);
            }
            b.slot = free_slot(*container, b.module.kind);
            b.module.node->rename(b.slot);
            container->add_child(b.module.node);
            try {
                install(*target, b.module.node, b.route, b.merge);
            } catch (...) {
                unregister(target, b);
                throw;
            }
        }
    } catch (...) {
        while (done-- > 0) {
            Binding& b = obj.bindings_[done];
            NodePtr target = get_by_path(model, b.target_path);
            uninstall(*target, b.module.node);
            unregister(target, b);
        }
        throw;
    }
    obj.attached_ = true;
}

void detach(DeltaObject& obj, const NodePtr& model) {
    check_target(obj, obj.model_, model);
    if (!obj.attached_) throw StateError("delta object is not attached");
    for (auto it = obj.bindings_.rbegin(); it != obj.bindings_.rend(); ++it) {
        NodePtr target = get_by_path(model, it->target_path);
        uninstall(*target, it->module.node);
        unregister(target, *it);
    }
    obj.attached_ = false;
}

std::size_t freeze(const NodePtr& model, const std::vector<AddressPattern>& exclude, bool set_state_dict) {
    std::size_t n = set_trainable(model, false, exclude);
    if (set_state_dict) model->set_trainable_only_snapshots(true);
    return n;
}

// ---- persistence -----------------------------------------------------------

void save_finetuned(const DeltaObject& obj, const NodePtr& model, const std::filesystem::path& dir) {
    (void)model;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create \"" + dir.string() + "\": " + ec.message());

    json doc = json::parse(obj.config().to_json());
    json targets = json::array();
    for (const auto& b : obj.bindings()) targets.push_back(b.key_prefix());
    doc["targets"] = targets;

    auto config_path = dir / kConfigFile;
    std::ofstream out(config_path, std::ios::trunc);
    if (!out) throw IoError("cannot open \"" + config_path.string() + "\" for writing");
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("failed writing \"" + config_path.string() + "\"");

    write_snapshot(obj.delta_snapshot(), dir / kDeltaFile);
}

DeltaObject from_finetuned(const std::filesystem::path& dir, const NodePtr& model) {
    auto config_path = dir / kConfigFile;
    if (!std::filesystem::exists(config_path))
        throw MissingConfigError("no " + std::string(kConfigFile) + " in \"" + dir.string() + "\"");
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open \"" + config_path.string() + "\"");
    std::stringstream text;
    text << in.rdbuf();

    json doc;
    try {
        doc = json::parse(text.str());
    } catch (const json::exception& e) {
        throw ConfigError("\"" + config_path.string() + "\" is not valid JSON: " + e.what());
    }
    DeltaConfig config = config_from_document(doc);
    ParameterSnapshot saved = read_snapshot(dir / kDeltaFile);

    DeltaObject obj = build(config, model);
    attach(obj, model);
    try {
        std::vector<std::string> prefixes;
        for (const auto& b : obj.bindings()) prefixes.push_back(b.key_prefix());
        if (doc.contains("targets")) {
            auto saved_prefixes = doc["targets"].get<std::vector<std::string>>();
            if (saved_prefixes != prefixes) {
                if (saved_prefixes.size() != prefixes.size())
                    throw KeyError("checkpoint has " + std::to_string(saved_prefixes.size()) + " bindings, model yields " +
                                   std::to_string(prefixes.size()));
                auto target_of = [](const std::string& prefix) { return prefix.substr(0, prefix.rfind(".deltas.")); };
                for (std::size_t i = 0; i < prefixes.size(); ++i)
                    if (!config.common_naming && target_of(prefixes[i]) != target_of(saved_prefixes[i]))
                        throw KeyError("checkpoint position \"" + target_of(saved_prefixes[i]) +
                                       "\" does not exist on this model");
                // Positions differ (other slots in use or another naming
                // convention); bindings correspond one-to-one in order.
                ParameterSnapshot remapped;
                for (auto& [key, entry] : saved.entries) {
                    auto match = std::find_if(saved_prefixes.begin(), saved_prefixes.end(), [&](const std::string& p) {
                        return key.size() > p.size() && key.starts_with(p) && key[p.size()] == '.';
                    });
                    if (match == saved_prefixes.end()) throw KeyError("checkpoint key \"" + key + "\" belongs to no binding");
                    auto idx = static_cast<std::size_t>(match - saved_prefixes.begin());
                    remapped.entries.emplace(prefixes[idx] + key.substr(match->size()), std::move(entry));
                }
                saved = std::move(remapped);
            }
        }
        obj.load_delta_snapshot(saved, true);
    } catch (...) {
        detach(obj, model);
        throw;
    }
    return obj;
}

} // namespace deltakit
