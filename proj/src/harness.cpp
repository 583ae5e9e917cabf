#include "deltakit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "deltakit/errors.hpp"
#include "deltakit/random.hpp"
#include "deltakit/vis.hpp"

namespace deltakit {

using nlohmann::json;

// ---- tasks -----------------------------------------------------------------

std::string_view to_string(TaskId id) {
    switch (id) {
    case TaskId::Parity: return "parity";
    case TaskId::Majority: return "majority";
    case TaskId::FirstToken: return "first-token";
    }
    return "?";
}

TaskId parse_task(std::string_view name) {
    for (auto id : {TaskId::Parity, TaskId::Majority, TaskId::FirstToken})
        if (to_string(id) == name) return id;
    throw ConfigError("unknown task \"" + std::string(name) + "\" (expected parity, majority or first-token)");
}

std::int64_t task_label(TaskId id, const std::vector<std::int64_t>& tokens) {
    std::size_t ones = 0, bits = 0;
    std::int64_t first = -1;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (tokens[i] != kZeroToken && tokens[i] != kOneToken) continue;
        bool one = tokens[i] == kOneToken;
        if (first < 0) first = one ? 1 : 0;
        ones += one ? 1 : 0;
        ++bits;
    }
    switch (id) {
    case TaskId::Parity: return static_cast<std::int64_t>(ones % 2);
    case TaskId::Majority: return 2 * ones > bits ? 1 : 0;
    case TaskId::FirstToken: return first < 0 ? 0 : first;
    }
    return 0;
}

Dataset make_dataset(const TaskSpec& spec) {
    if (spec.bits == 0) throw ConfigError("task needs at least one bit");
    Rng rng(mix_seed(spec.data_seed, static_cast<std::uint64_t>(spec.id)));
    auto draw = [&](std::size_t n) {
        std::vector<Example> out(n);
        for (auto& ex : out) {
            ex.tokens.push_back(kClsToken);
            for (std::size_t b = 0; b < spec.bits; ++b) ex.tokens.push_back((rng.next() >> 63) ? kOneToken : kZeroToken);
            ex.label = task_label(spec.id, ex.tokens);
        }
        return out;
    };
    Dataset d;
    d.train = draw(spec.train_size);
    d.test = draw(spec.test_size);
    return d;
}

TokenBatch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw DimensionError("empty batch");
    std::size_t seq = examples.at(rows.front()).tokens.size();
    TokenBatch b{rows.size(), seq, {}, {}};
    for (std::size_t r : rows) {
        const auto& tok = examples.at(r).tokens;
        if (tok.size() != seq) throw DimensionError("ragged batch");
        b.ids.insert(b.ids.end(), tok.begin(), tok.end());
    }
    b.mask.assign(b.ids.size(), 1);
    return b;
}

std::vector<std::int64_t> predict(const NodePtr& model, const TokenBatch& batch) {
    NoGradGuard no_grad;
    Tensor logits = forward(model, batch);
    const std::size_t classes = logits.size(1);
    std::vector<std::int64_t> out(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        auto row = logits.data().subspan(b * classes, classes);
        out[b] = std::max_element(row.begin(), row.end()) - row.begin();
    }
    return out;
}

double accuracy(const NodePtr& model, const std::vector<Example>& examples) {
    if (examples.empty()) return 0.0;
    std::vector<std::size_t> rows(examples.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    auto pred = predict(model, make_batch(examples, rows));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) hit += pred[i] == examples[i].label ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(examples.size());
}

// ---- backbone spec ---------------------------------------------------------

std::string BackboneSpec::to_json() const {
    json j = {{"convention", std::string(convention_id(convention))},
              {"d_model", config.d_model},
              {"n_heads", config.n_heads},
              {"d_ff", config.d_ff},
              {"n_layers", config.n_layers},
              {"vocab", config.vocab},
              {"max_len", config.max_len},
              {"n_classes", config.n_classes},
              {"seed", config.seed}};
    return j.dump(2);
}

BackboneSpec BackboneSpec::from_json(std::string_view text) {
    try {
        json j = json::parse(text);
        BackboneSpec s;
        s.convention = parse_convention(j.at("convention").get<std::string>());
        s.config.d_model = j.at("d_model");
        s.config.n_heads = j.at("n_heads");
        s.config.d_ff = j.at("d_ff");
        s.config.n_layers = j.at("n_layers");
        s.config.vocab = j.at("vocab");
        s.config.max_len = j.at("max_len");
        s.config.n_classes = j.at("n_classes");
        s.config.seed = j.at("seed");
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed backbone spec: ") + e.what());
    }
}

namespace {

std::string read_text(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open \"" + file.string() + "\"");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot open \"" + file.string() + "\" for writing");
    out << text << '\n';
    if (!out) throw IoError("failed writing \"" + file.string() + "\"");
}

} // namespace

std::optional<DeltaConfig> resolve_delta_spec(std::string_view spec) {
    if (spec == "none") return std::nullopt;
    for (auto k : {DeltaKind::Lora, DeltaKind::Adapter, DeltaKind::Bitfit, DeltaKind::Prefix})
        if (to_string(k) == spec) return auto_default(k);
    std::filesystem::path file(spec);
    if (!std::filesystem::exists(file))
        throw ConfigError("delta spec \"" + std::string(spec) + "\" is neither a delta type nor an existing config file");
    return DeltaConfig::from_json(read_text(file));
}

// ---- vis / count -----------------------------------------------------------

std::string run_vis(const BackboneSpec& backbone, std::string_view delta_spec) {
    NodePtr model = backbone.build();
    std::optional<DeltaObject> obj;
    if (auto cfg = resolve_delta_spec(delta_spec)) {
        obj.emplace(build(*cfg, model));
        attach(*obj, model);
    }
    return structure_graph(model).text;
}

CountReport run_count(const BackboneSpec& backbone, std::string_view delta_spec) {
    NodePtr model = backbone.build();
    CountReport r;
    r.total_params = count_parameters(model);
    if (auto cfg = resolve_delta_spec(delta_spec)) {
        DeltaObject obj = build(*cfg, model);
        for (const auto& b : obj.bindings())
            r.rows.push_back({b.target_path, std::string(to_string(b.module.kind)), b.module.parameter_count()});
        r.delta_params = obj.parameter_count();
    }
    r.ratio = static_cast<double>(r.delta_params) / static_cast<double>(r.total_params);
    return r;
}

std::string CountReport::to_text() const {
    std::ostringstream os;
    os << "total_params " << total_params << '\n';
    os << "delta_params " << delta_params << '\n';
    os << "ratio " << std::setprecision(6) << std::fixed << ratio << '\n';
    for (const auto& row : rows) os << "  " << row.target << " " << row.kind << " " << row.params << '\n';
    return os.str();
}

// ---- training --------------------------------------------------------------

std::string TrainReport::to_json(bool include_wall_time) const {
    json j = {{"task", task},           {"steps", steps},         {"lr", lr},
              {"seed", seed},           {"losses", losses},       {"train_acc", train_acc},
              {"test_acc", test_acc},   {"total_params", total_params},
              {"delta_params", delta_params}, {"ratio", ratio}};
    if (include_wall_time) j["wall_time_s"] = wall_time_s;
    return j.dump(2);
}

std::string TrainReport::summary() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "task " << task << ": " << steps << " steps, lr " << lr << ", seed " << seed << '\n';
    if (!losses.empty()) os << "loss " << losses.front() << " -> " << losses.back() << '\n';
    os << "train_acc " << train_acc << "  test_acc " << test_acc << '\n';
    os << "params total " << total_params << "  delta " << delta_params << "  ratio " << ratio << '\n';
    return os.str();
}

TrainReport run_training(const TrainOptions& opt) {
    auto started = std::chrono::steady_clock::now();
    if (opt.batch_size == 0) throw ConfigError("batch size must be >= 1");
    if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");

    NodePtr model = opt.backbone.build();
    Dataset data = make_dataset(opt.task);
    if (data.train.empty()) throw ConfigError("empty training set");

    std::optional<DeltaObject> obj;
    std::size_t delta_params = 0;
    std::vector<AddressPattern> keep = {"classifier"};
    if (opt.train_pooler) keep.emplace_back("pooler");
    if (opt.delta == "full") {
        delta_params = count_parameters(model);
    } else if (auto cfg = resolve_delta_spec(opt.delta)) {
        obj.emplace(build(*cfg, model, opt.seed));
        attach(*obj, model);
        delta_params = obj->parameter_count();
        keep.emplace_back(std::string(kDeltasChild));
        freeze(model, keep, true);
    } else {
        freeze(model, keep, true);
    }

    auto params = named_parameters(model);
    std::vector<std::pair<std::string, Tensor>> frozen_params, trainable;
    for (const auto& p : params) (p.second.requires_grad() ? trainable : frozen_params).push_back(p);
    const ParameterSnapshot frozen_before = snapshot_of(frozen_params, false);

    TrainReport report;
    report.task = std::string(to_string(opt.task.id));
    report.steps = opt.steps;
    report.lr = opt.lr;
    report.seed = opt.seed;
    report.delta_params = delta_params;
    report.total_params = count_parameters(model) - (obj ? delta_params : 0);
    report.ratio = static_cast<double>(delta_params) / static_cast<double>(report.total_params);

    Rng rng(mix_seed(opt.seed, 0x5eed));
    std::vector<std::size_t> rows(opt.batch_size);
    for (std::size_t step = 0; step < opt.steps; ++step) {
        for (auto& r : rows) r = rng.below(data.train.size());
        TokenBatch batch = make_batch(data.train, rows);
        std::vector<std::int64_t> labels;
        for (std::size_t r : rows) labels.push_back(data.train[r].label);

        for (auto& [key, t] : trainable) t.zero_grad();
        Tensor loss = cross_entropy(forward(model, batch), labels);
        double value = loss.item();
        if (!std::isfinite(value))
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(value) +
                                  "); try a smaller learning rate");
        report.losses.push_back(value);
        backward(loss);
        for (auto& [key, t] : trainable) {
            if (!t.has_grad()) continue;
            auto g = t.grad();
            auto w = t.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= opt.lr * g[i];
        }
    }

    if (snapshot_of(frozen_params, false) != frozen_before)
        throw ContractError("a frozen backbone parameter changed during training");

    report.train_acc = accuracy(model, data.train);
    report.test_acc = accuracy(model, data.test);

    if (opt.out) {
        std::filesystem::create_directories(*opt.out);
        if (obj) save_finetuned(*obj, model, *opt.out);
        std::vector<std::pair<std::string, Tensor>> head;
        auto delta_keys = obj ? obj->named_parameters() : decltype(params){};
        std::set<std::string> skip;
        for (const auto& [k, t] : delta_keys) skip.insert(k);
        for (const auto& p : trainable)
            if (!skip.contains(p.first)) head.push_back(p);
        write_snapshot(snapshot_of(head, false), *opt.out / kHeadFile);
        write_text(*opt.out / kBackboneFile, opt.backbone.to_json());
    }
    report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (opt.out) write_text(*opt.out / kReportFile, report.to_json());
    return report;
}

// ---- multitask -------------------------------------------------------------

std::vector<TaskInput> read_task_inputs(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open \"" + file.string() + "\"");
    std::vector<TaskInput> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        TaskInput ti;
        if (!(ls >> ti.task)) continue;  // blank line
        std::int64_t tok;
        while (ls >> tok) ti.tokens.push_back(tok);
        if (!ls.eof()) throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": malformed token list");
        if (ti.tokens.empty()) throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": no tokens");
        out.push_back(std::move(ti));
    }
    return out;
}

namespace {

void check_backbone(const std::filesystem::path& dir, const BackboneSpec& backbone) {
    auto file = dir / kBackboneFile;
    if (!std::filesystem::exists(file)) return;
    if (BackboneSpec::from_json(read_text(file)) != backbone)
        throw KeyError("checkpoint \"" + dir.string() + "\" was trained on a different backbone");
}

// Attaches a task checkpoint (delta + head) and returns what is needed to undo it.
struct TaskSwap {
    DeltaObject delta;
    ParameterSnapshot previous_head;
};

TaskSwap swap_in(const std::filesystem::path& dir, const NodePtr& model) {
    ParameterSnapshot head = read_snapshot(dir / kHeadFile);
    auto params = named_parameters(model);
    std::vector<std::pair<std::string, Tensor>> head_params;
    for (const auto& p : params)
        if (head.entries.contains(p.first)) head_params.push_back(p);
    ParameterSnapshot previous = snapshot_of(head_params, false);
    DeltaObject obj = from_finetuned(dir, model);
    try {
        load_parameters(head_params, head, true);
    } catch (...) {
        detach(obj, model);
        throw;
    }
    return {std::move(obj), std::move(previous)};
}

void swap_out(TaskSwap& swap, const NodePtr& model) {
    detach(swap.delta, model);
    load_snapshot(model, swap.previous_head, false);
}

TokenBatch single(const std::vector<std::int64_t>& tokens) {
    return TokenBatch::unpadded(1, tokens.size(), tokens);
}

} // namespace

MultitaskResult run_multitask(const MultitaskOptions& opt, const std::vector<TaskInput>& inputs) {
    if (opt.delta_dirs.size() < 2) throw ConfigError("multitask serving needs at least two delta directories");
    for (const auto& dir : opt.delta_dirs) check_backbone(dir, opt.backbone);
    for (const auto& in : inputs)
        if (in.task >= opt.delta_dirs.size())
            throw ConfigError("input refers to task " + std::to_string(in.task) + " but only " +
                              std::to_string(opt.delta_dirs.size()) + " delta directories were given");

    NodePtr model = opt.backbone.build();
    const ParameterSnapshot before = snapshot(model, false);

    MultitaskResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        TaskSwap swap = swap_in(opt.delta_dirs[inputs[i].task], model);
        std::int64_t label = predict(model, single(inputs[i].tokens)).front();
        swap_out(swap, model);
        result.predictions.push_back({i, inputs[i].task, label, -1});
    }
    result.backbone_restored = snapshot(model, false) == before;

    // Isolation oracle: one fresh backbone per task with only that task attached.
    for (std::size_t t = 0; t < opt.delta_dirs.size(); ++t) {
        NodePtr isolated = opt.backbone.build();
        TaskSwap swap = swap_in(opt.delta_dirs[t], isolated);
        for (auto& p : result.predictions)
            if (p.task == t) p.isolated_label = predict(isolated, single(inputs[p.input].tokens)).front();
    }
    result.matches_isolated = std::all_of(result.predictions.begin(), result.predictions.end(),
                                          [](const auto& p) { return p.label == p.isolated_label; });
    return result;
}

std::string MultitaskResult::to_text() const {
    std::ostringstream os;
    for (const auto& p : predictions)
        os << "input " << p.input << " task " << p.task << " -> " << p.label << " (isolated " << p.isolated_label << ")\n";
    os << "matches_isolated " << (matches_isolated ? "yes" : "no") << '\n';
    os << "backbone_restored " << (backbone_restored ? "yes" : "no") << '\n';
    return os.str();
}

} // namespace deltakit
