#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deltakit/backbones.hpp"
#include "deltakit/lifecycle.hpp"

namespace deltakit {

// ---- synthetic tasks -------------------------------------------------------

enum class TaskId { Parity, Majority, FirstToken };

std::string_view to_string(TaskId id);
TaskId parse_task(std::string_view name);

// Sequences are [CLS, b_1 .. b_bits] with each bit rendered as a token.
inline constexpr std::int64_t kClsToken = 3;
inline constexpr std::int64_t kZeroToken = 1;
inline constexpr std::int64_t kOneToken = 2;

struct TaskSpec {
    TaskId id = TaskId::Parity;
    std::size_t bits = 4;
    std::uint64_t data_seed = 7;
    std::size_t train_size = 256;
    std::size_t test_size = 256;
};

struct Example {
    std::vector<std::int64_t> tokens;
    std::int64_t label = 0;
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> test;
};

std::int64_t task_label(TaskId id, const std::vector<std::int64_t>& tokens);
Dataset make_dataset(const TaskSpec& spec);

TokenBatch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& rows);
std::vector<std::int64_t> predict(const NodePtr& model, const TokenBatch& batch);
double accuracy(const NodePtr& model, const std::vector<Example>& examples);

// ---- backbone spec ---------------------------------------------------------

struct BackboneSpec {
    Convention convention = Convention::A;
    ToyformerConfig config;

    std::string to_json() const;
    static BackboneSpec from_json(std::string_view text);
    NodePtr build() const { return build_toyformer(config, convention); }
    friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

// "none" -> nullopt; a delta type name -> its defaults; otherwise a path to a
// JSON DeltaConfig file.
std::optional<DeltaConfig> resolve_delta_spec(std::string_view spec);

// ---- commands --------------------------------------------------------------

std::string run_vis(const BackboneSpec& backbone, std::string_view delta_spec);

struct CountReport {
    struct Row {
        std::string target;
        std::string kind;
        std::size_t params = 0;
    };
    std::size_t total_params = 0;  // backbone only
    std::size_t delta_params = 0;
    double ratio = 0.0;
    std::vector<Row> rows;

    std::string to_text() const;
};

CountReport run_count(const BackboneSpec& backbone, std::string_view delta_spec);

struct TrainOptions {
    BackboneSpec backbone;
    std::string delta = "lora";  // type | config file | "none" | "full"
    TaskSpec task;
    std::size_t steps = 500;
    double lr = 0.1;
    std::uint64_t seed = 1;
    std::size_t batch_size = 32;
    bool train_pooler = false;
    std::optional<std::filesystem::path> out;
};

struct TrainReport {
    std::string task;
    std::size_t steps = 0;
    double lr = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> losses;
    double train_acc = 0.0;
    double test_acc = 0.0;
    std::size_t total_params = 0;
    std::size_t delta_params = 0;
    double ratio = 0.0;
    double wall_time_s = 0.0;

    // Report document; wall time is included only when asked for.
    std::string to_json(bool include_wall_time = true) const;
    std::string summary() const;
};

inline constexpr std::string_view kHeadFile = "head.bin";
inline constexpr std::string_view kBackboneFile = "backbone.json";
inline constexpr std::string_view kReportFile = "report.json";

TrainReport run_training(const TrainOptions& options);

struct MultitaskOptions {
    BackboneSpec backbone;
    std::vector<std::filesystem::path> delta_dirs;
    std::filesystem::path inputs;
};

struct TaskInput {
    std::size_t task = 0;
    std::vector<std::int64_t> tokens;
};

std::vector<TaskInput> read_task_inputs(const std::filesystem::path& file);

struct MultitaskResult {
    struct Prediction {
        std::size_t input = 0;
        std::size_t task = 0;
        std::int64_t label = 0;
        std::int64_t isolated_label = 0;
    };
    std::vector<Prediction> predictions;
    bool matches_isolated = false;
    bool backbone_restored = false;

    std::string to_text() const;
};

MultitaskResult run_multitask(const MultitaskOptions& options, const std::vector<TaskInput>& inputs);

} // namespace deltakit
