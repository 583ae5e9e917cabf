#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deltakit/errors.hpp"
#include "deltakit/harness.hpp"
#include "deltakit/vis.hpp"

namespace {

using namespace deltakit;

struct BackboneArgs {
    std::string model = "A";
    ToyformerConfig config;

    void add_to(CLI::App& cmd) {
        cmd.add_option("--model", model, "Backbone naming convention")->check(CLI::IsMember({"A", "B"}));
        cmd.add_option("--d-model", config.d_model, "Hidden size")->capture_default_str();
        cmd.add_option("--heads", config.n_heads, "Attention heads")->capture_default_str();
        cmd.add_option("--d-ff", config.d_ff, "Feed-forward size")->capture_default_str();
        cmd.add_option("--layers", config.n_layers, "Encoder layers")->capture_default_str();
        cmd.add_option("--backbone-seed", config.seed, "Backbone initialization seed")->capture_default_str();
    }

    BackboneSpec spec() const {
        BackboneSpec s{parse_convention(model), config};
        s.config.validate();
        return s;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"deltakit: delta-tuning toolkit for toy transformer backbones"};
    app.require_subcommand(1);

    // vis
    BackboneArgs vis_backbone;
    std::string vis_delta = "none";
    std::string vis_json;
    auto* vis = app.add_subcommand("vis", "Print the collapsed module tree");
    vis_backbone.add_to(*vis);
    vis->add_option("--delta", vis_delta, "Delta type, config file or none")->capture_default_str();
    vis->add_option("--json", vis_json, "Also write the tree as JSON to this file");

    // count
    BackboneArgs count_backbone;
    std::string count_delta = "lora";
    auto* count = app.add_subcommand("count", "Report backbone and delta parameter counts");
    count_backbone.add_to(*count);
    count->add_option("--delta", count_delta, "Delta type or config file")->capture_default_str();

    // train
    BackboneArgs train_backbone;
    TrainOptions train_opt;
    std::string task_name = "parity";
    std::string out_dir;
    auto* train = app.add_subcommand("train", "Fine-tune a delta on a synthetic task");
    train_backbone.add_to(*train);
    train->add_option("--delta", train_opt.delta, "Delta type, config file, none or full")->capture_default_str();
    train->add_option("--task", task_name, "Synthetic task")
        ->check(CLI::IsMember({"parity", "majority", "first-token"}))
        ->capture_default_str();
    train->add_option("--bits", train_opt.task.bits, "Bits per sequence")->capture_default_str();
    train->add_option("--data-seed", train_opt.task.data_seed, "Dataset seed")->capture_default_str();
    train->add_option("--steps", train_opt.steps, "SGD steps")->capture_default_str();
    train->add_option("--lr", train_opt.lr, "Learning rate")->capture_default_str();
    train->add_option("--batch-size", train_opt.batch_size, "Minibatch size")->capture_default_str();
    train->add_option("--seed", train_opt.seed, "Delta initialization and sampling seed")->capture_default_str();
    train->add_option("--out", out_dir, "Checkpoint directory");
    train->add_flag("--train-pooler", train_opt.train_pooler, "Also train the pooler");

    // multitask
    BackboneArgs mt_backbone;
    std::vector<std::string> mt_dirs;
    std::string mt_inputs;
    auto* mt = app.add_subcommand("multitask", "Serve several task checkpoints on one shared backbone");
    mt_backbone.add_to(*mt);
    mt->add_option("--delta-dir", mt_dirs, "Task checkpoint directory (repeat; index = task id)")->required();
    mt->add_option("--inputs", mt_inputs, "Lines of \"<task> tok tok ...\"")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*vis) {
            auto spec = vis_backbone.spec();
            std::cout << run_vis(spec, vis_delta);
            if (!vis_json.empty()) {
                NodePtr model = spec.build();
                std::optional<DeltaObject> obj;
                if (auto cfg = resolve_delta_spec(vis_delta)) {
                    obj.emplace(build(*cfg, model));
                    attach(*obj, model);
                }
                std::ofstream out(vis_json);
                if (!out) throw IoError("cannot open \"" + vis_json + "\" for writing");
                out << export_view(model) << '\n';
            }
        } else if (*count) {
            std::cout << run_count(count_backbone.spec(), count_delta).to_text();
        } else if (*train) {
            train_opt.backbone = train_backbone.spec();
            train_opt.task.id = parse_task(task_name);
            if (!out_dir.empty()) train_opt.out = out_dir;
            std::cout << run_training(train_opt).summary();
        } else if (*mt) {
            MultitaskOptions opt{mt_backbone.spec(), {mt_dirs.begin(), mt_dirs.end()}, mt_inputs};
            auto result = run_multitask(opt, read_task_inputs(opt.inputs));
            std::cout << result.to_text();
            if (!result.matches_isolated || !result.backbone_restored) return 1;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
