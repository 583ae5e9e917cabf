#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "deltakit/addressing.hpp"
#include "deltakit/errors.hpp"
#include "deltakit/lifecycle.hpp"
#include "deltakit/random.hpp"

using namespace deltakit;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "deltakit_lifecycle_test" / name;
    std::filesystem::remove_all(dir);
    return dir;
}

TokenBatch fixed_batch() { return TokenBatch::unpadded(2, 4, {3, 1, 2, 2, 3, 2, 1, 1}); }

void perturb(DeltaObject& obj, std::uint64_t seed) {
    Rng rng(seed);
    for (auto [k, t] : obj.named_parameters())
        for (double& x : t.mutable_data()) x = rng.uniform(-0.5, 0.5);
}

std::vector<std::string> targets(const DeltaObject& obj) {
    std::vector<std::string> out;
    for (const auto& b : obj.bindings()) out.push_back(b.target_path);
    return out;
}

} // namespace

TEST_CASE("config JSON round trips and is canonical") {
    DeltaConfig c = auto_default(DeltaKind::Adapter);
    c.hyperparams.bottleneck = 3;
    c.hyperparams.activation = Activation::Relu;
    std::string text = c.to_json();
    CHECK(DeltaConfig::from_json(text) == c);
    CHECK(DeltaConfig::from_json(text).to_json() == text);
    CHECK(text.find("\"common_naming\"") < text.find("\"delta_type\""));

    DeltaConfig patterns;
    patterns.delta_type = DeltaKind::Lora;
    patterns.modified_modules = std::vector<std::string>{"re:.*query", "value"};
    CHECK(DeltaConfig::from_json(patterns.to_json()) == patterns);
}

TEST_CASE("malformed configs are config errors") {
    CHECK_THROWS_AS(DeltaConfig::from_json("{"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json("[]"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json(R"({"delta_type":"ia3"})"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json(R"({"delta_type":"lora","colour":1})"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json(R"({"delta_type":"lora","hyperparams":{"depth":2}})"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json(R"({"delta_type":"lora","format_version":7})"), ConfigError);
    CHECK_THROWS_AS(DeltaConfig::from_json(R"({"modified_modules":["a"]})"), ConfigError);
    CHECK_THROWS_AS(auto_default("ia3"), ConfigError);
}

TEST_CASE("conventions are detected from their names") {
    CHECK(detect_convention(build_toyformer({}, Convention::A)) == Convention::A);
    CHECK(detect_convention(build_toyformer({}, Convention::B)) == Convention::B);
    auto bare = ModuleNode::create("m", "M");
    CHECK_FALSE(detect_convention(bare).has_value());
}

TEST_CASE("every common name maps to one module per layer on both conventions") {
    for (auto conv : {Convention::A, Convention::B}) {
        auto model = build_toyformer({}, conv);
        for (auto name : kCommonNames) {
            auto pats = map_common_names({std::string(name)}, conv);
            std::size_t expect = name == "layer_norm" ? 4 : 2;
            CHECK_MESSAGE(resolve(model, pats).all.size() == expect, name);
        }
    }
    CHECK_THROWS_AS(map_common_names({"attn.z"}, Convention::A), ConfigError);
}

TEST_CASE("default positions per kind") {
    auto model = build_toyformer({}, Convention::A);
    CHECK(targets(build(auto_default("lora"), model)) ==
          std::vector<std::string>{"encoder.layer.0.attention.self.query", "encoder.layer.0.attention.self.value",
                                   "encoder.layer.1.attention.self.query", "encoder.layer.1.attention.self.value"});
    CHECK(targets(build(auto_default("adapter"), model)) ==
          std::vector<std::string>{"encoder.layer.0.attention.output.dense", "encoder.layer.0.output.dense",
                                   "encoder.layer.1.attention.output.dense", "encoder.layer.1.output.dense"});
    CHECK(build(auto_default("bitfit"), model).bindings().size() == 16);
    CHECK(build(auto_default("prefix"), model).bindings().size() == 4);
    DeltaConfig no_modules;
    no_modules.delta_type = DeltaKind::Lora;
    no_modules.hyperparams.rank = 2;
    auto obj = build(no_modules, model);
    CHECK(obj.bindings().size() == 4);
    CHECK(obj.config().hyperparams.rank == 2);
    CHECK(obj.parameter_count() == 4 * 2 * 64);
}

TEST_CASE("routes and merges per kind") {
    CHECK(route_for(DeltaKind::Lora) == Route::Parallel);
    CHECK(route_for(DeltaKind::Adapter) == Route::OutputModify);
    CHECK(route_for(DeltaKind::Bitfit) == Route::OutputModify);
    CHECK(route_for(DeltaKind::Prefix) == Route::OutputModify);
    CHECK(merge_for(DeltaKind::Prefix) == MergeOp::Replace);
    CHECK(merge_for(DeltaKind::Lora) == MergeOp::Add);
}

TEST_CASE("attach registers parameters under deltas and detach removes them") {
    auto model = build_toyformer({}, Convention::B);
    const std::size_t base = count_parameters(model);
    auto obj = build(auto_default("lora"), model, 5);
    CHECK(count_parameters(model) == base);
    attach(obj, model);
    CHECK(obj.attached());
    CHECK(count_parameters(model) == base + obj.parameter_count());
    auto node = get_by_path(model, "encoder.block.0.layer.0.SelfAttention.q.deltas.lora_0");
    CHECK(node->is_delta());
    CHECK(obj.bindings()[0].key_prefix() == "encoder.block.0.layer.0.SelfAttention.q.deltas.lora_0");
    detach(obj, model);
    CHECK(count_parameters(model) == base);
    CHECK_THROWS_AS(get_by_path(model, "encoder.block.0.layer.0.SelfAttention.q.deltas"), NotFoundError);
}

TEST_CASE("lifecycle state errors") {
    auto model = build_toyformer({}, Convention::A);
    auto other = build_toyformer({}, Convention::A);
    auto obj = build(auto_default("lora"), model);
    CHECK_THROWS_AS(detach(obj, model), StateError);
    CHECK_THROWS_AS(attach(obj, other), StateError);
    attach(obj, model);
    CHECK_THROWS_AS(attach(obj, model), StateError);
}

TEST_CASE("two objects on one target take distinct slots and compose") {
    auto model = build_toyformer({}, Convention::A);
    auto virgin = forward(model, fixed_batch()).to_vector();
    auto a = build(auto_default("lora"), model, 1);
    auto b = build(auto_default("lora"), model, 2);
    attach(a, model);
    attach(b, model);
    CHECK(b.bindings()[0].slot == "lora_1");
    perturb(a, 3);
    perturb(b, 4);
    auto both = forward(model, fixed_batch()).to_vector();
    CHECK(both != virgin);
    detach(a, model);
    detach(b, model);
    CHECK(forward(model, fixed_batch()).to_vector() == virgin);
}

TEST_CASE("build errors: empty match, prefix placement, empty list") {
    auto model = build_toyformer({}, Convention::A);
    DeltaConfig c;
    c.delta_type = DeltaKind::Lora;
    c.modified_modules = std::vector<std::string>{"query", "nonexistent"};
    CHECK_THROWS_AS(build(c, model), EmptyMatchError);
    c.delta_type = DeltaKind::Prefix;
    c.modified_modules = std::vector<std::string>{"query"};
    CHECK_THROWS_AS(build(c, model), PlacementError);
    c.modified_modules = std::vector<std::string>{"encoder.layer.0.attention.self.key"};
    CHECK_THROWS_AS(build(c, model), PlacementError);
    c.modified_modules = std::vector<std::string>{"re:encoder\\.layer\\.0\\.attention\\.self\\.(key|value)"};
    CHECK(build(c, model).bindings().size() == 2);
    c.modified_modules = std::vector<std::string>{};
    CHECK_THROWS_AS(build(c, model), ConfigError);
    c.delta_type = DeltaKind::Adapter;
    c.modified_modules = std::vector<std::string>{"re:encoder\\.layer\\.0\\.output"};
    CHECK_THROWS_AS(build(c, model), CaptureError);
}

TEST_CASE("freeze leaves only excluded subtrees trainable") {
    auto model = build_toyformer({}, Convention::A);
    auto obj = build(auto_default("lora"), model);
    attach(obj, model);
    freeze(model, {"deltas", "pooler"}, true);
    for (const auto& [k, t] : named_parameters(model)) {
        bool keep = k.find(".deltas.") != std::string::npos || k.starts_with("pooler.");
        CHECK_MESSAGE(t.requires_grad() == keep, k);
    }
    auto snap = snapshot(model);
    CHECK(snap.total_values() == obj.parameter_count() + 32 * 32 + 32);
}

TEST_CASE("save_finetuned writes config and exactly the delta payload") {
    auto model = build_toyformer({}, Convention::A);
    auto obj = build(auto_default("adapter"), model, 9);
    attach(obj, model);
    perturb(obj, 10);
    auto dir = fresh_dir("save");
    save_finetuned(obj, model, dir);
    CHECK(std::filesystem::exists(dir / kConfigFile));
    auto snap = read_snapshot(dir / kDeltaFile);
    CHECK(snap == obj.delta_snapshot());
    CHECK(snap.total_values() == obj.parameter_count());
}

TEST_CASE("from_finetuned reproduces logits on a fresh backbone") {
    for (auto kind : {"lora", "adapter", "bitfit", "prefix"}) {
        auto model = build_toyformer({}, Convention::B);
        auto obj = build(auto_default(kind), model, 11);
        attach(obj, model);
        perturb(obj, 12);
        auto expect = forward(model, fixed_batch()).to_vector();
        auto dir = fresh_dir(std::string("reload_") + kind);
        save_finetuned(obj, model, dir);

        auto fresh = build_toyformer({}, Convention::B);
        auto loaded = from_finetuned(dir, fresh);
        CHECK(loaded.attached());
        CHECK_MESSAGE(forward(fresh, fixed_batch()).to_vector() == expect, kind);
    }
}

TEST_CASE("a common-name checkpoint loads across conventions") {
    auto a = build_toyformer({}, Convention::A);
    auto obj = build(auto_default("lora"), a, 1);
    attach(obj, a);
    perturb(obj, 2);
    auto dir = fresh_dir("cross");
    save_finetuned(obj, a, dir);

    auto b = build_toyformer({}, Convention::B);
    auto loaded = from_finetuned(dir, b);
    REQUIRE(loaded.bindings().size() == obj.bindings().size());
    for (std::size_t i = 0; i < obj.bindings().size(); ++i) {
        Tensor src = obj.bindings()[i].module.node->param("B");
        Tensor dst = loaded.bindings()[i].module.node->param("B");
        CHECK(src.to_vector() == dst.to_vector());
    }
    CHECK(loaded.bindings()[0].target_path == "encoder.block.0.layer.0.SelfAttention.q");
}

TEST_CASE("from_finetuned loads into a different slot") {
    auto model = build_toyformer({}, Convention::A);
    auto obj = build(auto_default("bitfit"), model, 1);
    attach(obj, model);
    perturb(obj, 2);
    auto dir = fresh_dir("slot");
    save_finetuned(obj, model, dir);
    auto loaded = from_finetuned(dir, model);
    CHECK(loaded.bindings()[0].slot == "bitfit_1");
    CHECK(loaded.delta_snapshot().total_values() == obj.parameter_count());
}

TEST_CASE("from_finetuned error paths") {
    auto model = build_toyformer({}, Convention::A);
    CHECK_THROWS_AS(from_finetuned(fresh_dir("missing"), model), MissingConfigError);

    auto obj = build(auto_default("lora"), model, 1);
    attach(obj, model);
    auto dir = fresh_dir("corrupt");
    save_finetuned(obj, model, dir);
    detach(obj, model);
    const auto virgin = snapshot(model, false);
    {
        std::ofstream f(dir / kDeltaFile, std::ios::binary | std::ios::trunc);
        f << "ODLTjunk";
    }
    CHECK_THROWS_AS(from_finetuned(dir, model), FormatError);
    CHECK(snapshot(model, false) == virgin);

    save_finetuned(obj, model, dir);
    ParameterSnapshot snap = read_snapshot(dir / kDeltaFile);
    snap.entries.erase(snap.entries.begin());
    write_snapshot(snap, dir / kDeltaFile);
    CHECK_THROWS_AS(from_finetuned(dir, model), KeyError);
    CHECK(snapshot(model, false) == virgin);

    DeltaConfig narrow;
    narrow.delta_type = DeltaKind::Lora;
    narrow.hyperparams.rank = 2;
    auto small = build(narrow, model);
    attach(small, model);
    auto dir2 = fresh_dir("shape");
    save_finetuned(small, model, dir2);
    detach(small, model);
    {
        std::ifstream in(dir2 / kConfigFile);
        std::string text((std::istreambuf_iterator<char>(in)), {});
        auto pos = text.find("\"rank\": 2");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 9, "\"rank\": 3");
        std::ofstream(dir2 / kConfigFile, std::ios::trunc) << text;
    }
    CHECK_THROWS_AS(from_finetuned(dir2, model), ShapeError);
    CHECK(snapshot(model, false) == virgin);
}

TEST_CASE("an additive delta stacked after a prefix on the same projection cannot merge") {
    auto model = build_toyformer({}, Convention::A);
    DeltaConfig p;
    p.delta_type = DeltaKind::Prefix;
    p.modified_modules = std::vector<std::string>{"re:encoder\\.layer\\.0\\.attention\\.self\\.(key|value)"};
    DeltaConfig l;
    l.delta_type = DeltaKind::Lora;
    l.modified_modules = std::vector<std::string>{"encoder.layer.0.attention.self.value"};

    auto lora = build(l, model, 1);
    auto prefix = build(p, model, 2);
    attach(lora, model);
    attach(prefix, model);
    CHECK_NOTHROW(forward(model, fixed_batch()));
    detach(lora, model);
    attach(lora, model);
    CHECK_THROWS_AS(forward(model, fixed_batch()), RoutingError);
    detach(lora, model);
    detach(prefix, model);
}
