#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deltakit/errors.hpp"
#include "deltakit/modtree.hpp"

using namespace deltakit;

namespace {

// root { a { c }, b }
NodePtr small_tree() {
    auto root = ModuleNode::create("root", "Root");
    auto a = root->add_child(ModuleNode::create("a", "A"));
    a->add_child(ModuleNode::create("c", "C"));
    root->add_child(ModuleNode::create("b", "B"));
    a->add_param("w", Tensor::from({2}, {1, 2}, true));
    root->child("b")->add_param("bias", Tensor::from({1, 3}, {3, 4, 5}, true));
    a->child("c")->add_param("g", Tensor::from({1}, {6}, true));
    return root;
}

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "deltakit_modtree_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("named_submodules is preorder with the root as empty path") {
    auto root = small_tree();
    std::vector<std::string> paths;
    for (const auto& [p, n] : named_submodules(root)) paths.push_back(p);
    CHECK(paths == std::vector<std::string>{"", "a", "a.c", "b"});
}

TEST_CASE("named_parameters follows module order then parameter order") {
    auto root = small_tree();
    std::vector<std::string> keys;
    for (const auto& [k, t] : named_parameters(root)) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"a.w", "a.c.g", "b.bias"});
    CHECK(count_parameters(root) == 6);
}

TEST_CASE("get_by_path resolves and reports the longest prefix on failure") {
    auto root = small_tree();
    CHECK(get_by_path(root, "a.c")->kind() == "C");
    CHECK(get_by_path(root, "") == root);
    try {
        get_by_path(root, "a.x.y");
        FAIL("expected NotFoundError");
    } catch (const NotFoundError& e) {
        CHECK(std::string(e.what()).find("\"a\"") != std::string::npos);
    }
}

TEST_CASE("tree construction contracts") {
    auto root = small_tree();
    CHECK_THROWS_AS(root->add_child(ModuleNode::create("a", "Dup")), ContractError);
    CHECK_THROWS_AS(ModuleNode::create("x.y", "Bad"), ContractError);
    CHECK_THROWS_AS(ModuleNode::create("", "Bad"), ContractError);
    auto a = root->child("a");
    CHECK_THROWS_AS(root->add_child(a), ContractError);
    CHECK_THROWS_AS(a->child("c")->add_child(root), ContractError);
    CHECK_THROWS_AS(a->rename("z"), ContractError);
    CHECK_THROWS_AS(a->add_param("w", Tensor::zeros({1})), ContractError);
    auto removed = root->remove_child("a");
    CHECK(removed->parent() == nullptr);
    removed->rename("z");
    root->add_child(removed);
    CHECK(path_of(*root, *removed->child("c")) == "z.c");
    CHECK_THROWS_AS(root->remove_child("nope"), NotFoundError);
}

TEST_CASE("set_trainable honours excluded subtrees") {
    auto root = small_tree();
    std::size_t changed = set_trainable(root, false, {"a"});
    CHECK(changed == 1);
    CHECK(root->child("a")->param("w").requires_grad());
    CHECK(root->child("a")->child("c")->param("g").requires_grad());
    CHECK_FALSE(root->child("b")->param("bias").requires_grad());
}

TEST_CASE("trainable-only snapshots") {
    auto root = small_tree();
    set_trainable(root, false, {"c"});
    auto snap = snapshot(root, true);
    REQUIRE(snap.entries.size() == 1);
    CHECK(snap.entries.begin()->first == "a.c.g");
    CHECK(snapshot(root).entries.size() == 3);
    root->set_trainable_only_snapshots(true);
    CHECK(snapshot(root).entries.size() == 1);
}

TEST_CASE("load_parameters: shape, strict and lenient behaviour") {
    auto root = small_tree();
    auto snap = snapshot(root, false);
    snap.entries["a.w"].values = {9, 9};
    load_snapshot(root, snap, true);
    CHECK(root->child("a")->param("w").at(0) == 9);

    auto bad_shape = snap;
    bad_shape.entries["a.w"].shape = {1, 2};
    CHECK_THROWS_AS(load_snapshot(root, bad_shape, true), ShapeError);

    auto extra = snap;
    extra.entries["ghost.w"] = {{1}, {0}};
    CHECK_THROWS_AS(load_snapshot(root, extra, true), KeyError);
    auto report = load_snapshot(root, extra, false);
    CHECK(report.unexpected == std::vector<std::string>{"ghost.w"});

    auto partial = snap;
    partial.entries.erase("b.bias");
    CHECK_THROWS_AS(load_snapshot(root, partial, true), KeyError);
    CHECK(load_snapshot(root, partial, false).missing == std::vector<std::string>{"b.bias"});
}

TEST_CASE("failed strict load leaves parameters untouched") {
    auto root = small_tree();
    auto snap = snapshot(root, false);
    snap.entries["a.w"].values = {7, 7};
    snap.entries["ghost"] = {{1}, {0}};
    CHECK_THROWS(load_snapshot(root, snap, true));
    CHECK(root->child("a")->param("w").at(0) == 1);
}

TEST_CASE("snapshot encoding round trips bit-exactly") {
    auto root = small_tree();
    root->child("a")->param("w").mutable_data()[0] = 0.1 + 0.2;
    root->child("a")->param("w").mutable_data()[1] = -0.0;
    auto snap = snapshot(root, false);
    auto bytes = encode_snapshot(snap);
    CHECK(decode_snapshot(bytes) == snap);
    auto file = temp_file("roundtrip.bin");
    write_snapshot(snap, file);
    CHECK(read_snapshot(file) == snap);
    CHECK(std::signbit(read_snapshot(file).entries["a.w"].values[1]));
}

TEST_CASE("snapshot header and payload layout") {
    ParameterSnapshot snap;
    snap.entries["k"] = {{2}, {1.5, -2.0}};
    auto bytes = encode_snapshot(snap);
    REQUIRE(bytes.size() > 16);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "ODLT");
    CHECK(bytes[4] == 1);
    std::uint64_t manifest = 0;
    for (int i = 0; i < 8; ++i) manifest |= std::uint64_t(bytes[8 + i]) << (8 * i);
    CHECK(bytes.size() == 16 + manifest + 16);
}

TEST_CASE("corrupt snapshots are format errors") {
    ParameterSnapshot snap;
    snap.entries["k"] = {{2}, {1.5, -2.0}};
    auto bytes = encode_snapshot(snap);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_snapshot(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_snapshot(bad_version), FormatError);

    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_snapshot(truncated), FormatError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_snapshot(trailing), FormatError);

    CHECK_THROWS_AS(decode_snapshot(std::vector<std::uint8_t>{'O', 'D'}), FormatError);
    CHECK_THROWS_AS(read_snapshot(temp_file("does_not_exist.bin")), IoError);
}

TEST_CASE("calling a module without behaviour is a contract error") {
    auto node = ModuleNode::create("n", "Empty");
    ForwardContext ctx;
    CHECK_THROWS_AS((*node)(Tensor::zeros({1}), ctx), ContractError);
}
