#include "deltakit/routing.hpp"

#include <algorithm>

#include "deltakit/errors.hpp"

namespace deltakit {

std::string_view to_string(Route r) {
    switch (r) {
    case Route::InputModify: return "input_modify";
    case Route::OutputModify: return "output_modify";
    case Route::Parallel: return "parallel";
    }
    return "?";
}

std::string_view to_string(MergeOp m) { return m == MergeOp::Add ? "add" : "replace"; }

namespace {

Tensor merge(const Tensor& h, const Tensor& delta, const Interception::Entry& e, const std::string& path) {
    if (e.merge == MergeOp::Replace) return delta;
    if (h.shape() != delta.shape()) {
        throw RoutingError("add-merge shape mismatch at \"" + path + "\" (route " + std::string(to_string(e.route)) +
                           "): hidden " + shape_str(h.shape()) + " vs delta " + shape_str(delta.shape()));
    }
    return add(h, delta);
}

Behavior wrap(Behavior inner, Interception::Entry e, std::string path) {
    return std::make_shared<const ForwardFn>(
        [inner = std::move(inner), e = std::move(e), path = std::move(path)](ModuleNode& self, const Tensor& h,
                                                                              ForwardContext& ctx) {
            switch (e.route) {
            case Route::InputModify: {
                Tensor modified = merge(h, (*e.delta)(h, ctx), e, path);
                return (*inner)(self, modified, ctx);
            }
            case Route::OutputModify: {
                Tensor out = (*inner)(self, h, ctx);
                return merge(out, (*e.delta)(out, ctx), e, path);
            }
            case Route::Parallel: {
                Tensor out = (*inner)(self, h, ctx);
                return merge(out, (*e.delta)(h, ctx), e, path);
            }
            }
            throw RoutingError("unknown route");
        });
}

Behavior build_chain(const Interception& icpt) {
    Behavior chain = icpt.original();
    for (const auto& e : icpt.entries()) chain = wrap(chain, e, icpt.target_path());
    return chain;
}

Interception* mutable_interception(ModuleNode& node) {
    if (!node.interceptor()) return nullptr;
    auto* icpt = dynamic_cast<Interception*>(node.interceptor().get());
    if (!icpt) throw RoutingError("module \"" + full_path(node) + "\" is wrapped by a foreign interceptor");
    return icpt;
}

} // namespace

const Interception* interception_of(const ModuleNode& node) {
    return node.interceptor() ? dynamic_cast<const Interception*>(node.interceptor().get()) : nullptr;
}

bool is_installed(const ModuleNode& node, const NodePtr& delta) {
    const auto* icpt = interception_of(node);
    return icpt && std::any_of(icpt->entries().begin(), icpt->entries().end(),
                               [&](const Interception::Entry& e) { return e.delta == delta; });
}

void install(ModuleNode& node, NodePtr delta, Route route, MergeOp merge) {
    if (!delta) throw RoutingError("install: null delta module");
    if (!delta->behavior()) throw RoutingError("install: delta module \"" + delta->name() + "\" has no forward");
    Interception* icpt = mutable_interception(node);
    if (!icpt) {
        if (!node.behavior()) throw RoutingError("cannot wrap \"" + full_path(node) + "\": it has no forward behavior");
        auto fresh = std::make_shared<Interception>();
        fresh->target_path_ = full_path(node);
        fresh->original_ = node.behavior();
        icpt = fresh.get();
        node.set_interceptor(std::move(fresh));
    } else if (is_installed(node, delta)) {
        throw RoutingError("delta \"" + delta->name() + "\" is already installed on \"" + icpt->target_path_ + "\"");
    }
    icpt->entries_.push_back({std::move(delta), route, merge});
    node.replace_behavior(build_chain(*icpt));
}

void uninstall(ModuleNode& node, const NodePtr& delta) {
    Interception* icpt = mutable_interception(node);
    auto it = icpt ? std::find_if(icpt->entries_.begin(), icpt->entries_.end(),
                                  [&](const Interception::Entry& e) { return e.delta == delta; })
                   : std::vector<Interception::Entry>::iterator{};
    if (!icpt || it == icpt->entries_.end()) {
        throw NotAttachedError("delta \"" + (delta ? delta->name() : std::string("<null>")) +
                               "\" is not installed on \"" + full_path(node) + "\"");
    }
    icpt->entries_.erase(it);
    if (icpt->entries_.empty()) {
        Behavior original = icpt->original_;
        node.set_interceptor(nullptr);
        node.replace_behavior(std::move(original));
    } else {
        node.replace_behavior(build_chain(*icpt));
    }
}

Tensor wrapped_forward(ModuleNode& node, const Tensor& h_in, ForwardContext& ctx) {
    if (!interception_of(node)) throw RoutingError("module \"" + full_path(node) + "\" is not wrapped");
    return node(h_in, ctx);
}

} // namespace deltakit
