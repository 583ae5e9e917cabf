#include "deltakit/pattern.hpp"

#include <boost/regex.hpp>

#include "deltakit/errors.hpp"

namespace deltakit {

struct AddressPattern::Compiled {
    boost::regex expr;
};

std::vector<std::string> split_path(std::string_view path) {
    std::vector<std::string> out;
    if (path.empty()) return out;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        out.emplace_back(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    return out;
}

std::string join_path(std::string_view prefix, std::string_view name) {
    if (prefix.empty()) return std::string(name);
    std::string out(prefix);
    out += '.';
    out += name;
    return out;
}

bool tail_matches(const std::vector<std::string>& tail, std::string_view path) {
    if (tail.empty() || path.empty()) return false;
    // Walk backwards over the path's segments without allocating.
    std::size_t end = path.size();
    for (auto it = tail.rbegin(); it != tail.rend(); ++it) {
        if (end == std::string_view::npos) return false;
        std::size_t dot = end == 0 ? std::string_view::npos : path.rfind('.', end - 1);
        std::size_t begin = dot == std::string_view::npos ? 0 : dot + 1;
        if (path.substr(begin, end - begin) != *it) return false;
        end = dot;  // npos once the first segment has been consumed
    }
    return true;
}

AddressPattern::AddressPattern(std::string raw) : raw_(std::move(raw)) {
    if (raw_.empty()) throw PatternError("empty address pattern", 0);
    if (raw_.starts_with(kRegexPrefix)) {
        kind_ = Kind::Regex;
        std::string expr = raw_.substr(kRegexPrefix.size());
        if (expr.empty()) throw PatternError("empty regular expression in pattern \"" + raw_ + "\"", kRegexPrefix.size());
        try {
            regex_ = std::make_shared<const Compiled>(Compiled{boost::regex(expr, boost::regex::perl)});
        } catch (const boost::regex_error& e) {
            std::size_t pos = static_cast<std::size_t>(e.position()) + kRegexPrefix.size();
            throw PatternError("invalid regular expression in pattern \"" + raw_ + "\" at offset " +
                                   std::to_string(pos) + ": " + e.what(),
                               pos);
        }
        return;
    }
    segments_ = split_path(raw_);
    std::size_t offset = 0;
    for (const auto& seg : segments_) {
        if (seg.empty()) throw PatternError("empty segment in pattern \"" + raw_ + "\" at offset " + std::to_string(offset), offset);
        offset += seg.size() + 1;
    }
}

bool AddressPattern::matches(std::string_view path) const {
    if (kind_ == Kind::Regex) return boost::regex_match(path.begin(), path.end(), regex_->expr);
    return tail_matches(segments_, path);
}

} // namespace deltakit
