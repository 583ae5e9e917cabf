#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace deltakit {

// A user-facing module address. "re:<expr>" selects a regular expression that
// must match the entire dotted path; anything else is a dotted path compared
// against the trailing segments of candidate paths.
class AddressPattern {
public:
    enum class Kind { Path, Regex };

    AddressPattern(std::string raw);  // NOLINT(google-explicit-constructor)
    AddressPattern(const char* raw) : AddressPattern(std::string(raw)) {}  // NOLINT

    const std::string& raw() const noexcept { return raw_; }
    Kind kind() const noexcept { return kind_; }
    const std::vector<std::string>& segments() const noexcept { return segments_; }

    bool matches(std::string_view path) const;

    friend bool operator==(const AddressPattern& a, const AddressPattern& b) { return a.raw_ == b.raw_; }

private:
    struct Compiled;
    std::string raw_;
    Kind kind_ = Kind::Path;
    std::vector<std::string> segments_;
    std::shared_ptr<const Compiled> regex_;
};

inline constexpr std::string_view kRegexPrefix = "re:";

std::vector<std::string> split_path(std::string_view path);
std::string join_path(std::string_view prefix, std::string_view name);

// True when `tail` equals the last tail.size() segments of `path`.
bool tail_matches(const std::vector<std::string>& tail, std::string_view path);

} // namespace deltakit
