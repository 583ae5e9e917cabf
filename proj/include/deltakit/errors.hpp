#pragma once

#include <stdexcept>
#include <string>

namespace deltakit {

// Base of every error raised by the library. Subclasses exist so callers and
// tests can distinguish failure categories without parsing messages.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define DELTAKIT_DEFINE_ERROR(Name)            \
    class Name : public Error {                \
    public:                                    \
        using Error::Error;                    \
    }

DELTAKIT_DEFINE_ERROR(DimensionError);
DELTAKIT_DEFINE_ERROR(IndexError);
DELTAKIT_DEFINE_ERROR(ContractError);
DELTAKIT_DEFINE_ERROR(NotFoundError);
DELTAKIT_DEFINE_ERROR(ShapeError);
DELTAKIT_DEFINE_ERROR(KeyError);
DELTAKIT_DEFINE_ERROR(FormatError);
DELTAKIT_DEFINE_ERROR(IoError);
DELTAKIT_DEFINE_ERROR(ConfigError);
DELTAKIT_DEFINE_ERROR(RoutingError);
DELTAKIT_DEFINE_ERROR(NotAttachedError);
DELTAKIT_DEFINE_ERROR(CaptureError);
DELTAKIT_DEFINE_ERROR(InitError);
DELTAKIT_DEFINE_ERROR(PlacementError);
DELTAKIT_DEFINE_ERROR(EmptyMatchError);
DELTAKIT_DEFINE_ERROR(StateError);
DELTAKIT_DEFINE_ERROR(MissingConfigError);
DELTAKIT_DEFINE_ERROR(DivergenceError);

#undef DELTAKIT_DEFINE_ERROR

// Raised for malformed address patterns; carries the offending offset.
class PatternError : public Error {
public:
    PatternError(const std::string& what, std::size_t position)
        : Error(what), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

} // namespace deltakit
