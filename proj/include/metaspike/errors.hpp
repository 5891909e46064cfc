#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace metaspike {

// Shape, dimension, or precondition violations in library calls.
class StructuralError : public std::invalid_argument {
public:
    explicit StructuralError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed files (event streams, checkpoints, manifests). Carries the byte
// offset at which parsing failed, -1 if not applicable.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::int64_t offset = -1)
        : std::runtime_error(offset >= 0 ? what + " (byte offset " + std::to_string(offset) + ")"
                                         : what),
          offset_(offset) {}

    std::int64_t offset() const noexcept { return offset_; }

private:
    std::int64_t offset_;
};

// Invalid or inconsistent run configuration.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses or other numerical breakdown during a run.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace metaspike
