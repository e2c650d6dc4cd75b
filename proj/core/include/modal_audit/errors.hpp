#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace modal_audit {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Structural problem while writing (e.g. samples disagree on d).
class FormatError : public Error {
public:
    using Error::Error;
};

// Wrong magic or version.
class UnsupportedFormatError : public Error {
public:
    using Error::Error;
};

// Truncated or trailing bytes. offset is the byte position where decoding stopped.
class CorruptionError : public Error {
public:
    CorruptionError(const std::string& what, std::uint64_t offset)
        : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class DegenerateFitError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::uint64_t step)
        : Error(what + " at step " + std::to_string(step)), step_(step) {}
    std::uint64_t step() const noexcept { return step_; }

private:
    std::uint64_t step_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace modal_audit
