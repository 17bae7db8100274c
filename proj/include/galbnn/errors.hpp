#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace galbnn {

/// Machine-readable failure category. The CLI maps each one to an exit code.
enum class ErrorCategory {
    Domain,       // argument outside the mathematical domain
    Shape,        // tensor shape mismatch
    Usage,        // API called in the wrong order
    Numeric,      // NaN/Inf produced
    Measurement,  // moments could not be measured
    Contract,     // documented precondition violated (e.g. K < 2)
    Config,       // invalid run configuration
    Io,           // read/write failure, missing file
    Corruption,   // checksum or truncation
    Version,      // unsupported file format version
    Mismatch,     // hash mismatch between linked artifacts
    Divergence,   // training diverged
};

std::string_view to_string(ErrorCategory c);
int exit_code(ErrorCategory c);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

class DomainError : public Error {
public:
    explicit DomainError(const std::string& what) : Error(ErrorCategory::Domain, what) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorCategory::Shape, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorCategory::Usage, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

class MeasurementError : public Error {
public:
    explicit MeasurementError(const std::string& what) : Error(ErrorCategory::Measurement, what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorCategory::Contract, what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

class CorruptionError : public Error {
public:
    CorruptionError(const std::string& what, std::uint64_t offset)
        : Error(ErrorCategory::Corruption, what + " (byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class VersionError : public Error {
public:
    VersionError(const std::string& what, unsigned found, unsigned supported)
        : Error(ErrorCategory::Version,
                what + ": file version " + std::to_string(found) + ", reader supports up to " +
                    std::to_string(supported)),
          found_(found), supported_(supported) {}

    unsigned found() const noexcept { return found_; }
    unsigned supported() const noexcept { return supported_; }

private:
    unsigned found_;
    unsigned supported_;
};

class MismatchError : public Error {
public:
    explicit MismatchError(const std::string& what) : Error(ErrorCategory::Mismatch, what) {}
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, int epoch)
        : Error(ErrorCategory::Divergence, what), epoch_(epoch) {}

    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

}  // namespace galbnn
