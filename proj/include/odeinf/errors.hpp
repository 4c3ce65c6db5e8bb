#pragma once

#include <stdexcept>
#include <string>

namespace odeinf {

/// Thrown when a caller breaks an operation's precondition (bad shapes,
/// non-finite inputs, empty sets where one element is required).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Numerical failure that aborts an operation (non-finite loss, etc.).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Configuration rejected during validation; `key` names the offending entry.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error(message), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

/// Filesystem failure (cannot open, read or write); carries the path.
class IoError : public std::runtime_error {
public:
    IoError(std::string path, const std::string& detail)
        : std::runtime_error(path + ": " + detail), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

enum class FormatErrorKind { BadMagic, VersionMismatch, EndiannessMismatch, Truncated, ChecksumMismatch, Malformed, Io };

inline const char* to_string(FormatErrorKind kind) {
    switch (kind) {
        case FormatErrorKind::BadMagic: return "bad magic";
        case FormatErrorKind::VersionMismatch: return "version mismatch";
        case FormatErrorKind::EndiannessMismatch: return "endianness mismatch";
        case FormatErrorKind::Truncated: return "truncated";
        case FormatErrorKind::ChecksumMismatch: return "checksum mismatch";
        case FormatErrorKind::Malformed: return "malformed";
        case FormatErrorKind::Io: return "io error";
    }
    return "unknown";
}

/// Shard / checkpoint decoding failure. Carries the file path.
class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, std::string path, const std::string& detail)
        : std::runtime_error(path + ": " + to_string(kind) + (detail.empty() ? "" : " (" + detail + ")")),
          kind_(kind),
          path_(std::move(path)) {}

    FormatErrorKind kind() const noexcept { return kind_; }
    const std::string& path() const noexcept { return path_; }

private:
    FormatErrorKind kind_;
    std::string path_;
};

#define ODEINF_REQUIRE(cond, msg)                                  \
    do {                                                           \
        if (!(cond)) throw ::odeinf::ContractError(std::string(msg)); \
    } while (0)

} // namespace odeinf
