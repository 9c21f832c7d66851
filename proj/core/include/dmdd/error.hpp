#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dmdd {

enum class ErrorKind {
    InvalidArgument,
    DatasetNotFound,
    CorruptDataset,
    IoError,
    ConfigError,
    UndefinedMetric,
    NonFiniteLoss,
    FingerprintMismatch,
    Internal,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so the CLI can map it to
// an exit code (1 usage/config, 2 data, 3 runtime).
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

int exit_code_for(ErrorKind kind);

}  // namespace dmdd
