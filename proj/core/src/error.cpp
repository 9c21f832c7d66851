#include "dmdd/error.hpp"

namespace dmdd {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::DatasetNotFound: return "dataset-not-found";
        case ErrorKind::CorruptDataset: return "corrupt-dataset";
        case ErrorKind::IoError: return "io-error";
        case ErrorKind::ConfigError: return "config-error";
        case ErrorKind::UndefinedMetric: return "undefined-metric";
        case ErrorKind::NonFiniteLoss: return "non-finite-loss";
        case ErrorKind::FingerprintMismatch: return "fingerprint-mismatch";
        case ErrorKind::Internal: return "internal-error";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument:
        case ErrorKind::ConfigError:
        case ErrorKind::FingerprintMismatch:
            return 1;
        case ErrorKind::DatasetNotFound:
        case ErrorKind::CorruptDataset:
        case ErrorKind::IoError:
        case ErrorKind::UndefinedMetric:
            return 2;
        case ErrorKind::NonFiniteLoss:
        case ErrorKind::Internal:
            return 3;
    }
    return 3;
}

}  // namespace dmdd
