#include "galbnn/errors.hpp"

namespace galbnn {

std::string_view to_string(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::Domain: return "domain";
        case ErrorCategory::Shape: return "shape";
        case ErrorCategory::Usage: return "usage";
        case ErrorCategory::Numeric: return "numeric";
        case ErrorCategory::Measurement: return "measurement";
        case ErrorCategory::Contract: return "contract";
        case ErrorCategory::Config: return "config";
        case ErrorCategory::Io: return "io";
        case ErrorCategory::Corruption: return "corruption";
        case ErrorCategory::Version: return "version";
        case ErrorCategory::Mismatch: return "mismatch";
        case ErrorCategory::Divergence: return "divergence";
    }
    return "unknown";
}

int exit_code(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::Config: return 2;
        case ErrorCategory::Io: return 3;
        case ErrorCategory::Corruption:
        case ErrorCategory::Version: return 4;
        case ErrorCategory::Mismatch: return 5;
        case ErrorCategory::Contract: return 6;
        case ErrorCategory::Divergence: return 7;
        case ErrorCategory::Numeric: return 8;
        default: return 1;
    }
}

}  // namespace galbnn
