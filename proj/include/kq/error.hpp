#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kq {

enum class ErrorCode {
    NonConvexInput,
    SlopeOutOfRange,
    QuadratureUnderflow,
    SingularForm,
    DimensionMismatch,
    ZeroEvaluation,
    NoSubsolution,
    MaxIterExceeded,
    GridMismatch,
    InsufficientStrength,
    BoundaryNotPsh,
    BoundaryNotNorm,
    IoFailure,
    InvalidConfig,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::NonConvexInput: return "NonConvexInput";
    case ErrorCode::SlopeOutOfRange: return "SlopeOutOfRange";
    case ErrorCode::QuadratureUnderflow: return "QuadratureUnderflow";
    case ErrorCode::SingularForm: return "SingularForm";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ZeroEvaluation: return "ZeroEvaluation";
    case ErrorCode::NoSubsolution: return "NoSubsolution";
    case ErrorCode::MaxIterExceeded: return "MaxIterExceeded";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::InsufficientStrength: return "InsufficientStrength";
    case ErrorCode::BoundaryNotPsh: return "BoundaryNotPsh";
    case ErrorCode::BoundaryNotNorm: return "BoundaryNotNorm";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    }
    return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code, so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace kq
