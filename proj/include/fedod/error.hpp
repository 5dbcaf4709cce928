#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedod {

enum class ErrorKind {
    SchemaMismatch,
    MalformedPayload,
    ConfigInvalid,
    ShapeMismatch,
    MultipleObjectsInCell,
    EmptyDataset,
    SpecInvalid,
    IoFailure,
    MalformedLabelLine,
    ClassUniverseMismatch,
    EmptyUpdateSet,
    ProtocolViolation,
    TransportFailure,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::SchemaMismatch: return "SchemaMismatch";
        case ErrorKind::MalformedPayload: return "MalformedPayload";
        case ErrorKind::ConfigInvalid: return "ConfigInvalid";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::MultipleObjectsInCell: return "MultipleObjectsInCell";
        case ErrorKind::EmptyDataset: return "EmptyDataset";
        case ErrorKind::SpecInvalid: return "SpecInvalid";
        case ErrorKind::IoFailure: return "IoFailure";
        case ErrorKind::MalformedLabelLine: return "MalformedLabelLine";
        case ErrorKind::ClassUniverseMismatch: return "ClassUniverseMismatch";
        case ErrorKind::EmptyUpdateSet: return "EmptyUpdateSet";
        case ErrorKind::ProtocolViolation: return "ProtocolViolation";
        case ErrorKind::TransportFailure: return "TransportFailure";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one ErrorKind so callers
/// (and the CLI exit-code mapping) can dispatch without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace fedod
