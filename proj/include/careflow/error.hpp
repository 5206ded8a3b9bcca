#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace careflow {

enum class ErrorKind {
    MissingFile,
    MalformedRow,
    DanglingReference,
    UnknownClass,
    ProviderUnreachable,
    RateLimited,
    DegenerateMargin,
    InsufficientSample,
    SingularDesign,
    InvalidConfig,
    Io,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::MissingFile: return "MissingFile";
        case ErrorKind::MalformedRow: return "MalformedRow";
        case ErrorKind::DanglingReference: return "DanglingReference";
        case ErrorKind::UnknownClass: return "UnknownClass";
        case ErrorKind::ProviderUnreachable: return "ProviderUnreachable";
        case ErrorKind::RateLimited: return "RateLimited";
        case ErrorKind::DegenerateMargin: return "DegenerateMargin";
        case ErrorKind::InsufficientSample: return "InsufficientSample";
        case ErrorKind::SingularDesign: return "SingularDesign";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

// Every parse error carries file + line provenance so a bad row in a
// multi-million-line feed can be located without re-running.
class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, std::string message, std::string file = {}, std::int64_t line = -1)
        : std::runtime_error(format(kind, message, file, line)),
          kind_(kind),
          file_(std::move(file)),
          line_(line) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& file() const noexcept { return file_; }
    std::int64_t line() const noexcept { return line_; }

  private:
    static std::string format(ErrorKind kind, const std::string& message, const std::string& file,
                              std::int64_t line) {
        std::string out = to_string(kind);
        out += ": ";
        out += message;
        if (!file.empty()) {
            out += " (";
            out += file;
            if (line >= 0) {
                out += ":";
                out += std::to_string(line);
            }
            out += ")";
        }
        return out;
    }

    ErrorKind kind_;
    std::string file_;
    std::int64_t line_;
};

}  // namespace careflow
