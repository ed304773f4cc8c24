#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace bikevol {

// Library-wide error with a short category tag. The CLI prints what() as a
// single line, so messages must stay one-line.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(category + ": " + message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error("contract", m) {}
};

struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};

struct ParseError : Error {
    ParseError(const std::string& where, const std::string& m) : Error("parse", where + ": " + m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct AuditError : Error {
    explicit AuditError(const std::string& m) : Error("audit", m) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& m) : Error("training", m) {}
};

}  // namespace bikevol
