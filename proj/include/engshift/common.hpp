#pragma once

#include <stdexcept>
#include <string>

namespace engshift {

// Error hierarchy used across the library and the CLI. Each error carries a
// short machine-readable class tag so the CLI can map failures to stable
// exit codes and emit structured diagnostics.
class Error : public std::runtime_error {
public:
    Error(std::string cls, const std::string& msg)
        : std::runtime_error(msg), cls_(std::move(cls)) {}
    const std::string& error_class() const noexcept { return cls_; }

private:
    std::string cls_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

struct SchemaError : Error {
    explicit SchemaError(const std::string& msg) : Error("schema", msg) {}
};

struct DependencyError : Error {
    explicit DependencyError(const std::string& msg) : Error("dependency", msg) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error("domain", msg) {}
};

struct InsufficientDataError : Error {
    explicit InsufficientDataError(const std::string& msg) : Error("insufficient_data", msg) {}
};

struct SingularError : Error {
    explicit SingularError(const std::string& msg) : Error("singular", msg) {}
};

struct ConvergenceError : Error {
    explicit ConvergenceError(const std::string& msg) : Error("convergence", msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

struct PredictionError : Error {
    explicit PredictionError(const std::string& msg) : Error("prediction", msg) {}
};

} // namespace engshift
