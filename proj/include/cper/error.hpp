#pragma once

#include <stdexcept>
#include <string>

namespace cper {

// Bad or inconsistent input data / configuration. CLI maps this to exit 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file content.
struct ParseError : ValidationError {
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : ValidationError(file + ":" + std::to_string(line) + ": " + what),
          line_number(line) {}
    std::size_t line_number;
};

// A pipeline stage was invoked before its upstream stage ran. CLI exit 3.
struct MissingDependency : std::runtime_error {
    explicit MissingDependency(const std::string& stage)
        : std::runtime_error("missing stage: " + stage), stage_name(stage) {}
    std::string stage_name;
};

// Upstream artifact exists but was produced under a different config/seed.
struct StaleArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Lookup of an entity that does not exist (node id, pair, ...).
struct LookupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// User with no interaction history cannot be scored.
struct ColdUserError : std::runtime_error {
    explicit ColdUserError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure during training (NaN loss / policy output).
struct TrainingDiverged : std::runtime_error {
    TrainingDiverged(const std::string& what, int at_epoch)
        : std::runtime_error(what + " at epoch " + std::to_string(at_epoch)),
          epoch(at_epoch) {}
    int epoch;
};

}  // namespace cper
