#pragma once

#include <stdexcept>
#include <string>

namespace spda {

// User/configuration mistakes (bad dims, bad config files, bad CLI input).
// The CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreements between internal stages.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File ingestion failures (unreadable image, malformed annotations, ...).
struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runtime numeric failures (non-finite loss, divergence). CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace spda
