#pragma once

#include <stdexcept>
#include <string>

namespace stoplab {

// Shape or broadcast mismatch between tensors.
struct dim_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value or combination.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed on-disk data (IDX files, checkpoints, CSV).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: backward on a consumed graph, non-scalar loss, probing an
// unmasked patch, and similar contract violations.
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken internal invariant; should be unreachable.
struct internal_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace stoplab
