#pragma once

#include <stdexcept>
#include <string>

namespace gdf {

// Base for everything thrown by this library. Subclasses distinguish the
// failure families the contracts talk about; all carry a complete message.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible extents (matmul inner dims, channel counts, ...).
struct shape_error : error {
    using error::error;
};

// Argument outside its documented domain (timestep range, bad lambda, ...).
struct validation_error : error {
    using error::error;
};

// Lookup outside a table (writer id, class label).
struct index_error : error {
    using error::error;
};

// Character not present in a vocabulary.
struct vocab_error : error {
    using error::error;
};

// API misuse that is a programming error at the call site
// (non-scalar backward target, mixed feature extractors).
struct contract_error : error {
    using error::error;
};

// Non-finite value produced, or a matrix too indefinite to take a root of.
struct numeric_error : error {
    using error::error;
};

// Malformed file content (manifest lines, config text, checkpoint bytes).
struct parse_error : error {
    using error::error;
};

// Filesystem failures.
struct io_error : error {
    using error::error;
};

}  // namespace gdf
