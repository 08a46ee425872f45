#pragma once

#include <stdexcept>
#include <string>

namespace jps {

// Error taxonomy mirrors the process exit classes: config/validation,
// provenance, numeric, and I/O failures map to distinct codes at the
// C API boundary.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between tensors/operands.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid argument, out-of-range index, malformed config, bad enum value.
struct ValidationError : Error {
    using Error::Error;
};

// A mask or checkpoint was produced from a different model/dataset/seed.
struct ProvenanceError : Error {
    using Error::Error;
};

// Non-finite loss, divergence, degenerate denominator.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace jps
