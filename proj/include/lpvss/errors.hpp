#pragma once

#include <stdexcept>
#include <string>

namespace lpvss {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};

struct SingularMatrix : Error {
    using Error::Error;
};

struct NoConvergence : Error {
    using Error::Error;
};

// State entry left the finite range during simulation. Carries the step index.
struct NonFiniteState : Error {
    explicit NonFiniteState(std::size_t step)
        : Error("non-finite state at step " + std::to_string(step)), step(step) {}
    std::size_t step;
};

struct NormBoundViolated : Error {
    using Error::Error;
};

struct DegenerateReference : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct FormatVersionMismatch : Error {
    using Error::Error;
};

struct CorruptFile : Error {
    using Error::Error;
};

}  // namespace lpvss
