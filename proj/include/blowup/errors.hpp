#pragma once

#include <stdexcept>
#include <string>

namespace blowup {

/// Base class for everything thrown by this library.  The CLI maps each
/// subclass to a distinct process exit code, so pick the subclass by what
/// the *caller* did wrong, not by where the throw happens to live.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad arguments: out-of-range dimension, mismatched grids, malformed
/// configuration values.  CLI exit code 2.
struct parameter_error : error {
    using error::error;
};

/// A numerical guard tripped: a solve diverged, a residual exceeded its
/// tolerance, an extrapolation lost its bracket.  CLI exit code 3.
struct numerical_error : error {
    using error::error;
};

/// Filesystem / parse failures: unreadable file, malformed CSV row.
/// CLI exit code 4.
struct io_error : error {
    using error::error;
};

} // namespace blowup
