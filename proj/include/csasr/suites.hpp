#pragma once

#include <iosfwd>

namespace csasr {

/// Central-difference verification of every differentiable operation and
/// of the assembled toy model (64-bit). Prints one line per check and
/// returns the number of failures.
int run_gradcheck_suite(std::ostream& os);

/// Self-contained assertion battery over all modules (the per-operation
/// examples: identities, closed forms, small independent oracles).
/// Prints one line per check and returns the number of failures.
int run_selftest(std::ostream& os);

}  // namespace csasr
