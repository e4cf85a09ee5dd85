#pragma once

#include <ostream>

namespace dfternet {

// Runs the library's property suites (quantizer ground truth, packed-kernel
// exactness, reconstruction-error bound, alpha consistency, quantized-BN
// equivalence, fusion statistics, STE gradients). Prints one line per suite;
// returns the number of failing suites.
int run_selftest(std::ostream& out);

}  // namespace dfternet
