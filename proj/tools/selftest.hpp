#pragma once

#include <ostream>

// Built in 64-bit precision, so it lives outside the precision namespaces.
namespace nptt_selftest {

// Prints one PASS/FAIL line per check; returns the number of failures.
int run(std::ostream& out);

}  // namespace nptt_selftest
