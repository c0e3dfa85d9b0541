#pragma once

#include <cstddef>
#include <string>

// Checks that need 64-bit reals. Compiled against the double-precision
// library, so the interface uses plain types only.
namespace acceptance64 {

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

// Finite-difference check of every trainable parameter of a small model.
Outcome gradient_check();
// Path probabilities and predictions of random inputs sum to one.
Outcome routing_normalization();
// Interleaved leaf updates against a full-dataset two-pass computation.
Outcome leaf_update_oracle();

}  // namespace acceptance64
