#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  std::size_t checked = 0;
  double max_rel_error = 0;
  GradCheckEntry worst;
  std::vector<std::size_t> untouched;  // params whose gradient is identically zero
};

// |a - n| / max(|a|, |n|, floor)
double gradient_rel_error(double analytic, double numeric, double floor = 1e-7);

// Compares the taped gradient of `loss` with central differences for every
// entry of every parameter (or `max_per_param` evenly spaced entries when
// nonzero). `loss` must rebuild the graph on each call.
GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params, double step = 1e-5,
                                std::size_t max_per_param = 0);

NPTT_NAMESPACE_END
