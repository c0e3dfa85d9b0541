#include "nptt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

NPTT_NAMESPACE_BEGIN

double gradient_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params, double step,
                                std::size_t max_per_param) {
  for (auto& p : params) {
    if (!p.requires_grad()) throw TensorError("gradient check on a parameter that does not require grad");
    p.zero_grad();
  }
  loss().backward();

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const auto grad = p.grad();
    const std::vector<Real> analytic(grad.begin(), grad.end());
    if (std::all_of(analytic.begin(), analytic.end(), [](Real g) { return g == Real(0); })) {
      result.untouched.push_back(pi);
    }
    auto values = p.values();
    const std::size_t n = values.size();
    const std::size_t count = max_per_param == 0 ? n : std::min(n, max_per_param);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : c * n / count;
      const Real saved = values[i];
      double plus = 0;
      double minus = 0;
      {
        NoGradGuard no_grad;
        values[i] = static_cast<Real>(saved + step);
        plus = loss().item();
        values[i] = static_cast<Real>(saved - step);
        minus = loss().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * step);
      const double err = gradient_rel_error(analytic[i], numeric);
      ++result.checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = {pi, i, static_cast<double>(analytic[i]), numeric, err};
      }
    }
  }
  return result;
}

NPTT_NAMESPACE_END
