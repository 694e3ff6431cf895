#include "dusss/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dusss {

GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h) {
  for (auto t : inputs) t.zero_grad();
  f(inputs).backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs)
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));

  GradcheckResult res;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor t = inputs[i];
    if (!t.requires_grad()) continue;
    auto values = t.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double x = values[j];
      const double step = h * std::max(1.0, std::abs(x));
      values[j] = x + step;
      const double up = f(inputs).item();
      values[j] = x - step;
      const double down = f(inputs).item();
      values[j] = x;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i][j] - numeric) / std::max(1.0, std::abs(numeric));
      res.max_error = std::max(res.max_error, err);
      ++res.checked;
    }
  }
  for (auto t : inputs) t.zero_grad();
  return res;
}

}  // namespace dusss
