#pragma once

#include <functional>
#include <vector>

#include "dusss/tensor.hpp"

namespace dusss {

struct GradcheckResult {
  double max_error = 0.0;      // max |analytic - numeric| / max(1, |numeric|)
  std::size_t checked = 0;     // number of scalar coordinates compared
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central finite differences with step h * max(1, |x|) on every element of
// every input that requires a gradient, compared against backward().
GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5);

}  // namespace dusss
