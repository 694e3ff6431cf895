#pragma once

#include <cstdint>
#include <vector>

#include "dusss/tensor.hpp"

namespace dusss {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer with bias correction. Parameters are leaf tensors
// shared with the model, updated in place between graph constructions.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  // Throws if any parameter has no gradient buffer.
  void step();
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace dusss
