#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace dusss {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// sim_hat as a function of (sim, d_sss).
using SimHatFn = std::function<double(double, double)>;

struct VerifyOptions {
  std::string filter;           // substring match on check names; empty runs all
  std::size_t points = 10;      // random draws per gradient check
  std::size_t trials = 1000;    // random triples for the monotonicity check
  double grad_tol = 1e-5;
  double exact_tol = 1e-12;
  std::uint64_t seed = 7;
  SimHatFn sim_hat;             // defaults to uncertain_sim
};

std::vector<std::string> verify_check_names();
std::vector<CheckResult> run_verify(const VerifyOptions& options);

// Strict increase of sim_hat in d_u at fixed d_s and sim < 1.
CheckResult check_monotonicity(std::size_t trials, std::uint64_t seed, const SimHatFn& sim_hat);

void print_verify_table(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace dusss
