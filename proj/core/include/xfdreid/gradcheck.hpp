#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xfdreid/common.hpp"

namespace xfdreid {

struct GradCheckConfig {
  std::uint64_t seed = 7;
  int trials = 100;
  double fd_step = 1e-5;
};

struct GradCheckResult {
  struct Entry {
    std::string tensor;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  int trials = 0;

  double worst() const;
  bool all_below(double tolerance) const;
};

// Central finite differences (64-bit) against the analytic gradients of the
// total training loss for every trainable tensor, plus the attention-pooling
// backward on its own. Configurations sweep T in {1,2,8,16} and C in {4,8,16}.
GradCheckResult run_gradcheck(const GradCheckConfig& config);

std::string format_gradcheck(const GradCheckResult& result);

// ||a - b|| / max(||a||, ||b||, floor); 0 when both gradients vanish.
double gradient_rel_err(const Vec& analytic, const Vec& numeric);

}  // namespace xfdreid
