#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sambd/tensor.hpp"

namespace sambd::nn {

struct GradCheckOptions {
  double eps = 1e-6;
  // 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

// Compares backward() against central differences. The reported error of
// a coordinate is |analytic - fd| / max(1, |fd|).
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn, std::span<Tensor<double>> params,
                           const GradCheckOptions& options = {});

}  // namespace sambd::nn
