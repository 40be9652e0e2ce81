#include "sambd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace sambd::nn {

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn, std::span<Tensor<double>> params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && coords.size() > options.max_coords_per_tensor) {
      // Partial Fisher-Yates keeps the sample independent of library shuffle details.
      for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      const double original = values[idx];
      values[idx] = original + options.eps;
      const double plus = loss_fn().item();
      values[idx] = original - options.eps;
      const double minus = loss_fn().item();
      values[idx] = original;
      const double fd = (plus - minus) / (2.0 * options.eps);
      const double err = std::abs(analytic[t][idx] - fd) / std::max(1.0, std::abs(fd));
      ++result.coordinates_checked;
      if (err > result.max_relative_error || std::isnan(err)) {
        result.max_relative_error = std::isnan(err) ? INFINITY : err;
        result.worst_tensor = t;
        result.worst_index = idx;
      }
    }
  }
  return result;
}

}  // namespace sambd::nn
