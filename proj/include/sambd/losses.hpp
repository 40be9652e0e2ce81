#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sambd/tensor.hpp"

// Dice-family objectives over per-slice class probabilities.
//
// All functions take `probs` and one-hot `labels` shaped
// [c_out, classes, H, W] and use 0-based slice indices. Every Dice ratio is
// stabilised as (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps), so a class
// absent from both prediction and reference scores exactly 1.
namespace sambd::loss {

inline constexpr double kEpsilon = 1e-6;

struct PairTerm {
  int m = 0;
  int n = 0;
  double weight = 0.0;  // 1 / (n - m)
  double value = 0.0;   // pairwise Dice loss of the slice pair
};

template <typename T>
struct LossValue {
  Tensor<T> total;
  double dice = 0.0;
  std::optional<double> dcd;  // absent when the inter-slice term is disabled
  double lambda = 0.0;
  std::vector<PairTerm> pairs;
};

struct LossOptions {
  bool dcd = true;
  double epsilon = kEpsilon;
};

// Builds a one-hot tensor [slices, classes, H, W] from label slices laid
// out as [slices][H][W].
template <typename T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, std::size_t slices, std::size_t classes, std::size_t height,
                  std::size_t width);

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& labels, double epsilon = kEpsilon);

// Dice loss between the unions (sums) of slices m and n.
template <typename T>
Tensor<T> pairwise_dice(const Tensor<T>& probs, const Tensor<T>& labels, int m, int n, double epsilon = kEpsilon);

double pair_weight(int m, int n);

// Every slice pair of c_out outputs, ordered by distance then first index;
// values are left at zero.
std::vector<PairTerm> pair_layout(int c_out);

// c_out / sum of pair weights.
double lambda_weight(int c_out);

// Distance-weighted sum of pairwise Dice losses over all slice pairs.
// `breakdown`, when given, receives the per-pair values.
template <typename T>
Tensor<T> dcd_loss(const Tensor<T>& probs, const Tensor<T>& labels, double epsilon = kEpsilon,
                   std::vector<PairTerm>* breakdown = nullptr);

// dice + lambda * dcd, or dice alone when options.dcd is false.
template <typename T>
LossValue<T> total_loss(const Tensor<T>& probs, const Tensor<T>& labels, const LossOptions& options = {});

}  // namespace sambd::loss
