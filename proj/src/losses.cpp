#include "sambd/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "sambd/ops.hpp"

namespace sambd::loss {

namespace {

struct Group {
  std::vector<std::size_t> slices;
  double weight;
};

struct Layout {
  std::size_t slices, classes, plane;
};

template <typename T>
Layout check_inputs(const Tensor<T>& probs, const Tensor<T>& labels) {
  const Shape& s = probs.shape();
  if (s.size() != 4) throw std::invalid_argument("loss: probs must be [c_out, classes, H, W], got " + shape_str(s));
  if (labels.shape() != s) {
    throw std::invalid_argument("loss: shape mismatch between probs " + shape_str(s) + " and labels " +
                                shape_str(labels.shape()));
  }
  const Layout layout{s[0], s[1], s[2] * s[3]};
  const auto g = labels.data();
  for (std::size_t m = 0; m < layout.slices; ++m) {
    for (std::size_t i = 0; i < layout.plane; ++i) {
      T total{0};
      for (std::size_t c = 0; c < layout.classes; ++c) {
        const T v = g[(m * layout.classes + c) * layout.plane + i];
        if (v != T{0} && v != T{1}) throw std::invalid_argument("loss: labels must be one-hot");
        total += v;
      }
      if (total != T{1}) throw std::invalid_argument("loss: labels must be one-hot");
    }
  }
  return layout;
}

// -sum_groups weight * sum_c (2 sum P*G + eps) / (sum P^2 + sum G^2 + eps),
// where P and G are the summed probability / label fields of the group's
// slices. `group_values` receives -sum_c ratio per group.
template <typename T>
Tensor<T> grouped_dice(const Tensor<T>& probs, const Tensor<T>& labels, std::vector<Group> groups, double epsilon,
                       std::vector<double>* group_values) {
  const Layout L = check_inputs(probs, labels);
  const auto p = probs.data();
  const auto g = labels.data();
  auto field = [L](std::span<const T> src, const Group& grp, std::size_t c, std::size_t i) {
    double v = 0.0;
    for (std::size_t s : grp.slices) v += static_cast<double>(src[(s * L.classes + c) * L.plane + i]);
    return v;
  };

  // Per (group, class): numerator and denominator of the ratio.
  std::vector<double> num(groups.size() * L.classes), den(groups.size() * L.classes);
  double total = 0.0;
  if (group_values) group_values->assign(groups.size(), 0.0);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    double group_sum = 0.0;
    for (std::size_t c = 0; c < L.classes; ++c) {
      double inter = 0.0, pp = 0.0, gg = 0.0;
      for (std::size_t i = 0; i < L.plane; ++i) {
        const double pv = field(p, groups[k], c, i);
        const double gv = field(g, groups[k], c, i);
        inter += pv * gv;
        pp += pv * pv;
        gg += gv * gv;
      }
      num[k * L.classes + c] = 2.0 * inter + epsilon;
      den[k * L.classes + c] = pp + gg + epsilon;
      group_sum += num[k * L.classes + c] / den[k * L.classes + c];
    }
    if (group_values) (*group_values)[k] = -group_sum;
    total -= groups[k].weight * group_sum;
  }

  return Tensor<T>::make_result(
      {1}, {static_cast<T>(total)}, {probs, labels},
      [L, groups = std::move(groups), num = std::move(num), den = std::move(den), field](detail::Node<T>& self) {
        const auto& pin = self.inputs[0];
        if (!pin || !pin->requires_grad) return;
        auto& dp = pin->ensure_grad();
        const std::span<const T> p(pin->data);
        const std::span<const T> g(self.inputs[1]->data);
        const double upstream = static_cast<double>(self.grad[0]);
        for (std::size_t k = 0; k < groups.size(); ++k) {
          for (std::size_t c = 0; c < L.classes; ++c) {
            const double n = num[k * L.classes + c];
            const double d = den[k * L.classes + c];
            const double coeff = -groups[k].weight * upstream / (d * d);
            for (std::size_t i = 0; i < L.plane; ++i) {
              const double dratio = 2.0 * field(g, groups[k], c, i) * d - n * 2.0 * field(p, groups[k], c, i);
              const T delta = static_cast<T>(coeff * dratio);
              for (std::size_t s : groups[k].slices) dp[(s * L.classes + c) * L.plane + i] += delta;
            }
          }
        }
      });
}

void check_pair(int m, int n, std::size_t slices) {
  if (m < 0 || n < 0 || static_cast<std::size_t>(n) >= slices || static_cast<std::size_t>(m) >= slices) {
    throw std::out_of_range("pairwise_dice: slice index out of range");
  }
  if (m >= n) throw std::invalid_argument("pairwise_dice: requires m < n");
}

}  // namespace

template <typename T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, std::size_t slices, std::size_t classes, std::size_t height,
                  std::size_t width) {
  const std::size_t plane = height * width;
  if (labels.size() != slices * plane) throw std::invalid_argument("one_hot: label count does not match shape");
  std::vector<T> out(slices * classes * plane, T{0});
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t c = labels[s * plane + i];
      if (c >= classes) throw std::invalid_argument("one_hot: label " + std::to_string(c) + " out of range");
      out[(s * classes + c) * plane + i] = T{1};
    }
  }
  return Tensor<T>::from_data({slices, classes, height, width}, std::move(out));
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& labels, double epsilon) {
  std::vector<Group> groups;
  for (std::size_t m = 0; m < probs.dim(0); ++m) groups.push_back({{m}, 1.0});
  return grouped_dice(probs, labels, std::move(groups), epsilon, nullptr);
}

template <typename T>
Tensor<T> pairwise_dice(const Tensor<T>& probs, const Tensor<T>& labels, int m, int n, double epsilon) {
  check_pair(m, n, probs.dim(0));
  return grouped_dice(probs, labels, {{{static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, 1.0}}, epsilon,
                      nullptr);
}

double pair_weight(int m, int n) {
  if (m >= n) throw std::invalid_argument("pair_weight: requires m < n");
  return 1.0 / static_cast<double>(n - m);
}

std::vector<PairTerm> pair_layout(int c_out) {
  std::vector<PairTerm> pairs;
  for (int d = 1; d < c_out; ++d) {
    for (int m = 0; m + d < c_out; ++m) pairs.push_back({m, m + d, pair_weight(m, m + d), 0.0});
  }
  return pairs;
}

double lambda_weight(int c_out) {
  if (c_out < 2) throw std::invalid_argument("lambda_weight: inter-slice loss needs c_out >= 2");
  double total = 0.0;
  for (const auto& p : pair_layout(c_out)) total += p.weight;
  return static_cast<double>(c_out) / total;
}

template <typename T>
Tensor<T> dcd_loss(const Tensor<T>& probs, const Tensor<T>& labels, double epsilon, std::vector<PairTerm>* breakdown) {
  const int c_out = static_cast<int>(probs.dim(0));
  if (c_out < 2) throw std::invalid_argument("dcd_loss: needs at least two output slices");
  std::vector<PairTerm> pairs = pair_layout(c_out);
  std::vector<Group> groups;
  for (const auto& p : pairs) {
    groups.push_back({{static_cast<std::size_t>(p.m), static_cast<std::size_t>(p.n)}, p.weight});
  }
  std::vector<double> values;
  Tensor<T> out = grouped_dice(probs, labels, std::move(groups), epsilon, &values);
  if (breakdown) {
    for (std::size_t k = 0; k < pairs.size(); ++k) pairs[k].value = values[k];
    *breakdown = std::move(pairs);
  }
  return out;
}

template <typename T>
LossValue<T> total_loss(const Tensor<T>& probs, const Tensor<T>& labels, const LossOptions& options) {
  LossValue<T> out;
  Tensor<T> dice = dice_loss(probs, labels, options.epsilon);
  out.dice = static_cast<double>(dice.item());
  if (!options.dcd) {
    out.total = dice;
    return out;
  }
  const int c_out = static_cast<int>(probs.dim(0));
  out.lambda = lambda_weight(c_out);
  Tensor<T> dcd = dcd_loss(probs, labels, options.epsilon, &out.pairs);
  out.dcd = static_cast<double>(dcd.item());
  out.total = nn::add(dice, nn::scale(dcd, out.lambda));
  return out;
}

#define SAMBD_INSTANTIATE_LOSSES(T)                                                                            \
  template Tensor<T> one_hot<T>(std::span<const std::uint8_t>, std::size_t, std::size_t, std::size_t,         \
                                std::size_t);                                                                  \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double);                                    \
  template Tensor<T> pairwise_dice(const Tensor<T>&, const Tensor<T>&, int, int, double);                      \
  template Tensor<T> dcd_loss(const Tensor<T>&, const Tensor<T>&, double, std::vector<PairTerm>*);             \
  template LossValue<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LossOptions&);

SAMBD_INSTANTIATE_LOSSES(float)
SAMBD_INSTANTIATE_LOSSES(double)

}  // namespace sambd::loss
