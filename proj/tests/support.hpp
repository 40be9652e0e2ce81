#pragma once

#include <cstdint>
#include <vector>

#include "sambd/rng.hpp"
#include "sambd/tensor.hpp"

namespace test_support {

template <typename T>
sambd::Tensor<T> random_tensor(sambd::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                               bool requires_grad = false) {
  sambd::Rng rng(seed);
  std::vector<T> data(sambd::numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return sambd::Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Direct-loop cross-correlation with zero padding; groups == in channels
// selects the depthwise form.
inline std::vector<double> naive_conv(const std::vector<double>& x, std::size_t n, std::size_t c, std::size_t h,
                                      std::size_t w, const std::vector<double>& k, std::size_t cout, std::size_t kh,
                                      std::size_t kw, const std::vector<double>* bias, int stride, int dilation,
                                      int padding, bool depthwise, std::size_t& oh, std::size_t& ow) {
  const long ih = static_cast<long>(h), iw = static_cast<long>(w);
  oh = static_cast<std::size_t>((ih + 2 * padding - dilation * (static_cast<long>(kh) - 1) - 1) / stride + 1);
  ow = static_cast<std::size_t>((iw + 2 * padding - dilation * (static_cast<long>(kw) - 1) - 1) / stride + 1);
  std::vector<double> y(n * cout * oh * ow, 0.0);
  const std::size_t kc = depthwise ? 1 : c;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t ci = 0; ci < kc; ++ci) {
            const std::size_t in_c = depthwise ? o : ci;
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t e = 0; e < kw; ++e) {
                const long yy = static_cast<long>(i) * stride - padding + static_cast<long>(a) * dilation;
                const long xx = static_cast<long>(j) * stride - padding + static_cast<long>(e) * dilation;
                if (yy < 0 || xx < 0 || yy >= ih || xx >= iw) continue;
                acc += x[((b * c + in_c) * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)] *
                       k[((o * kc + ci) * kh + a) * kw + e];
              }
          }
          y[((b * cout + o) * oh + i) * ow + j] = acc;
        }
  return y;
}

template <typename T>
std::vector<double> as_double(const sambd::Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace test_support
