#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "sambd/tensor.hpp"

// Differentiable layer primitives over NCHW tensors. Every reduction is
// carried out in double precision in a fixed order, so results are
// bit-reproducible for identical inputs.
namespace sambd::nn {

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

// Padding that preserves spatial extents at stride 1.
int same_padding(int kernel, int dilation = 1);

// Cross-correlation. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dOptions options = {});

// One [1, kh, kw] filter per input channel.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           Conv2dOptions options = {});

// Depthwise stage (stride/dilation/padding from `options`) followed by a
// 1x1 pointwise stage carrying the bias.
template <typename T>
Tensor<T> separable_conv2d(const Tensor<T>& input, const Tensor<T>& depthwise_kernel,
                           const Tensor<T>& pointwise_kernel, const Tensor<T>& bias,
                           Conv2dOptions options = {});

// Half-pixel-centre bilinear interpolation with edge clamping.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int factor);

enum class Activation { relu, sigmoid };
Activation parse_activation(std::string_view name);

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind);
template <typename T>
Tensor<T> relu(const Tensor<T>& input) { return activation(input, Activation::relu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) { return activation(input, Activation::sigmoid); }

// Softmax over the class axis of [..., K, H, W].
template <typename T>
Tensor<T> softmax_over_classes(const Tensor<T>& logits);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor);

// x[n,c,h,w] * gamma[c]
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& input, const Tensor<T>& gamma);

// features[n,c,h,w] * gate[n,0,h,w]: one spatial map broadcast over channels.
template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& features, const Tensor<T>& gate);

// Concatenation along axis 0 or 1 of rank-4 tensors.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

// [n,c,1,1] -> [n,c,h,w]
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& input, std::size_t height, std::size_t width);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

// Multiply-accumulate counter for conv and upsampling kernels. While a
// guard is alive, ops on this thread add their MAC counts to it.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t total() const { return total_; }
  void add(std::uint64_t macs) { total_ += macs; }
  static MacCounter* active();

 private:
  std::uint64_t total_ = 0;
  MacCounter* previous_;
};

}  // namespace sambd::nn
