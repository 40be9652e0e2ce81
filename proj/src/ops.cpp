#include "sambd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sambd::nn {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<MatD>;
using ConstMapD = Eigen::Map<const MatD>;

thread_local MacCounter* active_counter = nullptr;

void count_macs(std::uint64_t macs) {
  if (active_counter) active_counter->add(macs);
}

template <typename T>
bool wants_grad(const std::shared_ptr<detail::Node<T>>& node) {
  return node && node->requires_grad;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

void require_rank4(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected a rank-4 NCHW tensor, got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t hout, wout;
  int stride, dilation, padding;
};

ConvGeometry conv_geometry(const Shape& in, std::size_t cout, std::size_t kh, std::size_t kw,
                           const Conv2dOptions& o, const char* op) {
  require(o.stride >= 1, std::string(op) + ": stride must be positive");
  require(o.dilation >= 1, std::string(op) + ": dilation must be positive");
  require(o.padding >= 0, std::string(op) + ": padding must be non-negative");
  ConvGeometry g{in[0], in[1], in[2], in[3], cout, kh, kw, 0, 0, o.stride, o.dilation, o.padding};
  const long eff_h = static_cast<long>(o.dilation) * (static_cast<long>(kh) - 1) + 1;
  const long eff_w = static_cast<long>(o.dilation) * (static_cast<long>(kw) - 1) + 1;
  const long span_h = static_cast<long>(g.h) + 2L * o.padding - eff_h;
  const long span_w = static_cast<long>(g.w) + 2L * o.padding - eff_w;
  require(span_h >= 0 && span_w >= 0, std::string(op) + ": kernel larger than padded input " + shape_str(in));
  g.hout = static_cast<std::size_t>(span_h / o.stride + 1);
  g.wout = static_cast<std::size_t>(span_w / o.stride + 1);
  return g;
}

// col[(c*kh + i)*kw + j, oy*wout + ox] for one image.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, double* col) {
  const std::size_t plane = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* src = image + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i) * g.dilation;
          double* dst = row + oy * g.wout;
          if (y < 0 || y >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wout, 0.0);
            continue;
          }
          const T* src_row = src + static_cast<std::size_t>(y) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long x = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j) * g.dilation;
            dst[ox] = (x < 0 || x >= static_cast<long>(g.w)) ? 0.0 : static_cast<double>(src_row[x]);
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* image) {
  const std::size_t plane = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* dst = image + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i) * g.dilation;
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          double* dst_row = dst + static_cast<std::size_t>(y) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long x = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j) * g.dilation;
            if (x >= 0 && x < static_cast<long>(g.w)) dst_row[x] += row[oy * g.wout + ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<double> to_double(std::span<const T> values) {
  return std::vector<double>(values.begin(), values.end());
}

template <typename T>
void add_into(std::vector<T>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<T>(src[i]);
}

struct Interp {
  std::size_t i0, i1;
  double frac;
};

std::vector<Interp> interp_table(std::size_t in, std::size_t out, int factor) {
  std::vector<Interp> table(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= in - 1) {
      table[i] = {in - 1, in - 1, 0.0};
    } else {
      table[i] = {i0, i0 + 1, src - static_cast<double>(i0)};
    }
  }
  return table;
}

}  // namespace

MacCounter::MacCounter() : previous_(active_counter) { active_counter = this; }
MacCounter::~MacCounter() { active_counter = previous_; }
MacCounter* MacCounter::active() { return active_counter; }

int same_padding(int kernel, int dilation) {
  require(kernel % 2 == 1, "same_padding: kernel size must be odd");
  return dilation * (kernel - 1) / 2;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dOptions options) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  require_rank4(is, "conv2d");
  require(ks.size() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(ks));
  require(ks[1] == is[1], "conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                              std::to_string(is[1]));
  require(ks[2] % 2 == 1 && ks[3] % 2 == 1, "conv2d: kernel extents must be odd");
  if (bias.defined()) require(bias.size() == ks[0], "conv2d: bias must have Cout elements");
  const ConvGeometry g = conv_geometry(is, ks[0], ks[2], ks[3], options, "conv2d");
  const std::size_t K = g.cin * g.kh * g.kw;
  const std::size_t P = g.hout * g.wout;
  count_macs(static_cast<std::uint64_t>(g.n) * g.cout * P * K);

  const std::vector<double> weights = to_double(kernel.data());
  std::vector<double> col(K * P);
  std::vector<double> out_d(g.cout * P);
  std::vector<T> out(g.n * g.cout * P);
  const auto in_data = input.data();
  const bool has_bias = bias.defined();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(in_data.data() + n * g.cin * g.h * g.w, g, col.data());
    MapD result(out_d.data(), g.cout, P);
    result.noalias() = ConstMapD(weights.data(), g.cout, K) * ConstMapD(col.data(), K, P);
    T* dst = out.data() + n * g.cout * P;
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double b = has_bias ? static_cast<double>(bias.data()[co]) : 0.0;
      for (std::size_t p = 0; p < P; ++p) dst[co * P + p] = static_cast<T>(out_d[co * P + p] + b);
    }
  }

  return Tensor<T>::make_result(
      {g.n, g.cout, g.hout, g.wout}, std::move(out), {input, kernel, bias},
      [g, K, P](detail::Node<T>& self) {
        const auto& x = self.inputs[0];
        const auto& w = self.inputs[1];
        const auto& b = self.inputs[2];
        const std::vector<double> weights(w->data.begin(), w->data.end());
        std::vector<double> col(K * P), dcol(K * P), grad_out(g.cout * P);
        std::vector<double> dw(g.cout * K, 0.0), db(g.cout, 0.0);
        std::vector<double> dx(g.cin * g.h * g.w);
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* go = self.grad.data() + n * g.cout * P;
          for (std::size_t i = 0; i < g.cout * P; ++i) grad_out[i] = static_cast<double>(go[i]);
          ConstMapD gmat(grad_out.data(), g.cout, P);
          if (wants_grad(w)) {
            im2col(x->data.data() + n * g.cin * g.h * g.w, g, col.data());
            MapD(dw.data(), g.cout, K).noalias() += gmat * ConstMapD(col.data(), K, P).transpose();
          }
          if (wants_grad(b)) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += grad_out[co * P + p];
              db[co] += acc;
            }
          }
          if (wants_grad(x)) {
            MapD(dcol.data(), K, P).noalias() = ConstMapD(weights.data(), g.cout, K).transpose() * gmat;
            std::fill(dx.begin(), dx.end(), 0.0);
            col2im(dcol.data(), g, dx.data());
            T* dst = x->ensure_grad().data() + n * g.cin * g.h * g.w;
            for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += static_cast<T>(dx[i]);
          }
        }
        if (wants_grad(w)) add_into(w->ensure_grad(), dw);
        if (wants_grad(b)) add_into(b->ensure_grad(), db);
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           Conv2dOptions options) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  require_rank4(is, "depthwise_conv2d");
  require(ks.size() == 4 && ks[1] == 1, "depthwise_conv2d: kernel must be [C,1,kh,kw], got " + shape_str(ks));
  require(ks[0] == is[1], "depthwise_conv2d: kernel has " + std::to_string(ks[0]) +
                              " filters for " + std::to_string(is[1]) + " channels");
  require(ks[2] % 2 == 1 && ks[3] % 2 == 1, "depthwise_conv2d: kernel extents must be odd");
  if (bias.defined()) require(bias.size() == ks[0], "depthwise_conv2d: bias must have C elements");
  const ConvGeometry g = conv_geometry(is, ks[0], ks[2], ks[3], options, "depthwise_conv2d");
  const std::size_t P = g.hout * g.wout;
  count_macs(static_cast<std::uint64_t>(g.n) * g.cin * P * g.kh * g.kw);

  // Visits every (output, tap) pair with a valid input position.
  auto for_each_tap = [g](std::size_t oy, std::size_t ox, auto&& fn) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i) * g.dilation;
      if (y < 0 || y >= static_cast<long>(g.h)) continue;
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long x = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j) * g.dilation;
        if (x < 0 || x >= static_cast<long>(g.w)) continue;
        fn(i * g.kw + j, static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(x));
      }
    }
  };

  std::vector<T> out(g.n * g.cin * P);
  const auto x = input.data();
  const auto k = kernel.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      const T* src = x.data() + (n * g.cin + c) * g.h * g.w;
      const T* filt = k.data() + c * g.kh * g.kw;
      const double b = bias.defined() ? static_cast<double>(bias.data()[c]) : 0.0;
      T* dst = out.data() + (n * g.cin + c) * P;
      for (std::size_t oy = 0; oy < g.hout; ++oy) {
        for (std::size_t ox = 0; ox < g.wout; ++ox) {
          double acc = 0.0;
          for_each_tap(oy, ox, [&](std::size_t tap, std::size_t pos) {
            acc += static_cast<double>(filt[tap]) * static_cast<double>(src[pos]);
          });
          dst[oy * g.wout + ox] = static_cast<T>(acc + b);
        }
      }
    }
  }

  return Tensor<T>::make_result(
      {g.n, g.cin, g.hout, g.wout}, std::move(out), {input, kernel, bias},
      [g, P, for_each_tap](detail::Node<T>& self) {
        const auto& xin = self.inputs[0];
        const auto& w = self.inputs[1];
        const auto& b = self.inputs[2];
        std::vector<double> dw(w->data.size(), 0.0), db(g.cin, 0.0);
        std::vector<double> dx(g.cin * g.h * g.w);
        for (std::size_t n = 0; n < g.n; ++n) {
          std::fill(dx.begin(), dx.end(), 0.0);
          for (std::size_t c = 0; c < g.cin; ++c) {
            const T* src = xin->data.data() + (n * g.cin + c) * g.h * g.w;
            const T* filt = w->data.data() + c * g.kh * g.kw;
            const T* go = self.grad.data() + (n * g.cin + c) * P;
            double* dfilt = dw.data() + c * g.kh * g.kw;
            double* dsrc = dx.data() + c * g.h * g.w;
            for (std::size_t oy = 0; oy < g.hout; ++oy) {
              for (std::size_t ox = 0; ox < g.wout; ++ox) {
                const double gv = static_cast<double>(go[oy * g.wout + ox]);
                db[c] += gv;
                for_each_tap(oy, ox, [&](std::size_t tap, std::size_t pos) {
                  dfilt[tap] += gv * static_cast<double>(src[pos]);
                  dsrc[pos] += gv * static_cast<double>(filt[tap]);
                });
              }
            }
          }
          if (wants_grad(xin)) {
            T* dst = xin->ensure_grad().data() + n * g.cin * g.h * g.w;
            for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += static_cast<T>(dx[i]);
          }
        }
        if (wants_grad(w)) add_into(w->ensure_grad(), dw);
        if (wants_grad(b)) add_into(b->ensure_grad(), db);
      });
}

template <typename T>
Tensor<T> separable_conv2d(const Tensor<T>& input, const Tensor<T>& depthwise_kernel,
                           const Tensor<T>& pointwise_kernel, const Tensor<T>& bias,
                           Conv2dOptions options) {
  const Shape& ps = pointwise_kernel.shape();
  require(ps.size() == 4 && ps[2] == 1 && ps[3] == 1,
          "separable_conv2d: pointwise kernel must be [Cout,Cin,1,1], got " + shape_str(ps));
  require(ps[1] == depthwise_kernel.dim(0), "separable_conv2d: pointwise stage expects " +
                                                std::to_string(ps[1]) + " channels, depthwise stage yields " +
                                                std::to_string(depthwise_kernel.dim(0)));
  Tensor<T> spatial = depthwise_conv2d(input, depthwise_kernel, Tensor<T>{}, options);
  return conv2d(spatial, pointwise_kernel, bias, {});
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int factor) {
  const Shape& s = input.shape();
  require_rank4(s, "bilinear_upsample");
  require(factor >= 2, "bilinear_upsample: factor must be at least 2");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t ho = h * static_cast<std::size_t>(factor), wo = w * static_cast<std::size_t>(factor);
  count_macs(static_cast<std::uint64_t>(n) * c * ho * wo * 4);
  const auto rows = interp_table(h, ho, factor);
  const auto cols = interp_table(w, wo, factor);

  std::vector<T> out(n * c * ho * wo);
  const auto x = input.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    T* dst = out.data() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Interp& r = rows[oy];
      const T* top = src + r.i0 * w;
      const T* bot = src + r.i1 * w;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Interp& q = cols[ox];
        const double upper = (1.0 - q.frac) * top[q.i0] + q.frac * top[q.i1];
        const double lower = (1.0 - q.frac) * bot[q.i0] + q.frac * bot[q.i1];
        dst[oy * wo + ox] = static_cast<T>((1.0 - r.frac) * upper + r.frac * lower);
      }
    }
  }

  return Tensor<T>::make_result(
      {n, c, ho, wo}, std::move(out), {input},
      [n, c, h, w, ho, wo, rows, cols](detail::Node<T>& self) {
        std::vector<double> plane_grad(h * w);
        T* dx = self.inputs[0]->ensure_grad().data();
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          std::fill(plane_grad.begin(), plane_grad.end(), 0.0);
          const T* go = self.grad.data() + plane * ho * wo;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const Interp& r = rows[oy];
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const Interp& q = cols[ox];
              const double gv = static_cast<double>(go[oy * wo + ox]);
              const double gt = (1.0 - r.frac) * gv;
              const double gb = r.frac * gv;
              plane_grad[r.i0 * w + q.i0] += (1.0 - q.frac) * gt;
              plane_grad[r.i0 * w + q.i1] += q.frac * gt;
              plane_grad[r.i1 * w + q.i0] += (1.0 - q.frac) * gb;
              plane_grad[r.i1 * w + q.i1] += q.frac * gb;
            }
          }
          T* dst = dx + plane * h * w;
          for (std::size_t i = 0; i < h * w; ++i) dst[i] += static_cast<T>(plane_grad[i]);
        }
      });
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
    }
  }
  return Tensor<T>::make_result(input.shape(), std::move(out), {input}, [kind](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->ensure_grad();
    const auto& xin = self.inputs[0]->data;
    if (kind == Activation::relu) {
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (xin[i] > T{0}) dx[i] += self.grad[i];
      }
    } else {
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const double y = self.data[i];
        dx[i] += static_cast<T>(static_cast<double>(self.grad[i]) * y * (1.0 - y));
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_over_classes(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  require(s.size() >= 3, "softmax_over_classes: expected [..., K, H, W], got " + shape_str(s));
  const std::size_t k = s[s.size() - 3];
  require(k >= 2, "softmax_over_classes: need at least two classes");
  const std::size_t inner = s[s.size() - 2] * s[s.size() - 1];
  const std::size_t outer = logits.size() / (k * inner);
  const auto x = logits.data();
  std::vector<T> out(x.size());
  std::vector<double> e(k);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * k * inner;
    for (std::size_t p = 0; p < inner; ++p) {
      double peak = x[base + p];
      for (std::size_t c = 1; c < k; ++c) peak = std::max(peak, static_cast<double>(x[base + c * inner + p]));
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        e[c] = std::exp(static_cast<double>(x[base + c * inner + p]) - peak);
        total += e[c];
      }
      for (std::size_t c = 0; c < k; ++c) out[base + c * inner + p] = static_cast<T>(e[c] / total);
    }
  }
  return Tensor<T>::make_result(s, std::move(out), {logits}, [k, inner, outer](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = o * k * inner;
      for (std::size_t p = 0; p < inner; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          const std::size_t i = base + c * inner + p;
          dot += static_cast<double>(self.data[i]) * static_cast<double>(self.grad[i]);
        }
        for (std::size_t c = 0; c < k; ++c) {
          const std::size_t i = base + c * inner + p;
          dx[i] += static_cast<T>(static_cast<double>(self.data[i]) * (static_cast<double>(self.grad[i]) - dot));
        }
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (const auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      auto& d = in->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& lhs = self.inputs[0];
    const auto& rhs = self.inputs[1];
    if (wants_grad(lhs)) {
      auto& d = lhs->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * rhs->data[i];
    }
    if (wants_grad(rhs)) {
      auto& d = rhs->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * lhs->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a.data()[i] * factor);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(self.grad[i] * factor);
  });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& input, const Tensor<T>& gamma) {
  const Shape& s = input.shape();
  require_rank4(s, "channel_scale");
  require(gamma.size() == s[1], "channel_scale: gamma must have one entry per channel");
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  std::vector<T> out(input.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = gamma.data()[ch];
      const std::size_t base = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = input.data()[base + p] * g;
    }
  return Tensor<T>::make_result(s, std::move(out), {input, gamma}, [n, c, plane](detail::Node<T>& self) {
    const auto& x = self.inputs[0];
    const auto& g = self.inputs[1];
    std::vector<double> dg(c, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (b * c + ch) * plane;
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += static_cast<double>(self.grad[base + p]) * x->data[base + p];
        dg[ch] += acc;
        if (wants_grad(x)) {
          auto& dx = x->ensure_grad();
          for (std::size_t p = 0; p < plane; ++p) dx[base + p] += self.grad[base + p] * g->data[ch];
        }
      }
    if (wants_grad(g)) add_into(g->ensure_grad(), dg);
  });
}

template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& features, const Tensor<T>& gate) {
  const Shape& s = features.shape();
  require_rank4(s, "spatial_gate");
  const Shape& gs = gate.shape();
  require(gs.size() == 4 && gs[0] == s[0] && gs[1] == 1 && gs[2] == s[2] && gs[3] == s[3],
          "spatial_gate: gate must be [N,1,H,W] matching features " + shape_str(s) + ", got " + shape_str(gs));
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  std::vector<T> out(features.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = features.data()[base + p] * gate.data()[b * plane + p];
    }
  return Tensor<T>::make_result(s, std::move(out), {features, gate}, [n, c, plane](detail::Node<T>& self) {
    const auto& f = self.inputs[0];
    const auto& g = self.inputs[1];
    std::vector<double> dg(n * plane, 0.0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (b * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          dg[b * plane + p] += static_cast<double>(self.grad[base + p]) * f->data[base + p];
        }
        if (wants_grad(f)) {
          auto& df = f->ensure_grad();
          for (std::size_t p = 0; p < plane; ++p) df[base + p] += self.grad[base + p] * g->data[b * plane + p];
        }
      }
    if (wants_grad(g)) add_into(g->ensure_grad(), dg);
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis) require(s[d] == first[d], "concat: extent mismatch on axis " + std::to_string(d));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t row = out_shape[axis] * inner;

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t chunk = extents[k] * inner;
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * row + offset);
    }
    offset += chunk;
  }
  return Tensor<T>::make_result(out_shape, std::move(out), parts,
                                [extents, outer, inner, row](detail::Node<T>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < extents.size(); ++k) {
                                    const std::size_t chunk = extents[k] * inner;
                                    const auto& in = self.inputs[k];
                                    if (wants_grad(in)) {
                                      auto& d = in->ensure_grad();
                                      for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t i = 0; i < chunk; ++i)
                                          d[o * chunk + i] += self.grad[o * row + off + i];
                                    }
                                    off += chunk;
                                  }
                                });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape& s = input.shape();
  require_rank4(s, "global_avg_pool");
  const std::size_t planes = s[0] * s[1], plane = s[2] * s[3];
  std::vector<T> out(planes);
  for (std::size_t i = 0; i < planes; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += input.data()[i * plane + p];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return Tensor<T>::make_result({s[0], s[1], 1, 1}, std::move(out), {input}, [planes, plane](detail::Node<T>& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < planes; ++i) {
      const T g = static_cast<T>(self.grad[i] / static_cast<double>(plane));
      for (std::size_t p = 0; p < plane; ++p) d[i * plane + p] += g;
    }
  });
}

template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& input, std::size_t height, std::size_t width) {
  const Shape& s = input.shape();
  require(s.size() == 4 && s[2] == 1 && s[3] == 1, "broadcast_spatial: expected [N,C,1,1], got " + shape_str(s));
  const std::size_t planes = s[0] * s[1], plane = height * width;
  std::vector<T> out(planes * plane);
  for (std::size_t i = 0; i < planes; ++i) std::fill_n(out.data() + i * plane, plane, input.data()[i]);
  return Tensor<T>::make_result({s[0], s[1], height, width}, std::move(out), {input},
                                [planes, plane](detail::Node<T>& self) {
                                  auto& d = self.inputs[0]->ensure_grad();
                                  for (std::size_t i = 0; i < planes; ++i) {
                                    double acc = 0.0;
                                    for (std::size_t p = 0; p < plane; ++p) acc += self.grad[i * plane + p];
                                    d[i] += static_cast<T>(acc);
                                  }
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  require(numel(shape) == input.size(),
          "reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  std::vector<T> out(input.data().begin(), input.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {input}, [](detail::Node<T>& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  double acc = 0.0;
  for (T v : input.data()) acc += v;
  return Tensor<T>::make_result({1}, {static_cast<T>(acc)}, {input}, [](detail::Node<T>& self) {
    auto& d = self.inputs[0]->ensure_grad();
    for (auto& v : d) v += self.grad[0];
  });
}

#define SAMBD_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);       \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                      Conv2dOptions);                                                   \
  template Tensor<T> separable_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                      const Tensor<T>&, Conv2dOptions);                                 \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, int);                                          \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                          \
  template Tensor<T> softmax_over_classes(const Tensor<T>&);                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, double);                                                   \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> spatial_gate(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                 \
  template Tensor<T> broadcast_spatial(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> sum(const Tensor<T>&);

SAMBD_INSTANTIATE_OPS(float)
SAMBD_INSTANTIATE_OPS(double)

}  // namespace sambd::nn
