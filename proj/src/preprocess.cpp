#include "sambd/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sambd::vol {

namespace {

std::size_t resampled_count(std::size_t slices, double source_mm, double target_mm) {
  if (!(target_mm > 0.0)) throw std::invalid_argument("resample_z: target thickness must be positive");
  if (slices == 0) return 0;
  // The tolerance keeps exact ratios such as 3 * 2.0 / 1.0 from losing a slice.
  return static_cast<std::size_t>(std::floor(static_cast<double>(slices - 1) * source_mm / target_mm + 1e-9)) + 1;
}

template <typename V>
bool same_spacing(const Volume<V>& v, double target_mm) {
  return v.spacing.z == target_mm;
}

}  // namespace

ImageVolume hu_window(const ImageVolume& v, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("hu_window: requires lo < hi");
  ImageVolume out(v.dims, v.spacing);
  const double range = hi - lo;
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    const double c = std::clamp(static_cast<double>(v.voxels[i]), lo, hi);
    out.voxels[i] = static_cast<float>((c - lo) / range);
  }
  return out;
}

ImageVolume resample_z(const ImageVolume& v, double target_mm) {
  const std::size_t n = resampled_count(v.dims.z, v.spacing.z, target_mm);
  if (same_spacing(v, target_mm)) return v;
  Dims d = v.dims;
  d.z = n;
  ImageVolume out(d, {v.spacing.x, v.spacing.y, target_mm});
  const std::size_t plane = d.plane();
  for (std::size_t k = 0; k < n; ++k) {
    const double pos = static_cast<double>(k) * target_mm / v.spacing.z;
    const std::size_t z0 = std::min(static_cast<std::size_t>(std::floor(pos)), v.dims.z - 1);
    const std::size_t z1 = std::min(z0 + 1, v.dims.z - 1);
    const double f = std::clamp(pos - static_cast<double>(z0), 0.0, 1.0);
    const float* a = v.slice(z0);
    const float* b = v.slice(z1);
    float* o = out.slice(k);
    for (std::size_t i = 0; i < plane; ++i) {
      const double value = (1.0 - f) * a[i] + f * b[i];
      // Clamping to the neighbours removes rounding overshoot.
      o[i] = std::clamp(static_cast<float>(value), std::min(a[i], b[i]), std::max(a[i], b[i]));
    }
  }
  return out;
}

LabelVolume resample_z_to(const LabelVolume& v, std::size_t slices, double spacing_mm) {
  if (!(spacing_mm > 0.0)) throw std::invalid_argument("resample_z: target thickness must be positive");
  if (v.dims.z == 0) throw std::invalid_argument("resample_z: empty volume");
  Dims d = v.dims;
  d.z = slices;
  LabelVolume out(d, {v.spacing.x, v.spacing.y, spacing_mm});
  const std::size_t plane = d.plane();
  for (std::size_t k = 0; k < slices; ++k) {
    const double pos = static_cast<double>(k) * spacing_mm / v.spacing.z;
    const std::size_t src = std::min(static_cast<std::size_t>(std::floor(pos + 0.5)), v.dims.z - 1);
    std::copy_n(v.slice(src), plane, out.slice(k));
  }
  return out;
}

LabelVolume resample_z(const LabelVolume& v, double target_mm) {
  const std::size_t n = resampled_count(v.dims.z, v.spacing.z, target_mm);
  if (same_spacing(v, target_mm)) return v;
  return resample_z_to(v, n, target_mm);
}

bool needs_resampling(const Spacing& s, double target_mm) { return s.z > target_mm; }

std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width) {
  if (plane.size() != height * width) throw std::invalid_argument("resize_bilinear: plane size mismatch");
  if (height == 0 || width == 0 || out_height == 0 || out_width == 0) {
    throw std::invalid_argument("resize_bilinear: empty extent");
  }
  auto taps = [](std::size_t in, std::size_t out) {
    struct Tap {
      std::size_t i0, i1;
      double f;
    };
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
      std::size_t i0 = static_cast<std::size_t>(std::floor(src));
      double f = src - static_cast<double>(i0);
      if (i0 >= in - 1) {
        i0 = in - 1;
        f = 0.0;
      }
      t[o] = {i0, std::min(i0 + 1, in - 1), f};
    }
    return t;
  };
  const auto ty = taps(height, out_height);
  const auto tx = taps(width, out_width);
  std::vector<float> out(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    const float* r0 = plane.data() + ty[y].i0 * width;
    const float* r1 = plane.data() + ty[y].i1 * width;
    for (std::size_t x = 0; x < out_width; ++x) {
      const auto& c = tx[x];
      const double top = (1.0 - c.f) * r0[c.i0] + c.f * r0[c.i1];
      const double bottom = (1.0 - c.f) * r1[c.i0] + c.f * r1[c.i1];
      out[y * out_width + x] = static_cast<float>((1.0 - ty[y].f) * top + ty[y].f * bottom);
    }
  }
  return out;
}

std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> plane, std::size_t height, std::size_t width,
                                         std::size_t out_height, std::size_t out_width) {
  if (plane.size() != height * width) throw std::invalid_argument("resize_nearest: plane size mismatch");
  if (out_height == 0 || out_width == 0) throw std::invalid_argument("resize_nearest: empty extent");
  auto source = [](std::size_t o, std::size_t in, std::size_t out) {
    return std::min(in - 1, static_cast<std::size_t>((static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                                                     static_cast<double>(out)));
  };
  std::vector<std::uint8_t> out(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    const std::size_t sy = source(y, height, out_height);
    for (std::size_t x = 0; x < out_width; ++x) out[y * out_width + x] = plane[sy * width + source(x, width, out_width)];
  }
  return out;
}

}  // namespace sambd::vol
