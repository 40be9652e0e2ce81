#include "sambd/windows.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sambd/error.hpp"
#include "sambd/preprocess.hpp"

namespace sambd::vol {

WindowLayout window_layout(std::size_t slices, std::size_t c_in, std::size_t c_out, bool pad, std::size_t stride) {
  if (c_in < c_out || (c_in - c_out) % 2 != 0 || c_out == 0) {
    throw std::invalid_argument("window_layout: c_in - c_out must be even and non-negative");
  }
  if (stride == 0) throw std::invalid_argument("window_layout: stride must be positive");
  WindowLayout layout{slices, c_in, c_out, pad ? (c_in - c_out) / 2 : 0, stride, 0};
  const std::size_t padded = slices + 2 * layout.pad;
  if (padded < c_in) {
    throw DataError("volume has " + std::to_string(slices) + " slices; at least " +
                    std::to_string(c_in - 2 * layout.pad) + " are needed for " + std::to_string(c_in) +
                    "-slice windows");
  }
  layout.count = (padded - c_in) / stride + 1;
  return layout;
}

std::vector<std::size_t> coverage_counts(const WindowLayout& layout) {
  std::vector<std::size_t> counts(layout.slices, 0);
  for (std::size_t i = 0; i < layout.count; ++i) {
    for (std::size_t j = 0; j < layout.c_out; ++j) {
      const std::size_t padded = layout.first_output(i) + j;
      if (padded < layout.pad || padded - layout.pad >= layout.slices) continue;
      ++counts[padded - layout.pad];
    }
  }
  return counts;
}

std::size_t coverage_closed_form(std::size_t z, std::size_t slices, std::size_t c_out) {
  if (slices < c_out || z >= slices) return 0;
  return std::min({c_out, z + 1, slices - z, slices - c_out + 1});
}

template <typename V>
Volume<V> pad_z_replicate(const Volume<V>& v, std::size_t pad) {
  if (v.dims.z == 0) throw DataError("cannot pad an empty volume");
  Dims d = v.dims;
  d.z += 2 * pad;
  Volume<V> out(d, v.spacing);
  for (std::size_t k = 0; k < d.z; ++k) {
    const std::size_t src = std::min(k < pad ? 0 : k - pad, v.dims.z - 1);
    std::copy_n(v.slice(src), d.plane(), out.slice(k));
  }
  return out;
}

template ImageVolume pad_z_replicate(const ImageVolume&, std::size_t);
template LabelVolume pad_z_replicate(const LabelVolume&, std::size_t);

TrainingSample make_window(const ImageVolume& image, const LabelVolume* labels, const WindowLayout& layout,
                           std::size_t i) {
  if (i >= layout.count) throw std::out_of_range("make_window: window index out of range");
  if (labels && labels->dims != image.dims) throw DataError("image and label volumes differ in size");
  if (image.dims.z != layout.slices) throw std::invalid_argument("make_window: layout does not match volume");
  TrainingSample s;
  s.height = image.dims.y;
  s.width = image.dims.x;
  s.c_in = layout.c_in;
  s.c_out = layout.c_out;
  const std::size_t plane = image.dims.plane();
  auto source = [&](std::size_t padded) {
    // Replicated edges resolve to the first / last original slice.
    if (padded < layout.pad) return std::size_t{0};
    return std::min(padded - layout.pad, layout.slices - 1);
  };
  s.input.resize(layout.c_in * plane);
  for (std::size_t k = 0; k < layout.c_in; ++k) {
    std::copy_n(image.slice(source(layout.start(i) + k)), plane, s.input.begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  if (labels) {
    s.target.resize(layout.c_out * plane);
    for (std::size_t j = 0; j < layout.c_out; ++j) {
      std::copy_n(labels->slice(source(layout.first_output(i) + j)), plane, s.target.begin() + static_cast<std::ptrdiff_t>(j * plane));
    }
  }
  return s;
}

std::vector<TrainingSample> extract_windows(const ImageVolume& image, const LabelVolume& labels, std::size_t c_in,
                                            std::size_t c_out, bool pad, std::size_t stride) {
  const WindowLayout layout = window_layout(image.dims.z, c_in, c_out, pad, stride);
  std::vector<TrainingSample> out;
  out.reserve(layout.count);
  for (std::size_t i = 0; i < layout.count; ++i) out.push_back(make_window(image, &labels, layout, i));
  return out;
}

TrainingSample augment(const TrainingSample& sample, Rng& rng, const AugmentOptions& options) {
  if (options.crop == 0) throw std::invalid_argument("augment: crop must be positive");
  const double u = options.forced_scale ? *options.forced_scale : rng.uniform(options.scale_lo, options.scale_hi);
  if (!(u > 0.0)) throw std::invalid_argument("augment: scale must be positive");
  const std::size_t h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(sample.height) * u)));
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(sample.width) * u)));
  if (options.crop > h || options.crop > w) {
    throw DataError("augment: crop " + std::to_string(options.crop) + " exceeds scaled extent " + std::to_string(h) +
                    "x" + std::to_string(w));
  }
  std::size_t y0, x0;
  if (options.center_crop) {
    y0 = (h - options.crop) / 2;
    x0 = (w - options.crop) / 2;
  } else {
    y0 = rng.index(h - options.crop + 1);
    x0 = rng.index(w - options.crop + 1);
  }
  const std::size_t plane = sample.height * sample.width;
  const std::size_t crop_plane = options.crop * options.crop;
  const bool identity = h == sample.height && w == sample.width;

  TrainingSample out;
  out.height = out.width = options.crop;
  out.c_in = sample.c_in;
  out.c_out = sample.c_out;
  out.input.resize(sample.c_in * crop_plane);
  out.target.resize(sample.target.empty() ? 0 : sample.c_out * crop_plane);

  auto crop_into = [&](const auto& scaled, auto dst) {
    for (std::size_t y = 0; y < options.crop; ++y) {
      std::copy_n(scaled.begin() + static_cast<std::ptrdiff_t>((y0 + y) * w + x0), options.crop,
                  dst + static_cast<std::ptrdiff_t>(y * options.crop));
    }
  };
  for (std::size_t k = 0; k < sample.c_in; ++k) {
    std::span<const float> src(sample.input.data() + k * plane, plane);
    auto dst = out.input.begin() + static_cast<std::ptrdiff_t>(k * crop_plane);
    if (identity) {
      crop_into(src, dst);
    } else {
      crop_into(resize_bilinear(src, sample.height, sample.width, h, w), dst);
    }
  }
  if (!sample.target.empty()) {
    for (std::size_t j = 0; j < sample.c_out; ++j) {
      std::span<const std::uint8_t> src(sample.target.data() + j * plane, plane);
      auto dst = out.target.begin() + static_cast<std::ptrdiff_t>(j * crop_plane);
      if (identity) {
        crop_into(src, dst);
      } else {
        crop_into(resize_nearest(src, sample.height, sample.width, h, w), dst);
      }
    }
  }
  return out;
}

}  // namespace sambd::vol
