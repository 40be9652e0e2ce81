#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sambd/rng.hpp"
#include "sambd/volume.hpp"

namespace sambd::vol {

// A stack of c_in normalised slices and the labels of its central c_out
// slices. Planes are row-major [H][W] with W along x.
struct TrainingSample {
  std::size_t height = 0, width = 0, c_in = 0, c_out = 0;
  std::vector<float> input;           // c_in * H * W
  std::vector<std::uint8_t> target;   // c_out * H * W
};

// Window placement along z. With padding, each end of the volume is
// extended by (c_in - c_out) / 2 replicated slices, so a stride-1 window i
// predicts original slices [i, i + c_out).
struct WindowLayout {
  std::size_t slices = 0;  // original Z
  std::size_t c_in = 0, c_out = 0;
  std::size_t pad = 0;
  std::size_t stride = 1;
  std::size_t count = 0;

  // Index of window i's first slice in the padded volume.
  std::size_t start(std::size_t i) const { return i * stride; }
  // Padded index of window i's first output slice.
  std::size_t first_output(std::size_t i) const { return start(i) + (c_in - c_out) / 2; }
};

WindowLayout window_layout(std::size_t slices, std::size_t c_in, std::size_t c_out, bool pad = true,
                           std::size_t stride = 1);

// Number of windows predicting each original slice.
std::vector<std::size_t> coverage_counts(const WindowLayout& layout);
// min(c_out, z + 1, Z - z, Z - c_out + 1) for padded stride-1 layouts.
std::size_t coverage_closed_form(std::size_t z, std::size_t slices, std::size_t c_out);

template <typename V>
Volume<V> pad_z_replicate(const Volume<V>& v, std::size_t pad);

// Stack of window i (labels optional).
TrainingSample make_window(const ImageVolume& image, const LabelVolume* labels, const WindowLayout& layout,
                           std::size_t i);

std::vector<TrainingSample> extract_windows(const ImageVolume& image, const LabelVolume& labels, std::size_t c_in,
                                            std::size_t c_out, bool pad = true, std::size_t stride = 1);

struct AugmentOptions {
  std::size_t crop = 64;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  std::optional<double> forced_scale;
  bool center_crop = false;
};

// In-plane rescaling (bilinear for intensities, nearest for labels) by a
// factor drawn from U(scale_lo, scale_hi), then a crop x crop crop.
TrainingSample augment(const TrainingSample& sample, Rng& rng, const AugmentOptions& options = {});

}  // namespace sambd::vol
