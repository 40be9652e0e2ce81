#pragma once

#include "sambd/volume.hpp"

namespace sambd::vol {

inline constexpr double kWindowLo = -200.0;
inline constexpr double kWindowHi = 250.0;

// Clamps to [lo, hi] and rescales linearly onto [0, 1].
ImageVolume hu_window(const ImageVolume& v, double lo = kWindowLo, double hi = kWindowHi);

// Node-centred resampling along z: slice k sits at k * spacing.z, both
// endpoints are kept and the output holds floor((Z-1) * sz / target) + 1
// slices. Intensities interpolate linearly, labels take the nearest slice.
ImageVolume resample_z(const ImageVolume& v, double target_mm);
LabelVolume resample_z(const LabelVolume& v, double target_mm);

// Nearest-slice resampling of labels onto an explicit slice count and
// spacing; used to bring predictions back to an acquisition grid.
LabelVolume resample_z_to(const LabelVolume& v, std::size_t slices, double spacing_mm);

// Thick slices are brought down to `target_mm`; thinner ones are kept.
bool needs_resampling(const Spacing& s, double target_mm = 1.0);

// Single-plane resizing of a [H][W] row-major image. Bilinear uses
// half-pixel centres with edge clamping; nearest maps each output centre
// to the input pixel that contains it.
std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width);
std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> plane, std::size_t height, std::size_t width,
                                         std::size_t out_height, std::size_t out_width);

}  // namespace sambd::vol
