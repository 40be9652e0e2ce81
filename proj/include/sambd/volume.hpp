#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace sambd::vol {

struct Dims {
  std::size_t x = 0, y = 0, z = 0;
  std::size_t count() const { return x * y * z; }
  std::size_t plane() const { return x * y; }
  bool operator==(const Dims&) const = default;
};

struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;  // millimetres
  bool operator==(const Spacing&) const = default;
};

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kLiver = 1;
inline constexpr std::uint8_t kTumor = 2;
inline constexpr std::uint8_t kNumLabels = 3;

// Voxels are stored x-fastest: index = x + X * (y + Y * z). Slice z is the
// contiguous block [z * X * Y, (z + 1) * X * Y).
template <typename V>
struct Volume {
  Dims dims;
  Spacing spacing;
  std::vector<V> voxels;

  Volume() = default;
  Volume(Dims d, Spacing s, V fill = V{}) : dims(d), spacing(s), voxels(d.count(), fill) {}

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims.x * (y + dims.y * z); }
  V& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
  const V& at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }
  const V* slice(std::size_t z) const { return voxels.data() + z * dims.plane(); }
  V* slice(std::size_t z) { return voxels.data() + z * dims.plane(); }

  bool operator==(const Volume&) const = default;
};

using ImageVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;
using BinaryMask = Volume<std::uint8_t>;  // 0 / 1

// Throws DataError on inconsistent size, non-positive spacing, or (labels)
// values outside {0,1,2}.
void validate(const ImageVolume& v);
void validate(const LabelVolume& v);

// SVOL: a one-line JSON header {magic, dims, spacing_mm, dtype} followed by
// a newline and the raw little-endian payload (f32 or u8).
void write_svol(const ImageVolume& v, const std::filesystem::path& path);
void write_svol(const LabelVolume& v, const std::filesystem::path& path);
std::variant<ImageVolume, LabelVolume> read_svol(const std::filesystem::path& path);
ImageVolume read_image_svol(const std::filesystem::path& path);
LabelVolume read_label_svol(const std::filesystem::path& path);

}  // namespace sambd::vol
