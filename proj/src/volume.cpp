#include "sambd/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "sambd/error.hpp"

namespace sambd::vol {

namespace {

constexpr const char* kMagic = "SVOL1";

void validate_geometry(const Dims& d, const Spacing& s, std::size_t count) {
  if (d.count() != count) {
    throw DataError("volume: " + std::to_string(count) + " voxels do not match dims " + std::to_string(d.x) + "x" +
                    std::to_string(d.y) + "x" + std::to_string(d.z));
  }
  if (!(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) || !std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.z)) {
    throw DataError("volume: spacing must be strictly positive");
  }
}

template <typename V>
void write_impl(const Volume<V>& v, const std::filesystem::path& path, const char* dtype) {
  nlohmann::ordered_json header;
  header["magic"] = kMagic;
  header["dims"] = {v.dims.x, v.dims.y, v.dims.z};
  header["spacing_mm"] = {v.spacing.x, v.spacing.y, v.spacing.z};
  header["dtype"] = dtype;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << header.dump() << '\n';
  if constexpr (sizeof(V) == 1) {
    out.write(reinterpret_cast<const char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size()));
  } else {
    std::vector<char> bytes(v.voxels.size() * 4);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(v.voxels[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(bytes.data() + 4 * i, &bits, 4);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

void validate(const ImageVolume& v) { validate_geometry(v.dims, v.spacing, v.voxels.size()); }

void validate(const LabelVolume& v) {
  validate_geometry(v.dims, v.spacing, v.voxels.size());
  for (std::uint8_t l : v.voxels) {
    if (l >= kNumLabels) throw DataError("label volume contains value " + std::to_string(l) + "; labels must be 0..2");
  }
}

void write_svol(const ImageVolume& v, const std::filesystem::path& path) {
  validate(v);
  write_impl(v, path, "f32");
}

void write_svol(const LabelVolume& v, const std::filesystem::path& path) {
  validate(v);
  write_impl(v, path, "u8");
}

std::variant<ImageVolume, LabelVolume> read_svol(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  }
  if (!header.is_object() || header.value("magic", "") != kMagic) throw DataError(path.string() + ": bad magic");
  Dims dims;
  Spacing spacing;
  std::string dtype;
  try {
    const auto d = header.at("dims").get<std::vector<std::size_t>>();
    const auto s = header.at("spacing_mm").get<std::vector<double>>();
    if (d.size() != 3 || s.size() != 3) throw DataError(path.string() + ": dims and spacing_mm need 3 entries");
    dims = {d[0], d[1], d[2]};
    spacing = {s[0], s[1], s[2]};
    dtype = header.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (dtype == "u8") {
    if (payload.size() != dims.count()) {
      throw DataError(path.string() + ": payload size mismatch (" + std::to_string(payload.size()) + " bytes, expected " +
                      std::to_string(dims.count()) + ")");
    }
    LabelVolume v(dims, spacing);
    std::memcpy(v.voxels.data(), payload.data(), payload.size());
    validate(v);
    return v;
  }
  if (dtype == "f32") {
    if (payload.size() != dims.count() * 4) {
      throw DataError(path.string() + ": payload size mismatch (" + std::to_string(payload.size()) + " bytes, expected " +
                      std::to_string(dims.count() * 4) + ")");
    }
    ImageVolume v(dims, spacing);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, payload.data() + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      v.voxels[i] = std::bit_cast<float>(bits);
    }
    validate(v);
    return v;
  }
  throw DataError(path.string() + ": unknown dtype '" + dtype + "'");
}

ImageVolume read_image_svol(const std::filesystem::path& path) {
  auto v = read_svol(path);
  if (auto* img = std::get_if<ImageVolume>(&v)) return std::move(*img);
  throw DataError(path.string() + ": expected an f32 intensity volume");
}

LabelVolume read_label_svol(const std::filesystem::path& path) {
  auto v = read_svol(path);
  if (auto* lbl = std::get_if<LabelVolume>(&v)) return std::move(*lbl);
  throw DataError(path.string() + ": expected a u8 label volume");
}

}  // namespace sambd::vol
