#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sambd/volume.hpp"

namespace sambd::vol {

// Synthetic abdomen: a bright ellipsoidal organ (label 1) holding darker
// spherical lesions (label 2), built on a 1 mm grid and then thickened
// along z by averaging groups of t slices.
struct PhantomConfig {
  Dims dims{80, 80, 48};  // fine grid
  double in_plane_spacing = 0.8;
  std::vector<int> thickness_choices{1, 2, 4};
  int forced_thickness = 0;  // 0 draws from thickness_choices

  double organ_semi_axis_xy_min_mm = 16.0, organ_semi_axis_xy_max_mm = 26.0;
  double organ_semi_axis_z_min_mm = 10.0, organ_semi_axis_z_max_mm = 18.0;
  double organ_center_jitter_mm = 4.0;
  int tumor_count_min = 1, tumor_count_max = 4;
  double tumor_radius_min_mm = 3.0, tumor_radius_max_mm = 7.0;

  double background_mean = -60.0;
  double organ_mean = 110.0;
  double tumor_mean = 35.0;
  double noise_sigma = 25.0;
  std::uint64_t seed = 1;

  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

struct Phantom {
  ImageVolume image;   // Hounsfield-like units
  LabelVolume labels;
  int thickness = 1;
};

// Deterministic in config (including seed). Throws DataError when a lesion
// cannot be placed inside the organ.
Phantom gen_phantom(const PhantomConfig& config);

struct DatasetConfig {
  PhantomConfig phantom;
  int n_train = 40;
  int n_val = 10;
  std::uint64_t seed = 2024;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct ManifestCase {
  std::string id;
  std::filesystem::path image;  // absolute once loaded
  std::filesystem::path label;
  std::string split;  // "train" or "val"
  double thickness_mm = 1.0;
};

struct Manifest {
  std::vector<ManifestCase> cases;
  std::vector<ManifestCase> split(const std::string& name) const;
};

// Paths are written relative to the manifest's directory.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

// Writes every case as SVOL pairs plus manifest.json into `out_dir`.
Manifest generate_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir);

}  // namespace sambd::vol
