#include "sambd/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "sambd/error.hpp"
#include "sambd/rng.hpp"

namespace sambd::vol {

namespace {

enum Stream : std::uint64_t { kShapeStream = 1, kNoiseStream = 2, kThicknessStream = 3 };

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> axes;

  double level(const std::array<double, 3>& p) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / axes[a];
      s += d * d;
    }
    return s;
  }
};

std::array<double, 3> voxel_center(std::size_t x, std::size_t y, std::size_t z, double in_plane) {
  return {(static_cast<double>(x) + 0.5) * in_plane, (static_cast<double>(y) + 0.5) * in_plane,
          static_cast<double>(z) + 0.5};
}

std::uint8_t majority(const std::array<int, kNumLabels>& votes) {
  std::uint8_t best = 0;
  for (std::uint8_t l = 1; l < kNumLabels; ++l) {
    if (votes[l] > votes[best]) best = l;
  }
  return best;
}

}  // namespace

void PhantomConfig::validate() const {
  if (dims.x == 0 || dims.y == 0 || dims.z == 0) throw std::invalid_argument("phantom: dims must be positive");
  if (!(in_plane_spacing > 0.0)) throw std::invalid_argument("phantom: in_plane_spacing must be positive");
  if (thickness_choices.empty()) throw std::invalid_argument("phantom: thickness_choices must not be empty");
  for (int t : thickness_choices) {
    if (t < 1 || static_cast<std::size_t>(t) > dims.z) {
      throw std::invalid_argument("phantom: thickness " + std::to_string(t) + " outside 1..dims.z");
    }
  }
  if (forced_thickness < 0 || static_cast<std::size_t>(forced_thickness) > dims.z) {
    throw std::invalid_argument("phantom: forced_thickness outside 0..dims.z");
  }
  if (!(0.0 < organ_semi_axis_xy_min_mm && organ_semi_axis_xy_min_mm <= organ_semi_axis_xy_max_mm) ||
      !(0.0 < organ_semi_axis_z_min_mm && organ_semi_axis_z_min_mm <= organ_semi_axis_z_max_mm)) {
    throw std::invalid_argument("phantom: organ semi-axis ranges must be positive and ordered");
  }
  if (organ_center_jitter_mm < 0.0) throw std::invalid_argument("phantom: organ_center_jitter_mm must be >= 0");
  const double half_x = 0.5 * static_cast<double>(std::min(dims.x, dims.y)) * in_plane_spacing;
  const double half_z = 0.5 * static_cast<double>(dims.z);
  if (organ_semi_axis_xy_max_mm + organ_center_jitter_mm > half_x ||
      organ_semi_axis_z_max_mm + organ_center_jitter_mm > half_z) {
    throw std::invalid_argument("phantom: organ radii do not fit inside dims");
  }
  if (tumor_count_min < 1 || tumor_count_min > tumor_count_max) {
    throw std::invalid_argument("phantom: tumor count range must satisfy 1 <= min <= max");
  }
  if (!(0.0 < tumor_radius_min_mm && tumor_radius_min_mm <= tumor_radius_max_mm)) {
    throw std::invalid_argument("phantom: tumor radius range must be positive and ordered");
  }
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("phantom: noise_sigma must be >= 0");
}

void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = nlohmann::json{{"dims", {c.dims.x, c.dims.y, c.dims.z}},
                     {"in_plane_spacing", c.in_plane_spacing},
                     {"thickness_choices", c.thickness_choices},
                     {"forced_thickness", c.forced_thickness},
                     {"organ_semi_axis_xy_mm", {c.organ_semi_axis_xy_min_mm, c.organ_semi_axis_xy_max_mm}},
                     {"organ_semi_axis_z_mm", {c.organ_semi_axis_z_min_mm, c.organ_semi_axis_z_max_mm}},
                     {"organ_center_jitter_mm", c.organ_center_jitter_mm},
                     {"tumor_count", {c.tumor_count_min, c.tumor_count_max}},
                     {"tumor_radius_mm", {c.tumor_radius_min_mm, c.tumor_radius_max_mm}},
                     {"background_mean", c.background_mean},
                     {"organ_mean", c.organ_mean},
                     {"tumor_mean", c.tumor_mean},
                     {"noise_sigma", c.noise_sigma},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
  PhantomConfig d;
  if (j.contains("dims")) {
    const auto v = j.at("dims").get<std::vector<std::size_t>>();
    if (v.size() != 3) throw std::invalid_argument("phantom: dims needs 3 entries");
    d.dims = {v[0], v[1], v[2]};
  }
  auto range = [&](const char* key, auto& lo, auto& hi) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<std::decay_t<decltype(lo)>>>();
    if (v.size() != 2) throw std::invalid_argument(std::string("phantom: ") + key + " needs [min, max]");
    lo = v[0];
    hi = v[1];
  };
  d.in_plane_spacing = j.value("in_plane_spacing", d.in_plane_spacing);
  d.thickness_choices = j.value("thickness_choices", d.thickness_choices);
  d.forced_thickness = j.value("forced_thickness", d.forced_thickness);
  range("organ_semi_axis_xy_mm", d.organ_semi_axis_xy_min_mm, d.organ_semi_axis_xy_max_mm);
  range("organ_semi_axis_z_mm", d.organ_semi_axis_z_min_mm, d.organ_semi_axis_z_max_mm);
  d.organ_center_jitter_mm = j.value("organ_center_jitter_mm", d.organ_center_jitter_mm);
  range("tumor_count", d.tumor_count_min, d.tumor_count_max);
  range("tumor_radius_mm", d.tumor_radius_min_mm, d.tumor_radius_max_mm);
  d.background_mean = j.value("background_mean", d.background_mean);
  d.organ_mean = j.value("organ_mean", d.organ_mean);
  d.tumor_mean = j.value("tumor_mean", d.tumor_mean);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.seed = j.value("seed", d.seed);
  c = std::move(d);
}

Phantom gen_phantom(const PhantomConfig& config) {
  config.validate();
  const Dims fine = config.dims;
  const double sp = config.in_plane_spacing;
  Rng shape = Rng::derive(config.seed, kShapeStream);
  Rng noise = Rng::derive(config.seed, kNoiseStream);
  Rng thick = Rng::derive(config.seed, kThicknessStream);

  const std::array<double, 3> extent{static_cast<double>(fine.x) * sp, static_cast<double>(fine.y) * sp,
                                     static_cast<double>(fine.z)};
  Ellipsoid organ;
  organ.axes = {shape.uniform(config.organ_semi_axis_xy_min_mm, config.organ_semi_axis_xy_max_mm),
                shape.uniform(config.organ_semi_axis_xy_min_mm, config.organ_semi_axis_xy_max_mm),
                shape.uniform(config.organ_semi_axis_z_min_mm, config.organ_semi_axis_z_max_mm)};
  for (int a = 0; a < 3; ++a) {
    organ.center[a] = 0.5 * extent[a] + shape.uniform(-config.organ_center_jitter_mm, config.organ_center_jitter_mm);
  }

  const int n_tumors = config.tumor_count_min +
                       static_cast<int>(shape.index(static_cast<std::size_t>(config.tumor_count_max - config.tumor_count_min + 1)));
  std::vector<std::pair<std::array<double, 3>, double>> tumors;
  for (int t = 0; t < n_tumors; ++t) {
    const double r = shape.uniform(config.tumor_radius_min_mm, config.tumor_radius_max_mm);
    // A sphere lies inside the organ when its centre lies inside the organ
    // shrunk by r along every axis.
    Ellipsoid room{organ.center, {organ.axes[0] - r, organ.axes[1] - r, organ.axes[2] - r}};
    if (room.axes[0] <= 0.0 || room.axes[1] <= 0.0 || room.axes[2] <= 0.0) {
      throw DataError("phantom: tumor radius " + std::to_string(r) + " mm does not fit inside the organ");
    }
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      std::array<double, 3> c;
      for (int a = 0; a < 3; ++a) c[a] = room.center[a] + shape.uniform(-room.axes[a], room.axes[a]);
      if (room.level(c) <= 1.0) {
        tumors.emplace_back(c, r);
        placed = true;
      }
    }
    if (!placed) throw DataError("phantom: could not place tumor inside the organ");
  }

  LabelVolume fine_labels(fine, {sp, sp, 1.0});
  ImageVolume fine_image(fine, {sp, sp, 1.0});
  for (std::size_t z = 0; z < fine.z; ++z) {
    for (std::size_t y = 0; y < fine.y; ++y) {
      for (std::size_t x = 0; x < fine.x; ++x) {
        const auto p = voxel_center(x, y, z, sp);
        std::uint8_t label = kBackground;
        if (organ.level(p) <= 1.0) {
          label = kLiver;
          for (const auto& [c, r] : tumors) {
            const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
            if (dx * dx + dy * dy + dz * dz <= r * r) label = kTumor;
          }
        }
        const double mean = label == kBackground ? config.background_mean
                            : label == kLiver    ? config.organ_mean
                                                 : config.tumor_mean;
        fine_labels.at(x, y, z) = label;
        fine_image.at(x, y, z) = static_cast<float>(mean + config.noise_sigma * noise.normal());
      }
    }
  }

  const int t = config.forced_thickness > 0
                    ? config.forced_thickness
                    : config.thickness_choices[thick.index(config.thickness_choices.size())];
  const std::size_t ut = static_cast<std::size_t>(t);
  Dims coarse = fine;
  coarse.z = fine.z / ut;
  Phantom out;
  out.thickness = t;
  out.image = ImageVolume(coarse, {sp, sp, static_cast<double>(t)});
  out.labels = LabelVolume(coarse, {sp, sp, static_cast<double>(t)});
  const std::size_t plane = fine.plane();
  for (std::size_t k = 0; k < coarse.z; ++k) {
    for (std::size_t i = 0; i < plane; ++i) {
      double sum = 0.0;
      std::array<int, kNumLabels> votes{};
      for (std::size_t s = 0; s < ut; ++s) {
        sum += fine_image.slice(k * ut + s)[i];
        ++votes[fine_labels.slice(k * ut + s)[i]];
      }
      out.image.slice(k)[i] = static_cast<float>(sum / static_cast<double>(ut));
      out.labels.slice(k)[i] = majority(votes);
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"phantom", c.phantom}, {"n_train", c.n_train}, {"n_val", c.n_val}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  if (j.contains("phantom")) d.phantom = j.at("phantom").get<PhantomConfig>();
  d.n_train = j.value("n_train", d.n_train);
  d.n_val = j.value("n_val", d.n_val);
  d.seed = j.value("seed", d.seed);
  if (d.n_train < 0 || d.n_val < 0) throw std::invalid_argument("dataset: case counts must be non-negative");
  c = std::move(d);
}

std::vector<ManifestCase> Manifest::split(const std::string& name) const {
  std::vector<ManifestCase> out;
  for (const auto& c : cases) {
    if (c.split == name) out.push_back(c);
  }
  return out;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  nlohmann::ordered_json j;
  j["format"] = "SAMBD-MANIFEST";
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : manifest.cases) {
    nlohmann::ordered_json e;
    e["id"] = c.id;
    e["image"] = c.image.lexically_relative(base.empty() ? "." : base).generic_string();
    e["label"] = c.label.lexically_relative(base.empty() ? "." : base).generic_string();
    e["split"] = c.split;
    e["thickness_mm"] = c.thickness_mm;
    j["cases"].push_back(std::move(e));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.value("format", "") != "SAMBD-MANIFEST") throw DataError(path.string() + ": not a dataset manifest");
    const auto base = std::filesystem::absolute(path).parent_path();
    for (const auto& e : j.at("cases")) {
      ManifestCase c;
      c.id = e.at("id").get<std::string>();
      c.image = base / e.at("image").get<std::string>();
      c.label = base / e.at("label").get<std::string>();
      c.split = e.at("split").get<std::string>();
      c.thickness_mm = e.value("thickness_mm", 1.0);
      m.cases.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed manifest: " + e.what());
  }
  return m;
}

Manifest generate_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir) {
  config.phantom.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto dir = std::filesystem::absolute(out_dir);
  Manifest manifest;
  const int total = config.n_train + config.n_val;
  for (int i = 0; i < total; ++i) {
    PhantomConfig pc = config.phantom;
    pc.seed = Rng::derive(config.seed, static_cast<std::uint64_t>(i)).next();
    Phantom ph;
    try {
      ph = gen_phantom(pc);
    } catch (const DataError& e) {
      throw DataError("case " + std::to_string(i) + ": " + e.what());
    }
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    ManifestCase c{id, dir / (std::string(id) + "_image.svol"), dir / (std::string(id) + "_label.svol"),
                   i < config.n_train ? "train" : "val", static_cast<double>(ph.thickness)};
    write_svol(ph.image, c.image);
    write_svol(ph.labels, c.label);
    manifest.cases.push_back(std::move(c));
  }
  write_manifest(manifest, dir / "manifest.json");
  return manifest;
}

}  // namespace sambd::vol
