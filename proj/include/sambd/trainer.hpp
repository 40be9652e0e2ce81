#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sambd/inference.hpp"
#include "sambd/metrics.hpp"
#include "sambd/model.hpp"
#include "sambd/phantom.hpp"

namespace sambd::train {

struct ExperimentConfig {
  ModelConfig model;
  bool dcd = true;
  int epochs = 20;
  double lr0 = 0.001;
  double lr_decay = 0.9;
  double momentum = 0.9;
  int batch_size = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path manifest;
  std::size_t crop = 64;
  double scale_lo = 0.8, scale_hi = 1.2;
  // Random windows drawn from every training case per epoch.
  int windows_per_case = 4;
  // 0 uses every case of the split.
  int max_train_cases = 0;
  int max_val_cases = 0;
  std::size_t threads = 0;

  // Throws std::invalid_argument on the first violated constraint.
  void validate() const;
};

// Keys mirror the field names; "flags": {md, sab, dcd} sets the decoder
// variant, attention and inter-slice loss together.
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// lr0 * decay^epoch.
double learning_rate(const ExperimentConfig& c, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double dice = 0.0;
  std::optional<double> dcd;
  double total = 0.0;
  double lambda = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint;
  std::filesystem::path report;
};

nlohmann::ordered_json run_json(const RunRecord& r);

// A case on the network grid (windowed, thick volumes resampled to 1 mm).
struct PreparedCase {
  std::string id;
  vol::ImageVolume image;
  vol::LabelVolume labels;
};

PreparedCase prepare_case(const vol::ManifestCase& c);
std::vector<PreparedCase> prepare_cases(const std::vector<vol::ManifestCase>& cases);

enum class Stream : std::uint64_t { init = 11, data = 12, augment = 13 };
std::uint64_t stream_seed(std::uint64_t seed, Stream s);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains a fresh model. A checkpoint is written to run_dir/model.ckpt after
// every epoch when run_dir is non-empty. Throws NumericError on a
// non-finite loss.
RunRecord train_model(const ExperimentConfig& config, std::uint64_t seed, const std::vector<PreparedCase>& cases,
                      const std::filesystem::path& run_dir, Model<float>* trained = nullptr,
                      const EpochCallback& on_epoch = {});

// Segments every case with `model` and scores it against its labels.
// Cases whose files are unreadable are listed as missing.
metrics::AggregateReport evaluate_model(const Model<float>& model, const std::vector<vol::ManifestCase>& cases,
                                        std::size_t threads = 0);

std::vector<vol::ManifestCase> limit(std::vector<vol::ManifestCase> cases, int max_cases);

struct Variant {
  std::string name;
  DecoderVariant decoder = DecoderVariant::multi_branch;
  int width_multiplier = 1;
  bool sab = false;
  bool dcd = false;
};

// Single-branch baselines at 1x and c_out x width, then MD, MD+SAB,
// MD+DCD and MD+SAB+DCD.
std::vector<Variant> default_variants(int c_out);
ExperimentConfig apply_variant(ExperimentConfig base, const Variant& v);
std::optional<Variant> find_variant(const std::vector<Variant>& variants, const std::string& name);

struct VariantResult {
  Variant variant;
  std::uint64_t params = 0;
  std::vector<RunRecord> runs;
  std::vector<metrics::AggregateReport> reports;  // one per seed
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<VariantResult> variants;
  std::optional<metrics::TTestResult> ttest;
  std::string ttest_a, ttest_b;
  std::vector<double> tumor_dice_a, tumor_dice_b;  // per case, averaged over seeds
};

using ProgressCallback = std::function<void(const std::string&)>;

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<Variant>& variants,
                            const std::filesystem::path& out_dir, const ProgressCallback& progress = {});

nlohmann::ordered_json ablation_json(const AblationResult& r);
// Markdown table: one row per variant, liver and tumor columns of Dice per
// case (mean, with sd over seeds when there are several), Dice global and
// VOE.
std::string ablation_table(const AblationResult& r);

}  // namespace sambd::train
