#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sambd/error.hpp"
#include "sambd/inference.hpp"
#include "sambd/metrics.hpp"
#include "sambd/model.hpp"
#include "sambd/phantom.hpp"
#include "sambd/runtime.hpp"
#include "sambd/trainer.hpp"

namespace fs = std::filesystem;
using namespace sambd;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path prediction_path(const fs::path& dir, const std::string& id) { return dir / (id + "_pred.svol"); }

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw std::invalid_argument("--seeds: expected a comma-separated list");
  return seeds;
}

struct PhantomArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_phantom(const PhantomArgs& a) {
  vol::DatasetConfig cfg;
  if (!a.config.empty()) cfg = read_json(a.config).get<vol::DatasetConfig>();
  if (a.seed) cfg.seed = *a.seed;
  const vol::Manifest m = vol::generate_dataset(cfg, a.out);
  write_json(fs::path(a.out) / "dataset.json", nlohmann::ordered_json(nlohmann::json(cfg)));
  std::size_t train = m.split("train").size();
  std::cout << "wrote " << m.cases.size() << " cases (" << train << " train, " << m.cases.size() - train
            << " val) to " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, out, manifest;
  std::optional<std::uint64_t> seed;
  bool skip_eval = false;
};

int cmd_train(const TrainArgs& a) {
  train::ExperimentConfig cfg = train::load_experiment(a.config);
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (cfg.manifest.empty()) throw std::invalid_argument("train: no dataset manifest given");
  const std::uint64_t seed = a.seed ? *a.seed : cfg.seeds.front();
  cfg.validate();
  const vol::Manifest manifest = vol::read_manifest(cfg.manifest);
  const auto train_cases = train::limit(manifest.split("train"), cfg.max_train_cases);
  const auto prepared = train::prepare_cases(train_cases);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_json(out / "experiment.json", nlohmann::ordered_json(nlohmann::json(cfg)));
  Model<float> model;
  train::RunRecord run = train::train_model(cfg, seed, prepared, out, &model, [](const train::EpochRecord& e) {
    std::cout << std::fixed << std::setprecision(5) << "epoch " << e.epoch << " lr " << e.lr << " dice " << e.dice;
    if (e.dcd) std::cout << " dcd " << *e.dcd;
    std::cout << " total " << e.total << std::setprecision(1) << " (" << e.seconds << " s)" << std::endl;
  });
  if (!a.skip_eval) {
    const auto report = train::evaluate_model(model, train::limit(manifest.split("val"), cfg.max_val_cases), cfg.threads);
    run.report = out / "report.json";
    write_json(run.report, metrics::report_json(report));
    std::cout << std::setprecision(4) << "validation: liver dice " << report.liver.dice_per_case << ", tumor dice "
              << report.tumor.dice_per_case << "\n";
  }
  write_json(out / "run.json", train::run_json(run));
  return kOk;
}

struct InferArgs {
  std::string checkpoint, input, manifest, split = "val", out;
  std::size_t threads = 0;
};

nlohmann::ordered_json sidecar(const vol::LabelVolume& labels, const infer::ProbVolume& probs) {
  nlohmann::ordered_json j;
  j["dims"] = {labels.dims.x, labels.dims.y, labels.dims.z};
  j["spacing_mm"] = {labels.spacing.x, labels.spacing.y, labels.spacing.z};
  j["network_slices"] = probs.dims.z;
  j["network_spacing_z_mm"] = probs.spacing.z;
  j["coverage"] = probs.coverage;
  j["coverage_min"] = probs.coverage.empty() ? 0 : *std::min_element(probs.coverage.begin(), probs.coverage.end());
  j["coverage_max"] = probs.coverage.empty() ? 0 : *std::max_element(probs.coverage.begin(), probs.coverage.end());
  return j;
}

void infer_one(const Model<float>& model, const fs::path& input, const fs::path& output, std::size_t threads) {
  const vol::ImageVolume image = vol::read_image_svol(input);
  infer::ProbVolume probs;
  const vol::LabelVolume labels = infer::segment_volume(model, image, {threads}, &probs);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  vol::write_svol(labels, output);
  write_json(output.string() + ".json", sidecar(labels, probs));
}

int cmd_infer(const InferArgs& a) {
  const Model<float> model = load_checkpoint(a.checkpoint);
  if (!a.input.empty()) {
    infer_one(model, a.input, a.out, a.threads);
    std::cout << "wrote " << a.out << "\n";
    return kOk;
  }
  if (a.manifest.empty()) throw std::invalid_argument("infer: give --input or --manifest");
  const vol::Manifest m = vol::read_manifest(a.manifest);
  std::size_t n = 0;
  for (const auto& c : m.split(a.split)) {
    infer_one(model, c.image, prediction_path(a.out, c.id), a.threads);
    ++n;
  }
  std::cout << "wrote " << n << " predictions to " << a.out << "\n";
  return kOk;
}

struct EvalArgs {
  std::string pred_dir, manifest, split = "val", out;
};

int cmd_eval(const EvalArgs& a) {
  const vol::Manifest m = vol::read_manifest(a.manifest);
  std::vector<metrics::CaseMetrics> rows;
  std::vector<std::string> missing;
  for (const auto& c : m.split(a.split)) {
    const fs::path pred_path = prediction_path(a.pred_dir, c.id);
    if (!fs::exists(pred_path)) {
      std::cerr << "missing prediction for " << c.id << "\n";
      missing.push_back(c.id);
      continue;
    }
    const vol::LabelVolume pred = vol::read_label_svol(pred_path);
    const vol::LabelVolume ref = vol::read_label_svol(c.label);
    if (pred.dims != ref.dims) throw DataError(c.id + ": prediction and reference differ in size");
    rows.push_back(metrics::evaluate_case(c.id, pred, ref));
  }
  const metrics::AggregateReport report = metrics::aggregate(std::move(rows), missing);
  write_json(a.out, metrics::report_json(report));
  std::cout << std::fixed << std::setprecision(4) << "cases " << report.cases.size() << ", liver dice per case "
            << report.liver.dice_per_case << ", tumor dice per case " << report.tumor.dice_per_case << "\n";
  if (!missing.empty()) {
    std::cerr << missing.size() << " case(s) without prediction\n";
    return kData;
  }
  return kOk;
}

struct AblateArgs {
  std::string config, out, manifest, seeds, variants;
};

int cmd_ablate(const AblateArgs& a) {
  train::ExperimentConfig cfg = train::load_experiment(a.config);
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (!a.seeds.empty()) cfg.seeds = parse_seeds(a.seeds);
  std::vector<train::Variant> all = train::default_variants(cfg.model.c_out), chosen;
  if (a.variants.empty()) {
    chosen = all;
  } else {
    std::stringstream ss(a.variants);
    std::string name;
    while (std::getline(ss, name, ',')) {
      auto v = train::find_variant(all, name);
      if (!v) throw std::invalid_argument("ablate: unknown variant '" + name + "'");
      chosen.push_back(*v);
    }
  }
  const auto result = train::run_ablation(cfg, chosen, a.out, [](const std::string& line) { std::cout << line << std::endl; });
  std::cout << "\n" << train::ablation_table(result);
  return kOk;
}

struct ParamsArgs {
  std::string config;
  std::size_t height = 64, width = 64;
};

int cmd_params(const ParamsArgs& a) {
  train::ExperimentConfig cfg;
  if (!a.config.empty()) cfg = train::load_experiment(a.config);
  std::cout << std::left << std::setw(14) << "variant" << std::right << std::setw(12) << "params" << std::setw(16)
            << "MACs" << "\n";
  for (const auto& v : train::default_variants(cfg.model.c_out)) {
    const auto model = build_model<float>(train::apply_variant(cfg, v).model, 0);
    std::cout << std::left << std::setw(14) << v.name << std::right << std::setw(12) << count_params(model)
              << std::setw(16) << count_flops(model, a.height, a.width) << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"2.5D liver and tumor segmentation: phantoms, training, inference, evaluation"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
  phantom->add_option("--config", pa.config, "dataset config (JSON)");
  phantom->add_option("--seed", pa.seed, "dataset seed");
  phantom->add_option("--out", pa.out, "output directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train one model and evaluate it on the validation split");
  trn->add_option("--config", ta.config, "experiment config (JSON)")->required();
  trn->add_option("--seed", ta.seed, "run seed (defaults to the first configured seed)");
  trn->add_option("--out", ta.out, "run directory")->required();
  trn->add_option("--manifest", ta.manifest, "dataset manifest (overrides the config)");
  trn->add_flag("--skip-eval", ta.skip_eval, "do not evaluate after training");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "segment a volume, or every case of a manifest split");
  inf->add_option("--checkpoint", ia.checkpoint, "model checkpoint")->required();
  auto* input = inf->add_option("--input", ia.input, "intensity volume (SVOL)");
  inf->add_option("--manifest", ia.manifest, "dataset manifest")->excludes(input);
  inf->add_option("--split", ia.split, "manifest split")->capture_default_str();
  inf->add_option("--out", ia.out, "output label volume, or directory with --manifest")->required();
  inf->add_option("--threads", ia.threads, "worker threads (0: SAMBD_THREADS or all cores)");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "score predictions against a manifest split");
  evl->add_option("--pred-dir", ea.pred_dir, "directory of <case>_pred.svol files")->required();
  evl->add_option("--manifest", ea.manifest, "dataset manifest")->required();
  evl->add_option("--split", ea.split, "manifest split")->capture_default_str();
  evl->add_option("--out", ea.out, "report path (JSON)")->required();

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "train and compare decoder / attention / loss variants");
  abl->add_option("--config", aa.config, "base experiment config (JSON)")->required();
  abl->add_option("--out", aa.out, "output directory")->required();
  abl->add_option("--manifest", aa.manifest, "dataset manifest (overrides the config)");
  abl->add_option("--seeds", aa.seeds, "comma-separated seeds (overrides the config)");
  abl->add_option("--variants", aa.variants, "comma-separated subset of variants");

  ParamsArgs pr;
  auto* prm = app.add_subcommand("params", "parameter and multiply-accumulate counts per variant");
  prm->add_option("--config", pr.config, "experiment config (JSON)");
  prm->add_option("--height", pr.height, "input height")->capture_default_str();
  prm->add_option("--width", pr.width, "input width")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*phantom) return cmd_phantom(pa);
    if (*trn) return cmd_train(ta);
    if (*inf) return cmd_infer(ia);
    if (*evl) return cmd_eval(ea);
    if (*abl) return cmd_ablate(aa);
    if (*prm) return cmd_params(pr);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
