#include "sambd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "sambd/error.hpp"
#include "sambd/losses.hpp"
#include "sambd/ops.hpp"
#include "sambd/optim.hpp"
#include "sambd/preprocess.hpp"
#include "sambd/rng.hpp"
#include "sambd/windows.hpp"

namespace sambd::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (!(lr0 > 0.0)) throw std::invalid_argument("experiment: lr0 must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("experiment: lr_decay must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("experiment: momentum must lie in [0, 1)");
  if (epochs < 0) throw std::invalid_argument("experiment: epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("experiment: batch_size must be positive");
  if (windows_per_case < 1) throw std::invalid_argument("experiment: windows_per_case must be positive");
  if (crop == 0 || crop % 16 != 0) throw std::invalid_argument("experiment: crop must be a positive multiple of 16");
  if (!(0.0 < scale_lo && scale_lo <= scale_hi)) throw std::invalid_argument("experiment: scale range must be positive and ordered");
  if (seeds.empty()) throw std::invalid_argument("experiment: seed list must not be empty");
  if (dcd && model.c_out < 2) throw std::invalid_argument("experiment: dcd needs c_out >= 2");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"flags",
                      {{"md", c.model.variant == DecoderVariant::multi_branch},
                       {"sab", c.model.use_sab},
                       {"dcd", c.dcd}}},
                     {"epochs", c.epochs},
                     {"lr0", c.lr0},
                     {"lr_decay", c.lr_decay},
                     {"momentum", c.momentum},
                     {"batch_size", c.batch_size},
                     {"seeds", c.seeds},
                     {"manifest", c.manifest.generic_string()},
                     {"crop", c.crop},
                     {"scale_range", {c.scale_lo, c.scale_hi}},
                     {"windows_per_case", c.windows_per_case},
                     {"max_train_cases", c.max_train_cases},
                     {"max_val_cases", c.max_val_cases},
                     {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  if (j.contains("model")) d.model = j.at("model").get<ModelConfig>();
  if (j.contains("flags")) {
    const auto& f = j.at("flags");
    const bool md = f.value("md", d.model.variant == DecoderVariant::multi_branch);
    d.model.variant = md ? DecoderVariant::multi_branch : DecoderVariant::single_branch;
    d.model.use_sab = f.value("sab", md && d.model.use_sab);
    d.dcd = f.value("dcd", d.dcd);
  }
  d.dcd = j.value("dcd", d.dcd);
  d.epochs = j.value("epochs", d.epochs);
  d.lr0 = j.value("lr0", d.lr0);
  d.lr_decay = j.value("lr_decay", d.lr_decay);
  d.momentum = j.value("momentum", d.momentum);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.seeds = j.value("seeds", d.seeds);
  d.manifest = j.value("manifest", std::string{});
  d.crop = j.value("crop", d.crop);
  if (j.contains("scale_range")) {
    const auto r = j.at("scale_range").get<std::vector<double>>();
    if (r.size() != 2) throw std::invalid_argument("experiment: scale_range needs [lo, hi]");
    d.scale_lo = r[0];
    d.scale_hi = r[1];
  }
  d.windows_per_case = j.value("windows_per_case", d.windows_per_case);
  d.max_train_cases = j.value("max_train_cases", d.max_train_cases);
  d.max_val_cases = j.value("max_val_cases", d.max_val_cases);
  d.threads = j.value("threads", d.threads);
  c = std::move(d);
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(in).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  // Relative manifest paths are taken from the config's directory.
  if (!c.manifest.empty() && c.manifest.is_relative()) c.manifest = path.parent_path() / c.manifest;
  return c;
}

double learning_rate(const ExperimentConfig& c, int epoch) { return c.lr0 * std::pow(c.lr_decay, epoch); }

nlohmann::ordered_json run_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["wall_seconds"] = r.wall_seconds;
  j["checkpoint"] = r.checkpoint.generic_string();
  j["report"] = r.report.generic_string();
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    nlohmann::ordered_json row;
    row["epoch"] = e.epoch;
    row["lr"] = e.lr;
    row["dice"] = e.dice;
    row["dcd"] = e.dcd ? nlohmann::ordered_json(*e.dcd) : nlohmann::ordered_json(nullptr);
    row["total"] = e.total;
    row["lambda"] = e.lambda;
    row["steps"] = e.steps;
    row["seconds"] = e.seconds;
    j["epochs"].push_back(std::move(row));
  }
  return j;
}

PreparedCase prepare_case(const vol::ManifestCase& c) {
  PreparedCase p;
  p.id = c.id;
  const vol::ImageVolume raw = vol::read_image_svol(c.image);
  vol::LabelVolume labels = vol::read_label_svol(c.label);
  if (raw.dims != labels.dims) throw DataError(c.id + ": image and label volumes differ in size");
  p.image = vol::hu_window(raw);
  if (vol::needs_resampling(raw.spacing)) {
    p.image = vol::resample_z(p.image, 1.0);
    labels = vol::resample_z(labels, 1.0);
  }
  p.labels = std::move(labels);
  return p;
}

std::vector<PreparedCase> prepare_cases(const std::vector<vol::ManifestCase>& cases) {
  std::vector<PreparedCase> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(prepare_case(c));
  return out;
}

std::uint64_t stream_seed(std::uint64_t seed, Stream s) {
  return Rng::derive(seed, static_cast<std::uint64_t>(s)).next();
}

RunRecord train_model(const ExperimentConfig& config, std::uint64_t seed, const std::vector<PreparedCase>& cases,
                      const std::filesystem::path& run_dir, Model<float>* trained, const EpochCallback& on_epoch) {
  config.validate();
  if (cases.empty()) throw DataError("training needs at least one case");
  const auto t0 = Clock::now();
  const auto c_in = static_cast<std::size_t>(config.model.c_in);
  const auto c_out = static_cast<std::size_t>(config.model.c_out);
  const auto classes = static_cast<std::size_t>(config.model.classes);

  std::vector<vol::WindowLayout> layouts;
  for (const auto& c : cases) layouts.push_back(vol::window_layout(c.image.dims.z, c_in, c_out, true, 1));

  Model<float> model = build_model<float>(config.model, stream_seed(seed, Stream::init));
  std::vector<Tensor<float>> params = model.parameters();
  nn::OptimState optim;
  optim.momentum = config.momentum;
  Rng data_rng(stream_seed(seed, Stream::data));
  Rng aug_rng(stream_seed(seed, Stream::augment));
  const vol::AugmentOptions aug{config.crop, config.scale_lo, config.scale_hi, std::nullopt, false};
  const loss::LossOptions loss_options{config.dcd, loss::kEpsilon};
  const double lambda = config.dcd ? loss::lambda_weight(config.model.c_out) : 0.0;

  if (!run_dir.empty()) std::filesystem::create_directories(run_dir);
  RunRecord record;
  record.seed = seed;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto te = Clock::now();
    optim.lr = learning_rate(config, epoch);
    // (case, window) pairs, drawn and ordered from the data stream only.
    std::vector<std::pair<std::size_t, std::size_t>> order;
    for (std::size_t c = 0; c < cases.size(); ++c) {
      for (int k = 0; k < config.windows_per_case; ++k) order.emplace_back(c, data_rng.index(layouts[c].count));
    }
    data_rng.shuffle(order);

    EpochRecord er;
    er.epoch = epoch;
    er.lr = optim.lr;
    er.lambda = lambda;
    double sum_dice = 0.0, sum_dcd = 0.0, sum_total = 0.0;
    std::size_t samples = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(b1 - b0);
      model.zero_grad();
      for (std::size_t s = b0; s < b1; ++s) {
        const auto [ci, wi] = order[s];
        const PreparedCase& pc = cases[ci];
        const vol::TrainingSample raw = vol::make_window(pc.image, &pc.labels, layouts[ci], wi);
        vol::TrainingSample sample = vol::augment(raw, aug_rng, aug);
        const Tensor<float> input =
            Tensor<float>::from_data({1, c_in, sample.height, sample.width}, std::move(sample.input));
        const Tensor<float> target = loss::one_hot<float>(sample.target, c_out, classes, sample.height, sample.width);
        const Tensor<float> probs = forward(model, input);
        const loss::LossValue<float> lv = loss::total_loss(probs, target, loss_options);
        const double total = static_cast<double>(lv.total.item());
        if (!std::isfinite(total)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", batch " << b0 / static_cast<std::size_t>(config.batch_size)
              << " (case " << pc.id << ", window " << wi << "), lr " << optim.lr;
          throw NumericError(msg.str());
        }
        sum_dice += lv.dice;
        if (lv.dcd) sum_dcd += *lv.dcd;
        sum_total += total;
        ++samples;
        backward(nn::scale(lv.total, inv_batch));
      }
      nn::sgd_momentum_step<float>(params, optim);
      ++er.steps;
    }
    for (const auto& p : params) {
      for (float v : p.data()) {
        if (!std::isfinite(v)) {
          throw NumericError("non-finite weight after epoch " + std::to_string(epoch) + ", lr " + std::to_string(optim.lr));
        }
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(samples, 1));
    er.dice = sum_dice / n;
    if (config.dcd) er.dcd = sum_dcd / n;
    er.total = sum_total / n;
    if (!run_dir.empty()) {
      record.checkpoint = run_dir / "model.ckpt";
      save_checkpoint(model, record.checkpoint);
    }
    er.seconds = seconds_since(te);
    record.epochs.push_back(er);
    if (on_epoch) on_epoch(er);
  }
  if (!run_dir.empty() && config.epochs == 0) {
    record.checkpoint = run_dir / "model.ckpt";
    save_checkpoint(model, record.checkpoint);
  }
  record.wall_seconds = seconds_since(t0);
  if (trained) *trained = std::move(model);
  return record;
}

metrics::AggregateReport evaluate_model(const Model<float>& model, const std::vector<vol::ManifestCase>& cases,
                                        std::size_t threads) {
  std::vector<metrics::CaseMetrics> rows;
  std::vector<std::string> missing;
  for (const auto& c : cases) {
    vol::ImageVolume image;
    vol::LabelVolume labels;
    try {
      image = vol::read_image_svol(c.image);
      labels = vol::read_label_svol(c.label);
    } catch (const DataError&) {
      missing.push_back(c.id);
      continue;
    }
    const vol::LabelVolume pred = infer::segment_volume(model, image, {threads});
    rows.push_back(metrics::evaluate_case(c.id, pred, labels));
  }
  return metrics::aggregate(std::move(rows), std::move(missing));
}

std::vector<vol::ManifestCase> limit(std::vector<vol::ManifestCase> cases, int max_cases) {
  if (max_cases > 0 && cases.size() > static_cast<std::size_t>(max_cases)) cases.resize(static_cast<std::size_t>(max_cases));
  return cases;
}

std::vector<Variant> default_variants(int c_out) {
  const std::string wide = "baseline-" + std::to_string(c_out) + "x";
  return {
      {"baseline-1x", DecoderVariant::single_branch, 1, false, false},
      {wide, DecoderVariant::single_branch, c_out, false, false},
      {"MD", DecoderVariant::multi_branch, 1, false, false},
      {"MD+SAB", DecoderVariant::multi_branch, 1, true, false},
      {"MD+DCD", DecoderVariant::multi_branch, 1, false, true},
      {"MD+SAB+DCD", DecoderVariant::multi_branch, 1, true, true},
  };
}

ExperimentConfig apply_variant(ExperimentConfig base, const Variant& v) {
  base.model.variant = v.decoder;
  base.model.width_multiplier = v.width_multiplier;
  base.model.use_sab = v.sab;
  base.dcd = v.dcd;
  return base;
}

std::optional<Variant> find_variant(const std::vector<Variant>& variants, const std::string& name) {
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  return std::nullopt;
}

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<Variant>& variants,
                            const std::filesystem::path& out_dir, const ProgressCallback& progress) {
  base.validate();
  if (variants.empty()) throw std::invalid_argument("ablation: no variants selected");
  const vol::Manifest manifest = vol::read_manifest(base.manifest);
  const auto train_cases = limit(manifest.split("train"), base.max_train_cases);
  const auto val_cases = limit(manifest.split("val"), base.max_val_cases);
  if (val_cases.empty()) throw DataError("ablation: manifest has no validation cases");
  const std::vector<PreparedCase> prepared = prepare_cases(train_cases);

  AblationResult result;
  result.seeds = base.seeds;
  for (const auto& v : variants) {
    const ExperimentConfig cfg = apply_variant(base, v);
    cfg.validate();
    VariantResult vr;
    vr.variant = v;
    vr.params = count_params(build_model<float>(cfg.model, 0));
    for (std::uint64_t seed : base.seeds) {
      const auto run_dir = out_dir / v.name / ("seed_" + std::to_string(seed));
      if (progress) progress("training " + v.name + " seed " + std::to_string(seed));
      Model<float> model;
      RunRecord run = train_model(cfg, seed, prepared, run_dir, &model);
      metrics::AggregateReport report = evaluate_model(model, val_cases, base.threads);
      run.report = run_dir / "report.json";
      write_json(metrics::report_json(report), run.report);
      write_json(run_json(run), run_dir / "run.json");
      if (progress) {
        std::ostringstream msg;
        msg << std::fixed << std::setprecision(4) << "  " << v.name << " seed " << seed << ": liver dice "
            << report.liver.dice_per_case << ", tumor dice " << report.tumor.dice_per_case << " ("
            << std::setprecision(1) << run.wall_seconds << " s)";
        progress(msg.str());
      }
      vr.runs.push_back(std::move(run));
      vr.reports.push_back(std::move(report));
    }
    result.variants.push_back(std::move(vr));
  }

  // Paired test of the full model against the width-matched baseline on
  // per-case tumor Dice, averaged over seeds.
  const std::string wide = "baseline-" + std::to_string(base.model.c_out) + "x";
  const VariantResult* a = nullptr;
  const VariantResult* b = nullptr;
  for (const auto& vr : result.variants) {
    if (vr.variant.name == "MD+SAB+DCD") a = &vr;
    if (vr.variant.name == wide) b = &vr;
  }
  if (a && b) {
    result.ttest_a = a->variant.name;
    result.ttest_b = b->variant.name;
    auto per_case = [](const VariantResult& vr) {
      std::vector<double> out(vr.reports.front().cases.size(), 0.0);
      for (const auto& rep : vr.reports) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += rep.cases[i].tumor.dice;
      }
      for (double& v : out) v /= static_cast<double>(vr.reports.size());
      return out;
    };
    result.tumor_dice_a = per_case(*a);
    result.tumor_dice_b = per_case(*b);
    if (result.tumor_dice_a.size() >= 2) result.ttest = metrics::paired_ttest(result.tumor_dice_a, result.tumor_dice_b);
  }
  std::filesystem::create_directories(out_dir);
  write_json(ablation_json(result), out_dir / "ablation.json");
  std::ofstream(out_dir / "ablation.md") << ablation_table(result);
  return result;
}

namespace {

struct Summary {
  double mean = 0.0, sd = 0.0;
};

Summary over_seeds(const VariantResult& vr, double metrics::ClassAggregate::*field, metrics::ClassAggregate metrics::AggregateReport::*cls) {
  std::vector<double> v;
  for (const auto& r : vr.reports) v.push_back((r.*cls).*field);
  return {metrics::mean(v), metrics::sample_sd(v)};
}

}  // namespace

nlohmann::ordered_json ablation_json(const AblationResult& r) {
  nlohmann::ordered_json j;
  j["seeds"] = r.seeds;
  j["variants"] = nlohmann::ordered_json::array();
  const bool with_sd = r.seeds.size() > 1;
  for (const auto& vr : r.variants) {
    nlohmann::ordered_json row;
    row["name"] = vr.variant.name;
    row["md"] = vr.variant.decoder == DecoderVariant::multi_branch;
    row["sab"] = vr.variant.sab;
    row["dcd"] = vr.variant.dcd;
    row["width_multiplier"] = vr.variant.width_multiplier;
    row["params"] = vr.params;
    for (auto [name, cls] : {std::pair{"liver", &metrics::AggregateReport::liver},
                             std::pair{"tumor", &metrics::AggregateReport::tumor}}) {
      nlohmann::ordered_json c;
      const Summary dpc = over_seeds(vr, &metrics::ClassAggregate::dice_per_case, cls);
      c["dice_per_case"] = dpc.mean;
      if (with_sd) c["dice_per_case_sd"] = dpc.sd;
      c["dice_global"] = over_seeds(vr, &metrics::ClassAggregate::dice_global, cls).mean;
      c["voe"] = over_seeds(vr, &metrics::ClassAggregate::voe, cls).mean;
      nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
      for (const auto& rep : vr.reports) per_seed.push_back((rep.*cls).dice_per_case);
      c["dice_per_case_by_seed"] = std::move(per_seed);
      row[name] = std::move(c);
    }
    nlohmann::ordered_json secs = nlohmann::ordered_json::array();
    for (const auto& run : vr.runs) secs.push_back(run.wall_seconds);
    row["train_seconds"] = std::move(secs);
    j["variants"].push_back(std::move(row));
  }
  if (r.ttest) {
    nlohmann::ordered_json t;
    t["a"] = r.ttest_a;
    t["b"] = r.ttest_b;
    t["metric"] = "tumor dice per case";
    t["t"] = std::isfinite(r.ttest->t) ? nlohmann::ordered_json(r.ttest->t) : nlohmann::ordered_json(nullptr);
    t["p"] = r.ttest->p;
    t["df"] = r.ttest->df;
    t["degenerate"] = r.ttest->degenerate;
    t["significant_at_0.05"] = r.ttest->p < 0.05;
    t["scores_a"] = r.tumor_dice_a;
    t["scores_b"] = r.tumor_dice_b;
    j["paired_ttest"] = std::move(t);
  } else {
    j["paired_ttest"] = nullptr;
  }
  return j;
}

std::string ablation_table(const AblationResult& r) {
  const bool with_sd = r.seeds.size() > 1;
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| Method | MD | SAB | DCD | Liver Dice per case | Liver Dice global | Liver VOE | Tumor Dice per case | "
         "Tumor Dice global | Tumor VOE |\n";
  out << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& vr : r.variants) {
    out << "| " << vr.variant.name << " | " << (vr.variant.decoder == DecoderVariant::multi_branch ? "x" : "") << " | "
        << (vr.variant.sab ? "x" : "") << " | " << (vr.variant.dcd ? "x" : "") << " |";
    for (auto cls : {&metrics::AggregateReport::liver, &metrics::AggregateReport::tumor}) {
      const Summary dpc = over_seeds(vr, &metrics::ClassAggregate::dice_per_case, cls);
      out << ' ' << 100.0 * dpc.mean;
      if (with_sd) out << " ± " << 100.0 * dpc.sd;
      out << " | " << 100.0 * over_seeds(vr, &metrics::ClassAggregate::dice_global, cls).mean << " | "
          << 100.0 * over_seeds(vr, &metrics::ClassAggregate::voe, cls).mean << " |";
    }
    out << '\n';
  }
  if (r.ttest) {
    out << std::setprecision(4) << "\nPaired t-test (tumor Dice per case, " << r.ttest_a << " vs " << r.ttest_b
        << "): t = " << r.ttest->t << ", df = " << r.ttest->df << ", p = " << r.ttest->p
        << (r.ttest->p < 0.05 ? " (significant at 0.05)" : " (not significant at 0.05)") << '\n';
  }
  return out.str();
}

}  // namespace sambd::train
