#include "sambd/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>

#include "sambd/error.hpp"
#include "sambd/preprocess.hpp"
#include "sambd/windows.hpp"

namespace sambd::infer {

namespace {

constexpr std::size_t kAlign = 16;

std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

std::size_t round_up(std::size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

}  // namespace

std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("SAMBD_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (const std::exception&) {
        n = 0;
      }
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

ProbVolume sliding_window_predict(const WindowPredictor& predictor, std::size_t c_in, std::size_t c_out,
                                  std::size_t classes, const ImageVolume& volume, const PredictOptions& options) {
  vol::validate(volume);
  const vol::WindowLayout layout = vol::window_layout(volume.dims.z, c_in, c_out, true, 1);
  const std::size_t H = volume.dims.y, W = volume.dims.x;
  const std::size_t PH = round_up(H), PW = round_up(W);
  const std::size_t plane = H * W, padded_plane = PH * PW;

  auto run_window = [&](std::size_t i) {
    const vol::TrainingSample s = vol::make_window(volume, nullptr, layout, i);
    std::vector<float> stack(c_in * padded_plane);
    for (std::size_t k = 0; k < c_in; ++k) {
      for (std::size_t y = 0; y < PH; ++y) {
        const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y), H);
        for (std::size_t x = 0; x < PW; ++x) {
          stack[k * padded_plane + y * PW + x] = s.input[k * plane + sy * W + reflect(static_cast<std::ptrdiff_t>(x), W)];
        }
      }
    }
    Tensor<float> out = predictor(Tensor<float>::from_data({1, c_in, PH, PW}, std::move(stack)));
    if (out.shape() != Shape{c_out, classes, PH, PW}) {
      throw std::invalid_argument("sliding_window_predict: predictor returned " + shape_str(out.shape()));
    }
    std::vector<float> cropped(c_out * classes * plane);
    const auto src = out.data();
    for (std::size_t m = 0; m < c_out * classes; ++m) {
      for (std::size_t y = 0; y < H; ++y) {
        std::copy_n(src.data() + m * padded_plane + y * PW, W, cropped.data() + m * plane + y * W);
      }
    }
    return cropped;
  };

  // Windows run in parallel; their outputs are accumulated in window order.
  std::vector<std::vector<float>> outputs(layout.count);
  const std::size_t workers = std::min(resolve_threads(options.threads), layout.count);
  if (workers <= 1) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < layout.count; ++i) outputs[i] = run_window(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        NoGradGuard guard;
        try {
          for (std::size_t i = next++; i < layout.count; i = next++) outputs[i] = run_window(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const std::size_t Z = volume.dims.z;
  std::vector<double> acc(Z * classes * plane, 0.0);
  ProbVolume result;
  result.dims = volume.dims;
  result.spacing = volume.spacing;
  result.classes = classes;
  result.coverage.assign(Z, 0);
  for (std::size_t i = 0; i < layout.count; ++i) {
    for (std::size_t j = 0; j < c_out; ++j) {
      const std::size_t padded = layout.first_output(i) + j;
      if (padded < layout.pad || padded - layout.pad >= Z) continue;
      const std::size_t z = padded - layout.pad;
      ++result.coverage[z];
      const float* src = outputs[i].data() + j * classes * plane;
      double* dst = acc.data() + z * classes * plane;
      for (std::size_t k = 0; k < classes * plane; ++k) dst[k] += src[k];
    }
  }
  result.probs.resize(acc.size());
  for (std::size_t z = 0; z < Z; ++z) {
    if (result.coverage[z] == 0) throw std::logic_error("sliding_window_predict: slice without prediction");
    const double n = static_cast<double>(result.coverage[z]);
    for (std::size_t i = 0; i < plane; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < classes; ++c) total += acc[(z * classes + c) * plane + i] / n;
      for (std::size_t c = 0; c < classes; ++c) {
        const double mean = acc[(z * classes + c) * plane + i] / n;
        result.probs[(z * classes + c) * plane + i] = static_cast<float>(total > 0.0 ? mean / total : 1.0 / classes);
      }
    }
  }
  return result;
}

ProbVolume sliding_window_predict(const Model<float>& model, const ImageVolume& volume, const PredictOptions& options) {
  const ModelConfig& c = model.config();
  return sliding_window_predict([&model](const Tensor<float>& stack) { return forward(model, stack); },
                                static_cast<std::size_t>(c.c_in), static_cast<std::size_t>(c.c_out),
                                static_cast<std::size_t>(c.classes), volume, options);
}

LabelVolume argmax_labels(const ProbVolume& probs) {
  if (probs.classes > 256) throw std::invalid_argument("argmax_labels: too many classes for u8 labels");
  LabelVolume out(probs.dims, probs.spacing);
  const std::size_t plane = probs.dims.plane();
  for (std::size_t z = 0; z < probs.dims.z; ++z) {
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      float best_p = probs.probs[(z * probs.classes) * plane + i];
      for (std::size_t c = 1; c < probs.classes; ++c) {
        const float p = probs.probs[(z * probs.classes + c) * plane + i];
        if (p > best_p) {
          best = c;
          best_p = p;
        }
      }
      out.slice(z)[i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

BinaryMask largest_component(const BinaryMask& mask) {
  const vol::Dims d = mask.dims;
  const std::size_t n = d.count();
  if (mask.voxels.size() != n) throw std::invalid_argument("largest_component: mask size mismatch");
  std::vector<std::uint32_t> component(n, 0);
  std::vector<std::size_t> stack;
  std::uint32_t best_id = 0, next_id = 0;
  std::size_t best_size = 0;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!mask.voxels[seed] || component[seed]) continue;
    const std::uint32_t id = ++next_id;
    std::size_t size = 0;
    component[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t x = v % d.x, y = (v / d.x) % d.y, z = v / d.plane();
      auto visit = [&](std::size_t u) {
        if (mask.voxels[u] && !component[u]) {
          component[u] = id;
          stack.push_back(u);
        }
      };
      if (x > 0) visit(v - 1);
      if (x + 1 < d.x) visit(v + 1);
      if (y > 0) visit(v - d.x);
      if (y + 1 < d.y) visit(v + d.x);
      if (z > 0) visit(v - d.plane());
      if (z + 1 < d.z) visit(v + d.plane());
    }
    if (size > best_size) {
      best_size = size;
      best_id = id;
    }
  }
  BinaryMask out(d, mask.spacing);
  if (best_id == 0) return out;
  for (std::size_t i = 0; i < n; ++i) out.voxels[i] = component[i] == best_id ? 1 : 0;
  return out;
}

LabelVolume postprocess(const LabelVolume& labels) {
  BinaryMask liver(labels.dims, labels.spacing);
  for (std::size_t i = 0; i < labels.voxels.size(); ++i) {
    const std::uint8_t l = labels.voxels[i];
    if (l >= vol::kNumLabels) throw DataError("postprocess: label " + std::to_string(l) + " outside 0..2");
    liver.voxels[i] = l == vol::kLiver || l == vol::kTumor;
  }
  const BinaryMask kept = largest_component(liver);
  LabelVolume out = labels;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    if (!kept.voxels[i]) out.voxels[i] = vol::kBackground;
  }
  return out;
}

LabelVolume segment_volume(const Model<float>& model, const ImageVolume& raw, const PredictOptions& options,
                           ProbVolume* probs_out) {
  vol::validate(raw);
  ImageVolume image = vol::hu_window(raw);
  const bool resampled = vol::needs_resampling(raw.spacing);
  if (resampled) image = vol::resample_z(image, 1.0);
  ProbVolume probs = sliding_window_predict(model, image, options);
  LabelVolume labels = argmax_labels(probs);
  if (resampled) labels = vol::resample_z_to(labels, raw.dims.z, raw.spacing.z);
  labels.spacing = raw.spacing;
  if (probs_out) *probs_out = std::move(probs);
  return postprocess(labels);
}

}  // namespace sambd::infer
