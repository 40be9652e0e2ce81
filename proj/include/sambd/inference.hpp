#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "sambd/model.hpp"
#include "sambd/volume.hpp"

namespace sambd::infer {

using vol::BinaryMask;
using vol::ImageVolume;
using vol::LabelVolume;

// Per-voxel class probabilities stored as [z][class][y][x].
struct ProbVolume {
  vol::Dims dims;
  vol::Spacing spacing;
  std::size_t classes = 3;
  std::vector<float> probs;
  std::vector<std::size_t> coverage;  // windows contributing to each slice

  float at(std::size_t x, std::size_t y, std::size_t z, std::size_t c) const {
    return probs[((z * classes + c) * dims.y + y) * dims.x + x];
  }
};

// Maps a stack [1, c_in, H, W] to probabilities [c_out, classes, H, W].
using WindowPredictor = std::function<Tensor<float>(const Tensor<float>&)>;

struct PredictOptions {
  // Worker count; 0 reads SAMBD_THREADS and falls back to the core count.
  std::size_t threads = 0;
};

std::size_t resolve_threads(std::size_t requested);

// Runs every stride-1 window over a z-replicated volume, averages each
// slice's probabilities over the windows covering it and renormalises per
// voxel. In-plane sizes that are not multiples of 16 are reflect-padded and
// cropped back. Results do not depend on the thread count.
ProbVolume sliding_window_predict(const WindowPredictor& predictor, std::size_t c_in, std::size_t c_out,
                                  std::size_t classes, const ImageVolume& volume, const PredictOptions& options = {});
ProbVolume sliding_window_predict(const Model<float>& model, const ImageVolume& volume,
                                  const PredictOptions& options = {});

// Ties go to the lower class index.
LabelVolume argmax_labels(const ProbVolume& probs);

// Keeps the largest 6-connected component; ties go to the component whose
// first voxel (in storage order) comes first.
BinaryMask largest_component(const BinaryMask& mask);

// Keeps the largest connected liver region (liver and tumour voxels
// together) and clears everything outside it.
LabelVolume postprocess(const LabelVolume& labels);

// Raw intensities in, labels on the same grid out: windowing, z-resampling
// of thick volumes to 1 mm, prediction, nearest resampling back to the
// acquisition grid, postprocessing.
LabelVolume segment_volume(const Model<float>& model, const ImageVolume& raw, const PredictOptions& options = {},
                           ProbVolume* probs_out = nullptr);

}  // namespace sambd::infer
