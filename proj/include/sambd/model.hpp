#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sambd/tensor.hpp"

namespace sambd {

enum class DecoderVariant { single_branch, multi_branch };

std::string to_string(DecoderVariant variant);
DecoderVariant parse_variant(std::string_view name);

struct ModelConfig {
  int c_in = 5;
  int c_out = 3;
  int base_channels = 16;
  int low_level_channels_reduced = 24;
  std::vector<int> aspp_rates{1, 2, 4};
  bool aspp_image_pooling = true;
  int aspp_channels = 32;
  int decoder_channels = 32;
  // Decoder width factor of the single-branch baseline ("3x", "5x").
  int width_multiplier = 1;
  DecoderVariant variant = DecoderVariant::multi_branch;
  bool use_sab = true;
  int classes = 3;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig& config() const { return config_; }

  std::vector<NamedParameter<T>>& named_parameters() { return params_; }
  const std::vector<NamedParameter<T>>& named_parameters() const { return params_; }
  // Handles share storage with the model.
  std::vector<Tensor<T>> parameters() const;

  const Tensor<T>& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  Tensor<T>& add_param(std::string name, Shape shape);

  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Low tap at 1/4 input resolution, high tap (ASPP output) at 1/16.
template <typename T>
struct EncoderTaps {
  Tensor<T> low;
  Tensor<T> high;
};

template <typename T>
struct SabOutput {
  std::vector<Tensor<T>> maps;   // c_out tensors [1,1,h,w], values in (0,1)
  std::vector<Tensor<T>> gated;  // c_out tensors [1,C,h,w]
};

// Glorot-uniform weights, zero biases and unit channel scales, drawn in
// registration order from a stream derived from `seed`.
template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
EncoderTaps<T> encode(const Model<T>& model, const Tensor<T>& stack);

// `prefix` selects the attention block ("decoder.sab_low" or "decoder.sab_high").
template <typename T>
SabOutput<T> sab(const Model<T>& model, const Tensor<T>& features, std::string_view prefix);

template <typename T>
Tensor<T> decode_multibranch(const Model<T>& model, const EncoderTaps<T>& taps);
template <typename T>
Tensor<T> decode_singlebranch(const Model<T>& model, const EncoderTaps<T>& taps);

// Logits [c_out, classes, H, W] for a stack [1, c_in, H, W].
template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& stack);
// Softmax probabilities [c_out, classes, H, W].
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& stack);

template <typename T>
std::uint64_t count_params(const Model<T>& model);
template <typename T>
std::uint64_t count_params(const std::vector<NamedParameter<T>>& params);
// Multiply-accumulates of every convolution and upsampling in one forward.
template <typename T>
std::uint64_t count_flops(const Model<T>& model, std::size_t height, std::size_t width);

// Copies branch 0 (and attention head 0) onto every other branch.
template <typename T>
void tie_branches(Model<T>& model);

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model);

// Checkpoint: one JSON header line, then little-endian float32 blobs in
// parameter order.
void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sambd
