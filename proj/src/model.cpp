#include "sambd/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "sambd/error.hpp"
#include "sambd/ops.hpp"
#include "sambd/rng.hpp"

namespace sambd {

namespace {

constexpr int kCheckpointVersion = 1;
constexpr std::uint64_t kInitStreamTag = 0x1417;

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

std::string branch_name(int b) { return "decoder.branch" + std::to_string(b); }
std::string aspp_branch_name(std::size_t k) { return "encoder.aspp.branch" + std::to_string(k); }

// Registers parameters and remembers which tensors are conv weights (for
// Glorot bounds) and which are channel scales (initialised to one).
template <typename T>
class Builder {
 public:
  explicit Builder(Model<T>& model) : model_(model) {}

  void conv(const std::string& name, int cin, int cout, int k, bool with_scale) {
    weight(name + ".weight", {size(cout), size(cin), size(k), size(k)}, cin * k * k, cout * k * k);
    model_.add_param(name + ".bias", {size(cout)});
    if (with_scale) scale(name + ".scale", cout);
  }

  void separable(const std::string& name, int cin, int cout, int k) {
    weight(name + ".depthwise", {size(cin), 1, size(k), size(k)}, k * k, k * k);
    weight(name + ".pointwise", {size(cout), size(cin), 1, 1}, cin, cout);
    model_.add_param(name + ".bias", {size(cout)});
    scale(name + ".scale", cout);
  }

  void initialise(std::uint64_t seed) {
    Rng rng = Rng::derive(seed, kInitStreamTag);
    for (auto& p : model_.named_parameters()) {
      auto values = p.tensor.mutable_data();
      if (auto it = bounds_.find(p.name); it != bounds_.end()) {
        for (auto& v : values) v = static_cast<T>(rng.uniform(-it->second, it->second));
      } else if (scales_.count(p.name)) {
        std::fill(values.begin(), values.end(), T{1});
      }
    }
  }

 private:
  static std::size_t size(int v) { return static_cast<std::size_t>(v); }

  void weight(const std::string& name, Shape shape, int fan_in, int fan_out) {
    model_.add_param(name, std::move(shape));
    bounds_[name] = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  }

  void scale(const std::string& name, int channels) {
    model_.add_param(name, {size(channels)});
    scales_[name] = true;
  }

  Model<T>& model_;
  std::unordered_map<std::string, double> bounds_;
  std::unordered_map<std::string, bool> scales_;
};

// conv -> optional channel scale -> optional relu
template <typename T>
Tensor<T> conv_unit(const Model<T>& m, const Tensor<T>& x, const std::string& name, nn::Conv2dOptions opt,
                    bool apply_relu = true) {
  Tensor<T> y = nn::conv2d(x, m.param(name + ".weight"), m.param(name + ".bias"), opt);
  if (m.has_param(name + ".scale")) y = nn::channel_scale(y, m.param(name + ".scale"));
  return apply_relu ? nn::relu(y) : y;
}

template <typename T>
Tensor<T> separable_unit(const Model<T>& m, const Tensor<T>& x, const std::string& name, int stride) {
  Tensor<T> y = nn::separable_conv2d(x, m.param(name + ".depthwise"), m.param(name + ".pointwise"),
                                     m.param(name + ".bias"), {stride, 1, 1});
  return nn::channel_scale(y, m.param(name + ".scale"));
}

// Xception-style residual block: two separable convs, the second strided,
// plus a strided 1x1 projection shortcut.
template <typename T>
Tensor<T> residual_block(const Model<T>& m, const Tensor<T>& x, const std::string& name) {
  Tensor<T> y = nn::relu(separable_unit(m, x, name + ".sep1", 1));
  y = separable_unit(m, y, name + ".sep2", 2);
  Tensor<T> skip = conv_unit(m, x, name + ".skip", {2, 1, 0}, false);
  return nn::relu(nn::add(y, skip));
}

struct DecoderWidths {
  int low, high, fuse, out;
};

DecoderWidths decoder_widths(const ModelConfig& c) {
  const int k = c.variant == DecoderVariant::single_branch ? c.width_multiplier : 1;
  const int out = c.variant == DecoderVariant::single_branch ? c.classes * c.c_out : c.classes;
  return {c.low_level_channels_reduced * k, c.aspp_channels * k, c.decoder_channels * k, out};
}

// One decoder branch: per-branch 1x1 convs on both taps, high path
// upsampled x4, concatenation, 3x3 fuse, upsample x4, 3x3 classifier.
template <typename T>
Tensor<T> decoder_branch(const Model<T>& m, const std::string& name, const Tensor<T>& low, const Tensor<T>& high) {
  Tensor<T> l = conv_unit(m, low, name + ".low", {});
  Tensor<T> h = nn::bilinear_upsample(conv_unit(m, high, name + ".high", {}), 4);
  require(l.dim(2) == h.dim(2) && l.dim(3) == h.dim(3),
          "decoder: low path " + shape_str(l.shape()) + " and high path " + shape_str(h.shape()) + " scales differ");
  Tensor<T> fused = conv_unit(m, nn::concat<T>({l, h}, 1), name + ".fuse", {1, 1, 1});
  Tensor<T> up = nn::bilinear_upsample(fused, 4);
  return conv_unit(m, up, name + ".classifier", {1, 1, 1}, false);
}

template <typename T>
void write_le(std::ostream& out, const Model<T>& model) {
  for (const auto& p : model.named_parameters()) {
    for (T v : p.tensor.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      out.write(bytes, 4);
    }
  }
}

}  // namespace

std::string to_string(DecoderVariant variant) {
  return variant == DecoderVariant::multi_branch ? "multi_branch" : "single_branch";
}

DecoderVariant parse_variant(std::string_view name) {
  if (name == "multi_branch") return DecoderVariant::multi_branch;
  if (name == "single_branch") return DecoderVariant::single_branch;
  throw std::invalid_argument("unknown decoder variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  require(c_in >= 3 && c_in % 2 == 1, "ModelConfig: c_in must be an odd integer >= 3, got " + std::to_string(c_in));
  require(c_out == c_in - 2, "ModelConfig: c_out must equal c_in - 2 (" + std::to_string(c_in - 2) + "), got " +
                                 std::to_string(c_out));
  require(classes >= 2, "ModelConfig: classes must be at least 2");
  require(base_channels > 0 && low_level_channels_reduced > 0 && aspp_channels > 0 && decoder_channels > 0,
          "ModelConfig: channel counts must be positive");
  require(!aspp_rates.empty(), "ModelConfig: aspp_rates must not be empty");
  for (int r : aspp_rates) require(r >= 1, "ModelConfig: ASPP rates must be >= 1");
  require(width_multiplier >= 1, "ModelConfig: width_multiplier must be >= 1");
  if (variant == DecoderVariant::multi_branch) {
    require(width_multiplier == 1, "ModelConfig: width_multiplier applies to the single-branch decoder only");
  }
  if (use_sab) {
    require(variant == DecoderVariant::multi_branch, "ModelConfig: the attention block requires the multi-branch decoder");
    require(low_level_channels_reduced % 8 == 0 && aspp_channels % 8 == 0,
            "ModelConfig: attention block inputs need channel counts divisible by 8");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"c_in", c.c_in},
                     {"c_out", c.c_out},
                     {"base_channels", c.base_channels},
                     {"low_level_channels_reduced", c.low_level_channels_reduced},
                     {"aspp_rates", c.aspp_rates},
                     {"aspp_image_pooling", c.aspp_image_pooling},
                     {"aspp_channels", c.aspp_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"width_multiplier", c.width_multiplier},
                     {"variant", to_string(c.variant)},
                     {"use_sab", c.use_sab},
                     {"classes", c.classes}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.c_in = j.value("c_in", d.c_in);
  c.c_out = j.value("c_out", c.c_in - 2);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.low_level_channels_reduced = j.value("low_level_channels_reduced", d.low_level_channels_reduced);
  c.aspp_rates = j.value("aspp_rates", d.aspp_rates);
  c.aspp_image_pooling = j.value("aspp_image_pooling", d.aspp_image_pooling);
  c.aspp_channels = j.value("aspp_channels", d.aspp_channels);
  c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  c.width_multiplier = j.value("width_multiplier", d.width_multiplier);
  c.variant = parse_variant(j.value("variant", to_string(d.variant)));
  c.use_sab = j.value("use_sab", d.use_sab);
  c.classes = j.value("classes", d.classes);
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename T>
const Tensor<T>& Model<T>::param(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
  return params_[it->second].tensor;
}

template <typename T>
bool Model<T>::has_param(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

template <typename T>
Tensor<T>& Model<T>::add_param(std::string name, Shape shape) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
  index_[name] = params_.size();
  params_.push_back({std::move(name), Tensor<T>::zeros(std::move(shape), true)});
  return params_.back().tensor;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> model(config);
  Builder<T> b(model);
  const int base = config.base_channels;

  b.conv("encoder.stem", config.c_in, base, 3, true);
  const int widths[4] = {base, 2 * base, 4 * base, 4 * base};
  for (int i = 1; i <= 3; ++i) {
    const std::string name = "encoder.block" + std::to_string(i);
    b.separable(name + ".sep1", widths[i - 1], widths[i], 3);
    b.separable(name + ".sep2", widths[i], widths[i], 3);
    b.conv(name + ".skip", widths[i - 1], widths[i], 1, true);
  }
  const int deep = widths[3];
  const int a = config.aspp_channels;
  for (std::size_t k = 0; k < config.aspp_rates.size(); ++k) {
    b.conv(aspp_branch_name(k), deep, a, config.aspp_rates[k] == 1 ? 1 : 3, true);
  }
  const int pooled = config.aspp_image_pooling ? 1 : 0;
  if (pooled) b.conv("encoder.aspp.pool", deep, a, 1, true);
  b.conv("encoder.aspp.fuse", a * static_cast<int>(config.aspp_rates.size() + pooled), a, 1, true);

  const DecoderWidths w = decoder_widths(config);
  b.conv("decoder.low_reduce", widths[1], w.low, 1, true);
  if (config.use_sab) {
    for (const auto& [prefix, channels] : {std::pair{"decoder.sab_low", w.low}, std::pair{"decoder.sab_high", w.high}}) {
      const std::string p(prefix);
      b.conv(p + ".reduce", channels, channels / 8, 3, false);
      for (int h = 0; h < config.c_out; ++h) b.conv(p + ".head" + std::to_string(h), channels / 8, 1, 1, false);
    }
  }
  const int branches = config.variant == DecoderVariant::multi_branch ? config.c_out : 1;
  for (int br = 0; br < branches; ++br) {
    const std::string name = branch_name(br);
    b.conv(name + ".low", w.low, w.low, 1, true);
    b.conv(name + ".high", a, w.high, 1, true);
    b.conv(name + ".fuse", w.low + w.high, w.fuse, 3, true);
    b.conv(name + ".classifier", w.fuse, w.out, 3, false);
  }

  b.initialise(seed);
  return model;
}

template <typename T>
EncoderTaps<T> encode(const Model<T>& model, const Tensor<T>& stack) {
  const ModelConfig& c = model.config();
  const Shape& s = stack.shape();
  require(s.size() == 4 && s[0] == 1 && s[1] == static_cast<std::size_t>(c.c_in),
          "encode: expected stack [1," + std::to_string(c.c_in) + ",H,W], got " + shape_str(s));
  require(s[2] % 16 == 0 && s[3] % 16 == 0 && s[2] > 0 && s[3] > 0,
          "encode: spatial extents must be divisible by 16, got " + shape_str(s));

  Tensor<T> x = conv_unit(model, stack, "encoder.stem", {2, 1, 1});
  EncoderTaps<T> taps;
  taps.low = residual_block(model, x, "encoder.block1");
  x = residual_block(model, taps.low, "encoder.block2");
  x = residual_block(model, x, "encoder.block3");

  std::vector<Tensor<T>> branches;
  for (std::size_t k = 0; k < c.aspp_rates.size(); ++k) {
    const int r = c.aspp_rates[k];
    const nn::Conv2dOptions opt = r == 1 ? nn::Conv2dOptions{} : nn::Conv2dOptions{1, r, nn::same_padding(3, r)};
    branches.push_back(conv_unit(model, x, aspp_branch_name(k), opt));
  }
  if (c.aspp_image_pooling) {
    Tensor<T> pooled = conv_unit(model, nn::global_avg_pool(x), "encoder.aspp.pool", {});
    branches.push_back(nn::broadcast_spatial(pooled, x.dim(2), x.dim(3)));
  }
  Tensor<T> merged = branches.size() == 1 ? branches.front() : nn::concat(branches, 1);
  taps.high = conv_unit(model, merged, "encoder.aspp.fuse", {});
  return taps;
}

template <typename T>
SabOutput<T> sab(const Model<T>& model, const Tensor<T>& features, std::string_view prefix) {
  const std::string p(prefix);
  const std::size_t channels = features.dim(1);
  require(channels % 8 == 0, "sab: feature channels (" + std::to_string(channels) + ") must be divisible by 8");
  Tensor<T> reduced = conv_unit(model, features, p + ".reduce", {1, 1, 1});
  SabOutput<T> out;
  for (int h = 0; h < model.config().c_out; ++h) {
    Tensor<T> map = nn::sigmoid(conv_unit(model, reduced, p + ".head" + std::to_string(h), {}, false));
    out.gated.push_back(nn::spatial_gate(features, map));
    out.maps.push_back(std::move(map));
  }
  return out;
}

template <typename T>
Tensor<T> decode_multibranch(const Model<T>& model, const EncoderTaps<T>& taps) {
  const ModelConfig& c = model.config();
  require(c.variant == DecoderVariant::multi_branch, "decode_multibranch: model has a single-branch decoder");
  require(taps.low.dim(2) == 4 * taps.high.dim(2) && taps.low.dim(3) == 4 * taps.high.dim(3),
          "decode_multibranch: low tap must be 4x the high tap resolution");
  Tensor<T> low = conv_unit(model, taps.low, "decoder.low_reduce", {});
  std::vector<Tensor<T>> low_in(static_cast<std::size_t>(c.c_out), low);
  std::vector<Tensor<T>> high_in(static_cast<std::size_t>(c.c_out), taps.high);
  if (c.use_sab) {
    low_in = sab(model, low, "decoder.sab_low").gated;
    high_in = sab(model, taps.high, "decoder.sab_high").gated;
  }
  std::vector<Tensor<T>> outputs;
  for (int b = 0; b < c.c_out; ++b) {
    outputs.push_back(decoder_branch(model, branch_name(b), low_in[static_cast<std::size_t>(b)],
                                     high_in[static_cast<std::size_t>(b)]));
  }
  return nn::concat(outputs, 0);
}

template <typename T>
Tensor<T> decode_singlebranch(const Model<T>& model, const EncoderTaps<T>& taps) {
  const ModelConfig& c = model.config();
  require(c.variant == DecoderVariant::single_branch, "decode_singlebranch: model has a multi-branch decoder");
  require(taps.low.dim(2) == 4 * taps.high.dim(2) && taps.low.dim(3) == 4 * taps.high.dim(3),
          "decode_singlebranch: low tap must be 4x the high tap resolution");
  Tensor<T> low = conv_unit(model, taps.low, "decoder.low_reduce", {});
  Tensor<T> logits = decoder_branch(model, branch_name(0), low, taps.high);
  const auto cout = static_cast<std::size_t>(c.c_out), classes = static_cast<std::size_t>(c.classes);
  return nn::reshape(logits, {cout, classes, logits.dim(2), logits.dim(3)});
}

template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& stack) {
  EncoderTaps<T> taps = encode(model, stack);
  return model.config().variant == DecoderVariant::multi_branch ? decode_multibranch(model, taps)
                                                                 : decode_singlebranch(model, taps);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& stack) {
  return nn::softmax_over_classes(forward_logits(model, stack));
}

template <typename T>
std::uint64_t count_params(const std::vector<NamedParameter<T>>& params) {
  std::uint64_t total = 0;
  for (const auto& p : params) total += p.tensor.size();
  return total;
}

template <typename T>
std::uint64_t count_params(const Model<T>& model) {
  return count_params(model.named_parameters());
}

template <typename T>
std::uint64_t count_flops(const Model<T>& model, std::size_t height, std::size_t width) {
  NoGradGuard no_grad;
  nn::MacCounter counter;
  const auto stack = Tensor<T>::zeros({1, static_cast<std::size_t>(model.config().c_in), height, width});
  forward_logits(model, stack);
  return counter.total();
}

template <typename T>
void tie_branches(Model<T>& model) {
  const ModelConfig& c = model.config();
  auto copy = [&](const std::string& from, const std::string& to) {
    const auto src = model.param(from).data();
    Tensor<T> target = model.param(to);
    auto dst = target.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  };
  for (const auto& p : model.named_parameters()) {
    const std::string& name = p.name;
    for (const std::string head : {"decoder.sab_low.head0.", "decoder.sab_high.head0."}) {
      if (name.rfind(head, 0) == 0) {
        for (int h = 1; h < c.c_out; ++h) {
          std::string target = name;
          target.replace(head.size() - 2, 1, std::to_string(h));
          copy(name, target);
        }
      }
    }
    const std::string branch0 = "decoder.branch0.";
    if (name.rfind(branch0, 0) == 0 && c.variant == DecoderVariant::multi_branch) {
      for (int b = 1; b < c.c_out; ++b) copy(name, branch_name(b) + "." + name.substr(branch0.size()));
    }
  }
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out(model.config());
  for (const auto& p : model.named_parameters()) {
    Tensor<To>& t = out.add_param(p.name, p.tensor.shape());
    auto dst = t.mutable_data();
    const auto src = p.tensor.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
  }
  return out;
}

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "SAMBD-CKPT";
  header["version"] = kCheckpointVersion;
  header["config"] = model.config();
  auto& list = header["parameters"] = nlohmann::json::array();
  for (const auto& p : model.named_parameters()) list.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  write_le(out, model);
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
  if (header.value("format", "") != "SAMBD-CKPT" || header.value("version", 0) != kCheckpointVersion) {
    throw DataError("checkpoint " + path.string() + ": unsupported format");
  }
  ModelConfig config = header.at("config").get<ModelConfig>();
  Model<float> model = build_model<float>(config, 0);
  const auto& list = header.at("parameters");
  if (list.size() != model.named_parameters().size()) {
    throw DataError("checkpoint " + path.string() + ": parameter list does not match its config");
  }
  for (std::size_t k = 0; k < list.size(); ++k) {
    auto& p = model.named_parameters()[k];
    if (list[k].at("name").get<std::string>() != p.name || list[k].at("shape").get<Shape>() != p.tensor.shape()) {
      throw DataError("checkpoint " + path.string() + ": unexpected parameter " + list[k].dump());
    }
    auto values = p.tensor.mutable_data();
    for (auto& v : values) {
      char bytes[4];
      if (!in.read(bytes, 4)) throw DataError("checkpoint " + path.string() + ": truncated payload");
      std::uint32_t bits;
      std::memcpy(&bits, bytes, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      v = std::bit_cast<float>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint " + path.string() + ": trailing bytes after payload");
  }
  return model;
}

#define SAMBD_INSTANTIATE_MODEL(T)                                                          \
  template class Model<T>;                                                                  \
  template Model<T> build_model<T>(const ModelConfig&, std::uint64_t);                      \
  template EncoderTaps<T> encode(const Model<T>&, const Tensor<T>&);                        \
  template SabOutput<T> sab(const Model<T>&, const Tensor<T>&, std::string_view);           \
  template Tensor<T> decode_multibranch(const Model<T>&, const EncoderTaps<T>&);            \
  template Tensor<T> decode_singlebranch(const Model<T>&, const EncoderTaps<T>&);           \
  template Tensor<T> forward_logits(const Model<T>&, const Tensor<T>&);                     \
  template Tensor<T> forward(const Model<T>&, const Tensor<T>&);                            \
  template std::uint64_t count_params(const Model<T>&);                                     \
  template std::uint64_t count_params(const std::vector<NamedParameter<T>>&);               \
  template std::uint64_t count_flops(const Model<T>&, std::size_t, std::size_t);            \
  template void tie_branches(Model<T>&);

SAMBD_INSTANTIATE_MODEL(float)
SAMBD_INSTANTIATE_MODEL(double)

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

}  // namespace sambd
