#include "stow/model/model.hpp"

#include <cmath>

#include "stow/ad/ops.hpp"
#include "stow/common/errors.hpp"

namespace stow::model {

using ad::Shape;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  for (int v : {layers, queries, token_width, feature_channels, mask_width, track_width, downsample, heads, ffn_width,
                image_height, image_width}) {
    if (v < 1) fail("all extents must be at least 1");
  }
  if (token_width % heads != 0)
    fail("token_width " + std::to_string(token_width) + " is not divisible by heads " + std::to_string(heads));
  if ((downsample & (downsample - 1)) != 0) fail("downsample must be a power of two");
  if (downsample < 4) fail("downsample must be at least 4");
  if (image_height % downsample != 0 || image_width % downsample != 0)
    fail("image extents " + std::to_string(image_height) + "x" + std::to_string(image_width) +
         " are not divisible by downsample " + std::to_string(downsample));
  if (feature_channels % 2 != 0) fail("feature_channels must be even");
}

int ModelConfig::encoder_stages() const {
  int n = 0;
  for (int s = downsample; s > 1; s >>= 1) ++n;
  return n;
}

int ModelConfig::stage_channels(int stage) const {
  return std::max(4, feature_channels >> (encoder_stages() - 1 - stage));
}

KeyValueConfig ModelConfig::to_keyvalue() const {
  KeyValueConfig kv;
  kv.set("layers", std::to_string(layers));
  kv.set("queries", std::to_string(queries));
  kv.set("token_width", std::to_string(token_width));
  kv.set("feature_channels", std::to_string(feature_channels));
  kv.set("mask_width", std::to_string(mask_width));
  kv.set("track_width", std::to_string(track_width));
  kv.set("downsample", std::to_string(downsample));
  kv.set("heads", std::to_string(heads));
  kv.set("ffn_width", std::to_string(ffn_width));
  kv.set("image_height", std::to_string(image_height));
  kv.set("image_width", std::to_string(image_width));
  kv.set("multi_frame", multi_frame ? "true" : "false");
  kv.set("scaled_attention", scaled_attention ? "true" : "false");
  return kv;
}

ModelConfig ModelConfig::from_keyvalue(const KeyValueConfig& kv) {
  ModelConfig c = preset(kv.get_string("preset", "tiny"));
  auto get = [&](const char* key, int fallback) { return static_cast<int>(kv.get_int(key, fallback)); };
  c.layers = get("layers", c.layers);
  c.queries = get("queries", c.queries);
  c.token_width = get("token_width", c.token_width);
  c.feature_channels = get("feature_channels", c.feature_channels);
  c.mask_width = get("mask_width", c.mask_width);
  c.track_width = get("track_width", c.track_width);
  c.downsample = get("downsample", c.downsample);
  c.heads = get("heads", c.heads);
  c.ffn_width = get("ffn_width", c.ffn_width);
  c.image_height = get("image_height", c.image_height);
  c.image_width = get("image_width", c.image_width);
  c.multi_frame = kv.get_bool("multi_frame", c.multi_frame);
  c.scaled_attention = kv.get_bool("scaled_attention", c.scaled_attention);
  c.validate();
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") return c;
  if (name == "smoke") {
    c.layers = 2;
    c.queries = 8;
    c.token_width = 32;
    c.feature_channels = 32;
    c.mask_width = 16;
    c.track_width = 16;
    c.heads = 2;
    c.ffn_width = 64;
    return c;
  }
  throw ConfigError("unknown model preset '" + name + "' (valid presets: tiny, smoke)");
}

template <typename T>
Tensor<T> apply(const Linear<T>& layer, const Tensor<T>& x) {
  const Tensor<T> y = ad::matmul(x, layer.weight);
  return layer.bias.defined() ? ad::add(y, layer.bias) : y;
}

namespace {

template <typename T>
Tensor<T> attend_projected(const AttentionParams<T>& p, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t heads, bool scaled) {
  const std::size_t width = q.extent(1);
  const std::size_t d = width / heads;
  const T factor = scaled ? T(1) / std::sqrt(static_cast<T>(d)) : T(1);
  std::vector<Tensor<T>> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<T> qh = heads == 1 ? q : ad::slice(q, 1, h * d, d);
    const Tensor<T> kh = heads == 1 ? k : ad::slice(k, 1, h * d, d);
    const Tensor<T> vh = heads == 1 ? v : ad::slice(v, 1, h * d, d);
    Tensor<T> logits = ad::matmul_nt(qh, kh);
    if (scaled) logits = ad::scale(logits, factor);
    parts.push_back(ad::matmul(ad::softmax(logits, 1), vh));
  }
  const Tensor<T> merged = heads == 1 ? parts[0] : ad::concat(parts, 1);
  return apply(p.output, merged);
}

}  // namespace

template <typename T>
Tensor<T> attention(const AttentionParams<T>& p, const Tensor<T>& queries, const Tensor<T>& keys,
                    const Tensor<T>& values, std::size_t heads, bool scaled) {
  return attend_projected(p, apply(p.query, queries), apply(p.key, keys), apply(p.value, values), heads, scaled);
}

template <typename T>
Tensor<T> self_attention(const AttentionParams<T>& p, const Tensor<T>& x, std::size_t heads, bool scaled) {
  return ad::add(attention(p, x, x, x, heads, scaled), x);
}

template <typename T>
std::vector<Tensor<T>> multi_frame_attention(const AttentionParams<T>& p, std::span<const Tensor<T>> frames,
                                             std::size_t heads, bool scaled) {
  const Tensor<T> all = ad::concat(frames, 0);
  const Tensor<T> k = apply(p.key, all);
  const Tensor<T> v = apply(p.value, all);
  std::vector<Tensor<T>> out;
  out.reserve(frames.size());
  for (const auto& x : frames) out.push_back(ad::add(attend_projected(p, apply(p.query, x), k, v, heads, scaled), x));
  return out;
}

template <typename T>
Tensor<T> sinusoidal_position(std::size_t channels, std::size_t h, std::size_t w) {
  std::vector<T> values(channels * h * w);
  const std::size_t half = channels / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const bool column = c >= half;
    const std::size_t local = column ? c - half : c;
    const std::size_t span = column ? channels - half : half;
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(local / 2) / static_cast<double>(span));
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double pos = static_cast<double>(column ? x : y) + 0.5;
        const double angle = pos * freq;
        values[(c * h + y) * w + x] = static_cast<T>(local % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
    }
  }
  return Tensor<T>::from_values({channels, h, w}, std::move(values));
}

template <typename T>
StowModel<T>::StowModel(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

template <typename T>
Tensor<T> StowModel<T>::add_param(const std::string& name, Shape shape, double bound, std::mt19937_64& rng) {
  std::vector<T> values(ad::shape_numel(shape));
  if (bound > 0.0) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : values) v = static_cast<T>(dist(rng));
  }
  Tensor<T> t = Tensor<T>::from_values(std::move(shape), std::move(values), true);
  params_.push_back({name, t});
  return t;
}

template <typename T>
Linear<T> StowModel<T>::add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                                   bool bias) {
  Linear<T> l;
  l.weight = add_param(name + ".weight", {in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
  if (bias) l.bias = add_param(name + ".bias", {out}, 0.0, rng);
  return l;
}

template <typename T>
AttentionParams<T> StowModel<T>::add_attention(const std::string& name, std::size_t key_in, std::mt19937_64& rng) {
  const auto c = static_cast<std::size_t>(config_.token_width);
  AttentionParams<T> a;
  a.query = add_linear(name + ".query", c, c, rng);
  // A key bias only shifts each query's logits by a constant.
  a.key = add_linear(name + ".key", key_in, c, rng, false);
  a.value = add_linear(name + ".value", key_in, c, rng);
  a.output = add_linear(name + ".output", c, c, rng);
  return a;
}

template <typename T>
void StowModel<T>::build(std::mt19937_64& rng) {
  const auto& c = config_;
  auto ones = [&](const std::string& name, std::size_t n) {
    Tensor<T> t = add_param(name, {n}, 0.0, rng);
    for (auto& v : t.mutable_values()) v = T(1);
    return t;
  };

  std::size_t in = 3;
  for (int s = 0; s < c.encoder_stages(); ++s) {
    const auto out = static_cast<std::size_t>(c.stage_channels(s));
    const std::string base = "encoder.stage" + std::to_string(s);
    stage_weight_.push_back(add_param(base + ".weight", {out, in, 3, 3}, std::sqrt(6.0 / (9.0 * in)), rng));
    stage_bias_.push_back(add_param(base + ".bias", {out}, 0.0, rng));
    stage_gamma_.push_back(ones(base + ".norm.gamma", out));
    stage_beta_.push_back(add_param(base + ".norm.beta", {out}, 0.0, rng));
    in = out;
  }

  const auto cf = static_cast<std::size_t>(c.feature_channels);
  const auto ce = static_cast<std::size_t>(c.mask_width);
  const auto skip = static_cast<std::size_t>(c.stage_channels(1));
  pix_weight_[0] = add_param("pixel.conv0.weight", {ce, cf, 3, 3}, std::sqrt(6.0 / (9.0 * cf)), rng);
  pix_bias_[0] = add_param("pixel.conv0.bias", {ce}, 0.0, rng);
  pix_gamma_ = ones("pixel.norm.gamma", ce);
  pix_beta_ = add_param("pixel.norm.beta", {ce}, 0.0, rng);
  const std::size_t merged = ce + skip + 2;
  pix_weight_[1] = add_param("pixel.conv1.weight", {ce, merged, 3, 3}, std::sqrt(3.0 / (9.0 * merged)), rng);
  pix_bias_[1] = add_param("pixel.conv1.bias", {ce}, 0.0, rng);

  const auto cq = static_cast<std::size_t>(c.token_width);
  queries_ = add_param("decoder.queries", {static_cast<std::size_t>(c.queries), cq}, 1.0, rng);
  for (int l = 0; l < c.layers; ++l) {
    const std::string base = "decoder.block" + std::to_string(l);
    DecoderBlockParams<T> b;
    b.cross = add_attention(base + ".cross", cf, rng);
    b.self = add_attention(base + ".self", cq, rng);
    b.multi = add_attention(base + ".multi", cq, rng);
    b.ffn_in = add_linear(base + ".ffn.in", cq, static_cast<std::size_t>(c.ffn_width), rng);
    b.ffn_out = add_linear(base + ".ffn.out", static_cast<std::size_t>(c.ffn_width), cq, rng);
    for (int n = 0; n < 4; ++n) {
      b.norm_gamma[n] = ones(base + ".norm" + std::to_string(n) + ".gamma", cq);
      b.norm_beta[n] = add_param(base + ".norm" + std::to_string(n) + ".beta", {cq}, 0.0, rng);
    }
    blocks_.push_back(std::move(b));
  }

  score_ = add_linear("head.score", cq, 1, rng);
  mask_mlp_[0] = add_linear("head.mask0", cq, cq, rng);
  mask_mlp_[1] = add_linear("head.mask1", cq, ce, rng);
  track_mlp_[0] = add_linear("head.track0", cq, cq, rng);
  track_mlp_[1] = add_linear("head.track1", cq, static_cast<std::size_t>(c.track_width), rng);

  position_ = sinusoidal_position<T>(cf, static_cast<std::size_t>(c.feature_height()),
                                     static_cast<std::size_t>(c.feature_width()));
  const auto mh = static_cast<std::size_t>(c.mask_height());
  const auto mw = static_cast<std::size_t>(c.mask_width_px());
  std::vector<T> coords(2 * mh * mw);
  for (std::size_t y = 0; y < mh; ++y) {
    for (std::size_t x = 0; x < mw; ++x) {
      coords[y * mw + x] = static_cast<T>(2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(mh) - 1.0);
      coords[mh * mw + y * mw + x] = static_cast<T>(2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(mw) - 1.0);
    }
  }
  coords_ = Tensor<T>::from_values({2, mh, mw}, std::move(coords));
}

template <typename T>
std::vector<Tensor<T>> StowModel<T>::parameter_tensors() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename T>
Tensor<T> StowModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw UsageError("no model parameter named '" + name + "'");
}

template <typename T>
void StowModel<T>::assign(const std::string& name, std::span<const T> values) {
  Tensor<T> t = parameter(name);
  if (values.size() != t.numel())
    throw DimensionError("parameter '" + name + "' has " + std::to_string(t.numel()) + " values, got " +
                         std::to_string(values.size()));
  std::copy(values.begin(), values.end(), t.mutable_values().begin());
}

template <typename T>
StowModel<T> StowModel<T>::clone() const {
  StowModel copy(config_, 0);
  copy.copy_values_from(*this);
  return copy;
}

template <typename T>
void StowModel<T>::copy_values_from(const StowModel& other) {
  if (!(other.config_ == config_)) throw UsageError("cannot copy parameters between differently configured models");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].tensor.values();
    std::copy(src.begin(), src.end(), params_[i].tensor.mutable_values().begin());
  }
}

template <typename T>
Tensor<T> StowModel<T>::channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) const {
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const Tensor<T> rows = ad::transpose(ad::reshape(x, {c, h * w}));
  const Tensor<T> normed = ad::layer_norm(rows, gamma, beta);
  return ad::reshape(ad::transpose(normed), {c, h, w});
}

template <typename T>
EncoderOutput<T> StowModel<T>::encode(const Tensor<T>& image) const {
  const Shape want{3, static_cast<std::size_t>(config_.image_height), static_cast<std::size_t>(config_.image_width)};
  if (image.shape() != want)
    throw ConfigError("image shape " + ad::shape_to_string(image.shape()) + " does not match the model input " +
                      ad::shape_to_string(want));
  EncoderOutput<T> out;
  Tensor<T> x = image;
  for (std::size_t s = 0; s < stage_weight_.size(); ++s) {
    x = ad::relu(channel_norm(ad::conv2d(x, stage_weight_[s], stage_bias_[s], 2, 1), stage_gamma_[s], stage_beta_[s]));
    if (s == 1) out.skip = x;
  }
  out.features = x;
  out.position = position_;
  const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
  out.memory = ad::transpose(ad::reshape(x, {c, hw}));
  out.memory_keys = ad::add(out.memory, ad::transpose(ad::reshape(position_, {c, hw})));
  return out;
}

template <typename T>
Tensor<T> StowModel<T>::pixel_embedding(const EncoderOutput<T>& encoded) const {
  Tensor<T> a = ad::relu(channel_norm(ad::conv2d(encoded.features, pix_weight_[0], pix_bias_[0], 1, 1), pix_gamma_,
                                      pix_beta_));
  const auto factor = static_cast<std::size_t>(config_.downsample / 4);
  if (factor > 1) a = ad::bilinear_upsample(a, factor);
  const std::vector<Tensor<T>> parts{a, encoded.skip, coords_};
  return ad::conv2d(ad::concat(parts, 0), pix_weight_[1], pix_bias_[1], 1, 1);
}

template <typename T>
std::vector<Tensor<T>> StowModel<T>::decoder_block(std::size_t layer, std::span<const Tensor<T>> tokens,
                                                   std::span<const EncoderOutput<T>> encoded) const {
  const DecoderBlockParams<T>& b = blocks_.at(layer);
  const auto heads = static_cast<std::size_t>(config_.heads);
  const bool scaled = config_.scaled_attention;
  std::vector<Tensor<T>> mid;
  mid.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Tensor<T> x = tokens[t];
    const Tensor<T> cross = attention(b.cross, x, encoded[t].memory_keys, encoded[t].memory, heads, scaled);
    x = ad::layer_norm(ad::add(x, cross), b.norm_gamma[0], b.norm_beta[0]);
    x = ad::layer_norm(self_attention(b.self, x, heads, scaled), b.norm_gamma[1], b.norm_beta[1]);
    const Tensor<T> ffn = apply(b.ffn_out, ad::relu(apply(b.ffn_in, x)));
    x = ad::layer_norm(ad::add(x, ffn), b.norm_gamma[2], b.norm_beta[2]);
    mid.push_back(x);
  }
  std::vector<Tensor<T>> mixed;
  if (config_.multi_frame) {
    mixed = multi_frame_attention(b.multi, std::span<const Tensor<T>>(mid), heads, scaled);
  } else {
    for (const auto& x : mid) mixed.push_back(ad::add(attention(b.multi, x, x, x, heads, scaled), x));
  }
  for (auto& x : mixed) x = ad::layer_norm(x, b.norm_gamma[3], b.norm_beta[3]);
  return mixed;
}

template <typename T>
HeadOutputs<T> StowModel<T>::heads(const Tensor<T>& tokens, const Tensor<T>& pixel) const {
  HeadOutputs<T> h;
  h.score_logits = apply(score_, tokens);
  h.mask_embeddings = apply(mask_mlp_[1], ad::relu(apply(mask_mlp_[0], tokens)));
  const std::size_t ce = pixel.extent(0), hw = pixel.extent(1) * pixel.extent(2);
  h.mask_logits = ad::matmul(h.mask_embeddings, ad::reshape(pixel, {ce, hw}));
  h.track_embeddings = ad::l2_normalize(apply(track_mlp_[1], ad::relu(apply(track_mlp_[0], tokens))));
  return h;
}

template <typename T>
std::vector<FrameOutputs<T>> StowModel<T>::forward_sequence(std::span<const Tensor<T>> images, bool all_layers) const {
  if (images.empty()) return {};
  std::vector<EncoderOutput<T>> encoded;
  std::vector<FrameOutputs<T>> out(images.size());
  encoded.reserve(images.size());
  for (std::size_t t = 0; t < images.size(); ++t) {
    encoded.push_back(encode(images[t]));
    out[t].pixel_embedding = pixel_embedding(encoded.back());
  }
  std::vector<Tensor<T>> tokens(images.size(), queries_);
  if (all_layers)
    for (std::size_t t = 0; t < images.size(); ++t) out[t].layers.push_back(heads(tokens[t], out[t].pixel_embedding));
  for (int l = 0; l < config_.layers; ++l) {
    tokens = decoder_block(static_cast<std::size_t>(l), tokens, encoded);
    if (all_layers || l + 1 == config_.layers)
      for (std::size_t t = 0; t < images.size(); ++t) out[t].layers.push_back(heads(tokens[t], out[t].pixel_embedding));
  }
  return out;
}

template <typename T>
Tensor<T> image_tensor(const ImageU8& image) {
  const auto h = static_cast<std::size_t>(image.height), w = static_cast<std::size_t>(image.width);
  std::vector<T> values(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        values[(c * h + y) * w + x] = static_cast<T>(image.rgb[(y * w + x) * 3 + c]) / T(255) - T(0.5);
  return Tensor<T>::from_values({3, h, w}, std::move(values));
}

template <typename T>
FramePrediction to_prediction(const HeadOutputs<T>& heads, const ModelConfig& config) {
  FramePrediction p;
  p.height = config.image_height;
  p.width = config.image_width;
  const std::size_t n = heads.score_logits.extent(0);
  const auto mh = static_cast<std::size_t>(config.mask_height());
  const auto mw = static_cast<std::size_t>(config.mask_width_px());
  const std::size_t cr = heads.track_embeddings.extent(1);
  auto logits = heads.mask_logits.values();
  auto emb = heads.track_embeddings.values();
  for (std::size_t i = 0; i < n; ++i) {
    p.scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(heads.score_logits[i]))));
    const auto up = ad::bilinear_upsample_plane<T>(logits.subspan(i * mh * mw, mh * mw), mh, mw, 4);
    BinaryMask m(p.height, p.width);
    for (std::size_t k = 0; k < up.size(); ++k)
      m.bits[k] = 1.0 / (1.0 + std::exp(-static_cast<double>(up[k]))) > 0.5 ? 1 : 0;
    p.masks.push_back(std::move(m));
    p.track_embeddings.emplace_back(emb.begin() + static_cast<std::ptrdiff_t>(i * cr),
                                    emb.begin() + static_cast<std::ptrdiff_t>((i + 1) * cr));
  }
  return p;
}

std::vector<FramePrediction> predict_sequence(const StowModel<float>& model, std::span<const ImageU8> frames) {
  ad::NoTapeScope<float> no_tape;
  std::vector<Tensor<float>> images;
  images.reserve(frames.size());
  for (const auto& f : frames) images.push_back(image_tensor<float>(f));
  const auto outputs = model.forward_sequence(images, false);
  std::vector<FramePrediction> preds;
  preds.reserve(outputs.size());
  for (const auto& o : outputs) preds.push_back(to_prediction(o.layers.back(), model.config()));
  return preds;
}

#define STOW_INSTANTIATE(T)                                                                                       \
  template Tensor<T> apply(const Linear<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> attention(const AttentionParams<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                               std::size_t, bool);                                                                \
  template Tensor<T> self_attention(const AttentionParams<T>&, const Tensor<T>&, std::size_t, bool);              \
  template std::vector<Tensor<T>> multi_frame_attention(const AttentionParams<T>&, std::span<const Tensor<T>>,    \
                                                        std::size_t, bool);                                       \
  template Tensor<T> sinusoidal_position<T>(std::size_t, std::size_t, std::size_t);                               \
  template class StowModel<T>;                                                                                    \
  template Tensor<T> image_tensor<T>(const ImageU8&);                                                             \
  template FramePrediction to_prediction(const HeadOutputs<T>&, const ModelConfig&);

STOW_INSTANTIATE(float)
STOW_INSTANTIATE(double)

}  // namespace stow::model
