#pragma once

// Query-based video instance segmentation network: a strided convolutional
// encoder per frame, a stack of decoder blocks whose object tokens attend to
// image features, to each other, and to the tokens of every other frame, and
// three heads per token (existence score, mask, track embedding).

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stow/ad/tensor.hpp"
#include "stow/common/keyvalue.hpp"
#include "stow/common/mask.hpp"

namespace stow::model {

struct ModelConfig {
  int layers = 4;             // decoder blocks L
  int queries = 20;           // tokens per frame N_q
  int token_width = 64;       // C_q
  int feature_channels = 64;  // C_F
  int mask_width = 32;        // C_e
  int track_width = 32;       // C_r
  int downsample = 8;         // encoder ratio S
  int heads = 4;
  int ffn_width = 128;
  int image_height = 64;
  int image_width = 64;
  bool multi_frame = true;         // off: the multi-frame sublayer sees only its own frame
  bool scaled_attention = true;    // 1/sqrt(d_k) on attention logits

  // Throws ConfigError.
  void validate() const;
  [[nodiscard]] int feature_height() const { return image_height / downsample; }
  [[nodiscard]] int feature_width() const { return image_width / downsample; }
  [[nodiscard]] int mask_height() const { return image_height / 4; }
  [[nodiscard]] int mask_width_px() const { return image_width / 4; }
  [[nodiscard]] int encoder_stages() const;
  [[nodiscard]] int stage_channels(int stage) const;

  [[nodiscard]] KeyValueConfig to_keyvalue() const;
  // Keys without the "model." prefix; a "preset" key selects the base.
  static ModelConfig from_keyvalue(const KeyValueConfig& kv);
  // "tiny" (L=4, N_q=20) or "smoke" (L=2, N_q=8). Throws ConfigError.
  static ModelConfig preset(const std::string& name);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
using Tensor = ad::Tensor<T>;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined
};

template <typename T>
Tensor<T> apply(const Linear<T>& layer, const Tensor<T>& x);

template <typename T>
struct AttentionParams {
  Linear<T> query, key, value, output;
};

// Multi-head attention of `queries` [N, C] over keys [M, C_k] and values
// [M, C_k]; returns [N, C] without residual.
template <typename T>
Tensor<T> attention(const AttentionParams<T>& p, const Tensor<T>& queries, const Tensor<T>& keys,
                    const Tensor<T>& values, std::size_t heads, bool scaled);

// softmax(f_Q(X) f_K(X)^T) f_V(X) + X.
template <typename T>
Tensor<T> self_attention(const AttentionParams<T>& p, const Tensor<T>& x, std::size_t heads, bool scaled);

// Tokens of frame t attend over the concatenation of all frames' tokens, in
// the order given, plus residual. One result per frame.
template <typename T>
std::vector<Tensor<T>> multi_frame_attention(const AttentionParams<T>& p, std::span<const Tensor<T>> frames,
                                             std::size_t heads, bool scaled);

// Fixed 2-D sinusoidal encoding [channels, h, w]: the first half of the
// channels encode the row, the second half the column.
template <typename T>
Tensor<T> sinusoidal_position(std::size_t channels, std::size_t h, std::size_t w);

template <typename T>
struct EncoderOutput {
  Tensor<T> features;  // F_t [C_F, H/S, W/S]
  Tensor<T> position;  // [C_F, H/S, W/S]
  Tensor<T> skip;      // stride-4 stage output, pixel decoder input
  Tensor<T> memory;    // F_t as tokens [hw, C_F]
  Tensor<T> memory_keys;  // memory + position
};

template <typename T>
struct HeadOutputs {
  Tensor<T> score_logits;      // [N_q, 1]
  Tensor<T> mask_embeddings;   // [N_q, C_e]
  Tensor<T> mask_logits;       // [N_q, (H/4)(W/4)]
  Tensor<T> track_embeddings;  // [N_q, C_r], unit rows
};

template <typename T>
struct FrameOutputs {
  Tensor<T> pixel_embedding;       // P_t [C_e, H/4, W/4]
  std::vector<HeadOutputs<T>> layers;  // heads over X_0 .. X_L, or X_L only
};

template <typename T>
struct DecoderBlockParams {
  AttentionParams<T> cross, self, multi;
  Linear<T> ffn_in, ffn_out;
  Tensor<T> norm_gamma[4];
  Tensor<T> norm_beta[4];
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class StowModel {
 public:
  // Parameters are drawn deterministically from `seed`.
  StowModel(ModelConfig config, std::uint64_t seed);

  StowModel(const StowModel&) = delete;
  StowModel& operator=(const StowModel&) = delete;
  StowModel(StowModel&&) = default;
  StowModel& operator=(StowModel&&) = default;

  [[nodiscard]] const ModelConfig& config() const { return config_; }

  // Stable order; names are unique.
  [[nodiscard]] const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  [[nodiscard]] std::vector<Tensor<T>> parameter_tensors() const;
  [[nodiscard]] Tensor<T> parameter(const std::string& name) const;
  // Copies values into the named parameter; throws DimensionError on shape mismatch.
  void assign(const std::string& name, std::span<const T> values);
  // Deep copy with independent parameter storage.
  [[nodiscard]] StowModel clone() const;
  void copy_values_from(const StowModel& other);

  // image [3, H, W]. Throws ConfigError on extents that differ from the config.
  [[nodiscard]] EncoderOutput<T> encode(const Tensor<T>& image) const;
  [[nodiscard]] Tensor<T> pixel_embedding(const EncoderOutput<T>& encoded) const;
  [[nodiscard]] Tensor<T> initial_queries() const { return queries_; }
  [[nodiscard]] std::vector<Tensor<T>> decoder_block(std::size_t layer, std::span<const Tensor<T>> tokens,
                                                     std::span<const EncoderOutput<T>> encoded) const;
  [[nodiscard]] HeadOutputs<T> heads(const Tensor<T>& tokens, const Tensor<T>& pixel_embedding) const;

  // Runs the full pipeline. With all_layers the heads run on every
  // intermediate token set (deep supervision), otherwise only on X_L.
  [[nodiscard]] std::vector<FrameOutputs<T>> forward_sequence(std::span<const Tensor<T>> images,
                                                              bool all_layers = false) const;

  [[nodiscard]] const DecoderBlockParams<T>& block(std::size_t layer) const { return blocks_.at(layer); }
  [[nodiscard]] const Linear<T>& score_head() const { return score_; }
  [[nodiscard]] const Linear<T>& mask_head(std::size_t i) const { return mask_mlp_[i]; }
  [[nodiscard]] const Linear<T>& track_head(std::size_t i) const { return track_mlp_[i]; }

 private:
  void build(std::mt19937_64& rng);
  Tensor<T> add_param(const std::string& name, ad::Shape shape, double bound, std::mt19937_64& rng);
  Linear<T> add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true);
  AttentionParams<T> add_attention(const std::string& name, std::size_t key_in, std::mt19937_64& rng);
  Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) const;

  ModelConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<Tensor<T>> stage_weight_, stage_bias_, stage_gamma_, stage_beta_;
  Tensor<T> pix_weight_[2], pix_bias_[2], pix_gamma_, pix_beta_;
  Tensor<T> queries_;
  std::vector<DecoderBlockParams<T>> blocks_;
  Linear<T> score_;
  Linear<T> mask_mlp_[2];
  Linear<T> track_mlp_[2];
  Tensor<T> position_;  // cached encoding for the configured grid
  Tensor<T> coords_;    // [2, H/4, W/4] in [-1, 1]
};

// [3, H, W] with values rgb/255 - 0.5.
template <typename T>
Tensor<T> image_tensor(const ImageU8& image);

// Plain inference result for one frame.
struct FramePrediction {
  int height = 0;
  int width = 0;
  std::vector<double> scores;                         // [N_q] in [0,1]
  std::vector<BinaryMask> masks;                      // [N_q] at H x W
  std::vector<std::vector<double>> track_embeddings;  // [N_q][C_r]
};

// Upsamples the final-layer logits x4 and thresholds sigmoid at 0.5.
template <typename T>
FramePrediction to_prediction(const HeadOutputs<T>& heads, const ModelConfig& config);

// Gradient-free forward on a whole sequence.
[[nodiscard]] std::vector<FramePrediction> predict_sequence(const StowModel<float>& model,
                                                            std::span<const ImageU8> frames);

}  // namespace stow::model
