#include "stow/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "stow/ad/ops.hpp"
#include "stow/common/errors.hpp"

namespace stow::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (iterations < 0) fail("iterations must be non-negative");
  if (batch_size < 1) fail("batch_size must be positive");
  if (frames_per_sample < 1) fail("frames_per_sample must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (decay_step < 0) fail("decay_step must be non-negative");
  if (!(decay_factor > 0.0)) fail("decay_factor must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (grad_clip < 0.0) fail("grad_clip must be non-negative");
  if (max_log_temperature < initial_log_temperature) fail("initial_log_temperature exceeds its ceiling");
  if (brightness < 0.0 || contrast < 0.0 || contrast >= 1.0 || saturation < 0.0 || saturation >= 1.0)
    fail("augmentation ranges must satisfy brightness >= 0 and 0 <= contrast, saturation < 1");
  if (checkpoint_every < 0 || log_every < 1) fail("checkpoint_every must be >= 0 and log_every >= 1");
  if (workers < 0) fail("workers must be non-negative");
  weights.validate();
  contrastive.validate();
}

KeyValueConfig TrainConfig::to_keyvalue() const {
  KeyValueConfig kv;
  kv.set("preset", "desk");
  kv.set("seed", std::to_string(seed));
  kv.set("iterations", std::to_string(iterations));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("frames_per_sample", std::to_string(frames_per_sample));
  kv.set("learning_rate", format_double(learning_rate));
  kv.set("decay_step", std::to_string(decay_step));
  kv.set("decay_factor", format_double(decay_factor));
  kv.set("weight_decay", format_double(weight_decay));
  kv.set("grad_clip", format_double(grad_clip));
  kv.set("weight.class", format_double(weights.class_weight));
  kv.set("weight.ce", format_double(weights.ce_weight));
  kv.set("weight.dice", format_double(weights.dice_weight));
  kv.set("weight.contrastive", format_double(weights.contrastive_weight));
  kv.set("weight.softmax", format_double(weights.softmax_weight));
  kv.set("margin", format_double(contrastive.margin));
  kv.set("negative_iou_ceiling", format_double(contrastive.negative_iou_ceiling));
  kv.set("negatives_per_anchor", std::to_string(contrastive.negatives_per_anchor));
  kv.set("initial_log_temperature", format_double(initial_log_temperature));
  kv.set("max_log_temperature", format_double(max_log_temperature));
  kv.set("rotate", rotate ? "true" : "false");
  kv.set("brightness", format_double(brightness));
  kv.set("contrast", format_double(contrast));
  kv.set("saturation", format_double(saturation));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("log_every", std::to_string(log_every));
  kv.set("workers", std::to_string(workers));
  return kv;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name != "long-shelf" && name != "long-tabletop")
    throw ConfigError("unknown train preset '" + name + "'; valid presets: desk, long-shelf, long-tabletop");
  c.iterations = 16000;
  c.decay_step = 14000;
  c.learning_rate = 1e-5;
  c.checkpoint_every = 2000;
  if (name == "long-shelf") {
    c.batch_size = 32;
    c.frames_per_sample = 2;
  } else {
    c.batch_size = 8;
    c.frames_per_sample = 4;
  }
  return c;
}

TrainConfig TrainConfig::from_keyvalue(const KeyValueConfig& kv) {
  TrainConfig c = preset(kv.get_string("preset", "desk"));
  c.seed = kv.get_uint("seed", c.seed);
  c.iterations = kv.get_int("iterations", c.iterations);
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.frames_per_sample = static_cast<int>(kv.get_int("frames_per_sample", c.frames_per_sample));
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.decay_step = kv.get_int("decay_step", c.decay_step);
  c.decay_factor = kv.get_double("decay_factor", c.decay_factor);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.weights.class_weight = kv.get_double("weight.class", c.weights.class_weight);
  c.weights.ce_weight = kv.get_double("weight.ce", c.weights.ce_weight);
  c.weights.dice_weight = kv.get_double("weight.dice", c.weights.dice_weight);
  c.weights.contrastive_weight = kv.get_double("weight.contrastive", c.weights.contrastive_weight);
  c.weights.softmax_weight = kv.get_double("weight.softmax", c.weights.softmax_weight);
  c.contrastive.margin = kv.get_double("margin", c.contrastive.margin);
  c.contrastive.negative_iou_ceiling = kv.get_double("negative_iou_ceiling", c.contrastive.negative_iou_ceiling);
  c.contrastive.negatives_per_anchor =
      static_cast<int>(kv.get_int("negatives_per_anchor", c.contrastive.negatives_per_anchor));
  c.initial_log_temperature = kv.get_double("initial_log_temperature", c.initial_log_temperature);
  c.max_log_temperature = kv.get_double("max_log_temperature", c.max_log_temperature);
  c.rotate = kv.get_bool("rotate", c.rotate);
  c.brightness = kv.get_double("brightness", c.brightness);
  c.contrast = kv.get_double("contrast", c.contrast);
  c.saturation = kv.get_double("saturation", c.saturation);
  c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
  c.log_every = kv.get_int("log_every", c.log_every);
  c.workers = static_cast<int>(kv.get_int("workers", c.workers));
  c.validate();
  return c;
}

ad::AdamConfig TrainConfig::adam() const {
  ad::AdamConfig a;
  a.learning_rate = learning_rate;
  a.decay_step = decay_step;
  a.decay_factor = decay_factor;
  a.weight_decay = weight_decay;
  return a;
}

int resolve_workers(int configured) {
  if (configured > 0) return configured;
  if (const char* env = std::getenv("STOW_WORKERS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

Augmentation draw_augmentation(const TrainConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Augmentation a;
  a.quarter_turns = config.rotate ? std::uniform_int_distribution<int>(0, 3)(rng) : 0;
  a.brightness = config.brightness * unit(rng);
  a.contrast = 1.0 + config.contrast * unit(rng);
  a.saturation = 1.0 + config.saturation * unit(rng);
  return a;
}

namespace {

// Source pixel for output (y, x) after k counter-clockwise quarter turns of
// an h x w image.
std::pair<int, int> rotated_source(int y, int x, int h, int w, int k) {
  switch (k & 3) {
    case 1: return {x, w - 1 - y};
    case 2: return {h - 1 - y, w - 1 - x};
    case 3: return {h - 1 - x, y};
    default: return {y, x};
  }
}

}  // namespace

ImageU8 augment_image(const ImageU8& image, const Augmentation& aug) {
  const int k = aug.quarter_turns & 3;
  const int h = image.height, w = image.width;
  const int oh = (k % 2) ? w : h, ow = (k % 2) ? h : w;
  std::vector<double> px(static_cast<std::size_t>(oh) * ow * 3);
  double mean = 0.0;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const auto [sy, sx] = rotated_source(y, x, h, w, k);
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = image.at(sy, sx, c) / 255.0;
      const double gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
      for (int c = 0; c < 3; ++c) {
        const double v = gray + aug.saturation * (rgb[c] - gray);
        px[(static_cast<std::size_t>(y) * ow + x) * 3 + c] = v;
        mean += v;
      }
    }
  }
  mean /= static_cast<double>(px.size());
  ImageU8 out(oh, ow);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = mean + aug.contrast * (px[i] - mean) + aug.brightness;
    out.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  return out;
}

BinaryMask rotate_mask(const BinaryMask& mask, int quarter_turns) {
  const int k = quarter_turns & 3;
  const int h = mask.height, w = mask.width;
  BinaryMask out((k % 2) ? w : h, (k % 2) ? h : w);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const auto [sy, sx] = rotated_source(y, x, h, w, k);
      out.set(y, x, mask.at(sy, sx));
    }
  return out;
}

std::vector<double> downsample_mask(const BinaryMask& mask, int factor) {
  if (factor < 1 || mask.height % factor != 0 || mask.width % factor != 0)
    throw DimensionError("mask extent " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " is not divisible by " + std::to_string(factor));
  const int h = mask.height / factor, w = mask.width / factor;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  const double cell = static_cast<double>(factor * factor);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) out[static_cast<std::size_t>(y / factor) * w + x / factor] += 1.0;
  for (auto& v : out) v /= cell;
  return out;
}

std::vector<std::size_t> sample_frames(std::size_t sequence_length, std::size_t k, std::mt19937_64& rng) {
  if (k > sequence_length)
    throw ConfigError("frames_per_sample " + std::to_string(k) + " exceeds sequence length " +
                      std::to_string(sequence_length));
  std::vector<std::size_t> idx(sequence_length);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates with an explicit draw so results do not depend on
  // the standard library's shuffle.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (sequence_length - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TrainingSample make_sample(const synth::SequenceRecord& sequence, std::span<const std::size_t> frames,
                           const Augmentation& aug, int mask_factor) {
  TrainingSample s;
  s.appearance_groups = sequence.appearance_groups;
  for (std::size_t f : frames) {
    const synth::FrameRecord& fr = sequence.frames.at(f);
    s.images.push_back(augment_image(fr.image, aug));
    FrameTargets t;
    t.object_ids = fr.object_ids;
    for (const auto& m : fr.masks) {
      const BinaryMask r = rotate_mask(m, aug.quarter_turns);
      t.height = static_cast<std::size_t>(r.height / mask_factor);
      t.width = static_cast<std::size_t>(r.width / mask_factor);
      t.masks.push_back(downsample_mask(r, mask_factor));
    }
    if (t.masks.empty()) {
      const int k = aug.quarter_turns & 1;
      t.height = static_cast<std::size_t>((k ? fr.image.width : fr.image.height) / mask_factor);
      t.width = static_cast<std::size_t>((k ? fr.image.height : fr.image.width) / mask_factor);
    }
    s.targets.push_back(std::move(t));
  }
  return s;
}

std::string StepMetrics::log_line() const {
  char buf[320];
  std::snprintf(buf, sizeof buf, "step=%lld class=%.9g ce=%.9g dice=%.9g contra=%.9g softmax=%.9g total=%.9g lr=%.9g",
                static_cast<long long>(step), class_loss, ce_loss, dice_loss, contrastive_loss, softmax_loss, total,
                learning_rate);
  return buf;
}

template <typename T>
LossTerms<T> sample_losses(const model::StowModel<T>& model, const TrainingSample& sample, const TrainConfig& config,
                           const Tensor<T>& log_temperature, std::mt19937_64* negative_rng) {
  std::vector<Tensor<T>> images;
  for (const auto& img : sample.images) images.push_back(model::image_tensor<T>(img));
  const auto outputs = model.forward_sequence(images, true);
  const std::size_t layers = outputs.at(0).layers.size();
  const std::size_t frames = outputs.size();

  std::vector<Tensor<T>> cls, ce, dice, contra, nce;
  for (std::size_t l = 0; l < layers; ++l) {
    TrackingBatch<T> batch;
    batch.appearance_groups = sample.appearance_groups;
    for (std::size_t t = 0; t < frames; ++t) {
      const auto& h = outputs[t].layers[l];
      FrameMatch m = match_predictions(h.score_logits, h.mask_logits, sample.targets[t], config.weights);
      cls.push_back(loss_class(h.score_logits, m));
      ce.push_back(loss_mask_ce(h.mask_logits, m, sample.targets[t]));
      dice.push_back(loss_mask_dice(h.mask_logits, m, sample.targets[t]));
      batch.embeddings.push_back(h.track_embeddings);
      batch.matches.push_back(std::move(m));
    }
    if (l == 0) continue;  // the initial queries carry no tracking signal
    contra.push_back(loss_contrastive(batch, config.contrastive, negative_rng).total);
    nce.push_back(loss_infonce(batch, log_temperature));
  }
  auto average = [](const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) return Tensor<T>::scalar(T(0));
    return ad::mean(parts.size() == 1 ? parts[0] : ad::concat(parts, 0));
  };
  return LossTerms<T>{average(cls), average(ce), average(dice), average(contra), average(nce)};
}

Trainer::Trainer(std::vector<synth::SequenceRecord> dataset, const model::ModelConfig& model_config, TrainConfig config)
    : dataset_(std::move(dataset)),
      config_(std::move(config)),
      model_(model_config, config_.seed),
      log_temperature_(ad::Tensor<float>::scalar(static_cast<float>(config_.initial_log_temperature), true)),
      optimizer_(config_.adam()) {
  init();
}

Trainer::Trainer(std::vector<synth::SequenceRecord> dataset, model::LoadedCheckpoint checkpoint, TrainConfig config)
    : dataset_(std::move(dataset)),
      config_(std::move(config)),
      model_(std::move(checkpoint.model)),
      log_temperature_(ad::Tensor<float>::scalar(static_cast<float>(config_.initial_log_temperature), true)),
      optimizer_(config_.adam()) {
  if (!checkpoint.training) throw UsageError("checkpoint carries no training state to resume from");
  for (const auto& e : checkpoint.training->extras) {
    if (e.name != "loss.log_temperature" || e.values.size() != 1)
      throw ParseError("unexpected training tensor '" + e.name + "' in checkpoint");
    log_temperature_.mutable_values()[0] = e.values[0];
  }
  optimizer_.set_state(checkpoint.training->optimizer);
  init();
}

void Trainer::init() {
  config_.validate();
  if (dataset_.empty()) throw UsageError("training dataset is empty");
  for (std::size_t i = 0; i < dataset_.size(); ++i) {
    if (dataset_[i].frames.size() < static_cast<std::size_t>(config_.frames_per_sample))
      throw ConfigError("sequence " + std::to_string(i) + " has " + std::to_string(dataset_[i].frames.size()) +
                        " frames, fewer than frames_per_sample " + std::to_string(config_.frames_per_sample));
    const auto& f0 = dataset_[i].frames[0].image;
    if (f0.height != model_.config().image_height || f0.width != model_.config().image_width)
      throw ConfigError("sequence " + std::to_string(i) + " has " + std::to_string(f0.height) + "x" +
                        std::to_string(f0.width) + " frames but the model expects " +
                        std::to_string(model_.config().image_height) + "x" + std::to_string(model_.config().image_width));
  }
  const int workers = std::min(resolve_workers(config_.workers), config_.batch_size);
  for (int w = 0; w < workers; ++w) {
    replicas_.push_back(model_.clone());
    replica_tau_.push_back(log_temperature_.clone());
    replica_tau_.back().set_requires_grad(true);
  }
}

std::vector<ad::Tensor<float>> Trainer::trainables(model::StowModel<float>& m, ad::Tensor<float>& tau) {
  auto out = m.parameter_tensors();
  out.push_back(tau);
  return out;
}

StepMetrics Trainer::step() {
  const std::int64_t index = completed_steps();
  std::mt19937_64 rng(synth::sequence_seed(config_.seed ^ 0x5bd1e995ull, static_cast<std::size_t>(index)));

  const auto batch = static_cast<std::size_t>(config_.batch_size);
  std::vector<std::size_t> order(dataset_.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> picks;
  for (std::size_t i = 0; i < batch; ++i) {
    // Without replacement while the dataset lasts.
    const std::size_t remaining = order.size() - (i % order.size());
    if (i % order.size() == 0) std::iota(order.begin(), order.end(), 0);
    const std::size_t j = (i % order.size()) + static_cast<std::size_t>(rng() % remaining);
    std::swap(order[i % order.size()], order[j]);
    picks.push_back(order[i % order.size()]);
  }
  std::vector<std::vector<std::size_t>> frames(batch);
  std::vector<Augmentation> augs(batch);
  std::vector<std::uint64_t> negative_seeds(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    frames[i] = sample_frames(dataset_[picks[i]].frames.size(), static_cast<std::size_t>(config_.frames_per_sample), rng);
    augs[i] = draw_augmentation(config_, rng);
    negative_seeds[i] = rng();
  }

  for (std::size_t w = 0; w < replicas_.size(); ++w) {
    replicas_[w].copy_values_from(model_);
    replica_tau_[w].mutable_values()[0] = log_temperature_[0];
  }

  const std::size_t param_count = model_.parameters().size() + 1;
  std::vector<std::vector<std::vector<float>>> grads(batch);
  std::vector<std::array<double, 6>> losses(batch);
  std::vector<std::exception_ptr> errors(batch);
  const auto workers = static_cast<std::ptrdiff_t>(replicas_.size());
  const int mask_factor = 4;

#pragma omp parallel for num_threads(static_cast<int>(workers)) schedule(static, 1)
  for (std::ptrdiff_t w = 0; w < workers; ++w) {
    auto& replica = replicas_[static_cast<std::size_t>(w)];
    auto& tau = replica_tau_[static_cast<std::size_t>(w)];
    auto params = trainables(replica, tau);
    for (std::size_t i = static_cast<std::size_t>(w); i < batch; i += static_cast<std::size_t>(workers)) {
      try {
        const TrainingSample sample = make_sample(dataset_[picks[i]], frames[i], augs[i], mask_factor);
        std::mt19937_64 negative_rng(negative_seeds[i]);
        for (auto& p : params) p.zero_grad();
        ad::Tape<float> tape;
        ad::TapeScope<float> scope(tape);
        const LossTerms<float> terms = sample_losses(replica, sample, config_, tau, &negative_rng);
        const ad::Tensor<float> total = total_loss(terms, config_.weights);
        tape.backward(ad::scale(total, 1.0f / static_cast<float>(batch)));
        grads[i].resize(param_count);
        for (std::size_t p = 0; p < param_count; ++p) {
          const auto g = params[p].grad();
          grads[i][p].assign(g.begin(), g.end());
          if (grads[i][p].empty()) grads[i][p].assign(params[p].numel(), 0.0f);
        }
        losses[i] = {terms.class_loss.item(), terms.ce_loss.item(),         terms.dice_loss.item(),
                     terms.contrastive_loss.item(), terms.softmax_loss.item(), total.item()};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  auto params = trainables(model_, log_temperature_);
  double norm2 = 0.0;
  for (std::size_t p = 0; p < param_count; ++p) {
    auto g = params[p].mutable_grad();
    std::fill(g.begin(), g.end(), 0.0f);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][p][k];
    for (float v : g) norm2 += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(norm2);
  if (config_.grad_clip > 0.0 && norm > config_.grad_clip) {
    const auto factor = static_cast<float>(config_.grad_clip / norm);
    for (auto& p : params)
      for (auto& v : p.mutable_grad()) v *= factor;
  }

  StepMetrics m;
  m.step = index;
  m.learning_rate = optimizer_.current_rate();
  optimizer_.step(params);
  auto tau = log_temperature_.mutable_values();
  tau[0] = std::min(tau[0], static_cast<float>(config_.max_log_temperature));

  for (std::size_t i = 0; i < batch; ++i) {
    m.class_loss += losses[i][0] / static_cast<double>(batch);
    m.ce_loss += losses[i][1] / static_cast<double>(batch);
    m.dice_loss += losses[i][2] / static_cast<double>(batch);
    m.contrastive_loss += losses[i][3] / static_cast<double>(batch);
    m.softmax_loss += losses[i][4] / static_cast<double>(batch);
    m.total += losses[i][5] / static_cast<double>(batch);
  }
  return m;
}

model::TrainingState Trainer::training_state() const {
  model::TrainingState st;
  st.step = completed_steps();
  st.extras.push_back({"loss.log_temperature", {1}, {log_temperature_[0]}});
  st.optimizer = optimizer_.state();
  st.train_config = config_.to_keyvalue().serialize();
  return st;
}

void Trainer::save(const std::string& path) const { model::save_checkpoint(path, model_, training_state()); }

TrainRunResult train_loop(std::vector<synth::SequenceRecord> dataset, const model::ModelConfig& model_config,
                          const TrainConfig& config, const std::string& out_dir,
                          const std::optional<std::string>& resume_from,
                          const std::function<void(const StepMetrics&)>& on_step) {
  config.validate();
  std::optional<Trainer> trainer;
  if (resume_from) {
    model::LoadedCheckpoint ckpt = model::load_checkpoint(*resume_from);
    trainer.emplace(std::move(dataset), std::move(ckpt), config);
  } else {
    trainer.emplace(std::move(dataset), model_config, config);
  }
  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "metrics.log", std::ios::app);
  if (!log) throw UsageError("cannot write " + (fs::path(out_dir) / "metrics.log").string());

  TrainRunResult result;
  while (trainer->completed_steps() < config.iterations) {
    const StepMetrics m = trainer->step();
    result.history.push_back(m);
    const std::int64_t done = trainer->completed_steps();
    if (m.step % config.log_every == 0 || done == config.iterations) log << m.log_line() << "\n" << std::flush;
    if (on_step) on_step(m);
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06lld.ckpt", static_cast<long long>(done));
      trainer->save((fs::path(out_dir) / name).string());
    }
  }
  result.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  trainer->save(result.final_checkpoint);
  return result;
}

template LossTerms<float> sample_losses(const model::StowModel<float>&, const TrainingSample&, const TrainConfig&,
                                        const Tensor<float>&, std::mt19937_64*);
template LossTerms<double> sample_losses(const model::StowModel<double>&, const TrainingSample&, const TrainConfig&,
                                         const Tensor<double>&, std::mt19937_64*);

}  // namespace stow::train
