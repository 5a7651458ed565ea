#include "stow/synth/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "stow/common/errors.hpp"

namespace stow::synth {

std::string to_string(SceneMode mode) { return mode == SceneMode::shelf ? "shelf" : "tabletop"; }

SceneMode parse_mode(const std::string& text) {
  if (text == "shelf") return SceneMode::shelf;
  if (text == "tabletop") return SceneMode::tabletop;
  throw ConfigError("unknown scene mode '" + text + "' (valid modes: shelf, tabletop)");
}

SynthConfig SynthConfig::tabletop() { return SynthConfig{}; }

SynthConfig SynthConfig::shelf() {
  SynthConfig c;
  c.mode = SceneMode::shelf;
  c.frames = 2;
  c.intro_frames = 2;
  c.initial_objects = 3;
  c.min_objects = 3;
  c.max_objects = 5;
  c.new_object_probability = 0.5;
  c.move_probability = 0.3;
  c.flip_probability = 0.3;
  c.hide_probability = 0.0;
  c.removal_probability = 0.2;
  c.scale_min = 0.45;
  c.scale_max = 0.75;
  return c;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
  if (height < 32 || width < 32) fail("canvas extents must be at least 32");
  if (frames < 1) fail("frames must be positive");
  if (mode == SceneMode::shelf && frames < 2) fail("shelf sequences need at least 2 frames");
  if (min_objects < 1 || max_objects < min_objects) fail("object band must satisfy 1 <= min <= max");
  if (mode == SceneMode::tabletop) {
    if (intro_frames < 1 || intro_frames > frames) fail("intro_frames must lie in [1, frames]");
    if (initial_objects < 1 || initial_objects > max_objects) fail("initial_objects must lie in [1, max_objects]");
  }
  for (double p : {new_object_probability, move_probability, flip_probability, hide_probability, removal_probability,
                   duplicate_probability}) {
    if (p < 0.0 || p > 1.0) fail("probabilities must lie in [0, 1]");
  }
  if (scale_min <= 0.0 || scale_max < scale_min || scale_max > 1.0) fail("scale range must satisfy 0 < min <= max <= 1");
  if (texture_cell <= 0.0) fail("texture_cell must be positive");
  if (min_visible_pixels < 1) fail("min_visible_pixels must be positive");
  if (max_retries < 1) fail("max_retries must be positive");
}

KeyValueConfig SynthConfig::to_keyvalue() const {
  KeyValueConfig kv;
  kv.set("mode", synth::to_string(mode));
  kv.set("height", std::to_string(height));
  kv.set("width", std::to_string(width));
  kv.set("frames", std::to_string(frames));
  kv.set("intro_frames", std::to_string(intro_frames));
  kv.set("initial_objects", std::to_string(initial_objects));
  kv.set("min_objects", std::to_string(min_objects));
  kv.set("max_objects", std::to_string(max_objects));
  kv.set("new_object_probability", format_double(new_object_probability));
  kv.set("move_probability", format_double(move_probability));
  kv.set("flip_probability", format_double(flip_probability));
  kv.set("hide_probability", format_double(hide_probability));
  kv.set("removal_probability", format_double(removal_probability));
  kv.set("duplicate_probability", format_double(duplicate_probability));
  kv.set("scale_min", format_double(scale_min));
  kv.set("scale_max", format_double(scale_max));
  kv.set("texture_amplitude", format_double(texture_amplitude));
  kv.set("texture_cell", format_double(texture_cell));
  kv.set("background_amplitude", format_double(background_amplitude));
  kv.set("min_color_distance", format_double(min_color_distance));
  kv.set("shelf_overlap_max", format_double(shelf_overlap_max));
  kv.set("camera_jitter", format_double(camera_jitter));
  kv.set("min_visible_pixels", std::to_string(min_visible_pixels));
  kv.set("max_retries", std::to_string(max_retries));
  return kv;
}

SynthConfig SynthConfig::from_keyvalue(const KeyValueConfig& kv) {
  const SceneMode m = parse_mode(kv.get_string("mode", "tabletop"));
  SynthConfig c = m == SceneMode::shelf ? shelf() : tabletop();
  c.height = static_cast<int>(kv.get_int("height", c.height));
  c.width = static_cast<int>(kv.get_int("width", c.width));
  c.frames = static_cast<int>(kv.get_int("frames", c.frames));
  c.intro_frames = static_cast<int>(kv.get_int("intro_frames", c.intro_frames));
  c.initial_objects = static_cast<int>(kv.get_int("initial_objects", c.initial_objects));
  c.min_objects = static_cast<int>(kv.get_int("min_objects", c.min_objects));
  c.max_objects = static_cast<int>(kv.get_int("max_objects", c.max_objects));
  c.new_object_probability = kv.get_double("new_object_probability", c.new_object_probability);
  c.move_probability = kv.get_double("move_probability", c.move_probability);
  c.flip_probability = kv.get_double("flip_probability", c.flip_probability);
  c.hide_probability = kv.get_double("hide_probability", c.hide_probability);
  c.removal_probability = kv.get_double("removal_probability", c.removal_probability);
  c.duplicate_probability = kv.get_double("duplicate_probability", c.duplicate_probability);
  c.scale_min = kv.get_double("scale_min", c.scale_min);
  c.scale_max = kv.get_double("scale_max", c.scale_max);
  c.texture_amplitude = kv.get_double("texture_amplitude", c.texture_amplitude);
  c.texture_cell = kv.get_double("texture_cell", c.texture_cell);
  c.background_amplitude = kv.get_double("background_amplitude", c.background_amplitude);
  c.min_color_distance = kv.get_double("min_color_distance", c.min_color_distance);
  c.shelf_overlap_max = kv.get_double("shelf_overlap_max", c.shelf_overlap_max);
  c.camera_jitter = kv.get_double("camera_jitter", c.camera_jitter);
  c.min_visible_pixels = static_cast<int>(kv.get_int("min_visible_pixels", c.min_visible_pixels));
  c.max_retries = static_cast<int>(kv.get_int("max_retries", c.max_retries));
  return c;
}

std::uint64_t sequence_seed(std::uint64_t dataset_seed, std::size_t index) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = dataset_seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return sequence_seed(a, static_cast<std::size_t>(b)); }

// Lattice value in [-1, 1].
double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = mix(mix(seed, static_cast<std::uint64_t>(ix) * 2654435761ull), static_cast<std::uint64_t>(iy));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

// Bilinear value noise in [-1, 1].
double value_noise(std::uint64_t seed, double u, double v, double cell) {
  const double fu = u / cell, fv = v / cell;
  const double x0 = std::floor(fu), y0 = std::floor(fv);
  const double tx = fu - x0, ty = fv - y0;
  const auto ix = static_cast<std::int64_t>(x0), iy = static_cast<std::int64_t>(y0);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

bool covers(const ObjectInstance& obj, double px, double py, double& u, double& v) {
  const double dx = px - obj.pose.x, dy = py - obj.pose.y;
  const double c = std::cos(obj.pose.rotation), s = std::sin(obj.pose.rotation);
  u = c * dx + s * dy;
  v = -s * dx + c * dy;
  const ShapeSpec& sh = obj.shape;
  if (sh.kind == OutlineKind::ellipse) {
    const double a = u / sh.semi_x, b = v / sh.semi_y;
    return a * a + b * b <= 1.0;
  }
  const std::size_t n = sh.vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = sh.vertices[i];
    const auto& q = sh.vertices[(i + 1) % n];
    const double cross = (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]);
    if (cross < 0.0) return false;
  }
  return true;
}

double bounding_radius(const ShapeSpec& sh) {
  if (sh.kind == OutlineKind::ellipse) return std::max(sh.semi_x, sh.semi_y);
  double r = 0.0;
  for (const auto& p : sh.vertices) r = std::max(r, std::hypot(p[0], p[1]));
  return r;
}

}  // namespace

FrameRecord rasterize_frame(std::span<const ObjectInstance> instances, int height, int width,
                            const Background& background) {
  FrameRecord frame;
  frame.image = ImageU8(height, width);

  std::vector<const ObjectInstance*> order;
  for (const auto& o : instances)
    if (o.present) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(), [](const ObjectInstance* a, const ObjectInstance* b) {
    return a->z != b->z ? a->z < b->z : a->id < b->id;
  });

  // Owner index into `order` per pixel, painted bottom to top.
  std::vector<int> owner(static_cast<std::size_t>(height) * width, -1);
  std::vector<double> local_u(owner.size()), local_v(owner.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const ObjectInstance& obj = *order[k];
    const double r = bounding_radius(obj.shape) + 1.0;
    const int y0 = std::max(0, static_cast<int>(std::floor(obj.pose.y - r)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(obj.pose.y + r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(obj.pose.x - r)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(obj.pose.x + r)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double u = 0, v = 0;
        if (covers(obj, x + 0.5, y + 0.5, u, v)) {
          const std::size_t idx = static_cast<std::size_t>(y) * width + x;
          owner[idx] = static_cast<int>(k);
          local_u[idx] = u;
          local_v[idx] = v;
        }
      }
    }
  }

  std::vector<BinaryMask> masks(order.size(), BinaryMask(height, width));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * width + x;
      const int k = owner[idx];
      for (int c = 0; c < 3; ++c) {
        double value = 0.0;
        if (k < 0) {
          value = background.color[c] + background.texture_amplitude *
                                            value_noise(mix(background.texture_seed, static_cast<std::uint64_t>(c)),
                                                        x + 0.5, y + 0.5, background.texture_cell);
        } else {
          const ShapeSpec& sh = order[static_cast<std::size_t>(k)]->shape;
          value = sh.color[c] + sh.texture_amplitude * value_noise(mix(sh.texture_seed, static_cast<std::uint64_t>(c)),
                                                                   local_u[idx], local_v[idx], sh.texture_cell);
        }
        frame.image.at(y, x, c) = quantize(value);
      }
      if (k >= 0) masks[static_cast<std::size_t>(k)].set(y, x);
    }
  }

  std::vector<std::pair<int, std::size_t>> visible;
  for (std::size_t k = 0; k < order.size(); ++k)
    if (!masks[k].empty()) visible.emplace_back(order[k]->id, k);
  std::sort(visible.begin(), visible.end());
  for (const auto& [id, k] : visible) {
    frame.object_ids.push_back(id);
    frame.masks.push_back(std::move(masks[k]));
  }
  return frame;
}

namespace {

class SceneBuilder {
 public:
  SceneBuilder(const SynthConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    background_.color = {uniform(0.25, 0.75), uniform(0.25, 0.75), uniform(0.25, 0.75)};
    background_.texture_seed = rng_();
    background_.texture_amplitude = cfg_.background_amplitude;
    background_.texture_cell = 8.0;
  }

  GeneratedScene build(std::uint64_t seed) {
    GeneratedScene scene;
    scene.record.seed = seed;
    scene.record.mode = cfg_.mode;
    scene.record.config = cfg_;
    for (int f = 0; f < cfg_.frames; ++f) {
      const std::vector<ObjectInstance> previous = objects_;
      const int previous_next_id = next_id_;
      const auto previous_groups = groups_;
      const auto previous_order = shelf_order_;
      bool accepted = false;
      for (int attempt = 0; attempt < cfg_.max_retries && !accepted; ++attempt) {
        objects_ = previous;
        next_id_ = previous_next_id;
        groups_ = previous_groups;
        shelf_order_ = previous_order;
        std::vector<int> introduced;
        if (cfg_.mode == SceneMode::tabletop)
          step_tabletop(f, introduced);
        else
          step_shelf(f, introduced);
        FrameRecord frame = render(f);
        if (acceptable(frame, introduced)) {
          scene.record.frames.push_back(std::move(frame));
          accepted = true;
        }
      }
      if (!accepted) {
        throw GenerationError("cannot place objects for frame " + std::to_string(f) + " after " +
                              std::to_string(cfg_.max_retries) + " attempts (canvas " + std::to_string(cfg_.width) +
                              "x" + std::to_string(cfg_.height) + ", up to " + std::to_string(cfg_.max_objects) +
                              " objects)");
      }
      scene.states.push_back(objects_);
    }
    scene.record.appearance_groups = groups_;
    return scene;
  }

 private:
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool chance(double p) { return p > 0.0 && uniform(0.0, 1.0) < p; }
  int top_z() const {
    int z = 0;
    for (const auto& o : objects_) z = std::max(z, o.z);
    return z;
  }

  std::array<double, 3> pick_color() {
    std::array<double, 3> best{};
    double best_score = -1.0;
    for (int attempt = 0; attempt < 32; ++attempt) {
      std::array<double, 3> c{uniform(0.05, 0.95), uniform(0.05, 0.95), uniform(0.05, 0.95)};
      double nearest = distance(c, background_.color);
      for (const auto& o : objects_) nearest = std::min(nearest, distance(c, o.shape.color));
      if (nearest >= cfg_.min_color_distance) return c;
      if (nearest > best_score) {
        best_score = nearest;
        best = c;
      }
    }
    return best;
  }

  static double distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
  }

  std::uint64_t fresh_texture_seed() {
    std::uint64_t s = rng_();
    while (used_texture_seeds_.count(s)) s = rng_();
    used_texture_seeds_.insert(s);
    return s;
  }

  ShapeSpec random_tabletop_shape() {
    ShapeSpec sh;
    const double extent = std::min(cfg_.height, cfg_.width);
    sh.scale = uniform(cfg_.scale_min, cfg_.scale_max);
    const double a = 0.5 * sh.scale * extent;
    const double b = a * uniform(0.55, 1.0);
    if (chance(0.5)) {
      sh.kind = OutlineKind::ellipse;
      sh.semi_x = a;
      sh.semi_y = b;
    } else {
      sh.kind = OutlineKind::polygon;
      const int n = uniform_int(3, 8);
      // Sorted angles on an ellipse give a convex outline; keep a minimum gap
      // so no edge degenerates.
      std::vector<double> angles;
      const double gap = 2.0 * kPi / n;
      const double offset = uniform(0.0, 2.0 * kPi);
      for (int i = 0; i < n; ++i) angles.push_back(offset + gap * (i + uniform(-0.3, 0.3)));
      for (double t : angles) sh.vertices.push_back({a * std::cos(t), b * std::sin(t)});
      sh.semi_x = a;
      sh.semi_y = b;
    }
    sh.color = pick_color();
    return sh;
  }

  void add_object(ShapeSpec shape, Pose pose, int z) {
    ObjectInstance o;
    o.id = next_id_++;
    o.shape = std::move(shape);
    o.shape.texture_seed = fresh_texture_seed();
    o.shape.texture_amplitude = cfg_.texture_amplitude;
    o.shape.texture_cell = cfg_.texture_cell;
    o.pose = pose;
    o.z = z;
    groups_[o.id] = o.id;
    objects_.push_back(std::move(o));
  }

  // Copies outline and color from an existing object when requested.
  bool maybe_duplicate(ShapeSpec& shape, int& group) {
    if (objects_.empty() || !chance(cfg_.duplicate_probability)) return false;
    const auto& src = objects_[static_cast<std::size_t>(uniform_int(0, static_cast<int>(objects_.size()) - 1))];
    shape = src.shape;
    group = groups_.at(src.id);
    return true;
  }

  Pose random_table_pose(const ShapeSpec& sh) {
    const double r = 0.6 * bounding_radius(sh);
    return Pose{uniform(r, cfg_.width - r), uniform(r, cfg_.height - r), uniform(0.0, 2.0 * kPi)};
  }

  void introduce_tabletop_object(std::vector<int>& introduced) {
    ShapeSpec shape;
    int group = -1;
    if (!maybe_duplicate(shape, group)) shape = random_tabletop_shape();
    const Pose pose = random_table_pose(shape);
    add_object(shape, pose, top_z() + 1);
    if (group >= 0) groups_[objects_.back().id] = group;
    introduced.push_back(objects_.back().id);
  }

  void step_tabletop(int frame, std::vector<int>& introduced) {
    if (frame == 0) {
      for (int i = 0; i < cfg_.initial_objects; ++i) introduce_tabletop_object(introduced);
      return;
    }
    for (auto& o : objects_) {
      if (chance(cfg_.move_probability)) {
        o.pose = random_table_pose(o.shape);
        o.z = top_z() + 1;
      }
      if (chance(cfg_.flip_probability)) o.pose.rotation = std::fmod(o.pose.rotation + kPi, 2.0 * kPi);
    }
    if (objects_.size() >= 2 && chance(cfg_.hide_probability)) {
      // Tuck a smaller object underneath a larger one.
      const auto k = static_cast<std::size_t>(uniform_int(0, static_cast<int>(objects_.size()) - 1));
      std::size_t cover = k;
      for (std::size_t j = 0; j < objects_.size(); ++j)
        if (j != k && objects_[j].shape.scale > objects_[k].shape.scale &&
            (cover == k || objects_[j].shape.scale > objects_[cover].shape.scale))
          cover = j;
      if (cover != k) {
        objects_[k].pose.x = objects_[cover].pose.x;
        objects_[k].pose.y = objects_[cover].pose.y;
        int lowest = objects_[0].z;
        for (const auto& o : objects_) lowest = std::min(lowest, o.z);
        objects_[k].z = lowest - 1;
      }
    }
    if (frame < cfg_.intro_frames && static_cast<int>(objects_.size()) < cfg_.max_objects &&
        chance(cfg_.new_object_probability)) {
      introduce_tabletop_object(introduced);
    }
  }

  ShapeSpec random_book() {
    ShapeSpec sh;
    sh.kind = OutlineKind::polygon;
    const double h = uniform(cfg_.scale_min, cfg_.scale_max) * cfg_.height;
    const double w = h * uniform(0.22, 0.4);
    sh.scale = std::max(h / cfg_.height, w / cfg_.width);
    sh.vertices = {{-w / 2, -h / 2}, {w / 2, -h / 2}, {w / 2, h / 2}, {-w / 2, h / 2}};
    sh.semi_x = w / 2;
    sh.semi_y = h / 2;
    sh.color = pick_color();
    return sh;
  }

  void introduce_book(std::vector<int>& introduced) {
    ShapeSpec shape;
    int group = -1;
    if (!maybe_duplicate(shape, group)) shape = random_book();
    const auto slot = static_cast<std::size_t>(uniform_int(0, static_cast<int>(shelf_order_.size())));
    add_object(shape, Pose{}, uniform_int(0, 1000));
    if (group >= 0) groups_[objects_.back().id] = group;
    shelf_order_.insert(shelf_order_.begin() + static_cast<std::ptrdiff_t>(slot), objects_.back().id);
    introduced.push_back(objects_.back().id);
  }

  ObjectInstance& find(int id) {
    return *std::find_if(objects_.begin(), objects_.end(), [id](const ObjectInstance& o) { return o.id == id; });
  }

  void step_shelf(int frame, std::vector<int>& introduced) {
    if (frame == 0) {
      shelf_order_.clear();
      const int n = uniform_int(std::max(cfg_.min_objects, 1), cfg_.max_objects);
      for (int i = 0; i < n; ++i) introduce_book(introduced);
    } else {
      for (auto& o : objects_)
        if (chance(cfg_.flip_probability)) o.pose.rotation = std::fmod(o.pose.rotation + kPi, 2.0 * kPi);
      for (std::size_t i = 0; i < shelf_order_.size(); ++i) {
        if (!chance(cfg_.move_probability)) continue;
        const int id = shelf_order_[i];
        shelf_order_.erase(shelf_order_.begin() + static_cast<std::ptrdiff_t>(i));
        const auto slot = static_cast<std::size_t>(uniform_int(0, static_cast<int>(shelf_order_.size())));
        shelf_order_.insert(shelf_order_.begin() + static_cast<std::ptrdiff_t>(slot), id);
        find(id).z = uniform_int(0, 1000);
      }
      if (static_cast<int>(objects_.size()) > cfg_.min_objects && chance(cfg_.removal_probability)) {
        const auto k = static_cast<std::size_t>(uniform_int(0, static_cast<int>(shelf_order_.size()) - 1));
        const int id = shelf_order_[k];
        shelf_order_.erase(shelf_order_.begin() + static_cast<std::ptrdiff_t>(k));
        objects_.erase(std::remove_if(objects_.begin(), objects_.end(), [id](const ObjectInstance& o) { return o.id == id; }),
                       objects_.end());
      }
      if (static_cast<int>(objects_.size()) < cfg_.max_objects && chance(cfg_.new_object_probability)) {
        introduce_book(introduced);
      }
    }
    pack_shelf();
  }

  // Lays the books left to right in shelf order, each overlapping its
  // predecessor, then centers the row and applies camera jitter.
  void pack_shelf() {
    const double floor_y = cfg_.height - 2.0;
    std::vector<double> centers;
    double cursor = 0.0;
    double prev_half = 0.0;
    for (std::size_t i = 0; i < shelf_order_.size(); ++i) {
      const ObjectInstance& o = find(shelf_order_[i]);
      const double half = o.shape.semi_x;
      if (i == 0) {
        cursor = half;
      } else {
        const double overlap = uniform(0.0, cfg_.shelf_overlap_max) * 2.0 * std::min(half, prev_half);
        cursor += prev_half + half - overlap;
      }
      centers.push_back(cursor);
      prev_half = half;
    }
    const double row_width = centers.empty() ? 0.0 : centers.back() + prev_half;
    const double squeeze = row_width > cfg_.width - 2.0 ? (cfg_.width - 2.0) / row_width : 1.0;
    const double shift = 0.5 * (cfg_.width - row_width * squeeze);
    const double jx = uniform(-cfg_.camera_jitter, cfg_.camera_jitter);
    const double jy = uniform(-cfg_.camera_jitter, cfg_.camera_jitter);
    for (std::size_t i = 0; i < shelf_order_.size(); ++i) {
      ObjectInstance& o = find(shelf_order_[i]);
      o.pose.x = shift + centers[i] * squeeze + jx;
      o.pose.y = floor_y - o.shape.semi_y + jy;
    }
  }

  FrameRecord render(int /*frame*/) { return rasterize_frame(objects_, cfg_.height, cfg_.width, background_); }

  bool acceptable(const FrameRecord& frame, const std::vector<int>& introduced) const {
    for (std::size_t i = 0; i < frame.masks.size(); ++i) {
      if (static_cast<int>(frame.masks[i].area()) < cfg_.min_visible_pixels) return false;
    }
    auto visible = [&](int id) {
      return std::find(frame.object_ids.begin(), frame.object_ids.end(), id) != frame.object_ids.end();
    };
    for (int id : introduced)
      if (!visible(id)) return false;
    if (cfg_.mode == SceneMode::shelf) {
      // Books always show a face; the band applies to visible objects.
      const int n = static_cast<int>(frame.object_ids.size());
      if (n != static_cast<int>(objects_.size())) return false;
      if (n < cfg_.min_objects || n > cfg_.max_objects) return false;
    }
    return true;
  }

  const SynthConfig& cfg_;
  std::mt19937_64 rng_;
  Background background_;
  std::vector<ObjectInstance> objects_;
  std::vector<int> shelf_order_;
  std::map<int, int> groups_;
  std::set<std::uint64_t> used_texture_seeds_;
  int next_id_ = 1;
};

}  // namespace

GeneratedScene generate_scene(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  SceneBuilder builder(config, seed);
  return builder.build(seed);
}

SequenceRecord generate_sequence(const SynthConfig& config, std::uint64_t seed) {
  return generate_scene(config, seed).record;
}

}  // namespace stow::synth
