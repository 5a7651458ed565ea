#include "stow/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "stow/common/errors.hpp"

namespace stow::model {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'O', 'W', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr char kTrailer[4] = {'E', 'N', 'D', '!'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) {
    u64(v.size());
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  void tensor(const std::string& name, const ad::Shape& shape, std::span<const float> values) {
    text(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) u64(d);
    for (float f : values) u32(std::bit_cast<std::uint32_t>(f));
  }
  [[nodiscard]] const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& m) const {
    throw ParseError("checkpoint " + path_ + ": " + m + " (offset " + std::to_string(pos_) + ")");
  }
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) fail("truncated file");
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::uint64_t n) {
    if (n > (data_.size() - pos_) / 4) fail("truncated tensor data");
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32());
    return v;
  }
  std::vector<float> floats() { return floats(u64()); }
  StoredTensor tensor() {
    StoredTensor t;
    t.name = text();
    const std::uint32_t rank = u32();
    if (rank > 8) fail("tensor '" + t.name + "' has implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = u64();
      if (d == 0 || d > (1ull << 32)) fail("tensor '" + t.name + "' has invalid extent");
      t.shape.push_back(static_cast<std::size_t>(d));
      n *= d;
    }
    t.values = floats(n);
    return t;
  }
  [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const StowModel<float>& model,
                     const std::optional<TrainingState>& training) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.text(model.config().to_keyvalue().serialize());
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) w.tensor(p.name, p.tensor.shape(), p.tensor.values());
  if (training) {
    w.u32(1);
    w.u64(static_cast<std::uint64_t>(training->step));
    w.text(training->train_config);
    w.u32(static_cast<std::uint32_t>(training->extras.size()));
    for (const auto& e : training->extras) w.tensor(e.name, e.shape, e.values);
    const auto& opt = training->optimizer;
    w.u64(static_cast<std::uint64_t>(opt.step));
    w.u32(static_cast<std::uint32_t>(opt.first_moment.size()));
    for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
      w.floats(opt.first_moment[i]);
      w.floats(opt.second_moment.at(i));
    }
  } else {
    w.u32(0);
  }
  w.bytes(kTrailer, sizeof kTrailer);

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string temp = path + ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write checkpoint " + temp);
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw UsageError("write failed for checkpoint " + temp);
  }
  std::filesystem::rename(temp, target);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path);
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);

  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) r.fail("bad magic, not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kVersion) r.fail("unsupported schema version " + std::to_string(version));

  ModelConfig config;
  try {
    config = ModelConfig::from_keyvalue(KeyValueConfig::parse(r.text(), path));
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded model config: ") + e.what());
  }

  const std::uint32_t count = r.u32();
  std::vector<StoredTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) tensors.push_back(r.tensor());

  std::optional<TrainingState> training;
  const std::uint32_t has_training = r.u32();
  if (has_training > 1) r.fail("bad training flag");
  if (has_training == 1) {
    TrainingState st;
    st.step = static_cast<std::int64_t>(r.u64());
    st.train_config = r.text();
    const std::uint32_t extras = r.u32();
    for (std::uint32_t i = 0; i < extras; ++i) st.extras.push_back(r.tensor());
    st.optimizer.step = static_cast<std::int64_t>(r.u64());
    const std::uint32_t moments = r.u32();
    for (std::uint32_t i = 0; i < moments; ++i) {
      st.optimizer.first_moment.push_back(r.floats());
      st.optimizer.second_moment.push_back(r.floats());
    }
    training = std::move(st);
  }
  char trailer[4];
  r.bytes(trailer, sizeof trailer);
  if (std::memcmp(trailer, kTrailer, sizeof trailer) != 0 || !r.at_end()) r.fail("bad trailer");

  StowModel<float> model(config, 0);
  const auto& params = model.parameters();
  if (tensors.size() != params.size())
    r.fail("expected " + std::to_string(params.size()) + " tensors for this config, found " +
           std::to_string(tensors.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].name != params[i].name)
      r.fail("tensor " + std::to_string(i) + " is '" + tensors[i].name + "', expected '" + params[i].name + "'");
    if (tensors[i].shape != params[i].tensor.shape())
      r.fail("tensor '" + tensors[i].name + "' has shape " + ad::shape_to_string(tensors[i].shape) +
             ", config requires " + ad::shape_to_string(params[i].tensor.shape()));
  }
  if (training) {
    const auto& opt = training->optimizer;
    const std::size_t total = params.size() + training->extras.size();
    if (!opt.first_moment.empty() && opt.first_moment.size() != total) r.fail("optimizer state does not match parameters");
    for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
      const std::size_t n = i < params.size() ? params[i].tensor.numel() : training->extras[i - params.size()].values.size();
      if (opt.first_moment[i].size() != n || opt.second_moment[i].size() != n)
        r.fail("optimizer moment " + std::to_string(i) + " has the wrong length");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) model.assign(params[i].name, tensors[i].values);
  return LoadedCheckpoint{std::move(model), std::move(training)};
}

}  // namespace stow::model
