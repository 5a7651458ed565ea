#include "stow/common/tracks.hpp"

#include <fstream>
#include <set>

#include "stow/common/errors.hpp"
#include "stow/common/keyvalue.hpp"
#include "stow/common/line_reader.hpp"

namespace stow {

void write_tracks(const std::string& path, const std::vector<TrackPrediction>& tracks, std::size_t frames,
                  int height, int width) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  out << "stow-tracks 1\nheight " << height << "\nwidth " << width << "\nframes " << frames << "\ntracks "
      << tracks.size() << "\n";
  for (const auto& t : tracks) {
    if (t.masks.size() != frames || t.frame_scores.size() != frames)
      throw DimensionError("track " + std::to_string(t.id) + " covers " + std::to_string(t.masks.size()) +
                           " frames, expected " + std::to_string(frames));
    out << "track " << t.id << " " << format_double(t.score) << "\n";
    for (std::size_t f = 0; f < frames; ++f) {
      if (t.masks[f].height != height || t.masks[f].width != width)
        throw DimensionError("track " + std::to_string(t.id) + " frame " + std::to_string(f) + " mask is " +
                             std::to_string(t.masks[f].height) + "x" + std::to_string(t.masks[f].width));
      const auto counts = rle_encode(t.masks[f]);
      out << "frame " << f << " " << format_double(t.frame_scores[f]) << " " << counts.size();
      for (auto c : counts) out << " " << c;
      out << "\n";
    }
  }
  if (!out) throw UsageError("write failed for " + path);
}

std::vector<TrackPrediction> read_tracks(const std::string& path) {
  LineReader in(path);
  std::vector<std::string> f;
  in.expect(f, "stow-tracks", 2);
  if (f[1] != "1") in.fail("unsupported track file version '" + f[1] + "'");
  in.expect(f, "height", 2);
  const int height = in.number<int>(f[1], "height");
  in.expect(f, "width", 2);
  const int width = in.number<int>(f[1], "width");
  if (height < 1 || width < 1) in.fail("extents must be positive");
  in.expect(f, "frames", 2);
  const auto frames = in.number<std::size_t>(f[1], "frame count");
  in.expect(f, "tracks", 2);
  const auto count = in.number<std::size_t>(f[1], "track count");

  std::vector<TrackPrediction> tracks;
  std::set<int> ids;
  for (std::size_t k = 0; k < count; ++k) {
    in.expect(f, "track", 3);
    TrackPrediction t;
    t.id = in.number<int>(f[1], "track id");
    if (!ids.insert(t.id).second) in.fail("duplicate track id " + f[1]);
    t.score = in.number<double>(f[2], "track score");
    for (std::size_t fr = 0; fr < frames; ++fr) {
      in.expect(f, "frame", 4);
      if (in.number<std::size_t>(f[1], "frame index") != fr) in.fail("expected frame " + std::to_string(fr));
      t.frame_scores.push_back(in.number<double>(f[2], "frame score"));
      const auto n = in.number<std::size_t>(f[3], "run count");
      if (f.size() != 4 + n) in.fail("run count " + f[3] + " does not match " + std::to_string(f.size() - 4) + " runs");
      std::vector<std::uint32_t> counts;
      for (std::size_t i = 0; i < n; ++i) counts.push_back(in.number<std::uint32_t>(f[4 + i], "run length"));
      try {
        t.masks.push_back(rle_decode(counts, height, width));
      } catch (const ParseError& e) {
        in.fail(std::string("track ") + std::to_string(t.id) + " frame " + std::to_string(fr) + ": " + e.what());
      }
    }
    tracks.push_back(std::move(t));
  }
  if (in.next(f)) in.fail("trailing record '" + f[0] + "'");
  return tracks;
}

}  // namespace stow
