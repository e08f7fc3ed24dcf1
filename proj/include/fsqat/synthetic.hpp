#pragma once

// Synthetic stand-in for a frozen video embedding. Every class owns a unit
// prototype; each video rotates it by a small random angle and adds a
// video-level context shift that is shared by all of its snippets. Background
// snippets come from a Gaussian mixture shared across classes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsqat/data.hpp"
#include "fsqat/rng.hpp"

namespace fsqat {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct SyntheticConfig {
  std::string domain = "synthetic";  // prefix of every class label
  std::size_t dim = 32;
  std::size_t num_snippets = 100;
  std::size_t num_classes = 25;
  std::size_t videos_per_class = 20;
  double fg_noise = 0.3;        // expected norm of per-snippet foreground noise
  double bg_noise = 0.3;        // expected norm of per-snippet background noise
  std::size_t bg_components = 4;
  double bg_offset = 0.0;       // norm of a shift applied to every background center
  double jitter_deg = 15.0;     // max per-video prototype rotation
  double scale_jitter = 0.2;    // per-video foreground amplitude in [1-s, 1+s]
  double context_shift = 1.2;   // expected norm of the per-video background shift
  std::size_t min_segments = 1;
  std::size_t max_segments = 3;
  double min_segment_frac = 0.05;
  double max_segment_frac = 0.3;
  double min_duration = 60.0;
  double max_duration = 240.0;
  std::uint64_t seed = 1234;
};

struct SyntheticWorld {
  SyntheticConfig config;
  std::vector<std::string> class_names;
  std::vector<Matrix> prototypes;  // 1 x C unit rows
  std::vector<Matrix> bg_centers;  // 1 x C
  std::map<std::string, Split> splits;

  std::size_t class_index(const std::string& label) const {
    for (std::size_t i = 0; i < class_names.size(); ++i)
      if (class_names[i] == label) return i;
    throw DataError("class '" + label + "' does not belong to world '" + config.domain + "'");
  }

  std::vector<std::string> classes_in(Split s) const {
    std::vector<std::string> out;
    for (const auto& n : class_names)
      if (splits.at(n) == s) out.push_back(n);
    return out;
  }
};

namespace detail {

inline double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void gaussian_row(Matrix& m, std::size_t r, double expected_norm, Rng& rng) {
  if (expected_norm == 0.0) return;
  std::normal_distribution<double> n(0.0, expected_norm / std::sqrt(static_cast<double>(m.cols)));
  for (double& v : m.row(r)) v += n(rng);
}

inline Matrix random_unit(std::size_t dim, Rng& rng) {
  Matrix u(1, dim);
  std::normal_distribution<double> n(0.0, 1.0);
  double nn = 0.0;
  while (nn < 1e-12) {
    for (double& v : u.data) v = n(rng);
    nn = dense::norm(u.row(0));
  }
  for (double& v : u.data) v /= nn;
  return u;
}

}  // namespace detail

/// Class counts per split: floor(80%) train, floor(10%) val, the rest test.
inline std::map<Split, std::size_t> split_sizes(std::size_t num_classes) {
  const std::size_t train = num_classes * 8 / 10;
  const std::size_t val = num_classes / 10;
  return {{Split::train, train}, {Split::val, val}, {Split::test, num_classes - train - val}};
}

inline SyntheticWorld make_world(const SyntheticConfig& cfg) {
  if (cfg.dim < 2 || cfg.num_snippets < 4 || cfg.num_classes < 3) throw std::invalid_argument("synthetic: world too small");
  if (cfg.min_segments < 1 || cfg.max_segments < cfg.min_segments) throw std::invalid_argument("synthetic: bad segment count range");
  SyntheticWorld w;
  w.config = cfg;
  Rng rng = make_rng(cfg.seed, "world:" + cfg.domain);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    char name[64];
    std::snprintf(name, sizeof name, "%s:c%02zu", cfg.domain.c_str(), c);
    w.class_names.emplace_back(name);
    Matrix p = detail::random_unit(cfg.dim, rng);
    for (double& v : p.data) v = detail::to_float_precision(v);
    w.prototypes.push_back(std::move(p));
  }
  const Matrix offset = detail::random_unit(cfg.dim, rng);
  for (std::size_t b = 0; b < cfg.bg_components; ++b) {
    Matrix c = detail::random_unit(cfg.dim, rng);
    for (std::size_t j = 0; j < cfg.dim; ++j) c.data[j] += cfg.bg_offset * offset.data[j];
    w.bg_centers.push_back(std::move(c));
  }
  // shuffled class order decides the split
  std::vector<std::size_t> order(cfg.num_classes);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto sizes = split_sizes(cfg.num_classes);
  for (std::size_t i = 0; i < order.size(); ++i) {
    Split s = i < sizes.at(Split::train) ? Split::train : i < sizes.at(Split::train) + sizes.at(Split::val) ? Split::val : Split::test;
    w.splits[w.class_names[order[i]]] = s;
  }
  return w;
}

struct SyntheticVideo {
  AnnotatedVideo video;
  std::vector<std::uint8_t> foreground;  // what the generator drew as foreground
};

inline std::string synthetic_video_id(const std::string& label, std::size_t index) {
  std::string id = label;
  std::replace(id.begin(), id.end(), ':', '_');
  std::replace(id.begin(), id.end(), '/', '_');
  char buf[16];
  std::snprintf(buf, sizeof buf, "_v%04zu", index);
  return id + buf;
}

/// Draws one untrimmed video of `label`. Segment boundaries fall on snippet
/// edges, so annotations and features agree exactly.
inline SyntheticVideo gen_synthetic_video(const SyntheticWorld& world, const std::string& label, Rng& rng, std::string id = {}) {
  const auto& cfg = world.config;
  const std::size_t cls = world.class_index(label);
  const std::size_t T = cfg.num_snippets;
  const std::size_t C = cfg.dim;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SyntheticVideo out;
  AnnotatedVideo& v = out.video;
  v.id = id.empty() ? synthetic_video_id(label, rng() % 10000) : std::move(id);
  v.duration = std::round((cfg.min_duration + (cfg.max_duration - cfg.min_duration) * unit(rng)) * 100.0) / 100.0;

  // segment layout in snippet units, at least one background snippet between segments
  std::uniform_int_distribution<std::size_t> nseg_d(cfg.min_segments, cfg.max_segments);
  std::size_t nseg = nseg_d(rng);
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  for (std::size_t i = 0; i < nseg; ++i) {
    const double frac = cfg.min_segment_frac + (cfg.max_segment_frac - cfg.min_segment_frac) * unit(rng);
    const std::size_t len = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frac * static_cast<double>(T))));
    if (total + len + lengths.size() > T) break;
    lengths.push_back(len);
    total += len;
  }
  if (lengths.empty()) {
    lengths.push_back(std::max<std::size_t>(1, T / 10));
    total = lengths.back();
  }
  nseg = lengths.size();
  const std::size_t slack = T - total - (nseg - 1);
  std::uniform_int_distribution<std::size_t> cut_d(0, slack);
  std::vector<std::size_t> cuts(nseg);
  for (auto& c : cuts) c = cut_d(rng);
  std::sort(cuts.begin(), cuts.end());
  out.foreground.assign(T, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < nseg; ++i) {
    const std::size_t a = cuts[i] + offset;
    const std::size_t b = a + lengths[i];
    offset += lengths[i] + 1;
    for (std::size_t t = a; t < b; ++t) out.foreground[t] = 1;
    v.segments.push_back({snippet_edge(a, v.duration, T), snippet_edge(b, v.duration, T), label});
  }

  // per-video appearance
  const double angle = cfg.jitter_deg * std::numbers::pi / 180.0 * unit(rng);
  const Matrix& proto = world.prototypes[cls];
  Matrix dir = detail::random_unit(C, rng);
  const double along = dense::dot(dir.row(0), proto.row(0));
  for (std::size_t j = 0; j < C; ++j) dir.data[j] -= along * proto.data[j];
  const double dn = dense::norm(dir.row(0));
  for (double& x : dir.data) x = dn > 0.0 ? x / dn : 0.0;
  Matrix fg_center(1, C);
  const double amp = 1.0 + cfg.scale_jitter * (2.0 * unit(rng) - 1.0);
  for (std::size_t j = 0; j < C; ++j) fg_center.data[j] = amp * (std::cos(angle) * proto.data[j] + std::sin(angle) * dir.data[j]);
  Matrix shift(1, C);
  detail::gaussian_row(shift, 0, cfg.context_shift, rng);

  std::uniform_int_distribution<std::size_t> comp_d(0, world.bg_centers.empty() ? 0 : world.bg_centers.size() - 1);
  v.features = Matrix(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    auto row = v.features.row(t);
    if (out.foreground[t]) {
      for (std::size_t j = 0; j < C; ++j) row[j] = fg_center.data[j];
      detail::gaussian_row(v.features, t, cfg.fg_noise, rng);
    } else {
      const std::size_t c = comp_d(rng);
      for (std::size_t j = 0; j < C; ++j) row[j] = (world.bg_centers.empty() ? 0.0 : world.bg_centers[c].data[j]) + shift.data[j];
      detail::gaussian_row(v.features, t, cfg.bg_noise, rng);
    }
    for (double& x : row) x = detail::to_float_precision(x);
  }
  return out;
}

/// File-system safe, lexicographically ordered video id.
/// Every video of every class in `split`, each drawn from its own stream.
inline VideoPool make_pool(const SyntheticWorld& world, Split split) {
  VideoPool pool;
  for (const auto& label : world.classes_in(split)) {
    for (std::size_t i = 0; i < world.config.videos_per_class; ++i) {
      Rng rng = make_rng(world.config.seed, "video:" + label, i);
      auto sv = gen_synthetic_video(world, label, rng, synthetic_video_id(label, i));
      pool.add(std::make_shared<const AnnotatedVideo>(std::move(sv.video)));
    }
  }
  return pool;
}

}  // namespace fsqat
