#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsqat/matrix.hpp"
#include "fsqat/rng.hpp"

namespace fsqat {

enum class Setting { untrimmed, trimmed };

inline const char* to_string(Setting s) { return s == Setting::trimmed ? "trimmed" : "untrimmed"; }

inline Setting parse_setting(const std::string& s) {
  if (s == "trimmed") return Setting::trimmed;
  if (s == "untrimmed") return Setting::untrimmed;
  throw std::invalid_argument("unknown setting '" + s + "' (expected trimmed|untrimmed)");
}

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Segment {
  double start = 0.0;
  double end = 0.0;
  std::string label;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Untrimmed video: T x C snippet embeddings plus segment annotations in seconds.
struct AnnotatedVideo {
  std::string id;
  double duration = 0.0;
  Matrix features;
  std::vector<Segment> segments;

  std::size_t num_snippets() const { return features.rows; }
  std::size_t dim() const { return features.cols; }

  bool has_label(const std::string& label) const {
    return std::any_of(segments.begin(), segments.end(), [&](const Segment& s) { return s.label == label; });
  }
};

using VideoPtr = std::shared_ptr<const AnnotatedVideo>;

/// Checks the segment invariants 0 <= start < end <= duration and sorts by start.
inline void validate_annotations(AnnotatedVideo& v) {
  if (!(v.duration > 0.0)) throw DataError("video '" + v.id + "': duration must be positive");
  for (const auto& s : v.segments) {
    if (!(s.start >= 0.0 && s.start < s.end && s.end <= v.duration))
      throw DataError("video '" + v.id + "': segment [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                      "] outside 0 <= start < end <= " + std::to_string(v.duration));
  }
  std::stable_sort(v.segments.begin(), v.segments.end(), [](const Segment& a, const Segment& b) { return a.start < b.start; });
}

/// Left edge of snippet t in seconds; snippet t spans [edge(t), edge(t+1)).
inline double snippet_edge(std::size_t t, double duration, std::size_t num_snippets) {
  if (t >= num_snippets) return duration;
  return duration * static_cast<double>(t) / static_cast<double>(num_snippets);
}

struct SnippetLabels {
  std::vector<std::uint8_t> fg;
  std::size_t num_fg = 0;
  std::size_t num_bg = 0;
};

inline SnippetLabels labels_from_mask(std::vector<std::uint8_t> mask) {
  SnippetLabels out;
  out.num_fg = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  out.num_bg = mask.size() - out.num_fg;
  out.fg = std::move(mask);
  return out;
}

/// Snippet t is foreground when at least half of its span lies inside a single
/// segment of `label`.
inline SnippetLabels rasterize_labels(const AnnotatedVideo& video, const std::string& label) {
  const std::size_t T = video.num_snippets();
  std::vector<std::uint8_t> mask(T, 0);
  for (std::size_t t = 0; t < T; ++t) {
    const double lo = snippet_edge(t, video.duration, T);
    const double hi = snippet_edge(t + 1, video.duration, T);
    for (const auto& s : video.segments) {
      if (s.label != label) continue;
      const double overlap = std::min(hi, s.end) - std::max(lo, s.start);
      if (overlap >= 0.5 * (hi - lo)) {
        mask[t] = 1;
        break;
      }
    }
  }
  return labels_from_mask(std::move(mask));
}

/// Features and labels used to fit the snippet classifier for one support video.
struct LabeledSnippets {
  Matrix features;
  SnippetLabels labels;
};

/// Builds the classifier training view of a support video. The trimmed setting
/// keeps only foreground snippets, so every retained snippet is foreground.
inline LabeledSnippets support_view(const AnnotatedVideo& video, const std::string& label, Setting setting) {
  SnippetLabels lab = rasterize_labels(video, label);
  if (setting == Setting::untrimmed) return {video.features, std::move(lab)};
  Matrix trimmed(lab.num_fg, video.dim());
  std::size_t r = 0;
  for (std::size_t t = 0; t < lab.fg.size(); ++t) {
    if (!lab.fg[t]) continue;
    std::copy(video.features.row(t).begin(), video.features.row(t).end(), trimmed.row(r++).begin());
  }
  return {std::move(trimmed), labels_from_mask(std::vector<std::uint8_t>(lab.num_fg, 1))};
}

/// One few-shot task: K support videos and one query video of a single class.
/// The query's annotations are ground truth for scoring and meta-training only;
/// adaptation reads nothing but its features.
struct Episode {
  std::string label;
  std::vector<VideoPtr> support;
  VideoPtr query;
  Setting setting = Setting::untrimmed;

  std::vector<LabeledSnippets> support_views() const {
    std::vector<LabeledSnippets> out;
    out.reserve(support.size());
    for (const auto& v : support) out.push_back(support_view(*v, label, setting));
    return out;
  }

  bool query_labeled() const { return query && query->has_label(label); }

  std::vector<Segment> query_ground_truth() const {
    std::vector<Segment> gt;
    for (const auto& s : query->segments)
      if (s.label == label) gt.push_back(s);
    return gt;
  }
};

/// Videos indexed by every class label they contain.
class VideoPool {
 public:
  void add(VideoPtr v, const std::set<std::string>& allowed_labels = {}) {
    std::set<std::string> seen;
    for (const auto& s : v->segments) {
      if (!allowed_labels.empty() && !allowed_labels.count(s.label)) continue;
      if (seen.insert(s.label).second) by_class_[s.label].push_back(v);
    }
  }

  const std::map<std::string, std::vector<VideoPtr>>& classes() const { return by_class_; }
  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : by_class_) out.push_back(k);
    return out;
  }
  bool empty() const { return by_class_.empty(); }
  std::size_t dim() const {
    for (const auto& [_, vs] : by_class_)
      if (!vs.empty()) return vs.front()->dim();
    return 0;
  }

 private:
  std::map<std::string, std::vector<VideoPtr>> by_class_;
};

/// Uniform class, then K+1 distinct videos of it: the first K form the support
/// set, the last one is the query.
inline Episode sample_episode(const VideoPool& pool, std::size_t k_shot, std::uint64_t seed, Setting setting = Setting::untrimmed) {
  if (pool.empty()) throw DataError("sample_episode: empty video pool");
  if (k_shot == 0) throw std::invalid_argument("sample_episode: K must be positive");
  Rng rng(seed);
  const auto& classes = pool.classes();
  std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
  auto it = std::next(classes.begin(), static_cast<std::ptrdiff_t>(pick_class(rng)));
  const auto& [label, videos] = *it;
  if (videos.size() < k_shot + 1)
    throw DataError("sample_episode: class '" + label + "' has " + std::to_string(videos.size()) + " videos, needs " +
                    std::to_string(k_shot + 1));

  std::vector<std::size_t> idx(videos.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k_shot + 1; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  Episode ep;
  ep.label = label;
  ep.setting = setting;
  for (std::size_t i = 0; i < k_shot; ++i) ep.support.push_back(videos[idx[i]]);
  ep.query = videos[idx[k_shot]];
  return ep;
}

/// Signed permutation of embedding channels: output channel j is
/// sign[j] * input channel source[j].
struct ChannelPermutation {
  std::vector<std::size_t> source;
  std::vector<double> sign;
};

inline ChannelPermutation random_channel_permutation(std::size_t dim, Rng& rng) {
  ChannelPermutation p;
  p.source.resize(dim);
  std::iota(p.source.begin(), p.source.end(), 0);
  std::shuffle(p.source.begin(), p.source.end(), rng);
  p.sign.resize(dim);
  std::bernoulli_distribution flip(0.5);
  for (double& s : p.sign) s = flip(rng) ? -1.0 : 1.0;
  return p;
}

inline VideoPtr permute_channels(const AnnotatedVideo& v, const ChannelPermutation& p) {
  if (p.source.size() != v.dim()) throw ShapeError("permute_channels: permutation of " + std::to_string(p.source.size()) + " channels applied to dim " + std::to_string(v.dim()));
  auto out = std::make_shared<AnnotatedVideo>(v);
  for (std::size_t t = 0; t < v.features.rows; ++t)
    for (std::size_t j = 0; j < p.source.size(); ++j) out->features(t, j) = p.sign[j] * v.features(t, p.source[j]);
  return out;
}

/// Re-expresses every video of an episode in one random signed channel basis.
/// Cosine scores and the Adam support fit are equivariant under this map.
inline Episode permute_episode(const Episode& ep, Rng& rng) {
  const ChannelPermutation p = random_channel_permutation(ep.query->dim(), rng);
  Episode out = ep;
  for (auto& v : out.support) v = permute_channels(*v, p);
  out.query = permute_channels(*ep.query, p);
  return out;
}

}  // namespace fsqat
