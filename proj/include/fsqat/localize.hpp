#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fsqat/data.hpp"
#include "fsqat/matrix.hpp"

namespace fsqat {

struct Candidate {
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct EvalConfig {
  double snippet_threshold = 0.5;
  double nms_threshold = 0.7;
  double nms_sigma = 0.5;
  std::size_t top_n = 100;
  std::vector<double> tiou_grid{0.5, 0.6, 0.7, 0.8, 0.9};

  void validate() const {
    auto unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!unit(snippet_threshold)) throw std::invalid_argument("eval: snippet threshold must lie in (0,1)");
    if (!unit(nms_threshold)) throw std::invalid_argument("eval: NMS threshold must lie in (0,1)");
    if (!(nms_sigma > 0.0)) throw std::invalid_argument("eval: NMS sigma must be positive");
    if (top_n < 1) throw std::invalid_argument("eval: top-N must be >= 1");
    if (tiou_grid.empty()) throw std::invalid_argument("eval: empty tIoU grid");
    for (double t : tiou_grid)
      if (!unit(t)) throw std::invalid_argument("eval: tIoU thresholds must lie in (0,1)");
  }
};

/// Temporal IoU of [a0,a1) and [b0,b1).
inline double tiou(double a0, double a1, double b0, double b1) {
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = std::max(a1, b1) - std::min(a0, b0);
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double tiou(const Candidate& a, const Candidate& b) { return tiou(a.start, a.end, b.start, b.end); }
inline double tiou(const Candidate& a, const Segment& b) { return tiou(a.start, a.end, b.start, b.end); }

/// Maximal runs of snippets with p >= threshold, mapped linearly to seconds.
/// Each run scores the highest probability inside it.
inline std::vector<Candidate> decode_segments(std::span<const double> scores, double duration, double threshold) {
  std::vector<Candidate> out;
  const std::size_t T = scores.size();
  std::size_t t = 0;
  while (t < T) {
    if (scores[t] < threshold) {
      ++t;
      continue;
    }
    std::size_t e = t;
    double best = scores[t];
    while (e < T && scores[e] >= threshold) best = std::max(best, scores[e++]);
    out.push_back({snippet_edge(t, duration, T), snippet_edge(e, duration, T), best});
    t = e;
  }
  return out;
}

inline std::vector<Candidate> decode_segments(const Matrix& scores, double duration, double threshold) {
  return decode_segments(std::span<const double>(scores.data), duration, threshold);
}

namespace detail {
// Higher score first; earlier start breaks ties.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.start < b.start;
}
}  // namespace detail

/// Gaussian soft-NMS. Repeatedly keeps the best remaining candidate and decays
/// each other remaining score by exp(-tiou^2 / sigma). Boundaries never move.
/// Survivors are returned in selection order; those below `cutoff` are dropped.
inline std::vector<Candidate> soft_nms(std::vector<Candidate> cands, double sigma, double cutoff) {
  std::vector<Candidate> kept;
  kept.reserve(cands.size());
  while (!cands.empty()) {
    auto best = cands.begin();
    for (auto it = cands.begin() + 1; it != cands.end(); ++it)
      if (detail::ranks_before(*it, *best)) best = it;
    const Candidate pick = *best;
    cands.erase(best);
    kept.push_back(pick);
    for (auto& c : cands) {
      const double iou = tiou(pick, c);
      c.score *= std::exp(-(iou * iou) / sigma);
    }
  }
  std::erase_if(kept, [cutoff](const Candidate& c) { return c.score < cutoff; });
  return kept;
}

/// Highest-scoring n candidates, best first.
inline std::vector<Candidate> top_n(std::vector<Candidate> cands, std::size_t n) {
  std::stable_sort(cands.begin(), cands.end(), detail::ranks_before);
  if (cands.size() > n) cands.resize(n);
  return cands;
}

/// Threshold, soft-NMS, top-N.
inline std::vector<Candidate> localize(const Matrix& scores, double duration, const EvalConfig& cfg) {
  return top_n(soft_nms(decode_segments(scores, duration, cfg.snippet_threshold), cfg.nms_sigma, cfg.nms_threshold), cfg.top_n);
}

}  // namespace fsqat
