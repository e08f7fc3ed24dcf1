#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "fsqat/localize.hpp"

namespace fsqat {

/// Detection AP at one tIoU threshold. Predictions are ranked by score (earlier
/// start on ties); each prediction claims the best-overlapping unmatched ground
/// truth with tIoU >= threshold. Precision is interpolated with its
/// right-running maximum. Returns nullopt when there is no ground truth.
inline std::optional<double> average_precision(std::vector<Candidate> preds, const std::vector<Segment>& gts, double threshold) {
  if (gts.empty()) return std::nullopt;
  std::stable_sort(preds.begin(), preds.end(), detail::ranks_before);

  std::vector<bool> used(gts.size(), false);
  std::vector<double> precision, recall;
  double tp = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double best = -1.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double o = tiou(preds[i], gts[j]);
      if (o >= threshold && o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best_j < gts.size()) {
      used[best_j] = true;
      tp += 1.0;
    }
    precision.push_back(tp / static_cast<double>(i + 1));
    recall.push_back(tp / static_cast<double>(gts.size()));
  }

  // envelope over [0, recall..., 1]
  std::vector<double> mprec{0.0}, mrec{0.0};
  mprec.insert(mprec.end(), precision.begin(), precision.end());
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mprec.push_back(0.0);
  mrec.push_back(1.0);
  for (std::size_t i = mprec.size() - 1; i-- > 0;) mprec[i] = std::max(mprec[i], mprec[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i)
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mprec[i];
  return ap;
}

struct EpisodeResult {
  std::size_t episode_id = 0;
  std::string label;
  std::string query_id;
  std::vector<Candidate> candidates;
  std::optional<std::vector<double>> ap;  // one per tIoU threshold; empty when no ground truth
};

inline std::optional<std::vector<double>> score_episode(const std::vector<Candidate>& preds, const std::vector<Segment>& gts,
                                                        const std::vector<double>& grid) {
  if (gts.empty()) return std::nullopt;
  std::vector<double> ap;
  for (double th : grid) ap.push_back(*average_precision(preds, gts, th));
  return ap;
}

struct MapReport {
  std::vector<double> thresholds;
  std::vector<double> map;  // per threshold
  double mean = 0.0;
  std::size_t episodes = 0;
  std::size_t excluded = 0;
};

/// Mean AP over episodes per threshold, plus the mean over thresholds.
/// Episodes without ground truth are excluded and counted.
inline MapReport map_report(const std::vector<EpisodeResult>& results, const std::vector<double>& grid) {
  MapReport r;
  r.thresholds = grid;
  r.map.assign(grid.size(), 0.0);
  for (const auto& e : results) {
    if (!e.ap) {
      ++r.excluded;
      continue;
    }
    for (std::size_t i = 0; i < grid.size(); ++i) r.map[i] += (*e.ap)[i];
    ++r.episodes;
  }
  if (r.excluded)
    std::fprintf(stderr, "map_report: %zu episode(s) without ground truth excluded from averaging\n", r.excluded);
  if (r.episodes == 0) return r;
  for (double& m : r.map) m /= static_cast<double>(r.episodes);
  for (double m : r.map) r.mean += m;
  r.mean /= static_cast<double>(r.map.size());
  return r;
}

inline std::string format_threshold(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

/// CSV with the header map@<t>...,mean and one data row.
inline std::string map_report_csv(const MapReport& r) {
  std::string head, row;
  char buf[64];
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    head += "map@" + format_threshold(r.thresholds[i]) + ",";
    std::snprintf(buf, sizeof buf, "%.6f,", r.map[i]);
    row += buf;
  }
  std::snprintf(buf, sizeof buf, "%.6f", r.mean);
  return head + "mean\n" + row + buf + "\n";
}

}  // namespace fsqat
