#pragma once

// Inference for one episode: support fit, optional query adaptation, snippet
// scoring, candidate generation and AP against the query ground truth.

#include <optional>
#include <vector>

#include "fsqat/meta.hpp"
#include "fsqat/metrics.hpp"

namespace fsqat {

/// An episode together with its support-fitted classifier. phi_star does not
/// depend on the transformer, so it can be computed once and reused.
struct PreparedEpisode {
  std::size_t id = 0;
  Episode episode;
  ClassifierWeights phi_star;
};

inline PreparedEpisode prepare_episode(std::size_t id, Episode episode, const AdaptConfig& cfg, double tau) {
  ClassifierWeights w = fit_support(episode, cfg, tau).weights;
  return {id, std::move(episode), std::move(w)};
}

/// Classifier used on the query: phi** with a transformer, phi* without.
inline ClassifierWeights query_classifier(const PreparedEpisode& ep, const QATParams* params) {
  if (!params) return ep.phi_star;
  return qat_adapt(ep.phi_star, ep.episode.query->features, *params);
}

inline EpisodeResult run_episode(const PreparedEpisode& ep, const QATParams* params, const EvalConfig& cfg) {
  const AnnotatedVideo& q = *ep.episode.query;
  const Matrix scores = classify_snippets(query_classifier(ep, params), q.features);
  EpisodeResult r;
  r.episode_id = ep.id;
  r.label = ep.episode.label;
  r.query_id = q.id;
  r.candidates = localize(scores, q.duration, cfg);
  r.ap = score_episode(r.candidates, ep.episode.query_ground_truth(), cfg.tiou_grid);
  return r;
}

}  // namespace fsqat
