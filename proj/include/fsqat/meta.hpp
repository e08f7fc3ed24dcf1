#pragma once

#include <stdexcept>
#include <vector>

#include "fsqat/adam.hpp"
#include "fsqat/classifier.hpp"
#include "fsqat/qat.hpp"

namespace fsqat {

/// Query-video loss after transformer adaptation. phi_star enters as a
/// constant: no gradient flows back into the support-set fit.
inline Var query_loss(Tape& tape, const ClassifierWeights& phi_star, const Matrix& query_features, const SnippetLabels& query_labels,
                      const QATVars& params, double eps, const DropoutMasks* dropout = nullptr) {
  Var phi = tape.constant(phi_star.phi);
  Var x = tape.constant(query_features);
  Var adapted = qat_forward(phi, x, params, dropout);
  Var p = classify_snippets(adapted, x, phi_star.tau);
  const SnippetLabels* lab = &query_labels;
  return episode_ce(std::span<const Var>(&p, 1), std::span<const SnippetLabels* const>(&lab, 1), eps, Setting::untrimmed);
}

/// Support fit shared by training and inference: mean-foreground init, then
/// the inner Adam loop.
inline AdaptResult fit_support(const Episode& episode, const AdaptConfig& cfg, double tau) {
  AdaptConfig c = cfg;
  c.setting = episode.setting;
  const auto views = episode.support_views();
  return adapt_classifier(init_from_support(views, tau), views, c);
}

struct MetaStepResult {
  double loss = 0.0;
};

/// One transformer update from a precomputed phi_star. Forward, a single
/// backward pass, one optimizer step on the transformer parameters.
inline MetaStepResult meta_step(QATParams& params, Adam& optimizer, const ClassifierWeights& phi_star, const Matrix& query_features,
                                const SnippetLabels& query_labels, double eps, Rng* dropout_rng) {
  params.validate();
  Tape tape;
  QATVars vars = QATVars::record(tape, params, true);
  DropoutMasks masks;
  const DropoutMasks* drop = nullptr;
  if (dropout_rng && params.dropout > 0.0) {
    masks = DropoutMasks::sample(params.embed_dim(), params.dropout, *dropout_rng);
    drop = &masks;
  }
  Var loss = query_loss(tape, phi_star, query_features, query_labels, vars, eps, drop);
  const double lv = tape.value(loss).data[0];
  if (!std::isfinite(lv)) throw NumericalError("meta_step: non-finite query loss");
  tape.backward(loss);

  auto blocks = params.blocks();
  std::vector<Matrix> grads;
  std::vector<Matrix*> ps;
  std::vector<const Matrix*> gs;
  grads.reserve(blocks.size());
  std::size_t i = 0;
  auto add_grad = [&](Var v) { grads.push_back(tape.grad(v)); };
  for (std::size_t h = 0; h < vars.query.size(); ++h) {
    add_grad(vars.query[h]);
    add_grad(vars.key[h]);
    add_grad(vars.value[h]);
  }
  for (Var v : {vars.out_proj, vars.fc_weight, vars.fc_bias, vars.ln1_gain, vars.ln1_bias, vars.ln2_gain, vars.ln2_bias}) add_grad(v);
  for (auto& [_, m] : blocks) {
    ps.push_back(m);
    gs.push_back(&grads[i++]);
  }
  optimizer.step(ps, gs);
  return {lv};
}

/// Full training step on an episode whose query is labeled.
inline MetaStepResult meta_step(QATParams& params, Adam& optimizer, const Episode& episode, const AdaptConfig& cfg, double tau,
                                Rng* dropout_rng) {
  if (!episode.query_labeled())
    throw std::invalid_argument("meta_step: query video carries no '" + episode.label + "' labels; meta-training needs them");
  const AdaptResult fit = fit_support(episode, cfg, tau);
  const SnippetLabels labels = rasterize_labels(*episode.query, episode.label);
  return meta_step(params, optimizer, fit.weights, episode.query->features, labels, cfg.epsilon, dropout_rng);
}

}  // namespace fsqat
