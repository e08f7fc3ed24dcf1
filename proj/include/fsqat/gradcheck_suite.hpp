#pragma once

// Gradient-check fixtures: random compositions of every tape primitive and a
// complete small episode (support fit loss, transformer, query loss).

#include <random>
#include <string>
#include <vector>

#include "fsqat/grad_check.hpp"
#include "fsqat/meta.hpp"

namespace fsqat {

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : m.data) v = u(rng);
  return m;
}

inline std::vector<std::uint8_t> random_mask(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  std::bernoulli_distribution b(0.5);
  for (auto& v : m) v = b(rng) ? 1 : 0;
  m[0] = 1;
  m[n - 1] = 0;
  return m;
}

}  // namespace detail

struct CompositionCase {
  std::vector<NamedMatrix> point;
  LossBuilder loss;
};

/// Random shapes and values; the loss touches every primitive.
inline CompositionCase random_composition(Rng& rng) {
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  const std::size_t n = dim(rng), c = dim(rng), k = dim(rng) + 1;
  // keeps the layer-norm input away from zero variance, where finite
  // differences stop being informative
  Matrix spread(1, k);
  for (std::size_t j = 0; j < k; ++j) spread.data[j] = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(k - 1);
  CompositionCase cc;
  cc.point = {{"a", detail::random_matrix(n, c, rng)},
              {"b", detail::random_matrix(c, k, rng)},
              {"gain", detail::random_matrix(1, k, rng, 0.5, 1.5)},
              {"bias", detail::random_matrix(1, k, rng, -0.5, 0.5)},
              {"w", detail::random_matrix(1, k, rng)}};
  const auto mask = detail::random_mask(n, rng);
  const Matrix keep = detail::random_matrix(n, k, rng, 0.0, 2.0);
  const double temp = std::uniform_real_distribution<double>(1.0, 4.0)(rng);
  cc.loss = [mask, keep, temp, spread](Tape& t, std::span<const Var> x) {
    Var h = layer_norm(add_row(matmul(x[0], x[1]), t.constant(spread)), x[2], x[3]);
    Var attn = row_softmax(scale(matmul_nt(h, h), 0.5));
    Var mixed = add_row(add(matmul(attn, h), transpose(transpose(h))), x[3]);
    Var p = sigmoid(scale(cosine_rows(mixed, x[4]), temp));
    Var ll = balanced_log_likelihood(p, mask, 1.0, false);
    const Var parts[] = {mixed, mul_const(h, keep)};
    return add(scale(ll, -0.5), scale(sum(concat_cols(parts)), 0.01));
  };
  return cc;
}

struct EpisodeCheckShape {
  std::size_t embed_dim = 8;
  std::size_t snippets = 6;
  std::size_t heads = 2;
  std::size_t latent_dim = 4;
  std::size_t k_shot = 1;
  double tau = 10.0;
  double eps = 1.0;
};

/// Support-fit loss as a function of phi.
inline CompositionCase support_loss_case(Rng& rng, const EpisodeCheckShape& s = {}) {
  CompositionCase cc;
  std::vector<Matrix> feats;
  std::vector<SnippetLabels> labels;
  for (std::size_t k = 0; k < s.k_shot; ++k) {
    feats.push_back(detail::random_matrix(s.snippets, s.embed_dim, rng));
    labels.push_back(labels_from_mask(detail::random_mask(s.snippets, rng)));
  }
  cc.point = {{"support.phi", detail::random_matrix(1, s.embed_dim, rng)}};
  cc.loss = [feats, labels, s](Tape& t, std::span<const Var> x) {
    std::vector<Var> scores;
    std::vector<const SnippetLabels*> lab;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      scores.push_back(classify_snippets(x[0], t.constant(feats[k]), s.tau));
      lab.push_back(&labels[k]);
    }
    return episode_ce(scores, lab, s.eps, Setting::untrimmed);
  };
  return cc;
}

/// Query loss through the transformer, as a function of phi* and every
/// transformer block.
inline CompositionCase query_loss_case(Rng& rng, const EpisodeCheckShape& s = {}) {
  QATParams p = random_qat_params(s.embed_dim, s.latent_dim, s.heads, 0.0, rng, 1.0);
  for (auto& [name, m] : p.blocks()) {
    if (name.rfind("ln", 0) == 0 && name.find("gain") != std::string::npos)
      m->data = detail::random_matrix(1, s.embed_dim, rng, 0.5, 1.5).data;
    else if (name.find("bias") != std::string::npos)
      m->data = detail::random_matrix(1, s.embed_dim, rng, -0.3, 0.3).data;
  }
  CompositionCase cc;
  cc.point.push_back({"query.phi_star", detail::random_matrix(1, s.embed_dim, rng)});
  for (const auto& [name, m] : p.blocks()) cc.point.push_back({name, *m});
  const Matrix query = detail::random_matrix(s.snippets, s.embed_dim, rng);
  const SnippetLabels labels = labels_from_mask(detail::random_mask(s.snippets, rng));
  const std::size_t heads = s.heads;
  const double tau = s.tau, eps = s.eps;
  cc.loss = [query, labels, heads, tau, eps](Tape& t, std::span<const Var> x) {
    QATVars vars = QATVars::bind(x.subspan(1), heads);
    Var q = t.constant(query);
    Var adapted = qat_forward(x[0], q, vars);
    Var p = classify_snippets(adapted, q, tau);
    const SnippetLabels* lab = &labels;
    return episode_ce(std::span<const Var>(&p, 1), std::span<const SnippetLabels* const>(&lab, 1), eps, Setting::untrimmed);
  };
  return cc;
}

/// Runs both halves of the episode check and merges them into one report.
inline GradCheckReport episode_grad_check(std::uint64_t seed, const GradCheckOptions& opt, const EpisodeCheckShape& s = {}) {
  Rng rng(seed);
  auto sup = support_loss_case(rng, s);
  auto qry = query_loss_case(rng, s);
  GradCheckReport a = grad_check(sup.loss, sup.point, opt);
  GradCheckReport b = grad_check(qry.loss, qry.point, opt);
  a.blocks.insert(a.blocks.end(), b.blocks.begin(), b.blocks.end());
  a.problems.insert(a.problems.end(), b.problems.begin(), b.problems.end());
  a.max_rel_error = std::max(a.max_rel_error, b.max_rel_error);
  a.passed = a.passed && b.passed;
  return a;
}

}  // namespace fsqat
