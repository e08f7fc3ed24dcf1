#pragma once

// Task-specific foreground/background snippet classifier:
//   p(t) = sigmoid(tau * cos(x_t, phi))
// initialized from the support foreground mean and fitted on the support set
// with the class-balanced cross entropy.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsqat/adam.hpp"
#include "fsqat/autodiff.hpp"
#include "fsqat/data.hpp"

namespace fsqat {

struct ClassifierWeights {
  Matrix phi;  // 1 x C
  double tau = 10.0;

  std::size_t dim() const { return phi.cols; }
};

struct AdaptConfig {
  int iterations = 100;
  double learning_rate = 0.004;
  double epsilon = 1.0;
  Setting setting = Setting::untrimmed;

  void validate() const {
    if (iterations < 0) throw std::invalid_argument("adapt: iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adapt: learning rate must be > 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adapt: epsilon must be > 0");
  }
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean of every foreground snippet embedding across the support set.
inline ClassifierWeights init_from_support(std::span<const LabeledSnippets> support, double tau = 10.0) {
  if (support.empty()) throw std::invalid_argument("init_from_support: empty support set");
  const std::size_t C = support.front().features.cols;
  Matrix phi(1, C);
  std::size_t count = 0;
  for (const auto& s : support) {
    if (s.features.cols != C) throw ShapeError("init_from_support: embedding dim " + std::to_string(s.features.cols) + " vs " + std::to_string(C));
    for (std::size_t t = 0; t < s.labels.fg.size(); ++t) {
      if (!s.labels.fg[t]) continue;
      for (std::size_t j = 0; j < C; ++j) phi.data[j] += s.features(t, j);
      ++count;
    }
  }
  if (count == 0) throw DataError("init_from_support: no foreground snippet in the support set; class is unrepresentable");
  for (double& v : phi.data) v /= static_cast<double>(count);
  return {std::move(phi), tau};
}

/// Foreground probability per snippet, as a T x 1 matrix.
inline Matrix classify_snippets(const ClassifierWeights& w, const Matrix& features) {
  Matrix cos = cosine_rows(features, w.phi);
  for (double& v : cos.data) v *= w.tau;
  return sigmoid(cos);
}

inline Var classify_snippets(Var phi, Var features, double tau) { return sigmoid(scale(cosine_rows(features, phi), tau)); }

/// Single-video balanced cross entropy: -(1/2)(L_fg + L_bg). Trimmed drops L_bg.
inline double balanced_ce(const Matrix& scores, const SnippetLabels& labels, double eps, Setting setting) {
  return -0.5 * balanced_log_likelihood(scores, labels.fg, eps, setting == Setting::trimmed);
}

/// -(1/2K) * sum_k (L_fg + L_bg) over K per-video score columns.
inline Var episode_ce(std::span<const Var> scores, std::span<const SnippetLabels* const> labels, double eps, Setting setting) {
  if (scores.empty() || scores.size() != labels.size()) throw std::invalid_argument("episode_ce: need one label set per video");
  Var total = balanced_log_likelihood(scores[0], labels[0]->fg, eps, setting == Setting::trimmed);
  for (std::size_t k = 1; k < scores.size(); ++k)
    total = add(total, balanced_log_likelihood(scores[k], labels[k]->fg, eps, setting == Setting::trimmed));
  return scale(total, -1.0 / (2.0 * static_cast<double>(scores.size())));
}

struct AdaptResult {
  ClassifierWeights weights;
  // Support loss before every update, followed by the loss after the last one.
  std::vector<double> loss_trace;
};

/// Fits phi on the support set with Adam; tau stays fixed.
inline AdaptResult adapt_classifier(const ClassifierWeights& init, std::span<const LabeledSnippets> support, const AdaptConfig& cfg) {
  cfg.validate();
  if (support.empty()) throw std::invalid_argument("adapt_classifier: empty support set");
  AdaptResult out{init, {}};
  out.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations) + 1);
  Adam opt(cfg.learning_rate);

  std::vector<const SnippetLabels*> labels;
  for (const auto& s : support) labels.push_back(&s.labels);

  for (int it = 0; it <= cfg.iterations; ++it) {
    Tape tape;
    Var phi = tape.leaf(out.weights.phi);
    std::vector<Var> scores;
    for (const auto& s : support) scores.push_back(classify_snippets(phi, tape.constant(s.features), init.tau));
    Var loss = episode_ce(scores, labels, cfg.epsilon, cfg.setting);
    const double lv = tape.value(loss).data[0];
    if (!std::isfinite(lv)) throw NumericalError("adapt_classifier: non-finite support loss at iteration " + std::to_string(it));
    out.loss_trace.push_back(lv);
    if (it == cfg.iterations) break;
    tape.backward(loss);
    Matrix grad = tape.grad(phi);
    Matrix* p = &out.weights.phi;
    const Matrix* g = &grad;
    opt.step(std::span<Matrix* const>(&p, 1), std::span<const Matrix* const>(&g, 1));
  }
  return out;
}

}  // namespace fsqat
