#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "fsqat/matrix.hpp"

namespace fsqat {

/// Adam with bias correction. Moment buffers are sized on the first step and
/// must keep matching the parameter list afterwards.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      Matrix& p = *params[b];
      const Matrix& g = *grads[b];
      if (!p.same_shape(g) || !p.same_shape(m_[b])) throw ShapeError("adam: block " + p.shape() + " vs grad " + g.shape());
      for (std::size_t i = 0; i < p.size(); ++i) {
        double& m = m_[b].data[i];
        double& v = v_[b].data[i];
        m = beta1_ * m + (1.0 - beta1_) * g.data[i];
        v = beta2_ * v + (1.0 - beta2_) * g.data[i] * g.data[i];
        p.data[i] -= lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
      }
    }
  }

  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace fsqat
