#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records primitive applications in creation order, which is also a
// topological order. backward() walks the tape once in reverse and fills the
// gradient slot of every node that depends on a leaf.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fsqat/matrix.hpp"

namespace fsqat {

inline constexpr double kCosineStabilizer = 1e-8;
inline constexpr double kLayerNormStabilizer = 1e-5;
inline constexpr double kProbabilityClamp = 1e-7;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  /// Receives the upstream gradient and one output slot per input. A slot is
  /// null when that input does not lead to any leaf.
  using BackwardFn = std::function<void(const Tape&, const Matrix& grad_out, std::span<Matrix* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) { return push(std::move(value), {}, nullptr, true); }
  Var constant(Matrix value) { return push(std::move(value), {}, nullptr, false); }

  /// Records a custom primitive. Used by the built-in ops and by tests that
  /// need a deliberately wrong rule.
  Var record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto i : inputs) {
      check_id(i);
      needs = needs || nodes_[i].needs_grad;
    }
    return push(std::move(value), std::move(inputs), std::move(backward), needs);
  }

  const Matrix& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  const Matrix& grad(Var v) const {
    check(v);
    if (!backward_done_) throw std::logic_error("gradient requested before backward()");
    return nodes_[v.id].grad;
  }

  const Matrix& value_at(std::size_t id) const {
    check_id(id);
    return nodes_[id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].needs_grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss node belongs to another tape");
    check(loss);
    if (backward_done_) throw std::logic_error("backward: tape already differentiated; rebuild the forward pass");
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows != 1 || lv.cols != 1) throw ShapeError("backward: loss must be 1x1, got " + lv.shape());

    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Matrix(n.value.rows, n.value.cols);
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad.data[0] = 1.0;

    std::vector<Matrix*> slots;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward) continue;
      slots.clear();
      for (auto in : n.inputs) slots.push_back(nodes_[in].needs_grad ? &nodes_[in].grad : nullptr);
      n.backward(*this, n.grad, slots);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var push(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs) {
    if (backward_done_) throw std::logic_error("tape: cannot record after backward()");
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(inputs), std::move(fn), needs});
    return Var{this, nodes_.size() - 1};
  }

  void check_id(std::size_t id) const {
    if (id >= nodes_.size()) throw std::invalid_argument("tape: unknown node id " + std::to_string(id));
  }
  void check(Var v) const {
    if (v.tape != this) throw std::invalid_argument("tape: node belongs to another tape");
    check_id(v.id);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

inline double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  Matrix out = dense::matmul(t.value(a), t.value(b));
  return t.record(std::move(out), {a.id, b.id}, [a, b](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) dense::add_inplace(*gi[0], dense::matmul_nt(g, tp.value(b)));
    if (gi[1]) dense::add_inplace(*gi[1], dense::matmul_tn(tp.value(a), g));
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul_nt");
  Matrix out = dense::matmul_nt(t.value(a), t.value(b));
  return t.record(std::move(out), {a.id, b.id}, [a, b](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) dense::add_inplace(*gi[0], dense::matmul(g, tp.value(b)));
    if (gi[1]) dense::add_inplace(*gi[1], dense::matmul_tn(g, tp.value(a)));
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.record(dense::transpose(t.value(a)), {a.id}, [](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) dense::add_inplace(*gi[0], dense::transpose(g));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (!av.same_shape(bv)) throw ShapeError("add: " + av.shape() + " + " + bv.shape());
  Matrix out = av;
  dense::add_inplace(out, bv);
  return t.record(std::move(out), {a.id, b.id}, [](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) dense::add_inplace(*gi[0], g);
    if (gi[1]) dense::add_inplace(*gi[1], g);
  });
}

/// Adds a 1xC row to every row of a.
inline Var add_row(Var a, Var row) {
  Tape& t = detail::same_tape(a, row, "add_row");
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  if (rv.rows != 1 || rv.cols != av.cols) throw ShapeError("add_row: " + av.shape() + " + row " + rv.shape());
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += rv(0, j);
  return t.record(std::move(out), {a.id, row.id}, [](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) dense::add_inplace(*gi[0], g);
    if (gi[1])
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) (*gi[1])(0, j) += g(i, j);
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = t.value(a);
  for (double& v : out.data) v *= s;
  return t.record(std::move(out), {a.id}, [s](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += s * g.data[i];
  });
}

/// Elementwise product with a fixed matrix (dropout masks, label weights).
inline Var mul_const(Var a, Matrix k) {
  Tape& t = *a.tape;
  const Matrix& av = t.value(a);
  if (!av.same_shape(k)) throw ShapeError("mul_const: " + av.shape() + " .* " + k.shape());
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= k.data[i];
  return t.record(std::move(out), {a.id}, [k = std::move(k)](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += k.data[i] * g.data[i];
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).data) s += v;
  Matrix out(1, 1, s);
  return t.record(std::move(out), {a.id}, [](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (double& v : gi[0]->data) v += g.data[0];
  });
}

/// Horizontal concatenation of equal-height blocks.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t rows = t.value(parts[0]).rows;
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (Var p : parts) {
    detail::same_tape(parts[0], p, "concat_cols");
    const Matrix& v = t.value(p);
    if (v.rows != rows) throw ShapeError("concat_cols: row mismatch " + std::to_string(rows) + " vs " + v.shape());
    ids.push_back(p.id);
    widths.push_back(v.cols);
    cols += v.cols;
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& v = t.value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols; ++j) out(i, off + j) = v(i, j);
    off += v.cols;
  }
  return t.record(std::move(out), std::move(ids), [widths](const Tape&, const Matrix& g, std::span<Matrix* const> gi) {
    std::size_t o = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (gi[p])
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) (*gi[p])(i, j) += g(i, o + j);
      o += widths[p];
    }
  });
}

/// Softmax along each row, with per-row max subtraction.
inline Matrix row_softmax(const Matrix& a) {
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (double& v : o) v /= z;
  }
  return out;
}

inline Var row_softmax(Var a) {
  Tape& t = *a.tape;
  Matrix out = row_softmax(t.value(a));
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.id}, [self](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Matrix& y = tp.value_at(self);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) s += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) (*gi[0])(i, j) += y(i, j) * (g(i, j) - s);
    }
  });
}

/// Per-row normalization with population variance, then a 1xC gain and bias.
inline Matrix layer_norm(const Matrix& a, const Matrix& gain, const Matrix& bias) {
  if (gain.size() != a.cols || bias.size() != a.cols)
    throw ShapeError("layer_norm: input " + a.shape() + " gain " + gain.shape() + " bias " + bias.shape());
  Matrix out(a.rows, a.cols);
  const double n = static_cast<double>(a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto x = a.row(i);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormStabilizer);
    for (std::size_t j = 0; j < a.cols; ++j) out(i, j) = gain.data[j] * ((x[j] - mean) * inv) + bias.data[j];
  }
  return out;
}

inline Var layer_norm(Var a, Var gain, Var bias) {
  Tape& t = detail::same_tape(a, gain, "layer_norm");
  detail::same_tape(a, bias, "layer_norm");
  Matrix out = layer_norm(t.value(a), t.value(gain), t.value(bias));
  return t.record(std::move(out), {a.id, gain.id, bias.id},
                  [a, gain](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
                    const Matrix& x = tp.value(a);
                    const Matrix& gm = tp.value(gain);
                    const std::size_t c = x.cols;
                    const double n = static_cast<double>(c);
                    std::vector<double> xhat(c), dxhat(c);
                    for (std::size_t i = 0; i < x.rows; ++i) {
                      auto xr = x.row(i);
                      double mean = 0.0;
                      for (double v : xr) mean += v;
                      mean /= n;
                      double var = 0.0;
                      for (double v : xr) var += (v - mean) * (v - mean);
                      var /= n;
                      const double inv = 1.0 / std::sqrt(var + kLayerNormStabilizer);
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = g(i, j) * gm.data[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                      }
                      if (gi[0])
                        for (std::size_t j = 0; j < c; ++j) (*gi[0])(i, j) += inv / n * (n * dxhat[j] - s1 - xhat[j] * s2);
                      if (gi[1])
                        for (std::size_t j = 0; j < c; ++j) gi[1]->data[j] += g(i, j) * xhat[j];
                      if (gi[2])
                        for (std::size_t j = 0; j < c; ++j) gi[2]->data[j] += g(i, j);
                    }
                  });
}

/// Logistic function, clamped into [1e-7, 1 - 1e-7] so downstream logs stay finite.
inline double sigmoid(double x) {
  const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return detail::clamp_probability(s);
}

inline Matrix sigmoid(const Matrix& a) {
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = sigmoid(a.data[i]);
  return out;
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Matrix out = sigmoid(t.value(a));
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.id}, [self](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Matrix& y = tp.value_at(self);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double s = y.data[i];
      // flat where the clamp is active
      if (s <= kProbabilityClamp || s >= 1.0 - kProbabilityClamp) continue;
      gi[0]->data[i] += g.data[i] * s * (1.0 - s);
    }
  });
}

/// Cosine similarity of every row of a against the single row w. Result is Tx1.
inline Matrix cosine_rows(const Matrix& a, const Matrix& w) {
  if (w.rows != 1 || w.cols != a.cols) throw ShapeError("cosine_rows: rows " + a.shape() + " vs weight " + w.shape());
  Matrix out(a.rows, 1);
  const double nw = dense::norm(w.row(0));
  for (std::size_t i = 0; i < a.rows; ++i)
    out(i, 0) = dense::dot(a.row(i), w.row(0)) / (dense::norm(a.row(i)) * nw + kCosineStabilizer);
  return out;
}

inline Var cosine_rows(Var a, Var w) {
  Tape& t = detail::same_tape(a, w, "cosine_rows");
  Matrix out = cosine_rows(t.value(a), t.value(w));
  return t.record(std::move(out), {a.id, w.id}, [a, w](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
    const Matrix& x = tp.value(a);
    const Matrix& wv = tp.value(w);
    const std::size_t c = x.cols;
    const double nw = dense::norm(wv.row(0));
    for (std::size_t i = 0; i < x.rows; ++i) {
      auto xr = x.row(i);
      const double na = dense::norm(xr);
      const double num = dense::dot(xr, wv.row(0));
      const double den = na * nw + kCosineStabilizer;
      const double gd = g(i, 0);
      if (gd == 0.0) continue;
      // d/dx (num/den) = w/den - num/den^2 * d(den)
      const double k = num / (den * den);
      if (gi[0]) {
        const double ka = na > 0.0 ? k * nw / na : 0.0;
        for (std::size_t j = 0; j < c; ++j) (*gi[0])(i, j) += gd * (wv.data[j] / den - ka * xr[j]);
      }
      if (gi[1]) {
        const double kw = nw > 0.0 ? k * na / nw : 0.0;
        for (std::size_t j = 0; j < c; ++j) gi[1]->data[j] += gd * (xr[j] / den - kw * wv.data[j]);
      }
    }
  });
}

/// Class-balanced log-likelihood of one video's snippet probabilities p (Tx1):
///   w_fg * sum_t y_t log p_t + w_bg * sum_t (1 - y_t) log(1 - p_t)
/// with w_fg = (l_fg + l_bg) / (eps + l_fg) and w_bg = (l_fg + l_bg) / (eps + l_bg).
/// The background term is dropped when `drop_background` is set. Result is 1x1
/// and nonpositive.
struct BalancedWeights {
  double fg = 0.0;
  double bg = 0.0;
};

inline BalancedWeights balanced_weights(std::span<const std::uint8_t> mask, double eps) {
  double nfg = 0.0;
  for (auto m : mask) nfg += m ? 1.0 : 0.0;
  const double total = static_cast<double>(mask.size());
  const double nbg = total - nfg;
  return {total / (eps + nfg), total / (eps + nbg)};
}

inline double balanced_log_likelihood(const Matrix& p, std::span<const std::uint8_t> mask, double eps, bool drop_background) {
  if (p.cols != 1 || p.rows != mask.size())
    throw ShapeError("balanced_log_likelihood: scores " + p.shape() + " vs mask length " + std::to_string(mask.size()));
  const auto w = balanced_weights(mask, eps);
  double fg = 0.0, bg = 0.0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    const double q = detail::clamp_probability(p.data[t]);
    if (mask[t])
      fg += std::log(q);
    else
      bg += std::log(1.0 - q);
  }
  return w.fg * fg + (drop_background ? 0.0 : w.bg * bg);
}

inline Var balanced_log_likelihood(Var p, std::vector<std::uint8_t> mask, double eps, bool drop_background) {
  Tape& t = *p.tape;
  const double v = balanced_log_likelihood(t.value(p), mask, eps, drop_background);
  return t.record(Matrix(1, 1, v), {p.id},
                  [p, mask = std::move(mask), eps, drop_background](const Tape& tp, const Matrix& g, std::span<Matrix* const> gi) {
                    if (!gi[0]) return;
                    const Matrix& pv = tp.value(p);
                    const auto w = balanced_weights(mask, eps);
                    for (std::size_t i = 0; i < mask.size(); ++i) {
                      const double q = pv.data[i];
                      if (q <= kProbabilityClamp || q >= 1.0 - kProbabilityClamp) continue;
                      if (mask[i])
                        gi[0]->data[i] += g.data[0] * w.fg / q;
                      else if (!drop_background)
                        gi[0]->data[i] -= g.data[0] * w.bg / (1.0 - q);
                    }
                  });
}

}  // namespace fsqat
