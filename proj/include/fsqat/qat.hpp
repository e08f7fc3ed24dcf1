#pragma once

// Query-adaptive transformer: a single pre-LN block whose only query token is
// the classifier weight row and whose keys/values are the query video's
// snippets.
//
//   u   = LN1(phi)             X' = LN1(X)
//   A_i = softmax(u Wq_i (X' Wk_i)^T / sqrt(d_h)) (X' Wv_i)
//   z   = phi + [A_1 | ... | A_m] Wo
//   out = z + (LN2(z) Wfc + b_fc)

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fsqat/autodiff.hpp"
#include "fsqat/classifier.hpp"
#include "fsqat/rng.hpp"

namespace fsqat {

struct QATHead {
  Matrix query;  // C x d_h
  Matrix key;    // C x d_h
  Matrix value;  // C x d_h
};

struct QATParams {
  std::vector<QATHead> heads;
  Matrix out_proj;   // d x C
  Matrix fc_weight;  // C x C
  Matrix fc_bias;    // 1 x C
  Matrix ln1_gain, ln1_bias;
  Matrix ln2_gain, ln2_bias;
  double dropout = 0.1;

  std::size_t embed_dim() const { return fc_weight.rows; }
  std::size_t num_heads() const { return heads.size(); }
  std::size_t head_dim() const { return heads.empty() ? 0 : heads.front().query.cols; }
  std::size_t latent_dim() const { return num_heads() * head_dim(); }

  /// Every learnable block, in a fixed order shared by the optimizer, the
  /// gradient checker and the checkpoint format.
  std::vector<std::pair<std::string, Matrix*>> blocks() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string p = "head" + std::to_string(i) + ".";
      out.emplace_back(p + "query", &heads[i].query);
      out.emplace_back(p + "key", &heads[i].key);
      out.emplace_back(p + "value", &heads[i].value);
    }
    out.emplace_back("out_proj", &out_proj);
    out.emplace_back("fc.weight", &fc_weight);
    out.emplace_back("fc.bias", &fc_bias);
    out.emplace_back("ln1.gain", &ln1_gain);
    out.emplace_back("ln1.bias", &ln1_bias);
    out.emplace_back("ln2.gain", &ln2_gain);
    out.emplace_back("ln2.bias", &ln2_bias);
    return out;
  }

  std::vector<std::pair<std::string, const Matrix*>> blocks() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [n, m] : const_cast<QATParams*>(this)->blocks()) out.emplace_back(n, m);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : blocks()) n += m->size();
    return n;
  }

  void validate() const {
    const std::size_t C = embed_dim();
    if (heads.empty()) throw ShapeError("qat: at least one head required");
    const std::size_t dh = head_dim();
    for (const auto& h : heads)
      for (const Matrix* m : {&h.query, &h.key, &h.value})
        if (m->rows != C || m->cols != dh) throw ShapeError("qat: head projection " + m->shape() + ", expected " + std::to_string(C) + "x" + std::to_string(dh));
    if (out_proj.rows != latent_dim() || out_proj.cols != C) throw ShapeError("qat: out_proj " + out_proj.shape());
    if (fc_weight.rows != C || fc_weight.cols != C) throw ShapeError("qat: fc.weight " + fc_weight.shape());
    for (const Matrix* m : {&fc_bias, &ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias})
      if (m->rows != 1 || m->cols != C) throw ShapeError("qat: row parameter " + m->shape() + ", expected 1x" + std::to_string(C));
  }

  friend bool operator==(const QATParams& a, const QATParams& b) {
    if (a.heads.size() != b.heads.size() || a.dropout != b.dropout) return false;
    auto ab = a.blocks();
    auto bb = b.blocks();
    for (std::size_t i = 0; i < ab.size(); ++i)
      if (!(*ab[i].second == *bb[i].second)) return false;
    return true;
  }
};

inline void check_head_split(std::size_t latent_dim, std::size_t num_heads) {
  if (num_heads == 0 || latent_dim % num_heads != 0)
    throw ShapeError("qat: latent dim " + std::to_string(latent_dim) + " not divisible by " + std::to_string(num_heads) + " heads");
}

/// All-zero parameters, layer-norm gains included.
inline QATParams zero_qat_params(std::size_t embed_dim, std::size_t latent_dim, std::size_t num_heads, double dropout = 0.1) {
  check_head_split(latent_dim, num_heads);
  const std::size_t dh = latent_dim / num_heads;
  QATParams p;
  p.heads.assign(num_heads, QATHead{Matrix(embed_dim, dh), Matrix(embed_dim, dh), Matrix(embed_dim, dh)});
  p.out_proj = Matrix(latent_dim, embed_dim);
  p.fc_weight = Matrix(embed_dim, embed_dim);
  p.fc_bias = Matrix(1, embed_dim);
  p.ln1_gain = Matrix(1, embed_dim);
  p.ln1_bias = Matrix(1, embed_dim);
  p.ln2_gain = Matrix(1, embed_dim);
  p.ln2_bias = Matrix(1, embed_dim);
  p.dropout = dropout;
  return p;
}

/// Xavier-uniform projections, unit layer-norm gains, zero biases. The two
/// residual branches (out_proj, fc) start at `residual_scale` of Xavier so the
/// block begins close to the identity.
inline QATParams random_qat_params(std::size_t embed_dim, std::size_t latent_dim, std::size_t num_heads, double dropout, Rng& rng,
                                   double residual_scale = 0.1) {
  QATParams p = zero_qat_params(embed_dim, latent_dim, num_heads, dropout);
  auto xavier = [&](Matrix& m, double s) {
    const double bound = s * std::sqrt(6.0 / static_cast<double>(m.rows + m.cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : m.data) v = u(rng);
  };
  for (auto& h : p.heads) {
    xavier(h.query, 1.0);
    xavier(h.key, 1.0);
    xavier(h.value, 1.0);
  }
  xavier(p.out_proj, residual_scale);
  xavier(p.fc_weight, residual_scale);
  for (double& v : p.ln1_gain.data) v = 1.0;
  for (double& v : p.ln2_gain.data) v = 1.0;
  return p;
}

/// Tape leaves (or constants) mirroring QATParams::blocks() order.
struct QATVars {
  std::vector<Var> query, key, value;
  Var out_proj, fc_weight, fc_bias, ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  static QATVars bind(std::span<const Var> v, std::size_t num_heads) {
    if (v.size() != 3 * num_heads + 7) throw std::invalid_argument("qat: wrong number of parameter nodes");
    QATVars q;
    std::size_t i = 0;
    for (std::size_t h = 0; h < num_heads; ++h) {
      q.query.push_back(v[i++]);
      q.key.push_back(v[i++]);
      q.value.push_back(v[i++]);
    }
    q.out_proj = v[i++];
    q.fc_weight = v[i++];
    q.fc_bias = v[i++];
    q.ln1_gain = v[i++];
    q.ln1_bias = v[i++];
    q.ln2_gain = v[i++];
    q.ln2_bias = v[i++];
    return q;
  }

  /// Records every block on `tape`, as leaves when `trainable`.
  static QATVars record(Tape& tape, const QATParams& params, bool trainable) {
    std::vector<Var> v;
    for (const auto& [_, m] : params.blocks()) v.push_back(trainable ? tape.leaf(*m) : tape.constant(*m));
    return bind(v, params.num_heads());
  }
};

/// Dropout keep-masks for the two residual branches, pre-scaled by 1/(1-rate).
struct DropoutMasks {
  Matrix attention;  // 1 x C
  Matrix mlp;        // 1 x C

  static DropoutMasks sample(std::size_t embed_dim, double rate, Rng& rng) {
    DropoutMasks d{Matrix(1, embed_dim, 1.0), Matrix(1, embed_dim, 1.0)};
    if (rate <= 0.0) return d;
    std::bernoulli_distribution keep(1.0 - rate);
    const double s = 1.0 / (1.0 - rate);
    for (double& v : d.attention.data) v = keep(rng) ? s : 0.0;
    for (double& v : d.mlp.data) v = keep(rng) ? s : 0.0;
    return d;
  }
};

inline Var qat_forward(Var phi, Var query_features, const QATVars& p, const DropoutMasks* dropout = nullptr) {
  Tape& t = *phi.tape;
  const Matrix& pv = t.value(phi);
  const Matrix& xv = t.value(query_features);
  if (pv.rows != 1 || pv.cols != xv.cols) throw ShapeError("qat: classifier " + pv.shape() + " vs query " + xv.shape());
  const Matrix& wq0 = t.value(p.query.at(0));
  if (wq0.rows != pv.cols) throw ShapeError("qat: parameters expect embed dim " + std::to_string(wq0.rows) + ", got " + std::to_string(pv.cols));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(wq0.cols));

  Var u = layer_norm(phi, p.ln1_gain, p.ln1_bias);
  Var xn = layer_norm(query_features, p.ln1_gain, p.ln1_bias);
  std::vector<Var> heads;
  for (std::size_t h = 0; h < p.query.size(); ++h) {
    Var q = matmul(u, p.query[h]);
    Var k = matmul(xn, p.key[h]);
    Var v = matmul(xn, p.value[h]);
    Var attn = row_softmax(scale(matmul_nt(q, k), inv_sqrt_dh));
    heads.push_back(matmul(attn, v));
  }
  Var mha = matmul(concat_cols(heads), p.out_proj);
  if (dropout) mha = mul_const(mha, dropout->attention);
  Var z = add(phi, mha);
  Var f = add(matmul(layer_norm(z, p.ln2_gain, p.ln2_bias), p.fc_weight), p.fc_bias);
  if (dropout) f = mul_const(f, dropout->mlp);
  return add(z, f);
}

/// Inference-time query adaptation (dropout off, parameters frozen).
inline ClassifierWeights qat_adapt(const ClassifierWeights& phi_star, const Matrix& query_features, const QATParams& params) {
  params.validate();
  Tape tape;
  Var phi = tape.constant(phi_star.phi);
  Var x = tape.constant(query_features);
  Var out = qat_forward(phi, x, QATVars::record(tape, params, false));
  return {tape.value(out), phi_star.tau};
}

}  // namespace fsqat
