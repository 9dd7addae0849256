#pragma once

// Reference computations written independently of the library internals.
// They favor obviousness over speed: plain loops, doubles, no Eigen.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/masker.hpp"
#include "ilm/model.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, std::vector<double>(c, 0.0)); }

// Reads a named parameter tensor as a rows x cols matrix.
inline Matrix param(const ilm::Transformer<double>& m, const std::string& name) {
  const auto& t = m.layout().find(name);
  Matrix out = zeros(t.rows, t.cols);
  for (std::size_t r = 0; r < t.rows; ++r)
    for (std::size_t c = 0; c < t.cols; ++c) out[r][c] = m.params()[t.offset + r * t.cols + c];
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline void add_bias(Matrix& x, const Matrix& b) {
  for (auto& row : x)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
}

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0, var = 0;
    for (double v : x[i]) mean += v;
    mean /= n;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      out[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
    }
  }
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
}

// Log-probabilities of the next token at every position of `inputs`.
inline Matrix forward(const ilm::Transformer<double>& m, const std::vector<ilm::TokenId>& inputs) {
  const auto& cfg = m.config();
  const std::size_t L = inputs.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / H;
  const Matrix tok = param(m, "tok_emb"), pos = param(m, "pos_emb");
  Matrix x = zeros(L, d);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < d; ++j) x[t][j] = tok[inputs[t]][j] + pos[t][j];

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Matrix h = layer_norm(x, param(m, p + "ln1.g"), param(m, p + "ln1.b"));
    Matrix qkv = matmul(h, param(m, p + "attn.w_qkv"));
    add_bias(qkv, param(m, p + "attn.b_qkv"));
    Matrix heads = zeros(L, d);
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < L; ++t) {
        std::vector<double> w(t + 1);
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0;
          for (std::size_t j = 0; j < dh; ++j) dot += qkv[t][hd * dh + j] * qkv[s][d + hd * dh + j];
          w[s] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[s]);
        }
        double z = 0;
        for (double& v : w) z += (v = std::exp(v - mx));
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t j = 0; j < dh; ++j) heads[t][hd * dh + j] += w[s] / z * qkv[s][2 * d + hd * dh + j];
      }
    }
    Matrix a = matmul(heads, param(m, p + "attn.w_o"));
    add_bias(a, param(m, p + "attn.b_o"));
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t][j] += a[t][j];
    Matrix h2 = layer_norm(x, param(m, p + "ln2.g"), param(m, p + "ln2.b"));
    Matrix u = matmul(h2, param(m, p + "mlp.w_in"));
    add_bias(u, param(m, p + "mlp.b_in"));
    for (auto& row : u)
      for (double& v : row) v = gelu(v);
    Matrix o = matmul(u, param(m, p + "mlp.w_out"));
    add_bias(o, param(m, p + "mlp.b_out"));
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t][j] += o[t][j];
  }
  Matrix logits = matmul(layer_norm(x, param(m, "ln_f.g"), param(m, "ln_f.b")), param(m, "head.w"));
  for (auto& row : logits) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (double v : row) z += std::exp(v - mx);
    for (double& v : row) v -= mx + std::log(z);
  }
  return logits;
}

// Probability that each word of `doc` (document order) ends up inside some
// masked span under `policy`. An ancestor node (document, paragraph,
// sentence) masks the word outright; otherwise the word-level walk over its
// sentence is a Markov chain on "words still covered by the current n-gram".
inline std::vector<double> word_mask_probabilities(const ilm::Document& doc, const ilm::MaskPolicy& policy) {
  const double p = policy.subtree_prob;
  const double ancestors_clear = (1 - p) * (1 - p) * (1 - p);
  const std::size_t max_cover = static_cast<std::size_t>(policy.max_ngram);
  std::vector<double> out;
  for (const auto& para : doc.root.children) {
    for (const auto& sent : para.children) {
      const std::size_t n = sent.children.size();
      std::vector<double> state(max_cover, 0.0);  // state[c]: c more words covered
      state[0] = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> next(max_cover, 0.0);
        double covered = 0.0;
        for (std::size_t c = 1; c < max_cover; ++c) {
          covered += state[c];
          next[c - 1] += state[c];
        }
        const double free = state[0];
        covered += free * p;
        next[0] += free * (1 - p);
        const std::size_t m = std::min(max_cover, n - i);
        next[0] += free * p * policy.word_vs_ngram_prob;
        for (std::size_t len = 1; len <= m; ++len) {
          next[len - 1] += free * p * (1 - policy.word_vs_ngram_prob) / static_cast<double>(m);
        }
        out.push_back(1 - ancestors_clear * (1 - covered));
        state = next;
      }
    }
  }
  return out;
}

}  // namespace oracle
