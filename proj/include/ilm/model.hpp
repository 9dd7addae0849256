#pragma once

// Decoder-only causal transformer: learned absolute positions, pre-norm
// residual blocks, tanh-GELU MLP, untied output head. Templated on the scalar
// type so the same code runs in f32 for training and f64 for gradient checks.
//
// Input convention: a token sequence t_0..t_{L-1} is fed as
// [eos] t_0 .. t_{L-2}, so output row i is the distribution of t_i. Every
// token of an example, including the first, is therefore predicted.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ilm/error.hpp"
#include "ilm/rng.hpp"
#include "ilm/tokenizer.hpp"

namespace ilm {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int max_seq_len = 256;
  int vocab_size = 0;
  double dropout = 0.0;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq_len < 2 ||
        vocab_size <= static_cast<int>(kNumSpecials)) {
      throw Error(ErrorCode::kConfigInvalid, "model config: sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw Error(ErrorCode::kConfigInvalid, "model config: d_model must be divisible by n_heads");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw Error(ErrorCode::kConfigInvalid, "model config: dropout must lie in [0,1)");
    }
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},   {"n_heads", n_heads},     {"d_model", d_model},
            {"d_ff", d_ff},           {"max_seq_len", max_seq_len}, {"vocab_size", vocab_size},
            {"dropout", dropout},     {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

// Flat parameter layout shared by weights, gradients and optimizer moments.
class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.d_ff);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    add("tok_emb", v, d);
    add("pos_emb", static_cast<std::size_t>(c.max_seq_len), d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      add(p + "ln1.g", 1, d);
      add(p + "ln1.b", 1, d);
      add(p + "attn.w_qkv", d, 3 * d);
      add(p + "attn.b_qkv", 1, 3 * d);
      add(p + "attn.w_o", d, d);
      add(p + "attn.b_o", 1, d);
      add(p + "ln2.g", 1, d);
      add(p + "ln2.b", 1, d);
      add(p + "mlp.w_in", d, f);
      add(p + "mlp.b_in", 1, f);
      add(p + "mlp.w_out", f, d);
      add(p + "mlp.b_out", 1, d);
    }
    add("ln_f.g", 1, d);
    add("ln_f.b", 1, d);
    add("head.w", d, v);
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }

  const TensorInfo& find(std::string_view name) const {
    for (const auto& t : tensors_) {
      if (t.name == name) return t;
    }
    throw Error(ErrorCode::kShapeMismatch, "no tensor named " + std::string(name));
  }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
class Transformer {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Vec>;
  using CVecMap = Eigen::Map<const Vec>;

  explicit Transformer(const ModelConfig& config) : config_(config) {
    config_.validate();
    layout_ = std::make_shared<const ParamLayout>(config_);
    params_.assign(layout_->total(), T(0));
    initialize();
    index_tensors();
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::size_t vocab_size() const { return static_cast<std::size_t>(config_.vocab_size); }
  std::size_t max_seq_len() const { return static_cast<std::size_t>(config_.max_seq_len); }

  // Same architecture, parameters converted to another scalar type.
  template <typename U>
  Transformer<U> cast() const {
    Transformer<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = static_cast<U>(params_[i]);
    return out;
  }

  // Per-sequence forward state kept for backprop.
  struct LayerCache {
    Mat x_in, ln1_hat, h1, qkv, attn_cat, x_mid, ln2_hat, h2, u, g;
    Vec ln1_rstd, ln2_rstd;
    std::vector<Mat> probs;  // per head, L x L
    Mat drop_attn, drop_mlp;  // dropout multipliers (empty when disabled)
  };
  struct Cache {
    std::vector<TokenId> inputs;
    std::vector<LayerCache> layers;
    Mat x_final, lnf_hat, hf;
    Vec lnf_rstd;
    Mat log_probs;  // L x V
  };

  // Log-probabilities for model inputs (already shifted). Row i conditions on
  // inputs[0..i].
  Mat forward_inputs(std::span<const TokenId> inputs, Cache* cache = nullptr,
                     Rng* dropout_rng = nullptr) const {
    const auto L = static_cast<Eigen::Index>(inputs.size());
    const auto d = static_cast<Eigen::Index>(config_.d_model);
    if (inputs.empty()) throw Error(ErrorCode::kShapeMismatch, "empty input sequence");
    if (inputs.size() > max_seq_len()) {
      throw Error(ErrorCode::kSequenceTooLong, "sequence of " + std::to_string(inputs.size()) +
                                                   " exceeds max_seq_len " +
                                                   std::to_string(config_.max_seq_len));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    c.inputs.assign(inputs.begin(), inputs.end());
    c.layers.resize(static_cast<std::size_t>(config_.n_layers));

    const CMatMap tok = tensor(tok_emb_);
    const CMatMap pos = tensor(pos_emb_);
    Mat x(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
      const TokenId id = inputs[static_cast<std::size_t>(t)];
      if (id >= vocab_size()) {
        throw Error(ErrorCode::kShapeMismatch, "token id " + std::to_string(id) + " >= vocab size");
      }
      x.row(t) = tok.row(static_cast<Eigen::Index>(id)) + pos.row(t);
    }

    const bool dropout = dropout_rng != nullptr && config_.dropout > 0.0;
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
      const LayerParams& p = layers_[l];
      LayerCache& lc = c.layers[l];
      lc.x_in = x;
      layer_norm(x, p.ln1_g, p.ln1_b, lc.ln1_hat, lc.ln1_rstd, lc.h1);
      lc.qkv = lc.h1 * tensor(p.w_qkv);
      lc.qkv.rowwise() += vec(p.b_qkv);
      attention(lc);
      Mat a = lc.attn_cat * tensor(p.w_o);
      a.rowwise() += vec(p.b_o);
      if (dropout) {
        lc.drop_attn = dropout_mask(L, d, *dropout_rng);
        a.array() *= lc.drop_attn.array();
      } else {
        lc.drop_attn.resize(0, 0);
      }
      x += a;
      lc.x_mid = x;
      layer_norm(x, p.ln2_g, p.ln2_b, lc.ln2_hat, lc.ln2_rstd, lc.h2);
      lc.u = lc.h2 * tensor(p.w_in);
      lc.u.rowwise() += vec(p.b_in);
      lc.g = lc.u.unaryExpr([](T v) { return gelu(v); });
      Mat m = lc.g * tensor(p.w_out);
      m.rowwise() += vec(p.b_out);
      if (dropout) {
        lc.drop_mlp = dropout_mask(L, d, *dropout_rng);
        m.array() *= lc.drop_mlp.array();
      } else {
        lc.drop_mlp.resize(0, 0);
      }
      x += m;
    }
    c.x_final = x;
    layer_norm(x, lnf_g_, lnf_b_, c.lnf_hat, c.lnf_rstd, c.hf);
    Mat logits = c.hf * tensor(head_w_);
    log_softmax_rows(logits);
    if (cache) c.log_probs = logits;
    return logits;
  }

  // log p(tokens[i] | tokens[0..i-1]) for every i.
  std::vector<double> score(std::span<const TokenId> tokens) const {
    if (tokens.empty()) return {};
    const auto inputs = shifted_inputs(tokens);
    const Mat lp = forward_inputs(inputs);
    std::vector<double> out(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      out[i] = static_cast<double>(lp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(tokens[i])));
    }
    return out;
  }

  // Distribution of the token following `context`.
  std::vector<double> next_log_probs(std::span<const TokenId> context) const {
    if (context.size() + 1 > max_seq_len()) {
      throw Error(ErrorCode::kContextOverflow, "context of " + std::to_string(context.size()) +
                                                   " tokens leaves no room in max_seq_len " +
                                                   std::to_string(config_.max_seq_len));
    }
    std::vector<TokenId> inputs;
    inputs.reserve(context.size() + 1);
    inputs.push_back(special_id(Special::kEos));
    inputs.insert(inputs.end(), context.begin(), context.end());
    const Mat lp = forward_inputs(inputs);
    const auto last = lp.row(lp.rows() - 1);
    return std::vector<double>(last.data(), last.data() + last.size());
  }

  // Backprop of d(loss)/d(log-softmax input logits) into `grads` (same
  // layout as params, accumulated).
  void backward(const Cache& c, const Mat& dlogits, std::vector<T>& grads) const {
    const auto L = static_cast<Eigen::Index>(c.inputs.size());
    grads.resize(params_.size(), T(0));
    auto g_tensor = [&](const TensorInfo* t) {
      return MatMap(grads.data() + t->offset, static_cast<Eigen::Index>(t->rows),
                    static_cast<Eigen::Index>(t->cols));
    };
    auto g_vec = [&](const TensorInfo* t) {
      return VecMap(grads.data() + t->offset, static_cast<Eigen::Index>(t->size()));
    };

    g_tensor(head_w_).noalias() += c.hf.transpose() * dlogits;
    Mat dh = dlogits * tensor(head_w_).transpose();
    Mat dx = layer_norm_backward(dh, c.lnf_hat, c.lnf_rstd, lnf_g_, g_vec(lnf_g_), g_vec(lnf_b_));

    for (std::size_t li = c.layers.size(); li-- > 0;) {
      const LayerParams& p = layers_[li];
      const LayerCache& lc = c.layers[li];

      Mat dm = dx;
      if (lc.drop_mlp.size() > 0) dm.array() *= lc.drop_mlp.array();
      g_tensor(p.w_out).noalias() += lc.g.transpose() * dm;
      add_col_sums(g_vec(p.b_out), dm);
      Mat du = dm * tensor(p.w_out).transpose();
      du.array() *= lc.u.unaryExpr([](T v) { return gelu_grad(v); }).array();
      g_tensor(p.w_in).noalias() += lc.h2.transpose() * du;
      add_col_sums(g_vec(p.b_in), du);
      Mat dh2 = du * tensor(p.w_in).transpose();
      dx += layer_norm_backward(dh2, lc.ln2_hat, lc.ln2_rstd, p.ln2_g, g_vec(p.ln2_g), g_vec(p.ln2_b));

      Mat da = dx;
      if (lc.drop_attn.size() > 0) da.array() *= lc.drop_attn.array();
      g_tensor(p.w_o).noalias() += lc.attn_cat.transpose() * da;
      add_col_sums(g_vec(p.b_o), da);
      const Mat dcat = da * tensor(p.w_o).transpose();
      const Mat dqkv = attention_backward(lc, dcat);
      g_tensor(p.w_qkv).noalias() += lc.h1.transpose() * dqkv;
      add_col_sums(g_vec(p.b_qkv), dqkv);
      Mat dh1 = dqkv * tensor(p.w_qkv).transpose();
      dx += layer_norm_backward(dh1, lc.ln1_hat, lc.ln1_rstd, p.ln1_g, g_vec(p.ln1_g), g_vec(p.ln1_b));
    }

    MatMap gtok = g_tensor(tok_emb_);
    MatMap gpos = g_tensor(pos_emb_);
    for (Eigen::Index t = 0; t < L; ++t) {
      gtok.row(static_cast<Eigen::Index>(c.inputs[static_cast<std::size_t>(t)])) += dx.row(t);
      gpos.row(t) += dx.row(t);
    }
  }

  // Summed negative log-likelihood of `tokens` at positions where weight > 0,
  // each position scaled by `scale`; gradients accumulate into `grads`.
  double loss_and_grad(std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask,
                       T scale, std::vector<T>& grads, Rng* dropout_rng = nullptr) const {
    const auto inputs = shifted_inputs(tokens);
    Cache cache;
    const Mat lp = forward_inputs(inputs, &cache, dropout_rng);
    Mat dlogits = Mat::Zero(lp.rows(), lp.cols());
    double nll = 0.0;
    for (Eigen::Index t = 0; t < lp.rows(); ++t) {
      if (!loss_mask[static_cast<std::size_t>(t)]) continue;
      const auto target = static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(t)]);
      nll -= static_cast<double>(lp(t, target));
      dlogits.row(t) = (lp.row(t).array().exp() * scale).matrix();
      dlogits(t, target) -= scale;
    }
    backward(cache, dlogits, grads);
    return nll;
  }

  static std::vector<TokenId> shifted_inputs(std::span<const TokenId> tokens) {
    std::vector<TokenId> inputs;
    inputs.reserve(tokens.size());
    if (tokens.empty()) return inputs;
    inputs.push_back(special_id(Special::kEos));
    inputs.insert(inputs.end(), tokens.begin(), tokens.end() - 1);
    return inputs;
  }

  static T gelu(T v) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * v * (T(1) + std::tanh(c * (v + T(0.044715) * v * v * v)));
  }

  static T gelu_grad(T v) {
    const T c = T(0.7978845608028654);
    const T th = std::tanh(c * (v + T(0.044715) * v * v * v));
    return T(0.5) * (T(1) + th) +
           T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * v * v);
  }

  static constexpr T kLayerNormEps = T(1e-5);

 private:
  struct LayerParams {
    const TensorInfo *ln1_g, *ln1_b, *w_qkv, *b_qkv, *w_o, *b_o, *ln2_g, *ln2_b, *w_in, *b_in,
        *w_out, *b_out;
  };

  CMatMap tensor(const TensorInfo* t) const {
    return CMatMap(params_.data() + t->offset, static_cast<Eigen::Index>(t->rows),
                   static_cast<Eigen::Index>(t->cols));
  }
  CVecMap vec(const TensorInfo* t) const {
    return CVecMap(params_.data() + t->offset, static_cast<Eigen::Index>(t->size()));
  }

  void index_tensors() {
    tok_emb_ = &layout_->find("tok_emb");
    pos_emb_ = &layout_->find("pos_emb");
    layers_.clear();
    for (int l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      layers_.push_back({&layout_->find(p + "ln1.g"), &layout_->find(p + "ln1.b"),
                         &layout_->find(p + "attn.w_qkv"), &layout_->find(p + "attn.b_qkv"),
                         &layout_->find(p + "attn.w_o"), &layout_->find(p + "attn.b_o"),
                         &layout_->find(p + "ln2.g"), &layout_->find(p + "ln2.b"),
                         &layout_->find(p + "mlp.w_in"), &layout_->find(p + "mlp.b_in"),
                         &layout_->find(p + "mlp.w_out"), &layout_->find(p + "mlp.b_out")});
    }
    lnf_g_ = &layout_->find("ln_f.g");
    lnf_b_ = &layout_->find("ln_f.b");
    head_w_ = &layout_->find("head.w");
  }

  // N(0, 0.02) weights, residual output projections scaled by
  // 1/sqrt(2 * n_layers), unit LayerNorm gains, zero biases.
  void initialize() {
    Rng rng(derive_seed(config_.init_seed, 0x1417));
    const double resid = 0.02 / std::sqrt(2.0 * config_.n_layers);
    for (const auto& t : layout_->tensors()) {
      const bool gain = t.name.ends_with(".g");
      const bool bias = t.name.ends_with(".b") || t.name.find(".b_") != std::string::npos;
      const bool out_proj = t.name.ends_with("w_o") || t.name.ends_with("w_out");
      for (std::size_t i = 0; i < t.size(); ++i) {
        T& v = params_[t.offset + i];
        if (gain) v = T(1);
        else if (bias) v = T(0);
        else v = static_cast<T>(rng.normal() * (out_proj ? resid : 0.02));
      }
    }
  }

  void layer_norm(const Mat& x, const TensorInfo* gi, const TensorInfo* bi, Mat& hat, Vec& rstd,
                  Mat& y) const {
    const auto L = x.rows();
    const auto d = static_cast<T>(x.cols());
    hat.resize(x.rows(), x.cols());
    rstd.resize(L);
    for (Eigen::Index t = 0; t < L; ++t) {
      const T mean = x.row(t).sum() / d;
      const auto centered = x.row(t).array() - mean;
      const T var = centered.square().sum() / d;
      rstd(t) = T(1) / std::sqrt(var + kLayerNormEps);
      hat.row(t) = centered * rstd(t);
    }
    y = hat;
    y.array().rowwise() *= vec(gi).array();
    y.rowwise() += vec(bi);
  }

  // Row-by-row accumulation keeps each column's summation order independent of
  // the destination's alignment, so results are reproducible across runs.
  template <typename Derived>
  static void add_col_sums(VecMap dst, const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) dst += m.row(r);
  }

  Mat layer_norm_backward(const Mat& dy, const Mat& hat, const Vec& rstd, const TensorInfo* gi,
                          VecMap dg, VecMap db) const {
    add_col_sums(dg, dy.cwiseProduct(hat));
    add_col_sums(db, dy);
    Mat dhat = dy;
    dhat.array().rowwise() *= vec(gi).array();
    const auto d = static_cast<T>(dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      const T mean_dhat = dhat.row(t).sum() / d;
      const T mean_dhat_hat = dhat.row(t).dot(hat.row(t)) / d;
      dx.row(t) = rstd(t) * (dhat.row(t).array() - mean_dhat - hat.row(t).array() * mean_dhat_hat).matrix();
    }
    return dx;
  }

  void attention(LayerCache& lc) const {
    const auto L = lc.qkv.rows();
    const auto d = static_cast<Eigen::Index>(config_.d_model);
    const auto dh = d / config_.n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    lc.probs.resize(static_cast<std::size_t>(config_.n_heads));
    lc.attn_cat.resize(L, d);
    for (int h = 0; h < config_.n_heads; ++h) {
      const auto q = lc.qkv.block(0, h * dh, L, dh);
      const auto k = lc.qkv.block(0, d + h * dh, L, dh);
      const auto v = lc.qkv.block(0, 2 * d + h * dh, L, dh);
      Mat& p = lc.probs[static_cast<std::size_t>(h)];
      p.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index t = 0; t < L; ++t) {
        auto row = p.row(t).head(t + 1);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
        p.row(t).tail(L - t - 1).setZero();
      }
      lc.attn_cat.block(0, h * dh, L, dh).noalias() = p * v;
    }
  }

  Mat attention_backward(const LayerCache& lc, const Mat& dcat) const {
    const auto L = lc.qkv.rows();
    const auto d = static_cast<Eigen::Index>(config_.d_model);
    const auto dh = d / config_.n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat dqkv(L, 3 * d);
    for (int h = 0; h < config_.n_heads; ++h) {
      const auto q = lc.qkv.block(0, h * dh, L, dh);
      const auto k = lc.qkv.block(0, d + h * dh, L, dh);
      const auto v = lc.qkv.block(0, 2 * d + h * dh, L, dh);
      const Mat& p = lc.probs[static_cast<std::size_t>(h)];
      const auto dout = dcat.block(0, h * dh, L, dh);
      Mat dp = dout * v.transpose();
      dqkv.block(0, 2 * d + h * dh, L, dh).noalias() = p.transpose() * dout;
      // softmax backward; masked entries have p = 0 and contribute nothing
      for (Eigen::Index t = 0; t < L; ++t) {
        const T dot = dp.row(t).dot(p.row(t));
        dp.row(t) = (p.row(t).array() * (dp.row(t).array() - dot)).matrix() * scale;
      }
      dqkv.block(0, h * dh, L, dh).noalias() = dp * k;
      dqkv.block(0, d + h * dh, L, dh).noalias() = dp.transpose() * q;
    }
    return dqkv;
  }

  Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, Rng& rng) const {
    const T keep = T(1) - static_cast<T>(config_.dropout);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        m(i, j) = rng.uniform() < config_.dropout ? T(0) : T(1) / keep;
      }
    }
    return m;
  }

  static void log_softmax_rows(Mat& logits) {
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      const T mx = logits.row(t).maxCoeff();
      const T lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
      logits.row(t).array() -= lse;
    }
  }

  ModelConfig config_;
  // Shared so copies keep valid TensorInfo pointers.
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<T> params_;
  const TensorInfo* tok_emb_ = nullptr;
  const TensorInfo* pos_emb_ = nullptr;
  std::vector<LayerParams> layers_;
  const TensorInfo* lnf_g_ = nullptr;
  const TensorInfo* lnf_b_ = nullptr;
  const TensorInfo* head_w_ = nullptr;
};

}  // namespace ilm
