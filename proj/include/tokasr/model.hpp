#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokasr/rng.hpp"
#include "tokasr/seqlayout.hpp"
#include "tokasr/tokens.hpp"

namespace tokasr {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  VocabSpec vocab;
  int max_positions = 512;
  double dropout_p = 0.1;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1)
      throw std::invalid_argument("model: sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("model: d_model must be divisible by n_heads");
    if (vocab.total_vocab < 1) throw std::invalid_argument("model: vocabulary not set");
    if (max_positions < 1) throw std::invalid_argument("model: max_positions must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("model: dropout_p must be in [0, 1)");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab", vocab_to_json(c.vocab)}, {"max_positions", c.max_positions}, {"dropout_p", c.dropout_p}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab = vocab_from_json(j.at("vocab"));
  c.max_positions = j.at("max_positions").get<int>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.validate();
  return c;
}

template <typename S>
struct LayerParams {
  Vec<S> ln1_g, ln1_b, ln2_g, ln2_b;
  Mat<S> w_q, w_k, w_v, w_o;  // each d_model x d_model
  Vec<S> b_q, b_k, b_v, b_o;
  Mat<S> w_ff1;  // d_model x d_ff
  Vec<S> b_ff1;
  Mat<S> w_ff2;  // d_ff x d_model
  Vec<S> b_ff2;
};

// Pre-norm decoder weights. Embeddings and the output projection are kept
// untied; the modality embedding separates the speech stream from text
// slots.
template <typename S>
struct ModelParams {
  ModelConfig config;
  Mat<S> tok_emb;  // total_vocab x d_model
  Mat<S> pos_emb;  // max_positions x d_model
  Mat<S> mod_emb;  // 2 x d_model
  std::vector<LayerParams<S>> layers;
  Vec<S> lnf_g, lnf_b;
  Mat<S> w_out;  // d_model x total_vocab
  Vec<S> b_out;

  // Visits every tensor in a fixed order; the order defines the checkpoint
  // blob layout and the flat parameter indexing used by tests.
  template <typename F>
  void for_each(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    f("mod_emb", mod_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "w_q", L.w_q);
      f(p + "b_q", L.b_q);
      f(p + "w_k", L.w_k);
      f(p + "b_k", L.b_k);
      f(p + "w_v", L.w_v);
      f(p + "b_v", L.b_v);
      f(p + "w_o", L.w_o);
      f(p + "b_o", L.b_o);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w_ff1", L.w_ff1);
      f(p + "b_ff1", L.b_ff1);
      f(p + "w_ff2", L.w_ff2);
      f(p + "b_ff2", L.b_ff2);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("w_out", w_out);
    f("b_out", b_out);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each([&](const std::string& name, auto& t) {
      f(name, static_cast<const std::remove_reference_t<decltype(t)>&>(t));
    });
  }

  long n_params() const {
    long n = 0;
    for_each([&](const std::string&, const auto& t) { n += t.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }
};

template <typename S>
ModelParams<S> zeros_like_params(const ModelConfig& config) {
  config.validate();
  ModelParams<S> p;
  p.config = config;
  const int d = config.d_model;
  p.tok_emb = Mat<S>::Zero(config.vocab.total_vocab, d);
  p.pos_emb = Mat<S>::Zero(config.max_positions, d);
  p.mod_emb = Mat<S>::Zero(2, d);
  p.layers.resize(config.n_layers);
  for (auto& L : p.layers) {
    L.ln1_g = Vec<S>::Zero(d);
    L.ln1_b = Vec<S>::Zero(d);
    L.w_q = Mat<S>::Zero(d, d);
    L.b_q = Vec<S>::Zero(d);
    L.w_k = Mat<S>::Zero(d, d);
    L.b_k = Vec<S>::Zero(d);
    L.w_v = Mat<S>::Zero(d, d);
    L.b_v = Vec<S>::Zero(d);
    L.w_o = Mat<S>::Zero(d, d);
    L.b_o = Vec<S>::Zero(d);
    L.w_ff1 = Mat<S>::Zero(d, config.d_ff);
    L.b_ff1 = Vec<S>::Zero(config.d_ff);
    L.w_ff2 = Mat<S>::Zero(config.d_ff, d);
    L.b_ff2 = Vec<S>::Zero(d);
  }
  p.lnf_g = Vec<S>::Zero(d);
  p.lnf_b = Vec<S>::Zero(d);
  p.w_out = Mat<S>::Zero(d, config.vocab.total_vocab);
  p.b_out = Vec<S>::Zero(config.vocab.total_vocab);
  return p;
}

// Weights from N(0, 1/sqrt(d_model)); normalization gains 1, all offsets 0.
template <typename S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<S> p = zeros_like_params<S>(config);
  Rng rng(mix_seed(seed, 0x7a3b));
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  p.for_each([&](const std::string& name, auto& t) {
    if (name.ends_with("_g")) {
      t.setOnes();
      return;
    }
    if (name.ends_with("_b") || name.starts_with("b_") || name.find(".b_") != std::string::npos) return;
    for (long i = 0; i < t.rows(); ++i)
      for (long j = 0; j < t.cols(); ++j) t(i, j) = static_cast<S>(rng.normal() * scale);
  });
  return p;
}

namespace detail {

template <typename S>
struct LayerNormCache {
  Mat<S> xhat;     // normalized input
  Vec<S> inv_std;  // per row
};

inline constexpr double kLnEps = 1e-5;

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Vec<S>& g, const Vec<S>& b, LayerNormCache<S>* cache) {
  Vec<S> mean = x.rowwise().mean();
  Mat<S> centered = x.colwise() - mean;
  Vec<S> inv_std = (centered.array().square().rowwise().mean() + static_cast<S>(kLnEps)).rsqrt().matrix();
  Mat<S> xhat = (centered.array().colwise() * inv_std.array()).matrix();
  Mat<S> y = ((xhat.array().rowwise() * g.transpose().array()).rowwise() + b.transpose().array()).matrix();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// dy -> dx; accumulates dg, db.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const LayerNormCache<S>& c, const Vec<S>& g, Vec<S>& dg,
                           Vec<S>& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
  db += dy.colwise().sum().transpose();
  Mat<S> dxhat = (dy.array().rowwise() * g.transpose().array()).matrix();
  Vec<S> m1 = dxhat.rowwise().mean();
  Vec<S> m2 = (dxhat.array() * c.xhat.array()).rowwise().mean().matrix();
  Mat<S> dx = (((dxhat.colwise() - m1).array() - (c.xhat.array().colwise() * m2.array())).colwise() *
               c.inv_std.array())
                  .matrix();
  return dx;
}

template <typename S>
Mat<S> gelu(const Mat<S>& x) {
  return x.unaryExpr([](S v) {
    const double xv = static_cast<double>(v);
    return static_cast<S>(0.5 * xv * (1.0 + std::erf(xv * 0.7071067811865475244)));
  });
}

template <typename S>
Mat<S> gelu_grad(const Mat<S>& x) {
  return x.unaryExpr([](S v) {
    const double xv = static_cast<double>(v);
    const double phi = 0.5 * (1.0 + std::erf(xv * 0.7071067811865475244));
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * xv * xv);
    return static_cast<S>(phi + xv * pdf);
  });
}

template <typename S>
Mat<S> dropout_mask(int rows, int cols, double p, Rng& rng) {
  Mat<S> m(rows, cols);
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.bernoulli(p) ? S(0) : scale;
  return m;
}

}  // namespace detail

template <typename S>
struct Tape {
  const ModelParams<S>* params = nullptr;
  const LayoutSequence* layout = nullptr;
  bool train_mode = false;
  bool used = false;

  Mat<S> additive_mask;  // 0 where visible, -inf elsewhere
  Mat<S> x0;             // embedded input after dropout
  Mat<S> emb_drop;
  struct Layer {
    Mat<S> x_in;
    detail::LayerNormCache<S> ln1;
    Mat<S> h1, q, k, v;
    std::vector<Mat<S>> attn_w;  // per head, n x n
    Mat<S> attn_concat;
    Mat<S> attn_drop;
    Mat<S> x_mid;
    detail::LayerNormCache<S> ln2;
    Mat<S> h2, ff1_pre, ff_act;
    Mat<S> ff_drop;
  };
  std::vector<Layer> layers;
  Mat<S> x_final;
  detail::LayerNormCache<S> lnf;
  Mat<S> final_h;
};

// Full-sequence forward pass. Masked-out keys contribute exactly zero
// attention weight: the mask is added as -inf before a max-subtracted
// softmax. Dropout is active only in train mode and draws from `rng`.
template <typename S>
Mat<S> forward(const ModelParams<S>& params, const LayoutSequence& layout, const AttentionMask& mask,
               bool train_mode = false, Rng* rng = nullptr, Tape<S>* tape = nullptr) {
  const ModelConfig& cfg = params.config;
  const int n = layout.size();
  if (n == 0) throw std::invalid_argument("forward: empty layout");
  if (n > cfg.max_positions) throw std::invalid_argument("forward: layout length exceeds max_positions");
  if (mask.n != n) throw std::invalid_argument("forward: mask side does not match layout length");
  const bool dropout_on = train_mode && cfg.dropout_p > 0.0;
  if (dropout_on && rng == nullptr) throw std::invalid_argument("forward: train mode dropout needs an rng");

  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dk = cfg.head_dim();
  const S neg_inf = -std::numeric_limits<S>::infinity();
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));

  Mat<S> madd = Mat<S>::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!mask.at(i, j)) madd(i, j) = neg_inf;

  Mat<S> x(n, d);
  for (int i = 0; i < n; ++i) {
    const TokenId tok = layout.inputs[i];
    const int pos = layout.positions[i];
    if (tok < 0 || tok >= cfg.vocab.total_vocab)
      throw std::invalid_argument("forward: token id " + std::to_string(tok) + " out of range");
    if (pos < 0 || pos >= cfg.max_positions)
      throw std::invalid_argument("forward: position " + std::to_string(pos) + " exceeds max_positions");
    x.row(i) = params.tok_emb.row(tok) + params.pos_emb.row(pos) +
               params.mod_emb.row(static_cast<int>(layout.modality[i]));
  }
  Mat<S> emb_drop;
  if (dropout_on) {
    emb_drop = detail::dropout_mask<S>(n, d, cfg.dropout_p, *rng);
    x = x.cwiseProduct(emb_drop);
  }

  if (tape) {
    tape->params = &params;
    tape->layout = &layout;
    tape->train_mode = dropout_on;
    tape->used = false;
    tape->additive_mask = madd;
    tape->x0 = x;
    tape->emb_drop = emb_drop;
    tape->layers.clear();
    tape->layers.resize(cfg.n_layers);
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = params.layers[l];
    typename Tape<S>::Layer* tl = tape ? &tape->layers[l] : nullptr;
    detail::LayerNormCache<S> ln1c, ln2c;

    Mat<S> h1 = detail::layer_norm(x, L.ln1_g, L.ln1_b, &ln1c);
    Mat<S> q = (h1 * L.w_q).rowwise() + L.b_q.transpose();
    Mat<S> k = (h1 * L.w_k).rowwise() + L.b_k.transpose();
    Mat<S> v = (h1 * L.w_v).rowwise() + L.b_v.transpose();

    Mat<S> concat(n, d);
    std::vector<Mat<S>> attn_w(tape ? H : 0);
    for (int h = 0; h < H; ++h) {
      const auto qh = q.middleCols(h * dk, dk);
      const auto kh = k.middleCols(h * dk, dk);
      const auto vh = v.middleCols(h * dk, dk);
      Mat<S> scores = (qh * kh.transpose()) * inv_sqrt_dk + madd;
      Vec<S> row_max = scores.rowwise().maxCoeff();
      Mat<S> w = (scores.colwise() - row_max).array().exp().matrix();
      Vec<S> row_sum = w.rowwise().sum();
      w = (w.array().colwise() / row_sum.array()).matrix();
      concat.middleCols(h * dk, dk) = w * vh;
      if (tape) attn_w[h] = std::move(w);
    }
    Mat<S> attn_out = (concat * L.w_o).rowwise() + L.b_o.transpose();
    Mat<S> attn_drop;
    if (dropout_on) {
      attn_drop = detail::dropout_mask<S>(n, d, cfg.dropout_p, *rng);
      attn_out = attn_out.cwiseProduct(attn_drop);
    }
    Mat<S> x_mid = x + attn_out;

    Mat<S> h2 = detail::layer_norm(x_mid, L.ln2_g, L.ln2_b, &ln2c);
    Mat<S> ff1_pre = (h2 * L.w_ff1).rowwise() + L.b_ff1.transpose();
    Mat<S> ff_act = detail::gelu(ff1_pre);
    Mat<S> ff_out = (ff_act * L.w_ff2).rowwise() + L.b_ff2.transpose();
    Mat<S> ff_drop;
    if (dropout_on) {
      ff_drop = detail::dropout_mask<S>(n, d, cfg.dropout_p, *rng);
      ff_out = ff_out.cwiseProduct(ff_drop);
    }
    Mat<S> x_out = x_mid + ff_out;

    if (!x_out.allFinite())
      throw std::runtime_error("forward: non-finite activation in layer " + std::to_string(l));

    if (tape) {
      tl->x_in = std::move(x);
      tl->ln1 = std::move(ln1c);
      tl->h1 = std::move(h1);
      tl->q = std::move(q);
      tl->k = std::move(k);
      tl->v = std::move(v);
      tl->attn_w = std::move(attn_w);
      tl->attn_concat = std::move(concat);
      tl->attn_drop = std::move(attn_drop);
      tl->x_mid = x_mid;
      tl->ln2 = std::move(ln2c);
      tl->h2 = std::move(h2);
      tl->ff1_pre = std::move(ff1_pre);
      tl->ff_act = std::move(ff_act);
      tl->ff_drop = std::move(ff_drop);
    }
    x = std::move(x_out);
  }

  detail::LayerNormCache<S> lnfc;
  Mat<S> final_h = detail::layer_norm(x, params.lnf_g, params.lnf_b, &lnfc);
  Mat<S> logits = (final_h * params.w_out).rowwise() + params.b_out.transpose();
  if (!logits.allFinite()) throw std::runtime_error("forward: non-finite logits");

  if (tape) {
    tape->x_final = std::move(x);
    tape->lnf = std::move(lnfc);
    tape->final_h = std::move(final_h);
  }
  return logits;
}

// Exact reverse-mode gradients of the computation recorded by forward().
template <typename S>
ModelParams<S> backward(Tape<S>& tape, const Mat<S>& dlogits) {
  if (tape.params == nullptr) throw std::invalid_argument("backward: tape was not produced by forward");
  if (tape.used) throw std::invalid_argument("backward: tape already consumed");
  tape.used = true;

  const ModelParams<S>& params = *tape.params;
  const ModelConfig& cfg = params.config;
  const LayoutSequence& layout = *tape.layout;
  const int n = layout.size();
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dk = cfg.head_dim();
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  if (dlogits.rows() != n || dlogits.cols() != cfg.vocab.total_vocab)
    throw std::invalid_argument("backward: gradient shape mismatch");

  ModelParams<S> g = zeros_like_params<S>(cfg);

  g.b_out += dlogits.colwise().sum().transpose();
  g.w_out += tape.final_h.transpose() * dlogits;
  Mat<S> dfinal_h = dlogits * params.w_out.transpose();
  Mat<S> dx = detail::layer_norm_backward(dfinal_h, tape.lnf, params.lnf_g, g.lnf_g, g.lnf_b);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& L = params.layers[l];
    auto& gL = g.layers[l];
    const auto& t = tape.layers[l];

    // feed-forward block
    Mat<S> dff_out = tape.train_mode ? dx.cwiseProduct(t.ff_drop).eval() : dx;
    gL.b_ff2 += dff_out.colwise().sum().transpose();
    gL.w_ff2 += t.ff_act.transpose() * dff_out;
    Mat<S> dact = dff_out * L.w_ff2.transpose();
    Mat<S> dff1_pre = dact.cwiseProduct(detail::gelu_grad(t.ff1_pre));
    gL.b_ff1 += dff1_pre.colwise().sum().transpose();
    gL.w_ff1 += t.h2.transpose() * dff1_pre;
    Mat<S> dh2 = dff1_pre * L.w_ff1.transpose();
    Mat<S> dx_mid = dx + detail::layer_norm_backward(dh2, t.ln2, L.ln2_g, gL.ln2_g, gL.ln2_b);

    // attention block
    Mat<S> dattn_out = tape.train_mode ? dx_mid.cwiseProduct(t.attn_drop).eval() : dx_mid;
    gL.b_o += dattn_out.colwise().sum().transpose();
    gL.w_o += t.attn_concat.transpose() * dattn_out;
    Mat<S> dconcat = dattn_out * L.w_o.transpose();

    Mat<S> dq = Mat<S>::Zero(n, d), dk_ = Mat<S>::Zero(n, d), dv = Mat<S>::Zero(n, d);
    for (int h = 0; h < H; ++h) {
      const auto qh = t.q.middleCols(h * dk, dk);
      const auto kh = t.k.middleCols(h * dk, dk);
      const auto vh = t.v.middleCols(h * dk, dk);
      const Mat<S>& w = t.attn_w[h];
      const auto doh = dconcat.middleCols(h * dk, dk);
      Mat<S> dw = doh * vh.transpose();
      dv.middleCols(h * dk, dk) += w.transpose() * doh;
      Vec<S> row_dot = (w.array() * dw.array()).rowwise().sum().matrix();
      Mat<S> dscores = (w.array() * (dw.colwise() - row_dot).array()).matrix();
      dq.middleCols(h * dk, dk) += dscores * kh * inv_sqrt_dk;
      dk_.middleCols(h * dk, dk) += dscores.transpose() * qh * inv_sqrt_dk;
    }

    gL.b_q += dq.colwise().sum().transpose();
    gL.w_q += t.h1.transpose() * dq;
    gL.b_k += dk_.colwise().sum().transpose();
    gL.w_k += t.h1.transpose() * dk_;
    gL.b_v += dv.colwise().sum().transpose();
    gL.w_v += t.h1.transpose() * dv;
    Mat<S> dh1 = dq * L.w_q.transpose() + dk_ * L.w_k.transpose() + dv * L.w_v.transpose();
    dx = dx_mid + detail::layer_norm_backward(dh1, t.ln1, L.ln1_g, gL.ln1_g, gL.ln1_b);
  }

  Mat<S> dx0 = tape.train_mode ? dx.cwiseProduct(tape.emb_drop).eval() : dx;
  for (int i = 0; i < n; ++i) {
    g.tok_emb.row(layout.inputs[i]) += dx0.row(i);
    g.pos_emb.row(layout.positions[i]) += dx0.row(i);
    g.mod_emb.row(static_cast<int>(layout.modality[i])) += dx0.row(i);
  }
  return g;
}

// Cached keys/values for one stream (one growing matrix pair per layer).
template <typename S>
struct StreamCache {
  std::vector<Mat<S>> k, v;  // per layer, capacity x d_model
  int count = 0;
  int last_pos = -1;

  StreamCache() = default;
  StreamCache(int n_layers, int capacity, int d_model) {
    k.assign(n_layers, Mat<S>(capacity, d_model));
    v.assign(n_layers, Mat<S>(capacity, d_model));
  }
  int capacity() const { return k.empty() ? 0 : static_cast<int>(k[0].rows()); }
};

// Incremental key/value state: a speech-stream cache and a text-slot cache
// that never interleave.
template <typename S>
struct StepCache {
  StreamCache<S> speech, text;

  explicit StepCache(const ModelConfig& cfg)
      : speech(cfg.n_layers, cfg.max_positions, cfg.d_model),
        text(cfg.n_layers, cfg.max_positions, cfg.d_model) {}
};

namespace detail {

// Shared one-token step. `self` is the stream the token joins (keys/values
// appended there); text queries additionally attend the first
// `speech_visible` rows of `speech_ctx`, which stays untouched.
template <typename S>
Vec<S> step_token(const ModelParams<S>& params, const StreamCache<S>* speech_ctx, StreamCache<S>& self,
                  TokenId token, int position, Modality modality, int speech_visible) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dk = cfg.head_dim();
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  const bool is_text = modality == Modality::TextSlot;

  if (token < 0 || token >= cfg.vocab.total_vocab)
    throw std::invalid_argument("forward_step: token id out of range");
  if (position < 0 || position >= cfg.max_positions)
    throw std::invalid_argument("forward_step: position exceeds max_positions");
  if (self.count >= self.capacity()) throw std::invalid_argument("forward_step: cache full");
  if (position <= self.last_pos)
    throw std::invalid_argument(std::string("forward_step: position regression in ") +
                                (is_text ? "text" : "speech") + " stream");
  if (is_text && (speech_visible < 0 || (speech_ctx && speech_visible > speech_ctx->count)))
    throw std::invalid_argument("forward_step: speech_visible outside cached stream");

  Eigen::Matrix<S, 1, Eigen::Dynamic> x =
      params.tok_emb.row(token) + params.pos_emb.row(position) + params.mod_emb.row(static_cast<int>(modality));

  const int self_row = self.count;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = params.layers[l];

    Eigen::Matrix<S, 1, Eigen::Dynamic> h1 = detail::layer_norm<S>(x, L.ln1_g, L.ln1_b, nullptr);
    Eigen::Matrix<S, 1, Eigen::Dynamic> q = h1 * L.w_q + L.b_q.transpose();
    self.k[l].row(self_row) = h1 * L.w_k + L.b_k.transpose();
    self.v[l].row(self_row) = h1 * L.w_v + L.b_v.transpose();

    const int ns = is_text ? speech_visible : self_row + 1;
    const int nt = is_text ? self_row + 1 : 0;
    const Mat<S>* ks = is_text ? (speech_ctx ? &speech_ctx->k[l] : nullptr) : &self.k[l];
    const Mat<S>* vs = is_text ? (speech_ctx ? &speech_ctx->v[l] : nullptr) : &self.v[l];

    Eigen::Matrix<S, 1, Eigen::Dynamic> concat(1, d);
    for (int h = 0; h < H; ++h) {
      Eigen::Matrix<S, 1, Eigen::Dynamic> scores(1, ns + nt);
      if (ns > 0)
        scores.leftCols(ns) =
            q.middleCols(h * dk, dk) * ks->topRows(ns).middleCols(h * dk, dk).transpose() * inv_sqrt_dk;
      if (nt > 0)
        scores.rightCols(nt) =
            q.middleCols(h * dk, dk) * self.k[l].topRows(nt).middleCols(h * dk, dk).transpose() * inv_sqrt_dk;
      const S m = scores.maxCoeff();
      Eigen::Matrix<S, 1, Eigen::Dynamic> w = (scores.array() - m).exp().matrix();
      w /= w.sum();
      Eigen::Matrix<S, 1, Eigen::Dynamic> out = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(1, dk);
      if (ns > 0) out += w.leftCols(ns) * vs->topRows(ns).middleCols(h * dk, dk);
      if (nt > 0) out += w.rightCols(nt) * self.v[l].topRows(nt).middleCols(h * dk, dk);
      concat.middleCols(h * dk, dk) = out;
    }
    Eigen::Matrix<S, 1, Eigen::Dynamic> x_mid = x + (concat * L.w_o + L.b_o.transpose());
    Eigen::Matrix<S, 1, Eigen::Dynamic> h2 = detail::layer_norm<S>(x_mid, L.ln2_g, L.ln2_b, nullptr);
    Eigen::Matrix<S, 1, Eigen::Dynamic> act = detail::gelu<S>((h2 * L.w_ff1 + L.b_ff1.transpose()).eval());
    x = x_mid + (act * L.w_ff2 + L.b_ff2.transpose());
  }

  ++self.count;
  self.last_pos = position;

  Eigen::Matrix<S, 1, Eigen::Dynamic> h = detail::layer_norm<S>(x, params.lnf_g, params.lnf_b, nullptr);
  Vec<S> logits = (h * params.w_out + params.b_out.transpose()).transpose();
  if (!logits.allFinite()) throw std::runtime_error("forward_step: non-finite logits");
  return logits;
}

}  // namespace detail

// One-token inference step. The token's keys/values are appended to its
// stream's cache. Speech queries attend the whole speech cache (themselves
// included) and never the text cache; text queries attend the first
// `speech_visible` speech entries plus all text entries including
// themselves.
template <typename S>
Vec<S> forward_step(const ModelParams<S>& params, StepCache<S>& cache, TokenId token, int position,
                    Modality modality, int speech_visible = -1) {
  if (modality == Modality::TextSlot)
    return detail::step_token(params, &cache.speech, cache.text, token, position, modality, speech_visible);
  return detail::step_token<S>(params, nullptr, cache.speech, token, position, modality, -1);
}

// Mutable flat views over every tensor of a parameter set, in for_each
// order. Used by the optimizer and by the finite-difference tests.
template <typename S>
std::vector<Eigen::Map<Vec<S>>> flat_views(ModelParams<S>& params) {
  std::vector<Eigen::Map<Vec<S>>> views;
  params.for_each([&](const std::string&, auto& t) { views.emplace_back(t.data(), t.size()); });
  return views;
}

// ---- checkpoint I/O ----
//
// A checkpoint is <prefix>.json (format version, model config, parameter
// index with name/shape/offset) plus <prefix>.bin, one flat little-endian
// float32 blob in for_each order, column-major within each tensor.

constexpr int kCheckpointFormatVersion = 1;

template <typename S>
void save_checkpoint(const ModelParams<S>& params, const std::string& prefix) {
  nlohmann::json index = nlohmann::json::array();
  long offset = 0;
  params.for_each([&](const std::string& name, const auto& t) {
    index.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
    offset += t.size();
  });
  nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                             {"model_config", model_config_to_json(params.config)},
                             {"dtype", "float32_le"},
                             {"n_values", offset},
                             {"params", index}};
  std::ofstream mf(prefix + ".json", std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write " + prefix + ".json");
  mf << manifest.dump(2) << '\n';

  std::ofstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + prefix + ".bin");
  std::vector<float> buf;
  params.for_each([&](const std::string&, const auto& t) {
    buf.resize(static_cast<size_t>(t.size()));
    for (long i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t.data()[i]);
    bf.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  });
}

inline ModelParams<float> load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".json", std::ios::binary);
  if (!mf) throw std::runtime_error("cannot read " + prefix + ".json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(prefix + ".json: " + e.what());
  }
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");
  ModelParams<float> params = zeros_like_params<float>(model_config_from_json(manifest.at("model_config")));

  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + prefix + ".bin");
  size_t entry = 0;
  const auto& index = manifest.at("params");
  params.for_each([&](const std::string& name, auto& t) {
    const auto& e = index.at(entry++);
    if (e.at("name").get<std::string>() != name || e.at("rows").get<long>() != t.rows() ||
        e.at("cols").get<long>() != t.cols())
      throw std::runtime_error("checkpoint: parameter index mismatch at " + name);
    bf.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!bf) throw std::runtime_error("checkpoint: blob truncated at " + name);
  });
  return params;
}

}  // namespace tokasr
