#pragma once

// Toy pre-norm encoder-decoder transformer with incremental decoding over
// explicit key/value caches. Caches hold post-projection keys and values for
// every decoder layer; a DecoderContext is a plain value, so copying it gives
// an independent decoding state.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/tensor.hpp"

namespace resetox {

using TokenId = std::size_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
}  // namespace special

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t d_k = 32;
  std::size_t n_layers_enc = 2;
  std::size_t n_layers_dec = 2;
  std::size_t d_ff = 128;
  std::size_t max_len = 128;

  void validate() const {
    if (!vocab_size || !d_model || !n_heads || !d_k || !n_layers_enc || !n_layers_dec || !d_ff)
      throw ContractError("model config: all counts must be >= 1");
    if (d_model != n_heads * d_k)
      throw ContractError("model config: d_model (" + std::to_string(d_model) +
                          ") must equal n_heads * d_k (" + std::to_string(n_heads * d_k) + ")");
    if (vocab_size <= special::kUnk)
      throw ContractError("model config: vocab_size must leave room for the reserved ids");
    if (max_len < 100) throw ContractError("model config: max_len must be >= 100");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Row-major matrix value used for cached keys and values.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  bool empty() const { return rows == 0; }
  bool operator==(const Matrix&) const = default;
};

struct LayerCache {
  Matrix self_k, self_v;    // one row per generated target position
  Matrix cross_k, cross_v;  // one row per source position
  bool operator==(const LayerCache&) const = default;
};

struct DecoderContext {
  std::vector<LayerCache> layers;

  std::size_t length() const { return layers.empty() ? 0 : layers.front().self_k.rows; }
  std::size_t source_length() const {
    return layers.empty() ? 0 : layers.front().cross_k.rows;
  }
  bool operator==(const DecoderContext&) const = default;
};

struct NextTokenDistribution {
  std::vector<double> logits;
  std::vector<double> probs;
  std::vector<double> log_probs;

  static NextTokenDistribution from_logits(std::span<const double> logits) {
    NextTokenDistribution d;
    d.logits.assign(logits.begin(), logits.end());
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double total = 0.0;
    for (double v : logits) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    d.probs.resize(logits.size());
    d.log_probs.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      d.log_probs[i] = logits[i] - lse;
      d.probs[i] = std::exp(d.log_probs[i]);
    }
    return d;
  }
};

struct NormParams {
  Tensor gain, bias;
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  NormParams ln_attn;
  AttentionParams attn;
  NormParams ln_ff;
  FeedForwardParams ff;
};

struct DecoderLayerParams {
  NormParams ln_self;
  AttentionParams self_attn;
  NormParams ln_cross;
  AttentionParams cross_attn;
  NormParams ln_ff;
  FeedForwardParams ff;
};

struct ModelParams {
  ModelConfig config;
  Tensor embedding;  // shared by encoder and decoder inputs
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  NormParams enc_final, dec_final;
  Tensor out_w, out_b;  // untied output projection

  // Stable name -> tensor listing; defines the weight-file order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto norm = [&](const std::string& p, const NormParams& n) {
      out.emplace_back(p + ".gain", n.gain);
      out.emplace_back(p + ".bias", n.bias);
    };
    auto attn = [&](const std::string& p, const AttentionParams& a) {
      out.emplace_back(p + ".wq", a.wq);
      out.emplace_back(p + ".wk", a.wk);
      out.emplace_back(p + ".wv", a.wv);
      out.emplace_back(p + ".wo", a.wo);
    };
    auto ff = [&](const std::string& p, const FeedForwardParams& f) {
      out.emplace_back(p + ".w1", f.w1);
      out.emplace_back(p + ".b1", f.b1);
      out.emplace_back(p + ".w2", f.w2);
      out.emplace_back(p + ".b2", f.b2);
    };
    out.emplace_back("embedding", embedding);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      norm(p + ".ln_attn", encoder[l].ln_attn);
      attn(p + ".attn", encoder[l].attn);
      norm(p + ".ln_ff", encoder[l].ln_ff);
      ff(p + ".ff", encoder[l].ff);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      norm(p + ".ln_self", decoder[l].ln_self);
      attn(p + ".self_attn", decoder[l].self_attn);
      norm(p + ".ln_cross", decoder[l].ln_cross);
      attn(p + ".cross_attn", decoder[l].cross_attn);
      norm(p + ".ln_ff", decoder[l].ln_ff);
      ff(p + ".ff", decoder[l].ff);
    }
    norm("enc_final", enc_final);
    norm("dec_final", dec_final);
    out.emplace_back("out_w", out_w);
    out.emplace_back("out_b", out_b);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  // Expected shapes for a config, in named_tensors() order.
  static std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& c) {
    ModelParams shell = build(c, [](const Shape& s, const std::string&) {
      return Tensor::zeros(s);
    });
    std::vector<std::pair<std::string, Shape>> out;
    for (auto& [name, t] : shell.named_tensors()) out.emplace_back(name, t.shape());
    return out;
  }

  // Seeded uniform Xavier initialization; norms start at identity, biases at
  // zero and the output projection small so an untrained model is close to
  // uniform over the vocabulary.
  static ModelParams initialize(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    return build(c, [&](const Shape& s, const std::string& name) {
      std::vector<double> v(detail::shape_product(s), 0.0);
      const bool is_gain = name.ends_with(".gain");
      const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") ||
                           name.ends_with(".b2") || name == "out_b";
      if (is_gain) {
        std::fill(v.begin(), v.end(), 1.0);
      } else if (!is_bias) {
        double limit = std::sqrt(6.0 / static_cast<double>(s[0] + s[1]));
        if (name == "embedding") limit = 1.0 / std::sqrt(static_cast<double>(s[1]));
        if (name == "out_w") limit *= 0.05;
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& x : v) x = dist(rng);
      }
      return Tensor(s, std::move(v));
    });
  }

  ModelParams clone() const {
    auto source = named_tensors();
    std::size_t i = 0;
    return build(config, [&](const Shape&, const std::string&) { return source[i++].second.clone(); });
  }

  void set_requires_grad(bool flag) const {
    for (auto t : tensors()) t.set_requires_grad(flag);
  }

  void zero_grad() const {
    for (auto t : tensors()) t.zero_grad();
  }

  template <typename Make>
  static ModelParams build(const ModelConfig& c, Make&& make) {
    const std::size_t d = c.d_model, ff = c.d_ff;
    ModelParams p;
    p.config = c;
    auto norm = [&](const std::string& n) {
      NormParams out;
      out.gain = make(Shape{1, d}, n + ".gain");
      out.bias = make(Shape{1, d}, n + ".bias");
      return out;
    };
    auto attn = [&](const std::string& n) {
      AttentionParams a;
      a.wq = make(Shape{d, d}, n + ".wq");
      a.wk = make(Shape{d, d}, n + ".wk");
      a.wv = make(Shape{d, d}, n + ".wv");
      a.wo = make(Shape{d, d}, n + ".wo");
      return a;
    };
    auto feed = [&](const std::string& n) {
      FeedForwardParams f;
      f.w1 = make(Shape{d, ff}, n + ".w1");
      f.b1 = make(Shape{1, ff}, n + ".b1");
      f.w2 = make(Shape{ff, d}, n + ".w2");
      f.b2 = make(Shape{1, d}, n + ".b2");
      return f;
    };
    p.embedding = make(Shape{c.vocab_size, d}, "embedding");
    for (std::size_t l = 0; l < c.n_layers_enc; ++l) {
      const std::string n = "encoder." + std::to_string(l);
      EncoderLayerParams e;
      e.ln_attn = norm(n + ".ln_attn");
      e.attn = attn(n + ".attn");
      e.ln_ff = norm(n + ".ln_ff");
      e.ff = feed(n + ".ff");
      p.encoder.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < c.n_layers_dec; ++l) {
      const std::string n = "decoder." + std::to_string(l);
      DecoderLayerParams dl;
      dl.ln_self = norm(n + ".ln_self");
      dl.self_attn = attn(n + ".self_attn");
      dl.ln_cross = norm(n + ".ln_cross");
      dl.cross_attn = attn(n + ".cross_attn");
      dl.ln_ff = norm(n + ".ln_ff");
      dl.ff = feed(n + ".ff");
      p.decoder.push_back(std::move(dl));
    }
    p.enc_final = norm("enc_final");
    p.dec_final = norm("dec_final");
    p.out_w = make(Shape{d, c.vocab_size}, "out_w");
    p.out_b = make(Shape{1, c.vocab_size}, "out_b");
    return p;
  }
};

// Sinusoidal position encodings for positions [first, first + count).
inline Tensor positional_encoding(std::size_t first, std::size_t count, std::size_t d_model) {
  std::vector<double> v(count * d_model);
  for (std::size_t i = 0; i < count; ++i) {
    const double pos = static_cast<double>(first + i);
    for (std::size_t j = 0; j < d_model; j += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d_model));
      v[i * d_model + j] = std::sin(pos * freq);
      if (j + 1 < d_model) v[i * d_model + j + 1] = std::cos(pos * freq);
    }
  }
  return Tensor({count, d_model}, std::move(v));
}

// Scaled dot-product attention for one head, tokens in rows:
// softmax_rows(q k^T / sqrt(d_k)) v. This is the row-major transpose of the
// column form v * softmax_columns(k^T q / sqrt(d_k)).
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t d_k,
                             std::optional<std::size_t> causal_offset = {}) {
  if (d_k == 0) throw ContractError("self_attention: d_k must be positive");
  if (q.cols() != k.cols())
    throw DimensionError("self_attention: query " + shape_string(q.shape()) + " vs key " +
                         shape_string(k.shape()));
  if (k.rows() != v.rows())
    throw DimensionError("self_attention: key " + shape_string(k.shape()) + " vs value " +
                         shape_string(v.shape()));
  Tensor scores = scale(matmul_transposed(q, k), 1.0 / std::sqrt(static_cast<double>(d_k)));
  return matmul(softmax_rows(scores, causal_offset), v);
}

inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t n_heads, std::size_t d_k,
                                   std::optional<std::size_t> causal_offset = {}) {
  if (n_heads == 1) return self_attention(q, k, v, d_k, causal_offset);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t b = h * d_k, e = b + d_k;
    heads.push_back(self_attention(slice_cols(q, b, e), slice_cols(k, b, e), slice_cols(v, b, e),
                                   d_k, causal_offset));
  }
  return concat_cols(heads);
}

namespace detail {

inline Tensor feed_forward(const FeedForwardParams& f, const Tensor& x) {
  return add_row(matmul(relu(add_row(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

inline Tensor norm(const NormParams& n, const Tensor& x) { return layer_norm(x, n.gain, n.bias); }

inline Tensor embed(const ModelParams& p, std::span<const TokenId> ids, std::size_t first_pos) {
  const auto d = p.config.d_model;
  return add(scale(embedding(p.embedding, ids), std::sqrt(static_cast<double>(d))),
             positional_encoding(first_pos, ids.size(), d));
}

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> ids, const char* what) {
  for (auto id : ids)
    if (id >= c.vocab_size)
      throw VocabularyError(std::string(what) + ": token id " + std::to_string(id) +
                            " outside vocabulary of " + std::to_string(c.vocab_size));
}

inline Tensor to_tensor(const Matrix& m, bool requires_grad) {
  if (m.empty()) return {};
  return Tensor({m.rows, m.cols}, m.data, requires_grad);
}

inline Matrix to_matrix(const Tensor& t) {
  if (!t.defined()) return {};
  return Matrix{t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end())};
}

}  // namespace detail

// Final encoder states [src_len x d_model].
inline Tensor encoder_forward(const ModelParams& p, std::span<const TokenId> src) {
  const auto& c = p.config;
  if (src.empty()) throw ContractError("encode: empty source");
  if (src.size() > c.max_len)
    throw LengthError("encode: source length " + std::to_string(src.size()) + " exceeds max_len " +
                      std::to_string(c.max_len));
  detail::check_tokens(c, src, "encode");
  Tensor x = detail::embed(p, src, 0);
  for (const auto& layer : p.encoder) {
    Tensor h = detail::norm(layer.ln_attn, x);
    Tensor a = multi_head_attention(matmul(h, layer.attn.wq), matmul(h, layer.attn.wk),
                                    matmul(h, layer.attn.wv), c.n_heads, c.d_k);
    x = add(x, matmul(a, layer.attn.wo));
    x = add(x, detail::feed_forward(layer.ff, detail::norm(layer.ln_ff, x)));
  }
  return detail::norm(p.enc_final, x);
}

// Cached keys/values of one decoder layer as tensors; the self entries may be
// undefined before the first position.
struct LayerKV {
  Tensor self_k, self_v, cross_k, cross_v;
};

inline std::vector<LayerKV> cross_kv_from_states(const ModelParams& p, const Tensor& states) {
  std::vector<LayerKV> kv(p.decoder.size());
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    kv[l].cross_k = matmul(states, p.decoder[l].cross_attn.wk);
    kv[l].cross_v = matmul(states, p.decoder[l].cross_attn.wv);
  }
  return kv;
}

inline std::vector<LayerKV> context_tensors(const DecoderContext& ctx, bool self_grad,
                                            bool cross_grad) {
  std::vector<LayerKV> kv(ctx.layers.size());
  for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
    const auto& layer = ctx.layers[l];
    kv[l].self_k = detail::to_tensor(layer.self_k, self_grad);
    kv[l].self_v = detail::to_tensor(layer.self_v, self_grad);
    kv[l].cross_k = detail::to_tensor(layer.cross_k, cross_grad);
    kv[l].cross_v = detail::to_tensor(layer.cross_v, cross_grad);
  }
  return kv;
}

inline DecoderContext context_from_tensors(const std::vector<LayerKV>& kv) {
  DecoderContext ctx;
  ctx.layers.resize(kv.size());
  for (std::size_t l = 0; l < kv.size(); ++l) {
    ctx.layers[l].self_k = detail::to_matrix(kv[l].self_k);
    ctx.layers[l].self_v = detail::to_matrix(kv[l].self_v);
    ctx.layers[l].cross_k = detail::to_matrix(kv[l].cross_k);
    ctx.layers[l].cross_v = detail::to_matrix(kv[l].cross_v);
  }
  return ctx;
}

struct EncodedSource {
  Tensor states;
  DecoderContext context;  // cross caches filled, self caches empty
};

inline EncodedSource encode(std::span<const TokenId> src, const ModelParams& p) {
  EncodedSource out;
  out.states = encoder_forward(p, src);
  out.context = context_from_tensors(cross_kv_from_states(p, out.states));
  return out;
}

// Runs the decoder for one target position and returns logits [1 x vocab].
// With `append`, keys/values of the token are computed and appended to the
// self caches first. Without it the self caches must already hold the
// token's own position as their last row, and only its queries are
// recomputed; this is the form o = M(x_i, C^s_i, C^c_i) the guidance
// gradient is taken through.
inline Tensor decoder_position(const ModelParams& p, TokenId token, std::vector<LayerKV>& kv,
                               bool append) {
  const auto& c = p.config;
  if (kv.size() != p.decoder.size())
    throw DimensionError("decoder_position: context has " + std::to_string(kv.size()) +
                         " layers, model has " + std::to_string(p.decoder.size()));
  const std::size_t cached = kv.front().self_k.defined() ? kv.front().self_k.rows() : 0;
  if (!append && cached == 0)
    throw ContractError("decoder_position: re-scoring needs a cached current position");
  const std::size_t position = append ? cached : cached - 1;
  if (position >= c.max_len)
    throw LengthError("decode_step: position " + std::to_string(position) +
                      " reaches max_len " + std::to_string(c.max_len));
  const TokenId ids[1] = {token};
  detail::check_tokens(c, ids, "decode_step");
  Tensor x = detail::embed(p, ids, position);
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& layer = p.decoder[l];
    auto& cache = kv[l];
    Tensor h = detail::norm(layer.ln_self, x);
    Tensor q = matmul(h, layer.self_attn.wq);
    if (append) {
      cache.self_k = concat_rows(cache.self_k, matmul(h, layer.self_attn.wk));
      cache.self_v = concat_rows(cache.self_v, matmul(h, layer.self_attn.wv));
    }
    Tensor a = multi_head_attention(q, cache.self_k, cache.self_v, c.n_heads, c.d_k);
    x = add(x, matmul(a, layer.self_attn.wo));
    h = detail::norm(layer.ln_cross, x);
    a = multi_head_attention(matmul(h, layer.cross_attn.wq), cache.cross_k, cache.cross_v,
                             c.n_heads, c.d_k);
    x = add(x, matmul(a, layer.cross_attn.wo));
    x = add(x, detail::feed_forward(layer.ff, detail::norm(layer.ln_ff, x)));
  }
  return add_row(matmul(detail::norm(p.dec_final, x), p.out_w), p.out_b);
}

// One incremental decode step: appends the previous token's keys/values to
// every self cache and returns the next-token distribution.
inline NextTokenDistribution decode_step(TokenId prev_token, DecoderContext& ctx,
                                         const ModelParams& p) {
  if (ctx.layers.size() != p.decoder.size())
    throw ContractError("decode_step: context does not belong to this model");
  if (ctx.length() >= p.config.max_len)
    throw LengthError("decode_step: context already holds max_len positions");
  auto kv = context_tensors(ctx, false, false);
  Tensor logits = decoder_position(p, prev_token, kv, true);
  for (std::size_t l = 0; l < kv.size(); ++l) {
    ctx.layers[l].self_k = detail::to_matrix(kv[l].self_k);
    ctx.layers[l].self_v = detail::to_matrix(kv[l].self_v);
  }
  return NextTokenDistribution::from_logits(logits.data());
}

// Next-token distribution from a context whose caches already include the
// current position (see decoder_position without append).
inline NextTokenDistribution rescore_step(TokenId current_token, const DecoderContext& ctx,
                                          const ModelParams& p) {
  auto kv = context_tensors(ctx, false, false);
  Tensor logits = decoder_position(p, current_token, kv, false);
  return NextTokenDistribution::from_logits(logits.data());
}

// Non-incremental decoder over a whole target prefix with causal masking;
// logits [len(tgt_in) x vocab]. Used for teacher forcing and as the
// reference the cached path must agree with.
inline Tensor decoder_forward(const ModelParams& p, const Tensor& enc_states,
                              std::span<const TokenId> tgt_in) {
  const auto& c = p.config;
  if (tgt_in.empty()) throw ContractError("decoder_forward: empty target prefix");
  if (tgt_in.size() > c.max_len)
    throw LengthError("decoder_forward: prefix longer than max_len");
  detail::check_tokens(c, tgt_in, "decoder_forward");
  Tensor x = detail::embed(p, tgt_in, 0);
  for (const auto& layer : p.decoder) {
    Tensor h = detail::norm(layer.ln_self, x);
    Tensor a = multi_head_attention(matmul(h, layer.self_attn.wq), matmul(h, layer.self_attn.wk),
                                    matmul(h, layer.self_attn.wv), c.n_heads, c.d_k,
                                    std::size_t{0});
    x = add(x, matmul(a, layer.self_attn.wo));
    h = detail::norm(layer.ln_cross, x);
    a = multi_head_attention(matmul(h, layer.cross_attn.wq), matmul(enc_states, layer.cross_attn.wk),
                             matmul(enc_states, layer.cross_attn.wv), c.n_heads, c.d_k);
    x = add(x, matmul(a, layer.cross_attn.wo));
    x = add(x, detail::feed_forward(layer.ff, detail::norm(layer.ln_ff, x)));
  }
  return add_row(matmul(detail::norm(p.dec_final, x), p.out_w), p.out_b);
}

// Mean teacher-forced negative log-likelihood (nats/token) of `target`
// followed by eos, given `src`. Computes no gradients unless params require
// them.
inline Tensor sequence_nll(const ModelParams& p, std::span<const TokenId> src,
                           std::span<const TokenId> target) {
  Tensor states = encoder_forward(p, src);
  std::vector<TokenId> in{special::kBos};
  in.insert(in.end(), target.begin(), target.end());
  std::vector<TokenId> out(target.begin(), target.end());
  out.push_back(special::kEos);
  return nll_mean(log_softmax_rows(decoder_forward(p, states, in)), out);
}

}  // namespace resetox
