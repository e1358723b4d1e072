#pragma once

// Teacher-forced maximum-likelihood training with Adam and global-norm
// gradient clipping. Each sentence builds its own tape; gradients are
// averaged over a batch before the update.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resetox/corpus.hpp"
#include "resetox/errors.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/model.hpp"
#include "resetox/vocabulary.hpp"
#include "resetox/weights_io.hpp"

namespace resetox {

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double clip_norm = 1.0;
  std::uint64_t seed = 11;
  std::string checkpoint_path;  // empty: do not save

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ContractError("train: epochs and batch_size must be positive");
    if (!(learning_rate > 0) || !(epsilon > 0) || !(clip_norm > 0))
      throw ContractError("train: learning_rate, epsilon and clip_norm must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
      throw ContractError("train: adam betas must lie in (0,1)");
  }

  static TrainConfig from_kv(const KeyValueConfig& kv) {
    TrainConfig c;
    c.epochs = static_cast<std::size_t>(kv.get_int("epochs", static_cast<long long>(c.epochs)));
    c.batch_size = static_cast<std::size_t>(kv.get_int("batch_size", static_cast<long long>(c.batch_size)));
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.epsilon = kv.get_double("epsilon", c.epsilon);
    c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train_seed", static_cast<long long>(c.seed)));
    c.checkpoint_path = kv.get_or("checkpoint_path", c.checkpoint_path);
    return c;
  }
};

struct TokenPair {
  std::vector<TokenId> src;
  std::vector<TokenId> tgt;
};

inline std::vector<TokenPair> tokenize_pairs(const std::vector<SentencePair>& pairs, const Vocabulary& v) {
  std::vector<TokenPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({v.encode(p.src), v.encode(p.tgt)});
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the initial model
  double loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> curve;
  bool diverged = false;
};

// Mean per-sentence NLL without recording gradients.
inline double mean_nll(const ModelParams& p, const std::vector<TokenPair>& data) {
  if (data.empty()) throw ContractError("mean_nll: empty data");
  double total = 0;
  for (const auto& d : data) total += sequence_nll(p, d.src, d.tgt).item();
  return total / static_cast<double>(data.size());
}

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelParams& p, const TrainConfig& c) : cfg_(c) {
    for (const auto& t : p.tensors()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  // Scales accumulated gradients by `scale`, clips to the global norm and
  // applies one step. Returns the pre-clip gradient norm.
  double step(const ModelParams& p, double scale) {
    auto params = p.tensors();
    double sq = 0;
    for (auto& t : params)
      for (double& g : t.mutable_grad()) {
        g *= scale;
        sq += g * g;
      }
    const double norm = std::sqrt(sq);
    const double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_data();
      auto g = params[i].mutable_grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * gj * gj;
        w[j] -= cfg_.learning_rate * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.epsilon);
      }
    }
    return norm;
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

using TrainLogger = std::function<void(const EpochRecord&)>;

// Trains from the seeded initialization. A non-finite batch loss stops
// training and returns the parameters from the end of the last good epoch.
inline TrainResult train(const std::vector<TokenPair>& data, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, std::uint64_t init_seed,
                         const TrainLogger& log = {}) {
  if (data.empty()) throw ContractError("train: empty corpus");
  cfg.validate();
  TrainResult result;
  ModelParams p = ModelParams::initialize(model_cfg, init_seed);
  result.curve.push_back({0, mean_nll(p, data)});
  if (log) log(result.curve.back());

  ModelParams last_good = p.clone();
  p.set_requires_grad(true);
  AdamOptimizer adam(p, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      p.zero_grad();
      double batch_loss = 0;
      for (std::size_t i = b; i < e; ++i) {
        const auto& d = data[order[i]];
        Tensor loss = sequence_nll(p, d.src, d.tgt);
        batch_loss += loss.item();
        backward(loss);
      }
      if (!std::isfinite(batch_loss)) {
        result.diverged = true;
        break;
      }
      adam.step(p, 1.0 / static_cast<double>(e - b));
      epoch_loss += batch_loss;
    }
    if (result.diverged) break;
    result.curve.push_back({epoch, epoch_loss / static_cast<double>(data.size())});
    if (log) log(result.curve.back());
    last_good = p.clone();
  }
  result.params = result.diverged ? std::move(last_good) : last_good;
  result.params.set_requires_grad(false);
  if (!cfg.checkpoint_path.empty()) save_weights(result.params, cfg.checkpoint_path);
  return result;
}

inline void save_curve(const std::vector<EpochRecord>& curve, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss curve to " + path);
  for (const auto& r : curve) out << nlohmann::json{{"epoch", r.epoch}, {"loss", r.loss}}.dump() << '\n';
}

// Greedy decoding: argmax at each step until eos or max_len.
inline std::vector<TokenId> greedy_decode(std::span<const TokenId> src, const ModelParams& p,
                                          std::size_t max_len) {
  EncodedSource enc = encode(src, p);
  DecoderContext ctx = enc.context;
  std::vector<TokenId> out;
  TokenId prev = special::kBos;
  for (std::size_t i = 0; i < max_len; ++i) {
    const auto dist = decode_step(prev, ctx, p);
    prev = static_cast<TokenId>(std::max_element(dist.probs.begin(), dist.probs.end()) - dist.probs.begin());
    if (prev == special::kEos) break;
    out.push_back(prev);
  }
  return out;
}

struct HeldoutMetrics {
  double nll = 0.0;
  double exact_match = 0.0;
};

inline HeldoutMetrics evaluate_heldout(const ModelParams& p, const std::vector<TokenPair>& heldout) {
  if (heldout.empty()) throw ContractError("evaluate_heldout: empty held-out set");
  p.set_requires_grad(false);
  HeldoutMetrics m;
  m.nll = mean_nll(p, heldout);
  std::size_t hits = 0;
  for (const auto& d : heldout) {
    const std::size_t limit = std::min(p.config.max_len, d.tgt.size() + 10);
    if (greedy_decode(d.src, p, limit) == d.tgt) ++hits;
  }
  m.exact_match = static_cast<double>(hits) / static_cast<double>(heldout.size());
  return m;
}

}  // namespace resetox
