#pragma once

// Inference-time steering of the decoder caches. When a toxic continuation
// shows up among the top-M candidates, the combined objective
//
//   L = alpha * L_m + (1 - alpha) * L_f
//   L_m = -sum_{k<=M} o_k log theta_k,  theta = softmax(1 - TC)
//   L_f = KL(o_hat || o)
//
// is differentiated with respect to the selected caches and one normalized
// step is taken before the decode step is re-scored.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/lexicon.hpp"
#include "resetox/model.hpp"
#include "resetox/tensor.hpp"

namespace resetox {

enum class UpdateTarget { kSelf, kCross, kBoth };
enum class TriggerMode { kConditional, kAlways };
enum class NormMode {
  kGradNormSq,  // denominator ||grad||^2
  kLossSq,      // denominator L^2
};

inline std::string to_string(UpdateTarget t) {
  switch (t) {
    case UpdateTarget::kSelf: return "self";
    case UpdateTarget::kCross: return "cross";
    case UpdateTarget::kBoth: return "both";
  }
  return "?";
}
inline std::string to_string(TriggerMode t) {
  return t == TriggerMode::kConditional ? "conditional" : "always";
}
inline std::string to_string(NormMode n) { return n == NormMode::kGradNormSq ? "grad" : "loss"; }

inline UpdateTarget parse_update_target(const std::string& s) {
  if (s == "self") return UpdateTarget::kSelf;
  if (s == "cross") return UpdateTarget::kCross;
  if (s == "both") return UpdateTarget::kBoth;
  throw ContractError("unknown update target '" + s + "' (self|cross|both)");
}
inline TriggerMode parse_trigger_mode(const std::string& s) {
  if (s == "conditional") return TriggerMode::kConditional;
  if (s == "always") return TriggerMode::kAlways;
  throw ContractError("unknown trigger mode '" + s + "' (conditional|always)");
}
inline NormMode parse_norm_mode(const std::string& s) {
  if (s == "grad" || s == "grad_norm_sq") return NormMode::kGradNormSq;
  if (s == "loss" || s == "loss_sq") return NormMode::kLossSq;
  throw ContractError("unknown norm mode '" + s + "' (grad|loss)");
}

// Defaults: lambda pairs with loss normalization, whose step is
// lambda * grad / L^2; L is small at the unmodified context, so lambda is
// large. Tuned on the toy fixture with the ablation subcommand.
struct GuidanceConfig {
  double alpha = 0.2;
  double lambda = 1e4;
  std::size_t top_m = 10;
  UpdateTarget update_target = UpdateTarget::kSelf;
  TriggerMode trigger_mode = TriggerMode::kConditional;
  NormMode norm_mode = NormMode::kLossSq;
  // Real gradients on the fixture stay above 1e-8; at alpha = 0 the
  // faithfulness gradient is pure round-off (~1e-12) and must not move anything.
  double grad_floor = 1e-10;
  // Put the caches back after the re-scored step instead of carrying the
  // updated ones forward.
  bool restore_after_step = false;
  // Decide triggering per hypothesis instead of once for the whole beam.
  bool per_hypothesis_trigger = false;

  void validate(std::size_t vocab_size) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("guidance: alpha must lie in [0,1]");
    if (!(lambda > 0.0)) throw ContractError("guidance: lambda must be positive");
    if (top_m < 1 || top_m > vocab_size)
      throw ContractError("guidance: top_m must lie in [1, vocab_size]");
    if (!(grad_floor >= 0.0)) throw ContractError("guidance: grad_floor must be >= 0");
  }

  bool selects_self() const { return update_target != UpdateTarget::kCross; }
  bool selects_cross() const { return update_target != UpdateTarget::kSelf; }

  static GuidanceConfig from_kv(const KeyValueConfig& kv) {
    GuidanceConfig c;
    c.alpha = kv.get_double("alpha", c.alpha);
    c.lambda = kv.get_double("lambda", c.lambda);
    c.top_m = static_cast<std::size_t>(kv.get_int("top_m", static_cast<long long>(c.top_m)));
    c.update_target = parse_update_target(kv.get_or("update_target", to_string(c.update_target)));
    c.trigger_mode = parse_trigger_mode(kv.get_or("trigger_mode", to_string(c.trigger_mode)));
    c.norm_mode = parse_norm_mode(kv.get_or("norm_mode", to_string(c.norm_mode)));
    c.grad_floor = kv.get_double("grad_floor", c.grad_floor);
    c.restore_after_step = kv.get_int("restore_after_step", c.restore_after_step) != 0;
    c.per_hypothesis_trigger = kv.get_int("per_hypothesis_trigger", c.per_hypothesis_trigger) != 0;
    return c;
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    auto num = [](double v) {
      std::ostringstream s;
      s.precision(17);
      s << v;
      return s.str();
    };
    kv.set("alpha", num(alpha));
    kv.set("lambda", num(lambda));
    kv.set("top_m", std::to_string(top_m));
    kv.set("update_target", to_string(update_target));
    kv.set("trigger_mode", to_string(trigger_mode));
    kv.set("norm_mode", to_string(norm_mode));
    kv.set("grad_floor", num(grad_floor));
    kv.set("restore_after_step", restore_after_step ? "1" : "0");
    kv.set("per_hypothesis_trigger", per_hypothesis_trigger ? "1" : "0");
    return kv;
  }
};

// Target distribution over the top-M candidates: softmax of (1 - TC).
inline std::vector<double> theta_tc(std::span<const double> tc) {
  if (tc.empty()) throw ContractError("theta_tc: no candidates");
  for (double v : tc)
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("theta_tc: TC value outside [0,1]");
  std::vector<double> out(tc.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : tc) mx = std::max(mx, 1.0 - v);
  double total = 0.0;
  for (std::size_t i = 0; i < tc.size(); ++i) {
    out[i] = std::exp((1.0 - tc[i]) - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

inline double mitigation_loss(std::span<const double> o_top, std::span<const double> theta) {
  if (o_top.size() != theta.size())
    throw ContractError("mitigation_loss: " + std::to_string(o_top.size()) + " probabilities vs " +
                        std::to_string(theta.size()) + " targets");
  double loss = 0.0;
  for (std::size_t k = 0; k < o_top.size(); ++k) {
    if (!(theta[k] > 0.0)) throw ContractError("mitigation_loss: target probability must be > 0");
    loss -= o_top[k] * std::log(theta[k]);
  }
  return loss;
}

inline constexpr double kProbabilityFloor = 1e-12;

struct FaithfulnessValue {
  double value = 0.0;
  bool clamped = false;  // some o_k = 0 under o_hat_k > 0; log o_k was floored
};

inline FaithfulnessValue faithfulness_loss(std::span<const double> o_hat, std::span<const double> o) {
  if (o_hat.size() != o.size())
    throw ContractError("faithfulness_loss: distributions of different length");
  FaithfulnessValue out;
  for (std::size_t k = 0; k < o.size(); ++k) {
    if (o_hat[k] <= 0.0) continue;
    if (o[k] < kProbabilityFloor) out.clamped = true;
    out.value += o_hat[k] * (std::log(o_hat[k]) - std::log(std::max(o[k], kProbabilityFloor)));
  }
  return out;
}

inline double combined_loss(double mitigation, double faithfulness, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("combined_loss: alpha outside [0,1]");
  return alpha * mitigation + (1.0 - alpha) * faithfulness;
}

// Indices of the m largest probabilities, largest first; ties go to the
// lower token id.
inline std::vector<TokenId> top_m_indices(std::span<const double> probs, std::size_t m) {
  if (m == 0 || m > probs.size()) throw ContractError("top_m_indices: m outside [1, size]");
  std::vector<TokenId> idx(probs.size());
  std::iota(idx.begin(), idx.end(), TokenId{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                    [&](TokenId a, TokenId b) {
                      return probs[a] > probs[b] || (probs[a] == probs[b] && a < b);
                    });
  idx.resize(m);
  return idx;
}

struct LossTerms {
  Tensor total, mitigation, faithfulness;
  bool faithfulness_clamped = false;
};

// Differentiable objective for one hypothesis. `logits_hat` is the [1 x V]
// output under the (possibly modified) caches; `o` is the unmodified
// distribution and is treated as a constant, as are the candidate ids and
// theta.
inline LossTerms guidance_loss(const Tensor& logits_hat, const NextTokenDistribution& o,
                               std::span<const TokenId> top_ids, std::span<const double> theta,
                               double alpha) {
  if (top_ids.size() != theta.size())
    throw ContractError("guidance_loss: candidate and target counts differ");
  LossTerms out;
  Tensor probs = softmax_rows(logits_hat);
  std::vector<double> neg_log_theta(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) neg_log_theta[k] = -std::log(theta[k]);
  out.mitigation = weighted_sum(gather_cols(probs, top_ids), neg_log_theta);

  std::vector<double> neg_log_o(o.log_probs.size());
  const double floor = std::log(kProbabilityFloor);
  for (std::size_t k = 0; k < neg_log_o.size(); ++k) {
    if (o.log_probs[k] < floor) out.faithfulness_clamped = true;
    neg_log_o[k] = -std::max(o.log_probs[k], floor);
  }
  out.faithfulness =
      add(sum(mul(probs, log_softmax_rows(logits_hat))), weighted_sum(probs, neg_log_o));
  out.total = add(scale(out.mitigation, alpha), scale(out.faithfulness, 1.0 - alpha));
  return out;
}

struct UpdateStats {
  bool applied = false;
  bool nonfinite = false;
  double grad_norm = 0.0;
};

// One normalized descent step on the selected caches of every context in
// `ctxs`, using the gradients accumulated on the matching `leaves` (built by
// context_tensors from the same contexts). The contexts share one objective,
// the sum of their losses, so the norm is taken over all of their selected
// caches together. Unselected caches are left untouched.
inline UpdateStats context_update(std::span<DecoderContext* const> ctxs,
                                  std::span<const std::vector<LayerKV>* const> leaves,
                                  double loss_value, const GuidanceConfig& cfg) {
  if (ctxs.size() != leaves.size())
    throw ContractError("context_update: one gradient set per context required");
  struct Slot {
    Matrix* target;
    const Tensor* leaf;
  };
  std::vector<Slot> slots;
  for (std::size_t c = 0; c < ctxs.size(); ++c) {
    if (leaves[c]->size() != ctxs[c]->layers.size())
      throw ContractError("context_update: gradient layers do not match the context");
    for (std::size_t l = 0; l < ctxs[c]->layers.size(); ++l) {
      auto& layer = ctxs[c]->layers[l];
      const auto& leaf = (*leaves[c])[l];
      if (cfg.selects_self()) {
        slots.push_back({&layer.self_k, &leaf.self_k});
        slots.push_back({&layer.self_v, &leaf.self_v});
      }
      if (cfg.selects_cross()) {
        slots.push_back({&layer.cross_k, &leaf.cross_k});
        slots.push_back({&layer.cross_v, &leaf.cross_v});
      }
    }
  }
  UpdateStats stats;
  double sq = 0.0;
  for (const auto& s : slots)
    if (s.leaf->defined() && s.leaf->has_grad())
      for (double g : s.leaf->grad()) sq += g * g;
  if (!std::isfinite(sq) || !std::isfinite(loss_value)) {
    stats.nonfinite = true;
    return stats;
  }
  stats.grad_norm = std::sqrt(sq);
  if (stats.grad_norm < cfg.grad_floor || stats.grad_norm == 0.0) return stats;
  // L >= 0 analytically; a non-positive value is round-off and L^2 would blow up.
  if (cfg.norm_mode == NormMode::kLossSq && !(loss_value > 0.0)) return stats;
  const double denom = cfg.norm_mode == NormMode::kGradNormSq ? sq + 1e-12
                                                               : loss_value * loss_value + 1e-12;
  const double step = cfg.lambda / denom;
  for (const auto& s : slots) {
    if (!s.leaf->defined() || !s.leaf->has_grad()) continue;
    if (s.target->data.size() != s.leaf->size())
      throw ContractError("context_update: gradient shape differs from the cache");
    auto g = s.leaf->grad();
    for (std::size_t i = 0; i < g.size(); ++i) s.target->data[i] -= step * g[i];
  }
  stats.applied = true;
  return stats;
}

inline UpdateStats context_update(DecoderContext& ctx, const std::vector<LayerKV>& leaves,
                                  double loss_value, const GuidanceConfig& cfg) {
  DecoderContext* c[1] = {&ctx};
  const std::vector<LayerKV>* l[1] = {&leaves};
  return context_update(std::span<DecoderContext* const>(c), std::span<const std::vector<LayerKV>* const>(l),
                        loss_value, cfg);
}

struct GuidanceOutcome {
  bool triggered = false;
  bool updated = false;
  bool nonfinite_gradient = false;
  bool faithfulness_clamped = false;
  double loss_total = 0.0;  // this hypothesis' share of the objective
  double loss_mitigation = 0.0;
  double loss_faithfulness = 0.0;
  double grad_norm = 0.0;  // norm over every context updated together
  NextTokenDistribution o_before;
  NextTokenDistribution o_after;
  std::string warning;
};

// One hypothesis taking part in a guided step. Its context's self caches
// already contain the position of `current_token`.
struct GuidedHypothesis {
  TokenId current_token = 0;
  DecoderContext* ctx = nullptr;
  const NextTokenDistribution* o = nullptr;
  std::span<const TokenId> top_ids;
  std::span<const double> tc;
};

// Builds the summed objective over `hyps`, applies a single joint update to
// their contexts and re-scores each of them.
inline std::vector<GuidanceOutcome> guided_update(const ModelParams& p,
                                                  std::span<const GuidedHypothesis> hyps,
                                                  const GuidanceConfig& cfg) {
  std::vector<GuidanceOutcome> out(hyps.size());
  if (hyps.empty()) return out;
  std::vector<std::vector<LayerKV>> leaves(hyps.size());
  Tensor total;
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    const auto& hyp = hyps[h];
    out[h].triggered = true;
    out[h].o_before = *hyp.o;
    const auto theta = theta_tc(hyp.tc);
    leaves[h] = context_tensors(*hyp.ctx, cfg.selects_self(), cfg.selects_cross());
    Tensor logits = decoder_position(p, hyp.current_token, leaves[h], false);
    LossTerms loss = guidance_loss(logits, *hyp.o, hyp.top_ids, theta, cfg.alpha);
    out[h].loss_total = loss.total.item();
    out[h].loss_mitigation = loss.mitigation.item();
    out[h].loss_faithfulness = loss.faithfulness.item();
    out[h].faithfulness_clamped = loss.faithfulness_clamped;
    total = total.defined() ? add(total, loss.total) : loss.total;
  }
  backward(total);
  std::vector<DecoderContext*> ctxs;
  std::vector<const std::vector<LayerKV>*> leaf_ptrs;
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    ctxs.push_back(hyps[h].ctx);
    leaf_ptrs.push_back(&leaves[h]);
  }
  const UpdateStats stats = context_update(std::span<DecoderContext* const>(ctxs),
                                           std::span<const std::vector<LayerKV>* const>(leaf_ptrs),
                                           total.item(), cfg);
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    auto& o = out[h];
    o.grad_norm = stats.grad_norm;
    o.nonfinite_gradient = stats.nonfinite;
    if (stats.nonfinite) o.warning = "non-finite gradient; update skipped";
    o.updated = stats.applied;
    o.o_after = rescore_step(hyps[h].current_token, *hyps[h].ctx, p);
  }
  return out;
}

inline GuidanceOutcome guided_update(const ModelParams& p, TokenId current_token,
                                     DecoderContext& ctx, const NextTokenDistribution& o,
                                     std::span<const TokenId> top_ids, std::span<const double> tc,
                                     const GuidanceConfig& cfg) {
  const GuidedHypothesis h[1] = {{current_token, &ctx, &o, top_ids, tc}};
  return guided_update(p, std::span<const GuidedHypothesis>(h), cfg).front();
}

struct TriggerDecision {
  bool triggered = false;
  std::vector<bool> flagged;                     // per hypothesis: toxic candidate present
  std::vector<std::vector<TokenId>> candidates;  // top-M ids per hypothesis
  std::vector<std::vector<double>> tc;           // TC per candidate
  std::size_t classifier_calls = 0;
};

// Scores the top-M continuations of every hypothesis. A toxic prefix makes
// every continuation toxic, so it is scored once and the candidates are not
// re-scored.
inline TriggerDecision should_trigger(std::span<const std::vector<TokenId>> prefixes,
                                      std::span<const NextTokenDistribution* const> dists,
                                      const ToxicityScorer& scorer, const GuidanceConfig& cfg) {
  if (prefixes.size() != dists.size())
    throw ContractError("should_trigger: one distribution per hypothesis required");
  TriggerDecision d;
  for (std::size_t h = 0; h < prefixes.size(); ++h) {
    if (cfg.top_m > dists[h]->probs.size())
      throw ContractError("should_trigger: top_m exceeds vocabulary size");
    auto top = top_m_indices(dists[h]->probs, cfg.top_m);
    const double prefix_tc = scorer.score(prefixes[h]);
    ++d.classifier_calls;
    std::vector<double> tc;
    if (prefix_tc >= 1.0) {
      tc.assign(top.size(), 1.0);
    } else {
      tc = score_continuations(prefixes[h], top, scorer);
      d.classifier_calls += top.size();
    }
    const bool toxic = std::any_of(tc.begin(), tc.end(), [](double v) { return v > 0.0; });
    d.flagged.push_back(toxic);
    d.triggered = d.triggered || toxic;
    d.candidates.push_back(std::move(top));
    d.tc.push_back(std::move(tc));
  }
  if (cfg.trigger_mode == TriggerMode::kAlways) {
    d.triggered = !prefixes.empty();
    std::fill(d.flagged.begin(), d.flagged.end(), true);
  }
  return d;
}

}  // namespace resetox
