#pragma once

// End-to-end experiment plumbing shared by the command-line driver and the
// acceptance suite: configuration, fixture loading, corpus translation,
// ablation sweeps and the guidance gradient check.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resetox/corpus.hpp"
#include "resetox/decoding.hpp"
#include "resetox/guidance.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/lexicon.hpp"
#include "resetox/metrics.hpp"
#include "resetox/model.hpp"
#include "resetox/training.hpp"
#include "resetox/vocabulary.hpp"
#include "resetox/weights_io.hpp"

namespace resetox {

struct ExperimentSpec {
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 3;

  static ExperimentSpec from_kv(const KeyValueConfig& kv) {
    ExperimentSpec e;
    e.corpus = CorpusSpec::from_kv(kv);
    e.train = TrainConfig::from_kv(kv);
    e.init_seed = static_cast<std::uint64_t>(kv.get_int("init_seed", static_cast<long long>(e.init_seed)));
    auto& m = e.model;
    auto count = [&](const char* key, std::size_t& field) {
      field = static_cast<std::size_t>(kv.get_int(key, static_cast<long long>(field)));
    };
    count("vocab_size", m.vocab_size);
    count("d_model", m.d_model);
    count("n_heads", m.n_heads);
    count("d_k", m.d_k);
    count("n_layers_enc", m.n_layers_enc);
    count("n_layers_dec", m.n_layers_dec);
    count("d_ff", m.d_ff);
    count("max_len", m.max_len);
    m.validate();
    return e;
  }

  static ExperimentSpec load(const std::string& path) { return from_kv(KeyValueConfig::load(path)); }
};

// Everything a translation run needs, loaded from one directory:
// vocab.txt, lexicon.txt, model.bin and optionally heldout.jsonl.
struct Fixture {
  Vocabulary vocab;
  ToxicityLexicon lexicon;
  ModelParams params;
  std::vector<SentencePair> heldout;

  static Fixture load(const std::filesystem::path& dir) {
    Fixture f;
    f.vocab = Vocabulary::load((dir / "vocab.txt").string());
    f.lexicon = load_lexicon((dir / "lexicon.txt").string(), "spa_Toy");
    f.params = load_weights((dir / "model.bin").string());
    if (std::filesystem::exists(dir / "heldout.jsonl"))
      f.heldout = load_jsonl((dir / "heldout.jsonl").string());
    if (f.vocab.size() > f.params.config.vocab_size)
      throw FormatError("fixture: vocabulary larger than the model's vocab_size");
    return f;
  }

  std::vector<std::string> sources() const {
    std::vector<std::string> out;
    for (const auto& p : heldout) out.push_back(p.src);
    return out;
  }
  std::vector<std::string> references() const {
    std::vector<std::string> out;
    for (const auto& p : heldout) out.push_back(p.tgt);
    return out;
  }
};

// Writes the generated data of `spec` into `dir`.
inline Corpus write_dataset(const ExperimentSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Corpus corpus = generate(spec.corpus);
  save_jsonl(corpus.train_pairs(), (dir / "train.jsonl").string());
  save_jsonl(corpus.heldout, (dir / "heldout.jsonl").string());
  toy_vocabulary(spec.corpus.grammar, spec.model.vocab_size).save((dir / "vocab.txt").string());
  std::ofstream lex(dir / "lexicon.txt", std::ios::trunc);
  if (!lex) throw IoError("cannot write " + (dir / "lexicon.txt").string());
  lex << "# synthetic toxic lexicon\n";
  for (const auto& w : spec.corpus.grammar.toxic_words) lex << w << '\n';
  return corpus;
}

struct TranslationRun {
  std::vector<std::string> hypotheses;  // empty string for failed sentences
  CorpusResult result;
};

inline TranslationRun translate_sentences(const std::vector<std::string>& sources, const Fixture& fx,
                                          const BeamConfig& beam, const GuidanceConfig* guidance,
                                          std::size_t threads = 1) {
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(sources.size());
  for (const auto& s : sources) ids.push_back(fx.vocab.encode(s));
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  TranslationRun run;
  run.result = translate_corpus(ids, fx.params, beam, guidance ? &scorer : nullptr, guidance, threads);
  for (const auto& s : run.result.sentences)
    run.hypotheses.push_back(s.decoded ? fx.vocab.decode(s.decoded->best.tokens) : std::string());
  return run;
}

inline nlohmann::json event_record(std::size_t sentence, const GuidanceEvent& e, const Vocabulary& v) {
  return {{"sentence", sentence},
          {"step", e.step},
          {"hypothesis", e.hypothesis},
          {"triggered", e.triggered},
          {"updated", e.updated},
          {"loss_total", e.loss_total},
          {"loss_mitigation", e.loss_mitigation},
          {"loss_faithfulness", e.loss_faithfulness},
          {"grad_norm", e.grad_norm},
          {"chosen_before", v.token(e.chosen_before)},
          {"chosen_after", v.token(e.chosen_after)}};
}

struct AblationRow {
  double alpha = 0.0;
  UpdateTarget target = UpdateTarget::kSelf;
  TriggerMode trigger = TriggerMode::kConditional;
  std::size_t etox = 0;
  double chrf = 0.0;
  double bleu = 0.0;
  double similarity = 0.0;
  DecodeAccounting accounting;
};

struct AblationGrid {
  std::vector<double> alphas{0.0, 0.2, 0.5, 0.8, 1.0};
  std::vector<UpdateTarget> targets{UpdateTarget::kSelf};
  std::vector<TriggerMode> triggers{TriggerMode::kConditional};
};

// One row per (alpha, target, trigger) in that nesting order; the other
// guidance settings come from `base`. Rows are computed concurrently when
// `threads` > 1 and assembled in grid order.
inline std::vector<AblationRow> run_ablation(const Fixture& fx, const BeamConfig& beam,
                                             const GuidanceConfig& base, const AblationGrid& grid,
                                             std::size_t threads = 1) {
  if (grid.alphas.empty() || grid.targets.empty() || grid.triggers.empty())
    throw ContractError("ablate: empty grid");
  if (fx.heldout.empty()) throw ContractError("ablate: fixture has no held-out set");
  std::vector<AblationRow> rows;
  for (double a : grid.alphas)
    for (auto t : grid.targets)
      for (auto m : grid.triggers) {
        AblationRow row;
        row.alpha = a;
        row.target = t;
        row.trigger = m;
        rows.push_back(row);
      }
  const auto sources = fx.sources();
  const auto refs = fx.references();
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < rows.size(); i += stride) {
      auto& row = rows[i];
      GuidanceConfig cfg = base;
      cfg.alpha = row.alpha;
      cfg.update_target = row.target;
      cfg.trigger_mode = row.trigger;
      const auto run = translate_sentences(sources, fx, beam, &cfg);
      const auto rep = evaluate_system("ablation", sources, run.hypotheses, refs, fx.lexicon, fx.vocab,
                                       &fx.params);
      row.etox = rep.etox_count;
      row.chrf = rep.chrf;
      row.bleu = rep.bleu;
      row.similarity = rep.similarity;
      row.accounting = run.result.accounting;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, rows.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  return rows;
}

struct GradcheckReport {
  double worst_error = 0.0;
  std::size_t coordinates = 0;
  double grad_norm = 0.0;  // of the full objective at the checked context
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Finite-difference check of the guidance objective with respect to the
// self and cross caches of a live decode step. Along greedy decoding of
// `src`, the checked step is the triggering one with the largest objective
// gradient (the last step when nothing triggers): confident steps have
// gradients near the round-off floor of central differences. With
// `after_update` the check runs at the context produced by one guided
// update, where both loss terms have non-zero gradients.
// The cache entries are O(1) and the loss is O(1), so eps = 1e-3 keeps the
// truncation error small while round-off stays near 1e-13; coordinates with
// gradients below `floor` are compared absolutely.
inline GradcheckReport gradcheck_guidance(const ModelParams& p, std::span<const TokenId> src,
                                          const ToxicityScorer& scorer, const GuidanceConfig& cfg,
                                          std::size_t coords_per_tensor, std::uint64_t seed,
                                          bool after_update = true, double eps = 1e-3,
                                          double floor = 1e-6) {
  cfg.validate(p.config.vocab_size);
  struct Site {
    DecoderContext ctx;
    TokenId current = special::kBos;
    NextTokenDistribution o;
    std::vector<TokenId> top;
    std::vector<double> tc;
  };
  auto objective_norm = [&](Site& s) {
    auto leaves = context_tensors(s.ctx, true, true);
    Tensor logits = decoder_position(p, s.current, leaves, false);
    backward(guidance_loss(logits, s.o, s.top, theta_tc(s.tc), cfg.alpha).total);
    double sq = 0;
    for (const auto& l : leaves)
      for (const Tensor* t : {&l.self_k, &l.self_v, &l.cross_k, &l.cross_v})
        if (t->has_grad())
          for (double g : t->grad()) sq += g * g;
    return std::sqrt(sq);
  };

  DecoderContext ctx = encode(src, p).context;
  std::vector<TokenId> prefix;
  TokenId current = special::kBos;
  std::optional<Site> chosen;
  double chosen_norm = -1.0;
  for (std::size_t step = 0; step < std::min<std::size_t>(p.config.max_len, 60); ++step) {
    Site site{ctx, current, {}, {}, {}};
    site.o = decode_step(current, site.ctx, p);
    ctx = site.ctx;
    const std::vector<TokenId> prefixes[1] = {prefix};
    const NextTokenDistribution* dists[1] = {&site.o};
    const auto decision = should_trigger(prefixes, dists, scorer, cfg);
    site.top = decision.candidates[0];
    site.tc = decision.tc[0];
    const auto best = static_cast<TokenId>(
        std::max_element(site.o.probs.begin(), site.o.probs.end()) - site.o.probs.begin());
    const bool last = best == special::kEos || step + 1 == std::min<std::size_t>(p.config.max_len, 60);
    if (decision.flagged[0] || (last && !chosen)) {
      const double norm = objective_norm(site);
      if (norm > chosen_norm) {
        chosen_norm = norm;
        chosen = std::move(site);
      }
    }
    if (last) break;
    prefix.push_back(best);
    current = best;
  }
  Site& site = *chosen;
  if (after_update) guided_update(p, site.current, site.ctx, site.o, site.top, site.tc, cfg);
  ctx = site.ctx;
  current = site.current;
  const NextTokenDistribution& o = site.o;
  const auto& top = site.top;
  const auto theta = theta_tc(site.tc);

  GradcheckReport report;
  report.grad_norm = objective_norm(site);

  std::mt19937_64 rng(seed);
  const char* names[4] = {"self_k", "self_v", "cross_k", "cross_v"};
  for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
    for (int which = 0; which < 4; ++which) {
      auto base = context_tensors(ctx, false, false);
      auto slot = [which](LayerKV& kv) -> Tensor& {
        switch (which) {
          case 0: return kv.self_k;
          case 1: return kv.self_v;
          case 2: return kv.cross_k;
          default: return kv.cross_v;
        }
      };
      const Tensor x = slot(base[l]);
      std::vector<std::size_t> coords(std::min(coords_per_tensor, x.size()));
      std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
      for (auto& c : coords) c = pick(rng);
      auto f = [&](const Tensor& probe) {
        auto kv = base;
        slot(kv[l]) = probe;
        Tensor logits = decoder_position(p, current, kv, false);
        return guidance_loss(logits, o, top, theta, cfg.alpha).total;
      };
      const double err = finite_diff_check(f, x, eps, coords, floor);
      report.per_tensor.emplace_back("layer" + std::to_string(l) + "." + names[which], err);
      report.worst_error = std::max(report.worst_error, err);
      report.coordinates += coords.size();
    }
  }
  return report;
}

}  // namespace resetox
