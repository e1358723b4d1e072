// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criterion 8 (the ablation trend) is reported but does not affect the exit
// status; every other criterion is gating.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "resetox/experiment.hpp"

using namespace resetox;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path fixture_dir() { return fs::path(RESETOX_FIXTURES) / "toy"; }

std::size_t threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Shared state: the retrained model and its baseline/guided translations.
struct Experiment {
  Fixture fx;
  BeamConfig beam;
  GuidanceConfig guidance;
  std::vector<std::string> sources, refs;
  TranslationRun baseline, guided;
  MetricReport base_report, guided_report, removal_report;
  double train_seconds = 0, total_seconds = 0;
  bool checksum_matches = false;
};

Experiment run_experiment() {
  const auto t0 = Clock::now();
  const auto kv = KeyValueConfig::load((fixture_dir() / "experiment.cfg").string());
  const auto spec = ExperimentSpec::from_kv(kv);

  // Regenerate the data and retrain from scratch; the result must be the
  // shipped checkpoint bit for bit.
  const auto dir = fs::temp_directory_path() / "resetox_acceptance";
  fs::remove_all(dir);
  write_dataset(spec, dir);
  const Vocabulary vocab = Vocabulary::load((dir / "vocab.txt").string());
  const auto t_train = Clock::now();
  auto trained = train(tokenize_pairs(load_jsonl((dir / "train.jsonl").string()), vocab), spec.model,
                       spec.train, spec.init_seed);
  Experiment e;
  e.train_seconds = seconds_since(t_train);
  const auto shipped = KeyValueConfig::load((fixture_dir() / "train_summary.txt").string());
  e.checksum_matches = shipped.get_or("checksum", "") == std::to_string(weights_checksum(trained.params));

  e.fx.vocab = vocab;
  e.fx.lexicon = load_lexicon((dir / "lexicon.txt").string(), "spa_Toy");
  e.fx.params = std::move(trained.params);
  e.fx.heldout = load_jsonl((dir / "heldout.jsonl").string());
  e.sources = e.fx.sources();
  e.refs = e.fx.references();
  e.beam = {static_cast<std::size_t>(kv.get_int("beam", 5)),
            static_cast<std::size_t>(kv.get_int("max_decode_len", 100)), false};
  e.guidance = GuidanceConfig::from_kv(kv);

  e.baseline = translate_sentences(e.sources, e.fx, e.beam, nullptr, threads());
  e.guided = translate_sentences(e.sources, e.fx, e.beam, &e.guidance, threads());
  e.base_report = evaluate_system("baseline", e.sources, e.baseline.hypotheses, e.refs, e.fx.lexicon,
                                  e.fx.vocab, &e.fx.params);
  e.guided_report = evaluate_system("resetox", e.sources, e.guided.hypotheses, e.refs, e.fx.lexicon,
                                    e.fx.vocab, &e.fx.params, e.base_report.etox_count);
  e.removal_report = evaluate_system("remove-words", e.sources, removal_baseline(e.baseline.hypotheses, e.fx.lexicon),
                                     e.refs, e.fx.lexicon, e.fx.vocab, &e.fx.params, e.base_report.etox_count);
  e.total_seconds = seconds_since(t0);
  fs::remove_all(dir);
  return e;
}

Outcome gradient_correctness(const Experiment& e) {
  const auto t0 = Clock::now();
  LexiconScorer scorer(e.fx.lexicon, e.fx.vocab);
  double worst = 0;
  std::size_t coords = 0, checks = 0;
  for (std::size_t s = 0; s < 6; ++s) {
    const auto src = e.fx.vocab.encode(e.sources[s]);
    for (bool updated : {false, true}) {
      const auto r = gradcheck_guidance(e.fx.params, src, scorer, e.guidance, 32, 1 + s, updated);
      worst = std::max(worst, r.worst_error);
      coords = std::max(coords, r.coordinates);
      ++checks;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && coords >= 200 && secs < 120,
          fmt("worst relative error %.2e, %zu coordinates per check, %zu checks, %.1f s", worst, coords,
              checks, secs)};
}

Outcome cache_consistency(const Experiment& e) {
  const auto& p = e.fx.params;
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<TokenId> tok(special::kUnk + 1, static_cast<TokenId>(e.fx.vocab.size() - 1));
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto src = e.fx.vocab.encode(e.sources[static_cast<std::size_t>(trial)]);
    const std::size_t len = trial < 5 ? 100 : 1 + rng() % 100;
    std::vector<TokenId> prefix{special::kBos};
    while (prefix.size() < len) prefix.push_back(tok(rng));
    const auto enc = encode(src, p);
    const Tensor full = decoder_forward(p, enc.states, prefix);
    DecoderContext ctx = enc.context;
    const std::size_t v = p.config.vocab_size;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const auto d = decode_step(prefix[i], ctx, p);
      for (std::size_t j = 0; j < v; ++j) worst = std::max(worst, std::abs(d.logits[j] - full.data()[i * v + j]));
    }
  }
  return {worst < 1e-9, fmt("max |logit difference| %.2e over 50 prefixes", worst)};
}

Outcome no_trigger_equivalence(const Experiment& e) {
  std::vector<std::vector<TokenId>> ids;
  for (const auto& s : e.sources) ids.push_back(e.fx.vocab.encode(s));
  ConstantScorer clean(0.0);
  GuidanceConfig cfg = e.guidance;
  cfg.trigger_mode = TriggerMode::kConditional;
  const auto guided = translate_corpus(ids, e.fx.params, e.beam, &clean, &cfg, threads());
  const auto plain = translate_corpus(ids, e.fx.params, e.beam, nullptr, nullptr, threads());
  std::size_t differing = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& a = guided.sentences[i].decoded;
    const auto& b = plain.sentences[i].decoded;
    if (!a || !b || a->best.tokens != b->best.tokens || a->best.log_score != b->best.log_score) ++differing;
  }
  return {differing == 0 && guided.accounting.m == 0 && ids.size() == 200,
          fmt("%zu of %zu sentences differ, m = %zu", differing, ids.size(), guided.accounting.m)};
}

Outcome single_update(const Experiment& e) {
  std::size_t duplicates = 0, missing = 0, triggered = 0, updates = 0;
  for (const auto& s : e.guided.result.sentences) {
    if (!s.decoded) continue;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& ev : s.decoded->events) {
      if (!seen.insert({ev.step, ev.hypothesis}).second) ++duplicates;
      if (!ev.triggered) continue;
      // Slots that hold no hypothesis yet (only at the first step) have no context to update.
      const bool real = ev.step > 0 || ev.hypothesis == 0;
      if (!real) continue;
      ++triggered;
      updates += ev.updated;
      if (!ev.updated) ++missing;
    }
  }
  return {duplicates == 0 && missing == 0 && triggered > 0,
          fmt("%zu triggered hypothesis steps, %zu updates, %zu duplicates", triggered, updates, duplicates)};
}

Outcome mitigation(const Experiment& e) {
  const double red = e.guided_report.reduction_pct.value_or(0.0);
  const double ratio = e.guided_report.chrf / e.base_report.chrf;
  return {e.guided.result.failures == 0 && red >= 50.0 && ratio >= 0.95 && e.total_seconds < 600 &&
              e.checksum_matches,
          fmt("etox %zu -> %zu (%.1f%% reduction), chrF %.2f -> %.2f (%.1f%%), retrain %.0f s "
              "(checkpoint %s), end to end %.0f s",
              e.base_report.etox_count, e.guided_report.etox_count, red, e.base_report.chrf,
              e.guided_report.chrf, 100.0 * ratio, e.train_seconds,
              e.checksum_matches ? "reproduced" : "DIFFERS", e.total_seconds)};
}

Outcome loss_gates() {
  bool ok = true;
  const auto t = theta_tc(std::vector<double>{1, 0});
  ok &= std::abs(t[0] - 0.26894) <= 1e-5 && std::abs(t[1] - 0.73106) <= 1e-5;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  auto dist = [&](std::size_t n) {
    std::vector<double> v(n);
    double total = 0;
    for (auto& x : v) total += x = u(rng) < 0.1 ? 0.0 : std::exp(5 * u(rng));
    if (total == 0) v[0] = total = 1;
    for (auto& x : v) x /= total;
    return v;
  };
  double worst_self = 0, min_lf = INFINITY, min_lm = INFINITY;
  for (int i = 0; i < 1000; ++i) {
    const auto a = dist(2 + rng() % 40), b = dist(a.size());
    worst_self = std::max(worst_self, std::abs(faithfulness_loss(a, a).value));
    min_lf = std::min(min_lf, faithfulness_loss(a, b).value);
    const std::size_t m = 1 + rng() % std::min<std::size_t>(a.size(), 10);
    std::vector<double> tc(m);
    for (auto& x : tc) x = u(rng) < 0.5 ? 1.0 : u(rng);
    min_lm = std::min(min_lm, mitigation_loss(std::span(a).first(m), theta_tc(tc)));
  }
  ok &= worst_self <= 1e-12 && min_lf >= 0 && min_lm >= 0;
  const double lm = mitigation_loss(std::vector<double>{0.5, 0.3}, t);
  const double lf = faithfulness_loss(std::vector<double>{0.5, 0.5}, std::vector<double>{0.9, 0.1}).value;
  const double combined = combined_loss(lm, lf, 0.2);
  ok &= std::abs(combined - 0.5588) <= 1e-4;
  return {ok, fmt("theta [%.5f, %.5f], max L_f(o,o) %.1e, min L_f %.2e, min L_m %.2e, combined %.4f", t[0],
                  t[1], worst_self, min_lf, min_lm, combined)};
}

Outcome removal_contrast(const Experiment& e) {
  const double removal_up = e.removal_report.fluency_nll - e.base_report.fluency_nll;
  const double guided_up = e.guided_report.fluency_nll - e.base_report.fluency_nll;
  return {e.removal_report.etox_count == 0 && removal_up > guided_up,
          fmt("removal etox %zu, fluency NLL +%.4f (removal) vs %+.4f (guided) over baseline %.4f",
              e.removal_report.etox_count, removal_up, guided_up, e.base_report.fluency_nll)};
}

Outcome ablation_trend(const Experiment& e, std::vector<AblationRow>& rows) {
  AblationGrid grid;
  grid.targets = {UpdateTarget::kSelf, UpdateTarget::kBoth};
  rows = run_ablation(e.fx, e.beam, e.guidance, grid, threads());
  std::vector<std::size_t> self_etox;
  double chrf_self = 0, chrf_both = 0;
  std::ostringstream series;
  for (const auto& r : rows) {
    if (r.target == UpdateTarget::kSelf) {
      self_etox.push_back(r.etox);
      series << (self_etox.size() > 1 ? " " : "") << r.etox;
    }
    if (std::abs(r.alpha - 0.2) < 1e-12) (r.target == UpdateTarget::kSelf ? chrf_self : chrf_both) = r.chrf;
  }
  std::size_t inversions = 0;
  for (std::size_t i = 1; i < self_etox.size(); ++i) inversions += self_etox[i] > self_etox[i - 1];
  const bool both_degrades = chrf_both <= chrf_self;
  return {inversions <= 1 && both_degrades,
          fmt("etox over alpha {0,.2,.5,.8,1}: %s (%zu inversions); chrF at alpha .2: self %.2f, both %.2f",
              series.str().c_str(), inversions, chrf_self, chrf_both)};
}

Outcome accounting(const Experiment& e, const std::vector<AblationRow>& rows) {
  const std::size_t k = e.beam.beam_size, M = e.guidance.top_m;
  std::size_t runs = 0, violations = 0;
  auto check = [&](const DecodeAccounting& a) {
    ++runs;
    if (a.wall_steps != k * (a.n + a.m) || a.classifier_calls > (k * M + k) * a.n || a.m > a.n) ++violations;
  };
  for (const auto* run : {&e.baseline, &e.guided})
    for (const auto& s : run->result.sentences)
      if (s.decoded) check(s.decoded->accounting);
  for (const auto& r : rows) check(r.accounting);
  const auto& g = e.guided.result.accounting;
  return {violations == 0 && runs > 0,
          fmt("%zu runs, %zu violations; guided totals n %zu, m %zu, wall_steps %zu, classifier_calls %zu", runs,
              violations, g.n, g.m, g.wall_steps, g.classifier_calls)};
}

Outcome metric_fixtures() {
  const double b = bleu({"the cat sat"}, {"the cat sat down"});
  const double c = chrf({"abc"}, {"abd"});
  const double r = reduction(981, 314).value_or(-1);
  const bool ok = std::abs(b - 100.0 * std::exp(1.0 - 4.0 / 3.0)) <= 1e-4 &&
                  std::abs(c - 100.0 * 7.0 / 18.0) <= 1e-4 && std::abs(r - 68.0) <= 0.1 &&
                  std::abs(bleu({"a b c d"}, {"a b c d"}) - 100.0) <= 1e-4;
  return {ok, fmt("BLEU %.4f, chrF %.4f, reduction(981, 314) %.2f%%", b, c, r)};
}

}  // namespace

int main() {
  int failed_gates = 0;
  auto report = [&](int id, const char* name, const Outcome& o, bool gating = true) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << o.detail
              << (gating ? "" : " (report only)") << std::endl;
    if (gating && !o.pass) ++failed_gates;
  };
  try {
    const Experiment e = run_experiment();
    std::vector<AblationRow> rows;
    report(1, "gradient correctness", gradient_correctness(e));
    report(2, "cache consistency", cache_consistency(e));
    report(3, "no-trigger equivalence", no_trigger_equivalence(e));
    report(4, "single-update discipline", single_update(e));
    report(5, "mitigation", mitigation(e));
    report(6, "loss unit gates", loss_gates());
    report(7, "removal-baseline contrast", removal_contrast(e));
    report(8, "ablation trend", ablation_trend(e, rows), false);
    report(9, "accounting model", accounting(e, rows));
    report(10, "metric fixtures", metric_fixtures());
  } catch (const std::exception& ex) {
    std::cout << "FAIL  acceptance aborted: " << ex.what() << std::endl;
    return 1;
  }
  return failed_gates == 0 ? 0 : 1;
}
