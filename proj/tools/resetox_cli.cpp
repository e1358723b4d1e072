// Experiment driver: gen-data, train, translate, evaluate, ablate, gradcheck.
//
// Settings come from an optional key/value manifest (--config) and are
// overridden by flags. Every subcommand writes into <out>.partial and
// renames it to <out> only after all files are complete.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "resetox/experiment.hpp"

namespace fs = std::filesystem;
using namespace resetox;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitIo = 2;
constexpr int kExitGate = 3;
constexpr double kGradcheckGate = 1e-3;

struct Options {
  std::string config;
  std::string out;
  std::string fixture;
  std::string lexicon;
  std::string checkpoint;
  std::string data;
  std::string source;
  std::string hyp;
  std::string ref;
  std::string baseline_hyp;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> beam;
  std::optional<std::size_t> max_len;
  std::optional<double> alpha;
  std::optional<double> lambda;
  std::optional<std::size_t> top_m;
  std::optional<std::string> target;
  std::optional<std::string> trigger;
  std::optional<std::string> norm;
  std::string guidance = "on";
  std::string baseline = "none";
  std::size_t threads = 0;
  std::vector<double> alphas;
  std::vector<std::string> targets;
  std::vector<std::string> triggers;
  std::size_t coords = 32;
  std::size_t sentence = 0;
  std::string at = "updated";
  double eps = 1e-3;
};

// Manifest plus the directory its relative paths are resolved against.
struct Manifest {
  KeyValueConfig kv;
  fs::path base = ".";

  static Manifest load(const std::string& path) {
    Manifest m;
    if (path.empty()) return m;
    m.kv = KeyValueConfig::load(path);
    m.base = fs::path(path).parent_path();
    return m;
  }

  // Flag value when given, else the manifest key resolved against the
  // manifest's directory, else empty.
  std::string path(const std::string& flag, const std::string& key) const {
    if (!flag.empty()) return flag;
    auto v = kv.get(key);
    if (!v || v->empty()) return {};
    fs::path p(*v);
    return p.is_absolute() ? p.string() : (base / p).string();
  }
};

class OutputDir {
 public:
  explicit OutputDir(const std::string& out) {
    if (out.empty()) throw ContractError("--out is required");
    final_ = out;
    partial_ = out + ".partial";
    fs::remove_all(partial_);
    fs::create_directories(partial_);
  }
  ~OutputDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(partial_, ec);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  std::string operator/(const std::string& name) const { return (partial_ / name).string(); }

  void commit() {
    fs::remove_all(final_);
    if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
    fs::rename(partial_, final_);
    committed_ = true;
  }

 private:
  fs::path final_, partial_;
  bool committed_ = false;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ContractError(std::string("missing ") + what);
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::size_t thread_count(const Options& o) {
  if (o.threads) return o.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

BeamConfig beam_config(const Options& o, const Manifest& m) {
  BeamConfig b;
  b.beam_size = o.beam.value_or(static_cast<std::size_t>(m.kv.get_int("beam", 5)));
  b.max_len = o.max_len.value_or(static_cast<std::size_t>(m.kv.get_int("max_decode_len", 100)));
  b.length_normalize = m.kv.get_int("length_normalize", 0) != 0;
  return b;
}

GuidanceConfig guidance_config(const Options& o, const Manifest& m) {
  GuidanceConfig g = GuidanceConfig::from_kv(m.kv);
  if (o.alpha) g.alpha = *o.alpha;
  if (o.lambda) g.lambda = *o.lambda;
  if (o.top_m) g.top_m = *o.top_m;
  if (o.target) g.update_target = parse_update_target(*o.target);
  if (o.trigger) g.trigger_mode = parse_trigger_mode(*o.trigger);
  if (o.norm) g.norm_mode = parse_norm_mode(*o.norm);
  return g;
}

// Vocabulary, lexicon and checkpoint from the fixture directory, each
// replaceable by its own flag or manifest key.
Fixture load_fixture(const Options& o, const Manifest& m, bool need_model = true) {
  const std::string dir = m.path(o.fixture, "fixture");
  auto in_dir = [&](const char* name) { return dir.empty() ? std::string() : (fs::path(dir) / name).string(); };
  std::string vocab = m.path("", "vocab");
  if (vocab.empty()) vocab = in_dir("vocab.txt");
  std::string lexicon = m.path(o.lexicon, "lexicon");
  if (lexicon.empty()) lexicon = in_dir("lexicon.txt");
  std::string checkpoint = m.path(o.checkpoint, "checkpoint");
  if (checkpoint.empty()) checkpoint = in_dir("model.bin");

  require_file(vocab, "vocabulary (--fixture or 'vocab' key)");
  require_file(lexicon, "lexicon (--lexicon or --fixture)");
  Fixture f;
  f.vocab = Vocabulary::load(vocab);
  f.lexicon = load_lexicon(lexicon, m.kv.get_or("language", "spa_Toy"));
  if (need_model) {
    require_file(checkpoint, "checkpoint (--checkpoint or --fixture)");
    f.params = load_weights(checkpoint);
    if (f.vocab.size() > f.params.config.vocab_size)
      throw FormatError("vocabulary larger than the checkpoint's vocab_size");
  }
  const std::string heldout = in_dir("heldout.jsonl");
  if (!heldout.empty() && fs::exists(heldout)) f.heldout = load_jsonl(heldout);
  return f;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

KeyValueConfig accounting_kv(const DecodeAccounting& a, std::size_t failures) {
  KeyValueConfig kv;
  kv.set("n", std::to_string(a.n));
  kv.set("m", std::to_string(a.m));
  kv.set("classifier_calls", std::to_string(a.classifier_calls));
  kv.set("wall_steps", std::to_string(a.wall_steps));
  kv.set("failures", std::to_string(failures));
  return kv;
}

int cmd_gen_data(const Options& o) {
  Manifest m = Manifest::load(o.config);
  if (o.seed) m.kv.set("seed", std::to_string(*o.seed));
  const ExperimentSpec spec = ExperimentSpec::from_kv(m.kv);
  OutputDir out(m.path(o.out, "out"));
  const Corpus corpus = write_dataset(spec, out / "");
  write_text(m.kv.to_string(), out / "experiment.cfg");
  out.commit();
  std::cout << "train pairs " << corpus.train.size() << " (corrupted " << corpus.corrupted()
            << "), held-out " << corpus.heldout.size() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o) {
  Manifest m = Manifest::load(o.config);
  if (o.seed) m.kv.set("train_seed", std::to_string(*o.seed));
  ExperimentSpec spec = ExperimentSpec::from_kv(m.kv);
  const std::string data = m.path(o.data, "data");
  if (data.empty()) throw ContractError("train: --data (a gen-data output directory) is required");
  const fs::path dir(data);
  for (const char* f : {"train.jsonl", "heldout.jsonl", "vocab.txt", "lexicon.txt"})
    require_file((dir / f).string(), f);
  const Vocabulary vocab = Vocabulary::load((dir / "vocab.txt").string());
  if (vocab.size() > spec.model.vocab_size)
    throw ContractError("train: vocabulary has " + std::to_string(vocab.size()) +
                        " tokens but vocab_size is " + std::to_string(spec.model.vocab_size));
  const auto train_set = tokenize_pairs(load_jsonl((dir / "train.jsonl").string()), vocab);
  const auto heldout = load_jsonl((dir / "heldout.jsonl").string());

  OutputDir out(m.path(o.out, "out"));
  spec.train.checkpoint_path = out / "model.bin";
  const auto result = train(train_set, spec.model, spec.train, spec.init_seed, [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss " << fmt(r.loss, 6) << std::endl;
  });
  save_curve(result.curve, out / "loss_curve.jsonl");
  const auto metrics = evaluate_heldout(result.params, tokenize_pairs(heldout, vocab));
  KeyValueConfig summary;
  summary.set("heldout_nll", fmt(metrics.nll, 6));
  summary.set("heldout_exact_match", fmt(metrics.exact_match, 4));
  summary.set("diverged", result.diverged ? "1" : "0");
  summary.set("checksum", std::to_string(weights_checksum(result.params)));
  write_text(summary.to_string(), out / "train_summary.txt");
  for (const char* f : {"vocab.txt", "lexicon.txt", "heldout.jsonl"}) fs::copy_file(dir / f, out / f);
  write_text(m.kv.to_string(), out / "experiment.cfg");
  out.commit();
  std::cout << summary.to_string();
  return result.diverged ? kExitContract : kExitOk;
}

int cmd_translate(const Options& o) {
  const Manifest m = Manifest::load(o.config);
  const Fixture fx = load_fixture(o, m);
  const BeamConfig beam = beam_config(o, m);
  const GuidanceConfig g = guidance_config(o, m);
  const bool guided = o.guidance == "on";
  if (guided) g.validate(fx.params.config.vocab_size);

  const std::string source = m.path(o.source, "source");
  std::vector<std::string> sources;
  if (!source.empty()) {
    require_file(source, "source file");
    sources = read_lines(source);
  } else {
    if (fx.heldout.empty()) throw ContractError("translate: no --source and no held-out set in the fixture");
    sources = fx.sources();
  }

  OutputDir out(m.path(o.out, "out"));
  const auto run = translate_sentences(sources, fx, beam, guided ? &g : nullptr, thread_count(o));
  std::vector<std::string> hyps = run.hypotheses;
  if (o.baseline == "remove-words") hyps = removal_baseline(hyps, fx.lexicon);
  write_lines(hyps, out / "hypotheses.txt");
  write_lines(sources, out / "sources.txt");

  std::ofstream events(out / "events.jsonl", std::ios::trunc);
  std::ofstream errors(out / "errors.txt", std::ios::trunc);
  for (std::size_t i = 0; i < run.result.sentences.size(); ++i) {
    const auto& s = run.result.sentences[i];
    if (!s.decoded) {
      errors << i << '\t' << s.error << '\n';
      continue;
    }
    for (const auto& e : s.decoded->events)
      if (e.triggered) events << event_record(i, e, fx.vocab).dump() << '\n';
  }
  events.close();
  errors.close();

  KeyValueConfig settings = g.to_kv();
  settings.set("guidance", o.guidance);
  settings.set("baseline", o.baseline);
  settings.set("beam", std::to_string(beam.beam_size));
  settings.set("max_decode_len", std::to_string(beam.max_len));
  write_text(settings.to_string(), out / "settings.txt");
  const auto acct = accounting_kv(run.result.accounting, run.result.failures);
  write_text(acct.to_string(), out / "accounting.txt");
  out.commit();
  std::cout << acct.to_string();
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  const Manifest m = Manifest::load(o.config);
  require_file(o.hyp, "--hyp file");
  require_file(o.ref, "--ref file");
  const auto hyps = read_lines(o.hyp);
  const auto refs = read_lines(o.ref);
  const std::string source = m.path(o.source, "source");
  const std::string checkpoint = m.path(o.checkpoint, "checkpoint");
  const bool with_model = !source.empty() && (!checkpoint.empty() || !m.path(o.fixture, "fixture").empty());
  const Fixture fx = load_fixture(o, m, with_model);
  const auto sources = source.empty() ? std::vector<std::string>(hyps.size()) : read_lines(source);

  std::vector<MetricReport> reports;
  std::optional<std::size_t> baseline_etox;
  if (!o.baseline_hyp.empty()) {
    require_file(o.baseline_hyp, "--baseline-hyp file");
    const auto base = read_lines(o.baseline_hyp);
    reports.push_back(evaluate_system("baseline", sources, base, refs, fx.lexicon, fx.vocab,
                                      with_model ? &fx.params : nullptr));
    baseline_etox = reports.back().etox_count;
  }
  reports.push_back(evaluate_system("system", sources, hyps, refs, fx.lexicon, fx.vocab,
                                    with_model ? &fx.params : nullptr, baseline_etox));
  if (o.baseline == "remove-words")
    reports.push_back(evaluate_system("remove-words", sources, removal_baseline(hyps, fx.lexicon), refs,
                                      fx.lexicon, fx.vocab, with_model ? &fx.params : nullptr,
                                      baseline_etox));

  OutputDir out(m.path(o.out, "out"));
  write_report(reports, out / "report.txt", out / "report.jsonl");
  out.commit();
  for (const auto& r : reports) std::cout << "[" << r.system << "]\n" << r.to_kv().to_string();
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const Manifest m = Manifest::load(o.config);
  const Fixture fx = load_fixture(o, m);
  const BeamConfig beam = beam_config(o, m);
  const GuidanceConfig base = guidance_config(o, m);
  AblationGrid grid;
  if (!o.alphas.empty()) grid.alphas = o.alphas;
  if (!o.targets.empty()) {
    grid.targets.clear();
    for (const auto& t : o.targets) grid.targets.push_back(parse_update_target(t));
  }
  if (!o.triggers.empty()) {
    grid.triggers.clear();
    for (const auto& t : o.triggers) grid.triggers.push_back(parse_trigger_mode(t));
  }
  for (double a : grid.alphas) {
    GuidanceConfig c = base;
    c.alpha = a;
    c.validate(fx.params.config.vocab_size);
  }

  OutputDir out(m.path(o.out, "out"));
  const auto rows = run_ablation(fx, beam, base, grid, thread_count(o));
  // Plot-ready: alpha on the horizontal axis, one series per metric.
  std::ofstream tsv(out / "ablation.tsv", std::ios::trunc);
  std::ofstream jsonl(out / "ablation.jsonl", std::ios::trunc);
  tsv << "alpha\ttarget\ttrigger\tetox_count\tchrf\tbleu\tsimilarity\tn\tm\twall_steps\tclassifier_calls\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << fmt(r.alpha, 3) << '\t' << to_string(r.target) << '\t' << to_string(r.trigger) << '\t'
         << r.etox << '\t' << fmt(r.chrf) << '\t' << fmt(r.bleu) << '\t' << fmt(r.similarity) << '\t'
         << r.accounting.n << '\t' << r.accounting.m << '\t' << r.accounting.wall_steps << '\t'
         << r.accounting.classifier_calls << '\n';
    tsv << line.str();
    std::cout << line.str();
    jsonl << nlohmann::json{{"alpha", r.alpha},
                            {"target", to_string(r.target)},
                            {"trigger", to_string(r.trigger)},
                            {"etox_count", r.etox},
                            {"chrf", r.chrf},
                            {"bleu", r.bleu},
                            {"similarity", r.similarity},
                            {"n", r.accounting.n},
                            {"m", r.accounting.m},
                            {"wall_steps", r.accounting.wall_steps},
                            {"classifier_calls", r.accounting.classifier_calls}}
                 .dump()
          << '\n';
  }
  tsv.close();
  jsonl.close();
  out.commit();
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  const Manifest m = Manifest::load(o.config);
  const Fixture fx = load_fixture(o, m);
  const GuidanceConfig g = guidance_config(o, m);
  std::vector<TokenId> src;
  const std::string source = m.path(o.source, "source");
  if (!source.empty()) {
    require_file(source, "source file");
    const auto lines = read_lines(source);
    if (o.sentence >= lines.size()) throw ContractError("gradcheck: --sentence out of range");
    src = fx.vocab.encode(lines[o.sentence]);
  } else {
    if (o.sentence >= fx.heldout.size()) throw ContractError("gradcheck: --sentence out of range");
    src = fx.vocab.encode(fx.heldout[o.sentence].src);
  }
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  const auto report = gradcheck_guidance(fx.params, src, scorer, g, o.coords, o.seed.value_or(1),
                                         o.at == "updated", o.eps);
  std::ostringstream text;
  for (const auto& [name, err] : report.per_tensor) text << name << " = " << err << '\n';
  text << "coordinates = " << report.coordinates << '\n'
       << "grad_norm = " << report.grad_norm << '\n'
       << "worst_error = " << report.worst_error << '\n';
  std::cout << text.str();
  if (!o.out.empty() || m.kv.has("out")) {
    OutputDir out(m.path(o.out, "out"));
    write_text(text.str(), out / "gradcheck.txt");
    out.commit();
  }
  if (!(report.worst_error <= kGradcheckGate)) {
    std::cerr << "gradcheck: worst error " << report.worst_error << " exceeds " << kGradcheckGate << '\n';
    return kExitGate;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"resetox: toxicity-guided decoding on a toy translation model"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key/value manifest");
    sub->add_option("--out", o.out, "output directory (written atomically)");
    sub->add_option("--seed", o.seed, "overrides the manifest seed");
    sub->add_option("--fixture", o.fixture, "directory with vocab.txt, lexicon.txt, model.bin, heldout.jsonl");
    sub->add_option("--lexicon", o.lexicon, "toxicity word list");
    sub->add_option("--checkpoint", o.checkpoint, "model weights");
    sub->add_option("--threads", o.threads, "worker threads (0: all cores)");
  };
  auto decoding = [&](CLI::App* sub) {
    sub->add_option("--beam", o.beam, "beam size (default 5)");
    sub->add_option("--max-len", o.max_len, "maximum output length (default 100)");
    sub->add_option("--alpha", o.alpha, "weight of the mitigation loss");
    sub->add_option("--lambda", o.lambda, "step size");
    sub->add_option("--top-m", o.top_m, "candidates scored per step");
    sub->add_option("--target", o.target, "caches to update")->check(CLI::IsMember({"self", "cross", "both"}));
    sub->add_option("--trigger", o.trigger, "when to update")->check(CLI::IsMember({"conditional", "always"}));
    sub->add_option("--norm", o.norm, "step normalization")->check(CLI::IsMember({"grad", "loss"}));
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic parallel corpus");
  common(gen);
  auto* tr = app.add_subcommand("train", "train the toy model on a generated corpus");
  common(tr);
  tr->add_option("--data", o.data, "gen-data output directory");
  auto* tl = app.add_subcommand("translate", "beam search with optional guidance");
  common(tl);
  decoding(tl);
  tl->add_option("--source", o.source, "one source sentence per line (default: fixture held-out set)");
  tl->add_option("--guidance", o.guidance, "on|off")->check(CLI::IsMember({"on", "off"}));
  tl->add_option("--baseline", o.baseline, "post-hoc baseline")->check(CLI::IsMember({"none", "remove-words"}));
  auto* ev = app.add_subcommand("evaluate", "score hypotheses against references");
  common(ev);
  ev->add_option("--hyp", o.hyp, "hypotheses, one per line")->required();
  ev->add_option("--ref", o.ref, "references, one per line")->required();
  ev->add_option("--source", o.source, "sources, for similarity and fluency");
  ev->add_option("--baseline-hyp", o.baseline_hyp, "baseline hypotheses, for the reduction");
  ev->add_option("--baseline", o.baseline, "also score the word-removal baseline")
      ->check(CLI::IsMember({"none", "remove-words"}));
  auto* ab = app.add_subcommand("ablate", "sweep alpha, update targets and trigger modes");
  common(ab);
  decoding(ab);
  ab->add_option("--alphas", o.alphas, "alpha grid (default 0 0.2 0.5 0.8 1)");
  ab->add_option("--targets", o.targets, "update targets (default self)")
      ->check(CLI::IsMember({"self", "cross", "both"}));
  ab->add_option("--triggers", o.triggers, "trigger modes (default conditional)")
      ->check(CLI::IsMember({"conditional", "always"}));
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the guidance gradient");
  common(gc);
  decoding(gc);
  gc->add_option("--source", o.source, "source file (default: fixture held-out set)");
  gc->add_option("--sentence", o.sentence, "index of the sentence to decode");
  gc->add_option("--coords", o.coords, "sampled coordinates per cache tensor");
  gc->add_option("--at", o.at, "check at the initial or the updated context")
      ->check(CLI::IsMember({"initial", "updated"}));
  gc->add_option("--eps", o.eps, "finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitContract;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train(o);
    if (*tl) return cmd_translate(o);
    if (*ev) return cmd_evaluate(o);
    if (*ab) return cmd_ablate(o);
    if (*gc) return cmd_gradcheck(o);
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  }
  return kExitContract;
}
