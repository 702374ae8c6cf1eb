// cfsp: command-line front end for calibration, pruning, verification,
// recovery, evaluation, benchmarking and ablation.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfsp/calibration.hpp"
#include "cfsp/checkpoint.hpp"
#include "cfsp/corpus.hpp"
#include "cfsp/eval.hpp"
#include "cfsp/pruner.hpp"
#include "cfsp/recovery.hpp"

namespace {

using namespace cfsp;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::config: return 2;
    case ErrorCode::input: return 3;
    case ErrorCode::validation: return 4;
    case ErrorCode::io: return 5;
    case ErrorCode::plan: return 6;
    case ErrorCode::missing_tensor: return 7;
    case ErrorCode::shape_mismatch: return 8;
    case ErrorCode::truncated: return 9;
    case ErrorCode::unknown_version: return 10;
    case ErrorCode::capacity: return 11;
    case ErrorCode::non_finite: return 12;
    case ErrorCode::state: return 13;
    case ErrorCode::shape: return 14;
  }
  return 1;
}

void log(const std::string& msg) { std::cerr << "cfsp: " << msg << "\n"; }

// Error reports stay on one line so scripts can split on the first colon.
std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

struct Common {
  std::string model, corpus, out, config;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void add_common(CLI::App* app, Common& c, bool model = true, bool corpus = true, bool out = true) {
  if (model) app->add_option("--model", c.model, "Model checkpoint directory");
  if (corpus) app->add_option("--corpus", c.corpus, "Corpus directory (tokens.u32 + corpus.json)");
  if (out) app->add_option("--out", c.out, "Output directory");
  app->add_option("--config", c.config, "JSON run config; command-line flags override it");
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--threads", c.threads, "Worker cap; 1 is the deterministic reference path")
      ->check(CLI::PositiveNumber);
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::config, std::string(flag) + " is required");
  return value;
}

ModelCheckpoint load_model(const std::string& path) {
  auto m = load_checkpoint(require(path, "--model"));
  validate_model(m);
  return m;
}

Corpus load_corpus_for(const std::string& path, const ModelConfig& c) {
  auto corpus = load_corpus(require(path, "--corpus"));
  if (corpus.vocab_size > c.vocab_size) {
    fail(ErrorCode::input, "corpus vocab_size " + std::to_string(corpus.vocab_size) + " exceeds the model's " +
                               std::to_string(c.vocab_size));
  }
  return corpus;
}

// --- config file ------------------------------------------------------------

// Nested config keys and the flag each one feeds.
const std::map<std::string, std::string>& config_aliases() {
  static const std::map<std::string, std::string> m{
      {"paths.model", "model"},
      {"paths.corpus", "corpus"},
      {"paths.out", "out"},
      {"calibration.n_samples", "samples"},
      {"calibration.seq_len", "calib-seq-len"},
      {"calibration.seed", "calib-seed"},
      {"recovery.steps", "steps"},
      {"recovery.batch_size", "batch"},
      {"recovery.seq_len", "train-seq-len"},
      {"recovery.learning_rate", "lr"},
      {"recovery.beta1", "beta1"},
      {"recovery.beta2", "beta2"},
      {"recovery.eps", "adam-eps"},
      {"recovery.weight_decay", "weight-decay"},
      {"recovery.seed", "train-seed"},
      {"recovery.r_bar", "rbar"},
      {"recovery.targets", "targets"},
      {"fine_method", "fine"},
      {"allocation", "alloc"},
  };
  return m;
}

void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else {
      out.emplace_back(key, v);
    }
  }
}

std::string scalar_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ",") + scalar_text(e);
    return s;
  }
  return v.dump();
}

/// Turns a config file into flag arguments for `sub`. Keys that no command
/// understands are errors; keys meant for other commands are skipped.
std::vector<std::string> config_args(const std::string& path, CLI::App& root, CLI::App& sub) {
  const auto j = read_json(path);
  if (!j.is_object()) fail(ErrorCode::config, "config: top level must be an object");
  std::vector<std::pair<std::string, nlohmann::json>> items;
  flatten(j, "", items);
  std::vector<std::string> args;
  for (auto& [key, value] : items) {
    std::string flag = key;
    if (const auto it = config_aliases().find(key); it != config_aliases().end()) flag = it->second;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "config") fail(ErrorCode::config, "config: files cannot nest --config");
    bool known = false;
    for (const auto* app : root.get_subcommands({})) {
      if (app->get_option_no_throw("--" + flag) != nullptr) known = true;
    }
    if (!known) fail(ErrorCode::config, "config: unknown key '" + key + "'");
    if (sub.get_option_no_throw("--" + flag) == nullptr) continue;
    args.push_back("--" + flag);
    args.push_back(scalar_text(value));
  }
  return args;
}

// --- commands ---------------------------------------------------------------

struct CalibrationFlags {
  std::size_t samples = kDefaultCalibrationSamples;
  std::size_t seq_len = 0;  // 0: min(default, max_seq_len)
  std::optional<std::uint64_t> seed;
};

void add_calibration(CLI::App* app, CalibrationFlags& f) {
  app->add_option("--samples", f.samples, "Calibration sequences")->check(CLI::PositiveNumber);
  app->add_option("--calib-seq-len", f.seq_len, "Calibration sequence length (default 1024, capped by the model)");
  app->add_option("--calib-seed", f.seed, "Calibration sampling seed (default --seed)");
}

SummaryList run_calibration(const ModelCheckpoint& m, const Corpus& corpus, const CalibrationFlags& f,
                            const Common& c) {
  const std::size_t len = f.seq_len ? f.seq_len : std::min(kDefaultCalibrationSeqLen, m.config.max_seq_len);
  const auto calib = sample_calibration(corpus.tokens, f.samples, len, f.seed.value_or(c.seed));
  log("calibrating on " + std::to_string(f.samples) + " x " + std::to_string(len) + " tokens");
  return collect_summaries(m, calib, c.threads);
}

int cmd_calibrate(const Common& c, const CalibrationFlags& f) {
  const auto m = load_model(c.model);
  const auto corpus = load_corpus_for(c.corpus, m.config);
  const auto out = require(c.out, "--out");
  const auto s = run_calibration(m, corpus, f, c);
  save_summaries(s, out);
  std::cout << "calibration digest " << summary_digest(s) << "\n";
  for (std::size_t l = 0; l < s.size(); ++l) {
    std::cout << "block " << l << " mean angular distance " << fmt(s[l].mean_distance(), "%.6f") << "\n";
  }
  return 0;
}

struct PruneFlags {
  std::optional<double> gamma, sparsity;
  double alpha = 1.0;
  double min_keep = kDefaultMinKeep;
  std::string metric = "angular", fine = "cfsp", alloc = "cfsp";
  std::size_t multiple = 128;
  std::string summary;
  CalibrationFlags calib;
};

PruneOptions prune_options(const PruneFlags& f) {
  if (f.gamma && f.sparsity) fail(ErrorCode::config, "give either --gamma or --sparsity, not both");
  PruneOptions o;
  if (f.sparsity) {
    log("--sparsity " + fmt(*f.sparsity, "%g") + " is read as retention gamma = " + fmt(*f.sparsity, "%g") +
        " (the fraction of FFN channels kept), not the fraction removed");
    o.gamma = *f.sparsity;
  } else if (f.gamma) {
    o.gamma = *f.gamma;
  }
  if (!(o.gamma > 0.0 && o.gamma <= 1.0)) fail(ErrorCode::config, "gamma must be in (0, 1]");
  if (!(f.alpha > 0.0)) fail(ErrorCode::config, "alpha must be > 0");
  if (f.multiple < 1) fail(ErrorCode::config, "multiple must be >= 1");
  o.alpha = f.alpha;
  o.min_keep = f.min_keep;
  o.metric = parse_metric(f.metric);
  o.fine = parse_fine(f.fine);
  o.allocation = parse_allocation(f.alloc);
  o.multiple = f.multiple;
  return o;
}

void add_prune_flags(CLI::App* app, PruneFlags& f) {
  app->add_option("--gamma", f.gamma, "Retention ratio in (0, 1]");
  app->add_option("--sparsity", f.sparsity, "Alias for --gamma (retention semantics)");
  app->add_option("--alpha", f.alpha, "Sigmoid steepness for coarse normalization");
  app->add_option("--min-keep", f.min_keep, "Lower clamp on per-block retention");
  app->add_option("--metric", f.metric, "angular|cosine|euclidean|uniform");
  app->add_option("--fine", f.fine, "cfsp|wanda|magnitude");
  app->add_option("--alloc", f.alloc, "cfsp|uniform|global-sort");
  app->add_option("--multiple", f.multiple, "Round widths to this multiple");
  app->add_option("--summary", f.summary, "Calibration summary directory (default: calibrate inline)");
  add_calibration(app, f.calib);
}

SummaryList summaries_for(const ModelCheckpoint& m, const PruneFlags& f, const Common& c) {
  if (!f.summary.empty()) {
    auto s = load_summaries(f.summary);
    return s;
  }
  const auto corpus = load_corpus_for(c.corpus, m.config);
  return run_calibration(m, corpus, f.calib, c);
}

int cmd_prune(const Common& c, const PruneFlags& f) {
  const auto opt = prune_options(f);
  const auto out = fs::path(require(c.out, "--out"));
  const auto m = load_model(c.model);
  const auto s = summaries_for(m, f, c);
  const auto plan = plan_pruning(m, s, opt);
  validate_plan(plan, m.config);
  const auto pruned = apply_plan(m, plan);
  save_checkpoint(pruned, out / "model");
  save_plan(plan, out / "plan.json");
  save_summaries(s, out / "summary");
  const std::string text = plan_summary(plan);
  write_file(out / "plan.txt", text);
  std::cout << text;
  std::cout << "params " << count_params(m).total << " -> " << count_params(pruned).total << "\n";
  return 0;
}

struct VerifyFlags {
  std::string pruned, plan;
  double tol = 1e-4;
  std::size_t sequences = 8;
  std::size_t seq_len = 64;
};

int cmd_verify(const Common& c, const VerifyFlags& f) {
  const auto dense = load_model(c.model);
  const fs::path pruned_dir = require(f.pruned, "--pruned");
  const fs::path plan_path = f.plan.empty() ? pruned_dir / "plan.json" : fs::path(f.plan);
  const auto plan = load_plan(plan_path);
  const auto pruned = load_model(fs::exists(pruned_dir / "model") ? (pruned_dir / "model").string() : pruned_dir.string());
  validate_plan(plan, dense.config);
  const std::size_t len = std::min(f.seq_len, dense.config.max_seq_len);
  std::vector<std::vector<std::uint32_t>> seqs;
  if (!c.corpus.empty()) {
    const auto corpus = load_corpus_for(c.corpus, dense.config);
    for (const auto& w : windows(corpus.tokens, len)) {
      if (seqs.size() == f.sequences) break;
      seqs.emplace_back(w.begin(), w.end());
    }
    if (seqs.empty()) fail(ErrorCode::input, "verify: corpus holds no window of " + std::to_string(len));
  } else {
    Rng rng(c.seed);
    for (std::size_t i = 0; i < f.sequences; ++i) {
      std::vector<std::uint32_t> s(len);
      for (auto& t : s) t = static_cast<std::uint32_t>(rng.below(dense.config.vocab_size));
      seqs.push_back(std::move(s));
    }
  }
  const auto r = verify_equivalence(dense, plan, pruned, seqs, f.tol);
  std::cout << (r.pass ? "PASS" : "FAIL") << " max_abs_diff " << fmt(r.max_abs_diff, "%.3e") << " tol "
            << fmt(f.tol, "%g") << " over " << seqs.size() << " sequences\n";
  if (!r.pass) fail(ErrorCode::validation, "verify: pruned model differs from the masked dense model");
  return 0;
}

struct RecoverFlags {
  std::string plan;
  double rbar = kDefaultRankBudget;
  std::size_t steps = 200, batch = 8, seq_len = 64;
  double lr = 2e-4, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.0;
  std::optional<std::uint64_t> train_seed;
  std::vector<std::string> targets{"up", "gate", "down", "q", "v"};
};

int cmd_recover(const Common& c, const RecoverFlags& f) {
  const auto out = fs::path(require(c.out, "--out"));
  fs::path model_path = require(c.model, "--model");
  fs::path plan_path = f.plan;
  // Accept a prune output directory directly.
  if (fs::exists(model_path / "model" / "manifest.json")) {
    if (plan_path.empty()) plan_path = model_path / "plan.json";
    model_path /= "model";
  }
  const auto m = load_model(model_path.string());
  const auto corpus = load_corpus_for(c.corpus, m.config);
  std::vector<double> normalized(m.config.n_blocks, 0.5);
  if (!plan_path.empty()) {
    const auto plan = load_plan(plan_path);
    if (plan.normalized_scores.size() != m.config.n_blocks) {
      fail(ErrorCode::input, "recover: plan has " + std::to_string(plan.normalized_scores.size()) +
                                 " block scores for a " + std::to_string(m.config.n_blocks) + "-block model");
    }
    normalized = plan.normalized_scores;
  } else {
    log("no plan given; ranks are uniform");
  }
  TrainConfig cfg;
  cfg.steps = f.steps;
  cfg.batch_size = f.batch;
  cfg.seq_len = f.seq_len;
  cfg.learning_rate = f.lr;
  cfg.beta1 = f.beta1;
  cfg.beta2 = f.beta2;
  cfg.adam_eps = f.adam_eps;
  cfg.weight_decay = f.weight_decay;
  cfg.seed = f.train_seed.value_or(c.seed);
  cfg.r_bar = f.rbar;
  cfg.targets = parse_targets(f.targets);
  cfg.threads = c.threads;
  cfg.validate();
  if (cfg.seq_len > m.config.max_seq_len) fail(ErrorCode::config, "recover: --train-seq-len exceeds max_seq_len");
  if (corpus.tokens.size() < cfg.seq_len) fail(ErrorCode::capacity, "recover: corpus is shorter than one window");

  const auto ranks = allocate_ranks(normalized, cfg.r_bar);
  std::string rank_text;
  for (auto r : ranks.ranks) rank_text += (rank_text.empty() ? "" : " ") + std::to_string(r);
  log("adapter ranks: " + rank_text);
  auto adapters = attach_adapters<float>(m.config, ranks.ranks, cfg.targets, cfg.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.steps / 10);
  auto result = train(m, std::move(adapters), corpus.tokens, cfg, [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == cfg.steps) log("step " + std::to_string(step) + " loss " + fmt(loss, "%.6f"));
  });
  AdaptedModel<float> am{m, result.adapters};
  const auto merged = merge_adapters(am);
  save_adapters(result.adapters, ranks, out / "adapters");
  save_checkpoint(merged, out / "model");
  write_file(out / "loss.csv", loss_csv(result.losses));
  std::cout << "loss " << fmt(result.losses.front(), "%.6f") << " -> " << fmt(result.losses.back(), "%.6f") << "\n";
  return 0;
}

struct EvalFlags {
  std::vector<std::string> models;
  std::size_t seq_len = 128, reps = 20, warmup = 3, ppl_seq_len = 64;
};

std::vector<std::pair<std::string, ModelCheckpoint>> load_labeled(const std::vector<std::string>& specs) {
  if (specs.empty()) fail(ErrorCode::config, "--model is required");
  std::vector<std::pair<std::string, ModelCheckpoint>> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    fs::path path = eq == std::string::npos ? s : s.substr(eq + 1);
    std::string label = s.substr(0, eq);
    if (eq == std::string::npos) {
      // "run/model" is labeled "run"
      fs::path p = path.lexically_normal();
      if (p.filename().empty()) p = p.parent_path();
      label = p.filename() == "model" && p.has_parent_path() ? p.parent_path().filename().string() : p.filename().string();
    }
    if (fs::exists(path / "model" / "manifest.json")) path /= "model";
    out.emplace_back(label, load_model(path.string()));
  }
  return out;
}

int cmd_eval(const Common& c, const EvalFlags& f, bool with_ppl) {
  const auto models = load_labeled(f.models);
  std::optional<Corpus> corpus;
  if (with_ppl && !c.corpus.empty()) corpus = load_corpus_for(c.corpus, models.front().second.config);
  ReportOptions opt;
  opt.seq_len = f.seq_len;
  opt.reps = f.reps;
  opt.warmup = f.warmup;
  opt.seed = c.seed;
  opt.ppl_seq_len = f.ppl_seq_len;
  if (corpus) opt.corpus = corpus->tokens;
  if (opt.reps != 0 && opt.reps < 3) fail(ErrorCode::config, "--reps must be 0 or >= 3");
  for (const auto& [label, m] : models) {
    if (f.seq_len < 1 || f.seq_len > m.config.max_seq_len) fail(ErrorCode::config, "--seq-len exceeds max_seq_len");
  }
  std::vector<LabeledModel> lm;
  for (const auto& [label, m] : models) lm.push_back({label, &m, nullptr});
  const auto rep = efficiency_report(lm, opt);
  const bool lat = opt.reps > 0;
  std::cout << rep.text(lat);
  if (!c.out.empty()) write_file(fs::path(c.out) / (with_ppl ? "report.csv" : "bench.csv"), rep.csv(lat));
  return 0;
}

struct AblateFlags {
  PruneFlags prune;
  std::string variants = "all";
  std::size_t seq_len = 64;
  double tol = 1e-4;
};

int cmd_ablate(const Common& c, const AblateFlags& f) {
  auto po = prune_options(f.prune);
  const auto m = load_model(c.model);
  const auto corpus = load_corpus_for(c.corpus, m.config);
  const auto variants = parse_variants(f.variants);
  const auto s = summaries_for(m, f.prune, c);
  AblationOptions opt;
  opt.prune = po;
  opt.corpus = corpus.tokens;
  opt.seq_len = f.seq_len;
  opt.tolerance = f.tol;
  const auto rep = ablation_run(m, s, variants, opt);
  std::cout << rep.text();
  if (!c.out.empty()) {
    write_file(fs::path(c.out) / "ablation.csv", rep.csv());
    write_file(fs::path(c.out) / "ablation_plot.csv", rep.plot_csv());
  }
  for (const auto& r : rep.rows) {
    if (!r.equivalent) fail(ErrorCode::validation, "ablate: variant " + r.variant.label() + " failed equivalence");
  }
  return 0;
}

struct ToyFlags {
  std::size_t tokens = 200000, heldout = 20000, alphabet = 32, run = 8;
};

int cmd_toy(const Common& c, const ToyFlags& f) {
  const auto out = fs::path(require(c.out, "--out"));
  ModelConfig config = toy_config();
  if (!c.model.empty()) config = load_config(c.model);
  config.validate();
  const auto m = make_random_model(config, c.seed);
  const auto all = make_copy_corpus(config.vocab_size, f.tokens + f.heldout, f.alphabet, f.run, c.seed + 1);
  Corpus train_part{all.vocab_size, {all.tokens.begin(), all.tokens.begin() + static_cast<std::ptrdiff_t>(f.tokens)}};
  Corpus held{all.vocab_size, {all.tokens.begin() + static_cast<std::ptrdiff_t>(f.tokens), all.tokens.end()}};
  save_checkpoint(m, out / "model");
  save_corpus(train_part, out / "corpus");
  save_corpus(held, out / "heldout");
  std::cout << "toy model " << count_params(m).total << " params, corpus " << f.tokens << " + " << f.heldout
            << " held-out tokens\n";
  return 0;
}

std::vector<std::string> with_config(int argc, char** argv, CLI::App& root) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) return args;
  CLI::App* sub = nullptr;
  try {
    sub = root.get_subcommand(args[0]);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  auto extra = config_args(path, root, *sub);
  args.insert(args.begin() + 1, extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured FFN pruning with importance-guided recovery", "cfsp"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  Common common;
  CalibrationFlags calib;
  PruneFlags prune;
  VerifyFlags verify;
  RecoverFlags recover;
  EvalFlags eval, bench;
  AblateFlags ablate;
  ToyFlags toy;

  auto* c_cal = app.add_subcommand("calibrate", "Collect per-block statistics in one forward pass per sequence");
  add_common(c_cal, common);
  add_calibration(c_cal, calib);

  auto* c_prune = app.add_subcommand("prune", "Plan and apply structured FFN pruning");
  add_common(c_prune, common);
  add_prune_flags(c_prune, prune);

  auto* c_verify = app.add_subcommand("verify", "Check a pruned model against the masked dense model");
  add_common(c_verify, common, true, true, false);
  c_verify->add_option("--pruned", verify.pruned, "Pruned checkpoint or prune output directory");
  c_verify->add_option("--plan", verify.plan, "Plan file (default <pruned>/plan.json)");
  c_verify->add_option("--tol", verify.tol, "Max abs logit difference");
  c_verify->add_option("--sequences", verify.sequences, "Probe sequences")->check(CLI::PositiveNumber);
  c_verify->add_option("--seq-len", verify.seq_len, "Probe sequence length")->check(CLI::PositiveNumber);

  auto* c_rec = app.add_subcommand("recover", "Train importance-ranked adapters and merge them");
  add_common(c_rec, common);
  c_rec->add_option("--plan", recover.plan, "Plan whose coarse scores set the ranks");
  c_rec->add_option("--rbar", recover.rbar, "Average adapter rank");
  c_rec->add_option("--steps", recover.steps, "Optimizer steps");
  c_rec->add_option("--batch", recover.batch, "Sequences per step");
  c_rec->add_option("--train-seq-len", recover.seq_len, "Training sequence length");
  c_rec->add_option("--lr", recover.lr, "AdamW learning rate");
  c_rec->add_option("--beta1", recover.beta1);
  c_rec->add_option("--beta2", recover.beta2);
  c_rec->add_option("--adam-eps", recover.adam_eps);
  c_rec->add_option("--weight-decay", recover.weight_decay);
  c_rec->add_option("--train-seed", recover.train_seed, "Training seed (default --seed)");
  c_rec->add_option("--targets", recover.targets, "Adapter targets (q,k,v,o,up,gate,down)")->delimiter(',');

  auto* c_eval = app.add_subcommand("eval", "Parameters, size, MACs, latency and perplexity per model");
  add_common(c_eval, common, false, true, true);
  c_eval->add_option("--model", eval.models, "Checkpoint, optionally label=path; repeatable")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  c_eval->add_option("--seq-len", eval.seq_len, "Sequence length for MACs and latency");
  c_eval->add_option("--reps", eval.reps, "Timed repetitions (0 skips latency)");
  c_eval->add_option("--warmup", eval.warmup, "Untimed repetitions");
  c_eval->add_option("--ppl-seq-len", eval.ppl_seq_len, "Perplexity window");

  auto* c_bench = app.add_subcommand("bench", "Forward latency per model");
  add_common(c_bench, common, false, false, true);
  c_bench->add_option("--model", bench.models, "Checkpoint, optionally label=path; repeatable")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  c_bench->add_option("--seq-len", bench.seq_len, "Sequence length");
  c_bench->add_option("--reps", bench.reps, "Timed repetitions")->check(CLI::Range(3, 1000000));
  c_bench->add_option("--warmup", bench.warmup, "Untimed repetitions");

  auto* c_abl = app.add_subcommand("ablate", "Coarse metric x fine scorer comparison");
  add_common(c_abl, common);
  add_prune_flags(c_abl, ablate.prune);
  c_abl->add_option("--variants", ablate.variants, "all | table5 | metric:fine[,metric:fine...]");
  c_abl->add_option("--seq-len", ablate.seq_len, "Evaluation window");
  c_abl->add_option("--tol", ablate.tol, "Equivalence tolerance");

  auto* c_toy = app.add_subcommand("toy", "Write a random toy checkpoint and copy-task corpora");
  add_common(c_toy, common, false, false, true);
  c_toy->add_option("--model-config", common.model, "JSON file with a model config (default: toy shape)");
  c_toy->add_option("--tokens", toy.tokens, "Training corpus tokens");
  c_toy->add_option("--heldout", toy.heldout, "Held-out corpus tokens");
  c_toy->add_option("--alphabet", toy.alphabet, "Distinct tokens in the copy task");
  c_toy->add_option("--run", toy.run, "Repeat length of each token");

  try {
    auto args = with_config(argc, argv, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
    if (c_cal->parsed()) return cmd_calibrate(common, calib);
    if (c_prune->parsed()) return cmd_prune(common, prune);
    if (c_verify->parsed()) return cmd_verify(common, verify);
    if (c_rec->parsed()) return cmd_recover(common, recover);
    if (c_eval->parsed()) return cmd_eval(common, eval, true);
    if (c_bench->parsed()) return cmd_eval(common, bench, false);
    if (c_abl->parsed()) return cmd_ablate(common, ablate);
    if (c_toy->parsed()) return cmd_toy(common, toy);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_CONFIG: " << one_line(e.what()) << "\n";
    return exit_code(ErrorCode::config);
  } catch (const Error& e) {
    std::cerr << error_code_name(e.code()) << ": " << one_line(e.what()) << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
