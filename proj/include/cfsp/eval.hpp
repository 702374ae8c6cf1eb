#pragma once

// Perplexity, latency measurement, efficiency tables and the coarse x fine
// ablation harness.

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cfsp/accounting.hpp"
#include "cfsp/calibration.hpp"
#include "cfsp/checkpoint.hpp"
#include "cfsp/loss.hpp"
#include "cfsp/pruner.hpp"
#include "cfsp/random.hpp"

namespace cfsp {

/// Consecutive non-overlapping windows; a trailing partial window is dropped.
inline std::vector<std::span<const std::uint32_t>> windows(std::span<const std::uint32_t> corpus, std::size_t seq_len) {
  std::vector<std::span<const std::uint32_t>> out;
  for (std::size_t i = 0; i + seq_len <= corpus.size(); i += seq_len) out.push_back(corpus.subspan(i, seq_len));
  return out;
}

/// exp(mean next-token NLL) over non-overlapping windows of `seq_len`.
template <Scalar T>
double perplexity(const BasicModel<T>& model, std::span<const std::uint32_t> corpus, std::size_t seq_len,
                  const AdapterSet<T>* adapters = nullptr) {
  if (corpus.empty()) fail(ErrorCode::input, "perplexity: corpus is empty");
  if (seq_len < 2) fail(ErrorCode::config, "perplexity: seq_len must be >= 2");
  const auto wins = windows(corpus, seq_len);
  if (wins.empty()) {
    fail(ErrorCode::input, "perplexity: corpus of " + std::to_string(corpus.size()) +
                               " tokens holds no window of " + std::to_string(seq_len));
  }
  ForwardOptions<T> opt;
  opt.adapters = adapters;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& w : wins) {
    const auto nll = next_token_nll(forward_pass(model, w, opt), w);
    sum += nll.sum;
    count += nll.count;
  }
  return std::exp(sum / static_cast<double>(count));
}

// --- latency ----------------------------------------------------------------

struct LatencyStats {
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples_ms;
};

/// Linear interpolation between order statistics; q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) fail(ErrorCode::input, "quantile: no samples");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Wall-clock forward passes on one thread over a seeded random sequence.
template <Scalar T>
LatencyStats benchmark_latency(const BasicModel<T>& model, std::size_t seq_len, std::size_t reps,
                               std::size_t warmup = 2, std::uint64_t seed = 0) {
  if (reps < 3) fail(ErrorCode::config, "bench: reps must be >= 3");
  if (seq_len < 1 || seq_len > model.config.max_seq_len) fail(ErrorCode::config, "bench: seq_len out of range");
  Rng rng(seed);
  std::vector<std::uint32_t> tokens(seq_len);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(model.config.vocab_size));
  volatile double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) sink = sink + forward_pass(model, std::span<const std::uint32_t>(tokens))(0, 0);
  LatencyStats s;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const auto logits = forward_pass(model, std::span<const std::uint32_t>(tokens));
    const auto stop = std::chrono::steady_clock::now();
    sink = sink + logits(0, 0);
    s.samples_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  s.median_ms = quantile(s.samples_ms, 0.5);
  s.p10_ms = quantile(s.samples_ms, 0.1);
  s.p90_ms = quantile(s.samples_ms, 0.9);
  return s;
}

// --- tables -----------------------------------------------------------------

/// Formats a table with right-aligned numeric columns and a rule under the
/// header.
inline std::string aligned_table(const std::vector<std::string>& header,
                                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string& cell = c < r.size() ? r[c] : std::string();
      const std::string pad(width[c] - cell.size(), ' ');
      os << (c ? "  " : "") << (c == 0 ? cell + pad : pad + cell);
    }
    os << "\n";
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
  for (const auto& r : rows) line(r);
  return os.str();
}

inline std::string csv_text(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  auto join = [](const std::vector<std::string>& r) {
    std::string s;
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
    return s + "\n";
  };
  std::string out = join(header);
  for (const auto& r : rows) out += join(r);
  return out;
}

inline std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string host_description() {
  struct utsname u {};
  std::string os = uname(&u) == 0 ? std::string(u.sysname) + " " + u.machine : "unknown";
  return os + " hw_threads=" + std::to_string(std::thread::hardware_concurrency());
}

// --- efficiency report ------------------------------------------------------

struct EvalRow {
  std::string label;
  std::uint64_t params = 0;
  std::uint64_t checkpoint_bytes = 0;
  std::uint64_t macs = 0;  // whole forward at the report's seq_len
  std::optional<LatencyStats> latency;
  std::optional<double> speedup;  // dense median / row median
  std::optional<double> perplexity;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::size_t reps = 0;
  std::string host;

  static std::vector<std::string> header(bool with_latency) {
    std::vector<std::string> h{"model", "params", "checkpoint_bytes", "macs", "mac_ratio"};
    if (with_latency) h.insert(h.end(), {"median_ms", "p10_ms", "p90_ms", "speedup"});
    h.push_back("ppl");
    return h;
  }

  std::vector<std::vector<std::string>> cells(bool with_latency) const {
    std::vector<std::vector<std::string>> out;
    for (const auto& r : rows) {
      std::vector<std::string> c{r.label, std::to_string(r.params), std::to_string(r.checkpoint_bytes),
                                 std::to_string(r.macs),
                                 fmt(static_cast<double>(r.macs) / static_cast<double>(rows.front().macs), "%.6f")};
      if (with_latency) {
        c.push_back(r.latency ? fmt(r.latency->median_ms, "%.3f") : "-");
        c.push_back(r.latency ? fmt(r.latency->p10_ms, "%.3f") : "-");
        c.push_back(r.latency ? fmt(r.latency->p90_ms, "%.3f") : "-");
        c.push_back(r.speedup ? fmt(*r.speedup, "%.3f") : "-");
      }
      c.push_back(r.perplexity ? fmt(*r.perplexity, "%.6f") : "-");
      out.push_back(std::move(c));
    }
    return out;
  }

  /// Latency columns are omitted when `with_latency` is false, which leaves
  /// a fully deterministic table.
  std::string csv(bool with_latency = true) const { return csv_text(header(with_latency), cells(with_latency)); }
  std::string text(bool with_latency = true) const {
    std::string meta = "seed=" + std::to_string(seed) + " seq_len=" + std::to_string(seq_len) +
                       " reps=" + std::to_string(reps) + " host=" + host + "\n";
    return meta + aligned_table(header(with_latency), cells(with_latency));
  }
};

struct ReportOptions {
  std::size_t seq_len = 128;
  std::size_t reps = 20;  // 0 skips latency
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  std::span<const std::uint32_t> corpus;  // empty skips perplexity
  std::size_t ppl_seq_len = 64;
};

struct LabeledModel {
  std::string label;
  const ModelCheckpoint* model = nullptr;
  const AdapterSet<float>* adapters = nullptr;
};

/// One row per model; the first model is the reference for ratios.
inline EvalReport efficiency_report(const std::vector<LabeledModel>& models, const ReportOptions& opt) {
  if (models.empty()) fail(ErrorCode::input, "report: no models");
  const auto vocab = models.front().model->config.vocab_size;
  EvalReport rep;
  rep.seed = opt.seed;
  rep.seq_len = opt.seq_len;
  rep.reps = opt.reps;
  rep.host = host_description();
  for (const auto& lm : models) {
    if (lm.model->config.vocab_size != vocab) fail(ErrorCode::input, "report: models do not share a vocabulary");
    EvalRow row;
    row.label = lm.label;
    row.params = count_params(*lm.model).total + (lm.adapters ? lm.adapters->parameter_count() : 0);
    row.checkpoint_bytes = checkpoint_bytes(*lm.model);
    row.macs = count_macs(*lm.model, opt.seq_len).total();
    if (opt.reps > 0) row.latency = benchmark_latency(*lm.model, opt.seq_len, opt.reps, opt.warmup, opt.seed);
    if (!opt.corpus.empty()) row.perplexity = perplexity(*lm.model, opt.corpus, opt.ppl_seq_len, lm.adapters);
    rep.rows.push_back(std::move(row));
  }
  if (opt.reps > 0) {
    for (auto& r : rep.rows) r.speedup = rep.rows.front().latency->median_ms / r.latency->median_ms;
  }
  return rep;
}

// --- ablation ---------------------------------------------------------------

struct Variant {
  CoarseMetric metric = CoarseMetric::angular;
  FineMethod fine = FineMethod::cfsp;

  std::string label() const {
    std::string s = std::string(to_string(metric)) + "+" + std::string(to_string(fine));
    return s;
  }
  bool ours() const { return metric == CoarseMetric::angular && fine == FineMethod::cfsp; }
  friend bool operator==(const Variant&, const Variant&) = default;
};

/// "all" (4 coarse x 3 fine), "table5" (4 coarse x {cfsp, wanda}), or a comma
/// list of metric:fine pairs.
inline std::vector<Variant> parse_variants(const std::string& spec) {
  const CoarseMetric metrics[] = {CoarseMetric::uniform, CoarseMetric::euclidean, CoarseMetric::cosine,
                                  CoarseMetric::angular};
  std::vector<Variant> out;
  if (spec == "all" || spec == "table5") {
    std::vector<FineMethod> fines{FineMethod::cfsp, FineMethod::wanda};
    if (spec == "all") fines.push_back(FineMethod::magnitude);
    for (auto f : fines) {
      for (auto m : metrics) out.push_back({m, f});
    }
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) fail(ErrorCode::config, "ablate: variant '" + item + "' is not metric:fine");
    out.push_back({parse_metric(item.substr(0, colon)), parse_fine(item.substr(colon + 1))});
  }
  if (out.empty()) fail(ErrorCode::config, "ablate: no variants");
  return out;
}

struct AblationRow {
  Variant variant;
  std::vector<std::size_t> dim_f;
  std::uint64_t params = 0;
  double max_abs_diff = 0.0;
  bool equivalent = false;
  double perplexity = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double gamma = 0.0;
  std::optional<double> dense_perplexity;

  std::vector<std::vector<std::string>> cells() const {
    std::vector<std::vector<std::string>> out;
    for (const auto& r : rows) {
      std::string dims;
      for (std::size_t i = 0; i < r.dim_f.size(); ++i) dims += (i ? "/" : "") + std::to_string(r.dim_f[i]);
      out.push_back({std::string(to_string(r.variant.metric)), std::string(to_string(r.variant.fine)),
                     r.variant.ours() ? "Ours" : "", dims, std::to_string(r.params), fmt(r.max_abs_diff, "%.3g"),
                     r.equivalent ? "pass" : "FAIL", fmt(r.perplexity, "%.6f")});
    }
    return out;
  }
  static std::vector<std::string> header() {
    return {"coarse", "fine", "label", "d_ff", "params", "max_abs_diff", "equivalence", "ppl"};
  }
  std::string csv() const { return csv_text(header(), cells()); }
  std::string text() const {
    std::string head = "gamma=" + fmt(gamma, "%g");
    if (dense_perplexity) head += " dense_ppl=" + fmt(*dense_perplexity, "%.6f");
    return head + "\n" + aligned_table(header(), cells());
  }
  /// x = variant label, y = perplexity, for external plotting.
  std::string plot_csv() const {
    std::string out = "variant,ppl\n";
    for (const auto& r : rows) out += r.variant.label() + "," + fmt(r.perplexity, "%.6f") + "\n";
    return out;
  }
};

struct AblationOptions {
  PruneOptions prune;  // metric and fine are overridden per variant
  std::span<const std::uint32_t> corpus;  // evaluation tokens
  std::size_t seq_len = 64;
  std::size_t equivalence_sequences = 2;
  double tolerance = 1e-4;
};

/// Build plan -> prune -> verify against the masked dense model -> ppl, for
/// each variant.
inline AblationReport ablation_run(const ModelCheckpoint& model, const SummaryList& summaries,
                                   const std::vector<Variant>& variants, const AblationOptions& opt) {
  const auto wins = windows(opt.corpus, opt.seq_len);
  if (wins.empty()) fail(ErrorCode::input, "ablate: evaluation corpus holds no full window");
  std::vector<std::vector<std::uint32_t>> probe;
  for (std::size_t i = 0; i < std::min(opt.equivalence_sequences, wins.size()); ++i) {
    probe.emplace_back(wins[i].begin(), wins[i].end());
  }
  AblationReport rep;
  rep.gamma = opt.prune.gamma;
  rep.dense_perplexity = perplexity(model, opt.corpus, opt.seq_len);
  for (const auto& v : variants) {
    PruneOptions po = opt.prune;
    po.metric = v.metric;
    po.fine = v.fine;
    const auto plan = plan_pruning(model, summaries, po);
    const auto pruned = apply_plan(model, plan);
    const auto eq = verify_equivalence(model, plan, pruned, probe, opt.tolerance);
    AblationRow row;
    row.variant = v;
    for (const auto& b : plan.blocks) row.dim_f.push_back(b.dim_f);
    row.params = count_params(pruned).total;
    row.max_abs_diff = eq.max_abs_diff;
    row.equivalent = eq.pass;
    row.perplexity = perplexity(pruned, opt.corpus, opt.seq_len);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace cfsp
