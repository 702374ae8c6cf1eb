#pragma once

// Sparsity plans: which FFN channels each block keeps, how to slice a model
// down to them, and the masked-dense oracle that proves the slice exact.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsp/calibration.hpp"
#include "cfsp/checkpoint.hpp"
#include "cfsp/error.hpp"
#include "cfsp/importance.hpp"
#include "cfsp/model.hpp"

namespace cfsp {

struct Provenance {
  std::string method = "cfsp";  // fine-grained scorer
  std::string allocation = "cfsp";
  std::string metric = "angular";
  double gamma = 1.0;
  double alpha = 1.0;
  std::size_t multiple = 1;
  std::string calibration_digest;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct BlockPlan {
  std::size_t dim_o = 0;
  std::size_t dim_f = 0;
  std::vector<std::size_t> kept;  // ascending, original-model channel ids
  double keep_fraction = 1.0;     // budget before dimension rounding
  double unclamped = 1.0;
  bool clamped = false;

  friend bool operator==(const BlockPlan&, const BlockPlan&) = default;
};

struct SparsityPlan {
  Provenance provenance;
  std::vector<double> raw_scores;         // coarse, per block
  std::vector<double> normalized_scores;  // sigmoid-normalized, reused for adapter ranks
  std::vector<BlockPlan> blocks;

  friend bool operator==(const SparsityPlan&, const SparsityPlan&) = default;
};

/// Top-dim_f channels by score (ties to the lower index), returned ascending.
inline std::vector<std::size_t> top_channels(std::span<const double> scores, std::size_t count) {
  if (count > scores.size()) fail(ErrorCode::plan, "build_plan: dim_f exceeds dim_o");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline SparsityPlan build_plan(const std::vector<std::vector<double>>& scores, std::span<const std::size_t> dim_f) {
  if (scores.size() != dim_f.size()) fail(ErrorCode::plan, "build_plan: score and width lists differ in length");
  SparsityPlan plan;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    BlockPlan b;
    b.dim_o = scores[l].size();
    b.dim_f = dim_f[l];
    b.kept = top_channels(scores[l], dim_f[l]);
    b.keep_fraction = b.unclamped = static_cast<double>(b.dim_f) / static_cast<double>(b.dim_o);
    plan.blocks.push_back(std::move(b));
  }
  return plan;
}

inline SparsityPlan build_plan(const std::vector<FineScores>& fine, std::span<const std::size_t> dim_f) {
  std::vector<std::vector<double>> scores;
  for (const auto& f : fine) scores.push_back(f.scores);
  return build_plan(scores, dim_f);
}

inline SparsityPlan keep_all_plan(const ModelConfig& c) {
  SparsityPlan plan;
  for (std::size_t l = 0; l < c.n_blocks; ++l) {
    BlockPlan b;
    b.dim_o = b.dim_f = c.d_ff_per_block[l];
    b.kept.resize(b.dim_o);
    std::iota(b.kept.begin(), b.kept.end(), std::size_t{0});
    plan.blocks.push_back(std::move(b));
  }
  plan.normalized_scores.assign(c.n_blocks, 0.5);
  plan.raw_scores.assign(c.n_blocks, 0.0);
  return plan;
}

inline void validate_plan(const SparsityPlan& plan, const ModelConfig& c) {
  if (plan.blocks.size() != c.n_blocks) {
    fail(ErrorCode::plan, "plan has " + std::to_string(plan.blocks.size()) + " blocks, model has " +
                              std::to_string(c.n_blocks));
  }
  for (std::size_t l = 0; l < plan.blocks.size(); ++l) {
    const auto& b = plan.blocks[l];
    const std::string where = "plan block " + std::to_string(l) + ": ";
    if (b.dim_o != c.d_ff_per_block[l]) fail(ErrorCode::plan, where + "dim_o does not match the model's d_ff");
    if (b.kept.size() != b.dim_f) fail(ErrorCode::plan, where + "kept list length differs from dim_f");
    if (b.dim_f < 1) fail(ErrorCode::plan, where + "keeps no channels");
    for (std::size_t i = 0; i < b.kept.size(); ++i) {
      if (b.kept[i] >= b.dim_o) fail(ErrorCode::plan, where + "channel index out of range");
      if (i > 0 && b.kept[i] <= b.kept[i - 1]) fail(ErrorCode::plan, where + "kept channels not strictly ascending");
    }
    const std::size_t m = std::max<std::size_t>(1, plan.provenance.multiple);
    if (b.dim_f % m != 0 && b.dim_f != b.dim_o) fail(ErrorCode::plan, where + "dim_f is not a multiple of `multiple`");
  }
  if (!plan.normalized_scores.empty() && plan.normalized_scores.size() != c.n_blocks) {
    fail(ErrorCode::plan, "plan normalized score list length differs from block count");
  }
}

template <Scalar T>
Matrix<T> select_rows(const Matrix<T>& m, std::span<const std::size_t> rows) {
  Matrix<T> out(rows.size(), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
  }
  return out;
}

/// Removes every FFN channel outside the plan: rows of up, gate and down.
template <Scalar T>
BasicModel<T> apply_plan(const BasicModel<T>& model, const SparsityPlan& plan) {
  validate_plan(plan, model.config);
  BasicModel<T> out = model;
  for (std::size_t l = 0; l < plan.blocks.size(); ++l) {
    const auto& kept = plan.blocks[l].kept;
    auto& b = out.blocks[l];
    b.up = select_rows(b.up, kept);
    b.gate = select_rows(b.gate, kept);
    b.down = select_rows(b.down, kept);
    out.config.d_ff_per_block[l] = kept.size();
  }
  validate_model(out);
  return out;
}

/// Plan `second` is expressed against the model produced by `first`; the
/// result maps straight from the original model.
inline SparsityPlan compose_plans(const SparsityPlan& first, const SparsityPlan& second) {
  if (first.blocks.size() != second.blocks.size()) fail(ErrorCode::plan, "compose: block counts differ");
  SparsityPlan out = second;
  for (std::size_t l = 0; l < first.blocks.size(); ++l) {
    const auto& survivors = first.blocks[l].kept;
    auto& b = out.blocks[l];
    if (b.dim_o != survivors.size()) fail(ErrorCode::plan, "compose: second plan does not fit the first plan's output");
    for (auto& idx : b.kept) idx = survivors[idx];
    b.dim_o = first.blocks[l].dim_o;
  }
  return out;
}

inline std::vector<std::vector<std::uint8_t>> plan_mask(const SparsityPlan& plan) {
  std::vector<std::vector<std::uint8_t>> mask;
  for (const auto& b : plan.blocks) {
    std::vector<std::uint8_t> m(b.dim_o, 0);
    for (auto i : b.kept) m[i] = 1;
    mask.push_back(std::move(m));
  }
  return mask;
}

/// Dense forward with channels outside the plan zeroed before the down
/// projection.
template <Scalar T>
Matrix<T> masked_forward(const BasicModel<T>& model, const SparsityPlan& plan, std::span<const std::uint32_t> tokens) {
  validate_plan(plan, model.config);
  const auto mask = plan_mask(plan);
  ForwardOptions<T> opt;
  opt.channel_mask = &mask;
  return forward_pass(model, tokens, opt);
}

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  bool pass = false;
};

template <Scalar T>
EquivalenceReport verify_equivalence(const BasicModel<T>& dense, const SparsityPlan& plan, const BasicModel<T>& pruned,
                                     const std::vector<std::vector<std::uint32_t>>& sequences, double tol) {
  EquivalenceReport r;
  for (const auto& seq : sequences) {
    const Matrix<T> want = masked_forward(dense, plan, seq);
    const Matrix<T> got = forward_pass(pruned, seq);
    if (!want.same_shape(got)) {
      r.max_abs_diff = std::numeric_limits<double>::infinity();
      break;
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      const double diff = std::abs(static_cast<double>(want.flat()[i]) - static_cast<double>(got.flat()[i]));
      if (!(diff <= r.max_abs_diff)) r.max_abs_diff = std::isnan(diff) ? std::numeric_limits<double>::infinity() : diff;
    }
  }
  r.pass = r.max_abs_diff <= tol;
  return r;
}

// --- plan construction ------------------------------------------------------

struct PruneOptions {
  double gamma = 0.5;
  double alpha = 1.0;
  double min_keep = kDefaultMinKeep;
  CoarseMetric metric = CoarseMetric::angular;
  FineMethod fine = FineMethod::cfsp;
  Allocation allocation = Allocation::cfsp;
  std::size_t multiple = 128;
};

template <Scalar T>
std::vector<std::vector<double>> channel_scores(const BasicModel<T>& model, const SummaryList& summaries,
                                                FineMethod method) {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& blk = model.blocks[l];
    switch (method) {
      case FineMethod::cfsp: out.push_back(fine_scores(blk, summaries[l].channel_norms()).scores); break;
      case FineMethod::wanda:
        out.push_back(wanda_scores(blk, summaries[l].channel_norms(), summaries[l].input_norms()));
        break;
      case FineMethod::magnitude: out.push_back(magnitude_scores(blk)); break;
    }
  }
  return out;
}

/// Coarse budgets -> rounded widths -> fine channel selection.
template <Scalar T>
SparsityPlan plan_pruning(const BasicModel<T>& model, const SummaryList& summaries, const PruneOptions& opt) {
  if (summaries.size() != model.blocks.size()) fail(ErrorCode::input, "plan: summary count differs from block count");
  for (std::size_t l = 0; l < summaries.size(); ++l) {
    if (summaries[l].channel_sq_sum.size() != model.config.d_ff_per_block[l] ||
        summaries[l].input_sq_sum.size() != model.config.d_model) {
      fail(ErrorCode::input, "plan: summary for block " + std::to_string(l) + " does not match the model");
    }
  }
  const CoarseScores coarse = compute_coarse(summaries, opt.metric, opt.alpha);
  const auto scores = channel_scores(model, summaries, opt.fine);
  const auto& dim_o = model.config.d_ff_per_block;

  RetentionBudget budget;
  switch (opt.allocation) {
    case Allocation::cfsp: budget = allocate_retention(coarse.normalized, opt.gamma, opt.min_keep); break;
    case Allocation::uniform: budget = uniform_retention(dim_o.size(), opt.gamma); break;
    case Allocation::global_sort: {
      const std::size_t total = std::accumulate(dim_o.begin(), dim_o.end(), std::size_t{0});
      const auto target = static_cast<std::size_t>(std::llround(opt.gamma * static_cast<double>(total)));
      const auto counts = global_sort_allocation(scores, std::min(target, total));
      budget.gamma = opt.gamma;
      for (std::size_t l = 0; l < counts.size(); ++l) {
        const double k = static_cast<double>(counts[l]) / static_cast<double>(dim_o[l]);
        budget.keep_fraction.push_back(k);
        budget.unclamped.push_back(k);
        budget.clamped.push_back(false);
      }
      break;
    }
  }
  const auto dim_f = adjust_dimensions(budget.keep_fraction, dim_o, opt.multiple);
  SparsityPlan plan = build_plan(scores, dim_f);
  plan.raw_scores = coarse.raw;
  plan.normalized_scores = coarse.normalized;
  for (std::size_t l = 0; l < plan.blocks.size(); ++l) {
    plan.blocks[l].keep_fraction = budget.keep_fraction[l];
    plan.blocks[l].unclamped = budget.unclamped[l];
    plan.blocks[l].clamped = budget.clamped[l];
  }
  plan.provenance = {std::string(to_string(opt.fine)), std::string(to_string(opt.allocation)),
                     std::string(to_string(opt.metric)), opt.gamma, opt.alpha, opt.multiple,
                     summary_digest(summaries)};
  return plan;
}

/// Human-readable per-block report written next to a pruned checkpoint.
inline std::string plan_summary(const SparsityPlan& plan) {
  std::ostringstream os;
  const auto& p = plan.provenance;
  os << "method=" << p.method << " allocation=" << p.allocation << " metric=" << p.metric << " gamma=" << p.gamma
     << " alpha=" << p.alpha << " multiple=" << p.multiple << " calibration=" << p.calibration_digest << "\n";
  os << "block  dim_o  dim_f  budget    realized  clamped\n";
  std::size_t total_o = 0, total_f = 0;
  char line[160];
  for (std::size_t l = 0; l < plan.blocks.size(); ++l) {
    const auto& b = plan.blocks[l];
    total_o += b.dim_o;
    total_f += b.dim_f;
    std::snprintf(line, sizeof line, "%5zu  %5zu  %5zu  %.6f  %.6f  %s\n", l, b.dim_o, b.dim_f, b.keep_fraction,
                  static_cast<double>(b.dim_f) / static_cast<double>(b.dim_o), b.clamped ? "yes" : "no");
    os << line;
  }
  const double realized = total_o ? static_cast<double>(total_f) / static_cast<double>(total_o) : 0.0;
  std::snprintf(line, sizeof line, "retained %zu of %zu channels (%.6f); deviation from gamma %+.6f\n", total_f,
                total_o, realized, realized - p.gamma);
  os << line;
  return os.str();
}

// --- plan files -------------------------------------------------------------

inline nlohmann::json plan_to_json(const SparsityPlan& plan) {
  const auto& p = plan.provenance;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : plan.blocks) {
    blocks.push_back({{"dim_o", b.dim_o},
                      {"dim_f", b.dim_f},
                      {"keep_fraction", b.keep_fraction},
                      {"unclamped", b.unclamped},
                      {"clamped", b.clamped},
                      {"kept", b.kept}});
  }
  return {{"format_version", kFormatVersion},
          {"provenance",
           {{"method", p.method},
            {"allocation", p.allocation},
            {"metric", p.metric},
            {"gamma", p.gamma},
            {"alpha", p.alpha},
            {"multiple", p.multiple},
            {"calibration_digest", p.calibration_digest}}},
          {"coarse", {{"raw", plan.raw_scores}, {"normalized", plan.normalized_scores}}},
          {"blocks", blocks}};
}

inline SparsityPlan plan_from_json(const nlohmann::json& j) {
  SparsityPlan plan;
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) {
      fail(ErrorCode::unknown_version, "plan: unknown format_version");
    }
    const auto& p = j.at("provenance");
    plan.provenance.method = p.at("method").get<std::string>();
    plan.provenance.allocation = p.at("allocation").get<std::string>();
    plan.provenance.metric = p.at("metric").get<std::string>();
    plan.provenance.gamma = p.at("gamma").get<double>();
    plan.provenance.alpha = p.at("alpha").get<double>();
    plan.provenance.multiple = p.at("multiple").get<std::size_t>();
    plan.provenance.calibration_digest = p.at("calibration_digest").get<std::string>();
    plan.raw_scores = j.at("coarse").at("raw").get<std::vector<double>>();
    plan.normalized_scores = j.at("coarse").at("normalized").get<std::vector<double>>();
    for (const auto& b : j.at("blocks")) {
      BlockPlan bp;
      bp.dim_o = b.at("dim_o").get<std::size_t>();
      bp.dim_f = b.at("dim_f").get<std::size_t>();
      bp.keep_fraction = b.at("keep_fraction").get<double>();
      bp.unclamped = b.at("unclamped").get<double>();
      bp.clamped = b.at("clamped").get<bool>();
      bp.kept = b.at("kept").get<std::vector<std::size_t>>();
      plan.blocks.push_back(std::move(bp));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("plan: ") + e.what());
  }
  return plan;
}

inline void save_plan(const SparsityPlan& plan, const fs::path& path) { write_json(path, plan_to_json(plan)); }
inline SparsityPlan load_plan(const fs::path& path) { return plan_from_json(read_json(path)); }

}  // namespace cfsp
