#pragma once

// Importance scoring.
//
// Coarse (per block): a distance between each block's input and output
// residual stream, sigmoid-normalized around the block mean, turns into a
// per-block retention fraction whose mean is the global retention gamma, and
// is then rounded to a hardware-friendly width.
//
// Fine (per FFN channel): relative weight magnitudes of up, gate and down,
// each normalized by the column they share with the other channels, times the
// channel's activation norm.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "cfsp/calibration.hpp"
#include "cfsp/distance.hpp"
#include "cfsp/error.hpp"
#include "cfsp/model.hpp"

namespace cfsp {

enum class CoarseMetric { angular, cosine, euclidean, uniform };
enum class FineMethod { cfsp, wanda, magnitude };
enum class Allocation { cfsp, uniform, global_sort };

inline std::string_view to_string(CoarseMetric m) {
  switch (m) {
    case CoarseMetric::angular: return "angular";
    case CoarseMetric::cosine: return "cosine";
    case CoarseMetric::euclidean: return "euclidean";
    case CoarseMetric::uniform: return "uniform";
  }
  return "?";
}
inline std::string_view to_string(FineMethod m) {
  switch (m) {
    case FineMethod::cfsp: return "cfsp";
    case FineMethod::wanda: return "wanda";
    case FineMethod::magnitude: return "magnitude";
  }
  return "?";
}
inline std::string_view to_string(Allocation a) {
  switch (a) {
    case Allocation::cfsp: return "cfsp";
    case Allocation::uniform: return "uniform";
    case Allocation::global_sort: return "global-sort";
  }
  return "?";
}

inline CoarseMetric parse_metric(std::string_view s) {
  for (auto m : {CoarseMetric::angular, CoarseMetric::cosine, CoarseMetric::euclidean, CoarseMetric::uniform}) {
    if (to_string(m) == s) return m;
  }
  fail(ErrorCode::config, "unknown metric '" + std::string(s) + "' (angular|cosine|euclidean|uniform)");
}
inline FineMethod parse_fine(std::string_view s) {
  for (auto m : {FineMethod::cfsp, FineMethod::wanda, FineMethod::magnitude}) {
    if (to_string(m) == s) return m;
  }
  fail(ErrorCode::config, "unknown fine method '" + std::string(s) + "' (cfsp|wanda|magnitude)");
}
inline Allocation parse_allocation(std::string_view s) {
  for (auto a : {Allocation::cfsp, Allocation::uniform, Allocation::global_sort}) {
    if (to_string(a) == s) return a;
  }
  fail(ErrorCode::config, "unknown allocation '" + std::string(s) + "' (cfsp|uniform|global-sort)");
}

// --- coarse -----------------------------------------------------------------

/// Raw per-block score: mean per-token distance under `metric`.
inline std::vector<double> coarse_scores(const SummaryList& summaries, CoarseMetric metric) {
  if (summaries.empty()) fail(ErrorCode::input, "coarse_scores: no summaries");
  std::vector<double> raw;
  raw.reserve(summaries.size());
  for (const auto& s : summaries) {
    switch (metric) {
      case CoarseMetric::angular: raw.push_back(s.mean_distance()); break;
      case CoarseMetric::cosine: raw.push_back(s.mean_cosine_distance()); break;
      case CoarseMetric::euclidean: raw.push_back(s.mean_euclidean()); break;
      case CoarseMetric::uniform: raw.push_back(1.0); break;
    }
  }
  return raw;
}

/// out[l] = 1 / (1 + exp(-alpha (raw[l] - mean(raw)))).
inline std::vector<double> normalize_scores(std::span<const double> raw, double alpha) {
  if (raw.empty()) fail(ErrorCode::input, "normalize_scores: empty score vector");
  if (!(alpha > 0.0)) fail(ErrorCode::config, "normalize_scores: alpha must be positive");
  const double mean = std::accumulate(raw.begin(), raw.end(), 0.0) / static_cast<double>(raw.size());
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-alpha * (raw[i] - mean)));
  return out;
}

struct CoarseScores {
  std::vector<double> raw;
  std::vector<double> normalized;
  double alpha = 1.0;
  double mean = 0.0;
};

inline CoarseScores compute_coarse(const SummaryList& summaries, CoarseMetric metric, double alpha) {
  CoarseScores c;
  c.raw = coarse_scores(summaries, metric);
  c.alpha = alpha;
  c.mean = std::accumulate(c.raw.begin(), c.raw.end(), 0.0) / static_cast<double>(c.raw.size());
  c.normalized = normalize_scores(c.raw, alpha);
  return c;
}

struct RetentionBudget {
  std::vector<double> keep_fraction;  // after clamping
  std::vector<double> unclamped;      // keep[l] = norm[l] gamma n / sum(norm)
  std::vector<bool> clamped;
  double gamma = 1.0;

  /// Retention lost or gained by clamping, as a fraction of total width.
  double clamp_deviation() const {
    double d = 0.0;
    for (std::size_t i = 0; i < keep_fraction.size(); ++i) d += keep_fraction[i] - unclamped[i];
    return d / static_cast<double>(keep_fraction.size());
  }
};

inline constexpr double kDefaultMinKeep = 0.05;

/// Distributes the global retention fraction gamma across blocks in
/// proportion to the normalized scores. Out-of-range blocks are clamped into
/// [min_keep, 1] without redistributing the difference.
inline RetentionBudget allocate_retention(std::span<const double> normalized, double gamma,
                                          double min_keep = kDefaultMinKeep) {
  if (!(gamma > 0.0 && gamma <= 1.0)) fail(ErrorCode::config, "allocate_retention: gamma must lie in (0, 1]");
  if (!(min_keep > 0.0 && min_keep <= 1.0)) fail(ErrorCode::config, "allocate_retention: min_keep must lie in (0, 1]");
  if (normalized.empty()) fail(ErrorCode::input, "allocate_retention: no blocks");
  const double n = static_cast<double>(normalized.size());
  const double total = std::accumulate(normalized.begin(), normalized.end(), 0.0);
  if (!(total > 0.0)) fail(ErrorCode::input, "allocate_retention: normalized scores must be positive");
  RetentionBudget b;
  b.gamma = gamma;
  for (double s : normalized) {
    const double keep = s * gamma * n / total;
    b.unclamped.push_back(keep);
    const double c = std::clamp(keep, min_keep, 1.0);
    b.keep_fraction.push_back(c);
    b.clamped.push_back(c != keep);
  }
  return b;
}

inline RetentionBudget uniform_retention(std::size_t n_blocks, double gamma) {
  const std::vector<double> equal(n_blocks, 0.5);
  return allocate_retention(equal, gamma);
}

/// Rounds each retained width dim_o * keep to the nearest multiple of
/// `multiple` (half-up), clamped to [multiple, largest multiple <= dim_o].
inline std::vector<std::size_t> adjust_dimensions(std::span<const double> keep, std::span<const std::size_t> dim_o,
                                                  std::size_t multiple) {
  if (multiple < 1) fail(ErrorCode::config, "adjust_dimensions: multiple must be >= 1");
  if (keep.size() != dim_o.size()) fail(ErrorCode::input, "adjust_dimensions: keep and dim_o lengths differ");
  std::vector<std::size_t> out(keep.size());
  const double m = static_cast<double>(multiple);
  for (std::size_t l = 0; l < keep.size(); ++l) {
    if (dim_o[l] < multiple) {
      fail(ErrorCode::config, "adjust_dimensions: block " + std::to_string(l) + " width " + std::to_string(dim_o[l]) +
                                  " is smaller than multiple " + std::to_string(multiple));
    }
    const double units = std::floor((static_cast<double>(dim_o[l]) * keep[l] + m / 2.0) / m);
    const std::size_t max_units = dim_o[l] / multiple;
    const std::size_t u = std::clamp<std::size_t>(units < 1.0 ? 1 : static_cast<std::size_t>(units), 1, max_units);
    out[l] = u * multiple;
  }
  return out;
}

// --- fine -------------------------------------------------------------------

struct FineScores {
  std::vector<double> scores;  // S(i) = F(i) * a(i)
  std::vector<double> t_d, t_u, t_g;
};

/// Streaming evaluation: column denominators once, then one pass per channel.
template <Scalar T>
FineScores fine_scores(const TransformerBlock<T>& block, std::span<const double> a) {
  const std::size_t f = block.d_ff();
  const std::size_t d = block.up.cols();
  if (a.size() != f) fail(ErrorCode::input, "fine_scores: activation norm vector length differs from d_ff");
  std::vector<double> col_d(d, 0.0), col_u(d, 0.0), col_g(d, 0.0);
  for (std::size_t k = 0; k < f; ++k) {
    for (std::size_t j = 0; j < d; ++j) {
      col_d[j] += std::abs(static_cast<double>(block.down(k, j))) * a[k];
      col_u[j] += std::abs(static_cast<double>(block.up(k, j)));
      col_g[j] += std::abs(static_cast<double>(block.gate(k, j)));
    }
  }
  auto ratio = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };
  FineScores out;
  out.scores.resize(f);
  out.t_d.resize(f);
  out.t_u.resize(f);
  out.t_g.resize(f);
  for (std::size_t i = 0; i < f; ++i) {
    double td = 0.0, tu = 0.0, tg = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      td += ratio(std::abs(static_cast<double>(block.down(i, j))) * a[i], col_d[j]);
      tu += ratio(std::abs(static_cast<double>(block.up(i, j))), col_u[j]);
      tg += ratio(std::abs(static_cast<double>(block.gate(i, j))), col_g[j]);
    }
    out.t_d[i] = td;
    out.t_u[i] = tu;
    out.t_g[i] = tg;
    out.scores[i] = (td + tu + tg) * a[i];
  }
  return out;
}

/// Sum of absolute weights a channel owns across up, gate and down.
template <Scalar T>
std::vector<double> magnitude_scores(const TransformerBlock<T>& block) {
  const std::size_t f = block.d_ff();
  std::vector<double> out(f, 0.0);
  for (std::size_t i = 0; i < f; ++i) {
    double s = 0.0;
    for (T w : block.up.row(i)) s += std::abs(static_cast<double>(w));
    for (T w : block.gate.row(i)) s += std::abs(static_cast<double>(w));
    for (T w : block.down.row(i)) s += std::abs(static_cast<double>(w));
    out[i] = s;
  }
  return out;
}

/// |weight| x input-norm, summed over every weight a channel owns. up/gate
/// weights see the FFN input norms h, down weights see the channel norm a.
template <Scalar T>
std::vector<double> wanda_scores(const TransformerBlock<T>& block, std::span<const double> a,
                                 std::span<const double> h) {
  const std::size_t f = block.d_ff();
  const std::size_t d = block.up.cols();
  if (a.size() != f || h.size() != d) fail(ErrorCode::input, "wanda_scores: activation norm lengths do not match the block");
  std::vector<double> out(f, 0.0);
  for (std::size_t i = 0; i < f; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      s += std::abs(static_cast<double>(block.up(i, j))) * h[j];
      s += std::abs(static_cast<double>(block.gate(i, j))) * h[j];
      s += std::abs(static_cast<double>(block.down(i, j))) * a[i];
    }
    out[i] = s;
  }
  return out;
}

/// Keeps the global top `total_keep` channels across all blocks; ties go to
/// the lower (block, channel) index. Returns per-block kept counts.
inline std::vector<std::size_t> global_sort_allocation(const std::vector<std::vector<double>>& per_block,
                                                       std::size_t total_keep) {
  struct Unit {
    double score;
    std::size_t block, channel;
  };
  std::vector<Unit> units;
  for (std::size_t b = 0; b < per_block.size(); ++b) {
    for (std::size_t c = 0; c < per_block[b].size(); ++c) units.push_back({per_block[b][c], b, c});
  }
  if (total_keep > units.size()) fail(ErrorCode::config, "global_sort_allocation: total_keep exceeds channel count");
  std::stable_sort(units.begin(), units.end(), [](const Unit& x, const Unit& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.block != y.block) return x.block < y.block;
    return x.channel < y.channel;
  });
  std::vector<std::size_t> counts(per_block.size(), 0);
  for (std::size_t i = 0; i < total_keep; ++i) ++counts[units[i].block];
  return counts;
}

}  // namespace cfsp
