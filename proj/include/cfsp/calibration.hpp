#pragma once

// Single-pass calibration: one forward pass per sampled sequence, streaming
// per-block transformation distances and per-channel activation energy into
// ActivationSummary records. No activation trace is ever materialized.

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cfsp/checkpoint.hpp"
#include "cfsp/distance.hpp"
#include "cfsp/error.hpp"
#include "cfsp/model.hpp"
#include "cfsp/random.hpp"

namespace cfsp {

inline constexpr std::size_t kDefaultCalibrationSamples = 128;
inline constexpr std::size_t kDefaultCalibrationSeqLen = 1024;

struct CalibrationSet {
  std::vector<std::vector<std::uint32_t>> sequences;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
};

/// Draws `n_samples` non-overlapping windows of `seq_len` tokens. Windows are
/// aligned to multiples of seq_len and picked by a seeded shuffle.
inline CalibrationSet sample_calibration(std::span<const std::uint32_t> corpus, std::size_t n_samples,
                                         std::size_t seq_len, std::uint64_t seed) {
  if (n_samples < 1 || seq_len < 1) fail(ErrorCode::config, "calibration: n_samples and seq_len must be >= 1");
  const std::size_t slots = corpus.size() / seq_len;
  if (slots < n_samples) {
    fail(ErrorCode::capacity, "calibration: corpus holds " + std::to_string(corpus.size()) + " tokens, need " +
                                  std::to_string(n_samples * seq_len));
  }
  std::vector<std::size_t> order(slots);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = slots; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  CalibrationSet set;
  set.seed = seed;
  set.seq_len = seq_len;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto begin = corpus.begin() + static_cast<std::ptrdiff_t>(order[s] * seq_len);
    set.sequences.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(seq_len));
  }
  return set;
}

struct ActivationSummary {
  std::uint64_t token_count = 0;
  double dist_sum = 0.0;       // sum of angular distances between block input and output
  double cosine_sum = 0.0;     // sum of (1 - cosine similarity)
  double euclidean_sum = 0.0;  // sum of ||x_out - x_in||
  std::vector<double> channel_sq_sum;  // [d_ff]   sum_t X_d[t][i]^2
  std::vector<double> input_sq_sum;    // [d_model] sum_t ffn_input[t][j]^2

  double mean_distance() const { return token_count ? dist_sum / static_cast<double>(token_count) : 0.0; }
  double mean_cosine_distance() const { return token_count ? cosine_sum / static_cast<double>(token_count) : 0.0; }
  double mean_euclidean() const { return token_count ? euclidean_sum / static_cast<double>(token_count) : 0.0; }

  /// ||X_d^i|| over all calibration tokens.
  std::vector<double> channel_norms() const {
    std::vector<double> out(channel_sq_sum.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(channel_sq_sum[i]);
    return out;
  }
  std::vector<double> input_norms() const {
    std::vector<double> out(input_sq_sum.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(input_sq_sum[i]);
    return out;
  }

  void merge(const ActivationSummary& other) {
    if (channel_sq_sum.size() != other.channel_sq_sum.size() || input_sq_sum.size() != other.input_sq_sum.size()) {
      fail(ErrorCode::shape, "summary merge: width mismatch");
    }
    token_count += other.token_count;
    dist_sum += other.dist_sum;
    cosine_sum += other.cosine_sum;
    euclidean_sum += other.euclidean_sum;
    for (std::size_t i = 0; i < channel_sq_sum.size(); ++i) channel_sq_sum[i] += other.channel_sq_sum[i];
    for (std::size_t i = 0; i < input_sq_sum.size(); ++i) input_sq_sum[i] += other.input_sq_sum[i];
  }

  friend bool operator==(const ActivationSummary&, const ActivationSummary&) = default;
};

using SummaryList = std::vector<ActivationSummary>;

/// Statistics of one sequence, one entry per block.
template <Scalar T>
SummaryList summarize_sequence(const BasicModel<T>& model, std::span<const std::uint32_t> tokens) {
  SummaryList out(model.blocks.size());
  for (std::size_t l = 0; l < out.size(); ++l) {
    out[l].channel_sq_sum.assign(model.config.d_ff_per_block[l], 0.0);
    out[l].input_sq_sum.assign(model.config.d_model, 0.0);
  }
  BlockObserver<T> observer = [&](const BlockView<T>& view) {
    auto& s = out[view.index];
    for (std::size_t t = 0; t < view.block_input.rows(); ++t) {
      const auto in = view.block_input.row(t);
      const auto outv = view.block_output.row(t);
      ++s.token_count;
      s.euclidean_sum += euclidean_distance(in, outv);
      if (l2_norm(in) >= kDegenerateNorm && l2_norm(outv) >= kDegenerateNorm) {
        s.dist_sum += angular_distance(in, outv);
        s.cosine_sum += 1.0 - std::clamp(cosine_similarity(in, outv), -1.0, 1.0);
      }
    }
    for (std::size_t t = 0; t < view.ffn_activation.rows(); ++t) {
      const auto row = view.ffn_activation.row(t);
      for (std::size_t i = 0; i < row.size(); ++i) s.channel_sq_sum[i] += static_cast<double>(row[i]) * row[i];
      const auto hin = view.ffn_input.row(t);
      for (std::size_t j = 0; j < hin.size(); ++j) s.input_sq_sum[j] += static_cast<double>(hin[j]) * hin[j];
    }
  };
  ForwardOptions<T> opt;
  opt.observer = &observer;
  (void)forward_pass(model, tokens, opt);
  return out;
}

/// Folds partial summaries pairwise, level by level, in index order. The
/// result depends only on the partial list, never on scheduling.
inline SummaryList merge_tree(std::vector<SummaryList> parts) {
  if (parts.empty()) fail(ErrorCode::input, "calibration: no sequences");
  while (parts.size() > 1) {
    std::vector<SummaryList> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i < parts.size(); i += 2) {
      if (i + 1 < parts.size()) {
        for (std::size_t l = 0; l < parts[i].size(); ++l) parts[i][l].merge(parts[i + 1][l]);
      }
      next.push_back(std::move(parts[i]));
    }
    parts = std::move(next);
  }
  return std::move(parts.front());
}

template <Scalar T>
SummaryList collect_summaries(const BasicModel<T>& model, const CalibrationSet& calib, std::size_t threads = 1) {
  if (calib.sequences.empty()) fail(ErrorCode::input, "calibration: empty calibration set");
  for (const auto& seq : calib.sequences) check_tokens<T>(model.config, seq);
  std::vector<SummaryList> parts(calib.sequences.size());
  threads = std::max<std::size_t>(1, std::min(threads, parts.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < parts.size(); ++i) parts[i] = summarize_sequence(model, calib.sequences[i]);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < parts.size(); i += threads) {
            parts[i] = summarize_sequence(model, calib.sequences[i]);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return merge_tree(std::move(parts));
}

// --- serialization ----------------------------------------------------------

/// Writes summary.json + summary.bin (little-endian f64 vectors).
inline void save_summaries(const SummaryList& s, const fs::path& dir) {
  nlohmann::json blocks = nlohmann::json::array();
  std::string blob;
  for (const auto& b : s) {
    const std::size_t channel_offset = blob.size();
    append_f64_le(blob, b.channel_sq_sum);
    const std::size_t input_offset = blob.size();
    append_f64_le(blob, b.input_sq_sum);
    blocks.push_back({{"token_count", b.token_count},
                      {"dist_sum", b.dist_sum},
                      {"cosine_sum", b.cosine_sum},
                      {"euclidean_sum", b.euclidean_sum},
                      {"d_ff", b.channel_sq_sum.size()},
                      {"d_model", b.input_sq_sum.size()},
                      {"channel_offset", channel_offset},
                      {"input_offset", input_offset}});
  }
  fs::create_directories(dir);
  write_file(dir / "summary.bin", blob);
  write_json(dir / "summary.json", {{"format_version", kFormatVersion}, {"blocks", blocks}});
}

inline SummaryList load_summaries(const fs::path& dir) {
  const auto j = read_json(dir / "summary.json");
  if (j.value("format_version", -1) != kFormatVersion) {
    fail(ErrorCode::unknown_version, "summary.json: unknown format_version");
  }
  const std::string blob = read_file(dir / "summary.bin");
  SummaryList out;
  try {
    for (const auto& b : j.at("blocks")) {
      ActivationSummary s;
      s.token_count = b.at("token_count").get<std::uint64_t>();
      s.dist_sum = b.at("dist_sum").get<double>();
      s.cosine_sum = b.at("cosine_sum").get<double>();
      s.euclidean_sum = b.at("euclidean_sum").get<double>();
      const auto d_ff = b.at("d_ff").get<std::size_t>();
      const auto d_model = b.at("d_model").get<std::size_t>();
      const auto co = b.at("channel_offset").get<std::size_t>();
      const auto io = b.at("input_offset").get<std::size_t>();
      if (co + 8 * d_ff > blob.size() || io + 8 * d_model > blob.size()) {
        fail(ErrorCode::truncated, "summary.bin is truncated");
      }
      s.channel_sq_sum.resize(d_ff);
      s.input_sq_sum.resize(d_model);
      for (std::size_t i = 0; i < d_ff; ++i) s.channel_sq_sum[i] = read_f64_le(blob.data() + co + 8 * i);
      for (std::size_t i = 0; i < d_model; ++i) s.input_sq_sum[i] = read_f64_le(blob.data() + io + 8 * i);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("summary.json: ") + e.what());
  }
  return out;
}

/// Stable digest of a summary list, recorded in plan provenance.
inline std::string summary_digest(const SummaryList& s) {
  std::string bytes;
  for (const auto& b : s) {
    const double head[] = {static_cast<double>(b.token_count), b.dist_sum, b.cosine_sum, b.euclidean_sum};
    append_f64_le(bytes, head);
    append_f64_le(bytes, b.channel_sq_sum);
    append_f64_le(bytes, b.input_sq_sum);
  }
  return fnv1a_hex(bytes);
}

}  // namespace cfsp
