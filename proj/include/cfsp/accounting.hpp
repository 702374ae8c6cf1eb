#pragma once

// Exact parameter and multiply-accumulate counts from a config alone.

#include <cstdint>

#include "cfsp/model.hpp"

namespace cfsp {

struct ParamBreakdown {
  std::uint64_t mha = 0;         // q, k, v, o projections
  std::uint64_t ffn = 0;         // up, gate, down
  std::uint64_t norms = 0;       // per-block norm gains and the final norm
  std::uint64_t embeddings = 0;  // token embedding and lm_head
  std::uint64_t total = 0;
};

struct MacBreakdown {
  std::uint64_t mha_linear = 0;  // q, k, v, o projections
  std::uint64_t attention = 0;   // score and value products
  std::uint64_t ffn = 0;
  std::uint64_t lm_head = 0;

  /// Transformer blocks only, the convention of per-backbone MAC tables.
  std::uint64_t backbone() const noexcept { return mha_linear + attention + ffn; }
  std::uint64_t total() const noexcept { return backbone() + lm_head; }
};

inline ParamBreakdown count_params(const ModelConfig& c) {
  ParamBreakdown p;
  const std::uint64_t d = c.d_model;
  const std::uint64_t kv = c.kv_dim();
  for (std::size_t l = 0; l < c.n_blocks; ++l) {
    p.mha += 2 * d * d + 2 * d * kv;
    p.ffn += 3 * static_cast<std::uint64_t>(c.d_ff_per_block[l]) * d;
    p.norms += 2 * d;
  }
  p.norms += d;
  p.embeddings = 2 * static_cast<std::uint64_t>(c.vocab_size) * d;
  p.total = p.mha + p.ffn + p.norms + p.embeddings;
  return p;
}

template <Scalar T>
ParamBreakdown count_params(const BasicModel<T>& m) {
  return count_params(m.config);
}

inline MacBreakdown count_macs(const ModelConfig& c, std::size_t seq_len) {
  if (seq_len < 1) fail(ErrorCode::config, "count_macs: seq_len must be >= 1");
  MacBreakdown m;
  const std::uint64_t s = seq_len;
  const std::uint64_t d = c.d_model;
  const std::uint64_t kv = c.kv_dim();
  for (std::size_t l = 0; l < c.n_blocks; ++l) {
    m.mha_linear += s * (2 * d * d + 2 * d * kv);
    m.attention += 2 * s * s * d;
    m.ffn += s * 3 * static_cast<std::uint64_t>(c.d_ff_per_block[l]) * d;
  }
  m.lm_head = s * d * c.vocab_size;
  return m;
}

template <Scalar T>
MacBreakdown count_macs(const BasicModel<T>& m, std::size_t seq_len) {
  return count_macs(m.config, seq_len);
}

}  // namespace cfsp
