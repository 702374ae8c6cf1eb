#pragma once

// Pre-norm decoder-only transformer with multi-head causal attention and a
// gated (SiLU) feed-forward network.
//
// Layouts: attention projections are stored [out x in]. The three FFN
// matrices are all intermediate-major, so FFN channel i is row i of up, gate
// and down alike: up/gate are [d_ff x d_model] (y = h up^T) and down is
// [d_ff x d_model] (y = X_d down). lm_head is [d_model x vocab].

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfsp/error.hpp"
#include "cfsp/lora.hpp"
#include "cfsp/random.hpp"
#include "cfsp/tensor.hpp"

namespace cfsp {

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  // Only consulted by parameter/MAC accounting. The engine runs full MHA.
  std::size_t n_kv_heads = 0;  // 0 means n_heads
  std::size_t n_blocks = 4;
  std::vector<std::size_t> d_ff_per_block = {256, 256, 256, 256};
  double norm_eps = 1e-5;
  std::size_t max_seq_len = 1024;

  std::size_t kv_heads() const noexcept { return n_kv_heads == 0 ? n_heads : n_kv_heads; }
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  std::size_t kv_dim() const noexcept { return head_dim() * kv_heads(); }

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorCode::validation, "config: " + what); };
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || max_seq_len < 1) bad("counts must be >= 1");
    if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
    if (n_heads % kv_heads() != 0) bad("n_heads must be divisible by n_kv_heads");
    if (d_ff_per_block.size() != n_blocks) bad("d_ff_per_block length must equal n_blocks");
    for (auto d : d_ff_per_block) {
      if (d < 1) bad("every d_ff must be >= 1");
    }
    if (!(norm_eps > 0.0)) bad("norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The shipped desk-scale configuration.
inline ModelConfig toy_config() { return ModelConfig{}; }

template <Scalar T>
struct TransformerBlock {
  std::vector<T> attn_norm;
  Matrix<T> q, k, v, o;  // [d_model x d_model]
  std::vector<T> ffn_norm;
  Matrix<T> up, gate;  // [d_ff x d_model]
  Matrix<T> down;      // [d_ff x d_model]

  std::size_t d_ff() const noexcept { return up.rows(); }

  const Matrix<T>& weight(Target t) const {
    switch (t) {
      case Target::q: return q;
      case Target::k: return k;
      case Target::v: return v;
      case Target::o: return o;
      case Target::up: return up;
      case Target::gate: return gate;
      case Target::down: return down;
    }
    return q;
  }
  Matrix<T>& weight(Target t) { return const_cast<Matrix<T>&>(std::as_const(*this).weight(t)); }

  friend bool operator==(const TransformerBlock&, const TransformerBlock&) = default;
};

/// Whether a target's weight is stored [in x out] instead of [out x in].
inline bool stored_in_major(Target t) noexcept { return t == Target::down; }

template <Scalar T>
struct BasicModel {
  ModelConfig config;
  Matrix<T> embedding;  // [vocab x d_model]
  std::vector<TransformerBlock<T>> blocks;
  std::vector<T> final_norm;
  Matrix<T> lm_head;  // [d_model x vocab]

  friend bool operator==(const BasicModel&, const BasicModel&) = default;
};

using ModelCheckpoint = BasicModel<float>;

template <Scalar To, Scalar From>
BasicModel<To> model_cast(const BasicModel<From>& m) {
  BasicModel<To> out;
  out.config = m.config;
  out.embedding = matrix_cast<To>(m.embedding);
  out.final_norm = vector_cast<To>(m.final_norm);
  out.lm_head = matrix_cast<To>(m.lm_head);
  out.blocks.reserve(m.blocks.size());
  for (const auto& b : m.blocks) {
    TransformerBlock<To> nb;
    nb.attn_norm = vector_cast<To>(b.attn_norm);
    nb.ffn_norm = vector_cast<To>(b.ffn_norm);
    nb.q = matrix_cast<To>(b.q);
    nb.k = matrix_cast<To>(b.k);
    nb.v = matrix_cast<To>(b.v);
    nb.o = matrix_cast<To>(b.o);
    nb.up = matrix_cast<To>(b.up);
    nb.gate = matrix_cast<To>(b.gate);
    nb.down = matrix_cast<To>(b.down);
    out.blocks.push_back(std::move(nb));
  }
  return out;
}

/// Checks every tensor shape against the config and that all values are finite.
template <Scalar T>
void validate_model(const BasicModel<T>& m) {
  const auto& c = m.config;
  c.validate();
  if (c.kv_heads() != c.n_heads) {
    fail(ErrorCode::validation, "grouped-query attention (n_kv_heads != n_heads) is not supported by the engine");
  }
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::shape_mismatch, "model: " + what + " has the wrong shape");
  };
  auto finite = [](std::span<const T> v, const std::string& what) {
    if (!all_finite(v)) fail(ErrorCode::validation, "model: " + what + " contains non-finite values");
  };
  const std::size_t d = c.d_model;
  check(m.embedding.rows() == c.vocab_size && m.embedding.cols() == d, "embedding");
  check(m.lm_head.rows() == d && m.lm_head.cols() == c.vocab_size, "lm_head");
  check(m.final_norm.size() == d, "final_norm");
  check(m.blocks.size() == c.n_blocks, "block list");
  finite(m.embedding.flat(), "embedding");
  finite(m.lm_head.flat(), "lm_head");
  finite(m.final_norm, "final_norm");
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    const std::size_t f = c.d_ff_per_block[l];
    check(b.attn_norm.size() == d && b.ffn_norm.size() == d, p + "norm");
    for (auto t : {Target::q, Target::k, Target::v, Target::o}) {
      check(b.weight(t).rows() == d && b.weight(t).cols() == d, p + std::string(target_name(t)));
    }
    for (auto t : {Target::up, Target::gate, Target::down}) {
      check(b.weight(t).rows() == f && b.weight(t).cols() == d, p + std::string(target_name(t)));
    }
    for (std::size_t t = 0; t < kTargetCount; ++t) {
      finite(b.weight(static_cast<Target>(t)).flat(), p + std::string(target_name(static_cast<Target>(t))));
    }
    finite(b.attn_norm, p + "attn_norm");
    finite(b.ffn_norm, p + "ffn_norm");
  }
}

/// Gaussian-initialized model. Projections use std 1/sqrt(fan_in); the
/// embedding is unit-variance.
template <Scalar T = float>
BasicModel<T> make_random_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto gaussian = [&](std::size_t r, std::size_t c, double stddev) {
    Matrix<T> m(r, c);
    for (auto& v : m.flat()) v = static_cast<T>(rng.normal(0.0, stddev));
    return m;
  };
  const std::size_t d = config.d_model;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  BasicModel<T> m;
  m.config = config;
  m.embedding = gaussian(config.vocab_size, d, 1.0);
  for (std::size_t l = 0; l < config.n_blocks; ++l) {
    const std::size_t f = config.d_ff_per_block[l];
    TransformerBlock<T> b;
    b.attn_norm.assign(d, T(1));
    b.ffn_norm.assign(d, T(1));
    b.q = gaussian(d, d, s_d);
    b.k = gaussian(d, d, s_d);
    b.v = gaussian(d, d, s_d);
    b.o = gaussian(d, d, s_d);
    b.up = gaussian(f, d, s_d);
    b.gate = gaussian(f, d, s_d);
    b.down = gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)));
    m.blocks.push_back(std::move(b));
  }
  m.final_norm.assign(d, T(1));
  m.lm_head = gaussian(d, config.vocab_size, s_d);
  return m;
}

template <Scalar T = float>
BasicModel<T> make_zero_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  BasicModel<T> m;
  m.config = config;
  m.embedding = Matrix<T>(config.vocab_size, d);
  for (std::size_t l = 0; l < config.n_blocks; ++l) {
    const std::size_t f = config.d_ff_per_block[l];
    TransformerBlock<T> b;
    b.attn_norm.assign(d, T(1));
    b.ffn_norm.assign(d, T(1));
    b.q = b.k = b.v = b.o = Matrix<T>(d, d);
    b.up = b.gate = b.down = Matrix<T>(f, d);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm.assign(d, T(1));
  m.lm_head = Matrix<T>(d, config.vocab_size);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Views handed to a block observer after each block runs.
template <Scalar T>
struct BlockView {
  std::size_t index;
  const Matrix<T>& block_input;   // residual stream entering the block
  const Matrix<T>& block_output;  // residual stream leaving the block
  const Matrix<T>& ffn_input;     // normalized hidden state fed to up/gate
  const Matrix<T>& ffn_activation;  // X_d = silu(gate) * up, before masking
};

template <Scalar T>
using BlockObserver = std::function<void(const BlockView<T>&)>;

/// Intermediates of one block kept for the backward pass.
template <Scalar T>
struct BlockCache {
  Matrix<T> x_in, h1;
  std::vector<double> inv1;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head [t x t]
  Matrix<T> attn;                // concatenated head outputs
  Matrix<T> x_mid, h2;
  std::vector<double> inv2;
  Matrix<T> u, g, xd;
  std::array<Matrix<T>, kTargetCount> lora_z;
};

template <Scalar T>
struct ForwardCache {
  std::vector<BlockCache<T>> blocks;
  Matrix<T> x_final, h_final;
  std::vector<double> inv_final;
};

template <Scalar T>
struct ForwardOptions {
  const AdapterSet<T>* adapters = nullptr;
  // Per block, one flag per FFN channel; channels with flag 0 are zeroed
  // before the down projection.
  const std::vector<std::vector<std::uint8_t>>* channel_mask = nullptr;
  const BlockObserver<T>* observer = nullptr;
  ForwardCache<T>* cache = nullptr;
};

/// Sinusoidal absolute position encoding value for (position, dimension).
inline double position_encoding(std::size_t pos, std::size_t dim, std::size_t d_model) {
  const double exponent = static_cast<double>(dim - dim % 2) / static_cast<double>(d_model);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

template <Scalar T>
void check_tokens(const ModelConfig& config, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) fail(ErrorCode::input, "forward: token sequence is empty");
  if (tokens.size() > config.max_seq_len) {
    fail(ErrorCode::input, "forward: sequence length " + std::to_string(tokens.size()) +
                               " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= config.vocab_size) {
      fail(ErrorCode::input, "forward: token id " + std::to_string(tokens[i]) + " at position " +
                                 std::to_string(i) + " is outside the vocabulary");
    }
  }
}

template <Scalar T>
Matrix<T> embed_tokens(const BasicModel<T>& model, std::span<const std::uint32_t> tokens) {
  const std::size_t d = model.config.d_model;
  Matrix<T> x(tokens.size(), d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto src = model.embedding.row(tokens[t]);
    auto dst = x.row(t);
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] = static_cast<T>(static_cast<double>(src[c]) + position_encoding(t, c, d));
    }
  }
  return x;
}

/// Single entry point for every forward variant (plain, masked, adapted,
/// observed, cached). Returns logits [t x vocab].
template <Scalar T>
Matrix<T> forward_pass(const BasicModel<T>& model, std::span<const std::uint32_t> tokens,
                       const ForwardOptions<T>& opt = {}) {
  const auto& c = model.config;
  check_tokens<T>(c, tokens);
  if (c.kv_heads() != c.n_heads) fail(ErrorCode::validation, "forward: grouped-query attention is not supported");
  const std::size_t t_len = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t heads = c.n_heads;
  const std::size_t hd = c.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  if (opt.cache) opt.cache->blocks.assign(model.blocks.size(), {});

  Matrix<T> x = embed_tokens(model, tokens);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& blk = model.blocks[l];
    BlockCache<T>* bc = opt.cache ? &opt.cache->blocks[l] : nullptr;
    auto adapter = [&](Target t) -> const LoRAAdapter<T>* {
      return opt.adapters ? opt.adapters->find(l, t) : nullptr;
    };
    auto z_slot = [&](Target t) -> Matrix<T>* {
      return bc ? &bc->lora_z[static_cast<std::size_t>(t)] : nullptr;
    };

    const Matrix<T> x_in = x;
    Matrix<T> h1 = rms_norm(x, std::span<const T>(blk.attn_norm), c.norm_eps);
    Matrix<T> q = apply_linear(h1, blk.q, false, adapter(Target::q), z_slot(Target::q));
    Matrix<T> k = apply_linear(h1, blk.k, false, adapter(Target::k), z_slot(Target::k));
    Matrix<T> v = apply_linear(h1, blk.v, false, adapter(Target::v), z_slot(Target::v));

    Matrix<T> attn(t_len, d);
    if (bc) bc->probs.assign(heads, {});
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix<T> qh(t_len, hd), kh(t_len, hd), vh(t_len, hd);
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < hd; ++e) {
          qh(t, e) = q(t, h * hd + e);
          kh(t, e) = k(t, h * hd + e);
          vh(t, e) = v(t, h * hd + e);
        }
      }
      Matrix<T> scores = matmul_bt(qh, kh);
      for (auto& s : scores.flat()) s = static_cast<T>(static_cast<double>(s) * attn_scale);
      Matrix<T> probs = causal_softmax_rows(scores);
      Matrix<T> oh = matmul(probs, vh);
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < hd; ++e) attn(t, h * hd + e) = oh(t, e);
      }
      if (bc) bc->probs[h] = std::move(probs);
    }
    Matrix<T> attn_out = apply_linear(attn, blk.o, false, adapter(Target::o), z_slot(Target::o));
    add_inplace(x, attn_out);

    Matrix<T> h2 = rms_norm(x, std::span<const T>(blk.ffn_norm), c.norm_eps);
    Matrix<T> u = apply_linear(h2, blk.up, false, adapter(Target::up), z_slot(Target::up));
    Matrix<T> g = apply_linear(h2, blk.gate, false, adapter(Target::gate), z_slot(Target::gate));
    Matrix<T> xd = hadamard(silu(g), u);
    Matrix<T> xd_used = xd;
    if (opt.channel_mask) {
      const auto& mask = (*opt.channel_mask)[l];
      if (mask.size() != xd.cols()) fail(ErrorCode::plan, "forward: channel mask width differs from d_ff");
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t i = 0; i < xd.cols(); ++i) {
          if (!mask[i]) xd_used(t, i) = T(0);
        }
      }
    }
    Matrix<T> ffn_out = apply_linear(xd_used, blk.down, true, adapter(Target::down), z_slot(Target::down));

    if (bc) {
      bc->x_in = x_in;
      bc->inv1 = rms_inverse(x_in, c.norm_eps);
      bc->h1 = h1;
      bc->x_mid = x;
      bc->inv2 = rms_inverse(x, c.norm_eps);
      bc->h2 = h2;
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->attn = std::move(attn);
      bc->u = u;
      bc->g = g;
      bc->xd = xd_used;
    }
    add_inplace(x, ffn_out);
    if (opt.observer && *opt.observer) {
      (*opt.observer)(BlockView<T>{l, x_in, x, h2, xd});
    }
  }

  Matrix<T> hf = rms_norm(x, std::span<const T>(model.final_norm), c.norm_eps);
  Matrix<T> logits = matmul(hf, model.lm_head);
  if (opt.cache) {
    opt.cache->inv_final = rms_inverse(x, c.norm_eps);
    opt.cache->x_final = std::move(x);
    opt.cache->h_final = std::move(hf);
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Activation traces

enum Capture : unsigned {
  kCaptureNone = 0,
  kCaptureBlockIO = 1u << 0,
  kCaptureFfnActivation = 1u << 1,
  kCaptureFfnInput = 1u << 2,
  kCaptureAll = kCaptureBlockIO | kCaptureFfnActivation | kCaptureFfnInput,
};

/// Number of ActivationTrace objects currently alive (process-wide).
inline std::atomic<long> live_trace_count{0};
inline std::atomic<long> peak_trace_count{0};

template <Scalar T>
struct ActivationTrace {
  struct Block {
    Matrix<T> input, output;
    Matrix<T> ffn_input;
    Matrix<T> ffn_activation;
  };
  std::vector<Block> blocks;
  Matrix<T> logits;

  ActivationTrace() { note_alive(); }
  ActivationTrace(const ActivationTrace& o) : blocks(o.blocks), logits(o.logits) { note_alive(); }
  ActivationTrace(ActivationTrace&& o) noexcept : blocks(std::move(o.blocks)), logits(std::move(o.logits)) {
    note_alive();
  }
  ActivationTrace& operator=(const ActivationTrace&) = default;
  ActivationTrace& operator=(ActivationTrace&&) noexcept = default;
  ~ActivationTrace() { --live_trace_count; }

 private:
  static void note_alive() {
    const long now = ++live_trace_count;
    long peak = peak_trace_count.load();
    while (now > peak && !peak_trace_count.compare_exchange_weak(peak, now)) {
    }
  }
};

template <Scalar T>
struct ForwardResult {
  Matrix<T> logits;
  std::optional<ActivationTrace<T>> trace;
};

template <Scalar T>
ForwardResult<T> forward(const BasicModel<T>& model, std::span<const std::uint32_t> tokens,
                         unsigned capture = kCaptureNone) {
  ForwardResult<T> result;
  if (capture == kCaptureNone) {
    result.logits = forward_pass(model, tokens);
    return result;
  }
  ActivationTrace<T> trace;
  trace.blocks.resize(model.blocks.size());
  BlockObserver<T> observer = [&](const BlockView<T>& view) {
    auto& b = trace.blocks[view.index];
    if (capture & kCaptureBlockIO) {
      b.input = view.block_input;
      b.output = view.block_output;
    }
    if (capture & kCaptureFfnInput) b.ffn_input = view.ffn_input;
    if (capture & kCaptureFfnActivation) b.ffn_activation = view.ffn_activation;
  };
  ForwardOptions<T> opt;
  opt.observer = &observer;
  result.logits = forward_pass(model, tokens, opt);
  trace.logits = result.logits;
  result.trace = std::move(trace);
  return result;
}

}  // namespace cfsp
