#pragma once

// Importance-guided low-rank recovery: per-block adapter ranks from the
// normalized coarse scores, a hand-written backward pass over the decoder
// (only adapter parameters receive gradients), AdamW, and adapter folding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cfsp/checkpoint.hpp"
#include "cfsp/error.hpp"
#include "cfsp/lora.hpp"
#include "cfsp/loss.hpp"
#include "cfsp/model.hpp"
#include "cfsp/random.hpp"

namespace cfsp {

inline constexpr double kDefaultRankBudget = 8.0;
inline constexpr double kAdapterInitStd = 0.02;

// --- rank allocation --------------------------------------------------------

struct RankAllocation {
  std::vector<std::size_t> ranks;
  double r_bar = 0.0;
  std::string source_digest;  // of the normalized scores the ranks came from

  std::size_t total() const { return std::accumulate(ranks.begin(), ranks.end(), std::size_t{0}); }
};

/// r[l] = s[l] * r_bar * n / sum(s), integerized by largest remainder so the
/// ranks sum to round(r_bar * n). Blocks below `min_rank` are raised to it,
/// paying from the largest ranks (lowest score first among equals).
inline RankAllocation allocate_ranks(std::span<const double> normalized, double r_bar, std::size_t min_rank = 1) {
  const std::size_t n = normalized.size();
  if (n == 0) fail(ErrorCode::config, "allocate_ranks: no blocks");
  if (!(r_bar >= 1.0) || !std::isfinite(r_bar)) fail(ErrorCode::config, "allocate_ranks: r_bar must be >= 1");
  double sum = 0.0;
  for (double s : normalized) {
    if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorCode::config, "allocate_ranks: normalized scores must be positive");
    sum += s;
  }
  const auto total = static_cast<std::size_t>(std::llround(r_bar * static_cast<double>(n)));
  if (min_rank * n > total) fail(ErrorCode::config, "allocate_ranks: budget cannot give every block the minimum rank");

  RankAllocation out;
  out.r_bar = r_bar;
  out.ranks.resize(n);
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t l = 0; l < n; ++l) {
    const double raw = normalized[l] * r_bar * static_cast<double>(n) / sum;
    const double fl = std::floor(raw);
    out.ranks[l] = static_cast<std::size_t>(fl);
    frac[l] = raw - fl;
    assigned += out.ranks[l];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Largest fraction first; equal fractions favour the higher score.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return normalized[a] > normalized[b];
  });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % n, ++assigned) ++out.ranks[order[i]];
  for (std::size_t i = n; assigned > total; --assigned) {
    // Floating-point slack only: take back from the smallest fractions.
    i = (i == 0 ? n : i) - 1;
    while (out.ranks[order[i]] == 0) i = (i == 0 ? n : i) - 1;
    --out.ranks[order[i]];
  }

  for (std::size_t l = 0; l < n; ++l) {
    while (out.ranks[l] < min_rank) {
      std::size_t donor = n;
      for (std::size_t k = 0; k < n; ++k) {
        if (out.ranks[k] <= min_rank) continue;
        if (donor == n || out.ranks[k] > out.ranks[donor] ||
            (out.ranks[k] == out.ranks[donor] && normalized[k] < normalized[donor])) {
          donor = k;
        }
      }
      --out.ranks[donor];
      ++out.ranks[l];
    }
  }
  std::string bytes;
  append_f64_le(bytes, normalized);
  out.source_digest = fnv1a_hex(bytes);
  return out;
}

// --- adapters ---------------------------------------------------------------

/// (in, out) of a target in its math orientation y = x W^T.
inline std::pair<std::size_t, std::size_t> target_dims(const ModelConfig& c, std::size_t block, Target t) {
  const std::size_t d = c.d_model, f = c.d_ff_per_block.at(block);
  switch (t) {
    case Target::up:
    case Target::gate: return {d, f};
    case Target::down: return {f, d};
    default: return {d, d};
  }
}

template <Scalar T>
AdapterSet<T> attach_adapters(const ModelConfig& config, std::span<const std::size_t> ranks,
                              std::span<const Target> targets, std::uint64_t seed) {
  if (ranks.size() != config.n_blocks) {
    fail(ErrorCode::config, "attach_adapters: " + std::to_string(ranks.size()) + " ranks for " +
                                std::to_string(config.n_blocks) + " blocks");
  }
  std::array<bool, kTargetCount> wanted{};
  for (Target t : targets) wanted[static_cast<std::size_t>(t)] = true;
  Rng rng(seed);
  AdapterSet<T> set;
  set.blocks.resize(config.n_blocks);
  for (std::size_t l = 0; l < config.n_blocks; ++l) {
    const std::size_t r = ranks[l];
    if (r == 0) continue;
    for (std::size_t ti = 0; ti < kTargetCount; ++ti) {
      if (!wanted[ti]) continue;
      const auto [in, out] = target_dims(config, l, static_cast<Target>(ti));
      LoRAAdapter<T> a;
      a.down = Matrix<T>(r, in);
      for (auto& v : a.down.flat()) v = static_cast<T>(rng.normal(0.0, kAdapterInitStd));
      a.up = Matrix<T>(out, r);
      a.scale = static_cast<T>(1.0 / static_cast<double>(r));
      set.blocks[l][ti] = std::move(a);
    }
  }
  return set;
}

inline std::vector<Target> parse_targets(std::span<const std::string> names) {
  std::vector<Target> out;
  for (const auto& n : names) out.push_back(parse_target(n));
  return out;
}

/// Visits every trainable matrix in a fixed order: block, target, down, up.
template <Scalar T, typename Fn>
void for_each_adapter_matrix(AdapterSet<T>& set, Fn&& fn) {
  for (auto& blk : set.blocks) {
    for (auto& slot : blk) {
      if (!slot) continue;
      fn(slot->down);
      fn(slot->up);
    }
  }
}

template <Scalar T>
AdapterSet<T> zeros_like(const AdapterSet<T>& set) {
  AdapterSet<T> z = set;
  for_each_adapter_matrix(z, [](Matrix<T>& m) { std::fill(m.flat().begin(), m.flat().end(), T(0)); });
  return z;
}

template <Scalar T>
void accumulate(AdapterSet<T>& into, const AdapterSet<T>& from) {
  std::vector<const Matrix<T>*> src;
  for_each_adapter_matrix(const_cast<AdapterSet<T>&>(from), [&](Matrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  for_each_adapter_matrix(into, [&](Matrix<T>& m) { add_inplace(m, *src[i++]); });
}

// --- backward ---------------------------------------------------------------

namespace detail {

/// Gradient through y = rms_norm(x) * gain with respect to x.
template <Scalar T>
Matrix<T> rms_norm_backward(const Matrix<T>& x, const std::vector<double>& inv, const std::vector<T>& gain,
                            const Matrix<T>& dy) {
  const std::size_t n = x.cols();
  Matrix<T> dx(x.rows(), n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      dot += static_cast<double>(dy(r, c)) * static_cast<double>(gain[c]) * static_cast<double>(x(r, c));
    }
    const double k = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) {
      dx(r, c) = static_cast<T>(inv[r] * static_cast<double>(dy(r, c)) * static_cast<double>(gain[c]) -
                                k * static_cast<double>(x(r, c)));
    }
  }
  return dx;
}

/// Backward of apply_linear. Returns dL/dx and accumulates adapter grads.
template <Scalar T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& weight, bool in_major, const LoRAAdapter<T>* a,
                          const Matrix<T>& z, const Matrix<T>& dy, LoRAAdapter<T>* ga) {
  Matrix<T> dx = in_major ? matmul_bt(dy, weight) : matmul(dy, weight);
  if (a != nullptr && a->rank() > 0) {
    Matrix<T> dz = matmul(dy, a->up);
    scale_inplace(dz, a->scale);
    Matrix<T> gup = matmul_at(dy, z);
    scale_inplace(gup, a->scale);
    add_inplace(ga->up, gup);
    add_inplace(ga->down, matmul_at(dz, x));
    add_inplace(dx, matmul(dz, a->down));
  }
  return dx;
}

}  // namespace detail

/// Mean next-token loss over `batch` and its gradient with respect to every
/// adapter parameter. Base weights are read only.
template <Scalar T>
struct LossAndGrad {
  double loss = 0.0;
  AdapterSet<T> grad;
};

template <Scalar T>
double sequence_backward(const BasicModel<T>& model, const AdapterSet<T>& adapters,
                         std::span<const std::uint32_t> tokens, double grad_scale, AdapterSet<T>& grad) {
  const auto& c = model.config;
  ForwardCache<T> cache;
  ForwardOptions<T> opt;
  opt.adapters = &adapters;
  opt.cache = &cache;
  const Matrix<T> logits = forward_pass(model, tokens, opt);
  Matrix<T> dlogits;
  const NllSum nll = next_token_nll(logits, tokens, &dlogits, grad_scale);

  const std::size_t t_len = tokens.size(), heads = c.n_heads, hd = c.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix<T> dh = matmul_bt(dlogits, model.lm_head);
  Matrix<T> dx = detail::rms_norm_backward(cache.x_final, cache.inv_final, model.final_norm, dh);

  for (std::size_t l = model.blocks.size(); l-- > 0;) {
    const auto& blk = model.blocks[l];
    const auto& bc = cache.blocks[l];
    auto ad = [&](Target t) { return adapters.find(l, t); };
    auto gd = [&](Target t) { return grad.find(l, t); };
    auto z = [&](Target t) -> const Matrix<T>& { return bc.lora_z[static_cast<std::size_t>(t)]; };

    // FFN
    Matrix<T> dxd = detail::linear_backward(bc.xd, blk.down, true, ad(Target::down), z(Target::down), dx,
                                            gd(Target::down));
    Matrix<T> du(t_len, bc.u.cols()), dg(t_len, bc.g.cols());
    for (std::size_t i = 0; i < dxd.size(); ++i) {
      const double gv = bc.g.flat()[i];
      const double d = dxd.flat()[i];
      du.flat()[i] = static_cast<T>(d * static_cast<double>(silu(bc.g.flat()[i])));
      dg.flat()[i] = static_cast<T>(d * static_cast<double>(bc.u.flat()[i]) * silu_grad(gv));
    }
    Matrix<T> dh2 = detail::linear_backward(bc.h2, blk.up, false, ad(Target::up), z(Target::up), du, gd(Target::up));
    add_inplace(dh2, detail::linear_backward(bc.h2, blk.gate, false, ad(Target::gate), z(Target::gate), dg,
                                             gd(Target::gate)));
    add_inplace(dx, detail::rms_norm_backward(bc.x_mid, bc.inv2, blk.ffn_norm, dh2));

    // attention
    Matrix<T> dattn = detail::linear_backward(bc.attn, blk.o, false, ad(Target::o), z(Target::o), dx, gd(Target::o));
    Matrix<T> dq(t_len, c.d_model), dk(t_len, c.d_model), dv(t_len, c.d_model);
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix<T> qh(t_len, hd), kh(t_len, hd), vh(t_len, hd), doh(t_len, hd);
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < hd; ++e) {
          qh(t, e) = bc.q(t, h * hd + e);
          kh(t, e) = bc.k(t, h * hd + e);
          vh(t, e) = bc.v(t, h * hd + e);
          doh(t, e) = dattn(t, h * hd + e);
        }
      }
      const Matrix<T>& p = bc.probs[h];
      Matrix<T> dp = matmul_bt(doh, vh);
      Matrix<T> dvh = matmul_at(p, doh);
      Matrix<T> ds(t_len, t_len);
      for (std::size_t i = 0; i < t_len; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += static_cast<double>(p(i, j)) * static_cast<double>(dp(i, j));
        for (std::size_t j = 0; j <= i; ++j) {
          ds(i, j) = static_cast<T>(static_cast<double>(p(i, j)) * (static_cast<double>(dp(i, j)) - dot) * attn_scale);
        }
      }
      Matrix<T> dqh = matmul(ds, kh);
      Matrix<T> dkh = matmul_at(ds, qh);
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < hd; ++e) {
          dq(t, h * hd + e) = dqh(t, e);
          dk(t, h * hd + e) = dkh(t, e);
          dv(t, h * hd + e) = dvh(t, e);
        }
      }
    }
    Matrix<T> dh1 = detail::linear_backward(bc.h1, blk.q, false, ad(Target::q), z(Target::q), dq, gd(Target::q));
    add_inplace(dh1, detail::linear_backward(bc.h1, blk.k, false, ad(Target::k), z(Target::k), dk, gd(Target::k)));
    add_inplace(dh1, detail::linear_backward(bc.h1, blk.v, false, ad(Target::v), z(Target::v), dv, gd(Target::v)));
    add_inplace(dx, detail::rms_norm_backward(bc.x_in, bc.inv1, blk.attn_norm, dh1));
  }
  return nll.sum;
}

/// Mean next-token loss of a batch of equal-length sequences, plus its
/// adapter gradient. Per-sequence gradients are summed in sequence order, so
/// the result does not depend on `threads`.
template <Scalar T>
LossAndGrad<T> loss_and_grad(const BasicModel<T>& model, const AdapterSet<T>& adapters,
                             const std::vector<std::vector<std::uint32_t>>& batch, std::size_t threads = 1) {
  if (batch.empty()) fail(ErrorCode::input, "loss: empty batch");
  std::size_t count = 0;
  for (const auto& s : batch) {
    if (s.size() < 2) fail(ErrorCode::input, "loss: sequences need at least two tokens");
    count += s.size() - 1;
  }
  const double scale = 1.0 / static_cast<double>(count);
  std::vector<AdapterSet<T>> grads(batch.size(), zeros_like(adapters));
  std::vector<double> sums(batch.size(), 0.0);
  threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < batch.size(); i += threads) {
      sums[i] = sequence_backward(model, adapters, batch[i], scale, grads[i]);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  LossAndGrad<T> out;
  out.grad = std::move(grads[0]);
  double total = sums[0];
  for (std::size_t i = 1; i < batch.size(); ++i) {
    accumulate(out.grad, grads[i]);
    total += sums[i];
  }
  out.loss = total * scale;
  return out;
}

/// Mean next-token loss only (no cache, no gradient).
template <Scalar T>
double batch_loss(const BasicModel<T>& model, const AdapterSet<T>* adapters,
                  const std::vector<std::vector<std::uint32_t>>& batch) {
  double sum = 0.0;
  std::size_t count = 0;
  ForwardOptions<T> opt;
  opt.adapters = adapters;
  for (const auto& s : batch) {
    const auto nll = next_token_nll(forward_pass(model, s, opt), s);
    sum += nll.sum;
    count += nll.count;
  }
  if (count == 0) fail(ErrorCode::input, "loss: no predicted positions");
  return sum / static_cast<double>(count);
}

// --- training ---------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double r_bar = kDefaultRankBudget;
  std::vector<Target> targets = default_targets();
  std::size_t threads = 1;

  void validate() const {
    if (steps < 1 || batch_size < 1) fail(ErrorCode::config, "train: steps and batch_size must be >= 1");
    if (seq_len < 2) fail(ErrorCode::config, "train: seq_len must be >= 2");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      fail(ErrorCode::config, "train: learning_rate must be finite and >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0 && weight_decay >= 0.0)) {
      fail(ErrorCode::config, "train: invalid AdamW hyper-parameters");
    }
    if (!(r_bar >= 1.0)) fail(ErrorCode::config, "train: r_bar must be >= 1");
    if (targets.empty()) fail(ErrorCode::config, "train: no adapter targets");
  }
};

/// Batch 128 and lr 2e-4 at sequence length 1024.
inline TrainConfig paper_train_profile() {
  TrainConfig c;
  c.batch_size = 128;
  c.seq_len = 1024;
  c.learning_rate = 2e-4;
  return c;
}

/// Windows of `seq_len` tokens drawn uniformly with replacement.
inline std::vector<std::vector<std::uint32_t>> sample_batch(std::span<const std::uint32_t> corpus,
                                                            std::size_t batch, std::size_t seq_len, Rng& rng) {
  if (corpus.size() < seq_len) {
    fail(ErrorCode::capacity, "train: corpus holds " + std::to_string(corpus.size()) + " tokens, need at least " +
                                  std::to_string(seq_len));
  }
  const std::size_t starts = corpus.size() - seq_len + 1;
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto begin = corpus.begin() + static_cast<std::ptrdiff_t>(rng.below(starts));
    out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(seq_len));
  }
  return out;
}

template <Scalar T>
struct TrainResult {
  AdapterSet<T> adapters;
  std::vector<double> losses;  // batch loss before each update
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// AdamW on the adapter parameters only. The base model is never written.
template <Scalar T>
TrainResult<T> train(const BasicModel<T>& model, AdapterSet<T> adapters, std::span<const std::uint32_t> corpus,
                     const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  if (cfg.seq_len > model.config.max_seq_len) fail(ErrorCode::config, "train: seq_len exceeds max_seq_len");
  Rng rng(cfg.seed);
  std::vector<Matrix<T>*> params;
  for_each_adapter_matrix(adapters, [&](Matrix<T>& m) { params.push_back(&m); });
  std::vector<std::vector<double>> m1(params.size()), m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i].assign(params[i]->size(), 0.0);
    m2[i].assign(params[i]->size(), 0.0);
  }
  TrainResult<T> result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, rng);
    auto lg = loss_and_grad(model, adapters, batch, cfg.threads);
    if (!std::isfinite(lg.loss)) {
      fail(ErrorCode::non_finite, "train: non-finite loss at step " + std::to_string(step));
    }
    result.losses.push_back(lg.loss);
    if (on_step) on_step(step, lg.loss);
    std::vector<Matrix<T>*> grads;
    for_each_adapter_matrix(lg.grad, [&](Matrix<T>& g) { grads.push_back(&g); });
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->flat();
      auto g = grads[i]->flat();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        m1[i][k] = cfg.beta1 * m1[i][k] + (1.0 - cfg.beta1) * gk;
        m2[i][k] = cfg.beta2 * m2[i][k] + (1.0 - cfg.beta2) * gk * gk;
        const double update = (m1[i][k] / c1) / (std::sqrt(m2[i][k] / c2) + cfg.adam_eps);
        const double pk = p[k];
        p[k] = static_cast<T>(pk - cfg.learning_rate * (update + cfg.weight_decay * pk));
      }
    }
  }
  result.adapters = std::move(adapters);
  return result;
}

// --- merging ----------------------------------------------------------------

template <Scalar T>
struct AdaptedModel {
  BasicModel<T> base;
  AdapterSet<T> adapters;
  bool merged = false;
};

/// Folds W += scale * up * down into a copy of the base weights. The adapters
/// are consumed; merging the same AdaptedModel twice is a state error.
template <Scalar T>
BasicModel<T> merge_adapters(AdaptedModel<T>& am) {
  if (am.merged) fail(ErrorCode::state, "merge: adapters were already merged");
  BasicModel<T> out = am.base;
  for (std::size_t l = 0; l < am.adapters.blocks.size(); ++l) {
    if (l >= out.blocks.size()) fail(ErrorCode::shape, "merge: adapter set has more blocks than the model");
    for (std::size_t ti = 0; ti < kTargetCount; ++ti) {
      const auto& a = am.adapters.blocks[l][ti];
      if (!a || a->rank() == 0) continue;
      const Target t = static_cast<Target>(ti);
      Matrix<T> delta = matmul(a->up, a->down);  // [out x in]
      scale_inplace(delta, a->scale);
      Matrix<T>& w = out.blocks[l].weight(t);
      if (stored_in_major(t)) delta = transpose(delta);
      if (!w.same_shape(delta)) fail(ErrorCode::shape, "merge: adapter shape differs from its target");
      add_inplace(w, delta);
    }
  }
  am.adapters.blocks.clear();
  am.merged = true;
  return out;
}

// --- files ------------------------------------------------------------------

inline std::string adapter_tensor_name(std::size_t block, Target t, bool up) {
  return "block" + std::to_string(block) + "." + std::string(target_name(t)) + (up ? ".lora_up" : ".lora_down");
}

inline void save_adapters(const AdapterSet<float>& set, const RankAllocation& ranks, const fs::path& dir) {
  TensorArchive ar;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t l = 0; l < set.blocks.size(); ++l) {
    for (std::size_t ti = 0; ti < kTargetCount; ++ti) {
      const auto& a = set.blocks[l][ti];
      if (!a) continue;
      const Target t = static_cast<Target>(ti);
      entries.push_back({{"block", l}, {"target", target_name(t)}, {"rank", a->rank()}, {"scale", a->scale}});
      ar.tensors.push_back({adapter_tensor_name(l, t, false), {a->down.rows(), a->down.cols()}, a->down.storage()});
      ar.tensors.push_back({adapter_tensor_name(l, t, true), {a->up.rows(), a->up.cols()}, a->up.storage()});
    }
  }
  ar.manifest = {{"kind", "lora_adapters"},
                 {"n_blocks", set.blocks.size()},
                 {"r_bar", ranks.r_bar},
                 {"ranks", ranks.ranks},
                 {"rank_source_digest", ranks.source_digest},
                 {"adapters", entries}};
  save_archive(ar, dir);
}

inline AdapterSet<float> load_adapters(const fs::path& dir) {
  const TensorArchive ar = load_archive(dir);
  if (ar.manifest.value("kind", "") != "lora_adapters") fail(ErrorCode::validation, "adapters: not an adapter archive");
  AdapterSet<float> set;
  try {
    set.blocks.resize(ar.manifest.at("n_blocks").get<std::size_t>());
    for (const auto& e : ar.manifest.at("adapters")) {
      const auto l = e.at("block").get<std::size_t>();
      const Target t = parse_target(e.at("target").get<std::string>());
      if (l >= set.blocks.size()) fail(ErrorCode::validation, "adapters: block index out of range");
      const auto& dn = ar.get(adapter_tensor_name(l, t, false));
      const auto& up = ar.get(adapter_tensor_name(l, t, true));
      if (dn.shape.size() != 2 || up.shape.size() != 2 || up.shape[1] != dn.shape[0]) {
        fail(ErrorCode::shape_mismatch, "adapters: inconsistent shapes for " + adapter_tensor_name(l, t, false));
      }
      LoRAAdapter<float> a;
      a.down = MatrixF(dn.shape[0], dn.shape[1], dn.data);
      a.up = MatrixF(up.shape[0], up.shape[1], up.data);
      a.scale = e.at("scale").get<float>();
      set.blocks[l][static_cast<std::size_t>(t)] = std::move(a);
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::validation, std::string("adapters: malformed manifest: ") + ex.what());
  }
  return set;
}

/// Checks that every adapter fits its target in `config`.
template <Scalar T>
void validate_adapters(const AdapterSet<T>& set, const ModelConfig& config) {
  if (set.blocks.size() != config.n_blocks) fail(ErrorCode::shape_mismatch, "adapters: block count differs from model");
  for (std::size_t l = 0; l < set.blocks.size(); ++l) {
    for (std::size_t ti = 0; ti < kTargetCount; ++ti) {
      const auto& a = set.blocks[l][ti];
      if (!a) continue;
      const auto [in, out] = target_dims(config, l, static_cast<Target>(ti));
      if (a->down.cols() != in || a->up.rows() != out || a->up.cols() != a->down.rows()) {
        fail(ErrorCode::shape_mismatch, "adapters: " + adapter_tensor_name(l, static_cast<Target>(ti), false) +
                                            " does not fit the model");
      }
    }
  }
}

inline std::string loss_csv(std::span<const double> losses) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
    out += buf;
  }
  return out;
}

}  // namespace cfsp
