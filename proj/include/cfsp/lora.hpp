#pragma once

// Low-rank adapters and the linear-layer application shared by the plain,
// masked and adapted forward passes.

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cfsp/error.hpp"
#include "cfsp/tensor.hpp"

namespace cfsp {

enum class Target : int { q = 0, k, v, o, up, gate, down };
inline constexpr std::size_t kTargetCount = 7;

inline std::string_view target_name(Target t) {
  static constexpr std::array<std::string_view, kTargetCount> names{"q", "k", "v", "o", "up", "gate", "down"};
  return names[static_cast<std::size_t>(t)];
}

inline Target parse_target(std::string_view name) {
  for (std::size_t i = 0; i < kTargetCount; ++i) {
    if (target_name(static_cast<Target>(i)) == name) return static_cast<Target>(i);
  }
  fail(ErrorCode::config, "unknown adapter target '" + std::string(name) + "'");
}

/// FFN projections plus attention q and v.
inline std::vector<Target> default_targets() {
  return {Target::up, Target::gate, Target::down, Target::q, Target::v};
}

/// delta(W) = scale * up * down, in the math orientation [out x in].
template <Scalar T>
struct LoRAAdapter {
  Matrix<T> down;  // [rank x in]
  Matrix<T> up;    // [out x rank]
  T scale = T(1);

  std::size_t rank() const noexcept { return down.rows(); }
  std::size_t parameter_count() const noexcept { return down.size() + up.size(); }
};

template <Scalar T>
using BlockAdapters = std::array<std::optional<LoRAAdapter<T>>, kTargetCount>;

template <Scalar T>
struct AdapterSet {
  std::vector<BlockAdapters<T>> blocks;

  const LoRAAdapter<T>* find(std::size_t block, Target t) const {
    if (block >= blocks.size()) return nullptr;
    const auto& slot = blocks[block][static_cast<std::size_t>(t)];
    return slot ? &*slot : nullptr;
  }
  LoRAAdapter<T>* find(std::size_t block, Target t) {
    if (block >= blocks.size()) return nullptr;
    auto& slot = blocks[block][static_cast<std::size_t>(t)];
    return slot ? &*slot : nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
      for (const auto& a : b) {
        if (a) n += a->parameter_count();
      }
    }
    return n;
  }
};

/// y = x W^T (weight stored [out x in]) or y = x W (weight stored
/// [in x out], `in_major`), plus the adapter's low-rank term. When `z_out` is
/// given it receives x down^T for the backward pass.
template <Scalar T>
Matrix<T> apply_linear(const Matrix<T>& x, const Matrix<T>& weight, bool in_major,
                       const LoRAAdapter<T>* adapter = nullptr, Matrix<T>* z_out = nullptr) {
  Matrix<T> y = in_major ? matmul(x, weight) : matmul_bt(x, weight);
  if (adapter != nullptr && adapter->rank() > 0) {
    Matrix<T> z = matmul_bt(x, adapter->down);
    Matrix<T> delta = matmul_bt(z, adapter->up);
    auto dst = y.flat();
    auto src = delta.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += adapter->scale * src[i];
    if (z_out != nullptr) *z_out = std::move(z);
  }
  return y;
}

}  // namespace cfsp
