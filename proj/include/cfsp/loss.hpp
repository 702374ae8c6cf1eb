#pragma once

// Next-token cross-entropy. Row t of the logits predicts token t+1, so a
// sequence of length L contributes L-1 terms.

#include <cmath>
#include <cstdint>
#include <span>

#include "cfsp/error.hpp"
#include "cfsp/tensor.hpp"

namespace cfsp {

struct NllSum {
  double sum = 0.0;        // nats
  std::size_t count = 0;   // predicted positions
};

/// Summed negative log-likelihood. When `grad` is given it receives
/// d(sum * grad_scale)/d(logits); the last row is always zero.
template <Scalar T>
NllSum next_token_nll(const Matrix<T>& logits, std::span<const std::uint32_t> tokens, Matrix<T>* grad = nullptr,
                      double grad_scale = 1.0) {
  if (logits.rows() != tokens.size()) fail(ErrorCode::shape, "nll: logits rows differ from token count");
  NllSum out;
  if (grad) *grad = Matrix<T>(logits.rows(), logits.cols());
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = logits.row(t);
    const std::uint32_t target = tokens[t + 1];
    if (target >= row.size()) fail(ErrorCode::input, "nll: target token outside the vocabulary");
    double mx = row[0];
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(z);
    out.sum += lse - static_cast<double>(row[target]);
    ++out.count;
    if (grad) {
      auto g = grad->row(t);
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double p = std::exp(static_cast<double>(row[c]) - lse);
        g[c] = static_cast<T>((p - (c == target ? 1.0 : 0.0)) * grad_scale);
      }
    }
  }
  return out;
}

}  // namespace cfsp
