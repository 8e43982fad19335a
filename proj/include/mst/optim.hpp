// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mst/errors.hpp"
#include "mst/mask.hpp"
#include "mst/tensor.hpp"

namespace mst {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 0.1;  // global-norm threshold; <= 0 disables clipping
};

/// One optimized tensor with its moment buffers. A non-null mask freezes
/// inactive entries at exactly zero (no update, no decay).
template <typename T>
struct ParamSlot {
  std::string name;
  Tensor<T>* param = nullptr;
  std::vector<T>* m = nullptr;
  std::vector<T>* v = nullptr;
  const LayerMask* mask = nullptr;
  bool decay = true;
};

struct StepStats {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
};

/// Global L2 norm over the gradients that will actually be applied.
template <typename T>
double grad_norm(std::span<const ParamSlot<T>> slots) {
  double acc = 0.0;
  for (const auto& s : slots) {
    if (!s.param->has_grad()) continue;
    auto g = s.param->grads();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (s.mask && !s.mask->test(i)) continue;
      acc += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    }
  }
  return std::sqrt(acc);
}

/// Clip-then-update. `step` is the 1-based AdamW step used for bias
/// correction. Throws NumericError (before touching any parameter) if the
/// gradient is non-finite.
template <typename T>
StepStats adamw_step(std::span<const ParamSlot<T>> slots, std::uint64_t step, double lr, const AdamWConfig& cfg) {
  StepStats stats;
  stats.grad_norm = grad_norm<T>(slots);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
  if (cfg.grad_clip > 0.0 && stats.grad_norm > cfg.grad_clip) stats.clip_scale = cfg.grad_clip / (stats.grad_norm + 1e-6);

  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T scale = T(stats.clip_scale);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(cfg.eps);

  for (const auto& s : slots) {
    if (!s.param->has_grad()) continue;
    auto p = s.param->values();
    auto g = s.param->grads();
    auto& m = *s.m;
    auto& v = *s.v;
    const T decay = s.decay ? T(1.0 - lr * cfg.weight_decay) : T(1);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (s.mask && !s.mask->test(i)) continue;
      const T gi = g[i] * scale;
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      p[i] = p[i] * decay - step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
  return stats;
}

}  // namespace mst
