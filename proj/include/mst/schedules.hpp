// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "mst/attention.hpp"

namespace mst {

using Step = std::int64_t;

/// Three-phase sparsity variation: warm-up pruning in N stages, a constant
/// ultra-sparse phase, then restoration in N stages.
struct PhaseConfig {
  double max_sparsity = 0.96;
  Step n_stages = 5;
  Step prune_freq = 2000;
  Step ultra_steps = 100000;
  Step grow_freq = 2000;

  Step warmup_steps() const { return n_stages * prune_freq; }
  Step restoration_steps() const { return n_stages * grow_freq; }
  Step restoration_start() const { return warmup_steps() + ultra_steps; }
  Step total_steps() const { return restoration_start() + restoration_steps(); }

  void validate() const {
    if (!(max_sparsity >= 0.0 && max_sparsity < 1.0)) throw std::invalid_argument("max_sparsity must lie in [0, 1)");
    if (n_stages < 1) throw std::invalid_argument("n_stages must be >= 1");
    if (prune_freq < 1 || grow_freq < 1) throw std::invalid_argument("prune/grow frequency must be >= 1");
    if (ultra_steps < 0) throw std::invalid_argument("ultra_steps must be >= 0");
  }
};

/// Stagewise cubic schedule. Warm-up: S_M (1 - (1 - k/N)^3) with
/// k = floor(t / prune_freq); restoration mirrors it back down to 0.
inline double sv_sparsity(Step t, const PhaseConfig& cfg) {
  if (t < 0) throw std::out_of_range("sv_sparsity: negative step");
  const double sm = cfg.max_sparsity;
  const double n = static_cast<double>(cfg.n_stages);
  const Step tw = cfg.warmup_steps();
  const Step tr0 = cfg.restoration_start();
  if (t <= tw) {
    const double k = static_cast<double>(std::min(t / cfg.prune_freq, cfg.n_stages));
    const double r = 1.0 - k / n;
    return sm * (1.0 - r * r * r);
  }
  if (t <= tr0) return sm;
  if (t <= cfg.total_steps()) {
    const double k = static_cast<double>(std::min((t - tr0) / cfg.grow_freq, cfg.n_stages));
    const double r = 1.0 - k / n;
    return sm * r * r * r;
  }
  return 0.0;
}

enum class PlanKind { sv, dense, sparse, sd, dsd, gd };

inline std::string to_string(PlanKind k) {
  switch (k) {
    case PlanKind::sv: return "sv";
    case PlanKind::dense: return "dense";
    case PlanKind::sparse: return "sparse";
    case PlanKind::sd: return "sd";
    case PlanKind::dsd: return "dsd";
    case PlanKind::gd: return "gd";
  }
  return "?";
}

inline PlanKind parse_plan_kind(const std::string& s) {
  for (auto k : {PlanKind::sv, PlanKind::dense, PlanKind::sparse, PlanKind::sd, PlanKind::dsd, PlanKind::gd})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown sparsity plan: " + s);
}

/// Target global sparsity over a run: the SV curve or one of the ablation
/// presets. Preset breakpoints are plain configuration.
struct SparsityPlan {
  PlanKind kind = PlanKind::sv;
  PhaseConfig phase;
  Step total_steps = 140000;
  Step sd_switch_step = 60000;     // sd: sparse before, dense from here
  Step dsd_dense_until = 10000;    // dsd: dense before this step
  Step dsd_sparse_until = 110000;  // dsd: sparse until here, dense after
  Step gd_stages = 10;             // gd: number of equal-length decrements

  /// Last step at which topology updates run.
  Step evolution_end() const { return kind == PlanKind::sv ? std::min(phase.total_steps(), total_steps) : total_steps; }
};

/// Preset curves (the SV kind delegates to sv_sparsity).
inline double preset_sparsity(Step t, const SparsityPlan& plan) {
  if (t < 0 || t > plan.total_steps) throw std::out_of_range("sparsity plan queried outside [0, total_steps]");
  const double sm = plan.phase.max_sparsity;
  switch (plan.kind) {
    case PlanKind::sv: return sv_sparsity(t, plan.phase);
    case PlanKind::dense: return 0.0;
    case PlanKind::sparse: return sm;
    case PlanKind::sd: return t < plan.sd_switch_step ? sm : 0.0;
    case PlanKind::dsd: return (t >= plan.dsd_dense_until && t < plan.dsd_sparse_until) ? sm : 0.0;
    case PlanKind::gd: {
      const Step k = std::min(t * plan.gd_stages / std::max<Step>(plan.total_steps, 1), plan.gd_stages);
      return sm * (1.0 - static_cast<double>(k) / static_cast<double>(plan.gd_stages));
    }
  }
  return 0.0;
}

inline double plan_sparsity(Step t, const SparsityPlan& plan) { return preset_sparsity(t, plan); }

enum class ZetaVariant { one_cosine, two_cosine, n_cosine, decay_n_cosine };

inline std::string to_string(ZetaVariant v) {
  switch (v) {
    case ZetaVariant::one_cosine: return "one-cosine";
    case ZetaVariant::two_cosine: return "two-cosine";
    case ZetaVariant::n_cosine: return "n-cosine";
    case ZetaVariant::decay_n_cosine: return "decay-n-cosine";
  }
  return "?";
}

inline ZetaVariant parse_zeta_variant(const std::string& s) {
  for (auto v : {ZetaVariant::one_cosine, ZetaVariant::two_cosine, ZetaVariant::n_cosine, ZetaVariant::decay_n_cosine})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown zeta variant: " + s);
}

/// Piecewise cosine annealing of the topology update fraction. Segment
/// boundaries: 0, T_W + T_U, then one per restoration stage.
struct ZetaSchedule {
  ZetaVariant variant = ZetaVariant::n_cosine;
  double zeta_init = 0.3;
  double decay_ratio = 0.5;  // decay-n-cosine: magnitude ratio between consecutive segments
  PhaseConfig phase;

  std::vector<Step> boundaries() const {
    const Step t1 = phase.restoration_start();
    const Step end = phase.total_steps();
    switch (variant) {
      case ZetaVariant::one_cosine: return {0, end};
      case ZetaVariant::two_cosine: return {0, t1, end};
      case ZetaVariant::n_cosine:
      case ZetaVariant::decay_n_cosine: {
        std::vector<Step> b{0, t1};
        for (Step i = 1; i <= phase.n_stages; ++i) b.push_back(t1 + i * phase.grow_freq);
        return b;
      }
    }
    return {0, end};
  }

  double magnitude(std::size_t segment) const {
    if (variant == ZetaVariant::decay_n_cosine) return zeta_init * std::pow(decay_ratio, static_cast<double>(segment));
    return zeta_init;
  }
};

/// zeta_t = (zeta_i / 2)(1 + cos(pi (t - T_{i-1}) / (T_i - T_{i-1}))) inside
/// segment i; 0 once the last segment has ended.
inline double zeta(Step t, const ZetaSchedule& sched) {
  if (t < 0) throw std::out_of_range("zeta: negative step");
  const auto b = sched.boundaries();
  for (std::size_t i = 0; i + 1 < b.size(); ++i) {
    if (t >= b[i] && t < b[i + 1]) {
      const double frac = static_cast<double>(t - b[i]) / static_cast<double>(b[i + 1] - b[i]);
      return 0.5 * sched.magnitude(i) * (1.0 + std::cos(frac * std::numbers::pi));
    }
  }
  return 0.0;
}

/// Hybrid sparse attention: sparse stride until dense_step, stride 1 (dense) after.
struct StrideSchedule {
  std::size_t sparse_stride = 256;
  Step dense_step = 110000;
  PatternKind kind = PatternKind::strided;
  std::size_t summary_cols = 1;  // fixed patterns only
};

inline std::size_t stride_at(Step t, const StrideSchedule& s) { return t < s.dense_step ? s.sparse_stride : 1; }

/// Attention pattern in force at step t for sequence length n.
inline AttentionPattern pattern_at(Step t, const StrideSchedule& s, std::size_t n) {
  return AttentionPattern::for_stride(s.kind, n, stride_at(t, s), s.summary_cols);
}

/// Linear warm-up to the peak, cosine decay to the floor, then constant.
struct LrSchedule {
  double peak = 6e-4;
  double min = 6e-5;
  Step warmup_steps = 2000;
  Step decay_steps = 140000;
};

inline double lr_at(Step t, const LrSchedule& s) {
  if (t < s.warmup_steps) return s.peak * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
  if (t >= s.decay_steps) return s.min;
  const double ratio = static_cast<double>(t - s.warmup_steps) / static_cast<double>(s.decay_steps - s.warmup_steps);
  return s.min + 0.5 * (1.0 + std::cos(std::numbers::pi * ratio)) * (s.peak - s.min);
}

/// When topology updates fire and which target sparsity is in force for the
/// forward pass of a given step. Shared by the trainer and the FLOP
/// accountant so both integrate the same curve.
struct TopologyClock {
  SparsityPlan plan;
  Step update_interval = 100;
  bool frozen = false;  // static scheme: masks never change after init

  bool is_update_step(Step t) const {
    if (frozen || t < 0) return false;
    const Step end = plan.evolution_end();
    return t <= end && (t % update_interval == 0 || t == end);
  }

  /// Target sparsity of the masks used by the forward pass at step t, i.e.
  /// the plan value at the most recent update strictly before t (or the
  /// initial allocation at step 0).
  double effective_sparsity(Step t) const {
    if (frozen || t <= 0) return plan_sparsity(0, plan);
    const Step end = plan.evolution_end();
    const Step last = std::min(t - 1, end);
    const Step u = (last == end) ? end : (last / update_interval) * update_interval;
    return plan_sparsity(u, plan);
  }
};

}  // namespace mst
