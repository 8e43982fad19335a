// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mst/mask.hpp"
#include "mst/rng.hpp"
#include "mst/schedules.hpp"

namespace mst {

struct LayerShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct SparsityAllocation {
  double target = 0.0;
  std::vector<double> layer_sparsity;
  std::vector<std::size_t> layer_active;  // round((1 - s_l) N_l)
  std::vector<bool> clamped;              // density pinned at 1

  std::size_t total_active() const {
    std::size_t n = 0;
    for (auto a : layer_active) n += a;
    return n;
  }
};

/// Erdos-Renyi allocation: density_l = c (rows_l + cols_l) / (rows_l cols_l),
/// c solved so the active total matches the global budget. Layers that would
/// exceed density 1 are pinned at 1 and c is re-solved over the rest.
inline SparsityAllocation er_allocate(double target, std::span<const LayerShape> layers) {
  if (!(target >= 0.0 && target < 1.0)) throw std::invalid_argument("er_allocate: target sparsity must lie in [0, 1)");
  if (layers.empty()) throw std::invalid_argument("er_allocate: no layers");
  double total = 0.0;
  for (const auto& l : layers) total += static_cast<double>(l.size());
  const double budget = (1.0 - target) * total;

  std::vector<bool> clamped(layers.size(), false);
  double c = 0.0;
  for (;;) {
    double fixed = 0.0, raw = 0.0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (clamped[i])
        fixed += static_cast<double>(layers[i].size());
      else
        raw += static_cast<double>(layers[i].rows + layers[i].cols);
    }
    if (raw == 0.0) {
      if (budget > fixed * (1.0 + 1e-12)) throw std::invalid_argument("er_allocate: target density infeasible");
      break;
    }
    c = (budget - fixed) / raw;
    bool changed = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (clamped[i]) continue;
      const auto& l = layers[i];
      if (c * static_cast<double>(l.rows + l.cols) > static_cast<double>(l.size())) {
        clamped[i] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }

  SparsityAllocation alloc;
  alloc.target = target;
  alloc.clamped = clamped;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const double d = clamped[i] ? 1.0 : c * static_cast<double>(l.rows + l.cols) / static_cast<double>(l.size());
    alloc.layer_sparsity.push_back(1.0 - d);
    alloc.layer_active.push_back(static_cast<std::size_t>(std::llround(d * static_cast<double>(l.size()))));
  }
  return alloc;
}

/// Picks k of the candidates uniformly without replacement (partial
/// Fisher-Yates); the result keeps draw order.
inline std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> candidates, std::size_t k,
                                                           Rng& rng) {
  k = std::min(k, candidates.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(k);
  return candidates;
}

/// Uniform random active set per layer at the allocated density.
inline std::vector<LayerMask> init_masks(const SparsityAllocation& alloc, std::span<const LayerShape> layers, Rng& rng) {
  if (alloc.layer_active.size() != layers.size()) throw std::invalid_argument("init_masks: allocation/layer count mismatch");
  std::vector<LayerMask> masks;
  masks.reserve(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerMask m(layers[l].name, layers[l].rows, layers[l].cols);
    const std::size_t n = m.size();
    if (alloc.layer_active[l] >= n) {
      m.fill();
    } else {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      for (auto i : sample_without_replacement(std::move(all), alloc.layer_active[l], rng)) m.set(i);
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

enum class SchemeKind { static_mask, set, rigl, mest, mg };

inline std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::static_mask: return "static";
    case SchemeKind::set: return "set";
    case SchemeKind::rigl: return "rigl";
    case SchemeKind::mest: return "mest";
    case SchemeKind::mg: return "mg";
  }
  return "?";
}

inline SchemeKind parse_scheme_kind(const std::string& s) {
  for (auto k : {SchemeKind::static_mask, SchemeKind::set, SchemeKind::rigl, SchemeKind::mest, SchemeKind::mg})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown evolution scheme: " + s);
}

struct EvolutionScheme {
  SchemeKind kind = SchemeKind::mg;
  double random_ratio = 0.25;  // MG only
  double mest_lambda = 0.0;    // MEST prune score |w| + lambda |grad|
};

/// Mutable view of one maskable layer during a topology update. Moment
/// spans may be empty when no optimizer state exists yet.
template <typename T>
struct LayerState {
  LayerMask* mask = nullptr;
  std::span<T> weights;
  std::span<const T> grads;
  std::span<T> m;
  std::span<T> v;
};

struct UpdateCounts {
  std::size_t n_prune = 0;
  std::size_t n_grow = 0;
  std::size_t n_rand = 0;
  std::size_t n_grad = 0;
  std::size_t shortfall = 0;  // growth that found no candidate slot

  friend bool operator==(const UpdateCounts&, const UpdateCounts&) = default;
};

/// Prune/grow counts for one layer. The growth count is set so that the
/// post-update active count equals target_active; when that is impossible
/// with the requested prune count, the prune count absorbs the difference.
inline UpdateCounts plan_update_counts(std::size_t n_total, std::size_t active, std::size_t target_active, double zeta,
                                       double random_ratio) {
  if (!(zeta >= 0.0 && zeta <= 1.0)) throw std::invalid_argument("update fraction must lie in [0, 1]");
  if (!(random_ratio >= 0.0 && random_ratio <= 1.0)) throw std::invalid_argument("random growth ratio must lie in [0, 1]");
  if (target_active > n_total || active > n_total) throw std::invalid_argument("active counts exceed layer size");
  using I = std::int64_t;
  const I inactive = static_cast<I>(n_total - active);
  I prune = static_cast<I>(std::llround(zeta * static_cast<double>(active)));
  I grow = prune + static_cast<I>(target_active) - static_cast<I>(active);
  if (grow < 0) {
    prune -= grow;
    grow = 0;
  }
  if (grow > inactive) {
    prune -= grow - inactive;
    grow = inactive;
  }
  UpdateCounts c;
  c.n_prune = static_cast<std::size_t>(prune);
  c.n_grow = static_cast<std::size_t>(grow);
  c.n_rand = static_cast<std::size_t>(std::floor(static_cast<double>(grow) * random_ratio));
  c.n_grad = c.n_grow - c.n_rand;
  return c;
}

struct LayerUpdate {
  std::string layer;
  UpdateCounts counts;
  std::vector<std::size_t> pruned;
  std::vector<std::size_t> grad_grown;
  std::vector<std::size_t> rand_grown;
  double sparsity_before = 0.0;
  double sparsity_after = 0.0;
};

namespace detail {

// Lowest-k by (score, index); returned ascending by index.
template <typename Score>
std::vector<std::size_t> select_lowest(std::vector<std::size_t> idx, std::size_t k, Score score) {
  k = std::min(k, idx.size());
  auto less = [&](std::size_t a, std::size_t b) {
    const double sa = score(a), sb = score(b);
    return sa < sb || (sa == sb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// One prune-and-regrow update of a layer.
///   prune: the n_prune active entries with the smallest |w| + lambda |g|
///   grow:  n_grad inactive entries with the largest |g|, then n_rand random
///          inactive entries; only entries inactive at step start qualify
/// Pruned and grown entries leave with weight 0 and zeroed moments.
template <typename T>
LayerUpdate evolve_layer(LayerState<T>& layer, std::size_t target_active, double zeta, double random_ratio,
                         double prune_lambda, Rng& rng) {
  LayerMask& mask = *layer.mask;
  const std::size_t n = mask.size();
  if (layer.weights.size() != n || layer.grads.size() != n)
    throw std::invalid_argument("evolve_layer: weight/gradient size mismatch for " + mask.name());

  LayerUpdate up;
  up.layer = mask.name();
  up.sparsity_before = mask.sparsity();
  up.counts = plan_update_counts(n, mask.active_count(), target_active, zeta, random_ratio);
  auto& c = up.counts;

  const auto active = mask.active_indices();
  const auto inactive = mask.inactive_indices();

  up.pruned = detail::select_lowest(active, c.n_prune, [&](std::size_t i) {
    return std::abs(static_cast<double>(layer.weights[i])) + prune_lambda * std::abs(static_cast<double>(layer.grads[i]));
  });

  std::size_t want_grad = c.n_grad;
  std::size_t want_rand = c.n_rand;
  if (want_grad > inactive.size()) {
    want_rand += want_grad - inactive.size();
    want_grad = inactive.size();
  }
  up.grad_grown = detail::select_lowest(inactive, want_grad,
                                        [&](std::size_t i) { return -std::abs(static_cast<double>(layer.grads[i])); });

  std::vector<std::size_t> remaining;
  remaining.reserve(inactive.size() - up.grad_grown.size());
  std::set_difference(inactive.begin(), inactive.end(), up.grad_grown.begin(), up.grad_grown.end(),
                      std::back_inserter(remaining));
  if (want_rand > remaining.size()) {
    c.shortfall = want_rand - remaining.size();
    want_rand = remaining.size();
  }
  up.rand_grown = sample_without_replacement(std::move(remaining), want_rand, rng);
  std::sort(up.rand_grown.begin(), up.rand_grown.end());

  auto zero_at = [&](std::size_t i) {
    layer.weights[i] = T(0);
    if (!layer.m.empty()) layer.m[i] = T(0);
    if (!layer.v.empty()) layer.v[i] = T(0);
  };
  for (auto i : up.pruned) {
    mask.reset(i);
    zero_at(i);
  }
  for (const auto* set : {&up.grad_grown, &up.rand_grown})
    for (auto i : *set) {
      mask.set(i);
      zero_at(i);
    }
  up.sparsity_after = mask.sparsity();
  return up;
}

inline std::size_t target_active_for(std::size_t n, double sparsity) {
  return static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(n)));
}

/// Mixed-Growing update towards target sparsity s_target.
template <typename T>
LayerUpdate mg_step(LayerState<T>& layer, double s_target, double zeta, double random_ratio, Rng& rng) {
  return evolve_layer(layer, target_active_for(layer.mask->size(), s_target), zeta, random_ratio, 0.0, rng);
}

/// Same counting rules with the scheme's own prune/grow criteria.
template <typename T>
LayerUpdate baseline_step(const EvolutionScheme& scheme, LayerState<T>& layer, std::size_t target_active, double zeta,
                          Rng& rng) {
  switch (scheme.kind) {
    case SchemeKind::static_mask: {
      LayerUpdate up;
      up.layer = layer.mask->name();
      up.sparsity_before = up.sparsity_after = layer.mask->sparsity();
      return up;
    }
    case SchemeKind::set: return evolve_layer(layer, target_active, zeta, 1.0, 0.0, rng);
    case SchemeKind::rigl: return evolve_layer(layer, target_active, zeta, 0.0, 0.0, rng);
    case SchemeKind::mest: return evolve_layer(layer, target_active, zeta, 1.0, scheme.mest_lambda, rng);
    case SchemeKind::mg: return evolve_layer(layer, target_active, zeta, scheme.random_ratio, 0.0, rng);
  }
  throw std::invalid_argument("unknown scheme");
}

template <typename T>
LayerUpdate baseline_step(const EvolutionScheme& scheme, LayerState<T>& layer, double s_target, double zeta, Rng& rng) {
  return baseline_step(scheme, layer, target_active_for(layer.mask->size(), s_target), zeta, rng);
}

struct EvolutionRecord {
  Step step = 0;
  double target_sparsity = 0.0;
  double zeta = 0.0;
  double realized_sparsity = 0.0;
  std::vector<LayerUpdate> layers;
};

inline double global_sparsity(std::span<const LayerMask> masks) {
  double active = 0.0, total = 0.0;
  for (const auto& m : masks) {
    active += static_cast<double>(m.active_count());
    total += static_cast<double>(m.size());
  }
  return total == 0.0 ? 0.0 : 1.0 - active / total;
}

/// Network-wide update at step t: plan target -> ER per-layer targets ->
/// per-layer evolution with the scheme's criteria.
template <typename T>
EvolutionRecord global_evolve(std::span<LayerState<T>> layers, Step t, const SparsityPlan& plan,
                              const ZetaSchedule& zeta_sched, const EvolutionScheme& scheme, Rng& rng) {
  EvolutionRecord rec;
  rec.step = t;
  rec.target_sparsity = plan_sparsity(t, plan);
  rec.zeta = zeta(t, zeta_sched);
  std::vector<LayerShape> shapes;
  shapes.reserve(layers.size());
  for (const auto& l : layers) shapes.push_back({l.mask->name(), l.mask->rows(), l.mask->cols()});
  const auto alloc = er_allocate(rec.target_sparsity, shapes);
  double active = 0.0, total = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    rec.layers.push_back(baseline_step(scheme, layers[i], alloc.layer_active[i], rec.zeta, rng));
    active += static_cast<double>(layers[i].mask->active_count());
    total += static_cast<double>(layers[i].mask->size());
  }
  rec.realized_sparsity = 1.0 - active / total;
  return rec;
}

/// Fraction of positions that have ever been active, per layer and overall.
class ExplorationTracker {
 public:
  void observe(std::span<const LayerMask> masks) {
    if (seen_.empty()) {
      for (const auto& m : masks) seen_.emplace_back(m.size(), false);
    }
    for (std::size_t l = 0; l < masks.size(); ++l)
      for (std::size_t i = 0; i < masks[l].size(); ++i)
        if (masks[l].test(i)) seen_[l][i] = true;
  }

  double fraction() const {
    double hit = 0.0, total = 0.0;
    for (const auto& s : seen_) {
      hit += static_cast<double>(std::count(s.begin(), s.end(), true));
      total += static_cast<double>(s.size());
    }
    return total == 0.0 ? 0.0 : hit / total;
  }

 private:
  std::vector<std::vector<bool>> seen_;
};

}  // namespace mst
