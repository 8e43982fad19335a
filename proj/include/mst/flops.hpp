// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include "mst/attention.hpp"
#include "mst/schedules.hpp"

namespace mst {

struct ModelDims {
  std::size_t seq_len = 1024;
  std::size_t n_embd = 768;
  std::size_t n_layers = 12;
  std::size_t n_heads = 12;
  std::size_t vocab = 50257;
  std::size_t d_ffw = 0;  // 0 means 4 * n_embd

  std::size_t d_head() const { return n_embd / n_heads; }
  std::size_t ffw() const { return d_ffw ? d_ffw : 4 * n_embd; }

  void validate() const {
    if (n_heads == 0 || n_embd % n_heads != 0) throw std::invalid_argument("n_embd must be divisible by n_heads");
    if (seq_len == 0 || n_layers == 0 || vocab == 0) throw std::invalid_argument("model dimensions must be positive");
  }
};

/// How the value-aggregation term is counted.
///   per_head:   2 * L * L * D_head summed over N_heads heads = 2 L^2 N_embd
///   as_printed: 2 * N_embd * (L * L * D_head), carrying an extra D_head factor
enum class ReduceCount { per_head, as_printed };

/// Forward FLOPs per sequence, each component already summed over layers.
struct FlopReport {
  double kqv = 0, scores = 0, reduce = 0, proj = 0, ffw1 = 0, ffw2 = 0, lm = 0;

  double fully_connected() const { return kqv + proj + ffw1 + ffw2 + lm; }
  double attention() const { return scores + reduce; }
  double forward() const { return fully_connected() + attention(); }
  double backward() const { return 2.0 * forward(); }
  double total() const { return forward() + backward(); }

  double fc_fraction() const { return fully_connected() / forward(); }
  double attention_fraction() const { return attention() / forward(); }
};

inline FlopReport forward_flops(const ModelDims& d, double sparsity, double q, ReduceCount reduce = ReduceCount::per_head) {
  d.validate();
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw std::invalid_argument("forward_flops: sparsity must lie in [0, 1)");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("forward_flops: q_atten must lie in (0, 1]");
  const double L = static_cast<double>(d.seq_len);
  const double E = static_cast<double>(d.n_embd);
  const double F = static_cast<double>(d.ffw());
  const double V = static_cast<double>(d.vocab);
  const double H = static_cast<double>(d.n_heads);
  const double Dh = static_cast<double>(d.d_head());
  const double N = static_cast<double>(d.n_layers);
  const double dens = 1.0 - sparsity;

  FlopReport r;
  r.kqv = N * dens * L * ((2 * E - 1) * 3 * E);
  r.scores = N * q * 2 * L * L * E;
  r.reduce = N * q * (reduce == ReduceCount::per_head ? 2 * H * (L * L * Dh) : 2 * E * (L * L * Dh));
  r.proj = N * dens * L * ((2 * E - 1) * E);
  r.ffw1 = N * dens * L * ((2 * E - 1) * F);
  r.ffw2 = N * dens * L * ((2 * F - 1) * E);
  r.lm = dens * L * ((2 * E - 1) * V);
  return r;
}

/// Per-step training FLOPs (forward + 2x backward) along the schedules.
class FlopAccountant {
 public:
  FlopAccountant(ModelDims dims, TopologyClock clock, StrideSchedule strides, double sequences_per_step,
                 ReduceCount reduce = ReduceCount::per_head)
      : dims_(dims), clock_(std::move(clock)), strides_(strides), seqs_(sequences_per_step), reduce_(reduce) {
    dims_.validate();
  }

  double q_at(Step t) {
    const std::size_t l = stride_at(t, strides_);
    auto it = q_cache_.find(l);
    if (it != q_cache_.end()) return it->second;
    const double q = pattern_at(t, strides_, dims_.seq_len).q_atten();
    q_cache_.emplace(l, q);
    return q;
  }

  double sparsity_at(Step t) const { return clock_.effective_sparsity(t); }

  double step_flops(Step t) { return 3.0 * seqs_ * forward_flops(dims_, sparsity_at(t), q_at(t), reduce_).forward(); }

  double dense_step_flops() const { return 3.0 * seqs_ * forward_flops(dims_, 0.0, 1.0, reduce_).forward(); }

  const ModelDims& dims() const { return dims_; }

 private:
  ModelDims dims_;
  TopologyClock clock_;
  StrideSchedule strides_;
  double seqs_;
  ReduceCount reduce_;
  std::map<std::size_t, double> q_cache_;
};

struct TrainingFlops {
  double plan_total = 0.0;
  double dense_total = 0.0;
  double reduction() const { return dense_total / plan_total; }
};

/// Integrates training FLOPs over steps [0, steps); topology-evolution cost is
/// not counted.
inline TrainingFlops training_flops(const ModelDims& dims, const TopologyClock& clock, const StrideSchedule& strides,
                                    Step steps, double sequences_per_step = 1.0,
                                    ReduceCount reduce = ReduceCount::per_head) {
  FlopAccountant acc(dims, clock, strides, sequences_per_step, reduce);
  TrainingFlops out;
  for (Step t = 0; t < steps; ++t) out.plan_total += acc.step_flops(t);
  out.dense_total = acc.dense_step_flops() * static_cast<double>(steps);
  return out;
}

inline std::string flop_report_csv(const FlopReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "component,forward_flops,fraction\n";
  const double f = r.forward();
  const std::pair<const char*, double> rows[] = {{"kqv", r.kqv},   {"scores", r.scores}, {"reduce", r.reduce},
                                                 {"proj", r.proj}, {"ffw1", r.ffw1},     {"ffw2", r.ffw2},
                                                 {"lm", r.lm}};
  for (const auto& [name, v] : rows) os << name << ',' << v << ',' << v / f << '\n';
  os << "fully_connected," << r.fully_connected() << ',' << r.fc_fraction() << '\n';
  os << "attention," << r.attention() << ',' << r.attention_fraction() << '\n';
  os << "forward," << r.forward() << ",1\n";
  os << "backward," << r.backward() << ",2\n";
  os << "total," << r.total() << ",3\n";
  return os.str();
}

inline std::string flop_report_table(const FlopReport& r) {
  std::ostringstream os;
  const double f = r.forward();
  auto line = [&](const char* name, double v) {
    os << std::left << std::setw(18) << name << std::right << std::setw(16) << std::scientific << std::setprecision(4)
       << v << std::setw(10) << std::fixed << std::setprecision(2) << 100.0 * v / f << "%\n";
  };
  line("kqv", r.kqv);
  line("scores", r.scores);
  line("reduce", r.reduce);
  line("proj", r.proj);
  line("ffw1", r.ffw1);
  line("ffw2", r.ffw2);
  line("lm", r.lm);
  line("fully connected", r.fully_connected());
  line("attention", r.attention());
  os << std::left << std::setw(18) << "forward" << std::right << std::setw(16) << std::scientific << std::setprecision(4)
     << r.forward() << '\n';
  os << std::left << std::setw(18) << "backward" << std::right << std::setw(16) << r.backward() << '\n';
  os << std::left << std::setw(18) << "total" << std::right << std::setw(16) << r.total() << '\n';
  return os.str();
}

}  // namespace mst
