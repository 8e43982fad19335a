// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mst/checkpoint.hpp"
#include "mst/config.hpp"
#include "mst/data.hpp"
#include "mst/flops.hpp"
#include "mst/model.hpp"
#include "mst/optim.hpp"
#include "mst/schedules.hpp"
#include "mst/topology.hpp"

namespace mst {

struct MetricsRow {
  Step step = 0;  // completed optimizer steps
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
  double sparsity = 0.0;
  double zeta = 0.0;
  std::size_t stride = 1;
  double lr = 0.0;
  double cum_flops = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,train_loss,val_loss,val_ppl,sparsity,zeta,stride,lr,cum_flops";
inline constexpr const char* kEvolutionHeader =
    "step,layer,target_sparsity,zeta,n_prune,n_grow,n_rand,n_grad,sparsity_before,sparsity_after";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%.17g,%.17g", static_cast<long long>(r.step),
                r.train_loss, r.val_loss, r.val_ppl, r.sparsity, r.zeta, r.stride, r.lr, r.cum_flops);
  return buf;
}

inline MetricsRow parse_metrics_row(const std::string& line) {
  MetricsRow r;
  long long step = 0;
  if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf,%lf,%lf,%zu,%lf,%lf", &step, &r.train_loss, &r.val_loss, &r.val_ppl,
                  &r.sparsity, &r.zeta, &r.stride, &r.lr, &r.cum_flops) != 9)
    throw std::runtime_error("malformed metrics row: " + line);
  r.step = step;
  return r;
}

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw std::runtime_error("unexpected metrics header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  return rows;
}

inline std::string format_evolution_row(Step t, const std::string& layer, double target, double z,
                                        const UpdateCounts& c, double before, double after) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%.17g,%zu,%zu,%zu,%zu,%.17g,%.17g", static_cast<long long>(t),
                layer.c_str(), target, z, c.n_prune, c.n_grow, c.n_rand, c.n_grad, before, after);
  return buf;
}

inline TokenizedCorpus load_corpus(const RunConfig& cfg) {
  return ingest(cfg.data_path, parse_tokenizer_mode(cfg.tokenizer), cfg.train_fraction);
}

/// Keeps the header and the rows whose leading step field satisfies keep().
inline void truncate_csv(const std::string& path, const char* header, const std::function<bool(Step)>& keep) {
  std::vector<std::string> lines;
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && keep(std::stoll(line.substr(0, line.find(','))))) lines.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  out << header << '\n';
  for (const auto& l : lines) out << l << '\n';
}

struct TrainSummary {
  Step steps_run = 0;
  Step final_step = 0;
  double final_val_loss = 0.0;
  double cum_flops = 0.0;
};

/// One training run. Streams: 0 init, 1 masks, 2 batches, 3 topology; eval
/// batches come from a stream derived from the step so any evaluation can be
/// reproduced from a checkpoint alone.
template <typename T>
class Trainer {
 public:
  Trainer(RunConfig cfg, TokenizedCorpus corpus)
      : cfg_(std::move(cfg)),
        corpus_(std::move(corpus)),
        init_rng_(Rng::derive(cfg_.seed, 0)),
        model_(init_model()),
        batch_rng_(Rng::derive(cfg_.seed, 2)),
        topo_rng_(Rng::derive(cfg_.seed, 3)),
        clock_(cfg_.clock()),
        zeta_sched_(cfg_.zeta_schedule()),
        strides_(cfg_.strides()),
        scheme_(cfg_.scheme()),
        accountant_(model_.config().dims(), clock_, strides_, cfg_.sequences_per_step(), cfg_.reduce_count()) {
    Rng mask_rng = Rng::derive(cfg_.seed, 1);
    const auto shapes = model_.maskable_shapes();
    const auto alloc = er_allocate(plan_sparsity(0, clock_.plan), shapes);
    model_.set_masks(init_masks(alloc, shapes, mask_rng));
  }

  const RunConfig& config() const { return cfg_; }
  Gpt<T>& model() { return model_; }
  const TokenizedCorpus& corpus() const { return corpus_; }
  Step step() const { return step_; }
  double cum_flops() const { return cum_flops_; }

  /// Restores state from a checkpoint written by this trainer.
  void resume(const std::string& path) {
    const auto meta = load_checkpoint(path, model_);
    if (meta.rng_states.size() != 2) throw std::runtime_error("checkpoint rng state count differs");
    step_ = static_cast<Step>(meta.step);
    adam_step_ = meta.adam_step;
    cum_flops_ = meta.cum_flops;
    batch_rng_.set_state(meta.rng_states[0]);
    topo_rng_.set_state(meta.rng_states[1]);
  }

  std::string out_path(const std::string& name) const { return (std::filesystem::path(cfg_.out_dir) / name).string(); }

  /// Mean validation loss over eval_batches batches drawn for step k.
  double evaluate(Step k) {
    Rng r = Rng::derive(cfg_.seed, 0x6576616c00000000ULL + static_cast<std::uint64_t>(k));
    const auto& pattern = pattern_for(k);
    double acc = 0.0;
    for (std::size_t b = 0; b < cfg_.eval_batches; ++b) {
      const Batch batch = sample_batch(corpus_, Split::val, cfg_.batch_size, cfg_.block_size, r);
      acc += static_cast<double>(model_.loss(batch.inputs, batch.targets, cfg_.block_size, pattern));
    }
    return acc / static_cast<double>(cfg_.eval_batches);
  }

  /// Trains until total_steps, or until stop_at completed steps if given.
  TrainSummary run(Step stop_at = -1) {
    std::filesystem::create_directories(cfg_.out_dir);
    const Step start = step_;
    const std::string metrics_path = out_path("metrics.csv");
    const std::string evo_path = out_path("evolution.csv");
    truncate_csv(metrics_path, kMetricsHeader, [&](Step s) { return s <= start; });
    truncate_csv(evo_path, kEvolutionHeader, [&](Step s) { return s < start; });
    std::ofstream metrics(metrics_path, std::ios::app);
    std::ofstream evo(evo_path, std::ios::app);

    const Step end = stop_at >= 0 ? std::min(stop_at, cfg_.total_steps) : cfg_.total_steps;
    const auto lr_sched = cfg_.lr_schedule();
    const auto adam = cfg_.adamw();
    auto slots = model_.optimizer_slots();
    const double inv_accum = 1.0 / static_cast<double>(cfg_.grad_accum);
    TrainSummary summary;

    for (Step t = step_; t < end; ++t) {
      const auto& pattern = pattern_for(t);
      double loss = 0.0;
      for (std::size_t micro = 0; micro < cfg_.grad_accum; ++micro) {
        const Batch batch = sample_batch(corpus_, Split::train, cfg_.batch_size, cfg_.block_size, batch_rng_);
        loss += static_cast<double>(model_.loss_and_grad(batch.inputs, batch.targets, cfg_.block_size, pattern, micro > 0));
      }
      loss *= inv_accum;
      if (cfg_.grad_accum > 1)
        for (auto& p : model_.params())
          for (T& g : p.value.grads()) g *= T(inv_accum);
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(t));

      const double lr = lr_at(t, lr_sched);
      adamw_step<T>(slots, ++adam_step_, lr, adam);

      const double z = zeta(t, zeta_sched_);
      if (clock_.is_update_step(t)) {
        const double before = global_sparsity(model_.masks());
        auto states = model_.layer_states();
        const auto rec = global_evolve<T>(states, t, clock_.plan, zeta_sched_, scheme_, topo_rng_);
        UpdateCounts total;
        for (const auto& up : rec.layers) {
          evo << format_evolution_row(t, up.layer, rec.target_sparsity, rec.zeta, up.counts, up.sparsity_before,
                                      up.sparsity_after)
              << '\n';
          total.n_prune += up.counts.n_prune;
          total.n_grow += up.counts.n_grow;
          total.n_rand += up.counts.n_rand;
          total.n_grad += up.counts.n_grad;
        }
        evo << format_evolution_row(t, "global", rec.target_sparsity, rec.zeta, total, before, rec.realized_sparsity)
            << '\n';
        evo.flush();
      }

      cum_flops_ += accountant_.step_flops(t);
      step_ = t + 1;
      ++summary.steps_run;

      if (step_ % cfg_.eval_interval == 0 || step_ == cfg_.total_steps) {
        MetricsRow row;
        row.step = step_;
        row.train_loss = loss;
        row.val_loss = evaluate(step_);
        row.val_ppl = std::exp(row.val_loss);
        row.sparsity = global_sparsity(model_.masks());
        row.zeta = z;
        row.stride = stride_at(t, strides_);
        row.lr = lr;
        row.cum_flops = cum_flops_;
        metrics << format_metrics_row(row) << '\n';
        metrics.flush();
        summary.final_val_loss = row.val_loss;
      }
      if (step_ % cfg_.checkpoint_interval == 0 || step_ == cfg_.total_steps) save();
    }
    summary.final_step = step_;
    summary.cum_flops = cum_flops_;
    return summary;
  }

  void save() {
    CheckpointMeta meta{format_config(cfg_), static_cast<std::uint64_t>(step_), adam_step_, cum_flops_,
                        {batch_rng_.state(), topo_rng_.state()}};
    save_checkpoint(out_path("ckpt_latest.bin"), model_, meta);
    if (cfg_.keep_checkpoints) {
      char name[64];
      std::snprintf(name, sizeof name, "ckpt_%08lld.bin", static_cast<long long>(step_));
      std::filesystem::copy_file(out_path("ckpt_latest.bin"), out_path(name),
                                 std::filesystem::copy_options::overwrite_existing);
    }
  }

 private:
  Gpt<T> init_model() {
    cfg_.validate();
    return Gpt<T>(cfg_.model(corpus_.vocab_size()), init_rng_);
  }

  const AttentionPattern& pattern_for(Step t) {
    const std::size_t l = stride_at(t, strides_);
    auto it = patterns_.find(l);
    if (it == patterns_.end())
      it = patterns_.emplace(l, AttentionPattern::for_stride(strides_.kind, cfg_.block_size, l, strides_.summary_cols)).first;
    return it->second;
  }

  RunConfig cfg_;
  TokenizedCorpus corpus_;
  Rng init_rng_;
  Gpt<T> model_;
  Rng batch_rng_;
  Rng topo_rng_;
  TopologyClock clock_;
  ZetaSchedule zeta_sched_;
  StrideSchedule strides_;
  EvolutionScheme scheme_;
  FlopAccountant accountant_;
  std::map<std::size_t, AttentionPattern> patterns_;
  Step step_ = 0;
  std::uint64_t adam_step_ = 0;
  double cum_flops_ = 0.0;
};

/// Magnitudes of one weight matrix as CSV (rows x cols, %.17g).
template <typename T>
std::string export_heatmap_csv(const Gpt<T>& model, const std::string& layer) {
  const auto& p = model.param(layer);
  if (p.value.rank() != 2) throw std::invalid_argument(layer + " is not a matrix");
  std::string out;
  char buf[40];
  for (std::size_t r = 0; r < p.value.rows(); ++r) {
    for (std::size_t c = 0; c < p.value.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(std::abs(p.value.at(r, c))));
      if (c) out.push_back(',');
      out += buf;
    }
    out.push_back('\n');
  }
  return out;
}

inline std::vector<std::vector<double>> parse_matrix_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mst
