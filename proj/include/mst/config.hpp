// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mst/errors.hpp"
#include "mst/flops.hpp"
#include "mst/model.hpp"
#include "mst/optim.hpp"
#include "mst/schedules.hpp"
#include "mst/topology.hpp"

namespace mst {

enum class Precision { f32, f64 };

/// Everything a run needs. Defaults are the reference GPT-2-small setup;
/// desk-scale runs override them from a config file.
struct RunConfig {
  // model
  std::size_t n_layers = 12;
  std::size_t n_heads = 12;
  std::size_t n_embd = 768;
  std::size_t block_size = 1024;
  std::size_t vocab_size = 0;  // 0: taken from the corpus
  bool tie_embeddings = true;
  bool mask_lm_head = true;

  // optimizer
  double lr = 6e-4;
  double min_lr = 6e-5;
  Step warmup_steps = 2000;
  Step lr_decay_steps = 140000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double grad_clip = 0.1;
  double adam_eps = 1e-8;
  Step total_steps = 140000;
  std::size_t batch_size = 12;
  std::size_t grad_accum = 1;

  // sparsity variation and topology
  double max_sparsity = 0.96;
  Step n_stages = 5;
  Step prune_freq = 2000;
  Step ultra_steps = 100000;
  Step grow_freq = 2000;
  double zeta_init = 0.3;
  Step update_interval = 100;
  double random_growth_ratio = 0.25;
  std::string sparsity_plan = "sv";
  Step sd_switch_step = 60000;
  Step dsd_dense_until = 10000;
  Step dsd_sparse_until = 110000;
  Step gd_stages = 10;
  std::string evolution = "mg";
  double mest_lambda = 0.0;
  std::string zeta_variant = "n-cosine";
  double zeta_decay_ratio = 0.5;

  // attention
  std::size_t attn_stride = 256;
  Step attn_dense_step = -1;  // -1: end of the ultra-sparse phase
  std::string attn_kind = "strided";
  std::size_t attn_summary_cols = 1;

  // data and bookkeeping
  std::string data_path = "data/kjv_1mb.txt";
  std::string tokenizer = "char";
  double train_fraction = 0.9;
  std::uint64_t seed = 1;
  Step eval_interval = 500;
  std::size_t eval_batches = 20;
  Step checkpoint_interval = 1000;
  bool keep_checkpoints = false;
  std::string out_dir = "runs/default";
  std::string precision = "f32";
  std::string flop_reduce = "per_head";

  PhaseConfig phase() const { return {max_sparsity, n_stages, prune_freq, ultra_steps, grow_freq}; }

  SparsityPlan plan() const {
    SparsityPlan p;
    p.kind = parse_plan_kind(sparsity_plan);
    p.phase = phase();
    p.total_steps = total_steps;
    p.sd_switch_step = sd_switch_step;
    p.dsd_dense_until = dsd_dense_until;
    p.dsd_sparse_until = dsd_sparse_until;
    p.gd_stages = gd_stages;
    return p;
  }

  EvolutionScheme scheme() const { return {parse_scheme_kind(evolution), random_growth_ratio, mest_lambda}; }

  TopologyClock clock() const { return {plan(), update_interval, scheme().kind == SchemeKind::static_mask}; }

  ZetaSchedule zeta_schedule() const { return {parse_zeta_variant(zeta_variant), zeta_init, zeta_decay_ratio, phase()}; }

  StrideSchedule strides() const {
    const Step dense = attn_dense_step < 0 ? phase().restoration_start() : attn_dense_step;
    return {attn_stride, dense, parse_pattern_kind(attn_kind), attn_summary_cols};
  }

  LrSchedule lr_schedule() const { return {lr, min_lr, warmup_steps, lr_decay_steps}; }

  AdamWConfig adamw() const { return {beta1, beta2, adam_eps, weight_decay, grad_clip}; }

  ModelConfig model(std::size_t vocab) const {
    return {n_layers, n_heads, n_embd, block_size, vocab_size ? vocab_size : vocab, tie_embeddings, mask_lm_head};
  }

  ReduceCount reduce_count() const {
    if (flop_reduce == "per_head") return ReduceCount::per_head;
    if (flop_reduce == "as_printed") return ReduceCount::as_printed;
    throw ConfigError("flop_reduce must be per_head or as_printed");
  }

  Precision precision_kind() const {
    if (precision == "f32") return Precision::f32;
    if (precision == "f64") return Precision::f64;
    throw ConfigError("precision must be f32 or f64");
  }

  double sequences_per_step() const { return static_cast<double>(batch_size * grad_accum); }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(n_layers > 0 && n_heads > 0 && n_embd > 0 && block_size > 0, "model dimensions must be positive");
    need(n_embd % n_heads == 0, "n_embd must be divisible by n_heads");
    need(lr > 0 && min_lr >= 0 && min_lr <= lr, "need 0 <= min_lr <= lr, lr > 0");
    need(warmup_steps >= 0 && lr_decay_steps > warmup_steps, "need 0 <= warmup_steps < lr_decay_steps");
    need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
    need(adam_eps > 0 && weight_decay >= 0, "adam_eps must be positive, weight_decay non-negative");
    need(total_steps > 0, "total_steps must be positive");
    need(batch_size > 0 && grad_accum > 0, "batch_size and grad_accum must be positive");
    need(update_interval > 0, "update_interval must be positive");
    need(zeta_init >= 0 && zeta_init <= 1, "zeta_init must lie in [0, 1]");
    need(random_growth_ratio >= 0 && random_growth_ratio <= 1, "random_growth_ratio must lie in [0, 1]");
    need(attn_stride >= 1, "attn_stride must be >= 1");
    need(train_fraction > 0 && train_fraction < 1, "train_fraction must lie in (0, 1)");
    need(eval_interval > 0 && eval_batches > 0, "eval_interval and eval_batches must be positive");
    need(checkpoint_interval > 0, "checkpoint_interval must be positive");
    need(gd_stages > 0, "gd_stages must be positive");
    try {
      phase().validate();
      (void)plan();
      (void)scheme();
      (void)zeta_schedule();
      (void)strides();
      (void)parse_tokenizer_mode(tokenizer);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    (void)reduce_count();
    (void)precision_kind();
    const auto p = plan();
    if (p.kind == PlanKind::sv)
      need(phase().total_steps() <= total_steps, "sparsity variation phases exceed total_steps");
    if (p.kind == PlanKind::dsd) need(dsd_dense_until <= dsd_sparse_until && dsd_sparse_until <= total_steps, "dsd breakpoints out of order");
    if (p.kind == PlanKind::sd) need(sd_switch_step <= total_steps, "sd_switch_step exceeds total_steps");
    need(attn_dense_step <= total_steps, "attn_dense_step exceeds total_steps");
  }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename U>
U parse_number(const std::string& key, const std::string& s) {
  U v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("bad value for " + key + ": '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + s + "'");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename U>
ConfigField field(const char* key, U RunConfig::*member) {
  ConfigField f{key, nullptr, nullptr};
  f.set = [key, member](RunConfig& c, const std::string& s) {
    if constexpr (std::is_same_v<U, bool>)
      c.*member = parse_bool(key, s);
    else if constexpr (std::is_same_v<U, std::string>)
      c.*member = s;
    else if constexpr (std::is_floating_point_v<U>)
      c.*member = parse_number<U>(key, s);
    else {
      if (std::is_unsigned_v<U> && !s.empty() && s[0] == '-') throw ConfigError(std::string(key) + " must be non-negative");
      c.*member = parse_number<U>(key, s);
    }
  };
  f.get = [member](const RunConfig& c) -> std::string {
    if constexpr (std::is_same_v<U, bool>)
      return c.*member ? "true" : "false";
    else if constexpr (std::is_same_v<U, std::string>)
      return c.*member;
    else if constexpr (std::is_floating_point_v<U>)
      return format_double(c.*member);
    else
      return std::to_string(c.*member);
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      field("n_layers", &RunConfig::n_layers),
      field("n_heads", &RunConfig::n_heads),
      field("n_embd", &RunConfig::n_embd),
      field("block_size", &RunConfig::block_size),
      field("vocab_size", &RunConfig::vocab_size),
      field("tie_embeddings", &RunConfig::tie_embeddings),
      field("mask_lm_head", &RunConfig::mask_lm_head),
      field("lr", &RunConfig::lr),
      field("min_lr", &RunConfig::min_lr),
      field("warmup_steps", &RunConfig::warmup_steps),
      field("lr_decay_steps", &RunConfig::lr_decay_steps),
      field("beta1", &RunConfig::beta1),
      field("beta2", &RunConfig::beta2),
      field("weight_decay", &RunConfig::weight_decay),
      field("grad_clip", &RunConfig::grad_clip),
      field("adam_eps", &RunConfig::adam_eps),
      field("total_steps", &RunConfig::total_steps),
      field("batch_size", &RunConfig::batch_size),
      field("grad_accum", &RunConfig::grad_accum),
      field("max_sparsity", &RunConfig::max_sparsity),
      field("n_stages", &RunConfig::n_stages),
      field("prune_freq", &RunConfig::prune_freq),
      field("ultra_steps", &RunConfig::ultra_steps),
      field("grow_freq", &RunConfig::grow_freq),
      field("zeta_init", &RunConfig::zeta_init),
      field("update_interval", &RunConfig::update_interval),
      field("random_growth_ratio", &RunConfig::random_growth_ratio),
      field("sparsity_plan", &RunConfig::sparsity_plan),
      field("sd_switch_step", &RunConfig::sd_switch_step),
      field("dsd_dense_until", &RunConfig::dsd_dense_until),
      field("dsd_sparse_until", &RunConfig::dsd_sparse_until),
      field("gd_stages", &RunConfig::gd_stages),
      field("evolution", &RunConfig::evolution),
      field("mest_lambda", &RunConfig::mest_lambda),
      field("zeta_variant", &RunConfig::zeta_variant),
      field("zeta_decay_ratio", &RunConfig::zeta_decay_ratio),
      field("attn_stride", &RunConfig::attn_stride),
      field("attn_dense_step", &RunConfig::attn_dense_step),
      field("attn_kind", &RunConfig::attn_kind),
      field("attn_summary_cols", &RunConfig::attn_summary_cols),
      field("data_path", &RunConfig::data_path),
      field("tokenizer", &RunConfig::tokenizer),
      field("train_fraction", &RunConfig::train_fraction),
      field("seed", &RunConfig::seed),
      field("eval_interval", &RunConfig::eval_interval),
      field("eval_batches", &RunConfig::eval_batches),
      field("checkpoint_interval", &RunConfig::checkpoint_interval),
      field("keep_checkpoints", &RunConfig::keep_checkpoints),
      field("out_dir", &RunConfig::out_dir),
      field("precision", &RunConfig::precision),
      field("flop_reduce", &RunConfig::flop_reduce),
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Overrides one key; unknown keys are errors.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key: " + key);
}

/// `key = value` lines; '#' starts a comment; blank lines ignored. Keys may
/// appear at most once. Does not validate.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + key);
    set_config_value(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form (every key, fixed order); parse_config inverts it.
inline std::string format_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : detail::config_fields()) os << f.key << " = " << f.get(cfg) << '\n';
  return os.str();
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.emplace_back(f.key);
  return keys;
}

}  // namespace mst
