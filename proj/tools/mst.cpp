// SPDX-License-Identifier: Apache-2.0
// Command-line front end: train, eval, flops, pattern, export-heatmap.

#include <CLI11.hpp>

#include <cstdio>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <fstream>
#include <iostream>
#include <optional>

#include "mst/mst.hpp"

using namespace mst;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::vector<std::string> sets;  // key=value
  Step stop_after = -1;
};

RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.validate();
  return cfg;
}

template <typename T>
int train(const RunConfig& cfg, const Overrides& o) {
  Trainer<T> trainer(cfg, load_corpus(cfg));
  if (!o.resume.empty()) {
    trainer.resume(o.resume);
    std::printf("resumed at step %lld\n", static_cast<long long>(trainer.step()));
  } else {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream(trainer.out_path("config.txt")) << format_config(cfg);
  }
  const auto s = trainer.run(o.stop_after);
  std::printf("steps_run=%lld final_step=%lld final_val_loss=%.6f cum_flops=%.6e\n",
              static_cast<long long>(s.steps_run), static_cast<long long>(s.final_step), s.final_val_loss, s.cum_flops);
  return 0;
}

RunConfig checkpoint_config(const std::string& path, const std::string& data) {
  RunConfig cfg = parse_config(peek_checkpoint(path).config_text);
  if (!data.empty()) cfg.data_path = data;
  cfg.validate();
  return cfg;
}

template <typename T>
int eval(const std::string& ckpt, const std::string& data) {
  const RunConfig cfg = checkpoint_config(ckpt, data);
  Trainer<T> trainer(cfg, load_corpus(cfg));
  trainer.resume(ckpt);
  const double loss = trainer.evaluate(trainer.step());
  std::printf("step=%lld val_loss=%.17g val_ppl=%.17g\n", static_cast<long long>(trainer.step()), loss, std::exp(loss));
  return 0;
}

template <typename T>
int export_heatmap(const std::string& ckpt, const std::string& layer, const std::string& out) {
  const RunConfig cfg = checkpoint_config(ckpt, "");
  Trainer<T> trainer(cfg, load_corpus(cfg));
  trainer.resume(ckpt);
  const std::string csv = export_heatmap_csv(trainer.model(), layer);
  if (out.empty() || out == "-") {
    std::cout << csv;
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << csv;
  }
  return 0;
}

int flops(const RunConfig& cfg, bool csv) {
  std::size_t vocab = cfg.vocab_size;
  if (vocab == 0) vocab = load_corpus(cfg).vocab_size();
  const ModelDims dims = cfg.model(vocab).dims();
  const auto reduce = cfg.reduce_count();
  const FlopReport dense = forward_flops(dims, 0.0, 1.0, reduce);
  std::cout << (csv ? flop_report_csv(dense) : flop_report_table(dense));
  const auto tf = training_flops(dims, cfg.clock(), cfg.strides(), cfg.total_steps, cfg.sequences_per_step(), reduce);
  std::printf("training_flops_plan=%.17g\ntraining_flops_dense=%.17g\nreduction=%.6f\n", tf.plan_total, tf.dense_total,
              tf.reduction());
  return 0;
}

int pattern(const std::string& kind, std::size_t n, std::size_t l, std::size_t c, bool grid) {
  const auto p = AttentionPattern::for_stride(parse_pattern_kind(kind), n, l, c);
  if (grid) std::cout << p.to_text_grid();
  std::printf("pairs=%zu q_atten=%.6f%%\n", p.pair_count(), 100.0 * p.q_atten());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // the tape frees and reallocates the same large buffers every step
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"sparse GPT training toolkit"};
  app.require_subcommand(1);

  Overrides o;
  auto* train_cmd = app.add_subcommand("train", "run training from a config file");
  train_cmd->add_option("--config", o.config, "config file")->required();
  train_cmd->add_option("--seed", o.seed, "override seed");
  train_cmd->add_option("--out", o.out, "override output directory");
  train_cmd->add_option("--resume", o.resume, "checkpoint to continue from");
  train_cmd->add_option("--set", o.sets, "override key=value (repeatable)");
  train_cmd->add_option("--stop-after", o.stop_after, "stop once this many steps are complete");

  std::string ckpt, data, layer, out;
  auto* eval_cmd = app.add_subcommand("eval", "validation loss of a checkpoint");
  eval_cmd->add_option("--checkpoint,--resume", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", data, "corpus path (defaults to the one in the checkpoint)");

  bool csv = false;
  auto* flops_cmd = app.add_subcommand("flops", "FLOP breakdown and training reduction ratio");
  flops_cmd->add_option("--config", o.config, "config file (defaults when omitted)");
  flops_cmd->add_option("--set", o.sets, "override key=value (repeatable)");
  flops_cmd->add_flag("--csv", csv, "CSV output");

  std::string kind = "strided";
  std::size_t n = 1024, l = 256, c = 1;
  bool no_grid = false;
  auto* pattern_cmd = app.add_subcommand("pattern", "attention mask grid and q_atten");
  pattern_cmd->add_option("--kind", kind, "dense, strided or fixed");
  pattern_cmd->add_option("-n,--length", n, "sequence length");
  pattern_cmd->add_option("-l,--stride", l, "stride / block length");
  pattern_cmd->add_option("-c,--summary", c, "summary columns (fixed)");
  pattern_cmd->add_flag("--no-grid", no_grid, "print only the counts");

  auto* heat_cmd = app.add_subcommand("export-heatmap", "|weights| of one layer as CSV");
  heat_cmd->add_option("--checkpoint,--resume", ckpt, "checkpoint file")->required();
  heat_cmd->add_option("--layer", layer, "parameter name, e.g. h0.wq")->required();
  heat_cmd->add_option("--out", out, "output file (stdout by default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    auto by_precision = [](Precision p, auto f32, auto f64) { return p == Precision::f32 ? f32() : f64(); };
    if (*train_cmd) {
      const RunConfig cfg = resolve_config(o);
      return by_precision(cfg.precision_kind(), [&] { return train<float>(cfg, o); },
                          [&] { return train<double>(cfg, o); });
    }
    if (*eval_cmd || *heat_cmd) {
      std::uint32_t elem = 0;
      peek_checkpoint(ckpt, &elem);
      const Precision p = elem == 4 ? Precision::f32 : Precision::f64;
      if (*eval_cmd) return by_precision(p, [&] { return eval<float>(ckpt, data); }, [&] { return eval<double>(ckpt, data); });
      return by_precision(p, [&] { return export_heatmap<float>(ckpt, layer, out); },
                          [&] { return export_heatmap<double>(ckpt, layer, out); });
    }
    if (*flops_cmd) return flops(resolve_config(o), csv);
    if (*pattern_cmd) return pattern(kind, n, l, c, !no_grid);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
