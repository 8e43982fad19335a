// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mst/trainer.hpp"

using namespace mst;
namespace fs = std::filesystem;

namespace {

const std::string kCorpus = std::string(MST_SOURCE_DIR) + "/data/kjv_1mb.txt";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mst_trainer_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_embd = 16;
  c.block_size = 16;
  c.total_steps = 60;
  c.batch_size = 2;
  c.lr = 3e-3;
  c.min_lr = 3e-4;
  c.warmup_steps = 5;
  c.lr_decay_steps = 60;
  c.max_sparsity = 0.8;
  c.n_stages = 2;
  c.prune_freq = 10;
  c.ultra_steps = 20;
  c.grow_freq = 10;
  c.update_interval = 5;
  c.attn_stride = 4;
  c.eval_interval = 10;
  c.eval_batches = 2;
  c.checkpoint_interval = 20;
  c.data_path = kCorpus;
  c.out_dir = out.string();
  return c;
}

const TokenizedCorpus& corpus() {
  static const TokenizedCorpus c = ingest(kCorpus, TokenizerMode::character, 0.9);
  return c;
}

template <typename T = float>
TrainSummary train(const RunConfig& c, Step stop = -1) {
  Trainer<T> t(c, corpus());
  return t.run(stop);
}

}  // namespace

TEST(Config, RoundTripsThroughText) {
  RunConfig c = small_config("runs/x");
  c.zeta_variant = "decay-n-cosine";
  c.mest_lambda = 0.1;
  c.keep_checkpoints = true;
  const std::string text = format_config(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.zeta_variant, "decay-n-cosine");
  EXPECT_EQ(format_config(parse_config(format_config(RunConfig{}))), format_config(RunConfig{}));
}

TEST(Config, ParsesCommentsAndRejectsBadInput) {
  const auto c = parse_config("# comment\n  n_layers = 3   # trailing\n\nlr=0.01\n");
  EXPECT_EQ(c.n_layers, 3u);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("n_layers = 2\nn_layers = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("n_layers = two\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/file.cfg"), ConfigError);
  RunConfig bad;
  bad.n_heads = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.evolution = "magic";
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.total_steps = 1000;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Config, BundledConfigsValidate) {
  for (const char* name : {"desk_mst.cfg", "desk_dense.cfg", "desk_static.cfg"}) {
    const auto c = load_config(std::string(MST_SOURCE_DIR) + "/configs/" + name);
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_EQ(c.n_layers, 4u);
    EXPECT_EQ(c.block_size, 256u);
    EXPECT_EQ(c.total_steps, 20000);
  }
  const auto mst = load_config(std::string(MST_SOURCE_DIR) + "/configs/desk_mst.cfg");
  EXPECT_EQ(mst.phase().total_steps(), 200 * 5 + 14000 + 200 * 5);
  EXPECT_EQ(mst.strides().dense_step, 15000);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto dir = scratch("ckpt");
  RunConfig c = small_config(dir);
  c.total_steps = 60;
  Trainer<double> a(c, corpus());
  a.run(23);
  a.save();
  Trainer<double> b(c, corpus());
  b.resume((dir / "ckpt_latest.bin").string());
  EXPECT_EQ(b.step(), 23);
  EXPECT_EQ(b.cum_flops(), a.cum_flops());
  ASSERT_EQ(a.model().params().size(), b.model().params().size());
  for (std::size_t i = 0; i < a.model().params().size(); ++i) {
    const auto& pa = a.model().params()[i];
    const auto& pb = b.model().params()[i];
    EXPECT_EQ(pa.name, pb.name);
    EXPECT_TRUE(std::equal(pa.value.values().begin(), pa.value.values().end(), pb.value.values().begin()));
    EXPECT_EQ(pa.m, pb.m);
    EXPECT_EQ(pa.v, pb.v);
  }
  for (std::size_t i = 0; i < a.model().masks().size(); ++i) EXPECT_EQ(a.model().masks()[i], b.model().masks()[i]);
  std::uint32_t elem = 0;
  const auto meta = peek_checkpoint((dir / "ckpt_latest.bin").string(), &elem);
  EXPECT_EQ(elem, 8u);
  EXPECT_EQ(parse_config(meta.config_text).n_embd, 16u);

  // a float model cannot load a double checkpoint
  Trainer<float> f(c, corpus());
  EXPECT_ANY_THROW(f.resume((dir / "ckpt_latest.bin").string()));
  // nor can a model of another shape
  RunConfig wide = c;
  wide.n_embd = 32;
  Trainer<double> w(wide, corpus());
  EXPECT_ANY_THROW(w.resume((dir / "ckpt_latest.bin").string()));
}

TEST(Training, IdenticalRunsGiveIdenticalLogs) {
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  train(small_config(d1));
  train(small_config(d2));
  EXPECT_EQ(slurp(d1 / "metrics.csv"), slurp(d2 / "metrics.csv"));
  EXPECT_EQ(slurp(d1 / "evolution.csv"), slurp(d2 / "evolution.csv"));
  EXPECT_EQ(read_metrics((d1 / "metrics.csv").string()).size(), 6u);
  RunConfig other = small_config(scratch("det3"));
  other.seed = 2;
  train(other);
  EXPECT_NE(slurp(d1 / "metrics.csv"), slurp(fs::path(other.out_dir) / "metrics.csv"));
}

TEST(Training, ResumeContinuesIdentically) {
  const auto full = scratch("resume_full"), part = scratch("resume_part");
  RunConfig c = small_config(full);
  c.keep_checkpoints = true;
  train(c);

  // interrupted run: stop at 25, checkpoint at 20 survives, continue from it
  RunConfig p = small_config(part);
  train(p, 25);
  Trainer<float> cont(p, corpus());
  cont.resume((part / "ckpt_latest.bin").string());
  EXPECT_EQ(cont.step(), 20);
  cont.run();
  EXPECT_EQ(slurp(full / "metrics.csv"), slurp(part / "metrics.csv"));
  EXPECT_EQ(slurp(full / "evolution.csv"), slurp(part / "evolution.csv"));

  // resuming a finished run changes nothing
  Trainer<float> done(c, corpus());
  done.resume((full / "ckpt_latest.bin").string());
  EXPECT_EQ(done.run().steps_run, 0);
  EXPECT_EQ(read_metrics((full / "metrics.csv").string()).size(), 6u);

  // a kept mid checkpoint resumed into a fresh directory reproduces the tail
  const auto fork = scratch("resume_fork");
  RunConfig f = c;
  f.out_dir = fork.string();
  Trainer<float> tail(f, corpus());
  tail.resume((full / "ckpt_00000040.bin").string());
  tail.run();
  const auto a = read_metrics((full / "metrics.csv").string());
  const auto b = read_metrics((fork / "metrics.csv").string());
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(format_metrics_row(b[0]), format_metrics_row(a[4]));
  EXPECT_EQ(format_metrics_row(b[1]), format_metrics_row(a[5]));
}

TEST(Training, EvaluationReproducesLoggedValue) {
  const auto dir = scratch("eval");
  RunConfig c = small_config(dir);
  c.keep_checkpoints = true;
  train(c);
  const auto rows = read_metrics((dir / "metrics.csv").string());
  for (Step k : {20, 60}) {
    Trainer<float> t(c, corpus());
    char name[64];
    std::snprintf(name, sizeof name, "ckpt_%08lld.bin", static_cast<long long>(k));
    t.resume((dir / name).string());
    EXPECT_EQ(t.evaluate(k), rows[k / 10 - 1].val_loss);
  }
}

TEST(Training, LoggedScheduleAndFlops) {
  const auto dir = scratch("sched");
  RunConfig c = small_config(dir);
  c.eval_interval = 1;
  c.total_steps = 70;  // past the window end, so the final restoration fires
  c.lr_decay_steps = 70;
  train<double>(c);
  const auto rows = read_metrics((dir / "metrics.csv").string());
  ASSERT_EQ(rows.size(), 70u);
  const auto clock = c.clock();
  Trainer<double> probe(c, corpus());
  double total = 0;
  for (const auto& s : probe.model().maskable_shapes()) total += double(s.size());
  const double n_layers = double(probe.model().maskable_shapes().size());
  for (const auto& r : rows) {
    // masks after step r.step - 1 hold the target of the latest update
    EXPECT_LE(std::abs(r.sparsity - clock.effective_sparsity(r.step)) * total, n_layers) << r.step;
    EXPECT_EQ(r.stride, stride_at(r.step - 1, c.strides()));
    EXPECT_EQ(r.zeta, zeta(r.step - 1, c.zeta_schedule()));
    EXPECT_EQ(r.lr, lr_at(r.step - 1, c.lr_schedule()));
    const auto tf = training_flops(probe.model().config().dims(), clock, c.strides(), r.step, c.sequences_per_step());
    EXPECT_EQ(r.cum_flops, tf.plan_total) << r.step;
  }
  EXPECT_EQ(rows.back().sparsity, 0.0);
  EXPECT_GT(rows[29].sparsity, 0.79);

  // one evolution row per maskable layer plus a global row per update
  std::ifstream evo(dir / "evolution.csv");
  std::string line;
  std::getline(evo, line);
  EXPECT_EQ(line, kEvolutionHeader);
  std::size_t n = 0;
  while (std::getline(evo, line)) ++n;
  EXPECT_EQ(n, 13u * (probe.model().maskable_shapes().size() + 1));
}

TEST(Training, DenseStaticKeepsFullMasks) {
  const auto dir = scratch("dense");
  RunConfig c = small_config(dir);
  c.sparsity_plan = "dense";
  c.evolution = "static";
  c.attn_stride = 1;
  Trainer<float> t(c, corpus());
  t.run();
  for (const auto& m : t.model().masks()) EXPECT_EQ(m.sparsity(), 0.0);
  std::ifstream evo(dir / "evolution.csv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(evo, line)) ++n;
  EXPECT_EQ(n, 1u);
  for (const auto& r : read_metrics((dir / "metrics.csv").string())) {
    EXPECT_EQ(r.sparsity, 0.0);
    EXPECT_EQ(r.stride, 1u);
  }
}

TEST(Training, StaticSparseNeverMovesItsMask) {
  const auto dir = scratch("static");
  RunConfig c = small_config(dir);
  c.sparsity_plan = "sparse";
  c.evolution = "static";
  Trainer<float> t(c, corpus());
  const auto before = t.model().masks();
  t.run();
  EXPECT_EQ(t.model().masks(), before);
  EXPECT_NEAR(global_sparsity(before), 0.8, 1e-3);
}

TEST(Training, LossFallsOnShortRun) {
  const auto dir = scratch("learn");
  RunConfig c = small_config(dir);
  c.sparsity_plan = "dense";
  c.total_steps = 200;
  c.lr_decay_steps = 200;
  c.eval_interval = 200;
  c.eval_batches = 8;
  const auto s = train(c);
  EXPECT_LT(s.final_val_loss, std::log(double(corpus().vocab_size())) - 0.8);
}

TEST(Heatmap, RoundTripsMagnitudes) {
  Rng rng(1);
  ModelConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 1;
  mc.n_embd = 6;
  mc.block_size = 4;
  mc.vocab_size = 5;
  Gpt<float> m(mc, rng);
  const auto grid = parse_matrix_csv(export_heatmap_csv(m, "h0.ffw1"));
  const auto& w = m.param("h0.ffw1").value;
  ASSERT_EQ(grid.size(), 6u);
  for (std::size_t r = 0; r < 6; ++r) {
    ASSERT_EQ(grid[r].size(), 24u);
    for (std::size_t c = 0; c < 24; ++c) EXPECT_EQ(grid[r][c], std::abs(double(w.at(r, c))));
  }
  EXPECT_THROW(export_heatmap_csv(m, "h0.ln1"), std::invalid_argument);
  EXPECT_THROW(export_heatmap_csv(m, "nope"), std::invalid_argument);
}

TEST(Cli, ExitCodes) {
  const std::string cli = MST_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int rc = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  const auto dir = scratch("cli");
  std::ofstream(dir / "bad.cfg") << "n_layers = 2\nbogus_key = 1\n";
  std::ofstream(dir / "tiny.cfg") << format_config(small_config(dir / "run"));
  EXPECT_EQ(run("pattern --kind strided -n 8 -l 3"), 0);
  EXPECT_EQ(run("flops --set vocab_size=50257"), 0);
  // vocab 0 reads the corpus
  EXPECT_EQ(run("flops --set data_path=" + (dir / "nope.txt").string()), 2);
  EXPECT_EQ(run("train --config " + (dir / "bad.cfg").string()), 1);
  EXPECT_EQ(run("train"), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("eval --checkpoint " + (dir / "missing.bin").string()), 2);
  EXPECT_EQ(run("train --config " + (dir / "tiny.cfg").string() + " --set eval_batches=3"), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt_latest.bin"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.txt"));
  EXPECT_EQ(run("eval --checkpoint " + (dir / "run" / "ckpt_latest.bin").string()), 0);
  EXPECT_EQ(run("export-heatmap --checkpoint " + (dir / "run" / "ckpt_latest.bin").string() +
                " --layer h0.wq --out " + (dir / "h.csv").string()),
            0);
  EXPECT_EQ(parse_matrix_csv(slurp(dir / "h.csv")).size(), 16u);
}
