// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#include "mdvae/train.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "support/fixtures.hpp"

using namespace mdvae;
using ad::Mat;
using train::TrainConfig;
using train::TrainState;
using train::Variant;

namespace {

model::ModelConfig tiny_model(int K = 2) {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_z = 4;
  cfg.K = K;
  cfg.max_len = 20;
  cfg.ff_mult = 2;
  return cfg;
}

TrainConfig tiny_train(Variant v, std::uint64_t seed = 5) {
  TrainConfig tc;
  tc.variant = v;
  tc.seed = seed;
  tc.batch_size = 4;
  tc.epochs = 1;
  return tc;
}

data::Corpus short_corpus(int n, std::uint64_t seed) {
  data::Corpus out;
  auto raw = test::toy_corpus(4 * n, seed);
  for (const auto& r : raw.records) {
    if (smiles::tokenize(r.smiles)->ids.size() <= 18)
      out.records.push_back(r);
    if (static_cast<int>(out.records.size()) == n) break;
  }
  out.index();
  return out;
}

bool stores_equal(const model::ParamStore& a, const model::ParamStore& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || t != it->second) return false;
  }
  return true;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("mdvae_train_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST(VariantTable, ExhaustiveAndRoundTrips) {
  for (const auto& [name, v] : train::variant_names()) {
    EXPECT_EQ(train::to_string(v), name);
    EXPECT_EQ(train::variant_from_string(name), v);
  }
  EXPECT_THROW(train::variant_from_string("md_col_dif"), std::invalid_argument);

  auto spec = train::variant_spec(Variant::kMdDifCol);
  EXPECT_EQ(spec.latent, model::LatentMode::kPerDecoder);
  EXPECT_EQ(spec.recon, train::ReconKind::kInterpolated);
  EXPECT_EQ(spec.schedule, losses::BetaSchedule::kController);

  auto sd = train::variant_spec(Variant::kSdDifCol);
  EXPECT_EQ(sd.latent_draws, 3);
  EXPECT_EQ(sd.recon, train::ReconKind::kCollaborative);

  auto base = train::variant_spec(Variant::kBase);
  EXPECT_EQ(base.schedule, losses::BetaSchedule::kAnneal);
  EXPECT_EQ(base.latent, model::LatentMode::kShared);
}

TEST(AdamUpdate, MatchesHandComputedStep) {
  // [DERIVED] one Adam step computed by hand for scalar p=1, g=0.5:
  // m1 = 0.1*0.5 = 0.05 ; v1 = 0.001*0.25 = 0.00025
  // mhat = 0.05/0.1 = 0.5 ; vhat = 0.00025/0.001 = 0.25
  // p -= lr * 0.5/(0.5 + eps)
  TrainConfig tc = tiny_train(Variant::kMd);
  tc.lr = 0.001;
  TrainState st = train::init_state(tc, tiny_model(2));
  st.params.tensors.clear();
  st.params.tensors["p"] = Mat::Ones(1, 1);
  st.step = 1;  // train_step increments before the update
  std::map<std::string, Mat> grads{{"p", 0.5 * Mat::Ones(1, 1)}};
  train::detail::adam_update(st, tc, grads);
  double expected = 1.0 - 0.001 * 0.5 / (0.5 + tc.adam_eps);
  EXPECT_NEAR(st.params.at("p")(0, 0), expected, 1e-15);
}

TEST(ClipGlobalNorm, ScalesOnlyWhenAboveLimit) {
  std::map<std::string, Mat> g{{"a", 3.0 * Mat::Ones(1, 1)},
                               {"b", 4.0 * Mat::Ones(1, 1)}};
  auto g2 = g;
  train::detail::clip_global_norm(g2, 10.0);  // norm 5 < 10: untouched
  EXPECT_EQ(g2.at("a"), g.at("a"));
  train::detail::clip_global_norm(g, 1.0);  // norm 5 -> rescale by 1/5
  EXPECT_NEAR(g.at("a")(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(g.at("b")(0, 0), 0.8, 1e-12);
}

// variant=controlvae equals variant=md with K=1 bit-for-bit under shared seed.
TEST(TrainStep, ControlVaeEqualsMdK1BitForBit) {
  auto corpus = short_corpus(12, 3);
  auto stats = data::compute_stats(corpus);

  auto run = [&](Variant v, const std::string& ckpt) {
    TrainConfig tc = tiny_train(v, 11);
    model::ModelConfig mc = tiny_model(1);
    TrainState st = train::init_state(tc, mc);
    for (int i = 0; i < 6; ++i) train::run_epoch(st, tc, corpus, stats);
    checkpoint::save(ckpt, train::to_checkpoint(st));
    return st;
  };
  TempDir dir;
  std::string ca = (dir.path / "a.bin").string();
  std::string cb = (dir.path / "b.bin").string();
  TrainState a = run(Variant::kControlVae, ca);
  TrainState b = run(Variant::kMd, cb);

  EXPECT_TRUE(stores_equal(a.params, b.params));
  EXPECT_EQ(a.step, b.step);
  EXPECT_EQ(a.controller.beta(), b.controller.beta());
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].l_recon, b.history[i].l_recon) << i;
    EXPECT_EQ(a.history[i].total, b.history[i].total) << i;
  }
  // checkpoints are byte-identical (no variant metadata inside)
  std::ifstream fa(ca, std::ios::binary), fb(cb, std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(fa)), {});
  std::string bb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(ba, bb);
  EXPECT_FALSE(ba.empty());
}

// [DERIVED] smoke-run oracle: loss on a fixed batch decreases over 200 steps
// for every variant.
TEST(TrainStep, LossDecreasesForEveryVariant) {
  auto corpus = short_corpus(4, 9);
  auto stats = data::compute_stats(corpus);
  model::Batch batch = batching::make_batch(corpus.records, stats);
  for (const auto& [name, v] : train::variant_names()) {
    TrainConfig tc = tiny_train(v, 17);
    TrainState st = train::init_state(tc, tiny_model(2));
    double first = 0, last = 0;
    for (int i = 0; i < 200; ++i) {
      auto s = train::train_step(st, tc, batch);
      if (i < 10) first += s.l_recon;
      if (i >= 190) last += s.l_recon;
    }
    EXPECT_LT(last, first) << name;
  }
}

TEST(TrainStep, NonFiniteLossAborts) {
  auto corpus = short_corpus(4, 13);
  auto stats = data::compute_stats(corpus);
  model::Batch batch = batching::make_batch(corpus.records, stats);
  TrainConfig tc = tiny_train(Variant::kMd);
  TrainState st = train::init_state(tc, tiny_model(2));
  st.params.at("encoder.mu.w").setConstant(
      std::numeric_limits<double>::quiet_NaN());
  try {
    train::train_step(st, tc, batch);
    FAIL() << "expected TrainError";
  } catch (const train::TrainError& e) {
    EXPECT_NE(std::string(e.what()).find("NON_FINITE_LOSS"),
              std::string::npos);
  }
}

// resume-from-checkpoint mid-run reproduces the uninterrupted trajectory.
TEST(Resume, ReproducesUninterruptedTrajectory) {
  auto corpus = short_corpus(12, 21);
  auto stats = data::compute_stats(corpus);
  TrainConfig tc = tiny_train(Variant::kMdDifCol, 23);
  model::ModelConfig mc = tiny_model(2);

  TrainState full = train::init_state(tc, mc);
  for (int e = 0; e < 4; ++e) train::run_epoch(full, tc, corpus, stats);

  TempDir dir;
  std::string path = (dir.path / "mid.bin").string();
  TrainState half = train::init_state(tc, mc);
  for (int e = 0; e < 2; ++e) train::run_epoch(half, tc, corpus, stats);
  checkpoint::save(path, train::to_checkpoint(half));

  TrainState resumed = train::state_from_checkpoint(tc, checkpoint::load(path));
  std::vector<train::StepStats> tail;
  for (int e = 0; e < 2; ++e) {
    auto s = train::run_epoch(resumed, tc, corpus, stats);
    tail.insert(tail.end(), s.begin(), s.end());
  }
  ASSERT_EQ(full.history.size(), half.history.size() + tail.size());
  for (std::size_t i = 0; i < tail.size(); ++i) {
    EXPECT_NEAR(tail[i].total, full.history[half.history.size() + i].total,
                1e-9)
        << i;
  }
  EXPECT_TRUE(stores_equal(resumed.params, full.params));
  EXPECT_EQ(resumed.step, full.step);
}

TEST(Checkpoint, LosslessRoundTripAndErrors) {
  TrainConfig tc = tiny_train(Variant::kMdDif, 29);
  TrainState st = train::init_state(tc, tiny_model(3));
  auto corpus = short_corpus(6, 31);
  auto stats = data::compute_stats(corpus);
  train::run_epoch(st, tc, corpus, stats);

  TempDir dir;
  std::string path = (dir.path / "ck.bin").string();
  checkpoint::save(path, train::to_checkpoint(st));
  auto ck = checkpoint::load(path);
  EXPECT_EQ(ck.step, st.step);
  EXPECT_EQ(ck.config.K, st.cfg.K);
  EXPECT_EQ(ck.config.decoder_widths, st.cfg.decoder_widths);
  EXPECT_TRUE(stores_equal(ck.params, st.params));
  EXPECT_EQ(ck.adam_m, st.adam_m);
  EXPECT_EQ(ck.adam_v, st.adam_v);
  EXPECT_EQ(ck.rng_states.at("latent"), st.latent_rng.serialize());
  // no stray temp file after the atomic rename
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));

  EXPECT_THROW(checkpoint::load((dir.path / "missing.bin").string()),
               checkpoint::CheckpointError);
  std::ofstream bad((dir.path / "bad.bin").string(), std::ios::binary);
  bad << "notacheckpoint";
  bad.close();
  EXPECT_THROW(checkpoint::load((dir.path / "bad.bin").string()),
               checkpoint::CheckpointError);
}

TEST(Fit, DeterministicLoggingAndFinalCheckpoint) {
  auto corpus = short_corpus(12, 37);
  auto stats = data::compute_stats(corpus);
  TempDir dir;
  TrainConfig tc = tiny_train(Variant::kMdCol, 41);
  tc.epochs = 3;
  tc.checkpoint_dir = dir.path.string();
  tc.log_path = (dir.path / "log.csv").string();
  tc.kld_probe_molecules = 4;

  std::vector<train::EpochLog> logs;
  TrainState a = train::fit(tc, tiny_model(2), corpus, stats, &logs);
  ASSERT_EQ(logs.size(), 3u);
  EXPECT_TRUE(logs[0].inter_kld.has_value());  // K=2 logs the probe
  EXPECT_TRUE(std::filesystem::exists(dir.path / "final.bin"));

  std::ifstream log(tc.log_path);
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,epoch,variant,l_recon,l_reg,beta,inter_kld");
  int rows = 0;
  for (std::string line; std::getline(log, line);) {
    EXPECT_NE(line.find(",md_col,"), std::string::npos);
    ++rows;
  }
  EXPECT_EQ(rows, 3);

  // same seed, fresh run: identical final loss
  TrainConfig tc2 = tc;
  tc2.checkpoint_dir.clear();
  tc2.log_path.clear();
  TrainState b = train::fit(tc2, tiny_model(2), corpus, stats);
  EXPECT_EQ(a.history.back().total, b.history.back().total);
}
