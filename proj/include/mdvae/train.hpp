// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdvae/batching.hpp"
#include "mdvae/checkpoint.hpp"
#include "mdvae/data.hpp"
#include "mdvae/eval.hpp"
#include "mdvae/losses.hpp"
#include "mdvae/model.hpp"

namespace mdvae::train {

using ad::Mat;
using ad::Tape;
using ad::Var;

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant {
  kBase,
  kControlVae,
  kSdDifCol,
  kMd,
  kMdCol,
  kMdDif,
  kMdDifCol,
};

inline const std::vector<std::pair<std::string, Variant>>& variant_names() {
  static const std::vector<std::pair<std::string, Variant>> names = {
      {"base", Variant::kBase},       {"controlvae", Variant::kControlVae},
      {"sd_dif_col", Variant::kSdDifCol}, {"md", Variant::kMd},
      {"md_col", Variant::kMdCol},    {"md_dif", Variant::kMdDif},
      {"md_dif_col", Variant::kMdDifCol}};
  return names;
}

inline std::string to_string(Variant v) {
  for (const auto& [name, var] : variant_names())
    if (var == v) return name;
  throw std::invalid_argument("unknown variant");
}

inline Variant variant_from_string(const std::string& s) {
  for (const auto& [name, var] : variant_names())
    if (name == s) return var;
  throw std::invalid_argument("unknown variant: " + s);
}

enum class ReconKind { kIndividualMean, kCollaborative, kInterpolated };

// Each variant is exactly one (latent mode, reconstruction objective,
// beta schedule) triple. sd_dif_col runs one decoder over `latent_draws`
// independent z draws with collaborative aggregation across the draws.
struct VariantSpec {
  model::LatentMode latent;
  ReconKind recon;
  losses::BetaSchedule schedule;
  int latent_draws = 0;  // 0 = one evaluation per decoder slot
};

inline VariantSpec variant_spec(Variant v) {
  using model::LatentMode;
  using losses::BetaSchedule;
  switch (v) {
    case Variant::kBase:
      return {LatentMode::kShared, ReconKind::kIndividualMean,
              BetaSchedule::kAnneal};
    case Variant::kControlVae:
      return {LatentMode::kShared, ReconKind::kIndividualMean,
              BetaSchedule::kController};
    case Variant::kSdDifCol:
      return {LatentMode::kPerDecoder, ReconKind::kCollaborative,
              BetaSchedule::kController, 3};
    case Variant::kMd:
      return {LatentMode::kShared, ReconKind::kIndividualMean,
              BetaSchedule::kController};
    case Variant::kMdCol:
      return {LatentMode::kShared, ReconKind::kCollaborative,
              BetaSchedule::kController};
    case Variant::kMdDif:
      return {LatentMode::kPerDecoder, ReconKind::kIndividualMean,
              BetaSchedule::kController};
    case Variant::kMdDifCol:
      return {LatentMode::kPerDecoder, ReconKind::kInterpolated,
              BetaSchedule::kController};
  }
  throw std::invalid_argument("unknown variant");
}

struct TrainConfig {
  Variant variant = Variant::kMdDifCol;
  int epochs = 100;
  int batch_size = 128;
  double lr = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
  std::string checkpoint_dir;
  std::string log_path;      // append-only metrics CSV; empty disables
  double clip_norm = 5.0;    // global-norm gradient clip
  int kld_probe_molecules = 32;  // per-epoch inter-decoder KLD sample
  losses::LossConfig loss;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("lr must be > 0");
  }
};

struct StepStats {
  double l_recon = 0;
  double l_reg = 0;
  double beta = 0;
  double total = 0;
};

struct TrainState {
  model::ModelConfig cfg;
  model::ParamStore params;
  std::map<std::string, Mat> adam_m, adam_v;
  std::uint64_t step = 0;
  losses::BetaController controller;
  RngStream latent_rng;
  RngStream data_rng;
  std::vector<StepStats> history;
};

inline TrainState init_state(const TrainConfig& tc,
                             const model::ModelConfig& mc) {
  tc.validate();
  model::ModelConfig cfg = mc;
  if (tc.variant == Variant::kBase || tc.variant == Variant::kControlVae ||
      tc.variant == Variant::kSdDifCol) {
    cfg.K = 1;
    cfg.decoder_widths.clear();
  }
  cfg = model::finalize(cfg);
  return TrainState{cfg,
                    model::init_params(cfg, tc.seed),
                    {},
                    {},
                    0,
                    losses::BetaController(tc.loss),
                    RngStream(tc.seed, "latent"),
                    RngStream(tc.seed, "data"),
                    {}};
}

namespace detail {

inline void clip_global_norm(std::map<std::string, Mat>& grads, double limit) {
  if (limit <= 0) return;
  double sq = 0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  double norm = std::sqrt(sq);
  if (norm > limit) {
    double s = limit / norm;
    for (auto& [name, g] : grads) g *= s;
  }
}

inline void adam_update(TrainState& st, const TrainConfig& tc,
                        const std::map<std::string, Mat>& grads) {
  const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
  const auto t = static_cast<double>(st.step);
  for (const auto& [name, g] : grads) {
    Mat& m = st.adam_m.try_emplace(name, Mat::Zero(g.rows(), g.cols()))
                 .first->second;
    Mat& v = st.adam_v.try_emplace(name, Mat::Zero(g.rows(), g.cols()))
                 .first->second;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    Mat mhat = m / (1 - std::pow(b1, t));
    Mat vhat = v / (1 - std::pow(b2, t));
    st.params.at(name).array() -=
        tc.lr * mhat.array() / (vhat.array().sqrt() + tc.adam_eps);
  }
}

}  // namespace detail

inline StepStats train_step(TrainState& st, const TrainConfig& tc,
                            const model::Batch& batch) {
  const VariantSpec spec = variant_spec(tc.variant);
  Tape t;
  model::TapeParams p(t, st.params, true);

  auto enc = model::encode(t, p, st.cfg, batch);
  const int slots = spec.latent_draws > 0 ? spec.latent_draws : st.cfg.K;
  auto latents =
      model::sample_latents(t, enc, spec.latent, slots, st.latent_rng);

  std::vector<Var> logit_sets;
  logit_sets.reserve(slots);
  for (int s = 0; s < slots; ++s) {
    int k = spec.latent_draws > 0 ? 0 : s;  // sd_dif_col reuses decoder 0
    logit_sets.push_back(
        model::decode_logits(t, p, st.cfg, k, latents[s], batch));
  }

  auto tl = losses::shifted_targets(batch, smiles::Vocabulary::instance().pad());
  Var recon = [&] {
    switch (spec.recon) {
      case ReconKind::kCollaborative:
        return losses::recon_loss_collaborative(t, logit_sets, tl, batch.B);
      case ReconKind::kInterpolated:
        return losses::recon_loss_md(t, logit_sets, tl, batch.B,
                                     tc.loss.alpha);
      case ReconKind::kIndividualMean:
      default: {
        Var acc = losses::recon_loss_individual(t, logit_sets[0], tl, batch.B);
        for (std::size_t s = 1; s < logit_sets.size(); ++s)
          acc = t.add(acc,
                      losses::recon_loss_individual(t, logit_sets[s], tl,
                                                    batch.B));
        return t.scale(acc, 1.0 / logit_sets.size());
      }
    }
  }();
  Var kld = losses::kld_regularizer(t, enc, batch.B);

  StepStats stats;
  stats.l_recon = t.val(recon)(0, 0);
  stats.l_reg = t.val(kld)(0, 0);
  stats.beta = spec.schedule == losses::BetaSchedule::kAnneal
                   ? losses::k_anneal_beta(static_cast<long>(st.step),
                                           tc.loss.anneal_steps)
                   : st.controller.step(stats.l_reg);
  if (!std::isfinite(stats.l_recon) || !std::isfinite(stats.l_reg)) {
    std::ostringstream os;
    os << "NON_FINITE_LOSS at step " << st.step << ": l_recon="
       << stats.l_recon << " l_reg=" << stats.l_reg << " beta=" << stats.beta
       << " B=" << batch.B << " L=" << batch.L;
    throw TrainError(os.str());
  }

  Var total = losses::total_loss(t, recon, kld, stats.beta);
  stats.total = t.val(total)(0, 0);
  t.backward(total);
  auto grads = p.collect_grads();
  detail::clip_global_norm(grads, tc.clip_norm);
  ++st.step;
  detail::adam_update(st, tc, grads);
  st.history.push_back(stats);
  return stats;
}

inline checkpoint::Checkpoint to_checkpoint(const TrainState& st) {
  checkpoint::Checkpoint ck;
  ck.config = st.cfg;
  ck.step = st.step;
  ck.params = st.params;
  ck.adam_m = st.adam_m;
  ck.adam_v = st.adam_v;
  ck.has_controller = true;
  ck.ctrl_beta = st.controller.beta();
  ck.ctrl_integral = st.controller.integral();
  ck.ctrl_ema = st.controller.ema();
  ck.ctrl_have_ema = st.controller.have_ema();
  ck.rng_states["latent"] = st.latent_rng.serialize();
  ck.rng_states["data"] = st.data_rng.serialize();
  return ck;
}

inline TrainState state_from_checkpoint(const TrainConfig& tc,
                                        const checkpoint::Checkpoint& ck) {
  TrainState st{ck.config,
                ck.params,
                ck.adam_m,
                ck.adam_v,
                ck.step,
                losses::BetaController(tc.loss),
                RngStream(tc.seed, "latent"),
                RngStream(tc.seed, "data"),
                {}};
  if (ck.has_controller)
    st.controller.restore(ck.ctrl_beta, ck.ctrl_integral, ck.ctrl_ema,
                          ck.ctrl_have_ema);
  if (auto it = ck.rng_states.find("latent"); it != ck.rng_states.end())
    st.latent_rng.deserialize(it->second);
  if (auto it = ck.rng_states.find("data"); it != ck.rng_states.end())
    st.data_rng.deserialize(it->second);
  return st;
}

// One pass over the corpus in seeded shuffled order; returns per-step stats.
// Exposed separately so callers can interleave evaluation between epochs.
inline std::vector<StepStats> run_epoch(TrainState& st, const TrainConfig& tc,
                                        const data::Corpus& corpus,
                                        const data::ConditionStats& stats) {
  std::vector<int> order(corpus.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), st.data_rng.engine());
  std::vector<StepStats> out;
  for (std::size_t i = 0; i < order.size(); i += tc.batch_size) {
    std::vector<data::Record> chunk;
    for (std::size_t j = i; j < std::min(order.size(), i + tc.batch_size); ++j)
      chunk.push_back(corpus.records[order[j]]);
    model::Batch b = batching::make_batch(chunk, stats);
    out.push_back(train_step(st, tc, b));
    if (tc.checkpoint_every > 0 && !tc.checkpoint_dir.empty() &&
        st.step % tc.checkpoint_every == 0)
      checkpoint::save(
          tc.checkpoint_dir + "/ckpt_" + std::to_string(st.step) + ".bin",
          to_checkpoint(st));
  }
  return out;
}

struct EpochLog {
  int epoch = 0;
  std::uint64_t step = 0;
  double l_recon = 0, l_reg = 0, beta = 0;
  std::optional<double> inter_kld;
};

inline TrainState fit(const TrainConfig& tc, const model::ModelConfig& mc,
                      const data::Corpus& corpus,
                      const data::ConditionStats& stats,
                      std::vector<EpochLog>* epoch_logs = nullptr) {
  tc.validate();
  if (corpus.records.empty()) throw data::DataError("EMPTY_CORPUS");
  TrainState st = init_state(tc, mc);

  std::ofstream log;
  if (!tc.log_path.empty()) {
    bool fresh = !std::ifstream(tc.log_path).good();
    log.open(tc.log_path, std::ios::app);
    if (!log) throw TrainError("cannot open log " + tc.log_path);
    if (fresh) log << "step,epoch,variant,l_recon,l_reg,beta,inter_kld\n";
  }

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto steps = run_epoch(st, tc, corpus, stats);
    double recon = 0, reg = 0;
    for (const auto& s : steps) {
      recon += s.l_recon;
      reg += s.l_reg;
    }
    recon /= steps.size();
    reg /= steps.size();

    EpochLog el;
    el.epoch = epoch;
    el.step = st.step;
    el.l_recon = recon;
    el.l_reg = reg;
    el.beta = steps.back().beta;
    if (st.cfg.K >= 2 && tc.kld_probe_molecules > 0) {
      std::vector<data::Record> probe(
          corpus.records.begin(),
          corpus.records.begin() +
              std::min<std::size_t>(corpus.records.size(),
                                    tc.kld_probe_molecules));
      el.inter_kld =
          eval::inter_decoder_kld(batching::make_batch(probe, stats), st.cfg,
                                  st.params);
    }
    if (epoch_logs) epoch_logs->push_back(el);
    if (log.is_open()) {
      log << el.step << ',' << el.epoch << ',' << to_string(tc.variant) << ','
          << el.l_recon << ',' << el.l_reg << ',' << el.beta << ',';
      if (el.inter_kld) log << *el.inter_kld;
      log << '\n' << std::flush;
    }
  }
  if (!tc.checkpoint_dir.empty())
    checkpoint::save(tc.checkpoint_dir + "/final.bin", to_checkpoint(st));
  return st;
}

}  // namespace mdvae::train
