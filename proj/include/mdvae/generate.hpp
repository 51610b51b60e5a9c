// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdvae/model.hpp"
#include "mdvae/smiles.hpp"

namespace mdvae::generate {

using ad::Mat;
using ad::Tape;
using ad::Var;

enum class DecodeRule { kGreedy, kMultinomial };
enum class EnsembleSpace { kPreSoftmax, kPostSoftmax };

struct SamplerConfig {
  int max_len = 120;
  DecodeRule rule = DecodeRule::kMultinomial;
  double temperature = 1.0;
  EnsembleSpace space = EnsembleSpace::kPreSoftmax;

  void validate() const {
    if (temperature <= 0) throw std::invalid_argument("temperature must be > 0");
  }
};

// Next-token distribution from K decoders' logits: average either the
// temperature-scaled logits before the softmax, or the softmax outputs.
inline Eigen::VectorXd ensemble_step(const std::vector<Eigen::VectorXd>& logit_sets,
                                     const SamplerConfig& cfg) {
  if (logit_sets.empty()) throw std::invalid_argument("need K >= 1 logit sets");
  cfg.validate();
  const int V = static_cast<int>(logit_sets[0].size());
  auto softmax = [](const Eigen::VectorXd& x) {
    Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
    return Eigen::VectorXd(e / e.sum());
  };
  if (cfg.space == EnsembleSpace::kPreSoftmax) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(V);
    for (const auto& l : logit_sets) mean += l;
    mean /= static_cast<double>(logit_sets.size());
    return softmax(mean / cfg.temperature);
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(V);
  for (const auto& l : logit_sets) mean += softmax(l / cfg.temperature);
  mean /= static_cast<double>(logit_sets.size());
  return mean;
}

inline int pick_token(const Eigen::VectorXd& dist, DecodeRule rule, RngStream& rng) {
  if (rule == DecodeRule::kGreedy) {
    int best = 0;
    dist.maxCoeff(&best);
    return best;
  }
  double u = rng.uniform();
  double acc = 0;
  for (int i = 0; i < dist.size(); ++i) {
    acc += dist[i];
    if (u < acc) return i;
  }
  return static_cast<int>(dist.size()) - 1;
}

struct GeneratedSample {
  std::string smiles;
  bool terminated = false;  // saw EOS before hitting max_len
};

namespace detail {

// Ensemble next-token logits for a given prefix (one example), all decoders
// conditioned on their slot's latent.
inline std::vector<Eigen::VectorXd> prefix_logits(
    const model::ModelConfig& cfg, model::ParamStore& params,
    const std::vector<Mat>& latents, const Eigen::Vector3d& cond,
    const std::vector<int>& prefix) {
  Tape t;
  model::TapeParams p(t, params, false);
  model::Batch batch;
  batch.B = 1;
  batch.L = static_cast<int>(prefix.size());
  batch.tokens = prefix;
  batch.lens = {batch.L};
  batch.cond = cond.transpose();
  std::vector<Eigen::VectorXd> out;
  out.reserve(cfg.K);
  for (int k = 0; k < cfg.K; ++k) {
    Var logits =
        model::decode_logits(t, p, cfg, k, t.constant(latents[k]), batch);
    out.push_back(t.val(logits).row(batch.L - 1).transpose());
  }
  return out;
}

}  // namespace detail

// Samples one molecule from the prior: z_k ~ N(0, I) per decoder slot (or a
// single shared draw), then autoregressive ensemble decoding from BOS until
// EOS or the length cap. `cond` is the normalized condition vector.
inline GeneratedSample sample_from_prior(const model::ModelConfig& cfg,
                                         model::ParamStore& params,
                                         const Eigen::Vector3d& cond,
                                         const SamplerConfig& sampler,
                                         bool shared_z, RngStream& rng) {
  sampler.validate();
  const auto& vocab = smiles::Vocabulary::instance();
  std::vector<Mat> latents;
  auto draw = [&] {
    Mat z(1, cfg.d_z);
    for (int d = 0; d < cfg.d_z; ++d) z(0, d) = rng.normal();
    return z;
  };
  if (shared_z) {
    Mat z = draw();
    latents.assign(cfg.K, z);
  } else {
    for (int k = 0; k < cfg.K; ++k) latents.push_back(draw());
  }

  std::vector<int> prefix{vocab.bos()};
  GeneratedSample out;
  while (static_cast<int>(prefix.size()) - 1 < sampler.max_len) {
    auto logits = detail::prefix_logits(cfg, params, latents, cond, prefix);
    Eigen::VectorXd dist = ensemble_step(logits, sampler);
    int tok = pick_token(dist, sampler.rule, rng);
    if (tok == vocab.eos()) {
      out.terminated = true;
      break;
    }
    prefix.push_back(tok);
  }
  smiles::TokenSeq seq;
  seq.ids.assign(prefix.begin() + 1, prefix.end());
  out.smiles = smiles::detokenize(seq);
  return out;
}

struct TeacherForcedResult {
  std::vector<bool> exact_match;          // per example
  std::vector<std::vector<int>> predicted;  // per example, per position
  long correct_tokens = 0;
  long total_tokens = 0;

  double token_accuracy() const {
    return total_tokens == 0 ? 0.0
                             : static_cast<double>(correct_tokens) / total_tokens;
  }
};

// Teacher-forced reconstruction: z = mu (no reparameterization), every
// position predicted from the true prefix by the greedy ensemble argmax.
inline TeacherForcedResult reconstruct_teacher_forced(
    const model::ModelConfig& cfg, model::ParamStore& params,
    const model::Batch& batch,
    EnsembleSpace space = EnsembleSpace::kPreSoftmax) {
  Tape t;
  model::TapeParams p(t, params, false);
  auto enc = model::encode(t, p, cfg, batch);
  RngStream unused(0, "unused");
  auto latents = model::sample_latents(t, enc, model::LatentMode::kDeterministic,
                                       cfg.K, unused);
  std::vector<const Mat*> logit_sets;
  for (int k = 0; k < cfg.K; ++k)
    logit_sets.push_back(
        &t.val(model::decode_logits(t, p, cfg, k, latents[k], batch)));

  SamplerConfig step_cfg;
  step_cfg.space = space;
  TeacherForcedResult res;
  for (int b = 0; b < batch.B; ++b) {
    std::vector<int> pred;
    bool all_correct = true;
    for (int pos = 0; pos + 1 < batch.lens[b]; ++pos) {
      int row = b * batch.L + pos;
      std::vector<Eigen::VectorXd> logits;
      logits.reserve(cfg.K);
      for (const Mat* m : logit_sets)
        logits.push_back(m->row(row).transpose());
      Eigen::VectorXd dist = ensemble_step(logits, step_cfg);
      int tok = 0;
      dist.maxCoeff(&tok);
      pred.push_back(tok);
      int truth = batch.tokens[row + 1];
      ++res.total_tokens;
      if (tok == truth)
        ++res.correct_tokens;
      else
        all_correct = false;
    }
    res.exact_match.push_back(all_correct);
    res.predicted.push_back(std::move(pred));
  }
  return res;
}

}  // namespace mdvae::generate
