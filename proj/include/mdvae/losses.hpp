// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdvae/autodiff.hpp"
#include "mdvae/model.hpp"

namespace mdvae::losses {

using ad::Mat;
using ad::Tape;
using ad::Var;

enum class BetaSchedule { kAnneal, kController };

struct LossConfig {
  double alpha = 0.5;        // interpolation weight of the collaborative term
  double kld_target = 15.0;  // regularizer setpoint
  BetaSchedule schedule = BetaSchedule::kController;
  double kp = 0.01;
  double ki = 0.0001;
  long anneal_steps = 1000;
  double ema_decay = 0.99;
};

// Next-token targets and mask for a framed batch: position t predicts the
// token at t+1; rows past the last real token are masked out.
struct TargetLayout {
  std::vector<int> targets;  // B*L ids (PAD where masked)
  Mat mask;                  // (B*L) x 1 of 0/1
};

inline TargetLayout shifted_targets(const model::Batch& batch, int pad_id) {
  TargetLayout out;
  out.targets.assign(batch.B * batch.L, pad_id);
  out.mask = Mat::Zero(batch.B * batch.L, 1);
  for (int b = 0; b < batch.B; ++b) {
    for (int t = 0; t + 1 < batch.lens[b]; ++t) {
      int row = b * batch.L + t;
      out.targets[row] = batch.tokens[row + 1];
      out.mask(row, 0) = 1.0;
    }
  }
  return out;
}

// Per-decoder reconstruction loss: negative log-likelihood summed over
// non-PAD token positions, averaged over the batch.
inline Var recon_loss_individual(Tape& t, Var logits, const TargetLayout& tl,
                                 int B) {
  Var lp = t.select_log_softmax(logits, tl.targets);
  Var masked = t.mul(lp, t.constant(tl.mask));
  return t.scale(t.sum(masked), -1.0 / B);
}

// -log((1/K) sum_k p_k) per token position via log-mean-exp over decoders'
// per-token log-probabilities, summed over positions, averaged over batch.
inline Var recon_loss_collaborative(Tape& t, const std::vector<Var>& logit_sets,
                                    const TargetLayout& tl, int B) {
  if (logit_sets.empty()) throw std::invalid_argument("need K >= 1 logit sets");
  std::vector<Var> per_decoder;
  per_decoder.reserve(logit_sets.size());
  for (Var logits : logit_sets)
    per_decoder.push_back(t.select_log_softmax(logits, tl.targets));
  Var stacked = t.concat_cols(per_decoder);
  Var lme = t.add_scalar(t.logsumexp_rows(stacked),
                         -std::log(static_cast<double>(logit_sets.size())));
  Var masked = t.mul(lme, t.constant(tl.mask));
  return t.scale(t.sum(masked), -1.0 / B);
}

// alpha * collaborative + (1 - alpha)/K * sum_k individual
inline Var recon_loss_md(Tape& t, const std::vector<Var>& logit_sets,
                         const TargetLayout& tl, int B, double alpha) {
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("alpha must be in [0,1]");
  const int K = static_cast<int>(logit_sets.size());
  Var col = recon_loss_collaborative(t, logit_sets, tl, B);
  Var acc = recon_loss_individual(t, logit_sets[0], tl, B);
  for (int k = 1; k < K; ++k)
    acc = t.add(acc, recon_loss_individual(t, logit_sets[k], tl, B));
  return t.add(t.scale(col, alpha), t.scale(acc, (1.0 - alpha) / K));
}

// Closed-form KLD(q || N(0,I)) = 0.5 sum_d (mu^2 + sigma^2 - 2 log sigma - 1),
// averaged over the batch.
inline Var kld_regularizer(Tape& t, const model::EncoderOutput& enc, int B) {
  Var mu2 = t.mul(enc.mu, enc.mu);
  Var sigma2 = t.exp_(t.scale(enc.log_sigma, 2.0));
  Var inner = t.add_scalar(
      t.sub(t.add(mu2, sigma2), t.scale(enc.log_sigma, 2.0)), -1.0);
  return t.scale(t.sum(inner), 0.5 / B);
}

inline Var total_loss(Tape& t, Var recon, Var kld, double beta) {
  return t.add(recon, t.scale(kld, beta));
}

// PI feedback keeping the observed regularizer at the setpoint: when the
// (EMA-smoothed) KLD sits above target the weight rises, below target it
// falls. Output clamped to [0, 1].
class BetaController {
 public:
  explicit BetaController(const LossConfig& cfg)
      : target_(cfg.kld_target), kp_(cfg.kp), ki_(cfg.ki),
        ema_decay_(cfg.ema_decay) {}

  double step(double observed_kld) {
    if (!have_ema_) {
      ema_ = observed_kld;
      have_ema_ = true;
    } else {
      ema_ = ema_decay_ * ema_ + (1.0 - ema_decay_) * observed_kld;
    }
    double err = ema_ - target_;
    // Anti-windup (conditional integration): freeze the accumulator while
    // the output is saturated and the error would push it further out of
    // range, so beta reacts as soon as the KLD crosses back over the target.
    double tentative = sigmoid(kp_ * err) + ki_ * (integral_ + err);
    bool winding_up = (tentative > 1.0 && err > 0) || (tentative < 0.0 && err < 0);
    if (!winding_up) integral_ += err;
    double raw = sigmoid(kp_ * err) + ki_ * integral_;
    beta_ = std::clamp(raw, 0.0, 1.0);
    return beta_;
  }

  double beta() const { return beta_; }
  double smoothed_kld() const { return ema_; }

  // checkpoint plumbing
  double integral() const { return integral_; }
  double ema() const { return ema_; }
  bool have_ema() const { return have_ema_; }
  void restore(double beta, double integral, double ema, bool have_ema) {
    beta_ = beta;
    integral_ = integral;
    ema_ = ema;
    have_ema_ = have_ema;
  }

 private:
  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  double target_;
  double kp_;
  double ki_;
  double ema_decay_;
  double beta_ = 0.5;
  double integral_ = 0;
  double ema_ = 0;
  bool have_ema_ = false;
};

// Linear ramp 0 -> 1 over anneal_steps, then 1.
inline double k_anneal_beta(long step, long anneal_steps) {
  if (anneal_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / anneal_steps);
}

}  // namespace mdvae::losses
