// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>

#include "mdvae/autodiff.hpp"

namespace mdvae::test {

// Central finite differences against the analytic gradient of a scalar
// function of one matrix input. Returns the maximum relative error over
// entries; relative error uses max(|a|, |n|, floor) as denominator.
inline double max_rel_grad_error(
    const ad::Mat& x0,
    const std::function<ad::Var(ad::Tape&, ad::Var)>& fn, double h = 1e-5,
    double floor = 1e-6) {
  ad::Mat analytic;
  {
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var loss = fn(tape, x);
    tape.backward(loss);
    analytic = tape.grad(x);
  }
  double worst = 0;
  for (int r = 0; r < x0.rows(); ++r) {
    for (int c = 0; c < x0.cols(); ++c) {
      auto eval = [&](double delta) {
        ad::Mat xp = x0;
        xp(r, c) += delta;
        ad::Tape tape;
        ad::Var x = tape.leaf(xp, false);
        return tape.val(fn(tape, x))(0, 0);
      };
      double numeric = (eval(h) - eval(-h)) / (2 * h);
      double a = analytic(r, c);
      double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mdvae::test
