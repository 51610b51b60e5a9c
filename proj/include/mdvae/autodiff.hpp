// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <deque>
#include <memory>
#include <string>
#include <vector>

namespace mdvae::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode autodiff over a tape of matrix nodes. One tape per training
// step; nodes are created by the op builders below and freed wholesale when
// the tape is destroyed.
class Tape {
 public:
  struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  const Mat& val(Var v) const { return nodes_[v.i].val; }

  Mat& grad(Var v) {
    Node& n = nodes_[v.i];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.i].grad.size() != 0; }

  Var leaf(Mat v, bool needs_grad = true) {
    return push(std::move(v), needs_grad, nullptr);
  }

  Var constant(Mat v) { return leaf(std::move(v), false); }

  // ---- elementwise / linear ----

  Var matmul(Var a, Var b) {
    Mat out = nodes_[a.i].val * nodes_[b.i].val;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
      if (needs(a)) grad(a).noalias() += g * nodes_[b.i].val.transpose();
      if (needs(b)) grad(b).noalias() += nodes_[a.i].val.transpose() * g;
    });
  }

  Var add(Var a, Var b) {
    Mat out = nodes_[a.i].val + nodes_[b.i].val;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
      if (needs(a)) grad(a) += g;
      if (needs(b)) grad(b) += g;
    });
  }

  Var sub(Var a, Var b) {
    Mat out = nodes_[a.i].val - nodes_[b.i].val;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
      if (needs(a)) grad(a) += g;
      if (needs(b)) grad(b) -= g;
    });
  }

  // a: n x d, bias: 1 x d broadcast over rows
  Var add_rowvec(Var a, Var bias) {
    Mat out = nodes_[a.i].val.rowwise() + nodes_[bias.i].val.row(0);
    return push(std::move(out), needs(a) || needs(bias), [this, a, bias](const Mat& g) {
      if (needs(a)) grad(a) += g;
      if (needs(bias)) grad(bias) += g.colwise().sum();
    });
  }

  Var mul(Var a, Var b) {
    Mat out = nodes_[a.i].val.cwiseProduct(nodes_[b.i].val);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Mat& g) {
      if (needs(a)) grad(a) += g.cwiseProduct(nodes_[b.i].val);
      if (needs(b)) grad(b) += g.cwiseProduct(nodes_[a.i].val);
    });
  }

  Var scale(Var a, double s) {
    Mat out = nodes_[a.i].val * s;
    return push(std::move(out), needs(a), [this, a, s](const Mat& g) {
      if (needs(a)) grad(a) += g * s;
    });
  }

  Var add_scalar(Var a, double c) {
    Mat out = nodes_[a.i].val.array() + c;
    return push(std::move(out), needs(a), [this, a](const Mat& g) {
      if (needs(a)) grad(a) += g;
    });
  }

  Var exp_(Var a) {
    Mat out = nodes_[a.i].val.array().exp();
    Var v = push(std::move(out), needs(a), nullptr);
    nodes_[v.i].backward = [this, a, v](const Mat& g) {
      if (needs(a)) grad(a) += g.cwiseProduct(nodes_[v.i].val);
    };
    return v;
  }

  Var tanh_(Var a) {
    Mat out = nodes_[a.i].val.array().tanh();
    Var v = push(std::move(out), needs(a), nullptr);
    nodes_[v.i].backward = [this, a, v](const Mat& g) {
      if (needs(a))
        grad(a).array() += g.array() * (1.0 - nodes_[v.i].val.array().square());
    };
    return v;
  }

  // tanh-approximated GELU; smooth, so finite-difference checks stay clean
  Var gelu(Var a) {
    const double kC = 0.7978845608028654;  // sqrt(2/pi)
    const Mat& x = nodes_[a.i].val;
    Mat inner = kC * (x.array() + 0.044715 * x.array().cube());
    Mat t = inner.array().tanh();
    Mat out = 0.5 * x.array() * (1.0 + t.array());
    return push(std::move(out), needs(a), [this, a, t = std::move(t), kC](const Mat& g) {
      if (!needs(a)) return;
      const Mat& x = nodes_[a.i].val;
      auto sech2 = (1.0 - t.array().square());
      auto dinner = kC * (1.0 + 3 * 0.044715 * x.array().square());
      grad(a).array() +=
          g.array() * (0.5 * (1.0 + t.array()) + 0.5 * x.array() * sech2 * dinner);
    });
  }

  Var sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = nodes_[a.i].val.sum();
    return push(std::move(out), needs(a), [this, a](const Mat& g) {
      if (needs(a)) grad(a).array() += g(0, 0);
    });
  }

  // ---- structured ops ----

  // gather rows of `table` by index (embedding lookup)
  Var rows(Var table, std::vector<int> ids) {
    const Mat& t = nodes_[table.i].val;
    Mat out(static_cast<int>(ids.size()), t.cols());
    for (size_t r = 0; r < ids.size(); ++r) out.row(r) = t.row(ids[r]);
    return push(std::move(out), needs(table),
                [this, table, ids = std::move(ids)](const Mat& g) {
                  if (!needs(table)) return;
                  Mat& tg = grad(table);
                  for (size_t r = 0; r < ids.size(); ++r)
                    tg.row(ids[r]) += g.row(r);
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    int rows_n = static_cast<int>(nodes_[parts[0].i].val.rows());
    int cols_n = 0;
    for (Var p : parts) cols_n += static_cast<int>(nodes_[p.i].val.cols());
    Mat out(rows_n, cols_n);
    int c = 0;
    bool ng = false;
    for (Var p : parts) {
      int pc = static_cast<int>(nodes_[p.i].val.cols());
      out.middleCols(c, pc) = nodes_[p.i].val;
      c += pc;
      ng = ng || needs(p);
    }
    return push(std::move(out), ng, [this, parts](const Mat& g) {
      int c = 0;
      for (Var p : parts) {
        int pc = static_cast<int>(nodes_[p.i].val.cols());
        if (needs(p)) grad(p) += g.middleCols(c, pc);
        c += pc;
      }
    });
  }

  // B x d -> (B*times) x d, each row repeated `times` consecutive rows
  Var repeat_rows(Var a, int times) {
    const Mat& x = nodes_[a.i].val;
    Mat out(x.rows() * times, x.cols());
    for (int b = 0; b < x.rows(); ++b)
      out.middleRows(b * times, times).rowwise() = x.row(b);
    return push(std::move(out), needs(a), [this, a, times](const Mat& g) {
      if (!needs(a)) return;
      Mat& ag = grad(a);
      for (int b = 0; b < ag.rows(); ++b)
        ag.row(b) += g.middleRows(b * times, times).colwise().sum();
    });
  }

  // (B*L) x d -> B x d: mean over the first lens[b] rows of each block
  Var masked_mean_rows(Var a, std::vector<int> lens, int L) {
    const Mat& x = nodes_[a.i].val;
    int B = static_cast<int>(lens.size());
    Mat out(B, x.cols());
    for (int b = 0; b < B; ++b)
      out.row(b) =
          x.middleRows(b * L, lens[b]).colwise().sum() / static_cast<double>(lens[b]);
    return push(std::move(out), needs(a),
                [this, a, lens = std::move(lens), L](const Mat& g) {
                  if (!needs(a)) return;
                  Mat& ag = grad(a);
                  for (size_t b = 0; b < lens.size(); ++b) {
                    double inv = 1.0 / lens[b];
                    ag.middleRows(static_cast<int>(b) * L, lens[b]).rowwise() +=
                        g.row(static_cast<int>(b)) * inv;
                  }
                });
  }

  // rowwise layer norm with learnable gain/bias (both 1 x d)
  Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Mat& xv = nodes_[x.i].val;
    int n = static_cast<int>(xv.rows()), d = static_cast<int>(xv.cols());
    Mat y(n, d);
    Eigen::VectorXd inv_sigma(n);
    for (int r = 0; r < n; ++r) {
      double m = xv.row(r).mean();
      double var = (xv.row(r).array() - m).square().mean();
      double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[r] = is;
      y.row(r) = (xv.row(r).array() - m) * is;
    }
    Mat out = (y.array().rowwise() * nodes_[gain.i].val.row(0).array()).rowwise() +
              nodes_[bias.i].val.row(0).array();
    return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                [this, x, gain, bias, y = std::move(y),
                 inv_sigma = std::move(inv_sigma)](const Mat& g) {
                  int d = static_cast<int>(y.cols());
                  if (needs(gain)) grad(gain) += (g.cwiseProduct(y)).colwise().sum();
                  if (needs(bias)) grad(bias) += g.colwise().sum();
                  if (!needs(x)) return;
                  const auto& gn = nodes_[gain.i].val;
                  Mat& xg = grad(x);
                  for (int r = 0; r < y.rows(); ++r) {
                    Eigen::ArrayXd gy =
                        (g.row(r).array() * gn.row(0).array()).transpose();
                    Eigen::ArrayXd yr = y.row(r).array().transpose();
                    double mg = gy.mean();
                    double mgy = (gy * yr).mean();
                    xg.row(r).array() +=
                        (inv_sigma[r] * (gy - mg - yr * mgy)).transpose();
                  }
                  (void)d;
                });
  }

  // Fused scaled-dot-product attention over a batch of B length-L blocks.
  // q,k,v: (B*L) x dh. Keys at positions >= lens[b] are masked; with
  // `causal`, position t only attends to positions <= t.
  Var attention(Var q, Var k, Var v, int L, bool causal,
                const std::vector<int>& lens) {
    const Mat& qv = nodes_[q.i].val;
    const Mat& kv = nodes_[k.i].val;
    const Mat& vv = nodes_[v.i].val;
    int B = static_cast<int>(qv.rows()) / L;
    int dh = static_cast<int>(qv.cols());
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(B);
    Mat out(qv.rows(), vv.cols());
    for (int b = 0; b < B; ++b) {
      int len = lens[b];
      Mat s = scl * qv.middleRows(b * L, L) * kv.middleRows(b * L, L).transpose();
      for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
          if (j >= len || (causal && j > i))
            s(i, j) = -std::numeric_limits<double>::infinity();
      Mat p(L, L);
      for (int i = 0; i < L; ++i) {
        double mx = s.row(i).maxCoeff();
        Eigen::ArrayXd e = (s.row(i).array() - mx).exp();
        p.row(i) = e / e.sum();
      }
      out.middleRows(b * L, L) = p * vv.middleRows(b * L, L);
      probs->push_back(std::move(p));
    }
    return push(std::move(out), needs(q) || needs(k) || needs(v),
                [this, q, k, v, L, scl, probs](const Mat& g) {
                  const Mat& qv = nodes_[q.i].val;
                  const Mat& kv = nodes_[k.i].val;
                  const Mat& vv = nodes_[v.i].val;
                  int B = static_cast<int>(qv.rows()) / L;
                  for (int b = 0; b < B; ++b) {
                    const Mat& p = (*probs)[b];
                    Mat gb = g.middleRows(b * L, L);
                    if (needs(v))
                      grad(v).middleRows(b * L, L).noalias() += p.transpose() * gb;
                    if (!needs(q) && !needs(k)) continue;
                    Mat dp = gb * vv.middleRows(b * L, L).transpose();
                    Mat ds =
                        p.cwiseProduct(dp.colwise() -
                                       (dp.cwiseProduct(p)).rowwise().sum());
                    if (needs(q))
                      grad(q).middleRows(b * L, L).noalias() +=
                          scl * ds * kv.middleRows(b * L, L);
                    if (needs(k))
                      grad(k).middleRows(b * L, L).noalias() +=
                          scl * ds.transpose() * qv.middleRows(b * L, L);
                  }
                });
  }

  // logits: n x V -> n x 1 of log softmax(logits)[target] per row
  Var select_log_softmax(Var logits, std::vector<int> targets) {
    const Mat& lv = nodes_[logits.i].val;
    int n = static_cast<int>(lv.rows());
    auto p = std::make_shared<Mat>(n, lv.cols());
    Mat out(n, 1);
    for (int r = 0; r < n; ++r) {
      double mx = lv.row(r).maxCoeff();
      Eigen::ArrayXd e = (lv.row(r).array() - mx).exp();
      double z = e.sum();
      p->row(r) = e / z;
      out(r, 0) = lv(r, targets[r]) - mx - std::log(z);
    }
    return push(std::move(out), needs(logits),
                [this, logits, targets = std::move(targets), p](const Mat& g) {
                  if (!needs(logits)) return;
                  Mat& lg = grad(logits);
                  for (int r = 0; r < p->rows(); ++r) {
                    lg.row(r) -= g(r, 0) * p->row(r);
                    lg(r, targets[r]) += g(r, 0);
                  }
                });
  }

  // n x K -> n x 1 rowwise log-sum-exp
  Var logsumexp_rows(Var a) {
    const Mat& x = nodes_[a.i].val;
    int n = static_cast<int>(x.rows());
    auto w = std::make_shared<Mat>(n, x.cols());  // softmax weights
    Mat out(n, 1);
    for (int r = 0; r < n; ++r) {
      double mx = x.row(r).maxCoeff();
      Eigen::ArrayXd e = (x.row(r).array() - mx).exp();
      double z = e.sum();
      w->row(r) = e / z;
      out(r, 0) = mx + std::log(z);
    }
    return push(std::move(out), needs(a), [this, a, w](const Mat& g) {
      if (needs(a))
        grad(a) += (w->array().colwise() * g.col(0).array()).matrix();
    });
  }

  void backward(Var loss) {
    assert(nodes_[loss.i].val.size() == 1);
    grad(loss).setOnes();
    for (int i = loss.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(const Mat&)> backward;
    bool needs_grad = true;
  };

  bool needs(Var v) const { return nodes_[v.i].needs_grad; }

  Var push(Mat val, bool needs_grad, std::function<void(const Mat&)> bw) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.backward = needs_grad ? std::move(bw) : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;  // deque: references stay valid as nodes are appended
};

using Var = Tape::Var;

}  // namespace mdvae::ad
