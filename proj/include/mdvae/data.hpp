// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdvae/rng.hpp"
#include "mdvae/smiles.hpp"

namespace mdvae::data {

struct ConditionVector {
  double mol_wt = 0;
  double log_p = 0;
  double qed = 0;

  Eigen::Vector3d vec() const { return {mol_wt, log_p, qed}; }
  static ConditionVector from_vec(const Eigen::Vector3d& v) {
    return {v[0], v[1], v[2]};
  }
  double operator[](int i) const { return vec()[i]; }
};

inline const char* property_name(int i) {
  static const char* kNames[3] = {"molwt", "logp", "qed"};
  return kNames[i];
}

struct Record {
  std::string smiles;
  ConditionVector properties;
};

struct Corpus {
  std::string name;
  std::vector<Record> records;
  int dropped = 0;  // untokenizable / over-length / duplicate rows

  bool contains(const std::string& s) const { return strings_.count(s) > 0; }
  void index() {
    strings_.clear();
    for (const auto& r : records) strings_.insert(r.smiles);
  }

 private:
  std::set<std::string> strings_;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CSV with header `smiles,molwt,logp,qed`. Rows with untokenizable SMILES
// or token length > max_len are dropped (counted); exact-string duplicates
// are dropped too.
inline Corpus load_corpus(const std::string& path, int max_len,
                          const std::string& name = "") {
  std::ifstream in(path);
  if (!in) throw DataError("IO_ERROR: cannot open " + path);
  Corpus corpus;
  corpus.name = name.empty() ? path : name;
  std::string line;
  if (!std::getline(in, line)) throw DataError("EMPTY_CORPUS: " + path);
  // tolerate CRLF
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "smiles,molwt,logp,qed")
    throw DataError("MALFORMED_ROW: bad header in " + path + ": " + line);
  std::set<std::string> seen;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string smi, a, b, c;
    if (!std::getline(ss, smi, ',') || !std::getline(ss, a, ',') ||
        !std::getline(ss, b, ',') || !std::getline(ss, c, ','))
      throw DataError("MALFORMED_ROW: row " + std::to_string(row) + " in " + path);
    ConditionVector y;
    try {
      y.mol_wt = std::stod(a);
      y.log_p = std::stod(b);
      y.qed = std::stod(c);
    } catch (const std::exception&) {
      throw DataError("MALFORMED_ROW: row " + std::to_string(row) + " in " + path);
    }
    auto toks = smiles::tokenize(smi);
    if (!toks.has_value() || static_cast<int>(toks->ids.size()) > max_len) {
      ++corpus.dropped;
      continue;
    }
    if (!seen.insert(smi).second) {
      ++corpus.dropped;
      continue;
    }
    corpus.records.push_back({smi, y});
  }
  if (corpus.records.empty()) throw DataError("EMPTY_CORPUS: " + path);
  corpus.index();
  return corpus;
}

struct ConditionStats {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d std = Eigen::Vector3d::Ones();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Identity();
};

inline ConditionStats compute_stats(const Corpus& corpus) {
  const auto n = static_cast<double>(corpus.records.size());
  if (n < 2) throw DataError("EMPTY_CORPUS: need at least 2 records for stats");
  ConditionStats st;
  st.mean.setZero();
  for (const auto& r : corpus.records) st.mean += r.properties.vec();
  st.mean /= n;
  st.cov.setZero();
  for (const auto& r : corpus.records) {
    Eigen::Vector3d d = r.properties.vec() - st.mean;
    st.cov += d * d.transpose();
  }
  st.cov /= (n - 1);
  st.std = st.cov.diagonal().cwiseSqrt();
  for (int i = 0; i < 3; ++i)
    if (!(st.std[i] > 0))
      throw DataError("MALFORMED_ROW: degenerate property " +
                      std::string(property_name(i)));
  return st;
}

inline ConditionVector normalize(const ConditionVector& y, const ConditionStats& st) {
  return ConditionVector::from_vec(
      (y.vec() - st.mean).cwiseQuotient(st.std));
}

inline ConditionVector denormalize(const ConditionVector& y, const ConditionStats& st) {
  return ConditionVector::from_vec(
      y.vec().cwiseProduct(st.std) + st.mean);
}

enum class Regime { kInDomain, kOod };

inline Regime parse_regime(const std::string& s) {
  if (s == "in_domain") return Regime::kInDomain;
  if (s == "ood") return Regime::kOod;
  throw DataError("unknown regime: " + s);
}

struct ConditionAnchor {
  int property;  // 0 = molWt, 1 = logP, 2 = QED
  double value;
};

// In-domain anchors are the mean and the 90% confidence limits mu +- 1.645
// sigma per property; OOD anchors are the outliers mu +- 4 sigma.
inline std::vector<ConditionAnchor> condition_grid(const ConditionStats& st,
                                                   Regime regime) {
  std::vector<ConditionAnchor> anchors;
  for (int p = 0; p < 3; ++p) {
    double mu = st.mean[p];
    double sigma = st.std[p];
    if (regime == Regime::kInDomain) {
      anchors.push_back({p, mu});
      anchors.push_back({p, mu + 1.645 * sigma});
      anchors.push_back({p, mu - 1.645 * sigma});
    } else {
      anchors.push_back({p, mu + 4.0 * sigma});
      anchors.push_back({p, mu - 4.0 * sigma});
    }
  }
  return anchors;
}

// Conditional mean and covariance of the two non-anchored properties of the
// fitted trivariate Gaussian, given the anchored one.
inline void conditional_gaussian(const ConditionStats& st, const ConditionAnchor& a,
                                 Eigen::Vector2d* mean_out, Eigen::Matrix2d* cov_out) {
  int p = a.property;
  int o0 = (p == 0) ? 1 : 0;
  int o1 = (p == 2) ? 1 : 2;
  Eigen::Vector2d mu_o{st.mean[o0], st.mean[o1]};
  Eigen::Vector2d cross{st.cov(o0, p), st.cov(o1, p)};
  double var_p = st.cov(p, p);
  Eigen::Matrix2d cov_oo;
  cov_oo << st.cov(o0, o0), st.cov(o0, o1), st.cov(o1, o0), st.cov(o1, o1);
  *mean_out = mu_o + cross * ((a.value - st.mean[p]) / var_p);
  *cov_out = cov_oo - cross * cross.transpose() / var_p;
}

// Draws a full condition vector with the anchored property fixed and the
// other two sampled from the conditional Gaussian.
inline ConditionVector sample_given_anchor(const ConditionStats& st,
                                           const ConditionAnchor& a,
                                           RngStream& rng) {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
  conditional_gaussian(st, a, &mean, &cov);
  Eigen::LLT<Eigen::Matrix2d> llt(cov + 1e-12 * Eigen::Matrix2d::Identity());
  Eigen::Vector2d eps{rng.normal(), rng.normal()};
  Eigen::Vector2d draw = mean + llt.matrixL() * eps;
  Eigen::Vector3d full;
  full[a.property] = a.value;
  int o0 = (a.property == 0) ? 1 : 0;
  int o1 = (a.property == 2) ? 1 : 2;
  full[o0] = draw[0];
  full[o1] = draw[1];
  return ConditionVector::from_vec(full);
}

}  // namespace mdvae::data
