// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdvae/batching.hpp"
#include "mdvae/data.hpp"
#include "mdvae/generate.hpp"
#include "mdvae/model.hpp"
#include "mdvae/smiles.hpp"

namespace mdvae::eval {

using ad::Mat;

struct GenerationRecord {
  std::string smiles;
  data::ConditionVector condition;  // anchor the sample was asked to satisfy
  bool valid = false;
  bool unique = false;  // first occurrence within the evaluation batch
  bool novel = false;   // absent from the training corpus
  std::optional<double> mol_wt;  // computed property (molWt built-in)
  bool terminated = true;
};

// Fills valid / unique / novel / mol_wt in place. Uniqueness follows
// first-occurrence order but the efficiency metric depends only on the
// multiset of strings.
inline void annotate(std::vector<GenerationRecord>& records,
                     const data::Corpus& training) {
  std::set<std::string> seen;
  for (auto& r : records) {
    r.valid = smiles::check_validity(r.smiles).valid;
    r.unique = seen.insert(r.smiles).second;
    r.novel = !training.contains(r.smiles);
    r.mol_wt = smiles::molecular_weight(r.smiles);
  }
}

inline double generative_efficiency(const std::vector<GenerationRecord>& records) {
  if (records.empty()) return 0.0;
  long hits = 0;
  for (const auto& r : records)
    if (r.valid && r.unique && r.novel) ++hits;
  return static_cast<double>(hits) / records.size();
}

// Property oracle: computed value for a SMILES string, or nullopt when the
// property is unsupported for that input.
using PropertyOracle = std::function<std::optional<double>(const std::string&)>;

inline PropertyOracle molwt_oracle() {
  return [](const std::string& s) { return smiles::molecular_weight(s); };
}

// Smallest |property - anchor| over valid records; nullopt is the paper's
// "no valid molecule" dash.
inline std::optional<double> top1_condition_mae(
    const std::vector<GenerationRecord>& records, double anchor,
    const PropertyOracle& oracle = molwt_oracle()) {
  std::optional<double> best;
  for (const auto& r : records) {
    if (!r.valid) continue;
    auto prop = oracle(r.smiles);
    if (!prop) continue;
    double err = std::abs(*prop - anchor);
    if (!best || err < *best) best = err;
  }
  return best;
}

struct ReconstructionRate {
  double molecule_rate = 0;   // exact-match fraction (primary)
  double token_accuracy = 0;  // diagnostic
  long molecules = 0;
};

inline ReconstructionRate reconstruction_success_rate(
    const data::Corpus& corpus, const data::ConditionStats& stats,
    const model::ModelConfig& cfg, model::ParamStore& params,
    int batch_size = 64) {
  if (corpus.records.empty()) throw data::DataError("EMPTY_CORPUS");
  ReconstructionRate out;
  long exact = 0, correct = 0, total = 0;
  const auto n = corpus.records.size();
  for (std::size_t i = 0; i < n; i += batch_size) {
    std::vector<data::Record> chunk(
        corpus.records.begin() + i,
        corpus.records.begin() + std::min(n, i + batch_size));
    model::Batch b = batching::make_batch(chunk, stats);
    auto res = generate::reconstruct_teacher_forced(cfg, params, b);
    for (bool m : res.exact_match)
      if (m) ++exact;
    correct += res.correct_tokens;
    total += res.total_tokens;
    out.molecules += b.B;
  }
  out.molecule_rate = static_cast<double>(exact) / out.molecules;
  out.token_accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / total;
  return out;
}

// Symmetrized discrete KLD between two distributions over the vocabulary.
inline double symmetric_kld(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double acc = 0;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] > 0) acc += 0.5 * p[i] * std::log(p[i] / q[i]);
    if (q[i] > 0) acc += 0.5 * q[i] * std::log(q[i] / p[i]);
  }
  return acc;
}

// Mean symmetrized pairwise KLD between the decoders' teacher-forced
// predictive distributions (z = mu), averaged over unordered pairs,
// positions, and molecules.
inline double inter_decoder_kld(const model::Batch& batch,
                                const model::ModelConfig& cfg,
                                model::ParamStore& params) {
  if (cfg.K < 2) throw std::invalid_argument("SINGLE_DECODER: need K >= 2");
  ad::Tape t;
  model::TapeParams p(t, params, false);
  auto enc = model::encode(t, p, cfg, batch);
  RngStream unused(0, "unused");
  auto latents = model::sample_latents(t, enc, model::LatentMode::kDeterministic,
                                       cfg.K, unused);
  std::vector<const Mat*> logit_sets;
  for (int k = 0; k < cfg.K; ++k)
    logit_sets.push_back(
        &t.val(model::decode_logits(t, p, cfg, k, latents[k], batch)));

  auto softmax = [](const Eigen::VectorXd& x) {
    Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
    return Eigen::VectorXd(e / e.sum());
  };
  double acc = 0;
  long n = 0;
  std::vector<Eigen::VectorXd> dists(cfg.K);
  for (int b = 0; b < batch.B; ++b) {
    for (int pos = 0; pos + 1 < batch.lens[b]; ++pos) {
      int row = b * batch.L + pos;
      for (int k = 0; k < cfg.K; ++k)
        dists[k] = softmax(logit_sets[k]->row(row).transpose());
      for (int i = 0; i < cfg.K; ++i)
        for (int j = i + 1; j < cfg.K; ++j) {
          acc += symmetric_kld(dists[i], dists[j]);
          ++n;
        }
    }
  }
  return n == 0 ? 0.0 : acc / n;
}

struct MetricsReport {
  // absent entries are simply omitted from the emitted report
  std::optional<double> recon_rate_seen, recon_token_acc_seen;
  std::optional<double> recon_rate_unseen, recon_token_acc_unseen;
  std::optional<double> gen_efficiency;
  std::optional<double> top1_mae;        // nullopt while no_valid_molecule
  bool no_valid_molecule = false;
  std::optional<double> inter_decoder_kld;
  std::optional<double> l_recon, l_reg;
  std::map<std::string, double> extra;  // e.g. per-anchor top-1 MAE

  std::map<std::string, std::string> entries() const {
    std::map<std::string, std::string> out;  // sorted -> stable key order
    auto put = [&](const char* key, const std::optional<double>& v) {
      if (v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.10g", *v);
        out[key] = buf;
      }
    };
    put("gen_efficiency", gen_efficiency);
    put("inter_decoder_kld", inter_decoder_kld);
    put("l_recon", l_recon);
    put("l_reg", l_reg);
    put("recon_rate_seen", recon_rate_seen);
    put("recon_rate_unseen", recon_rate_unseen);
    put("recon_token_acc_seen", recon_token_acc_seen);
    put("recon_token_acc_unseen", recon_token_acc_unseen);
    if (no_valid_molecule)
      out["top1_mae"] = "NO_VALID_MOLECULE";
    else
      put("top1_mae", top1_mae);
    for (const auto& [k, v] : extra) put(k.c_str(), v);
    return out;
  }

  void write_text(std::ostream& os) const {
    for (const auto& [k, v] : entries()) os << k << " = " << v << "\n";
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : entries()) {
      if (v == "NO_VALID_MOLECULE")
        j[k] = v;
      else
        j[k] = std::stod(v);
    }
    return j;
  }
};

}  // namespace mdvae::eval
