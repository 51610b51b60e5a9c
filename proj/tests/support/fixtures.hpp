// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "mdvae/batching.hpp"
#include "mdvae/data.hpp"
#include "mdvae/model.hpp"
#include "mdvae/rng.hpp"
#include "mdvae/smiles.hpp"

namespace mdvae::test {

// Small random chain/ring molecules over the organic subset. Properties:
// molWt is computed natively; logP and QED are synthetic but deterministic
// functions of composition, so corpora are reproducible and correlated.
inline data::Record random_molecule(RngStream& rng, int min_atoms = 2,
                                    int max_atoms = 8) {
  static const char* kAtoms[] = {"C", "C", "C", "N", "O", "F", "Cl", "S"};
  int n = static_cast<int>(rng.uniform_int(min_atoms, max_atoms + 1));
  std::string s;
  int branch_open = 0;
  for (int i = 0; i < n; ++i) {
    s += kAtoms[rng.uniform_int(0, 8)];
    if (i + 1 < n) {
      double r = rng.uniform();
      if (r < 0.12 && i > 0) {
        s += "(";
        ++branch_open;
      } else if (r < 0.2 && branch_open > 0) {
        s += ")";
        --branch_open;
      } else if (r < 0.28) {
        s += "=";
      }
    }
  }
  while (branch_open-- > 0) s += ")";
  // occasionally wrap in a benzene scaffold
  if (rng.uniform() < 0.25) s = "c1ccccc1" + s;

  data::Record rec;
  rec.smiles = s;
  auto w = smiles::molecular_weight(s);
  rec.properties.mol_wt = w.value_or(0.0);
  int n_c = 0, n_o = 0, n_n = 0;
  for (char c : s) {
    if (c == 'C' || c == 'c') ++n_c;
    if (c == 'O' || c == 'o') ++n_o;
    if (c == 'N' || c == 'n') ++n_n;
  }
  rec.properties.log_p = 0.5 * n_c - 0.4 * n_o - 0.2 * n_n;
  rec.properties.qed =
      1.0 / (1.0 + std::exp((rec.properties.mol_wt - 120.0) / 60.0));
  return rec;
}

inline data::Corpus toy_corpus(int n, std::uint64_t seed,
                               const std::string& name = "toy") {
  RngStream rng(seed, "toygen");
  data::Corpus corpus;
  corpus.name = name;
  std::set<std::string> seen;
  while (static_cast<int>(corpus.records.size()) < n) {
    data::Record r = random_molecule(rng);
    if (!smiles::check_validity(r.smiles).valid) continue;
    if (!seen.insert(r.smiles).second) continue;
    corpus.records.push_back(std::move(r));
  }
  corpus.index();
  return corpus;
}

inline void write_corpus_csv(const data::Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  out << "smiles,molwt,logp,qed\n";
  for (const auto& r : corpus.records)
    out << r.smiles << ',' << r.properties.mol_wt << ',' << r.properties.log_p
        << ',' << r.properties.qed << '\n';
}

inline model::Batch smiles_batch(const std::vector<std::string>& strings,
                                 const data::ConditionStats& stats = {}) {
  std::vector<data::Record> recs;
  for (const auto& s : strings) {
    data::Record r;
    r.smiles = s;
    auto w = smiles::molecular_weight(s);
    r.properties = {w.value_or(100.0), 1.0, 0.5};
    recs.push_back(std::move(r));
  }
  data::ConditionStats st = stats;
  if (st.mean.isZero() && st.std.isOnes()) {
    st.mean << 100, 1, 0.5;
    st.std << 50, 1, 0.2;
  }
  return batching::make_batch(recs, st);
}

}  // namespace mdvae::test
