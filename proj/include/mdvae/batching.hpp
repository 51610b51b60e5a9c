// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mdvae/data.hpp"
#include "mdvae/model.hpp"
#include "mdvae/smiles.hpp"

namespace mdvae::batching {

// Tokenizes, frames and pads a set of records into one batch. Sequences are
// padded to the longest framed length in the batch; conditions are z-scored
// with the supplied stats.
inline model::Batch make_batch(const std::vector<data::Record>& records,
                               const data::ConditionStats& stats) {
  if (records.empty()) throw std::invalid_argument("empty batch");
  model::Batch batch;
  batch.B = static_cast<int>(records.size());
  std::vector<smiles::TokenSeq> seqs;
  seqs.reserve(records.size());
  int max_framed = 0;
  for (const auto& r : records) {
    auto t = smiles::tokenize(r.smiles);
    if (!t.has_value())
      throw std::invalid_argument("untokenizable SMILES: " + r.smiles);
    max_framed = std::max(max_framed, static_cast<int>(t->ids.size()) + 2);
    seqs.push_back(std::move(*t));
  }
  batch.L = max_framed;
  batch.tokens.reserve(batch.B * batch.L);
  batch.lens.reserve(batch.B);
  batch.cond.resize(batch.B, 3);
  for (int b = 0; b < batch.B; ++b) {
    auto framed = smiles::frame(seqs[b], batch.L);
    batch.lens.push_back(static_cast<int>(seqs[b].ids.size()) + 2);
    batch.tokens.insert(batch.tokens.end(), framed.ids.begin(), framed.ids.end());
    batch.cond.row(b) =
        data::normalize(records[b].properties, stats).vec().transpose();
  }
  return batch;
}

}  // namespace mdvae::batching
