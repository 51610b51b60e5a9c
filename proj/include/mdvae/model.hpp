// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdvae/autodiff.hpp"
#include "mdvae/rng.hpp"

namespace mdvae::model {

using ad::Mat;
using ad::Tape;
using ad::Var;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 3;
  int n_heads = 4;
  int d_z = 100;
  int d_cond = 3;
  int K = 3;
  int max_len = 120;   // maximum token count before framing
  int vocab_size = 42;
  int ff_mult = 4;
  std::vector<int> decoder_widths;  // per decoder; filled by finalize()

  int frame_len() const { return max_len + 2; }

  void validate() const {
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    if (d_z <= 0) throw std::invalid_argument("d_z must be > 0");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be divisible by n_heads");
  }
};

// ---- parameter bookkeeping ----

struct ParamStore {
  std::map<std::string, Mat> tensors;

  Mat& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  long count() const {
    long n = 0;
    for (const auto& [_, m] : tensors) n += m.size();
    return n;
  }
};

enum class Init { kEmbedding, kLinear, kZero, kOne };

// Enumerates every tensor of one component in a fixed order; used by both
// initialization and parameter counting so they cannot drift apart.
template <class Fn>
void for_each_encoder_tensor(const ModelConfig& cfg, Fn&& fn) {
  const int D = cfg.d_model;
  const int dh = D / cfg.n_heads;
  fn("encoder.tok_emb", cfg.vocab_size, D, Init::kEmbedding);
  fn("encoder.in_proj.w", D + cfg.d_cond, D, Init::kLinear);
  fn("encoder.in_proj.b", 1, D, Init::kZero);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "encoder.l" + std::to_string(l) + ".";
    fn(p + "ln1.g", 1, D, Init::kOne);
    fn(p + "ln1.b", 1, D, Init::kZero);
    for (int h = 0; h < cfg.n_heads; ++h) {
      std::string hp = p + "attn.h" + std::to_string(h) + ".";
      fn(hp + "wq", D, dh, Init::kLinear);
      fn(hp + "wk", D, dh, Init::kLinear);
      fn(hp + "wv", D, dh, Init::kLinear);
    }
    fn(p + "attn.wo", D, D, Init::kLinear);
    fn(p + "attn.bo", 1, D, Init::kZero);
    fn(p + "ln2.g", 1, D, Init::kOne);
    fn(p + "ln2.b", 1, D, Init::kZero);
    fn(p + "ff.w1", D, cfg.ff_mult * D, Init::kLinear);
    fn(p + "ff.b1", 1, cfg.ff_mult * D, Init::kZero);
    fn(p + "ff.w2", cfg.ff_mult * D, D, Init::kLinear);
    fn(p + "ff.b2", 1, D, Init::kZero);
  }
  fn("encoder.lnf.g", 1, D, Init::kOne);
  fn("encoder.lnf.b", 1, D, Init::kZero);
  fn("encoder.mu.w", D, cfg.d_z, Init::kLinear);
  fn("encoder.mu.b", 1, cfg.d_z, Init::kZero);
  fn("encoder.ls.w", D, cfg.d_z, Init::kLinear);
  fn("encoder.ls.b", 1, cfg.d_z, Init::kZero);
}

template <class Fn>
void for_each_decoder_tensor(const ModelConfig& cfg, int k, int width, Fn&& fn) {
  const int D = width;
  const int dh = D / cfg.n_heads;
  std::string d = "dec" + std::to_string(k) + ".";
  fn(d + "tok_emb", cfg.vocab_size, D, Init::kEmbedding);
  fn(d + "in_proj.w", D + cfg.d_cond + cfg.d_z, D, Init::kLinear);
  fn(d + "in_proj.b", 1, D, Init::kZero);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = d + "l" + std::to_string(l) + ".";
    fn(p + "ln1.g", 1, D, Init::kOne);
    fn(p + "ln1.b", 1, D, Init::kZero);
    for (int h = 0; h < cfg.n_heads; ++h) {
      std::string hp = p + "attn.h" + std::to_string(h) + ".";
      fn(hp + "wq", D, dh, Init::kLinear);
      fn(hp + "wk", D, dh, Init::kLinear);
      fn(hp + "wv", D, dh, Init::kLinear);
    }
    fn(p + "attn.wo", D, D, Init::kLinear);
    fn(p + "attn.bo", 1, D, Init::kZero);
    fn(p + "ln2.g", 1, D, Init::kOne);
    fn(p + "ln2.b", 1, D, Init::kZero);
    fn(p + "ff.w1", D, cfg.ff_mult * D, Init::kLinear);
    fn(p + "ff.b1", 1, cfg.ff_mult * D, Init::kZero);
    fn(p + "ff.w2", cfg.ff_mult * D, D, Init::kLinear);
    fn(p + "ff.b2", 1, D, Init::kZero);
  }
  fn(d + "lnf.g", 1, D, Init::kOne);
  fn(d + "lnf.b", 1, D, Init::kZero);
  fn(d + "out.w", D, cfg.vocab_size, Init::kLinear);
  fn(d + "out.b", 1, cfg.vocab_size, Init::kZero);
}

inline long encoder_param_count(const ModelConfig& cfg) {
  long n = 0;
  for_each_encoder_tensor(cfg, [&](const std::string&, int r, int c, Init) {
    n += static_cast<long>(r) * c;
  });
  return n;
}

inline long decoder_param_count(const ModelConfig& cfg, int width) {
  long n = 0;
  for_each_decoder_tensor(cfg, 0, width,
                          [&](const std::string&, int r, int c, Init) {
                            n += static_cast<long>(r) * c;
                          });
  return n;
}

// Decoder widths shrink as K grows so the total trainable parameter count
// stays matched to the K=1 baseline (same encoder, one full-width decoder).
inline std::vector<int> matched_decoder_widths(const ModelConfig& cfg) {
  const long budget = decoder_param_count(cfg, cfg.d_model);
  std::vector<int> best(cfg.K, cfg.n_heads);
  long best_err = -1;
  // mix two adjacent widths so the K-decoder total can land close to the
  // single-decoder budget despite the quadratic cost jump per width step
  for (int w = cfg.n_heads; w <= cfg.d_model; w += cfg.n_heads) {
    long lo = decoder_param_count(cfg, w);
    long hi = (w + cfg.n_heads <= cfg.d_model)
                  ? decoder_param_count(cfg, w + cfg.n_heads)
                  : lo;
    for (int m = 0; m <= cfg.K; ++m) {
      long total = static_cast<long>(m) * hi + static_cast<long>(cfg.K - m) * lo;
      long err = std::abs(total - budget);
      if (best_err < 0 || err < best_err) {
        best_err = err;
        best.assign(cfg.K, w);
        for (int i = 0; i < m; ++i) best[i] = w + cfg.n_heads;
      }
    }
  }
  return best;
}

inline ModelConfig finalize(ModelConfig cfg) {
  cfg.validate();
  if (cfg.decoder_widths.empty()) cfg.decoder_widths = matched_decoder_widths(cfg);
  if (static_cast<int>(cfg.decoder_widths.size()) != cfg.K)
    throw std::invalid_argument("decoder_widths size must equal K");
  return cfg;
}

namespace detail {

inline void init_tensor(Mat& m, Init kind, RngStream& rng) {
  switch (kind) {
    case Init::kEmbedding:
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) = 0.02 * rng.normal();
      break;
    case Init::kLinear: {
      double a = std::sqrt(3.0 / static_cast<double>(m.rows()));
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) = a * (2 * rng.uniform() - 1);
      break;
    }
    case Init::kZero:
      m.setZero();
      break;
    case Init::kOne:
      m.setOnes();
      break;
  }
}

}  // namespace detail

// Shared encoder initialized from one seed stream; each decoder gets its own
// stream so the K decoders start from distinct weights.
inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t master_seed) {
  ParamStore ps;
  RngStream enc_rng(master_seed, "init.encoder");
  for_each_encoder_tensor(cfg, [&](const std::string& n, int r, int c, Init k) {
    Mat m(r, c);
    detail::init_tensor(m, k, enc_rng);
    ps.tensors.emplace(n, std::move(m));
  });
  for (int dk = 0; dk < cfg.K; ++dk) {
    RngStream dec_rng(master_seed, "init.dec" + std::to_string(dk));
    for_each_decoder_tensor(
        cfg, dk, cfg.decoder_widths[dk],
        [&](const std::string& n, int r, int c, Init k) {
          Mat m(r, c);
          detail::init_tensor(m, k, dec_rng);
          ps.tensors.emplace(n, std::move(m));
        });
  }
  return ps;
}

// Lazily binds stored parameters to tape leaves for one forward/backward.
class TapeParams {
 public:
  TapeParams(Tape& tape, ParamStore& store, bool needs_grad = true)
      : tape_(tape), store_(store), needs_grad_(needs_grad) {}

  Var operator[](const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(store_.at(name), needs_grad_);
    bound_.emplace(name, v);
    return v;
  }

  // Substitute an existing tape var for a named parameter (used by the
  // finite-difference checks to differentiate w.r.t. one tensor).
  void bind(const std::string& name, Var v) { bound_[name] = v; }

  // Collects d(loss)/d(param) for every parameter touched this step.
  std::map<std::string, Mat> collect_grads() {
    std::map<std::string, Mat> out;
    for (const auto& [name, v] : bound_) {
      if (tape_.has_grad(v)) out.emplace(name, tape_.grad(v));
    }
    return out;
  }

 private:
  Tape& tape_;
  ParamStore& store_;
  bool needs_grad_;
  std::map<std::string, Var> bound_;
};

// ---- batches ----

struct Batch {
  std::vector<int> tokens;  // B*L framed+padded ids, example-major
  std::vector<int> lens;    // per-example non-PAD length (incl. BOS/EOS)
  int B = 0;
  int L = 0;
  Mat cond;  // B x 3, normalized conditions
};

struct EncoderOutput {
  Var mu;
  Var log_sigma;
};

enum class LatentMode { kShared, kPerDecoder, kDeterministic };

namespace detail {

inline Mat positional_block(int B, int L, int D) {
  Mat pe(L, D);
  for (int pos = 0; pos < L; ++pos) {
    for (int i = 0; i < D; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / D);
      pe(pos, i) = std::sin(angle);
      if (i + 1 < D) pe(pos, i + 1) = std::cos(angle);
    }
  }
  Mat out(B * L, D);
  for (int b = 0; b < B; ++b) out.middleRows(b * L, L) = pe;
  return out;
}

// One pre-LN transformer block: x + attn(ln1(x)), then x + ff(ln2(x)).
inline Var transformer_layer(Tape& t, TapeParams& p, const std::string& prefix,
                             Var x, const ModelConfig& cfg, int L, bool causal,
                             const std::vector<int>& lens) {
  Var h = t.layernorm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"]);
  std::vector<Var> heads;
  heads.reserve(cfg.n_heads);
  for (int hd = 0; hd < cfg.n_heads; ++hd) {
    std::string hp = prefix + "attn.h" + std::to_string(hd) + ".";
    Var q = t.matmul(h, p[hp + "wq"]);
    Var k = t.matmul(h, p[hp + "wk"]);
    Var v = t.matmul(h, p[hp + "wv"]);
    heads.push_back(t.attention(q, k, v, L, causal, lens));
  }
  Var att = t.concat_cols(heads);
  x = t.add(x, t.add_rowvec(t.matmul(att, p[prefix + "attn.wo"]),
                            p[prefix + "attn.bo"]));
  Var h2 = t.layernorm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"]);
  Var ff = t.gelu(t.add_rowvec(t.matmul(h2, p[prefix + "ff.w1"]),
                               p[prefix + "ff.b1"]));
  Var out = t.add_rowvec(t.matmul(ff, p[prefix + "ff.w2"]), p[prefix + "ff.b2"]);
  return t.add(x, out);
}

}  // namespace detail

// Posterior parameters (mu, log_sigma) per example. Conditions are injected
// by concatenation to every token embedding before the stack; the final
// states are mean-pooled over non-PAD positions.
inline EncoderOutput encode(Tape& t, TapeParams& p, const ModelConfig& cfg,
                            const Batch& batch) {
  if (static_cast<int>(batch.tokens.size()) != batch.B * batch.L ||
      batch.cond.rows() != batch.B)
    throw std::invalid_argument("SHAPE_MISMATCH in encode");
  Var emb = t.rows(p["encoder.tok_emb"], batch.tokens);
  Var y_rep = t.repeat_rows(t.constant(batch.cond), batch.L);
  Var x = t.add_rowvec(t.matmul(t.concat_cols({emb, y_rep}), p["encoder.in_proj.w"]),
                       p["encoder.in_proj.b"]);
  x = t.add(x, t.constant(detail::positional_block(batch.B, batch.L, cfg.d_model)));
  for (int l = 0; l < cfg.n_layers; ++l)
    x = detail::transformer_layer(t, p, "encoder.l" + std::to_string(l) + ".", x,
                                  cfg, batch.L, /*causal=*/false, batch.lens);
  x = t.layernorm(x, p["encoder.lnf.g"], p["encoder.lnf.b"]);
  Var pooled = t.masked_mean_rows(x, batch.lens, batch.L);
  Var mu = t.add_rowvec(t.matmul(pooled, p["encoder.mu.w"]), p["encoder.mu.b"]);
  Var ls = t.add_rowvec(t.matmul(pooled, p["encoder.ls.w"]), p["encoder.ls.b"]);
  return {mu, ls};
}

// Reparameterized latent draws, one slot per decoder. Shared mode copies a
// single draw into every slot; deterministic mode returns mu.
inline std::vector<Var> sample_latents(Tape& t, const EncoderOutput& enc,
                                       LatentMode mode, int K, RngStream& rng) {
  const Mat& mu = t.val(enc.mu);
  auto draw = [&]() {
    Mat eps(mu.rows(), mu.cols());
    for (int r = 0; r < eps.rows(); ++r)
      for (int c = 0; c < eps.cols(); ++c) eps(r, c) = rng.normal();
    return t.add(enc.mu, t.mul(t.exp_(enc.log_sigma), t.constant(eps)));
  };
  std::vector<Var> slots;
  slots.reserve(K);
  switch (mode) {
    case LatentMode::kDeterministic:
      for (int k = 0; k < K; ++k) slots.push_back(enc.mu);
      break;
    case LatentMode::kShared: {
      Var z = draw();
      for (int k = 0; k < K; ++k) slots.push_back(z);
      break;
    }
    case LatentMode::kPerDecoder:
      for (int k = 0; k < K; ++k) slots.push_back(draw());
      break;
  }
  return slots;
}

// Pre-softmax next-token scores of decoder k under teacher forcing:
// position t sees tokens < t only. z and y are concatenated to every token
// embedding.
inline Var decode_logits(Tape& t, TapeParams& p, const ModelConfig& cfg, int k,
                         Var z, const Batch& batch) {
  if (k < 0 || k >= cfg.K) throw std::invalid_argument("decoder index out of range");
  if (t.val(z).rows() != batch.B) throw std::invalid_argument("SHAPE_MISMATCH in decode");
  const int Dk = cfg.decoder_widths[k];
  std::string d = "dec" + std::to_string(k) + ".";
  Var emb = t.rows(p[d + "tok_emb"], batch.tokens);
  Var y_rep = t.repeat_rows(t.constant(batch.cond), batch.L);
  Var z_rep = t.repeat_rows(z, batch.L);
  Var x = t.add_rowvec(
      t.matmul(t.concat_cols({emb, y_rep, z_rep}), p[d + "in_proj.w"]),
      p[d + "in_proj.b"]);
  x = t.add(x, t.constant(detail::positional_block(batch.B, batch.L, Dk)));
  ModelConfig local = cfg;
  local.d_model = Dk;  // only n_heads/n_layers/ff_mult are read by the layer
  for (int l = 0; l < cfg.n_layers; ++l)
    x = detail::transformer_layer(t, p, d + "l" + std::to_string(l) + ".", x,
                                  local, batch.L, /*causal=*/true, batch.lens);
  x = t.layernorm(x, p[d + "lnf.g"], p[d + "lnf.b"]);
  return t.add_rowvec(t.matmul(x, p[d + "out.w"]), p[d + "out.b"]);
}

}  // namespace mdvae::model
