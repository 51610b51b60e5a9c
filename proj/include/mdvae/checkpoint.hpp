// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "mdvae/model.hpp"

namespace mdvae::checkpoint {

using ad::Mat;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything needed to resume training bit-for-bit. Deliberately carries no
// variant label or run metadata: two runs that are numerically identical
// produce byte-identical checkpoints.
struct Checkpoint {
  model::ModelConfig config;
  std::uint64_t step = 0;
  model::ParamStore params;
  std::map<std::string, Mat> adam_m, adam_v;
  bool has_controller = false;
  double ctrl_beta = 0, ctrl_integral = 0, ctrl_ema = 0;
  bool ctrl_have_ema = false;
  std::map<std::string, std::string> rng_states;
};

namespace detail {

constexpr char kMagic[8] = {'M', 'D', 'V', 'A', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("truncated checkpoint");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw CheckpointError("truncated checkpoint");
  return s;
}

inline void write_mat(std::ostream& os, const Mat& m) {
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Mat read_mat(std::istream& is) {
  auto r = read_pod<std::uint64_t>(is);
  auto c = read_pod<std::uint64_t>(is);
  Mat m(static_cast<long>(r), static_cast<long>(c));
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!is) throw CheckpointError("truncated checkpoint");
  return m;
}

inline void write_tensor_map(std::ostream& os,
                             const std::map<std::string, Mat>& m) {
  write_pod<std::uint64_t>(os, m.size());
  for (const auto& [name, tensor] : m) {
    write_str(os, name);
    write_mat(os, tensor);
  }
}

inline std::map<std::string, Mat> read_tensor_map(std::istream& is) {
  std::map<std::string, Mat> out;
  auto n = read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = read_str(is);
    out[name] = read_mat(is);
  }
  return out;
}

}  // namespace detail

inline void save(const std::string& path, const Checkpoint& ck) {
  namespace d = detail;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp);
    os.write(d::kMagic, sizeof(d::kMagic));
    d::write_pod(os, d::kVersion);

    const auto& c = ck.config;
    for (int v : {c.d_model, c.n_layers, c.n_heads, c.d_z, c.d_cond, c.K,
                  c.max_len, c.vocab_size, c.ff_mult})
      d::write_pod<std::int32_t>(os, v);
    d::write_pod<std::uint64_t>(os, c.decoder_widths.size());
    for (int w : c.decoder_widths) d::write_pod<std::int32_t>(os, w);

    d::write_pod<std::uint64_t>(os, ck.step);
    d::write_tensor_map(os, ck.params.tensors);
    d::write_tensor_map(os, ck.adam_m);
    d::write_tensor_map(os, ck.adam_v);

    d::write_pod<std::uint8_t>(os, ck.has_controller ? 1 : 0);
    d::write_pod(os, ck.ctrl_beta);
    d::write_pod(os, ck.ctrl_integral);
    d::write_pod(os, ck.ctrl_ema);
    d::write_pod<std::uint8_t>(os, ck.ctrl_have_ema ? 1 : 0);

    d::write_pod<std::uint64_t>(os, ck.rng_states.size());
    for (const auto& [name, state] : ck.rng_states) {
      d::write_str(os, name);
      d::write_str(os, state);
    }
    if (!os) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::string& path) {
  namespace d = detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::string(magic, 8) != std::string(d::kMagic, 8))
    throw CheckpointError("bad magic in " + path);
  auto version = d::read_pod<std::uint32_t>(is);
  if (version != d::kVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));

  Checkpoint ck;
  auto& c = ck.config;
  for (int* field : {&c.d_model, &c.n_layers, &c.n_heads, &c.d_z, &c.d_cond,
                     &c.K, &c.max_len, &c.vocab_size, &c.ff_mult})
    *field = d::read_pod<std::int32_t>(is);
  auto nw = d::read_pod<std::uint64_t>(is);
  c.decoder_widths.clear();
  for (std::uint64_t i = 0; i < nw; ++i)
    c.decoder_widths.push_back(d::read_pod<std::int32_t>(is));

  ck.step = d::read_pod<std::uint64_t>(is);
  ck.params.tensors = d::read_tensor_map(is);
  ck.adam_m = d::read_tensor_map(is);
  ck.adam_v = d::read_tensor_map(is);

  ck.has_controller = d::read_pod<std::uint8_t>(is) != 0;
  ck.ctrl_beta = d::read_pod<double>(is);
  ck.ctrl_integral = d::read_pod<double>(is);
  ck.ctrl_ema = d::read_pod<double>(is);
  ck.ctrl_have_ema = d::read_pod<std::uint8_t>(is) != 0;

  auto nr = d::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < nr; ++i) {
    std::string name = d::read_str(is);
    ck.rng_states[name] = d::read_str(is);
  }
  return ck;
}

}  // namespace mdvae::checkpoint
