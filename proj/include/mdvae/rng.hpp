// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mdvae {

// All randomness in a run flows from one master seed through named
// substreams (init/data/latent/decode), so components can be reordered
// or skipped without perturbing each other's draws.
class RngStream {
 public:
  RngStream() : RngStream(0, "default") {}

  RngStream(std::uint64_t master_seed, std::string_view name) {
    std::seed_seq seq{master_seed, hash_name(name)};
    engine_.seed(seq);
  }

  std::mt19937_64& engine() { return engine_; }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  // [lo, hi)
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi - 1)(engine_);
  }

  std::string serialize() const {
    std::ostringstream os;
    // the normal distribution caches a spare deviate; persist it too so a
    // restored stream replays the exact draw sequence
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_ >> uniform_;
    if (!is) throw std::invalid_argument("bad RngStream state");
  }

 private:
  static std::uint64_t hash_name(std::string_view name) {
    // FNV-1a
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : name) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace mdvae
