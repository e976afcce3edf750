#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace garfont {

// xoshiro256** with splitmix64 seeding. We carry our own generator instead of
// <random> engines because the state is four words (trivial to persist in a
// checkpoint manifest) and the stream does not depend on the stdlib build.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);
  // Standard normal via Box-Muller; one draw consumes two uniforms so the
  // state alone reproduces the stream (no cached spare).
  double normal();
  double normal(double mean, double std);
  // Normal resampled until |z| <= 2 (init convention for weights).
  double truncated_normal(double std);

  // Fisher-Yates over [0, n), returned as an index vector.
  std::vector<int> permutation(int n);

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }
  std::string state_string() const;
  static Rng from_state_string(const std::string& s);

 private:
  std::array<uint64_t, 4> s_{};
};

// Named substream derivation: every stage draws its seed from the master seed
// and a label, so adding a stage never shifts another stage's stream.
uint64_t substream_seed(uint64_t master_seed, const std::string& label);

}  // namespace garfont
