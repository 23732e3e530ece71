#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace cni {

// 64-bit FNV-1a, used for stream derivation and content digests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ull);

struct RngState {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;
  friend bool operator==(const RngState&, const RngState&) = default;
};

// Counter-based random stream: output i is mix64(key + i*gamma), so a stream
// is fully described by (key, counter) and copying a stream replays it.
// Streams are derived by name from a run seed rather than by splitting state,
// which keeps sampled values independent of evaluation or thread order.
//
// normal() consumes exactly two uniforms per draw (Box-Muller, cosine branch)
// so consumption accounting stays exact across alternative samplers.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(RngState st) : state_(st) {}

  static RngStream from_seed(std::uint64_t seed);

  // Derive an independent child stream; does not consume from this stream.
  RngStream child(std::string_view name, std::uint64_t index = 0) const;

  std::uint64_t next_u64();
  double uniform();                      // strictly inside (0, 1)
  double uniform(double lo, double hi);  // lo + (hi-lo)*uniform()
  double normal();                       // N(0, 1)
  void fill_normal(std::span<double> out);

  RngState state() const { return state_; }
  void set_state(RngState st) { state_ = st; }

 private:
  RngState state_;
};

}  // namespace cni
