#include "cni/rng.hpp"

#include <cmath>
#include <numbers>

namespace cni {

namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

RngStream RngStream::from_seed(std::uint64_t seed) {
  return RngStream(RngState{mix64(seed + kGamma), 0});
}

RngStream RngStream::child(std::string_view name, std::uint64_t index) const {
  std::uint64_t k = state_.key ^ fnv1a64(name);
  k = mix64(k + kGamma);
  k = mix64(k ^ (index * 0xd1b54a32d192ed03ull + kGamma));
  return RngStream(RngState{k, 0});
}

std::uint64_t RngStream::next_u64() {
  ++state_.counter;
  return mix64(state_.key + state_.counter * kGamma);
}

double RngStream::uniform() {
  // 53-bit mantissa plus half-ulp offset: result is never 0 or 1.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() {
  double u1 = uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void RngStream::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal();
}

}  // namespace cni
