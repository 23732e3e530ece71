#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cni/rng.hpp"
#include "cni/tensor.hpp"

namespace cni {

// Labeled inputs normalized to [0,1]. Inputs are stored flattened, one row
// per sample; sample_shape keeps the original per-sample geometry.
struct Dataset {
  Tensor inputs;                 // [B × prod(sample_shape)]
  std::vector<int> labels;
  std::vector<int> sample_shape;
  int num_classes = 0;
  std::string split;             // "train" | "val" | "test"
  std::string provenance;

  int size() const { return inputs.shape().empty() ? 0 : inputs.shape()[0]; }
  void validate() const;

  // Rows [begin, end) as a batch tensor plus the matching labels.
  Tensor batch_inputs(int begin, int end) const;
  std::vector<int> batch_labels(int begin, int end) const;
  Dataset subset(const std::vector<int>& indices, std::string split_tag) const;
};

// Gaussian blobs: class means placed `separation` apart along distinct axes
// of the unit cube, fixed within-class std 0.05, clipped to [0,1].
Dataset gen_synthetic(int classes, int dim, int per_class, double separation,
                      std::uint64_t seed, std::string split_tag = "train");

// IDX binary format (big-endian header; type 0x08 = u8 scaled to [0,1],
// type 0x0D = f64 stored verbatim).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const Dataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels);
// Writes inputs as IDX f64 instead of quantizing to bytes (adversarial sets).
void write_idx_f64(const Dataset& ds, const std::filesystem::path& images,
                   const std::filesystem::path& labels);

}  // namespace cni
