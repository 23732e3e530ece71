#include "cni/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cni {

namespace {

constexpr unsigned char kTypeU8 = 0x08;
constexpr unsigned char kTypeF64 = 0x0d;
constexpr double kBlobStd = 0.05;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

std::uint32_t read_u32_be(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void append_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void append_f64_be(std::vector<unsigned char>& out, double v) {
  auto u = std::bit_cast<std::uint64_t>(v);
  for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(u >> s));
}

double read_f64_be(const std::vector<unsigned char>& b, std::size_t off) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u = (u << 8) | b[off + i];
  return std::bit_cast<double>(u);
}

struct IdxHeader {
  unsigned char type = 0;
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

IdxHeader parse_idx_header(const std::vector<unsigned char>& bytes,
                           const std::filesystem::path& path) {
  if (bytes.size() < 4) {
    throw FormatError(path.string() + ": truncated IDX header at byte offset " +
                      std::to_string(bytes.size()));
  }
  if (bytes[0] != 0 || bytes[1] != 0) {
    throw FormatError(path.string() + ": bad IDX magic at byte offset 0");
  }
  IdxHeader h;
  h.type = bytes[2];
  if (h.type != kTypeU8 && h.type != kTypeF64) {
    throw FormatError(path.string() + ": unsupported IDX type 0x" + [t = h.type] {
      std::ostringstream os;
      os << std::hex << int(t);
      return os.str();
    }() + " at byte offset 2");
  }
  unsigned ndims = bytes[3];
  if (ndims == 0) throw FormatError(path.string() + ": zero dimensions at byte offset 3");
  std::size_t need = 4 + 4 * static_cast<std::size_t>(ndims);
  if (bytes.size() < need) {
    throw FormatError(path.string() + ": truncated IDX dims, expected " + std::to_string(need) +
                      " bytes but file has " + std::to_string(bytes.size()));
  }
  for (unsigned i = 0; i < ndims; ++i) h.dims.push_back(read_u32_be(bytes, 4 + 4 * i));
  h.payload_offset = need;
  return h;
}

void check_payload(const std::vector<unsigned char>& bytes, const IdxHeader& h,
                   std::size_t elem_size, const std::filesystem::path& path) {
  std::size_t count = 1;
  for (std::uint32_t d : h.dims) count *= d;
  std::size_t expected = h.payload_offset + count * elem_size;
  if (bytes.size() != expected) {
    throw FormatError(path.string() + ": payload length mismatch, expected " +
                      std::to_string(expected) + " bytes but file has " +
                      std::to_string(bytes.size()) + " (payload starts at byte offset " +
                      std::to_string(h.payload_offset) + ")");
  }
}

}  // namespace

void Dataset::validate() const {
  if (inputs.shape().size() != 2) {
    throw DimensionError("dataset: inputs must be [BxD], got " + shape_str(inputs.shape()));
  }
  if (static_cast<int>(labels.size()) != size()) {
    throw DimensionError("dataset: " + std::to_string(size()) + " inputs but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (inputs.shape()[1] != static_cast<int>(shape_numel(sample_shape))) {
    throw DimensionError("dataset: sample_shape does not match input width");
  }
  for (int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw IndexError("dataset: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(num_classes) + ")");
    }
  }
  for (double v : inputs.values()) {
    if (v < 0.0 || v > 1.0) throw ContractError("dataset: input value outside [0,1]");
  }
}

Tensor Dataset::batch_inputs(int begin, int end) const {
  const int d = inputs.shape()[1];
  std::vector<double> vals(static_cast<std::size_t>(end - begin) * d);
  std::copy_n(inputs.values().begin() + static_cast<std::size_t>(begin) * d, vals.size(),
              vals.begin());
  return Tensor({end - begin, d}, std::move(vals));
}

std::vector<int> Dataset::batch_labels(int begin, int end) const {
  return std::vector<int>(labels.begin() + begin, labels.begin() + end);
}

Dataset Dataset::subset(const std::vector<int>& indices, std::string split_tag) const {
  const int d = inputs.shape()[1];
  Dataset out;
  out.sample_shape = sample_shape;
  out.num_classes = num_classes;
  out.split = std::move(split_tag);
  out.provenance = provenance + "/subset";
  std::vector<double> vals(indices.size() * static_cast<std::size_t>(d));
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(inputs.values().begin() + static_cast<std::size_t>(indices[i]) * d, d,
                vals.begin() + i * static_cast<std::size_t>(d));
    out.labels.push_back(labels[indices[i]]);
  }
  out.inputs = Tensor({static_cast<int>(indices.size()), d}, std::move(vals));
  return out;
}

Dataset gen_synthetic(int classes, int dim, int per_class, double separation, std::uint64_t seed,
                      std::string split_tag) {
  if (classes < 2) throw ContractError("gen_synthetic: need at least 2 classes");
  if (dim < classes) {
    throw ContractError("gen_synthetic: dim must be >= classes for axis-aligned means");
  }
  if (per_class < 1) throw ContractError("gen_synthetic: per_class must be >= 1");

  RngStream rng = RngStream::from_seed(seed).child("synthetic:" + split_tag);
  // Mean of class c sits at 0.5 except along axis c; pairwise mean distance
  // is exactly `separation`.
  const double offset = separation / std::sqrt(2.0);
  std::vector<double> vals(static_cast<std::size_t>(classes) * per_class * dim);
  std::vector<int> labels(static_cast<std::size_t>(classes) * per_class);
  std::size_t p = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      labels[static_cast<std::size_t>(c) * per_class + i] = c;
      for (int d = 0; d < dim; ++d) {
        double mean = 0.5 + (d == c ? offset : 0.0);
        double v = mean + kBlobStd * rng.normal();
        vals[p++] = std::min(std::max(v, 0.0), 1.0);
      }
    }
  }
  Dataset ds;
  ds.inputs = Tensor({classes * per_class, dim}, std::move(vals));
  ds.labels = std::move(labels);
  ds.sample_shape = {dim};
  ds.num_classes = classes;
  ds.split = std::move(split_tag);
  std::ostringstream prov;
  prov << "synthetic(classes=" << classes << ",dim=" << dim << ",per_class=" << per_class
       << ",separation=" << separation << ",seed=" << seed << ")";
  ds.provenance = prov.str();
  return ds;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  auto ibytes = read_file(images);
  IdxHeader ih = parse_idx_header(ibytes, images);
  std::size_t elem = ih.type == kTypeU8 ? 1 : 8;
  check_payload(ibytes, ih, elem, images);

  auto lbytes = read_file(labels);
  IdxHeader lh = parse_idx_header(lbytes, labels);
  if (lh.type != kTypeU8) {
    throw FormatError(labels.string() + ": labels must be IDX u8 (type 0x08) at byte offset 2");
  }
  if (lh.dims.size() != 1) {
    throw FormatError(labels.string() + ": labels must be 1-D at byte offset 3");
  }
  check_payload(lbytes, lh, 1, labels);

  if (ih.dims.empty() || ih.dims[0] != lh.dims[0]) {
    throw FormatError(images.string() + ": image count " +
                      std::to_string(ih.dims.empty() ? 0 : ih.dims[0]) +
                      " does not match label count " + std::to_string(lh.dims[0]));
  }

  const int count = static_cast<int>(ih.dims[0]);
  std::vector<int> sample_shape;
  std::size_t width = 1;
  for (std::size_t i = 1; i < ih.dims.size(); ++i) {
    sample_shape.push_back(static_cast<int>(ih.dims[i]));
    width *= ih.dims[i];
  }
  if (sample_shape.empty()) sample_shape = {1};

  std::vector<double> vals(static_cast<std::size_t>(count) * width);
  if (ih.type == kTypeU8) {
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vals[i] = static_cast<double>(ibytes[ih.payload_offset + i]) / 255.0;
    }
  } else {
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vals[i] = read_f64_be(ibytes, ih.payload_offset + 8 * i);
    }
  }

  Dataset ds;
  ds.inputs = Tensor({count, static_cast<int>(width)}, std::move(vals));
  ds.labels.reserve(count);
  int max_label = 0;
  for (int i = 0; i < count; ++i) {
    int l = lbytes[lh.payload_offset + static_cast<std::size_t>(i)];
    ds.labels.push_back(l);
    max_label = std::max(max_label, l);
  }
  ds.sample_shape = sample_shape;
  ds.num_classes = max_label + 1;
  ds.split = "train";
  ds.provenance = "idx(" + images.string() + "," + labels.string() + ")";
  return ds;
}

namespace {

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<unsigned char> idx_label_bytes(const Dataset& ds) {
  std::vector<unsigned char> out = {0, 0, kTypeU8, 1};
  append_u32_be(out, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    if (l < 0 || l > 255) throw ContractError("write_idx: label " + std::to_string(l) +
                                              " does not fit in a byte");
    out.push_back(static_cast<unsigned char>(l));
  }
  return out;
}

std::vector<unsigned char> idx_image_header(const Dataset& ds, unsigned char type) {
  std::vector<unsigned char> out = {0, 0, type,
                                    static_cast<unsigned char>(1 + ds.sample_shape.size())};
  append_u32_be(out, static_cast<std::uint32_t>(ds.size()));
  for (int d : ds.sample_shape) append_u32_be(out, static_cast<std::uint32_t>(d));
  return out;
}

}  // namespace

void write_idx(const Dataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  std::vector<unsigned char> ibytes = idx_image_header(ds, kTypeU8);
  for (double v : ds.inputs.values()) {
    ibytes.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  write_file(images, ibytes);
  write_file(labels, idx_label_bytes(ds));
}

void write_idx_f64(const Dataset& ds, const std::filesystem::path& images,
                   const std::filesystem::path& labels) {
  std::vector<unsigned char> ibytes = idx_image_header(ds, kTypeF64);
  for (double v : ds.inputs.values()) append_f64_be(ibytes, v);
  write_file(images, ibytes);
  write_file(labels, idx_label_bytes(ds));
}

}  // namespace cni
