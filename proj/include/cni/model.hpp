#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cni/config.hpp"
#include "cni/noise.hpp"
#include "cni/rng.hpp"
#include "cni/tensor.hpp"

namespace cni {

enum class LayerKind { Linear, Conv2d, Relu, Flatten };

struct Layer {
  LayerKind kind = LayerKind::Relu;
  std::string name;
  Tensor w;  // Linear: [in×out]; Conv2d: [F×C×kh×kw]
  Tensor b;  // Linear only, [out]
  int stride = 1;
  int padding = 0;
  std::optional<InjectionSite> weight_noise;
  std::optional<InjectionSite> activation_noise;
};

enum class ParamKind { Weight, Bias, NoiseS, NoiseV };

// Non-owning handle into a model's parameter storage.
struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor* tensor;
};

class Model;

// Parameters lifted onto one graph (or plain copies when untracked) so that
// several forward passes in a single step share leaves and accumulate their
// gradients together.
class BoundModel {
 public:
  // Logits for a batch; each noise site draws fresh from its stream. When
  // input_leaf is non-null the input is registered as a leaf and handed back
  // for d(loss)/d(input) reads.
  Tensor forward(const Tensor& x, std::span<RngStream> site_streams,
                 Tensor* input_leaf = nullptr) const;

  // Parallel to Model::registry() order.
  const std::vector<Tensor>& leaves() const { return leaves_; }

 private:
  friend class Model;
  const Model* model_ = nullptr;
  Graph* graph_ = nullptr;
  std::vector<Tensor> leaves_;
  std::unordered_map<const Tensor*, std::size_t> slot_;
};

// Small feed-forward classifier. Layers may carry weight- and/or
// activation-noise injectors; one fresh draw happens per forward call per
// site (weight noise shared across the batch, activation noise per sample).
class Model {
 public:
  Model() = default;

  static Model mlp(const std::vector<int>& input_shape, const std::vector<int>& hidden,
                   int classes, RngStream& rng);
  // conv(3x3, pad 1) -> relu -> flatten -> linear; input_shape = {C,H,W}.
  static Model cnn(const std::vector<int>& input_shape, int channels, int classes,
                   RngStream& rng);

  // Attach injectors per defense variant. Rank applies to cni-* variants.
  void attach_noise(Defense defense, int rank, RngStream& rng);

  // Every trainable tensor exactly once, in stable order. Pointers are
  // invalidated by copying or moving the model.
  std::vector<ParamRef> registry();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;

  BoundModel bind(Graph* g) const;

  // One-shot tracked forward.
  Tensor forward(Graph& g, const Tensor& x, std::span<RngStream> site_streams,
                 Tensor* input_leaf = nullptr) const;
  // Untracked forward (evaluation/query path); same arithmetic, no tape.
  Tensor predict(const Tensor& x, std::span<RngStream> site_streams) const;

  int num_sites() const;
  std::vector<std::string> site_names() const;
  // Independent per-site streams derived by site name.
  std::vector<RngStream> make_site_streams(const RngStream& parent) const;

  int num_classes() const { return classes_; }
  const std::vector<int>& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  // FNV-1a over all parameter payloads; identifies a model snapshot.
  std::uint64_t param_digest() const;

 private:
  friend class BoundModel;
  // Per-sample output element count of layer `idx` (activation-site width).
  int layer_output_numel(std::size_t idx) const;

  std::vector<Layer> layers_;
  std::vector<int> input_shape_;
  int classes_ = 0;
};

Model build_model(const ModelConfig& cfg, RngStream& rng);

}  // namespace cni
