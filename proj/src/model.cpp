#include "cni/model.hpp"

#include <cmath>
#include <cstring>

namespace cni {

namespace {

double values_std(const Tensor& t) {
  if (t.size() == 0) return 0.0;
  double mean = 0.0;
  for (double v : t.values()) mean += v;
  mean /= static_cast<double>(t.size());
  double var = 0.0;
  for (double v : t.values()) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(t.size()));
}

Tensor he_normal(std::vector<int> shape, int fan_in, RngStream& rng) {
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = std * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// Single source of parameter enumeration order; registry(), checkpointing
// and the forward pass all rely on it.
template <typename Layers, typename Fn>
void visit_params(Layers& layers, Fn&& fn) {
  for (auto& layer : layers) {
    if (layer.kind != LayerKind::Linear && layer.kind != LayerKind::Conv2d) continue;
    fn(layer.name + ".w", ParamKind::Weight, layer.w);
    if (layer.kind == LayerKind::Linear) fn(layer.name + ".b", ParamKind::Bias, layer.b);
    if (layer.weight_noise) {
      fn(layer.name + ".wn.s", ParamKind::NoiseS, layer.weight_noise->params.s);
      if (layer.weight_noise->kind == NoiseKind::LowRank) {
        fn(layer.name + ".wn.v", ParamKind::NoiseV, layer.weight_noise->params.v);
      }
    }
    if (layer.activation_noise) {
      fn(layer.name + ".an.s", ParamKind::NoiseS, layer.activation_noise->params.s);
      if (layer.activation_noise->kind == NoiseKind::LowRank) {
        fn(layer.name + ".an.v", ParamKind::NoiseV, layer.activation_noise->params.v);
      }
    }
  }
}

std::vector<int> shape_after(const Layer& layer, const std::vector<int>& in) {
  switch (layer.kind) {
    case LayerKind::Linear:
      return {layer.w.shape()[1]};
    case LayerKind::Conv2d: {
      if (in.size() != 3) throw DimensionError("conv layer expects {C,H,W} input");
      int H = in[1], W = in[2];
      int kh = layer.w.shape()[2], kw = layer.w.shape()[3];
      int OH = (H + 2 * layer.padding - kh) / layer.stride + 1;
      int OW = (W + 2 * layer.padding - kw) / layer.stride + 1;
      return {layer.w.shape()[0], OH, OW};
    }
    case LayerKind::Flatten:
      return {static_cast<int>(shape_numel(in))};
    case LayerKind::Relu:
      return in;
  }
  return in;
}

}  // namespace

Model Model::mlp(const std::vector<int>& input_shape, const std::vector<int>& hidden, int classes,
                 RngStream& rng) {
  Model m;
  m.input_shape_ = input_shape;
  m.classes_ = classes;
  int in = static_cast<int>(shape_numel(input_shape));
  int idx = 0;
  for (int h : hidden) {
    Layer fc{.kind = LayerKind::Linear, .name = "fc" + std::to_string(idx)};
    fc.w = he_normal({in, h}, in, rng);
    fc.b = Tensor::zeros({h});
    m.layers_.push_back(std::move(fc));
    m.layers_.push_back(Layer{.kind = LayerKind::Relu, .name = "relu" + std::to_string(idx)});
    in = h;
    ++idx;
  }
  Layer out{.kind = LayerKind::Linear, .name = "fc" + std::to_string(idx)};
  out.w = he_normal({in, classes}, in, rng);
  out.b = Tensor::zeros({classes});
  m.layers_.push_back(std::move(out));
  return m;
}

Model Model::cnn(const std::vector<int>& input_shape, int channels, int classes, RngStream& rng) {
  if (input_shape.size() != 3) throw DimensionError("cnn expects input_shape {C,H,W}");
  Model m;
  m.input_shape_ = input_shape;
  m.classes_ = classes;
  int C = input_shape[0];

  Layer conv{.kind = LayerKind::Conv2d, .name = "conv0", .stride = 1, .padding = 1};
  conv.w = he_normal({channels, C, 3, 3}, C * 3 * 3, rng);
  m.layers_.push_back(std::move(conv));
  m.layers_.push_back(Layer{.kind = LayerKind::Relu, .name = "relu0"});
  m.layers_.push_back(Layer{.kind = LayerKind::Flatten, .name = "flatten0"});

  std::vector<int> cur = shape_after(m.layers_[0], input_shape);
  int flat = static_cast<int>(shape_numel(cur));
  Layer fc{.kind = LayerKind::Linear, .name = "fc0"};
  fc.w = he_normal({flat, classes}, flat, rng);
  fc.b = Tensor::zeros({classes});
  m.layers_.push_back(std::move(fc));
  return m;
}

int Model::layer_output_numel(std::size_t idx) const {
  std::vector<int> cur = input_shape_;
  for (std::size_t i = 0; i <= idx; ++i) cur = shape_after(layers_[i], cur);
  return static_cast<int>(shape_numel(cur));
}

void Model::attach_noise(Defense defense, int rank, RngStream& rng) {
  bool weight_sites =
      defense == Defense::PniW || defense == Defense::CniW || defense == Defense::CniWA;
  bool activation_sites = defense == Defense::CniA || defense == Defense::CniWA;
  if (!weight_sites && !activation_sites) return;
  if (rank < 0) throw ContractError("attach_noise: negative rank");
  NoiseKind kind = defense == Defense::PniW ? NoiseKind::Diagonal : NoiseKind::LowRank;
  int m = kind == NoiseKind::Diagonal ? 0 : rank;

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& layer = layers_[i];
    if (layer.kind != LayerKind::Linear && layer.kind != LayerKind::Conv2d) continue;
    double wstd = values_std(layer.w);
    if (weight_sites) {
      InjectionSite site{.mode = NoiseMode::Weight, .kind = kind};
      site.params = init_noise(static_cast<int>(layer.w.size()), NoiseMode::Weight, m, wstd, rng);
      layer.weight_noise = std::move(site);
    }
    if (activation_sites) {
      InjectionSite site{.mode = NoiseMode::Activation, .kind = kind};
      site.params = init_noise(layer_output_numel(i), NoiseMode::Activation, m, wstd, rng);
      layer.activation_noise = std::move(site);
    }
  }
}

std::vector<ParamRef> Model::registry() {
  std::vector<ParamRef> out;
  visit_params(layers_, [&](std::string name, ParamKind kind, Tensor& t) {
    out.push_back(ParamRef{std::move(name), kind, &t});
  });
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  visit_params(layers_,
               [&](const std::string&, ParamKind, const Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_params(layers_, [&](std::string name, ParamKind, const Tensor& t) {
    out.emplace_back(std::move(name), &t);
  });
  return out;
}

BoundModel Model::bind(Graph* g) const {
  BoundModel bm;
  bm.model_ = this;
  bm.graph_ = g;
  visit_params(layers_, [&](const std::string&, ParamKind, const Tensor& t) {
    bm.slot_[&t] = bm.leaves_.size();
    bm.leaves_.push_back(g ? g->leaf(t) : t);
  });
  return bm;
}

Tensor Model::forward(Graph& g, const Tensor& x, std::span<RngStream> site_streams,
                      Tensor* input_leaf) const {
  return bind(&g).forward(x, site_streams, input_leaf);
}

Tensor Model::predict(const Tensor& x, std::span<RngStream> site_streams) const {
  return bind(nullptr).forward(x, site_streams);
}

Tensor BoundModel::forward(const Tensor& x, std::span<RngStream> site_streams,
                           Tensor* input_leaf) const {
  const Model& m = *model_;
  if (static_cast<int>(site_streams.size()) != m.num_sites()) {
    throw ContractError("forward: " + std::to_string(site_streams.size()) + " streams for " +
                        std::to_string(m.num_sites()) + " injection sites");
  }
  int flat = static_cast<int>(shape_numel(m.input_shape_));
  if (x.shape().size() != 2 || x.shape()[1] != flat) {
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match model dim " +
                         std::to_string(flat));
  }
  const int B = x.shape()[0];
  auto leaf_of = [&](const Tensor& t) -> const Tensor& { return leaves_[slot_.at(&t)]; };

  Tensor h = (graph_ && input_leaf) ? graph_->leaf(x) : x;
  if (input_leaf) *input_leaf = h;
  if (m.input_shape_.size() > 1) {
    std::vector<int> shaped = {B};
    shaped.insert(shaped.end(), m.input_shape_.begin(), m.input_shape_.end());
    h = reshape(h, shaped);
  }

  int site = 0;
  for (const Layer& layer : m.layers_) {
    switch (layer.kind) {
      case LayerKind::Linear:
      case LayerKind::Conv2d: {
        Tensor w = leaf_of(layer.w);
        if (layer.weight_noise) {
          const InjectionSite& inj = *layer.weight_noise;
          RngStream& stream = site_streams[site++];
          Tensor eps = inj.kind == NoiseKind::Diagonal
                           ? sample_vector_diagonal(leaf_of(inj.params.s), stream)
                           : sample_vector(leaf_of(inj.params.s), leaf_of(inj.params.v),
                                           inj.params.m, stream);
          w = add(w, reshape(eps, layer.w.shape()));
        }
        Tensor y = layer.kind == LayerKind::Linear
                       ? add_rowvec(matmul(h, w), leaf_of(layer.b))
                       : conv2d(h, w, layer.stride, layer.padding);
        if (layer.activation_noise) {
          const InjectionSite& inj = *layer.activation_noise;
          RngStream& stream = site_streams[site++];
          std::vector<int> orig = y.shape();
          int n = static_cast<int>(y.size()) / B;
          Tensor flat_y = orig.size() == 2 ? y : reshape(y, {B, n});
          Tensor noise = inj.kind == NoiseKind::Diagonal
                             ? sample_batch_diagonal(leaf_of(inj.params.s), B, stream)
                             : sample_batch(leaf_of(inj.params.s), leaf_of(inj.params.v),
                                            inj.params.m, B, stream);
          Tensor noisy = add(flat_y, noise);
          y = orig.size() == 2 ? noisy : reshape(noisy, orig);
        }
        h = y;
        break;
      }
      case LayerKind::Relu:
        h = relu(h);
        break;
      case LayerKind::Flatten: {
        int n = static_cast<int>(h.size()) / B;
        h = reshape(h, {B, n});
        break;
      }
    }
  }
  if (h.shape().size() != 2 || h.shape()[1] != m.classes_) {
    throw DimensionError("forward: network output " + shape_str(h.shape()) +
                         " does not match class count " + std::to_string(m.classes_));
  }
  return h;
}

int Model::num_sites() const {
  int n = 0;
  for (const auto& layer : layers_) {
    n += layer.weight_noise.has_value();
    n += layer.activation_noise.has_value();
  }
  return n;
}

std::vector<std::string> Model::site_names() const {
  std::vector<std::string> out;
  for (const auto& layer : layers_) {
    if (layer.weight_noise) out.push_back("noise:" + layer.name + ".w");
    if (layer.activation_noise) out.push_back("noise:" + layer.name + ".a");
  }
  return out;
}

std::vector<RngStream> Model::make_site_streams(const RngStream& parent) const {
  std::vector<RngStream> out;
  for (const std::string& name : site_names()) out.push_back(parent.child(name));
  return out;
}

std::uint64_t Model::param_digest() const {
  std::uint64_t h = fnv1a64(std::string_view("model"));
  visit_params(layers_, [&](const std::string& name, ParamKind, const Tensor& t) {
    h = fnv1a64(name, h);
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.values().data());
    h = fnv1a64(std::span<const unsigned char>(bytes, t.values().size() * sizeof(double)), h);
  });
  return h;
}

Model build_model(const ModelConfig& cfg, RngStream& rng) {
  RngStream init = rng.child("param-init");
  Model m;
  if (cfg.arch == "mlp") {
    m = Model::mlp(cfg.input_shape, cfg.hidden, cfg.classes, init);
  } else if (cfg.arch == "cnn") {
    m = Model::cnn(cfg.input_shape, cfg.conv_channels, cfg.classes, init);
  } else {
    throw ContractError("unknown arch '" + cfg.arch + "' (want mlp|cnn)");
  }
  RngStream noise_init = rng.child("noise-init");
  m.attach_noise(cfg.defense, cfg.rank, noise_init);
  return m;
}

}  // namespace cni
