#include "cni/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace cni {

void sgd_update(const std::vector<ParamRef>& registry,
                const std::vector<std::vector<double>>& grads, SgdState& state, double lr,
                double momentum, double weight_decay, double v_weight_decay, bool freeze_noise) {
  if (grads.size() != registry.size()) {
    throw ContractError("sgd_update: gradient count does not match registry");
  }
  if (state.velocity.empty()) {
    state.velocity.resize(registry.size());
    for (std::size_t i = 0; i < registry.size(); ++i) {
      state.velocity[i].assign(registry[i].tensor->size(), 0.0);
    }
    state.applied_decay.assign(registry.size(), 0.0);
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const ParamRef& p = registry[i];
    bool is_noise = p.kind == ParamKind::NoiseS || p.kind == ParamKind::NoiseV;
    if (freeze_noise && is_noise) {
      state.applied_decay[i] = 0.0;
      continue;
    }
    double decay = 0.0;
    if (p.kind == ParamKind::Weight) decay = weight_decay;
    if (p.kind == ParamKind::NoiseV) decay = weight_decay + v_weight_decay;
    state.applied_decay[i] = decay;

    auto& w = p.tensor->values();
    auto& v = state.velocity[i];
    const auto& g = grads[i];
    if (g.size() != w.size()) {
      throw ContractError("sgd_update: gradient size mismatch for " + p.name);
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum * v[j] + g[j] + decay * w[j];
      w[j] -= lr * v[j];
    }
  }
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ContractError("lr_schedule: negative epoch");
  double rate = cfg.lr;
  for (int milestone : cfg.lr_milestones) {
    if (epoch >= milestone) rate /= cfg.lr_decay_factor;
  }
  return rate;
}

StepMetrics adversarial_train_step(Model& model, const Tensor& x, const std::vector<int>& y,
                                   const TrainConfig& cfg, double lr, SgdState& sgd,
                                   RngStream& rng, std::span<RngStream> site_streams) {
  const double mix = cfg.loss_mix;
  StepMetrics metrics;
  metrics.clean_loss = std::numeric_limits<double>::quiet_NaN();
  metrics.adv_loss = std::numeric_limits<double>::quiet_NaN();

  Tensor x_adv;
  if (mix > 0.0) {
    x_adv = pgd(model, x, y, cfg.attack, rng, site_streams);
    metrics.attack_ran = cfg.attack.epsilon > 0.0;
  }

  Graph g;
  BoundModel bm = model.bind(&g);
  Tensor loss;
  if (mix < 1.0) {
    Tensor clean_loss = softmax_cross_entropy(bm.forward(x, site_streams), y);
    metrics.clean_loss = clean_loss.item();
    loss = clean_loss;
  }
  if (mix > 0.0) {
    Tensor adv_loss = softmax_cross_entropy(bm.forward(x_adv, site_streams), y);
    metrics.adv_loss = adv_loss.item();
    loss = mix >= 1.0 ? adv_loss : add(scale(loss, 1.0 - mix), scale(adv_loss, mix));
  }
  metrics.loss = loss.item();
  if (!std::isfinite(metrics.loss)) {
    std::ostringstream os;
    os << "non-finite training loss " << metrics.loss << " (clean=" << metrics.clean_loss
       << ", adv=" << metrics.adv_loss << ", lr=" << lr << ")";
    throw TrainingError(os.str());
  }

  g.backward(loss);
  auto registry = model.registry();
  std::vector<std::vector<double>> grads;
  grads.reserve(registry.size());
  for (const Tensor& leaf : bm.leaves()) grads.push_back(leaf.grad());
  sgd_update(registry, grads, sgd, lr, cfg.momentum, cfg.weight_decay, cfg.v_weight_decay,
             cfg.freeze_noise);
  return metrics;
}

const Checkpoint& select_checkpoint(const TrainHistory& history) {
  if (history.empty()) throw ContractError("select_checkpoint: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].val_accuracy > history[best].val_accuracy) best = i;
  }
  return history[best];
}

// --- checkpoint container ------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'N', 'I', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_string(std::vector<unsigned char>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) {
      throw FormatError("checkpoint: truncated at byte offset " + std::to_string(pos) +
                        " (need " + std::to_string(n) + " more bytes)");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int s = 0; s < 32; s += 8) v |= std::uint32_t(bytes[pos++]) << s;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int s = 0; s < 64; s += 8) v |= std::uint64_t(bytes[pos++]) << s;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string string() {
    std::uint32_t n = u32();
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  std::vector<unsigned char> out(kMagic, kMagic + 8);
  put_u32(out, kVersion);
  put_u64(out, config_digest(ck.config));
  put_string(out, to_json(ck.config));
  put_u32(out, static_cast<std::uint32_t>(ck.epoch));
  put_f64(out, ck.val_accuracy);
  put_u32(out, static_cast<std::uint32_t>(ck.rng.size()));
  for (const auto& [name, st] : ck.rng) {
    put_string(out, name);
    put_u64(out, st.key);
    put_u64(out, st.counter);
  }
  put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (int e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r{bytes};
  r.need(8);
  if (!std::equal(kMagic, kMagic + 8, bytes.begin())) {
    throw FormatError("checkpoint: bad magic at byte offset 0");
  }
  r.pos = 8;
  std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  std::uint64_t digest = r.u64();
  Checkpoint ck;
  ck.config = config_from_json(r.string());
  if (config_digest(ck.config) != digest) {
    throw FormatError("checkpoint: config digest mismatch");
  }
  ck.epoch = static_cast<int>(r.u32());
  ck.val_accuracy = r.f64();
  std::uint32_t nrng = r.u32();
  for (std::uint32_t i = 0; i < nrng; ++i) {
    std::string name = r.string();
    RngState st;
    st.key = r.u64();
    st.counter = r.u64();
    ck.rng.emplace_back(std::move(name), st);
  }
  std::uint32_t ntensors = r.u32();
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    std::string name = r.string();
    std::uint32_t rank = r.u32();
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(r.u32());
    std::vector<double> vals(shape_numel(shape));
    for (double& v : vals) v = r.f64();
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(vals)));
  }
  if (r.pos != bytes.size()) {
    throw FormatError("checkpoint: " + std::to_string(bytes.size() - r.pos) +
                      " trailing bytes at byte offset " + std::to_string(r.pos));
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::uint64_t checkpoint_digest(const Checkpoint& ck) {
  auto bytes = serialize_checkpoint(ck);
  return fnv1a64(std::span<const unsigned char>(bytes.data(), bytes.size()));
}

Model model_from_checkpoint(const Checkpoint& ck) {
  RngStream rng = RngStream::from_seed(ck.config.train.seed);
  Model model = build_model(ck.config.model, rng);
  auto registry = model.registry();
  if (registry.size() != ck.tensors.size()) {
    throw FormatError("checkpoint: " + std::to_string(ck.tensors.size()) + " tensors for " +
                      std::to_string(registry.size()) + " parameters");
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const auto& [name, t] = ck.tensors[i];
    if (name != registry[i].name || t.shape() != registry[i].tensor->shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' does not match parameter '" +
                        registry[i].name + "'");
    }
    *registry[i].tensor = t;
  }
  return model;
}

// --- evaluation -----------------------------------------------------------------

EvalResult evaluate(const Model& model, const Dataset& ds,
                    const std::optional<AttackConfig>& attack, int n_draws, RngStream rng,
                    int batch_size) {
  if (n_draws < 1) throw ContractError("evaluate: n_draws must be >= 1");
  if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
  EvalResult res;
  const int n = ds.size();
  for (int draw = 0; draw < n_draws; ++draw) {
    auto u = static_cast<std::uint64_t>(draw);
    std::vector<RngStream> noise = model.make_site_streams(rng.child("eval-noise", u));
    std::vector<RngStream> attack_noise =
        model.make_site_streams(rng.child("eval-attack-noise", u));
    RngStream attack_rng = rng.child("eval-attack", u);
    int correct = 0;
    for (int begin = 0; begin < n; begin += batch_size) {
      int end = std::min(begin + batch_size, n);
      Tensor xb = ds.batch_inputs(begin, end);
      std::vector<int> yb = ds.batch_labels(begin, end);
      if (attack) xb = pgd(model, xb, yb, *attack, attack_rng, attack_noise);
      std::vector<int> pred = argmax_rows(model.predict(xb, noise));
      for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == yb[i]) ++correct;
      }
    }
    res.per_draw.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  double mean = std::accumulate(res.per_draw.begin(), res.per_draw.end(), 0.0) /
                static_cast<double>(n_draws);
  double var = 0.0;
  for (double a : res.per_draw) var += (a - mean) * (a - mean);
  res.mean_accuracy = mean;
  res.std_accuracy = std::sqrt(var / static_cast<double>(n_draws));
  return res;
}

EvalResult evaluate_on(const Model& model, const Dataset& ds, int n_draws, RngStream rng,
                       int batch_size) {
  return evaluate(model, ds, std::nullopt, n_draws, rng, batch_size);
}

// --- trainer ---------------------------------------------------------------------

Trainer::Trainer(Model model, RunConfig cfg) : model_(std::move(model)), cfg_(std::move(cfg)) {
  cfg_.train.validate();
  RngStream root = RngStream::from_seed(cfg_.train.seed);
  loop_rng_ = root.child("train-loop");
  site_streams_ = model_.make_site_streams(root.child("train-noise"));
}

StepMetrics Trainer::step(const Tensor& x, const std::vector<int>& y, double lr) {
  ++steps_;
  return adversarial_train_step(model_, x, y, cfg_.train, lr, sgd_, loop_rng_, site_streams_);
}

double Trainer::run_epoch(const Dataset& train, int epoch) {
  const int n = train.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Fisher-Yates off the sequential loop stream.
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(loop_rng_.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[j]);
  }
  double lr = lr_schedule(epoch, cfg_.train);
  double total = 0.0;
  int batches = 0;
  for (int begin = 0; begin < n; begin += cfg_.train.batch_size) {
    int end = std::min(begin + cfg_.train.batch_size, n);
    std::vector<int> idx(order.begin() + begin, order.begin() + end);
    Dataset batch = train.subset(idx, train.split);
    StepMetrics m = step(batch.inputs, batch.labels, lr);
    total += m.loss;
    ++batches;
  }
  return batches > 0 ? total / batches : 0.0;
}

FitResult Trainer::fit(const Dataset& train, const Dataset& val) {
  FitResult out;
  RngStream root = RngStream::from_seed(cfg_.train.seed);
  for (int epoch = 0; epoch < cfg_.train.epochs; ++epoch) {
    double train_loss = run_epoch(train, epoch);
    EvalResult ev = evaluate_on(model_, val, 1, root.child("val-eval", epoch),
                                cfg_.eval.batch_size);
    out.history.push_back(snapshot(epoch, ev.mean_accuracy));
    out.metrics.push_back(EpochMetrics{epoch, lr_schedule(epoch, cfg_.train), train_loss,
                                       ev.mean_accuracy});
  }
  return out;
}

Checkpoint Trainer::snapshot(int epoch, double val_accuracy) const {
  Checkpoint ck;
  ck.config = cfg_;
  ck.epoch = epoch;
  ck.val_accuracy = val_accuracy;
  ck.rng.emplace_back("train-loop", loop_rng_.state());
  auto names = model_.site_names();
  for (std::size_t i = 0; i < site_streams_.size(); ++i) {
    ck.rng.emplace_back(names[i], site_streams_[i].state());
  }
  for (const auto& [name, t] : model_.named_parameters()) ck.tensors.emplace_back(name, *t);
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  auto registry = model_.registry();
  if (registry.size() != ck.tensors.size()) {
    throw ContractError("restore: checkpoint does not match model");
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    if (ck.tensors[i].first != registry[i].name) {
      throw ContractError("restore: tensor order mismatch at '" + ck.tensors[i].first + "'");
    }
    *registry[i].tensor = ck.tensors[i].second;
  }
  auto names = model_.site_names();
  for (const auto& [name, st] : ck.rng) {
    if (name == "train-loop") {
      loop_rng_.set_state(st);
      continue;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) site_streams_[i].set_state(st);
    }
  }
}

void write_metrics_csv(const std::vector<EpochMetrics>& metrics,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics " + path.string());
  out << "epoch,lr,train_loss,val_accuracy\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& m : metrics) {
    out << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.val_accuracy << '\n';
  }
  if (!out) throw IoError("failed writing metrics " + path.string());
}

}  // namespace cni
