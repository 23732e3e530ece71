#include "cni/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

namespace cni {

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0; }

std::vector<double> per_sample_ce(const Tensor& probs, const std::vector<int>& y) {
  const int B = probs.shape()[0], C = probs.shape()[1];
  std::vector<double> losses(B);
  for (int b = 0; b < B; ++b) {
    double p = probs.values()[static_cast<std::size_t>(b) * C + y[b]];
    losses[b] = -std::log(std::max(p, 1e-300));
  }
  return losses;
}

}  // namespace

Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon, double lo, double hi) {
  if (!same_shape(x, x0)) {
    throw DimensionError("project_linf: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(x0.shape()));
  }
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& cv = x0.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = std::min(std::max(xv[i], cv[i] - epsilon), cv[i] + epsilon);
    out[i] = std::min(std::max(v, lo), hi);
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor attack_gradient(const Model& model, const Tensor& x, const std::vector<int>& y,
                       int eot_samples, std::span<RngStream> site_streams) {
  if (eot_samples < 1) throw ContractError("attack_gradient: eot_samples must be >= 1");
  std::vector<double> acc(x.size(), 0.0);
  for (int e = 0; e < eot_samples; ++e) {
    Graph g;
    Tensor input_leaf;
    Tensor logits = model.forward(g, x, site_streams, &input_leaf);
    Tensor loss = softmax_cross_entropy(logits, y);
    g.backward(loss);
    const auto& grad = input_leaf.grad();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad[i];
  }
  for (double& v : acc) v /= static_cast<double>(eot_samples);
  return Tensor(x.shape(), std::move(acc));
}

Tensor fgsm(const Model& model, const Tensor& x, const std::vector<int>& y, double epsilon,
            double lo, double hi, int eot_samples, std::span<RngStream> site_streams) {
  if (epsilon == 0.0) return x;
  Tensor grad = attack_gradient(model, x, y, eot_samples, site_streams);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  const auto& gv = grad.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = xv[i] + epsilon * sgn(gv[i]);
    out[i] = std::min(std::max(v, lo), hi);
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor pgd(const Model& model, const Tensor& x, const std::vector<int>& y,
           const AttackConfig& cfg, RngStream& rng, std::span<RngStream> site_streams) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return x;
  const double step = cfg.resolved_step();

  Tensor cur = x;
  if (cfg.random_start) {
    std::vector<double> start(x.size());
    for (std::size_t i = 0; i < start.size(); ++i) {
      start[i] = x.values()[i] + rng.uniform(-cfg.epsilon, cfg.epsilon);
    }
    cur = project_linf(Tensor(x.shape(), std::move(start)), x, cfg.epsilon, cfg.lo, cfg.hi);
  }
  for (int it = 0; it < cfg.k; ++it) {
    Tensor grad = attack_gradient(model, cur, y, cfg.eot_samples, site_streams);
    std::vector<double> stepped(cur.size());
    for (std::size_t i = 0; i < stepped.size(); ++i) {
      stepped[i] = cur.values()[i] + step * sgn(grad.values()[i]);
    }
    cur = project_linf(Tensor(x.shape(), std::move(stepped)), x, cfg.epsilon, cfg.lo, cfg.hi);
  }
  return cur;
}

AdversarialSet transfer_attack(const Model& source, const AttackConfig& cfg, const Dataset& ds,
                               RngStream rng, int batch_size) {
  cfg.validate();
  const int n = ds.size();
  const int d = ds.inputs.shape()[1];
  std::vector<double> adv(static_cast<std::size_t>(n) * d);
  for (int begin = 0, batch = 0; begin < n; begin += batch_size, ++batch) {
    int end = std::min(begin + batch_size, n);
    Tensor xb = ds.batch_inputs(begin, end);
    std::vector<int> yb = ds.batch_labels(begin, end);
    RngStream attack_rng = rng.child("transfer-attack", static_cast<std::uint64_t>(batch));
    std::vector<RngStream> streams =
        source.make_site_streams(rng.child("transfer-noise", static_cast<std::uint64_t>(batch)));
    Tensor xadv = pgd(source, xb, yb, cfg, attack_rng, streams);
    std::copy(xadv.values().begin(), xadv.values().end(),
              adv.begin() + static_cast<std::size_t>(begin) * d);
  }

  AdversarialSet set;
  set.source_digest = source.param_digest();
  set.config = cfg;
  set.data = ds;
  set.data.inputs = Tensor({n, d}, std::move(adv));
  set.data.split = "adversarial";
  std::ostringstream prov;
  prov << ds.provenance << "/transfer(source=" << std::hex << set.source_digest << ")";
  set.data.provenance = prov.str();
  return set;
}

void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& dir,
                          const std::string& prefix) {
  std::filesystem::create_directories(dir);
  write_idx_f64(set.data, dir / (prefix + "-images.idx"), dir / (prefix + "-labels.idx"));
  nlohmann::json meta;
  std::ostringstream hex;
  hex << std::hex << set.source_digest;
  meta["source_model_digest"] = hex.str();
  meta["attack"] = {{"epsilon", set.config.epsilon},
                    {"k", set.config.k},
                    {"step", set.config.step},
                    {"random_start", set.config.random_start},
                    {"eot_samples", set.config.eot_samples},
                    {"bounds", {set.config.lo, set.config.hi}}};
  meta["provenance"] = set.data.provenance;
  std::ofstream out(dir / (prefix + "-meta.json"));
  if (!out) throw IoError("cannot write " + (dir / (prefix + "-meta.json")).string());
  out << meta.dump(2) << "\n";
}

AdversarialSet load_adversarial_set(const std::filesystem::path& dir, const std::string& prefix) {
  AdversarialSet set;
  set.data = load_idx(dir / (prefix + "-images.idx"), dir / (prefix + "-labels.idx"));
  std::ifstream in(dir / (prefix + "-meta.json"));
  if (!in) throw IoError("cannot read " + (dir / (prefix + "-meta.json")).string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError((dir / (prefix + "-meta.json")).string() + ": " + e.what());
  }
  set.source_digest = std::stoull(meta.at("source_model_digest").get<std::string>(), nullptr, 16);
  const auto& a = meta.at("attack");
  set.config.epsilon = a.at("epsilon").get<double>();
  set.config.k = a.at("k").get<int>();
  set.config.step = a.at("step").get<double>();
  set.config.random_start = a.at("random_start").get<bool>();
  set.config.eot_samples = a.at("eot_samples").get<int>();
  set.config.lo = a.at("bounds")[0].get<double>();
  set.config.hi = a.at("bounds")[1].get<double>();
  set.data.provenance = meta.at("provenance").get<std::string>();
  set.data.split = "adversarial";
  return set;
}

BlackBoxModel BlackBoxModel::wrap_model(const Model& model, RngStream noise_parent) {
  auto query_index = std::make_shared<std::uint64_t>(0);
  return BlackBoxModel([&model, noise_parent, query_index](const Tensor& batch) {
    std::vector<RngStream> streams =
        model.make_site_streams(noise_parent.child("query", (*query_index)++));
    return softmax_rows(model.predict(batch, streams));
  });
}

Tensor BlackBoxModel::query(const Tensor& batch) {
  ++queries_;
  return fn_(batch);
}

Tensor nes_gradient_estimate(BlackBoxModel& bb, const Tensor& x, const std::vector<int>& y,
                             double sigma, int n_samples, RngStream& rng) {
  if (n_samples < 2 || n_samples % 2 != 0) {
    throw ContractError("nes_gradient_estimate: n_samples must be even and >= 2");
  }
  if (sigma <= 0.0) throw ContractError("nes_gradient_estimate: sigma must be > 0");
  if (x.shape().size() != 2) {
    throw DimensionError("nes_gradient_estimate: want [BxD] input, got " + shape_str(x.shape()));
  }
  const int B = x.shape()[0], d = x.shape()[1];
  if (static_cast<int>(y.size()) != B) {
    throw DimensionError("nes_gradient_estimate: batch/label count mismatch");
  }

  std::vector<double> ghat(x.size(), 0.0);
  std::vector<double> u(x.size());
  std::vector<double> plus(x.size()), minus(x.size());
  for (int pair = 0; pair < n_samples / 2; ++pair) {
    rng.fill_normal(u);
    for (std::size_t i = 0; i < u.size(); ++i) {
      plus[i] = x.values()[i] + sigma * u[i];
      minus[i] = x.values()[i] - sigma * u[i];
    }
    std::vector<double> lp = per_sample_ce(bb.query(Tensor(x.shape(), plus)), y);
    std::vector<double> lm = per_sample_ce(bb.query(Tensor(x.shape(), minus)), y);
    for (int b = 0; b < B; ++b) {
      double diff = lp[b] - lm[b];
      for (int j = 0; j < d; ++j) {
        ghat[static_cast<std::size_t>(b) * d + j] += diff * u[static_cast<std::size_t>(b) * d + j];
      }
    }
  }
  double norm = 1.0 / (sigma * static_cast<double>(n_samples));
  for (double& v : ghat) v *= norm;
  return Tensor(x.shape(), std::move(ghat));
}

Tensor blackbox_attack(BlackBoxModel& bb, const Tensor& x, const std::vector<int>& y,
                       const AttackConfig& cfg, double sigma, int n_samples, RngStream& rng) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return x;
  const double step = cfg.resolved_step();

  Tensor cur = x;
  if (cfg.random_start) {
    std::vector<double> start(x.size());
    for (std::size_t i = 0; i < start.size(); ++i) {
      start[i] = x.values()[i] + rng.uniform(-cfg.epsilon, cfg.epsilon);
    }
    cur = project_linf(Tensor(x.shape(), std::move(start)), x, cfg.epsilon, cfg.lo, cfg.hi);
  }
  for (int it = 0; it < cfg.k; ++it) {
    Tensor grad = nes_gradient_estimate(bb, cur, y, sigma, n_samples, rng);
    std::vector<double> stepped(cur.size());
    for (std::size_t i = 0; i < stepped.size(); ++i) {
      stepped[i] = cur.values()[i] + step * sgn(grad.values()[i]);
    }
    cur = project_linf(Tensor(x.shape(), std::move(stepped)), x, cfg.epsilon, cfg.lo, cfg.hi);
  }
  return cur;
}

}  // namespace cni
