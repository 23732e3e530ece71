#include "cni/config.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "cni/rng.hpp"

namespace cni {

using nlohmann::json;

Defense defense_from_string(const std::string& s) {
  if (s == "none") return Defense::None;
  if (s == "adv-train") return Defense::AdvTrain;
  if (s == "pni-w") return Defense::PniW;
  if (s == "cni-w") return Defense::CniW;
  if (s == "cni-a") return Defense::CniA;
  if (s == "cni-w+a") return Defense::CniWA;
  throw ContractError("unknown defense '" + s +
                      "' (want none|adv-train|pni-w|cni-w|cni-a|cni-w+a)");
}

std::string to_string(Defense d) {
  switch (d) {
    case Defense::None: return "none";
    case Defense::AdvTrain: return "adv-train";
    case Defense::PniW: return "pni-w";
    case Defense::CniW: return "cni-w";
    case Defense::CniA: return "cni-a";
    case Defense::CniWA: return "cni-w+a";
  }
  return "none";
}

namespace {

// Assign dst from obj[key] when present; track consumed keys so leftovers can
// be reported as typos.
template <typename T>
void take(const json& obj, std::vector<std::string>& seen, const char* key, T& dst) {
  seen.push_back(key);
  if (obj.contains(key)) obj.at(key).get_to(dst);
}

void check_consumed(const json& obj, const std::vector<std::string>& seen, const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(seen.begin(), seen.end(), it.key()) == seen.end()) {
      throw FormatError(std::string("config: unknown key '") + it.key() + "' in " + where);
    }
  }
}

json attack_to_json(const AttackConfig& a) {
  return json{{"epsilon", a.epsilon}, {"k", a.k},
              {"step", a.step},       {"random_start", a.random_start},
              {"eot_samples", a.eot_samples}, {"bounds", json::array({a.lo, a.hi})}};
}

AttackConfig attack_from_json(const json& j) {
  AttackConfig a;
  std::vector<std::string> seen;
  take(j, seen, "epsilon", a.epsilon);
  take(j, seen, "k", a.k);
  take(j, seen, "step", a.step);
  take(j, seen, "random_start", a.random_start);
  take(j, seen, "eot_samples", a.eot_samples);
  seen.push_back("bounds");
  if (j.contains("bounds")) {
    auto b = j.at("bounds");
    if (!b.is_array() || b.size() != 2) throw FormatError("config: attack.bounds must be [lo,hi]");
    a.lo = b[0].get<double>();
    a.hi = b[1].get<double>();
  }
  check_consumed(j, seen, "attack");
  return a;
}

}  // namespace

std::string to_json(const RunConfig& cfg) {
  json j;
  j["train"] = json{{"epochs", cfg.train.epochs},
                    {"batch_size", cfg.train.batch_size},
                    {"lr", cfg.train.lr},
                    {"momentum", cfg.train.momentum},
                    {"lr_milestones", cfg.train.lr_milestones},
                    {"lr_decay_factor", cfg.train.lr_decay_factor},
                    {"weight_decay", cfg.train.weight_decay},
                    {"v_weight_decay", cfg.train.v_weight_decay},
                    {"attack", attack_to_json(cfg.train.attack)},
                    {"loss_mix", cfg.train.loss_mix},
                    {"freeze_noise", cfg.train.freeze_noise},
                    {"seed", cfg.train.seed}};
  j["model"] = json{{"arch", cfg.model.arch},
                    {"input_shape", cfg.model.input_shape},
                    {"hidden", cfg.model.hidden},
                    {"conv_channels", cfg.model.conv_channels},
                    {"classes", cfg.model.classes},
                    {"defense", to_string(cfg.model.defense)},
                    {"rank", cfg.model.rank}};
  j["data"] = json{{"source", cfg.data.source},
                   {"classes", cfg.data.classes},
                   {"dim", cfg.data.dim},
                   {"per_class", cfg.data.per_class},
                   {"val_per_class", cfg.data.val_per_class},
                   {"test_per_class", cfg.data.test_per_class},
                   {"separation", cfg.data.separation},
                   {"idx_images", cfg.data.idx_images},
                   {"idx_labels", cfg.data.idx_labels},
                   {"idx_test_images", cfg.data.idx_test_images},
                   {"idx_test_labels", cfg.data.idx_test_labels},
                   {"val_fraction", cfg.data.val_fraction}};
  j["eval"] = json{{"noise_draws", cfg.eval.noise_draws}, {"batch_size", cfg.eval.batch_size}};
  j["sweep"] = json{{"variable", cfg.sweep.variable},
                    {"values", cfg.sweep.values},
                    {"repetitions", cfg.sweep.repetitions}};
  return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  std::vector<std::string> top_seen;
  top_seen.insert(top_seen.end(), {"train", "model", "data", "eval", "sweep"});
  check_consumed(j, top_seen, "config root");

  if (j.contains("train")) {
    const json& t = j.at("train");
    std::vector<std::string> seen;
    take(t, seen, "epochs", cfg.train.epochs);
    take(t, seen, "batch_size", cfg.train.batch_size);
    take(t, seen, "lr", cfg.train.lr);
    take(t, seen, "momentum", cfg.train.momentum);
    take(t, seen, "lr_milestones", cfg.train.lr_milestones);
    take(t, seen, "lr_decay_factor", cfg.train.lr_decay_factor);
    take(t, seen, "weight_decay", cfg.train.weight_decay);
    take(t, seen, "v_weight_decay", cfg.train.v_weight_decay);
    take(t, seen, "loss_mix", cfg.train.loss_mix);
    take(t, seen, "freeze_noise", cfg.train.freeze_noise);
    take(t, seen, "seed", cfg.train.seed);
    seen.push_back("attack");
    if (t.contains("attack")) cfg.train.attack = attack_from_json(t.at("attack"));
    check_consumed(t, seen, "train");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    std::vector<std::string> seen;
    take(m, seen, "arch", cfg.model.arch);
    take(m, seen, "input_shape", cfg.model.input_shape);
    take(m, seen, "hidden", cfg.model.hidden);
    take(m, seen, "conv_channels", cfg.model.conv_channels);
    take(m, seen, "classes", cfg.model.classes);
    take(m, seen, "rank", cfg.model.rank);
    seen.push_back("defense");
    if (m.contains("defense")) {
      cfg.model.defense = defense_from_string(m.at("defense").get<std::string>());
    }
    check_consumed(m, seen, "model");
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    std::vector<std::string> seen;
    take(d, seen, "source", cfg.data.source);
    take(d, seen, "classes", cfg.data.classes);
    take(d, seen, "dim", cfg.data.dim);
    take(d, seen, "per_class", cfg.data.per_class);
    take(d, seen, "val_per_class", cfg.data.val_per_class);
    take(d, seen, "test_per_class", cfg.data.test_per_class);
    take(d, seen, "separation", cfg.data.separation);
    take(d, seen, "idx_images", cfg.data.idx_images);
    take(d, seen, "idx_labels", cfg.data.idx_labels);
    take(d, seen, "idx_test_images", cfg.data.idx_test_images);
    take(d, seen, "idx_test_labels", cfg.data.idx_test_labels);
    take(d, seen, "val_fraction", cfg.data.val_fraction);
    check_consumed(d, seen, "data");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    std::vector<std::string> seen;
    take(e, seen, "noise_draws", cfg.eval.noise_draws);
    take(e, seen, "batch_size", cfg.eval.batch_size);
    check_consumed(e, seen, "eval");
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    std::vector<std::string> seen;
    take(s, seen, "variable", cfg.sweep.variable);
    take(s, seen, "values", cfg.sweep.values);
    take(s, seen, "repetitions", cfg.sweep.repetitions);
    check_consumed(s, seen, "sweep");
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return config_from_json(text);
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path.string());
  out << to_json(cfg);
  if (!out) throw IoError("failed writing config file " + path.string());
}

std::uint64_t config_digest(const RunConfig& cfg) { return fnv1a64(to_json(cfg)); }

}  // namespace cni
