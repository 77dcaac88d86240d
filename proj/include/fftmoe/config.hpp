// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fftmoe/backbone.hpp"
#include "fftmoe/data.hpp"
#include "fftmoe/error.hpp"
#include "fftmoe/federation.hpp"
#include "fftmoe/losses.hpp"
#include "fftmoe/moe_adapter.hpp"
#include "fftmoe/optim.hpp"

namespace fftmoe {

/// Every knob of a run. Serialized as flat `section.key = value` lines.
struct ExperimentConfig {
  BackboneConfig backbone;  // backbone.frozen_seed is overwritten from seeds.frozen

  struct Adapter {
    std::size_t experts = 8;
    std::size_t rank = 2;  // per-expert intermediate width r_m
    GatingMode gating = GatingMode::topk_softmax;
    Activation activation = Activation::gelu;
    double init_std = 0.02;
  } adapter;

  struct Sparsity {
    SparsityPolicy::Kind policy = SparsityPolicy::Kind::fixed;
    std::size_t k = 2;
    std::size_t k_high = 4;
    std::size_t k_low = 1;
    double high_fraction = 0.5;
    std::size_t test_k = 0;  // 0: max over clients' K_n
  } sparsity;

  struct Federation {
    std::size_t clients = 4;
    std::size_t rounds = 20;
    std::size_t epochs = 1;
    std::size_t batch_size = 128;
    double lr = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    WeightDecayMode decay_mode = WeightDecayMode::decoupled;
    bool reset_optimizer = false;
    std::size_t threads = 1;
  } federation;

  AuxLossConfig aux;

  struct Data {
    std::string source = "synthetic";  // synthetic | csv
    std::size_t samples = 2000;
    double separation = 3.0;
    std::string csv_path;
    double test_fraction = 0.2;
    PartitionScheme partition = PartitionScheme::dirichlet;
    double alpha = 1.0;
  } data;

  struct Seeds {
    std::uint64_t run = 1;
    std::uint64_t data = 2;
    std::uint64_t frozen = 3;
  } seeds;

  struct Output {
    std::string root = "runs";
  } output;

  BackboneConfig resolved_backbone() const {
    BackboneConfig b = backbone;
    b.frozen_seed = seeds.frozen;
    return b;
  }

  AdapterSpec adapter_spec() const {
    AdapterSpec s;
    s.width = backbone.width;
    s.ranks.assign(adapter.experts, adapter.rank);
    s.top_k = sparsity.policy == SparsityPolicy::Kind::fixed ? sparsity.k : std::max(sparsity.k_high, sparsity.k_low);
    s.activation = adapter.activation;
    s.gating = adapter.gating;
    s.init_std = adapter.init_std;
    return s;
  }

  SparsityPolicy sparsity_policy() const { return {sparsity.policy, sparsity.k, sparsity.k_high, sparsity.k_low}; }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = federation.epochs;
    t.batch_size = federation.batch_size;
    t.adam = {federation.lr, federation.weight_decay, federation.beta1, federation.beta2, federation.eps, federation.decay_mode};
    t.aux = aux;
    t.reset_optimizer = federation.reset_optimizer;
    t.threads = federation.threads;
    return t;
  }

  PartitionSpec partition_spec() const { return {data.partition, federation.clients, data.alpha, seeds.data}; }
};

namespace detail {

inline std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': integer out of range '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a real number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
  std::string allowed;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  }
  throw ConfigError("key '" + key + "': '" + v + "' is not one of {" + allowed + "}");
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

// All keys in file order.
inline const std::vector<ConfigKey>& config_keys() {
  using C = ExperimentConfig;
  using namespace detail;
  auto size_key = [](std::string name, auto member) {
    return ConfigKey{name, [member](const C& c) { return std::to_string(member(const_cast<C&>(c))); },
                     [name, member](C& c, const std::string& v) { member(c) = static_cast<std::size_t>(parse_u64(name, v)); }};
  };
  auto u64_key = [](std::string name, auto member) {
    return ConfigKey{name, [member](const C& c) { return std::to_string(member(const_cast<C&>(c))); },
                     [name, member](C& c, const std::string& v) { member(c) = parse_u64(name, v); }};
  };
  auto real_key = [](std::string name, auto member) {
    return ConfigKey{name, [member](const C& c) { return fmt_exact(member(const_cast<C&>(c))); },
                     [name, member](C& c, const std::string& v) { member(c) = parse_real(name, v); }};
  };
  auto bool_key = [](std::string name, auto member) {
    return ConfigKey{name, [member](const C& c) { return std::string(member(const_cast<C&>(c)) ? "true" : "false"); },
                     [name, member](C& c, const std::string& v) { member(c) = parse_bool(name, v); }};
  };

  static const std::vector<ConfigKey> keys = {
      size_key("backbone.layers", [](C& c) -> std::size_t& { return c.backbone.layers; }),
      size_key("backbone.width", [](C& c) -> std::size_t& { return c.backbone.width; }),
      size_key("backbone.heads", [](C& c) -> std::size_t& { return c.backbone.heads; }),
      size_key("backbone.seq_len", [](C& c) -> std::size_t& { return c.backbone.seq_len; }),
      size_key("backbone.classes", [](C& c) -> std::size_t& { return c.backbone.classes; }),
      size_key("backbone.input_dim", [](C& c) -> std::size_t& { return c.backbone.input_dim; }),
      size_key("backbone.ffn_mult", [](C& c) -> std::size_t& { return c.backbone.ffn_mult; }),
      bool_key("backbone.trainable_head", [](C& c) -> bool& { return c.backbone.trainable_head; }),

      size_key("adapter.experts", [](C& c) -> std::size_t& { return c.adapter.experts; }),
      size_key("adapter.rank", [](C& c) -> std::size_t& { return c.adapter.rank; }),
      ConfigKey{"adapter.gating", [](const C& c) { return std::string(to_string(c.adapter.gating)); },
                [](C& c, const std::string& v) {
                  c.adapter.gating = parse_enum<GatingMode>("adapter.gating", v,
                                                            {{"topk_softmax", GatingMode::topk_softmax}, {"uniform_one", GatingMode::uniform_one}});
                }},
      ConfigKey{"adapter.activation", [](const C& c) { return std::string(to_string(c.adapter.activation)); },
                [](C& c, const std::string& v) {
                  c.adapter.activation = parse_enum<Activation>("adapter.activation", v, {{"gelu", Activation::gelu}, {"linear", Activation::linear}});
                }},
      real_key("adapter.init_std", [](C& c) -> double& { return c.adapter.init_std; }),

      ConfigKey{"sparsity.policy",
                [](const C& c) { return std::string(c.sparsity.policy == SparsityPolicy::Kind::fixed ? "fixed" : "capability"); },
                [](C& c, const std::string& v) {
                  c.sparsity.policy = parse_enum<SparsityPolicy::Kind>(
                      "sparsity.policy", v, {{"fixed", SparsityPolicy::Kind::fixed}, {"capability", SparsityPolicy::Kind::capability}});
                }},
      size_key("sparsity.k", [](C& c) -> std::size_t& { return c.sparsity.k; }),
      size_key("sparsity.k_high", [](C& c) -> std::size_t& { return c.sparsity.k_high; }),
      size_key("sparsity.k_low", [](C& c) -> std::size_t& { return c.sparsity.k_low; }),
      real_key("sparsity.high_fraction", [](C& c) -> double& { return c.sparsity.high_fraction; }),
      size_key("sparsity.test_k", [](C& c) -> std::size_t& { return c.sparsity.test_k; }),

      size_key("federation.clients", [](C& c) -> std::size_t& { return c.federation.clients; }),
      size_key("federation.rounds", [](C& c) -> std::size_t& { return c.federation.rounds; }),
      size_key("federation.epochs", [](C& c) -> std::size_t& { return c.federation.epochs; }),
      size_key("federation.batch_size", [](C& c) -> std::size_t& { return c.federation.batch_size; }),
      real_key("federation.lr", [](C& c) -> double& { return c.federation.lr; }),
      real_key("federation.weight_decay", [](C& c) -> double& { return c.federation.weight_decay; }),
      real_key("federation.beta1", [](C& c) -> double& { return c.federation.beta1; }),
      real_key("federation.beta2", [](C& c) -> double& { return c.federation.beta2; }),
      real_key("federation.eps", [](C& c) -> double& { return c.federation.eps; }),
      ConfigKey{"federation.weight_decay_mode", [](const C& c) { return std::string(to_string(c.federation.decay_mode)); },
                [](C& c, const std::string& v) {
                  c.federation.decay_mode = parse_enum<WeightDecayMode>(
                      "federation.weight_decay_mode", v, {{"decoupled", WeightDecayMode::decoupled}, {"l2", WeightDecayMode::l2}});
                }},
      bool_key("federation.reset_optimizer", [](C& c) -> bool& { return c.federation.reset_optimizer; }),
      size_key("federation.threads", [](C& c) -> std::size_t& { return c.federation.threads; }),

      real_key("aux.lambda", [](C& c) -> double& { return c.aux.lambda; }),
      real_key("aux.theta_th", [](C& c) -> double& { return c.aux.theta_th; }),
      ConfigKey{"aux.reduction", [](const C& c) { return std::string(to_string(c.aux.reduction)); },
                [](C& c, const std::string& v) {
                  c.aux.reduction = parse_enum<LayerReduction>("aux.reduction", v, {{"mean", LayerReduction::mean}, {"sum", LayerReduction::sum}});
                }},

      ConfigKey{"data.source", [](const C& c) { return c.data.source; },
                [](C& c, const std::string& v) {
                  c.data.source = parse_enum<std::string>("data.source", v, {{"synthetic", "synthetic"}, {"csv", "csv"}});
                }},
      size_key("data.samples", [](C& c) -> std::size_t& { return c.data.samples; }),
      real_key("data.separation", [](C& c) -> double& { return c.data.separation; }),
      ConfigKey{"data.csv_path", [](const C& c) { return c.data.csv_path; }, [](C& c, const std::string& v) { c.data.csv_path = v; }},
      real_key("data.test_fraction", [](C& c) -> double& { return c.data.test_fraction; }),
      ConfigKey{"data.partition", [](const C& c) { return std::string(to_string(c.data.partition)); },
                [](C& c, const std::string& v) {
                  c.data.partition = parse_enum<PartitionScheme>(
                      "data.partition", v,
                      {{"dirichlet", PartitionScheme::dirichlet}, {"one_label", PartitionScheme::one_label}, {"iid", PartitionScheme::iid}});
                }},
      real_key("data.alpha", [](C& c) -> double& { return c.data.alpha; }),

      u64_key("seeds.run", [](C& c) -> std::uint64_t& { return c.seeds.run; }),
      u64_key("seeds.data", [](C& c) -> std::uint64_t& { return c.seeds.data; }),
      u64_key("seeds.frozen", [](C& c) -> std::uint64_t& { return c.seeds.frozen; }),

      ConfigKey{"output.root", [](const C& c) { return c.output.root; }, [](C& c, const std::string& v) { c.output.root = v; }},
  };
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const ConfigKey& k : config_keys()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find_config_key(key).set(cfg, detail::trim(value));
}

inline std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return find_config_key(key).get(cfg); }

/// Applies `key = value` lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& origin = "<text>") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void apply_config_file(ExperimentConfig& cfg, const std::string& path) { apply_config_text(cfg, read_text_file(path), path); }

// Every key in registry order, values printed so that re-reading is exact.
inline std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const ConfigKey& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::vector<std::string> preset_names() { return {"agnews-like", "cifar-like"}; }

/// Named presets mirroring the reference federated setups: 4 clients and 4
/// classes, or 10 clients and 10 classes; 20 rounds of one local epoch with
/// batch 128 and Adam (lr 3e-4, weight decay 0.01).
inline void apply_preset(ExperimentConfig& cfg, const std::string& name) {
  if (name != "agnews-like" && name != "cifar-like") throw ConfigError("unknown preset '" + name + "'");
  const bool cifar = name == "cifar-like";
  cfg.federation.clients = cifar ? 10 : 4;
  cfg.backbone.classes = cifar ? 10 : 4;
  cfg.federation.rounds = 20;
  cfg.federation.epochs = 1;
  cfg.federation.batch_size = 128;
  cfg.federation.lr = 3e-4;
  cfg.federation.weight_decay = 0.01;
}

inline void validate(const ExperimentConfig& cfg) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("key '" + key + "': " + why); };
  const auto& b = cfg.backbone;
  if (b.layers == 0) fail("backbone.layers", "must be positive");
  if (b.width == 0) fail("backbone.width", "must be positive");
  if (b.heads == 0 || b.width % b.heads != 0) fail("backbone.heads", "must divide backbone.width");
  if (b.seq_len == 0) fail("backbone.seq_len", "must be positive");
  if (b.classes < 2) fail("backbone.classes", "must be at least 2");
  if (b.input_dim == 0) fail("backbone.input_dim", "must be positive");
  if (b.ffn_mult == 0) fail("backbone.ffn_mult", "must be positive");

  const std::size_t m = cfg.adapter.experts;
  if (m == 0) fail("adapter.experts", "must be positive");
  if (cfg.adapter.rank == 0) fail("adapter.rank", "must be positive");
  if (!(cfg.adapter.init_std >= 0.0)) fail("adapter.init_std", "must be non-negative");

  auto k_ok = [m](std::size_t k) { return k >= 1 && k <= m; };
  if (cfg.sparsity.policy == SparsityPolicy::Kind::fixed) {
    if (!k_ok(cfg.sparsity.k)) fail("sparsity.k", "must lie in [1, adapter.experts]");
  } else {
    if (!k_ok(cfg.sparsity.k_high)) fail("sparsity.k_high", "must lie in [1, adapter.experts]");
    if (!k_ok(cfg.sparsity.k_low)) fail("sparsity.k_low", "must lie in [1, adapter.experts]");
  }
  if (!(cfg.sparsity.high_fraction >= 0.0 && cfg.sparsity.high_fraction <= 1.0)) fail("sparsity.high_fraction", "must lie in [0, 1]");
  if (cfg.sparsity.test_k > m) fail("sparsity.test_k", "must be 0 or lie in [1, adapter.experts]");

  const auto& f = cfg.federation;
  if (f.clients == 0) fail("federation.clients", "must be positive");
  if (f.epochs == 0) fail("federation.epochs", "must be positive");
  if (f.batch_size == 0) fail("federation.batch_size", "must be positive");
  if (!(f.lr >= 0.0)) fail("federation.lr", "must be non-negative");
  if (!(f.weight_decay >= 0.0)) fail("federation.weight_decay", "must be non-negative");
  if (!(f.beta1 >= 0.0 && f.beta1 < 1.0)) fail("federation.beta1", "must lie in [0, 1)");
  if (!(f.beta2 >= 0.0 && f.beta2 < 1.0)) fail("federation.beta2", "must lie in [0, 1)");
  if (!(f.eps > 0.0)) fail("federation.eps", "must be positive");
  if (f.threads == 0) fail("federation.threads", "must be positive");

  if (!(cfg.aux.lambda >= 0.0)) fail("aux.lambda", "must be non-negative");
  if (!(cfg.aux.theta_th > 0.0 && cfg.aux.theta_th <= 1.0)) fail("aux.theta_th", "must lie in (0, 1]");

  const auto& d = cfg.data;
  if (d.source == "synthetic") {
    if (d.samples < b.classes) fail("data.samples", "must be at least backbone.classes");
    if (!(d.separation > 0.0)) fail("data.separation", "must be positive");
  } else if (d.csv_path.empty()) {
    fail("data.csv_path", "required when data.source = csv");
  }
  if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0)) fail("data.test_fraction", "must lie in (0, 1)");
  if (d.partition == PartitionScheme::dirichlet && !(d.alpha > 0.0)) fail("data.alpha", "must be positive");
  if (cfg.output.root.empty()) fail("output.root", "must not be empty");
}

// FNV-1a of the resolved config text, as 8 hex digits.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : to_config_text(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08llx", static_cast<unsigned long long>(h & 0xffffffffULL));
  return buf;
}

}  // namespace fftmoe
