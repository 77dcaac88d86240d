// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fftmoe/checkpoint.hpp"
#include "fftmoe/config.hpp"
#include "fftmoe/data.hpp"
#include "fftmoe/error.hpp"
#include "fftmoe/federation.hpp"
#include "fftmoe/metrics.hpp"

namespace fftmoe {

namespace fs = std::filesystem;

struct ExperimentResult {
  std::vector<RoundReport> reports;
  std::vector<NamedTensor> checkpoint;
  std::size_t trainable_params = 0;
  std::size_t expert_params = 0;
  std::size_t test_k = 0;
  std::string run_dir;
};

inline const char* metrics_header() { return "round,client_id,task_loss,aux_loss,accuracy,mean_util_kl"; }

namespace detail {

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

inline void check_written(const std::ofstream& out, const fs::path& path) {
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string round_tag(std::size_t round) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03zu", round);
  return buf;
}

}  // namespace detail

inline LabeledDataset load_experiment_data(const ExperimentConfig& cfg) {
  const auto& b = cfg.backbone;
  if (cfg.data.source == "csv") return load_csv(cfg.data.csv_path, b.seq_len, b.input_dim, b.classes);
  return synth_dataset(cfg.data.samples, b.classes, b.seq_len, b.input_dim, cfg.data.separation, cfg.seeds.data);
}

/// Runs T federated rounds and writes every artifact into `run_dir`, which
/// must not exist yet or be empty.
///
/// Files: config.txt (resolved, replayable), metadata.txt, partition.csv,
/// metrics.csv, heatmap_round_XXX.csv, routing_probs_round_XXX.csv, checkpoint.bin.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& run_dir) {
  validate(cfg);
  const fs::path dir(run_dir);
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) throw IoError("run directory '" + run_dir + "' already exists and is not empty");
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory '" + run_dir + "': " + ec.message());

  const LabeledDataset all = load_experiment_data(cfg);
  auto [train, test] = train_test_split(all, cfg.data.test_fraction, cfg.seeds.data);
  const auto shards = partition(train, cfg.partition_spec());

  const BackboneConfig bcfg = cfg.resolved_backbone();
  const Backbone model_template = build_backbone(bcfg, cfg.adapter_spec(), cfg.seeds.run);
  const std::uint64_t frozen_before = model_template.frozen_checksum();
  const auto caps = draw_capabilities(cfg.federation.clients, cfg.sparsity.high_fraction, cfg.seeds.run);
  std::vector<ClientState> clients = make_clients(model_template, shards, caps);
  assign_sparsity(clients, cfg.sparsity_policy(), cfg.adapter.experts);

  ExperimentResult result;
  result.run_dir = run_dir;
  result.trainable_params = model_template.trainable_count();
  result.expert_params = model_template.expert_parameter_count();
  result.test_k = cfg.sparsity.test_k;
  if (result.test_k == 0) {
    for (const ClientState& c : clients) result.test_k = std::max(result.test_k, c.top_k);
  }
  Backbone global_model = model_template;
  global_model.set_top_k(result.test_k);

  ServerState server;
  server.global_params = snapshot(model_template.trainable_parameters());

  {
    const fs::path p = dir / "config.txt";
    auto out = detail::open_output(p);
    out << to_config_text(cfg);
    detail::check_written(out, p);
  }
  {
    const fs::path p = dir / "metadata.txt";
    auto out = detail::open_output(p);
    out << to_config_text(cfg);
    out << "meta.config_hash = " << config_hash(cfg) << "\n";
    out << "meta.test_k = " << result.test_k << "\n";
    out << "meta.weight_decay_mode = " << to_string(cfg.federation.decay_mode) << "\n";
    out << "meta.trainable_params = " << result.trainable_params << "\n";
    out << "meta.expert_params = " << result.expert_params << "\n";
    out << "meta.frozen_checksum = " << frozen_before << "\n";
    out << "meta.train_samples = " << train.size() << "\n";
    out << "meta.test_samples = " << test.size() << "\n";
    for (const ClientState& c : clients) {
      out << "meta.client" << c.client_id << " = shard " << c.shard.size() << " k " << c.top_k << " capability " << to_string(c.capability)
          << "\n";
    }
    detail::check_written(out, p);
  }
  export_partition_csv(shards, (dir / "partition.csv").string());

  const fs::path metrics_path = dir / "metrics.csv";
  auto metrics = detail::open_output(metrics_path);
  metrics << metrics_header() << "\n";
  const TrainConfig tcfg = cfg.train_config();
  for (std::size_t t = 0; t < cfg.federation.rounds; ++t) {
    RoundReport rep = run_round(server, clients, global_model, train, test, tcfg, cfg.seeds.run);
    for (const ClientReport& c : rep.clients) {
      metrics << rep.round_index << ',' << c.client_id << ',' << format_real(c.task_loss) << ',' << format_real(c.aux_loss) << ','
              << format_real(c.accuracy) << ',' << format_real(c.util_kl) << '\n';
    }
    metrics << rep.round_index << ",global," << format_real(rep.test_task_loss) << ',' << format_real(rep.test_aux_loss) << ','
            << format_real(rep.accuracy) << ',' << format_real(rep.mean_util_kl) << '\n';
    const std::string tag = detail::round_tag(rep.round_index);
    export_heatmap_csv(rep.load, (dir / ("heatmap_round_" + tag + ".csv")).string());
    export_routing_probs_csv(rep.mean_probs, (dir / ("routing_probs_round_" + tag + ".csv")).string());
    result.reports.push_back(std::move(rep));
  }
  metrics.flush();
  detail::check_written(metrics, metrics_path);

  if (model_template.frozen_checksum() != frozen_before) throw std::logic_error("frozen backbone weights changed during the run");

  const auto names = model_template.trainable_names();
  for (std::size_t i = 0; i < names.size(); ++i) result.checkpoint.push_back({names[i], server.global_params[i].detach()});
  save_checkpoint((dir / "checkpoint.bin").string(), result.checkpoint);
  return result;
}

// ---------------------------------------------------------------- run dirs

inline std::string timestamp_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

/// Reserves `<root>/<prefix><timestamp>-<hash>`, adding a numeric suffix
/// rather than reusing an existing directory.
inline std::string make_run_dir(const std::string& root, const std::string& prefix, const ExperimentConfig& cfg) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create output root '" + root + "': " + ec.message());
  const std::string base = prefix + timestamp_now() + "-" + config_hash(cfg);
  for (std::size_t attempt = 0;; ++attempt) {
    const fs::path p = fs::path(root) / (attempt == 0 ? base : base + "-" + std::to_string(attempt + 1));
    if (fs::create_directory(p, ec)) return p.string();
    if (ec) throw IoError("cannot create run directory '" + p.string() + "': " + ec.message());
  }
}

// ---------------------------------------------------------------- sweep

struct SweepAxis {
  std::vector<std::string> keys;
  std::vector<std::vector<std::string>> tuples;  // each tuple has keys.size() values
};

struct SweepCell {
  std::size_t id = 0;
  std::vector<std::pair<std::string, std::string>> overrides;
};

namespace detail {

inline std::vector<std::string> split_trim(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(s);
  while (std::getline(ss, cell, sep)) out.push_back(trim(cell));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace detail

/// Sweep spec: one axis per line.
///   adapter.experts = 2, 4, 8                   (one key, a list of values)
///   adapter.experts, adapter.rank = 2,8 ; 8,2   (zipped keys, ';' between tuples)
/// Axes combine by cross product. '#' starts a comment.
inline std::vector<SweepAxis> parse_sweep_spec(const std::string& text) {
  std::vector<SweepAxis> axes;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = "sweep spec line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = values'");
    SweepAxis axis;
    axis.keys = detail::split_trim(line.substr(0, eq), ',');
    for (const std::string& k : axis.keys) find_config_key(k);
    const std::string values = detail::trim(line.substr(eq + 1));
    if (axis.keys.size() == 1) {
      if (!values.empty()) {
        for (std::string v : detail::split_trim(values, ',')) axis.tuples.push_back({v});
      }
    } else if (!values.empty()) {
      for (const std::string& tuple : detail::split_trim(values, ';')) {
        auto parts = detail::split_trim(tuple, ',');
        if (parts.size() != axis.keys.size()) {
          throw ConfigError(where + ": tuple '" + tuple + "' has " + std::to_string(parts.size()) + " values for " +
                            std::to_string(axis.keys.size()) + " keys");
        }
        axis.tuples.push_back(std::move(parts));
      }
    }
    axes.push_back(std::move(axis));
  }
  return axes;
}

inline std::vector<SweepCell> expand_sweep(const std::vector<SweepAxis>& axes) {
  std::vector<SweepCell> cells;
  if (axes.empty()) return cells;
  for (const SweepAxis& a : axes) {
    if (a.tuples.empty()) return cells;
  }
  std::vector<std::size_t> pos(axes.size(), 0);
  for (std::size_t id = 0;; ++id) {
    SweepCell cell{id, {}};
    for (std::size_t a = 0; a < axes.size(); ++a) {
      for (std::size_t k = 0; k < axes[a].keys.size(); ++k) cell.overrides.emplace_back(axes[a].keys[k], axes[a].tuples[pos[a]][k]);
    }
    cells.push_back(std::move(cell));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++pos[a] < axes[a].tuples.size()) break;
      pos[a] = 0;
      if (a == 0) return cells;
    }
  }
}

struct SweepRow {
  SweepCell cell;
  std::size_t expert_params = 0;
  std::size_t trainable_params = 0;
  std::optional<double> final_accuracy;
  std::optional<double> final_mean_util_kl;
  std::string status;  // "ok" or "error: ..."
};

/// Runs every cell sequentially into `<sweep_dir>/cell_XXX` and writes
/// `<sweep_dir>/summary.csv`. Failed cells are recorded and skipped.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::vector<SweepAxis>& axes, const std::string& sweep_dir,
                                       std::ostream* log = nullptr) {
  std::error_code ec;
  fs::create_directories(sweep_dir, ec);
  if (ec) throw IoError("cannot create sweep directory '" + sweep_dir + "': " + ec.message());
  std::vector<std::string> swept;
  for (const SweepAxis& a : axes) swept.insert(swept.end(), a.keys.begin(), a.keys.end());

  std::vector<SweepRow> rows;
  for (const SweepCell& cell : expand_sweep(axes)) {
    SweepRow row{cell, 0, 0, std::nullopt, std::nullopt, "ok"};
    try {
      ExperimentConfig cfg = base;
      for (const auto& [k, v] : cell.overrides) set_config_value(cfg, k, v);
      const ExperimentResult res = run_experiment(cfg, (fs::path(sweep_dir) / ("cell_" + detail::round_tag(cell.id))).string());
      row.expert_params = res.expert_params;
      row.trainable_params = res.trainable_params;
      if (!res.reports.empty()) {
        row.final_accuracy = res.reports.back().accuracy;
        row.final_mean_util_kl = res.reports.back().mean_util_kl;
      }
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
    }
    if (log) *log << "cell " << cell.id << ": " << row.status << "\n";
    rows.push_back(std::move(row));
  }

  const fs::path p = fs::path(sweep_dir) / "summary.csv";
  auto out = detail::open_output(p);
  out << "config_id";
  for (const std::string& k : swept) out << ',' << k;
  out << ",expert_params,trainable_params,final_accuracy,final_mean_util_kl,status\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  for (const SweepRow& r : rows) {
    out << r.cell.id;
    for (const auto& kv : r.cell.overrides) out << ',' << detail::csv_cell(kv.second);
    out << ',' << r.expert_params << ',' << r.trainable_params << ',' << opt(r.final_accuracy) << ',' << opt(r.final_mean_util_kl) << ','
        << detail::csv_cell(r.status) << '\n';
  }
  detail::check_written(out, p);
  return rows;
}

// ---------------------------------------------------------------- compare

struct GlobalMetrics {
  std::size_t round = 0;
  std::vector<std::string> values;  // task_loss, aux_loss, accuracy, mean_util_kl as written
};

/// The "global" rows of a run's metrics.csv, keyed by round.
inline std::map<std::size_t, GlobalMetrics> read_global_metrics(const std::string& run_dir, const std::string& run_name) {
  const fs::path p = fs::path(run_dir) / "metrics.csv";
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("run '" + run_name + "': missing metrics file '" + p.string() + "'");
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != metrics_header()) {
    throw InputError("run '" + run_name + "': metrics file '" + p.string() + "' has an unexpected header");
  }
  std::map<std::size_t, GlobalMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_trim(line, ',');
    auto corrupt = [&](const std::string& why) {
      return InputError("run '" + run_name + "': " + p.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (cells.size() != 6) throw corrupt("expected 6 columns");
    GlobalMetrics g;
    try {
      g.round = static_cast<std::size_t>(detail::parse_u64("round", cells[0]));
      for (std::size_t i = 2; i < 6; ++i) detail::parse_real("metric", cells[i]);
    } catch (const ConfigError& e) {
      throw corrupt(e.what());
    }
    if (cells[1] != "global") continue;
    g.values.assign(cells.begin() + 2, cells.end());
    out[g.round] = std::move(g);
  }
  return out;
}

/// Merges the global rows of several runs into one wide CSV written to `out`:
/// `round` then `<run>.task_loss, <run>.aux_loss, <run>.accuracy,
/// <run>.mean_util_kl` per run. A single run is copied verbatim. Returns
/// warnings (e.g. runs covering different rounds, which leave blank cells).
inline std::vector<std::string> compare_runs(const std::vector<std::string>& run_dirs, std::ostream& out) {
  if (run_dirs.empty()) throw ConfigError("compare: no run directories given");
  std::vector<std::string> names;
  std::vector<std::map<std::size_t, GlobalMetrics>> runs;
  for (const std::string& d : run_dirs) {
    std::string name = fs::path(d).lexically_normal().filename().string();
    if (name.empty()) name = fs::path(d).lexically_normal().parent_path().filename().string();
    const std::string stem = name;
    for (std::size_t i = 2; std::find(names.begin(), names.end(), name) != names.end(); ++i) name = stem + "#" + std::to_string(i);
    runs.push_back(read_global_metrics(d, name));
    names.push_back(name);
  }
  std::vector<std::string> warnings;
  if (run_dirs.size() == 1) {
    out << read_text_file((fs::path(run_dirs[0]) / "metrics.csv").string());
    if (!out) throw IoError("compare: write failed");
    return warnings;
  }

  std::set<std::size_t> rounds;
  for (const auto& r : runs) {
    for (const auto& kv : r) rounds.insert(kv.first);
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].size() != rounds.size()) {
      warnings.push_back("run '" + names[i] + "' covers " + std::to_string(runs[i].size()) + " of " + std::to_string(rounds.size()) +
                         " rounds; missing cells left blank");
    }
  }
  out << "round";
  for (const std::string& n : names) {
    for (const char* col : {"task_loss", "aux_loss", "accuracy", "mean_util_kl"}) out << ',' << detail::csv_cell(n + "." + col);
  }
  out << '\n';
  for (std::size_t round : rounds) {
    out << round;
    for (const auto& r : runs) {
      const auto it = r.find(round);
      for (std::size_t c = 0; c < 4; ++c) out << ',' << (it == r.end() ? std::string() : it->second.values[c]);
    }
    out << '\n';
  }
  if (!out) throw IoError("compare: write failed");
  return warnings;
}

}  // namespace fftmoe
