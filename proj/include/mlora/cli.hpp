// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment commands behind the `mlora` executable: generate, train, compare,
// sweep-experts. Every command reads a JSON run config, writes into a fresh
// output directory, and emits line-delimited JSON records tagged with the
// config hash and seed.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "mlora/data.hpp"
#include "mlora/error.hpp"
#include "mlora/eval.hpp"
#include "mlora/models.hpp"
#include "mlora/params.hpp"
#include "mlora/training.hpp"

namespace mlora::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct RunConfig {
  std::optional<std::string> csv;          // resolved path
  std::optional<SyntheticSpec> synthetic;  // exactly one of csv / synthetic
  bool synthetic_seed_fixed = false;       // spec named its own seed
  SplitRatios split;
  std::size_t embedding_dim = 8;
  std::vector<Arch> archs{Arch::kMlp};
  std::vector<Mode> modes{Mode::kPlain, Mode::kMlora, Mode::kMoe};  // compare
  ModelConfig model;                                                 // model.mode drives `train`
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::size_t> expert_counts{2, 4, 6, 8};

  void validate() const {
    if (csv.has_value() == synthetic.has_value()) throw ConfigError("config: exactly one of data.csv / data.synthetic required");
    if (seeds.empty()) throw ConfigError("config: seed list is empty");
    if (archs.empty()) throw ConfigError("config: arch list is empty");
    if (synthetic) synthetic->validate();
    train.validate();
  }

  /// Canonical JSON of everything that influences results (seeds excluded).
  json canonical() const {
    json j;
    if (csv) j["data"] = {{"csv", *csv}};
    if (synthetic) {
      json s = *synthetic;
      if (!synthetic_seed_fixed) s.erase("seed");
      j["data"] = {{"synthetic", s}};
    }
    j["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
    j["embedding_dim"] = embedding_dim;
    j["arch"] = json::array();
    for (auto a : archs) j["arch"].push_back(to_string(a));
    j["modes"] = json::array();
    for (auto m : modes) j["modes"].push_back(to_string(m));
    j["model"] = model;
    j["train"] = train;
    j["expert_counts"] = expert_counts;
    return j;
  }

  std::string hash() const {
    const std::string text = canonical().dump();
    return hex64(fnv1a(text.data(), text.size()));
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError(where + ": unknown field '" + it.key() + "'");
}

template <typename Fn>
auto config_guard(const std::string& what, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace detail

/// Parse a run config. Relative CSV paths resolve against `base_dir`.
inline RunConfig parse_run_config(const json& j, const fs::path& base_dir = {}) {
  return detail::config_guard("config", [&] {
    detail::reject_unknown(j, {"data", "split", "embedding_dim", "arch", "mode", "modes", "model", "train", "seeds",
                               "expert_counts"},
                           "config");
    RunConfig c;
    if (!j.contains("data")) throw ConfigError("config: missing data section");
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"csv", "synthetic"}, "config.data");
    if (d.contains("csv")) {
      fs::path p = d.at("csv").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.csv = p.string();
    }
    if (d.contains("synthetic")) {
      c.synthetic = d.at("synthetic").get<SyntheticSpec>();
      c.synthetic_seed_fixed = d.at("synthetic").contains("seed");
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      detail::reject_unknown(s, {"train", "val", "test"}, "config.split");
      c.split = {s.value("train", c.split.train), s.value("val", c.split.val), s.value("test", c.split.test)};
    }
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::reject_unknown(m, {"arch", "mode", "hidden", "adapter", "domain_as_feature", "embedding_init_std"},
                             "config.model");
      if (m.contains("adapter"))
        detail::reject_unknown(m.at("adapter"),
                               {"rank", "alpha", "experts_per_domain", "input_conditioned_gate", "gate_includes_backbone",
                                "gate_clamp", "a_init_std"},
                               "config.model.adapter");
      c.model = m.get<ModelConfig>();
    }
    if (j.contains("arch")) {
      c.archs.clear();
      const auto& a = j.at("arch");
      if (a.is_array()) {
        for (const auto& x : a) c.archs.push_back(parse_arch(x.get<std::string>()));
      } else {
        c.archs.push_back(parse_arch(a.get<std::string>()));
      }
    } else if (j.contains("model") && j.at("model").contains("arch")) {
      c.archs = {c.model.arch};
    }
    if (j.contains("mode")) c.model.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& x : j.at("modes")) c.modes.push_back(parse_mode(x.get<std::string>()));
    }
    if (j.contains("train")) {
      detail::reject_unknown(j.at("train"),
                             {"lr", "gate_lr", "batch_size", "epochs", "beta1", "beta2", "eps", "patience",
                              "balanced_phase3", "weights_from_train"},
                             "config.train");
      c.train = j.at("train").get<TrainConfig>();
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("expert_counts")) c.expert_counts = j.at("expert_counts").get<std::vector<std::size_t>>();
    c.validate();
    return c;
  });
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_json(path), path.parent_path()); }

/// Thread count for phase-2 expert jobs from MLORA_THREADS (default 1).
inline std::size_t env_threads() {
  const char* v = std::getenv("MLORA_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("MLORA_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

/// The dataset a run with `seed` trains on.
inline Dataset load_data(const RunConfig& c, std::uint64_t seed) {
  if (c.csv) return load_csv(*c.csv, infer_schema(*c.csv, c.embedding_dim));
  SyntheticSpec spec = *c.synthetic;
  if (!c.synthetic_seed_fixed) spec.seed = seed;
  Dataset ds = generate_synthetic(spec);
  FeatureSchema schema = ds.schema();
  schema.embedding_dim = c.embedding_dim;
  return Dataset(schema, ds.rows());
}

/// Creates `dir`, refusing an existing path unless `force`.
inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw ConfigError("--out is required");
  if (fs::exists(dir)) {
    if (!force) throw ConfigError("output directory '" + dir.string() + "' exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

struct CommandArgs {
  fs::path config;
  fs::path out;
  std::vector<std::uint64_t> seeds;  // overrides the config's seed list when non-empty
  bool force = false;
  std::vector<std::size_t> counts;   // sweep-experts override
};

namespace detail {

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

/// Shortest round-trip text for CSV cells.
inline std::string exact(double v) { return json(v).dump(); }

struct RunResult {
  MetricsReport test;
  std::vector<PhaseReport> phases;
};

inline RunResult run_once(const RunConfig& c, Arch arch, Mode mode, std::uint64_t seed,
                          const std::optional<fs::path>& run_dir, const ModelConfig* override_model = nullptr) {
  const Dataset ds = load_data(c, seed);
  const Splits splits = split_dataset(ds, c.split, seed);
  ModelConfig mc = override_model ? *override_model : c.model;
  mc.arch = arch;
  mc.mode = mode;
  TrainConfig tc = c.train;
  tc.seed = seed;
  tc.threads = env_threads();
  if (run_dir) fs::create_directories(*run_dir);
  auto result = train_pipeline(tc, splits, mc, run_dir);
  return {std::move(result.test), std::move(result.phases)};
}

inline json tagged(json j, const std::string& hash, std::uint64_t seed, Arch arch, Mode mode) {
  j["config_hash"] = hash;
  j["seed"] = seed;
  j["arch"] = to_string(arch);
  j["mode"] = to_string(mode);
  return j;
}

}  // namespace detail

/// `generate`: the config is a synthetic spec (or a run config with data.synthetic).
inline int cmd_generate(const CommandArgs& args, std::ostream& out) {
  const json raw = read_json(args.config);
  SyntheticSpec spec = detail::config_guard("spec", [&] {
    if (raw.contains("data")) {
      const RunConfig c = parse_run_config(raw, args.config.parent_path());
      if (!c.synthetic) throw ConfigError("generate needs a synthetic spec");
      return *c.synthetic;
    }
    return raw.get<SyntheticSpec>();
  });
  if (args.seeds.size() > 1) throw ConfigError("generate takes a single seed");
  if (!args.seeds.empty()) spec.seed = args.seeds.front();
  spec.validate();
  prepare_out_dir(args.out, args.force);
  const Dataset ds = generate_synthetic(spec);
  write_csv((args.out / "data.csv").string(), ds);
  {
    std::ofstream side(args.out / "spec.json");
    side << json(spec).dump(2) << '\n';
  }
  const auto sp = sparsity(ds);
  std::size_t positives = 0;
  for (const auto& ex : ds.rows()) positives += static_cast<std::size_t>(ex.label);
  const double rate = static_cast<double>(positives) / static_cast<double>(ds.size());
  out << "rows " << ds.size() << "  domains " << ds.n_domains() << "  sparsity " << detail::fixed(sp.overall)
      << "  positive_rate " << detail::fixed(rate, 4) << '\n';
  for (std::size_t d = 0; d < ds.n_domains(); ++d)
    out << "  domain " << d << ": rows " << ds.domain_counts()[d] << "  sparsity " << detail::fixed(sp.per_domain[d])
        << '\n';
  return kExitOk;
}

/// `train`: the full pipeline of the configured mode, once per arch and seed.
inline int cmd_train(const CommandArgs& args, std::ostream& out) {
  RunConfig c = load_run_config(args.config);
  if (!args.seeds.empty()) c.seeds = args.seeds;
  c.validate();
  prepare_out_dir(args.out, args.force);
  const std::string hash = c.hash();
  const Mode mode = c.model.mode;
  {
    std::ofstream cfg(args.out / "config.json");
    cfg << c.canonical().dump(2) << '\n';
  }
  std::ofstream metrics(args.out / "metrics.jsonl");
  out << "config " << hash << "  mode " << to_string(mode) << '\n';
  for (Arch arch : c.archs) {
    double sum = 0.0;
    for (auto seed : c.seeds) {
      const fs::path run_dir = args.out / "runs" / (to_string(arch) + "-seed" + std::to_string(seed));
      const auto r = detail::run_once(c, arch, mode, seed, run_dir);
      std::ofstream phases(run_dir / "phases.jsonl");
      for (const auto& p : r.phases) phases << detail::tagged(phase_record(p), hash, seed, arch, mode).dump() << '\n';
      std::ofstream run_metrics(run_dir / "metrics.jsonl");
      for (const auto& d : r.test.domains) {
        const auto rec = detail::tagged(domain_record(d), hash, seed, arch, mode).dump();
        metrics << rec << '\n';
        run_metrics << rec << '\n';
      }
      const auto summary = detail::tagged(summary_record(r.test), hash, seed, arch, mode).dump();
      metrics << summary << '\n';
      run_metrics << summary << '\n';
      out << to_string(arch) << " seed " << seed << "  wauc " << detail::fixed(r.test.wauc) << '\n';
      for (const auto& w : r.test.warnings) out << "  warning: " << w << '\n';
      sum += r.test.wauc;
    }
    const double mean = sum / static_cast<double>(c.seeds.size());
    json avg = {{"record", "seed_average"}, {"config_hash", hash},       {"seeds", c.seeds},
                {"arch", to_string(arch)},  {"mode", to_string(mode)}, {"wauc", mean}};
    metrics << avg.dump() << '\n';
    out << to_string(arch) << " mean wauc " << detail::fixed(mean) << " over " << c.seeds.size() << " seed(s)\n";
  }
  return kExitOk;
}

/// `compare`: every listed mode per arch; WAUC and delta against mlora (or the first mode).
inline int cmd_compare(const CommandArgs& args, std::ostream& out) {
  RunConfig c = load_run_config(args.config);
  if (!args.seeds.empty()) c.seeds = args.seeds;
  c.validate();
  if (c.modes.size() < 2) throw ConfigError("compare needs at least two modes");
  prepare_out_dir(args.out, args.force);
  const std::string hash = c.hash();
  const auto baseline_it = std::find(c.modes.begin(), c.modes.end(), Mode::kMlora);
  const Mode baseline = baseline_it != c.modes.end() ? *baseline_it : c.modes.front();
  const std::size_t nd = load_data(c, c.seeds.front()).n_domains();

  struct Cell {
    double wauc = 0.0;
    std::vector<double> auc_sum;
    std::vector<std::size_t> auc_n;
  };
  std::map<std::pair<Arch, Mode>, Cell> cells;
  std::ofstream records(args.out / "compare.jsonl");
  for (Arch arch : c.archs)
    for (Mode mode : c.modes) {
      if (cells.count({arch, mode})) continue;
      Cell cell;
      cell.auc_sum.assign(nd, 0.0);
      cell.auc_n.assign(nd, 0);
      for (auto seed : c.seeds) {
        const auto r = detail::run_once(c, arch, mode, seed, std::nullopt);
        for (const auto& d : r.test.domains) {
          records << detail::tagged(domain_record(d), hash, seed, arch, mode).dump() << '\n';
          if (d.auc) {
            cell.auc_sum[d.domain] += *d.auc;
            ++cell.auc_n[d.domain];
          }
        }
        records << detail::tagged(summary_record(r.test), hash, seed, arch, mode).dump() << '\n';
        cell.wauc += r.test.wauc;
      }
      cell.wauc /= static_cast<double>(c.seeds.size());
      cells.emplace(std::make_pair(arch, mode), std::move(cell));
    }

  std::string seed_list;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) seed_list += (i ? ";" : "") + std::to_string(c.seeds[i]);
  std::ofstream csv(args.out / "comparison.csv");
  csv << "config_hash,seeds,arch,mode,wauc,delta_vs_" << to_string(baseline);
  for (std::size_t d = 0; d < nd; ++d) csv << ",auc_d" << d;
  csv << '\n';
  out << "config " << hash << "  seeds " << seed_list << "  delta vs " << to_string(baseline) << '\n';
  for (Arch arch : c.archs)
    for (Mode mode : c.modes) {
      const Cell& cell = cells.at({arch, mode});
      const double delta = cell.wauc - cells.at({arch, baseline}).wauc;
      csv << hash << ',' << seed_list << ',' << to_string(arch) << ',' << to_string(mode) << ','
          << detail::exact(cell.wauc) << ',' << detail::exact(delta);
      for (std::size_t d = 0; d < nd; ++d) {
        csv << ',';
        if (cell.auc_n[d]) csv << detail::exact(cell.auc_sum[d] / static_cast<double>(cell.auc_n[d]));
      }
      csv << '\n';
      out << std::left << std::setw(8) << to_string(arch) << std::setw(7) << to_string(mode) << " wauc "
          << detail::fixed(cell.wauc) << "  delta " << (delta >= 0 ? "+" : "") << detail::fixed(delta) << '\n';
    }
  return kExitOk;
}

/// `sweep-experts`: moe pipeline per total expert count (divisible by the domain count).
inline int cmd_sweep_experts(const CommandArgs& args, std::ostream& out) {
  RunConfig c = load_run_config(args.config);
  if (!args.seeds.empty()) c.seeds = args.seeds;
  if (!args.counts.empty()) c.expert_counts = args.counts;
  c.validate();
  if (c.expert_counts.empty()) throw ConfigError("sweep-experts: no expert counts");
  const std::size_t nd = load_data(c, c.seeds.front()).n_domains();
  for (auto n : c.expert_counts)
    if (n == 0 || n % nd != 0)
      throw ConfigError("sweep-experts: expert count " + std::to_string(n) + " is not a positive multiple of " +
                        std::to_string(nd) + " domains");
  prepare_out_dir(args.out, args.force);
  const std::string hash = c.hash();
  std::ofstream csv(args.out / "sweep.csv");
  std::ofstream records(args.out / "sweep.jsonl");
  csv << "config_hash,seed,arch,total_experts,experts_per_domain,wauc\n";
  out << "config " << hash << '\n';
  for (Arch arch : c.archs)
    for (auto n : c.expert_counts)
      for (auto seed : c.seeds) {
        ModelConfig mc = c.model;
        mc.adapter.experts_per_domain = n / nd;
        const auto r = detail::run_once(c, arch, Mode::kMoe, seed, std::nullopt, &mc);
        csv << hash << ',' << seed << ',' << to_string(arch) << ',' << n << ',' << n / nd << ','
            << detail::exact(r.test.wauc) << '\n';
        json rec = detail::tagged(summary_record(r.test), hash, seed, arch, Mode::kMoe);
        rec["total_experts"] = n;
        rec["experts_per_domain"] = n / nd;
        records << rec.dump() << '\n';
        out << to_string(arch) << " experts " << n << " seed " << seed << "  wauc " << detail::fixed(r.test.wauc)
            << '\n';
      }
  return kExitOk;
}

/// Runs a command and maps failures to exit codes, reporting to `err`.
inline int run_command(const std::string& name, const CommandArgs& args, std::ostream& out, std::ostream& err) {
  try {
    if (name == "generate") return cmd_generate(args, out);
    if (name == "train") return cmd_train(args, out);
    if (name == "compare") return cmd_compare(args, out);
    if (name == "sweep-experts") return cmd_sweep_experts(args, out);
    err << "error: unknown command '" << name << "'\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace mlora::cli
