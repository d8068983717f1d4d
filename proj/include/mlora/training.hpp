// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Three-phase training with freeze contracts:
//   1. backbone on the union of all domains (adapters and gates frozen)
//   2. each expert (d, k) alone on domain d, routed backbone + that expert
//   3. gates only, routed through the full mixture, across all domains
// plus the plain (phase 1 only) and MLoRA (phases 1 and 2) baselines.

#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mlora/autodiff.hpp"
#include "mlora/data.hpp"
#include "mlora/error.hpp"
#include "mlora/eval.hpp"
#include "mlora/models.hpp"
#include "mlora/params.hpp"
#include "mlora/random.hpp"

namespace mlora {

/// -mean[y log p + (1-y) log(1-p)] with p clamped to [1e-7, 1-1e-7].
inline double bce_loss(std::span<const double> p, std::span<const double> y) {
  if (p.size() != y.size() || p.empty()) throw ShapeError("bce_loss: probabilities and labels must be non-empty and aligned");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw DataError("bce_loss: label " + std::to_string(y[i]) + " not in {0,1}");
    const double q = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
    acc += y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return -acc / static_cast<double>(p.size());
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<const Parameter<double>*, std::pair<Tensor<double>, Tensor<double>>> moments;
};

/// One bias-corrected Adam update. grads[i] == nullptr means a zero gradient.
/// Parameters whose trainable flag is off are left untouched.
inline void adam_step(std::span<Parameter<double>* const> params, std::span<const Tensor<double>* const> grads,
                      AdamState& state, const AdamHyper& h) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: one gradient slot per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i]) {
      if (grads[i]->shape() != params[i]->value.shape())
        throw ShapeError("adam_step: gradient shape mismatch for '" + params[i]->name + "'");
      if (!grads[i]->all_finite()) throw NumericError("non-finite gradient for parameter '" + params[i]->name + "'");
    }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<double>& p = *params[i];
    if (!p.trainable) continue;
    auto [it, fresh] = state.moments.try_emplace(&p, Tensor<double>(p.value.shape()), Tensor<double>(p.value.shape()));
    auto& [m, v] = it->second;
    const Tensor<double>* g = grads[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      p.value[j] -= h.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.eps);
    }
  }
}

struct TrainConfig {
  double lr = 1e-3;       // phases 1 and 2
  double gate_lr = 1e-2;  // phase 3
  std::size_t batch_size = 256;
  std::array<std::size_t, 3> epochs{5, 5, 5};
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t patience = 2;  // 0 disables early stopping
  bool balanced_phase3 = false;
  bool weights_from_train = false;  // omega from train counts instead of the scored split
  std::size_t threads = 1;          // phase-2 expert jobs run concurrently
  std::vector<std::size_t> phase2_order;  // domain order for phase 2; empty = 0..n-1

  void validate() const {
    if (!(lr > 0) || !(gate_lr > 0)) throw ConfigError("learning rates must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    for (auto e : epochs)
      if (e == 0) throw ConfigError("epochs per phase must be at least 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) throw ConfigError("invalid Adam hyperparameters");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"gate_lr", c.gate_lr},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"patience", c.patience},
       {"balanced_phase3", c.balanced_phase3},
       {"weights_from_train", c.weights_from_train}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.lr = j.value("lr", c.lr);
  c.gate_lr = j.value("gate_lr", c.gate_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("epochs")) {
    const auto& e = j.at("epochs");
    if (e.is_array()) {
      if (e.size() != 3) throw ConfigError("train.epochs needs three entries (one per phase)");
      for (std::size_t i = 0; i < 3; ++i) c.epochs[i] = e.at(i).get<std::size_t>();
    } else {
      c.epochs.fill(e.get<std::size_t>());
    }
  }
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.patience = j.value("patience", c.patience);
  c.balanced_phase3 = j.value("balanced_phase3", c.balanced_phase3);
  c.weights_from_train = j.value("weights_from_train", c.weights_from_train);
}

/// One optimisation run: the backbone in phase 1, one expert in phase 2, the gates in phase 3.
struct TrainLog {
  std::string scope;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_wauc;    // [0] before training, then per epoch
  std::size_t best_epoch = 0;
  bool skipped = false;
  std::string note;
};

struct PhaseReport {
  int phase = 0;
  std::vector<TrainLog> runs;
  std::map<std::string, std::string> checksums_before, checksums_after;
  std::vector<std::string> frozen_groups;
  std::vector<std::string> warnings;

  /// Frozen groups hash identically before and after the phase.
  bool frozen_unchanged() const {
    for (const auto& g : frozen_groups)
      if (checksums_before.at(g) != checksums_after.at(g)) return false;
    return true;
  }
};

inline nlohmann::json phase_record(const PhaseReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& l : r.runs)
    runs.push_back({{"scope", l.scope},
                    {"train_loss", l.train_loss},
                    {"val_wauc", l.val_wauc},
                    {"best_epoch", l.best_epoch},
                    {"skipped", l.skipped},
                    {"note", l.note}});
  return {{"record", "phase"},
          {"phase", r.phase},
          {"runs", runs},
          {"frozen_groups", r.frozen_groups},
          {"checksums_before", r.checksums_before},
          {"checksums_after", r.checksums_after},
          {"frozen_unchanged", r.frozen_unchanged()},
          {"warnings", r.warnings}};
}

namespace detail {

struct PlannedBatch {
  std::size_t domain;
  std::vector<std::size_t> rows;
};

/// Contiguous chunks of a shuffled order; every batch is routed with `domain`.
inline std::vector<PlannedBatch> plan_rows(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                           std::uint64_t epoch, std::size_t domain) {
  BatchIter it(ds, batch_size, seed, epoch, true);
  const auto& order = it.order();
  std::vector<PlannedBatch> out;
  for (std::size_t s = 0; s < order.size(); s += batch_size)
    out.push_back({domain, {order.begin() + static_cast<std::ptrdiff_t>(s),
                            order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch_size))}});
  return out;
}

/// Single-domain batches drawn from every domain, in shuffled batch order.
/// Proportional by default; balanced draws max_d n_d rows from each domain.
inline std::vector<PlannedBatch> plan_by_domain(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                                std::uint64_t epoch, bool balanced) {
  std::vector<std::vector<std::size_t>> rows(ds.n_domains());
  for (std::size_t i = 0; i < ds.size(); ++i) rows[ds.rows()[i].domain].push_back(i);
  std::size_t target = 0;
  for (const auto& r : rows) target = std::max(target, r.size());
  std::vector<PlannedBatch> out;
  for (std::size_t d = 0; d < rows.size(); ++d) {
    if (rows[d].empty()) continue;
    Rng rng(derive_seed(seed, {0xd0, epoch, d}));
    std::vector<std::size_t> drawn;
    const std::size_t want = balanced ? target : rows[d].size();
    while (drawn.size() < want) {
      auto pass = rows[d];
      rng.shuffle(std::span<std::size_t>(pass));
      const std::size_t take = std::min(pass.size(), want - drawn.size());
      drawn.insert(drawn.end(), pass.begin(), pass.begin() + static_cast<std::ptrdiff_t>(take));
    }
    for (std::size_t s = 0; s < drawn.size(); s += batch_size)
      out.push_back({d, {drawn.begin() + static_cast<std::ptrdiff_t>(s),
                         drawn.begin() + static_cast<std::ptrdiff_t>(std::min(drawn.size(), s + batch_size))}});
  }
  Rng(derive_seed(seed, {0xd1, epoch})).shuffle(std::span<PlannedBatch>(out));
  return out;
}

struct LoopSpec {
  int phase = 1;
  std::string scope;
  Route route;
  std::vector<Parameter<double>*> params;  // the parameters this loop updates
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::function<std::vector<PlannedBatch>(std::uint64_t epoch)> plan;
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;  // may be empty
};

inline std::optional<double> validation_score(CtrModel& model, const Dataset* val, const Route& route) {
  if (!val || val->empty()) return std::nullopt;
  try {
    return evaluate(model, *val, route).wauc;
  } catch (const DataError&) {
    return std::nullopt;  // every validation domain is single-class
  }
}

inline TrainLog train_loop(CtrModel& model, const LoopSpec& spec, const TrainConfig& cfg) {
  TrainLog log;
  log.scope = spec.scope;
  auto& g = model.graph(spec.route);
  const AdamHyper hyper{spec.lr, cfg.beta1, cfg.beta2, cfg.eps};
  AdamState state;
  auto snapshot = [&] {
    std::vector<Tensor<double>> v;
    for (auto* p : spec.params) v.push_back(p->value);
    return v;
  };
  std::optional<double> best = validation_score(model, spec.val, spec.route);
  log.val_wauc.push_back(best.value_or(std::nan("")));
  auto best_values = snapshot();
  std::size_t stale = 0;
  std::vector<const Tensor<double>*> grads(spec.params.size());
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t rows = 0;
    for (const auto& pb : spec.plan(epoch)) {
      const Batch batch = make_batch(*spec.train, pb.rows);
      const Feed<double> feed = model.feed(batch, pb.domain);
      const double loss = g.tape.forward(feed, g.loss).item();
      if (!std::isfinite(loss))
        throw NumericError("phase " + std::to_string(spec.phase) + " (" + spec.scope + "): non-finite training loss");
      g.tape.backward(g.loss);
      for (std::size_t i = 0; i < spec.params.size(); ++i) grads[i] = g.tape.param_grad(*spec.params[i]);
      try {
        adam_step(spec.params, grads, state, hyper);
      } catch (const NumericError& e) {
        throw NumericError("phase " + std::to_string(spec.phase) + " (" + spec.scope + "): " + e.what());
      }
      loss_sum += loss * static_cast<double>(batch.size());
      rows += batch.size();
    }
    log.train_loss.push_back(rows ? loss_sum / static_cast<double>(rows) : 0.0);
    const auto score = validation_score(model, spec.val, spec.route);
    log.val_wauc.push_back(score.value_or(std::nan("")));
    if (!score) {  // nothing to select on: keep the latest parameters
      best_values = snapshot();
      log.best_epoch = epoch;
      continue;
    }
    if (!best || *score > *best) {
      best = score;
      best_values = snapshot();
      log.best_epoch = epoch;
      stale = 0;
    } else if (cfg.patience && ++stale >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < spec.params.size(); ++i) spec.params[i]->value = best_values[i];
  return log;
}

/// Runs `body` and fails loudly if any parameter outside `trainable` moved.
template <typename Body>
PhaseReport guarded_phase(CtrModel& model, int phase, const TagPredicate& trainable, Body&& body) {
  PhaseReport report;
  report.phase = phase;
  const auto frozen = tags::negate(trainable);
  for (const auto& tag : model.params().groups())
    if (frozen(tag)) report.frozen_groups.push_back(tag.str());
  report.checksums_before = model.params().group_checksums();
  const auto before = model.params().serialize(frozen);
  body(report);
  report.checksums_after = model.params().group_checksums();
  if (model.params().serialize(frozen) != before)
    throw Error("phase " + std::to_string(phase) + " modified frozen parameters");
  return report;
}

}  // namespace detail

/// Phase 1: backbone only, on the union of every domain's rows.
inline PhaseReport run_phase1(CtrModel& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("phase 1: empty training set");
  model.params().set_trainable(tags::backbone());
  return detail::guarded_phase(model, 1, tags::backbone(), [&](PhaseReport& report) {
    detail::LoopSpec spec;
    spec.phase = 1;
    spec.scope = "backbone";
    spec.route = Route::backbone();
    spec.params = model.params().select(tags::backbone());
    spec.lr = cfg.lr;
    spec.epochs = cfg.epochs[0];
    spec.train = &train;
    spec.val = &val;
    spec.plan = [&](std::uint64_t epoch) {
      return detail::plan_rows(train, cfg.batch_size, derive_seed(cfg.seed, {1}), epoch, 0);
    };
    report.runs.push_back(detail::train_loop(model, spec, cfg));
  });
}

/// Phase 2: every expert (d, k) in turn, trained on domain d with the backbone,
/// the gates, and all other experts frozen and bypassed.
inline PhaseReport run_phase2(CtrModel& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (model.config().mode == Mode::kPlain) throw ConfigError("phase 2 requires adapters (mode mlora or moe)");
  const std::size_t nd = model.schema().n_domains;
  std::vector<std::size_t> order = cfg.phase2_order;
  if (order.empty()) {
    order.resize(nd);
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  {
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != i || sorted.size() != nd) throw ConfigError("phase2_order must be a permutation of the domains");
  }
  // Each job's route only reaches its own expert, so marking every expert
  // trainable keeps jobs isolated; the jobs also update only their own tensors.
  model.params().set_trainable(tags::experts());
  return detail::guarded_phase(model, 2, tags::experts(), [&](PhaseReport& report) {
    struct Job {
      std::size_t domain, replica;
    };
    std::vector<Job> jobs;
    for (auto d : order)
      for (std::size_t k = 0; k < model.experts_per_domain(); ++k) jobs.push_back({d, k});
    std::vector<Dataset> train_by_domain, val_by_domain;
    for (std::size_t d = 0; d < nd; ++d) {
      train_by_domain.push_back(train.domain(d));
      val_by_domain.push_back(val.domain(d));
    }
    std::vector<TrainLog> logs(jobs.size());
    for (const auto& job : jobs) model.graph(Route::single(job.domain, job.replica));

    auto run_job = [&](std::size_t j) {
      const auto [d, k] = jobs[j];
      const std::string scope = "expert(" + std::to_string(d) + "," + std::to_string(k) + ")";
      const Dataset& tr = train_by_domain[d];
      if (tr.empty()) {
        logs[j].scope = scope;
        logs[j].skipped = true;
        logs[j].note = "domain " + std::to_string(d) + " has no training rows; expert left at initialization";
        return;
      }
      const auto mine = tags::expert(static_cast<int>(d), static_cast<int>(k));
      const auto others = model.params().serialize(tags::negate(mine));
      detail::LoopSpec spec;
      spec.phase = 2;
      spec.scope = scope;
      spec.route = Route::single(d, k);
      spec.params = model.params().select(mine);
      spec.lr = cfg.lr;
      spec.epochs = cfg.epochs[1];
      spec.train = &tr;
      spec.val = &val_by_domain[d];
      spec.plan = [&, d = d, k = k](std::uint64_t epoch) {
        return detail::plan_rows(tr, cfg.batch_size, derive_seed(cfg.seed, {2, d, k}), epoch, d);
      };
      logs[j] = detail::train_loop(model, spec, cfg);
      if (cfg.threads <= 1 && model.params().serialize(tags::negate(mine)) != others)
        throw Error("phase 2: training " + scope + " modified other parameters");
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, jobs.size()));
    if (workers == 1) {
      for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::exception_ptr> errors(jobs.size());
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (std::size_t j = next++; j < jobs.size(); j = next++) {
            try {
              run_job(j);
            } catch (...) {
              errors[j] = std::current_exception();
            }
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (auto& l : logs) {
      if (l.skipped) report.warnings.push_back(l.note);
      report.runs.push_back(std::move(l));
    }
  });
}

/// Phase 3: gates only, through the full mixture, over every domain.
inline PhaseReport run_phase3(CtrModel& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (model.config().mode != Mode::kMoe) throw ConfigError("phase 3 (gating) requires mode moe");
  if (train.empty()) throw DataError("phase 3: empty training set");
  model.params().set_trainable(tags::gates());
  return detail::guarded_phase(model, 3, tags::gates(), [&](PhaseReport& report) {
    if (model.config().adapter.gate_clamp != GateClamp::kNone) {
      TrainLog log;
      log.scope = "gates";
      log.skipped = true;
      log.note = "gate weights are clamped; nothing to train";
      report.runs.push_back(log);
      return;
    }
    detail::LoopSpec spec;
    spec.phase = 3;
    spec.scope = "gates";
    spec.route = Route::mixture();
    spec.params = model.params().select(tags::gates());
    spec.lr = cfg.gate_lr;
    spec.epochs = cfg.epochs[2];
    spec.train = &train;
    spec.val = &val;
    spec.plan = [&](std::uint64_t epoch) {
      return detail::plan_by_domain(train, cfg.batch_size, derive_seed(cfg.seed, {3}), epoch, cfg.balanced_phase3);
    };
    report.runs.push_back(detail::train_loop(model, spec, cfg));
  });
}

struct PipelineResult {
  std::unique_ptr<CtrModel> model;
  std::vector<PhaseReport> phases;
  MetricsReport test;
};

/// Build a model from `seed = cfg.seed` and run the phases its mode calls for:
/// plain 1; mlora 1, 2; moe 1, 2, 3. Writes phase<i>.ckpt into `run_dir` when given.
inline PipelineResult train_pipeline(const TrainConfig& cfg, const Splits& data, const ModelConfig& model_cfg,
                                     const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
  cfg.validate();
  PipelineResult out;
  out.model = build_model(data.train.schema(), model_cfg, cfg.seed);
  auto& model = *out.model;
  auto checkpoint = [&](int phase) {
    if (run_dir) save_checkpoint(model, (*run_dir / ("phase" + std::to_string(phase) + ".ckpt")).string());
  };
  out.phases.push_back(run_phase1(model, data.train, data.val, cfg));
  checkpoint(1);
  if (model_cfg.mode != Mode::kPlain) {
    out.phases.push_back(run_phase2(model, data.train, data.val, cfg));
    checkpoint(2);
  }
  if (model_cfg.mode == Mode::kMoe) {
    out.phases.push_back(run_phase3(model, data.train, data.val, cfg));
    checkpoint(3);
  }
  model.params().set_trainable(tags::none());
  const auto& counts = data.train.domain_counts();
  out.test = evaluate(model, data.test, std::nullopt, cfg.weights_from_train ? &counts : nullptr);
  return out;
}

}  // namespace mlora
