// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ranking metrics: per-domain AUC, the data-proportion weighted AUC, sparsity,
// and the evaluation driver producing a MetricsReport.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mlora/data.hpp"
#include "mlora/error.hpp"
#include "mlora/models.hpp"

namespace mlora {

/// Mann-Whitney AUC with average ranks for ties. Returns nullopt when the labels
/// hold a single class (a degenerate domain).
inline std::optional<double> auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ShapeError("auc: labels and scores differ in length");
  const std::size_t n = labels.size();
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("auc: label " + std::to_string(y) + " not in {0,1}");
    pos += static_cast<std::size_t>(y);
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // over positives, 1-based ranks
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = static_cast<double>(i + 1 + j) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum += avg;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

struct DomainAuc {
  std::optional<double> auc;  // nullopt = degenerate
  std::size_t n_rows = 0;
};

/// sum_i w_i AUC_i with w proportional to n_rows over non-degenerate domains.
inline double wauc(std::span<const DomainAuc> per_domain, std::vector<std::string>* warnings = nullptr) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < per_domain.size(); ++i) {
    if (per_domain[i].auc) {
      total += per_domain[i].n_rows;
    } else if (warnings) {
      warnings->push_back("domain " + std::to_string(i) + " is degenerate (single class); excluded from WAUC");
    }
  }
  if (total == 0) throw DataError("wauc: every domain is degenerate or empty");
  // Offsets from a reference AUC keep the result exact when all AUCs agree.
  double ref = 0.0;
  for (const auto& d : per_domain)
    if (d.auc && d.n_rows) {
      ref = *d.auc;
      break;
    }
  double out = 0.0;
  for (const auto& d : per_domain)
    if (d.auc) out += static_cast<double>(d.n_rows) / static_cast<double>(total) * (*d.auc - ref);
  return ref + out;
}

struct SparsityReport {
  double overall = 0.0;
  std::vector<double> per_domain;
};

/// 1 - distinct (user, item) pairs / (distinct users x distinct items).
inline SparsityReport sparsity(const Dataset& ds) {
  if (ds.empty()) throw DataError("sparsity of an empty dataset");
  auto measure = [](const std::vector<const Example*>& rows) {
    if (rows.empty()) return 1.0;
    std::set<std::size_t> users, items;
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const auto* ex : rows) {
      users.insert(ex->ids[0]);
      items.insert(ex->ids[1]);
      pairs.emplace(ex->ids[0], ex->ids[1]);
    }
    return 1.0 - static_cast<double>(pairs.size()) /
                     (static_cast<double>(users.size()) * static_cast<double>(items.size()));
  };
  std::vector<const Example*> all;
  std::vector<std::vector<const Example*>> by_domain(ds.n_domains());
  for (const auto& ex : ds.rows()) {
    all.push_back(&ex);
    by_domain[ex.domain].push_back(&ex);
  }
  SparsityReport r;
  r.overall = measure(all);
  for (const auto& rows : by_domain) r.per_domain.push_back(measure(rows));
  return r;
}

struct DomainMetrics {
  std::size_t domain = 0;
  std::optional<double> auc;
  double weight = 0.0;  // renormalized over non-degenerate domains
  std::size_t n_rows = 0;
  double sparsity = 0.0;
};

struct MetricsReport {
  std::vector<DomainMetrics> domains;
  double wauc = 0.0;
  double sparsity = 0.0;
  std::vector<std::string> warnings;
};

inline nlohmann::json domain_record(const DomainMetrics& d) {
  nlohmann::json j = {{"record", "domain"}, {"domain", d.domain}, {"omega", d.weight}, {"n_rows", d.n_rows},
                      {"sparsity", d.sparsity}};
  j["auc"] = d.auc ? nlohmann::json(*d.auc) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json summary_record(const MetricsReport& r) {
  return {{"record", "summary"}, {"wauc", r.wauc}, {"sparsity", r.sparsity}, {"warnings", r.warnings}};
}

/// Score every domain of `ds` with the model's own routing (or `route` when
/// given) and aggregate. `weight_rows`, when given, replaces the evaluated
/// split's per-domain row counts as the omega basis.
inline MetricsReport evaluate(CtrModel& model, const Dataset& ds, std::optional<Route> route = std::nullopt,
                              const std::vector<std::size_t>* weight_rows = nullptr) {
  if (!(ds.schema() == model.schema())) throw ConfigError("evaluate: dataset schema does not match model schema");
  if (ds.empty()) throw DataError("evaluate: empty dataset");
  MetricsReport report;
  const auto sp = sparsity(ds);
  report.sparsity = sp.overall;
  std::vector<std::vector<std::size_t>> rows(ds.n_domains());
  for (std::size_t i = 0; i < ds.size(); ++i) rows[ds.rows()[i].domain].push_back(i);
  std::vector<DomainAuc> aucs;
  for (std::size_t d = 0; d < ds.n_domains(); ++d) {
    DomainMetrics m;
    m.domain = d;
    m.n_rows = rows[d].size();
    m.sparsity = sp.per_domain[d];
    if (!rows[d].empty()) {
      // Scores are computed in index order; AUC is order-invariant.
      std::vector<std::size_t> idx = rows[d];
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto& x = ds.rows()[a];
        const auto& y = ds.rows()[b];
        return std::tie(x.ids, x.label) < std::tie(y.ids, y.label);
      });
      const Batch batch = make_batch(ds, idx);
      const auto scores = model.predict(batch, d, route.value_or(model.default_route(d)));
      for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("non-finite prediction in domain " + std::to_string(d));
      std::vector<int> labels;
      for (double y : batch.labels) labels.push_back(static_cast<int>(y));
      m.auc = auc(labels, scores);
    }
    const std::size_t basis = weight_rows ? weight_rows->at(d) : m.n_rows;
    aucs.push_back({m.auc, basis});
    report.domains.push_back(m);
  }
  std::size_t total = 0;
  for (const auto& a : aucs)
    if (a.auc) total += a.n_rows;
  for (std::size_t d = 0; d < aucs.size(); ++d)
    report.domains[d].weight = aucs[d].auc && total ? static_cast<double>(aucs[d].n_rows) / static_cast<double>(total) : 0.0;
  report.wauc = wauc(aucs, &report.warnings);
  return report;
}

}  // namespace mlora
