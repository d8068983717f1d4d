// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-domain click logs: the normalized CSV format, stratified splits,
// domain proportions, batching, and a latent-factor synthetic generator.
//
// CSV layout (UTF-8, header required):
//   user_id,item_id,domain_id,label[,ctx_0,...,ctx_k]

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mlora/error.hpp"
#include "mlora/random.hpp"

namespace mlora {

struct Field {
  std::string name;
  std::size_t cardinality = 1;

  friend bool operator==(const Field&, const Field&) = default;
};

struct FeatureSchema {
  std::vector<Field> fields;
  std::size_t embedding_dim = 8;
  std::size_t n_domains = 1;

  void validate() const {
    if (fields.empty()) throw ConfigError("schema has no fields");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    for (const auto& f : fields)
      if (f.cardinality == 0) throw ConfigError("field '" + f.name + "' has zero cardinality");
  }

  /// Schema for the CSV layout: user_id, item_id, then `n_context` ctx_<i> columns.
  static FeatureSchema click_log(std::size_t users, std::size_t items, std::size_t n_domains,
                                 std::vector<std::size_t> context_cardinalities = {}, std::size_t embedding_dim = 8) {
    FeatureSchema s;
    s.fields = {{"user_id", users}, {"item_id", items}};
    for (std::size_t i = 0; i < context_cardinalities.size(); ++i)
      s.fields.push_back({"ctx_" + std::to_string(i), context_cardinalities[i]});
    s.embedding_dim = embedding_dim;
    s.n_domains = n_domains;
    return s;
  }

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

inline void to_json(nlohmann::json& j, const FeatureSchema& s) {
  j = nlohmann::json::object();
  j["embedding_dim"] = s.embedding_dim;
  j["n_domains"] = s.n_domains;
  j["fields"] = nlohmann::json::array();
  for (const auto& f : s.fields) j["fields"].push_back({{"name", f.name}, {"cardinality", f.cardinality}});
}

inline void from_json(const nlohmann::json& j, FeatureSchema& s) {
  s.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  s.n_domains = j.at("n_domains").get<std::size_t>();
  s.fields.clear();
  for (const auto& f : j.at("fields")) s.fields.push_back({f.at("name").get<std::string>(), f.at("cardinality").get<std::size_t>()});
}

struct Example {
  std::vector<std::size_t> ids;  // one per schema field
  int label = 0;
  std::size_t domain = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

class Dataset {
 public:
  Dataset() = default;

  Dataset(FeatureSchema schema, std::vector<Example> rows) : schema_(std::move(schema)), rows_(std::move(rows)) {
    schema_.validate();
    counts_.assign(schema_.n_domains, 0);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      const auto& ex = rows_[r];
      if (ex.ids.size() != schema_.fields.size())
        throw DataError("row " + std::to_string(r) + " has " + std::to_string(ex.ids.size()) + " ids, schema has " +
                        std::to_string(schema_.fields.size()) + " fields");
      for (std::size_t f = 0; f < ex.ids.size(); ++f)
        if (ex.ids[f] >= schema_.fields[f].cardinality)
          throw DataError("row " + std::to_string(r) + ": " + schema_.fields[f].name + " id " +
                          std::to_string(ex.ids[f]) + " exceeds cardinality " +
                          std::to_string(schema_.fields[f].cardinality));
      if (ex.label != 0 && ex.label != 1)
        throw DataError("row " + std::to_string(r) + ": label " + std::to_string(ex.label) + " not in {0,1}");
      if (ex.domain >= schema_.n_domains)
        throw DataError("row " + std::to_string(r) + ": domain " + std::to_string(ex.domain) + " out of range");
      ++counts_[ex.domain];
    }
  }

  const FeatureSchema& schema() const noexcept { return schema_; }
  const std::vector<Example>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }
  std::size_t n_domains() const noexcept { return schema_.n_domains; }
  const std::vector<std::size_t>& domain_counts() const noexcept { return counts_; }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    std::vector<Example> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(rows_.at(i));
    return Dataset(schema_, std::move(out));
  }

  Dataset domain(std::size_t d) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rows_.size(); ++i)
      if (rows_[i].domain == d) idx.push_back(i);
    return subset(idx);
  }

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.schema_ == b.schema_ && a.rows_ == b.rows_; }

 private:
  FeatureSchema schema_;
  std::vector<Example> rows_;
  std::vector<std::size_t> counts_;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<std::size_t> parse_uint(std::string_view s) {
  s = trim(s);
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string> expected_header(const FeatureSchema& schema) {
  if (schema.fields.size() < 2 || schema.fields[0].name != "user_id" || schema.fields[1].name != "item_id")
    throw ConfigError("CSV schemas start with the user_id and item_id fields");
  std::vector<std::string> h{"user_id", "item_id", "domain_id", "label"};
  for (std::size_t f = 2; f < schema.fields.size(); ++f) h.push_back(schema.fields[f].name);
  return h;
}

}  // namespace detail

/// Parse and validate a click-log CSV against `schema`. Errors cite 1-based line numbers.
inline Dataset load_csv(const std::string& path, const FeatureSchema& schema) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  const auto header = detail::expected_header(schema);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file, header required");
  {
    auto cols = detail::split_commas(line);
    bool ok = cols.size() == header.size();
    for (std::size_t i = 0; ok && i < cols.size(); ++i) ok = detail::trim(cols[i]) == header[i];
    if (!ok) throw DataError(path + ":1: header does not match schema");
  }
  std::vector<Example> rows;
  std::size_t line_no = 1;
  const std::size_t n_fields = schema.fields.size();
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cols = detail::split_commas(line);
    auto where = [&] { return path + ":" + std::to_string(line_no) + ": "; };
    if (cols.size() != header.size())
      throw DataError(where() + "expected " + std::to_string(header.size()) + " columns, found " +
                      std::to_string(cols.size()));
    std::vector<std::size_t> vals(cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) {
      auto v = detail::parse_uint(cols[c]);
      if (!v) throw DataError(where() + header[c] + " '" + std::string(detail::trim(cols[c])) + "' is not a non-negative integer");
      vals[c] = *v;
    }
    Example ex;
    ex.domain = vals[2];
    if (ex.domain >= schema.n_domains)
      throw DataError(where() + "unknown domain " + std::to_string(ex.domain) + " (schema has " +
                      std::to_string(schema.n_domains) + ")");
    if (vals[3] > 1) throw DataError(where() + "label " + std::to_string(vals[3]) + " not in {0,1}");
    ex.label = static_cast<int>(vals[3]);
    ex.ids.resize(n_fields);
    ex.ids[0] = vals[0];
    ex.ids[1] = vals[1];
    for (std::size_t f = 2; f < n_fields; ++f) ex.ids[f] = vals[f + 2];
    for (std::size_t f = 0; f < n_fields; ++f)
      if (ex.ids[f] >= schema.fields[f].cardinality)
        throw DataError(where() + schema.fields[f].name + " " + std::to_string(ex.ids[f]) + " exceeds cardinality " +
                        std::to_string(schema.fields[f].cardinality));
    rows.push_back(std::move(ex));
  }
  return Dataset(schema, std::move(rows));
}

inline void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  const auto header = detail::expected_header(ds.schema());
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& ex : ds.rows()) {
    out << ex.ids[0] << ',' << ex.ids[1] << ',' << ex.domain << ',' << ex.label;
    for (std::size_t f = 2; f < ex.ids.size(); ++f) out << ',' << ex.ids[f];
    out << '\n';
  }
  if (!out) throw DataError("write to '" + path + "' failed");
}

/// Schema whose cardinalities and domain count are the observed maxima + 1.
inline FeatureSchema infer_schema(const std::string& path, std::size_t embedding_dim = 8) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file, header required");
  auto head = detail::split_commas(line);
  if (head.size() < 4 || detail::trim(head[0]) != "user_id" || detail::trim(head[1]) != "item_id" ||
      detail::trim(head[2]) != "domain_id" || detail::trim(head[3]) != "label")
    throw DataError(path + ":1: header must start with user_id,item_id,domain_id,label");
  std::vector<std::string> names;
  for (auto h : head) names.emplace_back(detail::trim(h));
  std::vector<std::size_t> maxima(head.size(), 0);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cols = detail::split_commas(line);
    if (cols.size() != head.size()) throw DataError(path + ":" + std::to_string(line_no) + ": wrong column count");
    for (std::size_t c = 0; c < cols.size(); ++c) {
      auto v = detail::parse_uint(cols[c]);
      if (!v) throw DataError(path + ":" + std::to_string(line_no) + ": " + names[c] + " is not a non-negative integer");
      maxima[c] = std::max(maxima[c], *v);
    }
  }
  std::vector<std::size_t> ctx;
  for (std::size_t c = 4; c < head.size(); ++c) ctx.push_back(maxima[c] + 1);
  auto s = FeatureSchema::click_log(maxima[0] + 1, maxima[1] + 1, maxima[2] + 1, ctx, embedding_dim);
  for (std::size_t c = 4; c < head.size(); ++c) s.fields[c - 2].name = names[c];
  return s;
}

// ---------------------------------------------------------------------------
// Splits and proportions

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};

struct Splits {
  Dataset train, val, test;
};

/// Stratified per (domain, label) cell and deterministic by seed. Cells with at
/// least 3 rows contribute at least one row to each split.
inline Splits split_dataset(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  const std::size_t nd = ds.n_domains();
  std::vector<std::vector<std::size_t>> cells(nd * 2);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& ex = ds.rows()[i];
    cells[ex.domain * 2 + static_cast<std::size_t>(ex.label)].push_back(i);
  }
  std::vector<std::size_t> tr, va, te;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto& cell = cells[c];
    Rng rng(derive_seed(seed, {0x5e11, c}));
    rng.shuffle(std::span<std::size_t>(cell));
    const std::size_t n = cell.size();
    auto portion = [&](double r) {
      auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r));
      if (n >= 3 && r > 0 && k == 0) k = 1;
      return k;
    };
    std::size_t n_val = portion(ratios.val), n_test = portion(ratios.test);
    if (n_val + n_test > n) n_test = n - std::min(n, n_val);
    if (n_val + n_test > n) n_val = n;
    const std::size_t n_train = n - n_val - n_test;
    tr.insert(tr.end(), cell.begin(), cell.begin() + static_cast<std::ptrdiff_t>(n_train));
    va.insert(va.end(), cell.begin() + static_cast<std::ptrdiff_t>(n_train),
              cell.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    te.insert(te.end(), cell.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), cell.end());
  }
  // Keep original row order inside each split.
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  std::sort(te.begin(), te.end());
  return {ds.subset(tr), ds.subset(va), ds.subset(te)};
}

/// omega_i = count_i / total.
inline std::vector<double> domain_proportions(const Dataset& ds) {
  if (ds.empty()) throw DataError("domain proportions of an empty dataset");
  std::vector<double> w;
  for (auto c : ds.domain_counts()) w.push_back(static_cast<double>(c) / static_cast<double>(ds.size()));
  return w;
}

// ---------------------------------------------------------------------------
// Batching

/// Column-major view of a group of rows, ready to feed a model.
struct Batch {
  std::vector<std::vector<std::size_t>> ids;  // ids[field][row]
  std::vector<double> labels;
  std::vector<std::size_t> domains;

  std::size_t size() const noexcept { return labels.size(); }
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  b.ids.assign(ds.schema().fields.size(), {});
  for (auto& col : b.ids) col.reserve(rows.size());
  b.labels.reserve(rows.size());
  b.domains.reserve(rows.size());
  for (auto r : rows) {
    const auto& ex = ds.rows().at(r);
    for (std::size_t f = 0; f < ex.ids.size(); ++f) b.ids[f].push_back(ex.ids[f]);
    b.labels.push_back(ex.label);
    b.domains.push_back(ex.domain);
  }
  return b;
}

inline Batch make_batch(const Dataset& ds) {
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(ds, all);
}

/// One epoch over a dataset: every row exactly once, last batch may be short,
/// order shuffled deterministically by (seed, epoch) when requested.
class BatchIter {
 public:
  BatchIter(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch, bool shuffle)
      : ds_(&ds), batch_size_(batch_size), order_(ds.size()) {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle) Rng(derive_seed(seed, {0xba7c, epoch})).shuffle(std::span<std::size_t>(order_));
  }

  bool next(Batch& out) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min(batch_size_, order_.size() - pos_);
    out = make_batch(*ds_, std::span<const std::size_t>(order_).subspan(pos_, n));
    pos_ += n;
    return true;
  }

  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline BatchIter batch_iter(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch = 0,
                            bool shuffle = true) {
  return BatchIter(ds, batch_size, seed, epoch, shuffle);
}

// ---------------------------------------------------------------------------
// Synthetic generator
//
// Users and items get latent factors shared by every domain. Domain d scores a
// pair with u^T M_d v / sqrt(L), where M_d = cos(t) M_shared + sin(t) R_d and
// t = divergence * pi / 2, so divergence 0 gives one shared rule and 1 gives
// independent rules. Labels are 1[score + noise * logistic > threshold_d], with
// the threshold calibrated on a reference sample shared by all domains.

struct SyntheticSpec {
  std::size_t n_domains = 4;
  std::size_t users = 1000;
  std::size_t items = 1000;
  std::vector<std::size_t> interactions_per_domain{2500};  // one value broadcasts
  double positive_rate = 0.3;
  double divergence = 0.5;
  std::uint64_t seed = 1;
  std::size_t latent_dim = 4;
  double noise = 0.3;
  double popularity_skew = 0.0;  // Zipf exponent of user/item sampling; 0 = uniform
  double factor_mean = 0.0;      // mean of every user/item factor entry
  std::optional<double> target_sparsity;  // overrides interactions_per_domain

  std::vector<std::size_t> domain_sizes() const {
    std::vector<std::size_t> out(n_domains, 0);
    if (target_sparsity) {
      const double pairs = static_cast<double>(users) * static_cast<double>(items);
      const auto total = static_cast<std::size_t>(std::llround((1.0 - *target_sparsity) * pairs));
      for (std::size_t d = 0; d < n_domains; ++d) out[d] = total / n_domains + (d < total % n_domains ? 1 : 0);
      return out;
    }
    for (std::size_t d = 0; d < n_domains; ++d)
      out[d] = interactions_per_domain.size() == 1 ? interactions_per_domain[0] : interactions_per_domain.at(d);
    return out;
  }

  void validate() const {
    if (n_domains == 0 || users == 0 || items == 0 || latent_dim == 0)
      throw ConfigError("synthetic spec: n_domains, users, items and latent_dim must be positive");
    if (!(divergence >= 0.0 && divergence <= 1.0)) throw ConfigError("synthetic spec: divergence must lie in [0,1]");
    if (!(positive_rate > 0.0 && positive_rate < 1.0)) throw ConfigError("synthetic spec: positive_rate must lie in (0,1)");
    if (!(noise >= 0.0)) throw ConfigError("synthetic spec: noise must be non-negative");
    if (!std::isfinite(factor_mean)) throw ConfigError("synthetic spec: factor_mean must be finite");
    if (!(popularity_skew >= 0.0 && popularity_skew <= 4.0))
      throw ConfigError("synthetic spec: popularity_skew must lie in [0,4]");
    if (target_sparsity && !(*target_sparsity >= 0.0 && *target_sparsity < 1.0))
      throw ConfigError("synthetic spec: target_sparsity must lie in [0,1)");
    if (!target_sparsity && interactions_per_domain.size() != 1 && interactions_per_domain.size() != n_domains)
      throw ConfigError("synthetic spec: interactions_per_domain needs 1 or n_domains entries");
    const double pairs = static_cast<double>(users) * static_cast<double>(items);
    for (auto n : domain_sizes())
      if (static_cast<double>(n) > pairs)
        throw ConfigError("synthetic spec: " + std::to_string(n) + " interactions exceed users x items");
      else if (popularity_skew > 0.0 && static_cast<double>(n) > 0.5 * pairs)
        throw ConfigError("synthetic spec: skewed sampling needs interactions <= half of users x items");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"n_domains", s.n_domains},     {"users", s.users},
       {"items", s.items},             {"interactions_per_domain", s.interactions_per_domain},
       {"positive_rate", s.positive_rate}, {"divergence", s.divergence},
       {"seed", s.seed},               {"latent_dim", s.latent_dim},
       {"noise", s.noise},             {"popularity_skew", s.popularity_skew},
       {"factor_mean", s.factor_mean}};
  if (s.target_sparsity) j["target_sparsity"] = *s.target_sparsity;
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  static const std::vector<std::string> known{"n_domains", "users", "items", "interactions_per_domain",
                                              "positive_rate", "divergence", "seed", "latent_dim", "noise",
                                              "popularity_skew", "factor_mean", "target_sparsity"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("synthetic spec: unknown field '" + it.key() + "'");
  s = SyntheticSpec{};
  s.n_domains = j.value("n_domains", s.n_domains);
  s.users = j.value("users", s.users);
  s.items = j.value("items", s.items);
  if (j.contains("interactions_per_domain")) {
    const auto& v = j.at("interactions_per_domain");
    s.interactions_per_domain = v.is_array() ? v.get<std::vector<std::size_t>>() : std::vector<std::size_t>{v.get<std::size_t>()};
  }
  s.positive_rate = j.value("positive_rate", s.positive_rate);
  s.divergence = j.value("divergence", s.divergence);
  s.seed = j.value("seed", s.seed);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.noise = j.value("noise", s.noise);
  s.popularity_skew = j.value("popularity_skew", s.popularity_skew);
  s.factor_mean = j.value("factor_mean", s.factor_mean);
  if (j.contains("target_sparsity") && !j.at("target_sparsity").is_null())
    s.target_sparsity = j.at("target_sparsity").get<double>();
}

/// The latent world behind a synthetic dataset; exposes each domain's rule.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SyntheticSpec& spec) : spec_(spec) {
    spec.validate();
    const std::size_t L = spec.latent_dim;
    Rng rng(derive_seed(spec.seed, {1}));
    auto fill = [&](std::vector<double>& v, std::size_t n, double sd) {
      v.resize(n);
      for (auto& x : v) x = rng.normal() * sd;
    };
    fill(users_, spec.users * L, 1.0);
    fill(items_, spec.items * L, 1.0);
    for (auto& x : users_) x += spec.factor_mean;
    for (auto& x : items_) x += spec.factor_mean;
    std::vector<double> shared;
    fill(shared, L * L, 1.0 / std::sqrt(static_cast<double>(L)));
    const double t = spec.divergence * std::numbers::pi / 2.0;
    const double c = std::cos(t), s = std::sin(t);
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
      Rng drng(derive_seed(spec.seed, {2, d}));
      std::vector<double> m(L * L);
      for (std::size_t i = 0; i < L * L; ++i) m[i] = c * shared[i] + s * drng.normal() / std::sqrt(static_cast<double>(L));
      rules_.push_back(std::move(m));
    }
    if (spec.popularity_skew > 0.0) {
      auto zipf = [&](std::size_t n) {
        std::vector<double> cdf(n);
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) cdf[k] = acc += std::pow(static_cast<double>(k + 1), -spec.popularity_skew);
        for (auto& c : cdf) c /= acc;
        return cdf;
      };
      user_cdf_ = zipf(spec.users);
      item_cdf_ = zipf(spec.items);
    }
    // Thresholds from a reference sample drawn like the data (same pairs and
    // noise for every domain). Skewed data holds distinct pairs, so the
    // reference is built from distinct-pair rounds of a typical domain's size.
    constexpr std::size_t kReference = 20000;
    Rng ref(derive_seed(spec.seed, {3}));
    std::vector<std::pair<std::size_t, std::size_t>> pairs(kReference);
    std::vector<double> noise(kReference);
    const auto sizes = spec.domain_sizes();
    const std::size_t round =
        std::max<std::size_t>(1, std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) / spec.n_domains);
    std::unordered_set<std::uint64_t> seen;
    for (std::size_t i = 0; i < kReference; ++i) {
      if (spec.popularity_skew > 0.0) {
        if (i % round == 0) seen.clear();
        std::uint64_t u = 0, v = 0;
        do {
          u = draw(user_cdf_, ref);
          v = draw(item_cdf_, ref);
        } while (!seen.insert(u * spec.items + v).second);
        pairs[i] = {static_cast<std::size_t>(u), static_cast<std::size_t>(v)};
      } else {
        pairs[i] = {static_cast<std::size_t>(ref.below(spec.users)), static_cast<std::size_t>(ref.below(spec.items))};
      }
      noise[i] = spec.noise * ref.logistic();
    }
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
      std::vector<double> v(kReference);
      for (std::size_t i = 0; i < kReference; ++i) v[i] = score(d, pairs[i].first, pairs[i].second) + noise[i];
      const auto k = static_cast<std::size_t>(std::floor((1.0 - spec.positive_rate) * static_cast<double>(kReference)));
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
      thresholds_.push_back(v[k]);
    }
  }

  const SyntheticSpec& spec() const { return spec_; }

  double score(std::size_t d, std::size_t u, std::size_t i) const {
    const std::size_t L = spec_.latent_dim;
    const double* uu = users_.data() + u * L;
    const double* vv = items_.data() + i * L;
    const auto& m = rules_.at(d);
    double acc = 0.0;
    for (std::size_t a = 0; a < L; ++a) {
      double row = 0.0;
      for (std::size_t b = 0; b < L; ++b) row += m[a * L + b] * vv[b];
      acc += uu[a] * row;
    }
    return acc / std::sqrt(static_cast<double>(L));
  }

  double threshold(std::size_t d) const { return thresholds_.at(d); }

  /// Noise-free label of domain d's rule.
  int rule_label(std::size_t d, std::size_t u, std::size_t i) const { return score(d, u, i) > thresholds_.at(d) ? 1 : 0; }

  /// Index k with probability cdf[k] - cdf[k-1].
  static std::uint64_t draw(const std::vector<double>& cdf, Rng& rng) {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), rng.uniform());
    return static_cast<std::uint64_t>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
  }

  Dataset generate() const {
    const auto sizes = spec_.domain_sizes();
    const std::uint64_t n_items = spec_.items;
    const std::uint64_t n_pairs = static_cast<std::uint64_t>(spec_.users) * n_items;
    std::vector<Example> rows;
    for (std::size_t d = 0; d < spec_.n_domains; ++d) {
      Rng rng(derive_seed(spec_.seed, {4, d}));
      std::vector<std::uint64_t> picked;
      picked.reserve(sizes[d]);
      if (spec_.popularity_skew > 0.0) {
        std::unordered_set<std::uint64_t> seen;
        seen.reserve(sizes[d] * 2);
        while (picked.size() < sizes[d]) {
          const std::uint64_t p = draw(user_cdf_, rng) * n_items + draw(item_cdf_, rng);
          if (seen.insert(p).second) picked.push_back(p);
        }
      } else if (2 * static_cast<std::uint64_t>(sizes[d]) > n_pairs) {
        std::vector<std::uint64_t> all(n_pairs);
        std::iota(all.begin(), all.end(), std::uint64_t{0});
        for (std::size_t i = 0; i < sizes[d]; ++i) {
          const auto j = i + rng.below(n_pairs - i);
          std::swap(all[i], all[j]);
        }
        picked.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(sizes[d]));
      } else {
        std::unordered_set<std::uint64_t> seen;
        seen.reserve(sizes[d] * 2);
        while (picked.size() < sizes[d]) {
          const std::uint64_t p = rng.below(n_pairs);
          if (seen.insert(p).second) picked.push_back(p);
        }
      }
      for (auto p : picked) {
        const std::size_t u = p / n_items, i = p % n_items;
        const double y = score(d, u, i) + spec_.noise * rng.logistic();
        rows.push_back({{u, i}, y > thresholds_[d] ? 1 : 0, d});
      }
    }
    Rng mix(derive_seed(spec_.seed, {5}));
    mix.shuffle(std::span<Example>(rows));
    return Dataset(FeatureSchema::click_log(spec_.users, spec_.items, spec_.n_domains), std::move(rows));
  }

 private:
  SyntheticSpec spec_;
  std::vector<double> users_, items_;
  std::vector<std::vector<double>> rules_;
  std::vector<double> thresholds_;
  std::vector<double> user_cdf_, item_cdf_;
};

inline Dataset generate_synthetic(const SyntheticSpec& spec) { return SyntheticWorld(spec).generate(); }

}  // namespace mlora
