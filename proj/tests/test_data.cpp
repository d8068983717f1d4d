// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "mlora/data.hpp"

using namespace mlora;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() : path(std::filesystem::temp_directory_path() / "mlora_test_data") {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string write(const std::string& name, const std::string& text) const {
    const auto p = path / name;
    std::ofstream(p) << text;
    return p.string();
  }
};

std::string file_bytes(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset rows_per_domain(std::vector<std::size_t> counts, std::uint64_t seed = 1, double positive = 0.5) {
  const auto schema = FeatureSchema::click_log(50, 50, counts.size());
  Rng rng(seed);
  std::vector<Example> rows;
  for (std::size_t d = 0; d < counts.size(); ++d)
    for (std::size_t i = 0; i < counts[d]; ++i)
      rows.push_back({{rng.below(50), rng.below(50)}, rng.uniform() < positive ? 1 : 0, d});
  return Dataset(schema, rows);
}

}  // namespace

TEST_CASE("load_csv examples", "[data]") {
  TempDir tmp;
  const auto schema = FeatureSchema::click_log(10, 10, 2);
  SECTION("three rows, two domains") {
    const auto p = tmp.write("a.csv", "user_id,item_id,domain_id,label\n1,2,0,1\n3,4,1,0\n5,6,0,0\n");
    const Dataset ds = load_csv(p, schema);
    CHECK(ds.size() == 3);
    CHECK(ds.domain_counts() == std::vector<std::size_t>{2, 1});
    CHECK(ds.rows()[1] == Example{{3, 4}, 0, 1});
  }
  SECTION("a bad label cites its line") {
    const auto p = tmp.write("b.csv", "user_id,item_id,domain_id,label\n1,2,0,1\n1,2,0,1\n1,2,0,1\n1,2,0,2\n");
    CHECK_THROWS_WITH(load_csv(p, schema), ContainsSubstring(":5:"));
  }
  SECTION("unknown domain") {
    const auto p = tmp.write("c.csv", "user_id,item_id,domain_id,label\n1,2,7,1\n");
    CHECK_THROWS_WITH(load_csv(p, schema), ContainsSubstring("unknown domain 7"));
  }
  SECTION("malformed rows") {
    CHECK_THROWS_WITH(load_csv(tmp.write("d.csv", "user_id,item_id,domain_id,label\n1,2,0\n"), schema),
                      ContainsSubstring(":2:"));
    CHECK_THROWS_WITH(load_csv(tmp.write("e.csv", "user_id,item_id,domain_id,label\n1,x,0,1\n"), schema),
                      ContainsSubstring("item_id"));
    CHECK_THROWS_WITH(load_csv(tmp.write("f.csv", "user_id,item_id,domain_id,label\n1,-2,0,1\n"), schema),
                      ContainsSubstring(":2:"));
    CHECK_THROWS_WITH(load_csv(tmp.write("g.csv", "user_id,item_id,domain_id,label\n1,20,0,1\n"), schema),
                      ContainsSubstring("cardinality"));
    CHECK_THROWS_AS(load_csv(tmp.write("h.csv", "user,item,domain,label\n"), schema), DataError);
    CHECK_THROWS_AS(load_csv((tmp.path / "missing.csv").string(), schema), DataError);
  }
  SECTION("context columns and round trip") {
    const auto ctx_schema = FeatureSchema::click_log(10, 10, 2, {3, 4});
    const auto p = tmp.write("ctx.csv", "user_id,item_id,domain_id,label,ctx_0,ctx_1\n1,2,1,1,2,3\n9,0,0,0,0,1\n");
    const Dataset ds = load_csv(p, ctx_schema);
    CHECK(ds.rows()[0].ids == std::vector<std::size_t>{1, 2, 2, 3});
    const auto q = (tmp.path / "rt.csv").string();
    write_csv(q, ds);
    CHECK(load_csv(q, ctx_schema) == ds);
    CHECK(infer_schema(q) == FeatureSchema::click_log(10, 3, 2, {3, 4}));
  }
}

TEST_CASE("write then load preserves every row", "[data][property]") {
  TempDir tmp;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticSpec spec;
    spec.users = 40;
    spec.items = 30;
    spec.interactions_per_domain = {150};
    spec.n_domains = 3;
    spec.seed = seed;
    const Dataset ds = generate_synthetic(spec);
    const auto p = (tmp.path / "rt.csv").string();
    write_csv(p, ds);
    CHECK(load_csv(p, ds.schema()) == ds);
  }
}

TEST_CASE("split_dataset examples", "[data]") {
  const Dataset ds = rows_per_domain({100, 100});
  const Splits s = split_dataset(ds, {}, 3);
  SECTION("80/10/10 per domain, within one row per cell") {
    for (std::size_t d = 0; d < 2; ++d) {
      CHECK(s.train.domain_counts()[d] >= 78);
      CHECK(s.train.domain_counts()[d] <= 82);
      CHECK(s.val.domain_counts()[d] >= 9);
      CHECK(s.val.domain_counts()[d] <= 11);
      CHECK(s.test.domain_counts()[d] >= 9);
      CHECK(s.test.domain_counts()[d] <= 11);
    }
  }
  SECTION("same seed, same split") {
    const Splits again = split_dataset(ds, {}, 3);
    CHECK(again.train == s.train);
    CHECK(again.val == s.val);
    CHECK(again.test == s.test);
    CHECK_FALSE(split_dataset(ds, {}, 4).test == s.test);
  }
  SECTION("ratios must sum to one") {
    CHECK_THROWS_AS(split_dataset(ds, {0.8, 0.1, 0.2}, 1), ConfigError);
    CHECK_THROWS_AS(split_dataset(ds, {1.1, -0.1, 0.0}, 1), ConfigError);
    CHECK_NOTHROW(split_dataset(ds, {0.5, 0.25, 0.25}, 1));
  }
}

TEST_CASE("splits partition the rows", "[data][property]") {
  // Rows are distinguishable by (user, item, domain) only up to collisions, so tag each row.
  const auto schema = FeatureSchema::click_log(5000, 2, 3);
  Rng rng(9);
  std::vector<Example> rows;
  for (std::size_t i = 0; i < 3000; ++i) rows.push_back({{i, rng.below(2)}, rng.uniform() < 0.3 ? 1 : 0, rng.below(3)});
  const Dataset ds(schema, rows);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Splits s = split_dataset(ds, {0.7, 0.15, 0.15}, seed);
    std::multiset<std::size_t> seen;
    for (const Dataset* part : {&s.train, &s.val, &s.test})
      for (const auto& ex : part->rows()) seen.insert(ex.ids[0]);
    CHECK(seen.size() == ds.size());
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == ds.size());
    for (const Dataset* part : {&s.train, &s.val, &s.test})
      for (std::size_t d = 0; d < 3; ++d) {
        // label rate per domain within 2% of the full data when the cell is large
        const Dataset a = ds.domain(d), b = part->domain(d);
        if (b.size() < 50) continue;
        auto rate = [](const Dataset& x) {
          double pos = 0;
          for (const auto& ex : x.rows()) pos += ex.label;
          return pos / static_cast<double>(x.size());
        };
        CHECK_THAT(rate(b), WithinAbs(rate(a), 0.02));
      }
  }
}

TEST_CASE("small cells still reach every split", "[data]") {
  const Dataset ds = rows_per_domain({6, 4, 3}, 5);
  const Splits s = split_dataset(ds, {}, 1);
  // every (domain, label) cell with at least 3 rows shows up in val and test
  for (std::size_t d = 0; d < 3; ++d)
    for (int y : {0, 1}) {
      std::size_t n = 0;
      for (const auto& ex : ds.rows()) n += ex.domain == d && ex.label == y;
      if (n < 3) continue;
      for (const Dataset* part : {&s.train, &s.val, &s.test}) {
        std::size_t k = 0;
        for (const auto& ex : part->rows()) k += ex.domain == d && ex.label == y;
        CHECK(k >= 1);
      }
    }
}

TEST_CASE("domain_proportions examples", "[data]") {
  CHECK(domain_proportions(rows_per_domain({3, 1})) == std::vector<double>{0.75, 0.25});
  CHECK(domain_proportions(rows_per_domain({7})) == std::vector<double>{1.0});
  CHECK_THROWS_AS(domain_proportions(rows_per_domain({0, 0})), DataError);
  const Dataset ds = rows_per_domain({13, 29, 8});
  auto rows = ds.rows();
  Rng(3).shuffle(std::span<Example>(rows));
  const auto w = domain_proportions(Dataset(ds.schema(), rows));
  CHECK(w == domain_proportions(ds));
  CHECK_THAT(w[0] + w[1] + w[2], WithinAbs(1.0, 1e-15));
}

TEST_CASE("batch_iter examples", "[data]") {
  const Dataset ds = rows_per_domain({10});
  SECTION("10 rows, batch 4") {
    auto it = batch_iter(ds, 4, 1);
    std::vector<std::size_t> sizes;
    Batch b;
    while (it.next(b)) sizes.push_back(b.size());
    CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
  }
  SECTION("no shuffle keeps order") {
    auto it = batch_iter(ds, 3, 1, 0, false);
    CHECK(it.order() == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    Batch b;
    it.next(b);
    CHECK(b.ids[0][1] == ds.rows()[1].ids[0]);
  }
  SECTION("same seed and epoch, same order") {
    CHECK(batch_iter(ds, 4, 7, 2).order() == batch_iter(ds, 4, 7, 2).order());
    CHECK(batch_iter(ds, 4, 7, 2).order() != batch_iter(ds, 4, 7, 3).order());
  }
  SECTION("every row once per epoch") {
    const Dataset big = rows_per_domain({57, 44});
    for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
      auto order = batch_iter(big, 8, 3, epoch).order();
      std::sort(order.begin(), order.end());
      for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
    }
  }
  CHECK_THROWS_AS(batch_iter(ds, 0, 1), ConfigError);
}

TEST_CASE("generate_synthetic", "[data]") {
  SyntheticSpec spec;
  spec.n_domains = 4;
  spec.users = 500;
  spec.items = 400;
  spec.interactions_per_domain = {3000};
  SECTION("reports the requested domains and row counts") {
    const Dataset ds = generate_synthetic(spec);
    CHECK(ds.n_domains() == 4);
    CHECK(ds.domain_counts() == std::vector<std::size_t>(4, 3000));
    spec.interactions_per_domain = {100, 200, 300, 400};
    CHECK(generate_synthetic(spec).domain_counts() == std::vector<std::size_t>{100, 200, 300, 400});
  }
  SECTION("achieved positive rate is within 0.02 of the target") {
    for (double skew : {0.0, 0.9})
      for (double rate : {0.1, 0.3, 0.5}) {
        spec.positive_rate = rate;
        spec.popularity_skew = skew;
        spec.factor_mean = skew > 0 ? 1.0 : 0.0;
        const Dataset ds = generate_synthetic(spec);
        double pos = 0;
        for (const auto& ex : ds.rows()) pos += ex.label;
        CAPTURE(skew, rate);
        CHECK_THAT(pos / static_cast<double>(ds.size()), WithinAbs(rate, 0.02));
      }
  }
  SECTION("divergence 0 gives one shared rule") {
    spec.divergence = 0.0;
    const SyntheticWorld world(spec);
    for (std::size_t u = 0; u < 50; ++u)
      for (std::size_t i = 0; i < 50; ++i)
        for (std::size_t d = 1; d < 4; ++d) CHECK(world.rule_label(d, u, i) == world.rule_label(0, u, i));
  }
  SECTION("pairs are distinct within a domain") {
    spec.popularity_skew = 1.2;
    const Dataset ds = generate_synthetic(spec);
    for (std::size_t d = 0; d < 4; ++d) {
      std::set<std::pair<std::size_t, std::size_t>> pairs;
      const Dataset part = ds.domain(d);
      for (const auto& ex : part.rows()) pairs.emplace(ex.ids[0], ex.ids[1]);
      CHECK(pairs.size() == 3000);
    }
  }
  SECTION("target sparsity sets the row count") {
    spec.target_sparsity = 0.99;
    CHECK(generate_synthetic(spec).size() == 2000);
  }
  SECTION("infeasible specs are rejected") {
    spec.interactions_per_domain = {500 * 400 + 1};
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec.interactions_per_domain = {150000};
    spec.popularity_skew = 1.0;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = SyntheticSpec{};
    spec.divergence = 1.5;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = SyntheticSpec{};
    spec.positive_rate = 1.0;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = SyntheticSpec{};
    spec.interactions_per_domain = {1, 2};
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
  }
  SECTION("dense requests use exact sampling") {
    spec.users = 20;
    spec.items = 10;
    spec.interactions_per_domain = {200};
    const Dataset ds = generate_synthetic(spec);
    CHECK(ds.domain_counts() == std::vector<std::size_t>(4, 200));
  }
}

TEST_CASE("synthetic export is byte-identical for the same spec", "[data][property]") {
  TempDir tmp;
  SyntheticSpec spec;
  spec.popularity_skew = 0.7;
  spec.seed = 11;
  write_csv((tmp.path / "a.csv").string(), generate_synthetic(spec));
  write_csv((tmp.path / "b.csv").string(), generate_synthetic(spec));
  CHECK(file_bytes((tmp.path / "a.csv").string()) == file_bytes((tmp.path / "b.csv").string()));
  spec.seed = 12;
  write_csv((tmp.path / "c.csv").string(), generate_synthetic(spec));
  CHECK(file_bytes((tmp.path / "a.csv").string()) != file_bytes((tmp.path / "c.csv").string()));
}

TEST_CASE("rule agreement falls as divergence grows", "[data][property]") {
  const std::vector<double> levels{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> agreement(levels.size(), 0.0);
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (std::size_t k = 0; k < levels.size(); ++k) {
      SyntheticSpec spec;
      spec.users = 200;
      spec.items = 200;
      spec.divergence = levels[k];
      spec.seed = seed;
      const SyntheticWorld world(spec);
      double same = 0, total = 0;
      for (std::size_t a = 0; a < spec.n_domains; ++a)
        for (std::size_t b = a + 1; b < spec.n_domains; ++b)
          for (std::size_t u = 0; u < 200; ++u)
            for (std::size_t i = 0; i < 200; ++i) {
              same += world.rule_label(a, u, i) == world.rule_label(b, u, i);
              ++total;
            }
      agreement[k] += same / total / 5.0;
    }
  CHECK(agreement[0] == 1.0);
  for (std::size_t k = 1; k < levels.size(); ++k) {
    CAPTURE(k, agreement[k - 1], agreement[k]);
    CHECK(agreement[k] <= agreement[k - 1]);
  }
}

TEST_CASE("synthetic spec JSON round trip", "[data]") {
  SyntheticSpec spec;
  spec.interactions_per_domain = {10, 20, 30, 40};
  spec.popularity_skew = 0.5;
  spec.target_sparsity = 0.9;
  const nlohmann::json j = spec;
  const auto back = j.get<SyntheticSpec>();
  CHECK(nlohmann::json(back) == j);
  CHECK_THROWS_AS((nlohmann::json{{"usres", 4}}.get<SyntheticSpec>()), ConfigError);
}

TEST_CASE("dataset construction validates rows", "[data]") {
  const auto schema = FeatureSchema::click_log(3, 3, 2);
  CHECK_THROWS_AS(Dataset(schema, {{{3, 0}, 0, 0}}), DataError);
  CHECK_THROWS_AS(Dataset(schema, {{{0, 0}, 2, 0}}), DataError);
  CHECK_THROWS_AS(Dataset(schema, {{{0, 0}, 1, 2}}), DataError);
  CHECK_THROWS_AS(Dataset(schema, {{{0}, 1, 0}}), DataError);
  CHECK_THROWS_AS(FeatureSchema::click_log(0, 3, 1).validate(), ConfigError);
}
