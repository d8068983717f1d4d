// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "mlora/autodiff.hpp"
#include "mlora/random.hpp"

using namespace mlora;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double shift = 0.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    v = rng.normal();
    v += v >= 0 ? shift : -shift;
  }
  return t;
}

// loss = sum(op(...) * R) for a random R, so every output coordinate gets a distinct upstream.
NodeId project(Tape<double>& t, NodeId out, const Shape& shape, Rng& rng) {
  return t.sum(t.mul(out, t.constant(random_tensor(shape, rng))));
}

}  // namespace

TEST_CASE("tensor construction validates shape and size", "[autodiff]") {
  CHECK_THROWS_AS(Tensor<double>(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const auto m = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(m.shape() == Shape{2, 3});
  CHECK(m.at(1, 2) == 6);
  CHECK(m.size() == 6);
}

TEST_CASE("forward examples", "[autodiff]") {
  SECTION("matmul by a column of ones sums rows") {
    Tape<double> t;
    const NodeId a = t.input("a");
    const NodeId b = t.input("b");
    const NodeId y = t.matmul(a, b);
    Feed<double> feed;
    feed.tensors.emplace("a", Tensor<double>::matrix({{1, 2}, {3, 4}}));
    feed.tensors.emplace("b", Tensor<double>::matrix({{1}, {1}}));
    const auto& out = t.forward(feed, y);
    REQUIRE(out.shape() == Shape{2, 1});
    CHECK(out[0] == 3);
    CHECK(out[1] == 7);
  }
  SECTION("sigmoid(0) is one half") {
    Tape<double> t;
    const NodeId y = t.sigmoid(t.input("x"));
    Feed<double> feed;
    feed.tensors.emplace("x", Tensor<double>::scalar(0));
    CHECK(t.forward(feed, y).item() == 0.5);
  }
  SECTION("softmax of zeros is uniform") {
    Tape<double> t;
    const NodeId y = t.softmax(t.input("x"));
    Feed<double> feed;
    feed.tensors.emplace("x", Tensor<double>::row({0, 0, 0}));
    const auto out = t.forward(feed, y);
    for (double v : out.values()) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));
  }
}

TEST_CASE("backward examples", "[autodiff]") {
  SECTION("sigmoid derivative at zero") {
    Parameter<double> x{"x", Tensor<double>::scalar(0)};
    Tape<double> t;
    const NodeId y = t.sigmoid(t.param(x));
    t.forward({}, y);
    t.backward(y);
    CHECK((*t.param_grad(x))[0] == 0.25);
  }
  SECTION("d(W.x)/dW is x") {
    Parameter<double> w{"W", Tensor<double>::matrix({{0.3, -0.7}})};
    Tape<double> t;
    const NodeId y = t.matmul(t.param(w), t.input("x"));
    Feed<double> feed;
    feed.tensors.emplace("x", Tensor<double>::matrix({{1}, {2}}));
    t.forward(feed, y);
    t.backward(y);
    const auto& g = *t.param_grad(w);
    CHECK(g[0] == 1);
    CHECK(g[1] == 2);
  }
  SECTION("relu mask") {
    Parameter<double> x{"x", Tensor<double>::row({-1, 2})};
    Tape<double> t;
    const NodeId y = t.sum(t.relu(t.param(x)));
    t.forward({}, y);
    t.backward(y);
    const auto& g = *t.param_grad(x);
    CHECK(g[0] == 0);
    CHECK(g[1] == 1);
  }
}

TEST_CASE("errors name the offending op or input", "[autodiff]") {
  SECTION("shape mismatch") {
    Tape<double> t;
    const NodeId y = t.matmul(t.input("a"), t.input("b"));
    Feed<double> feed;
    feed.tensors.emplace("a", Tensor<double>(Shape{2, 3}));
    feed.tensors.emplace("b", Tensor<double>(Shape{2, 3}));
    CHECK_THROWS_WITH(t.forward(feed, y), ContainsSubstring("op " + std::to_string(y)));
  }
  SECTION("unbound input") {
    Tape<double> t;
    const NodeId y = t.relu(t.input("features"));
    CHECK_THROWS_WITH(t.forward({}, y), ContainsSubstring("features"));
  }
  SECTION("non-scalar loss") {
    Parameter<double> p{"p", Tensor<double>::row({1, 2})};
    Tape<double> t;
    const NodeId y = t.relu(t.param(p));
    t.forward({}, y);
    CHECK_THROWS_AS(t.backward(y), ShapeError);
  }
}

TEST_CASE("functional grad_check", "[autodiff]") {
  const std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& th) { return th[0] * th[0]; };
  const std::function<Tensor<double>(const Tensor<double>&)> g = [](const Tensor<double>& th) {
    return Tensor<double>::scalar(2 * th[0]);
  };
  CHECK(grad_check(f, g, Tensor<double>::scalar(3), 1e-5) < 1e-8);
  CHECK_THROWS_AS(grad_check(f, g, Tensor<double>::scalar(3), 1e-3), ConfigError);
  CHECK_THROWS_AS(grad_check(f, g, Tensor<double>::scalar(3), 1e-8), ConfigError);
  const std::function<double(const Tensor<double>&)> bad = [](const Tensor<double>&) { return std::nan(""); };
  CHECK_THROWS_AS(grad_check(bad, g, Tensor<double>::scalar(3), 1e-5), NumericError);
}

TEST_CASE("two-layer sigmoid MLP with BCE passes grad_check", "[autodiff]") {
  Rng rng(7);
  Parameter<double> w1{"W1", random_tensor({5, 4}, rng)}, b1{"b1", random_tensor({1, 5}, rng)};
  Parameter<double> w2{"W2", random_tensor({1, 5}, rng)}, b2{"b2", random_tensor({1, 1}, rng)};
  Tape<double> t;
  const NodeId h = t.sigmoid(t.add(t.matmul_nt(t.input("x"), t.param(w1)), t.param(b1)));
  const NodeId p = t.sigmoid(t.add(t.matmul_nt(h, t.param(w2)), t.param(b2)));
  const NodeId loss = t.bce(p, t.input("y"));
  Feed<double> feed;
  feed.tensors.emplace("x", random_tensor({6, 4}, rng));
  feed.tensors.emplace("y", Tensor<double>(Shape{6, 1}, std::vector<double>{1, 0, 0, 1, 1, 0}));
  CHECK(grad_check(t, loss, feed, 1e-6) < 1e-6);
}

TEST_CASE("relu net at kink-avoiding parameters passes grad_check", "[autodiff]") {
  Rng rng(11);
  Parameter<double> w1{"W1", random_tensor({6, 3}, rng, 0.1)}, b1{"b1", random_tensor({1, 6}, rng, 0.1)};
  Parameter<double> w2{"W2", random_tensor({1, 6}, rng, 0.1)};
  Tape<double> t;
  const NodeId h = t.relu(t.add(t.matmul_nt(t.input("x"), t.param(w1)), t.param(b1)));
  const NodeId loss = t.mean(t.matmul_nt(h, t.param(w2)));
  Feed<double> feed;
  feed.tensors.emplace("x", random_tensor({5, 3}, rng, 0.1));
  CHECK(grad_check(t, loss, feed, 1e-6) < 1e-5);
}

TEST_CASE("every primitive op matches central differences", "[autodiff][property]") {
  using Builder = std::function<NodeId(Tape<double>&, std::vector<Parameter<double>>&, Rng&, Shape&)>;
  const std::vector<std::pair<std::string, Builder>> ops = {
      {"matmul",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 2};
         return t.matmul(t.param(ps[0]), t.param(ps[1]));
       }},
      {"matmul_nt",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.matmul_nt(t.param(ps[0]), t.param(ps[2]));
       }},
      {"add_broadcast_row",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.add(t.param(ps[0]), t.param(ps[3]));
       }},
      {"add_broadcast_col",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.add(t.param(ps[4]), t.param(ps[0]));
       }},
      {"mul_broadcast",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.mul(t.param(ps[0]), t.param(ps[4]));
       }},
      {"mul_same",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.mul(t.param(ps[0]), t.param(ps[0]));
       }},
      {"relu",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.relu(t.param(ps[0]));
       }},
      {"sigmoid",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.sigmoid(t.param(ps[0]));
       }},
      {"softmax",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.softmax(t.param(ps[0]));
       }},
      {"concat",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 5};
         return t.concat({t.param(ps[0]), t.param(ps[4])});
       }},
      {"sum_last",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 1};
         return t.sum_last(t.param(ps[0]));
       }},
      {"mean",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {1, 1};
         return t.mean(t.param(ps[0]));
       }},
      {"scale",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 4};
         return t.scale(t.param(ps[0]), -1.7);
       }},
      {"slice_cols",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {3, 2};
         return t.slice_cols(t.param(ps[0]), 1, 2);
       }},
      {"gather",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {5, 4};
         return t.gather(t.param(ps[0]), "idx");
       }},
      {"bce",
       [](Tape<double>& t, auto& ps, Rng&, Shape& out) {
         out = {1, 1};
         return t.bce(t.sigmoid(t.param(ps[4])), t.input("y"));
       }},
  };
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (const auto& [name, build] : ops) {
      CAPTURE(name, seed);
      Rng rng(seed);
      std::vector<Parameter<double>> ps;
      ps.push_back({"x34", random_tensor({3, 4}, rng, 0.05)});
      ps.push_back({"w42", random_tensor({4, 2}, rng)});
      ps.push_back({"w44", random_tensor({4, 4}, rng)});
      ps.push_back({"r14", random_tensor({1, 4}, rng)});
      ps.push_back({"c31", random_tensor({3, 1}, rng)});
      Tape<double> t;
      Shape out;
      const NodeId y = build(t, ps, rng, out);
      const NodeId loss = project(t, y, out, rng);
      Feed<double> feed;
      feed.indices.emplace("idx", std::vector<std::size_t>{2, 0, 2, 1, 2});  // repeats exercise scatter-add
      feed.tensors.emplace("y", Tensor<double>(Shape{3, 1}, std::vector<double>{1, 0, 1}));
      CHECK(grad_check(t, loss, feed, 1e-6) < 1e-5);
    }
}

TEST_CASE("gather backward is scatter-add", "[autodiff]") {
  Parameter<double> table{"E", Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}})};
  Tape<double> t;
  const NodeId loss = t.sum(t.gather(t.param(table), "ids"));
  Feed<double> feed;
  feed.indices.emplace("ids", std::vector<std::size_t>{2, 2, 0});
  t.forward(feed, loss);
  t.backward(loss);
  const auto& g = *t.param_grad(table);
  CHECK(g.at(0, 0) == 1);
  CHECK(g.at(1, 0) == 0);
  CHECK(g.at(2, 1) == 2);
  feed.indices["ids"] = {7};
  CHECK_THROWS_AS(t.forward(feed, loss), ShapeError);
}

TEST_CASE("a parameter used twice accumulates", "[autodiff]") {
  Parameter<double> w{"w", Tensor<double>::row({1.5, -2})};
  Tape<double> t;
  const NodeId loss = t.sum(t.add(t.param(w), t.scale(t.param(w), 3)));
  t.forward({}, loss);
  t.backward(loss);
  CHECK((*t.param_grad(w))[0] == 4);
  CHECK((*t.param_grad(w))[1] == 4);
}

TEST_CASE("frozen parameters get no gradient", "[autodiff]") {
  Parameter<double> a{"a", Tensor<double>::row({1, 2})};
  Parameter<double> b{"b", Tensor<double>::row({3, 4}), false};
  Tape<double> t;
  const NodeId loss = t.sum(t.mul(t.param(a), t.param(b)));
  t.forward({}, loss);
  t.backward(loss);
  REQUIRE(t.param_grad(a) != nullptr);
  CHECK(t.param_grad(b) == nullptr);
  CHECK((*t.param_grad(a))[1] == 4);
  CHECK(t.gradients().count("b") == 0);
}

TEST_CASE("backward is linear in the upstream gradient", "[autodiff][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter<double> w{"W", random_tensor({4, 3}, rng)}, b{"b", random_tensor({1, 4}, rng)};
    Tape<double> t;
    const NodeId h = t.softmax(t.add(t.matmul_nt(t.input("x"), t.param(w)), t.param(b)));
    const NodeId loss = t.mean(t.mul(h, t.sigmoid(h)));
    Feed<double> feed;
    feed.tensors.emplace("x", random_tensor({5, 3}, rng));
    t.forward(feed, loss);
    t.backward(loss, 1.0);
    const Tensor<double> g1 = *t.param_grad(w);
    t.backward(loss, 2.0);
    const Tensor<double> g2 = *t.param_grad(w);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2 * g1[i]);
  }
}

TEST_CASE("forward is deterministic and finite", "[autodiff][property]") {
  Rng rng(5);
  Parameter<double> w{"W", random_tensor({8, 6}, rng)};
  Tape<double> t;
  const NodeId y = t.sigmoid(t.matmul_nt(t.relu(t.input("x")), t.param(w)));
  Feed<double> feed;
  feed.tensors.emplace("x", random_tensor({32, 6}, rng));
  const Tensor<double> first = t.forward(feed, y);
  const Tensor<double> second = t.forward(feed, y);
  CHECK(first == second);
  CHECK(first.all_finite());
}

TEST_CASE("bce clamps probabilities", "[autodiff]") {
  Tape<double> t;
  const NodeId loss = t.bce(t.input("p"), t.input("y"));
  Feed<double> feed;
  feed.tensors.emplace("p", Tensor<double>::scalar(1.0));
  feed.tensors.emplace("y", Tensor<double>::scalar(0.0));
  CHECK_THAT(t.forward(feed, loss).item(), WithinAbs(-std::log(kBceClamp), 1e-9));
  feed.tensors["p"] = Tensor<double>::scalar(0.5);
  CHECK_THAT(t.forward(feed, loss).item(), WithinAbs(std::log(2.0), 1e-15));
}

TEST_CASE("the engine also runs in 32-bit", "[autodiff]") {
  Parameter<float> w{"w", Tensor<float>::matrix({{0.5f, -1.0f}})};
  Tape<float> t;
  const NodeId y = t.sum(t.sigmoid(t.matmul_nt(t.input("x"), t.param(w))));
  Feed<float> feed;
  feed.tensors.emplace("x", Tensor<float>::matrix({{1.0f, 2.0f}}));
  t.forward(feed, y);
  t.backward(y);
  const float s = 1.0f / (1.0f + std::exp(1.5f));
  CHECK_THAT((*t.param_grad(w))[1], WithinAbs(2.0f * s * (1.0f - s), 1e-6));
}
