// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// CTR backbones (MLP tower, Wide & Deep, DeepFM) whose tower and head layers are
// instantiated plain, with one LoRA adapter per domain (MLoRA), or with a gated
// mixture of every domain's adapters (moe). Embedding tables and the
// wide / FM parts always belong to the backbone.
//
// A model is executed through a Route:
//   backbone        adapters ignored
//   single(d, k)    backbone + expert (d, k) only (MLoRA inference, expert training)
//   mixture         gated sum over every expert (moe inference, gate training)
// Each route is recorded once into its own Tape and re-executed per batch.

#pragma once

#include <compare>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlora/autodiff.hpp"
#include "mlora/data.hpp"
#include "mlora/error.hpp"
#include "mlora/layers.hpp"
#include "mlora/params.hpp"
#include "mlora/random.hpp"

namespace mlora {

enum class Arch { kMlp, kWdl, kDeepFm };
enum class Mode { kPlain, kMlora, kMoe };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::kMlp: return "mlp";
    case Arch::kWdl: return "wdl";
    case Arch::kDeepFm: return "deepfm";
  }
  return "?";
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kPlain: return "plain";
    case Mode::kMlora: return "mlora";
    case Mode::kMoe: return "moe";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::kMlp;
  if (s == "wdl") return Arch::kWdl;
  if (s == "deepfm") return Arch::kDeepFm;
  throw ConfigError("unknown arch '" + s + "' (expected mlp, wdl or deepfm)");
}

inline Mode parse_mode(const std::string& s) {
  if (s == "plain") return Mode::kPlain;
  if (s == "mlora") return Mode::kMlora;
  if (s == "moe") return Mode::kMoe;
  throw ConfigError("unknown mode '" + s + "' (expected plain, mlora or moe)");
}

struct AdapterConfig {
  std::size_t rank = 4;
  double alpha = 4.0;
  std::size_t experts_per_domain = 1;
  bool input_conditioned_gate = false;
  bool gate_includes_backbone = false;
  GateClamp gate_clamp = GateClamp::kNone;
  double a_init_std = 0.02;

  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

struct ModelConfig {
  Arch arch = Arch::kMlp;
  Mode mode = Mode::kMoe;
  std::vector<std::size_t> hidden{64, 32};
  AdapterConfig adapter;
  bool domain_as_feature = false;
  double embedding_init_std = 0.05;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"arch", to_string(c.arch)},
       {"mode", to_string(c.mode)},
       {"hidden", c.hidden},
       {"domain_as_feature", c.domain_as_feature},
       {"embedding_init_std", c.embedding_init_std},
       {"adapter",
        {{"rank", c.adapter.rank},
         {"alpha", c.adapter.alpha},
         {"experts_per_domain", c.adapter.experts_per_domain},
         {"input_conditioned_gate", c.adapter.input_conditioned_gate},
         {"gate_includes_backbone", c.adapter.gate_includes_backbone},
         {"gate_clamp", c.adapter.gate_clamp == GateClamp::kOneHotDomain ? "one_hot_domain" : "none"},
         {"a_init_std", c.adapter.a_init_std}}}};
}

inline GateClamp parse_gate_clamp(const std::string& s) {
  if (s == "none") return GateClamp::kNone;
  if (s == "one_hot_domain") return GateClamp::kOneHotDomain;
  throw ConfigError("unknown gate_clamp '" + s + "' (expected none or one_hot_domain)");
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.arch = parse_arch(j.value("arch", to_string(c.arch)));
  c.mode = parse_mode(j.value("mode", to_string(c.mode)));
  c.hidden = j.value("hidden", c.hidden);
  c.domain_as_feature = j.value("domain_as_feature", c.domain_as_feature);
  c.embedding_init_std = j.value("embedding_init_std", c.embedding_init_std);
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    c.adapter.rank = a.value("rank", c.adapter.rank);
    c.adapter.alpha = a.value("alpha", c.adapter.alpha);
    c.adapter.experts_per_domain = a.value("experts_per_domain", c.adapter.experts_per_domain);
    c.adapter.input_conditioned_gate = a.value("input_conditioned_gate", c.adapter.input_conditioned_gate);
    c.adapter.gate_includes_backbone = a.value("gate_includes_backbone", c.adapter.gate_includes_backbone);
    c.adapter.gate_clamp = parse_gate_clamp(a.value("gate_clamp", std::string("none")));
    c.adapter.a_init_std = a.value("a_init_std", c.adapter.a_init_std);
  }
}

struct Route {
  enum class Kind { kBackbone, kSingle, kMixture };
  Kind kind = Kind::kBackbone;
  std::size_t domain = 0;
  std::size_t replica = 0;

  static Route backbone() { return {}; }
  static Route single(std::size_t domain, std::size_t replica = 0) { return {Kind::kSingle, domain, replica}; }
  static Route mixture() { return {Kind::kMixture}; }

  std::string str() const {
    switch (kind) {
      case Kind::kBackbone: return "backbone";
      case Kind::kSingle: return "single(" + std::to_string(domain) + "," + std::to_string(replica) + ")";
      case Kind::kMixture: return "mixture";
    }
    return "?";
  }

  friend auto operator<=>(const Route&, const Route&) = default;
};

/// sum_{i<j} <v_i, v_j> via 1/2 sum_f [(sum_i v_if)^2 - sum_i v_if^2].
inline double fm_pairwise(std::span<const std::vector<double>> field_embeddings) {
  if (field_embeddings.empty()) throw ShapeError("fm_pairwise needs at least one field");
  const std::size_t k = field_embeddings[0].size();
  double out = 0.0;
  for (const auto& v : field_embeddings)
    if (v.size() != k) throw ShapeError("fm_pairwise: embedding dimensions differ across fields");
  for (std::size_t f = 0; f < k; ++f) {
    double s = 0.0, sq = 0.0;
    for (const auto& v : field_embeddings) {
      s += v[f];
      sq += v[f] * v[f];
    }
    out += s * s - sq;
  }
  return 0.5 * out;
}

/// Sum of per-(field, id) weights plus a global bias, for each row of `batch`.
inline std::vector<double> wide_logit(const Batch& batch, std::span<const Tensor<double>> weights, double bias) {
  if (weights.size() != batch.ids.size()) throw ShapeError("wide_logit: one weight table per field required");
  std::vector<double> out(batch.size(), 0.0);
  for (std::size_t f = 0; f < weights.size(); ++f)
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto id = batch.ids[f][r];
      if (id >= weights[f].rows()) throw DataError("wide_logit: id " + std::to_string(id) + " out of range");
      out[r] += weights[f][id];
    }
  for (auto& v : out) v += bias;
  return out;
}

class CtrModel {
 public:
  struct Graph {
    Tape<double> tape;
    NodeId deep_logit = 0;
    std::optional<NodeId> wide_logit, fm_logit;
    NodeId logit = 0;
    NodeId prob = 0;
    NodeId loss = 0;
  };

  CtrModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed)
      : schema_(std::move(schema)), config_(std::move(config)), seed_(seed) {
    schema_.validate();
    if (config_.mode != Mode::kPlain && schema_.n_domains == 0)
      throw ConfigError("adapted modes need at least one domain");
    if (config_.mode == Mode::kMoe && config_.adapter.experts_per_domain == 0)
      throw ConfigError("moe mode needs at least one expert per domain");
    if (config_.adapter.rank == 0 || !(config_.adapter.alpha > 0))
      throw ConfigError("adapter rank and alpha must be positive");
    if (config_.adapter.gate_clamp == GateClamp::kOneHotDomain && config_.adapter.gate_includes_backbone)
      throw ConfigError("one_hot_domain gate clamp is only defined for the residual gate form");
    for (auto h : config_.hidden)
      if (h == 0) throw ConfigError("hidden layer widths must be positive");
    build();
  }

  CtrModel(const CtrModel&) = delete;
  CtrModel& operator=(const CtrModel&) = delete;

  const FeatureSchema& schema() const noexcept { return schema_; }
  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const std::vector<MoELayer<double>>& layers() const noexcept { return layers_; }
  std::size_t experts_per_domain() const noexcept { return experts_per_domain_; }

  std::vector<ParamListing> param_groups() const { return params_.listing(); }

  /// The route a trained model of this mode uses at inference.
  Route default_route(std::size_t domain) const {
    switch (config_.mode) {
      case Mode::kPlain: return Route::backbone();
      case Mode::kMlora: return Route::single(domain, 0);
      case Mode::kMoe: return Route::mixture();
    }
    return Route::backbone();
  }

  void check_route(const Route& r) const {
    if (r.kind == Route::Kind::kSingle) {
      if (config_.mode == Mode::kPlain) throw ConfigError("plain models have no experts");
      if (r.domain >= schema_.n_domains || r.replica >= experts_per_domain_)
        throw ConfigError("no expert " + r.str());
    }
    if (r.kind == Route::Kind::kMixture && config_.mode != Mode::kMoe)
      throw ConfigError("mixture route requires mode moe");
  }

  /// Compiled graph for a route; compiled on first use. Distinct routes may be
  /// executed from different threads, one route from one thread at a time.
  Graph& graph(const Route& route) {
    check_route(route);
    std::lock_guard<std::mutex> lock(*mu_);
    auto it = graphs_.find(route);
    if (it == graphs_.end()) it = graphs_.emplace(route, compile(route)).first;
    return *it->second;
  }

  void validate_batch(const Batch& batch) const {
    if (batch.ids.size() != schema_.fields.size()) throw DataError("batch field count does not match schema");
    for (std::size_t f = 0; f < batch.ids.size(); ++f) {
      if (batch.ids[f].size() != batch.size()) throw DataError("ragged batch in field " + schema_.fields[f].name);
      for (auto id : batch.ids[f])
        if (id >= schema_.fields[f].cardinality)
          throw DataError("id " + std::to_string(id) + " out of range for field '" + schema_.fields[f].name +
                          "' (cardinality " + std::to_string(schema_.fields[f].cardinality) + ")");
    }
  }

  /// Inputs for one batch whose rows are routed with `domain`.
  Feed<double> feed(const Batch& batch, std::size_t domain) const {
    if (batch.size() == 0) throw DataError("empty batch");
    validate_batch(batch);
    if (domain >= schema_.n_domains) throw DataError("domain " + std::to_string(domain) + " out of range");
    Feed<double> feed;
    for (std::size_t f = 0; f < batch.ids.size(); ++f) feed.indices.emplace(field_input(f), batch.ids[f]);
    feed.indices.emplace("domain", std::vector<std::size_t>{domain});
    if (config_.domain_as_feature) {
      std::vector<std::size_t> rows = batch.domains;
      if (rows.size() != batch.size()) rows.assign(batch.size(), domain);
      feed.indices.emplace("domain_feature", std::move(rows));
    }
    feed.tensors.emplace("y", Tensor<double>(Shape{batch.size(), 1}, batch.labels));
    return feed;
  }

  std::vector<double> predict(const Batch& batch, std::size_t domain, const Route& route) {
    Graph& g = graph(route);
    const auto& p = g.tape.forward(feed(batch, domain), g.prob);
    return {p.values().begin(), p.values().end()};
  }

  std::vector<double> predict(const Batch& batch, std::size_t domain) {
    return predict(batch, domain, default_route(domain));
  }

 private:
  static std::string field_input(std::size_t f) { return "field" + std::to_string(f); }

  Tensor<double> init_normal(const std::string& name, Shape shape, double stddev) const {
    Tensor<double> t(std::move(shape));
    Rng rng(derive_seed(seed_, {fnv1a(name.data(), name.size())}));
    for (auto& v : t.values()) v = rng.normal() * stddev;
    return t;
  }

  void build() {
    const std::size_t k = schema_.embedding_dim;
    for (const auto& f : schema_.fields)
      embeddings_.push_back(
          &params_.add("emb/" + f.name, GroupTag::backbone(), init_normal("emb/" + f.name, {f.cardinality, k}, config_.embedding_init_std)));
    if (config_.domain_as_feature)
      embeddings_.push_back(&params_.add("emb/domain", GroupTag::backbone(),
                                         init_normal("emb/domain", {schema_.n_domains, k}, config_.embedding_init_std)));

    if (config_.arch != Arch::kMlp) {
      const std::size_t n = schema_.fields.size() + (config_.domain_as_feature ? 1 : 0);
      for (std::size_t f = 0; f < n; ++f) {
        const std::string name = "wide/" + (f < schema_.fields.size() ? schema_.fields[f].name : std::string("domain"));
        const std::size_t card = f < schema_.fields.size() ? schema_.fields[f].cardinality : schema_.n_domains;
        wide_.push_back(&params_.add(name, GroupTag::backbone(), Tensor<double>(Shape{card, 1})));
      }
      wide_bias_ = &params_.add("wide/bias", GroupTag::backbone(), Tensor<double>(Shape{1, 1}));
    }

    experts_per_domain_ = config_.mode == Mode::kMoe ? config_.adapter.experts_per_domain : 1;
    std::size_t d_in = embeddings_.size() * k;
    const std::size_t n_layers = config_.hidden.size() + 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const bool head = l + 1 == n_layers;
      const std::size_t d_out = head ? 1 : config_.hidden[l];
      const std::string prefix = head ? "head" : "tower" + std::to_string(l);
      MoELayer<double> layer;
      layer.base.weight = &params_.add(prefix + "/W", GroupTag::backbone(),
                                       init_normal(prefix + "/W", {d_out, d_in}, std::sqrt((head ? 1.0 : 2.0) / static_cast<double>(d_in))));
      layer.base.bias = &params_.add(prefix + "/b", GroupTag::backbone(), Tensor<double>(Shape{1, d_out}));
      layer.base.activation = head ? Activation::kIdentity : Activation::kRelu;
      if (config_.mode != Mode::kPlain) add_adapters(layer, prefix, static_cast<int>(l), d_in, d_out);
      layers_.push_back(layer);
      d_in = d_out;
    }
  }

  void add_adapters(MoELayer<double>& layer, const std::string& prefix, int l, std::size_t d_in, std::size_t d_out) {
    const std::size_t r = std::min({config_.adapter.rank, d_in, d_out});
    for (std::size_t d = 0; d < schema_.n_domains; ++d)
      for (std::size_t e = 0; e < experts_per_domain_; ++e) {
        const std::string name = prefix + "/expert_d" + std::to_string(d) + "_k" + std::to_string(e);
        const auto tag = GroupTag::expert(static_cast<int>(d), static_cast<int>(e), l);
        LoRAAdapter<double> a;
        a.a = &params_.add(name + "/A", tag, init_normal(name + "/A", {r, d_in}, config_.adapter.a_init_std));
        a.b = &params_.add(name + "/B", tag, Tensor<double>(Shape{d_out, r}));
        a.alpha = config_.adapter.alpha;
        a.domain = d;
        a.replica = e;
        layer.experts.push_back(a);
      }
    if (config_.mode != Mode::kMoe) return;
    const std::size_t entries = layer.experts.size() + (config_.adapter.gate_includes_backbone ? 1 : 0);
    layer.gate.logits = &params_.add(prefix + "/gate/logits", GroupTag::gate(l), Tensor<double>(Shape{schema_.n_domains, entries}));
    if (config_.adapter.input_conditioned_gate)
      layer.gate.projection = &params_.add(prefix + "/gate/proj", GroupTag::gate(l), Tensor<double>(Shape{entries, d_in}));
    layer.gate.clamp = config_.adapter.gate_clamp;
    layer.gate.experts_per_domain = experts_per_domain_;
    layer.gate_includes_backbone = config_.adapter.gate_includes_backbone;
  }

  NodeId layer_forward(Tape<double>& t, NodeId x, const MoELayer<double>& layer, const Route& route) const {
    switch (route.kind) {
      case Route::Kind::kBackbone: return dense_forward(t, x, layer.base);
      case Route::Kind::kSingle:
        return mlora_forward(t, x, route.domain * experts_per_domain_ + route.replica, layer.base, layer.experts);
      case Route::Kind::kMixture: return moe_forward(t, x, layer, "domain");
    }
    return x;
  }

  std::unique_ptr<Graph> compile(const Route& route) const {
    auto g = std::make_unique<Graph>();
    auto& t = g->tape;
    std::vector<NodeId> fields;
    for (std::size_t f = 0; f < embeddings_.size(); ++f)
      fields.push_back(t.gather(t.param(*embeddings_[f]), f < schema_.fields.size() ? field_input(f) : "domain_feature"));
    NodeId h = t.concat(fields);
    for (const auto& layer : layers_) h = layer_forward(t, h, layer, route);
    g->deep_logit = h;
    NodeId logit = h;
    if (config_.arch != Arch::kMlp) {
      NodeId wide = t.param(*wide_bias_);
      for (std::size_t f = 0; f < wide_.size(); ++f)
        wide = t.add(t.gather(t.param(*wide_[f]), f < schema_.fields.size() ? field_input(f) : "domain_feature"), wide);
      g->wide_logit = wide;
      logit = t.add(logit, wide);
    }
    if (config_.arch == Arch::kDeepFm) {
      NodeId sum = fields[0];
      NodeId sq = t.mul(fields[0], fields[0]);
      for (std::size_t f = 1; f < fields.size(); ++f) {
        sum = t.add(sum, fields[f]);
        sq = t.add(sq, t.mul(fields[f], fields[f]));
      }
      const NodeId fm = t.scale(t.sum_last(t.add(t.mul(sum, sum), t.scale(sq, -1.0))), 0.5);
      g->fm_logit = fm;
      logit = t.add(logit, fm);
    }
    g->logit = logit;
    g->prob = t.sigmoid(logit);
    g->loss = t.bce(g->prob, t.input("y"));
    return g;
  }

  FeatureSchema schema_;
  ModelConfig config_;
  std::uint64_t seed_;
  ParamStore params_;
  std::vector<Parameter<double>*> embeddings_;
  std::vector<Parameter<double>*> wide_;
  Parameter<double>* wide_bias_ = nullptr;
  std::vector<MoELayer<double>> layers_;
  std::size_t experts_per_domain_ = 1;
  std::map<Route, std::unique_ptr<Graph>> graphs_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

inline std::unique_ptr<CtrModel> build_model(const FeatureSchema& schema, const ModelConfig& config, std::uint64_t seed) {
  return std::make_unique<CtrModel>(schema, config, seed);
}

inline std::vector<double> predict_ctr(CtrModel& model, const Batch& batch, std::size_t domain) {
  return model.predict(batch, domain);
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, little-endian u64 header length, JSON header
// (schema, config, seed, parameter table), then raw IEEE-754 doubles.

inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'O', 'R', 'A', 'C', 'K', '1'};

inline void save_checkpoint(const CtrModel& model, const std::string& path) {
  nlohmann::json header;
  header["schema"] = model.schema();
  header["config"] = model.config();
  header["seed"] = model.seed();
  header["params"] = nlohmann::json::array();
  for (const auto& e : model.params().entries())
    header["params"].push_back({{"name", e->param.name}, {"tag", e->tag.str()}, {"shape", e->param.value.shape()}});
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  std::uint64_t len = text.size();
  unsigned char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : model.params().entries())
    for (double v : e->param.value.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      unsigned char b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(b), 8);
    }
  if (!out) throw DataError("checkpoint write to '" + path + "' failed");
}

inline std::unique_ptr<CtrModel> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[8];
  unsigned char len_bytes[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("'" + path + "' is not a checkpoint");
  if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) throw DataError("truncated checkpoint '" + path + "'");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("truncated checkpoint '" + path + "'");
  const auto header = nlohmann::json::parse(text);
  auto model = build_model(header.at("schema").get<FeatureSchema>(), header.at("config").get<ModelConfig>(),
                           header.at("seed").get<std::uint64_t>());
  const auto& table = header.at("params");
  if (table.size() != model->params().size()) throw DataError("checkpoint parameter table does not match model");
  std::size_t i = 0;
  for (const auto& e : model->params().entries()) {
    const auto& row = table.at(i++);
    if (row.at("name").get<std::string>() != e->param.name || row.at("tag").get<std::string>() != e->tag.str() ||
        row.at("shape").get<Shape>() != e->param.value.shape())
      throw DataError("checkpoint parameter '" + row.at("name").get<std::string>() + "' does not match model");
    for (double& v : e->param.value.values()) {
      unsigned char b[8];
      if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated checkpoint '" + path + "'");
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
      std::memcpy(&v, &bits, sizeof v);
    }
  }
  return model;
}

}  // namespace mlora
