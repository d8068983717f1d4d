// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adapter algebra recorded onto a Tape: dense layers, LoRA deltas, per-domain
// MLoRA selection and the gated mixture of every domain's adapters.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mlora/autodiff.hpp"
#include "mlora/error.hpp"

namespace mlora {

enum class Activation { kIdentity, kRelu, kSigmoid };

/// How the mixture weights are produced.
enum class GateClamp {
  kNone,          // learned softmax
  kOneHotDomain,  // weight 1 on expert (domain, replica 0), 0 elsewhere
};

template <typename T>
struct DenseLayer {
  Parameter<T>* weight = nullptr;  // d_out x d_in
  Parameter<T>* bias = nullptr;    // 1 x d_out
  Activation activation = Activation::kIdentity;

  std::size_t d_in() const { return weight->value.cols(); }
  std::size_t d_out() const { return weight->value.rows(); }
};

template <typename T>
struct LoRAAdapter {
  Parameter<T>* a = nullptr;  // rank x d_in
  Parameter<T>* b = nullptr;  // d_out x rank
  T alpha = T{4};
  std::size_t domain = 0;
  std::size_t replica = 0;

  std::size_t rank() const { return a->value.rows(); }
  T scale() const { return alpha / static_cast<T>(rank()); }
};

template <typename T>
struct GateNet {
  Parameter<T>* logits = nullptr;      // n_domains x n_entries
  Parameter<T>* projection = nullptr;  // n_entries x d_in, only with input-conditioned gating
  GateClamp clamp = GateClamp::kNone;
  std::size_t experts_per_domain = 1;

  std::size_t n_domains() const { return logits->value.rows(); }
  std::size_t n_entries() const { return logits->value.cols(); }
};

/// A base dense layer with every domain's adapters and a domain-conditioned gate.
/// experts[d * experts_per_domain + k] is replica k of domain d.
template <typename T>
struct MoELayer {
  DenseLayer<T> base;
  std::vector<LoRAAdapter<T>> experts;
  GateNet<T> gate;
  bool gate_includes_backbone = false;
};

template <typename T>
NodeId apply_activation(Tape<T>& tape, NodeId x, Activation act) {
  switch (act) {
    case Activation::kIdentity: return x;
    case Activation::kRelu: return tape.relu(x);
    case Activation::kSigmoid: return tape.sigmoid(x);
  }
  return x;
}

/// x . W^T + b, before the activation.
template <typename T>
NodeId dense_preactivation(Tape<T>& tape, NodeId x, const DenseLayer<T>& layer) {
  return tape.add(tape.matmul_nt(x, tape.param(*layer.weight)), tape.param(*layer.bias));
}

template <typename T>
NodeId dense_forward(Tape<T>& tape, NodeId x, const DenseLayer<T>& layer) {
  return apply_activation(tape, dense_preactivation(tape, x, layer), layer.activation);
}

/// (alpha / r) . B . (A . x) for each row x; no base term.
template <typename T>
NodeId lora_delta(Tape<T>& tape, NodeId x, const LoRAAdapter<T>& adapter) {
  const NodeId ax = tape.matmul_nt(x, tape.param(*adapter.a));
  return tape.scale(tape.matmul_nt(ax, tape.param(*adapter.b)), adapter.scale());
}

/// Base layer plus the adapter of `domain` only.
template <typename T>
NodeId mlora_forward(Tape<T>& tape, NodeId x, std::size_t domain, const DenseLayer<T>& base,
                     const std::vector<LoRAAdapter<T>>& adapters) {
  if (domain >= adapters.size())
    throw ConfigError("domain " + std::to_string(domain) + " out of range for " + std::to_string(adapters.size()) +
                      " adapters");
  const NodeId pre = tape.add(dense_preactivation(tape, x, base), lora_delta(tape, x, adapters[domain]));
  return apply_activation(tape, pre, base.activation);
}

/// Mixture weights for the domain bound under `domain_input` (a single index).
/// Shape 1 x n_entries, or batch x n_entries with input-conditioned gating.
template <typename T>
NodeId gate_weights(Tape<T>& tape, NodeId x, const GateNet<T>& gate, const std::string& domain_input) {
  if (gate.clamp == GateClamp::kOneHotDomain) {
    const std::size_t nd = gate.n_domains(), ne = gate.n_entries();
    if (ne != nd * gate.experts_per_domain)
      throw ConfigError("one-hot gate clamp requires the residual (backbone outside softmax) form");
    Tensor<T> table(Shape{nd, ne}, T{0});
    for (std::size_t d = 0; d < nd; ++d) table.at(d, d * gate.experts_per_domain) = T{1};
    return tape.gather(tape.constant(std::move(table)), domain_input);
  }
  NodeId logits = tape.gather(tape.param(*gate.logits), domain_input);
  if (gate.projection) logits = tape.add(tape.matmul_nt(x, tape.param(*gate.projection)), logits);
  return tape.softmax(logits);
}

/// activation(W.x + b + sum_e g_e . delta_e) over every domain's experts, or with
/// gate_includes_backbone, activation(g_0 . (W.x + b) + sum_e g_e . delta_e).
template <typename T>
NodeId moe_forward(Tape<T>& tape, NodeId x, const MoELayer<T>& layer, const std::string& domain_input) {
  if (layer.experts.empty()) throw ConfigError("MoE layer without experts");
  const std::size_t offset = layer.gate_includes_backbone ? 1 : 0;
  if (layer.gate.n_entries() != layer.experts.size() + offset)
    throw ShapeError("gate has " + std::to_string(layer.gate.n_entries()) + " entries for " +
                     std::to_string(layer.experts.size()) + " experts");
  const NodeId w = gate_weights(tape, x, layer.gate, domain_input);
  NodeId mix = 0;
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    const NodeId c = tape.mul(lora_delta(tape, x, layer.experts[e]), tape.slice_cols(w, e + offset, 1));
    mix = e == 0 ? c : tape.add(mix, c);
  }
  NodeId base = dense_preactivation(tape, x, layer.base);
  if (layer.gate_includes_backbone) base = tape.mul(base, tape.slice_cols(w, 0, 1));
  return apply_activation(tape, tape.add(base, mix), layer.base.activation);
}

}  // namespace mlora
