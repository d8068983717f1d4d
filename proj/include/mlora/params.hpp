// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter groups. Every parameter carries exactly one tag: the shared
// backbone, one expert (domain, replica, layer), or the gate of one layer. The
// training phases freeze and unfreeze parameters by tag.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mlora/autodiff.hpp"
#include "mlora/error.hpp"

namespace mlora {

enum class GroupKind { kBackbone, kExpert, kGate };

struct GroupTag {
  GroupKind kind = GroupKind::kBackbone;
  int domain = -1;
  int replica = -1;
  int layer = -1;

  static GroupTag backbone() { return {}; }
  static GroupTag expert(int domain, int replica, int layer) { return {GroupKind::kExpert, domain, replica, layer}; }
  static GroupTag gate(int layer) { return {GroupKind::kGate, -1, -1, layer}; }

  bool is_backbone() const { return kind == GroupKind::kBackbone; }
  bool is_expert() const { return kind == GroupKind::kExpert; }
  bool is_gate() const { return kind == GroupKind::kGate; }

  bool valid() const {
    switch (kind) {
      case GroupKind::kBackbone: return domain < 0 && replica < 0 && layer < 0;
      case GroupKind::kExpert: return domain >= 0 && replica >= 0 && layer >= 0;
      case GroupKind::kGate: return layer >= 0 && domain < 0 && replica < 0;
    }
    return false;
  }

  std::string str() const {
    switch (kind) {
      case GroupKind::kBackbone: return "backbone";
      case GroupKind::kExpert:
        return "expert(" + std::to_string(domain) + "," + std::to_string(replica) + "," + std::to_string(layer) + ")";
      case GroupKind::kGate: return "gate(" + std::to_string(layer) + ")";
    }
    return "?";
  }

  static GroupTag parse(const std::string& s) {
    if (s == "backbone") return backbone();
    int a = 0, b = 0, c = 0;
    if (std::sscanf(s.c_str(), "expert(%d,%d,%d)", &a, &b, &c) == 3) return expert(a, b, c);
    if (std::sscanf(s.c_str(), "gate(%d)", &a) == 1) return gate(a);
    throw DataError("unknown parameter group tag '" + s + "'");
  }

  friend bool operator==(const GroupTag&, const GroupTag&) = default;
};

using TagPredicate = std::function<bool(const GroupTag&)>;

struct ParamListing {
  std::string name;
  GroupTag tag;
  bool trainable;
};

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

class ParamStore {
 public:
  struct Entry {
    Parameter<double> param;
    GroupTag tag;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<double>& add(std::string name, GroupTag tag, Tensor<double> value) {
    if (!tag.valid()) throw ConfigError("parameter '" + name + "' has an invalid group tag");
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    auto e = std::make_unique<Entry>();
    e->param.name = name;
    e->param.value = std::move(value);
    e->tag = tag;
    index_.emplace(std::move(name), entries_.size());
    entries_.push_back(std::move(e));
    return entries_.back()->param;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::unique_ptr<Entry>>& entries() const { return entries_; }

  Parameter<double>& at(const std::string& name) { return entries_.at(lookup(name))->param; }
  const Parameter<double>& at(const std::string& name) const { return entries_.at(lookup(name))->param; }
  const GroupTag& tag_of(const std::string& name) const { return entries_.at(lookup(name))->tag; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<ParamListing> listing() const {
    std::vector<ParamListing> out;
    for (const auto& e : entries_) out.push_back({e->param.name, e->tag, e->param.trainable});
    return out;
  }

  /// Distinct group tags in first-appearance order.
  std::vector<GroupTag> groups() const {
    std::vector<GroupTag> out;
    for (const auto& e : entries_)
      if (std::find(out.begin(), out.end(), e->tag) == out.end()) out.push_back(e->tag);
    return out;
  }

  void set_trainable(const TagPredicate& pred) {
    for (auto& e : entries_) e->param.trainable = pred(e->tag);
  }

  std::vector<Parameter<double>*> select(const TagPredicate& pred) {
    std::vector<Parameter<double>*> out;
    for (auto& e : entries_)
      if (pred(e->tag)) out.push_back(&e->param);
    return out;
  }

  std::size_t scalar_count(const TagPredicate& pred = [](const GroupTag&) { return true; }) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (pred(e->tag)) n += e->param.value.size();
    return n;
  }

  /// Raw bytes of every parameter matching `pred`, in store order.
  std::vector<unsigned char> serialize(const TagPredicate& pred) const {
    std::vector<unsigned char> out;
    for (const auto& e : entries_) {
      if (!pred(e->tag)) continue;
      const auto* p = reinterpret_cast<const unsigned char*>(e->param.value.data());
      out.insert(out.end(), p, p + e->param.value.size() * sizeof(double));
    }
    return out;
  }

  /// FNV-1a checksum of each group's serialized bytes, keyed by tag string.
  std::map<std::string, std::string> group_checksums() const {
    std::map<std::string, std::uint64_t> acc;
    for (const auto& e : entries_) {
      auto [it, fresh] = acc.try_emplace(e->tag.str(), 0xcbf29ce484222325ULL);
      it->second = fnv1a(e->param.value.data(), e->param.value.size() * sizeof(double), it->second);
    }
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : acc) out.emplace(k, hex64(v));
    return out;
  }

  std::vector<Tensor<double>> snapshot(const TagPredicate& pred) const {
    std::vector<Tensor<double>> out;
    for (const auto& e : entries_)
      if (pred(e->tag)) out.push_back(e->param.value);
    return out;
  }

  void restore(const TagPredicate& pred, const std::vector<Tensor<double>>& values) {
    std::size_t i = 0;
    for (auto& e : entries_)
      if (pred(e->tag)) e->param.value = values.at(i++);
    if (i != values.size()) throw ConfigError("restore: snapshot does not match parameter selection");
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::unique_ptr<Entry>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace tags {
inline TagPredicate all() {
  return [](const GroupTag&) { return true; };
}
inline TagPredicate none() {
  return [](const GroupTag&) { return false; };
}
inline TagPredicate backbone() {
  return [](const GroupTag& t) { return t.is_backbone(); };
}
inline TagPredicate experts() {
  return [](const GroupTag& t) { return t.is_expert(); };
}
inline TagPredicate gates() {
  return [](const GroupTag& t) { return t.is_gate(); };
}
/// expert(domain, replica, *); replica < 0 matches every replica of the domain.
inline TagPredicate expert(int domain, int replica = -1) {
  return [=](const GroupTag& t) {
    return t.is_expert() && t.domain == domain && (replica < 0 || t.replica == replica);
  };
}
inline TagPredicate negate(TagPredicate p) {
  return [p = std::move(p)](const GroupTag& t) { return !p(t); };
}
}  // namespace tags

}  // namespace mlora
