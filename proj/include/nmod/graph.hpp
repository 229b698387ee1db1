#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/module.hpp"
#include "nmod/typesys.hpp"

namespace nmod {

/// "instance.port"
struct PortRef {
  std::string instance;
  std::string port;

  std::string str() const { return instance + "." + port; }

  static PortRef parse(std::string_view text) {
    auto dot = text.find('.');
    if (dot == std::string_view::npos || dot == 0 || dot + 1 == text.size() ||
        text.find('.', dot + 1) != std::string_view::npos) {
      fail(Errc::SchemaError, "port reference '" + std::string(text) + "' must look like instance.port");
    }
    return {std::string(text.substr(0, dot)), std::string(text.substr(dot + 1))};
  }

  auto operator<=>(const PortRef&) const = default;
};

struct TensorHandle {
  PortRef producer;
  NeuralType type;
};

struct Binding {
  TensorHandle from;
  PortRef to;
  Comparison comparison = Comparison::Same;
};

/// Raised by connect when the comparison rejects the connection.
class TypeMismatch : public Error {
 public:
  TypeMismatch(Comparison result, PortRef from, PortRef to, std::string producer_type, std::string consumer_type)
      : Error(Errc::TypeError, std::string(comparison_name(result)) + " at " + from.str() + " -> " + to.str() + ": " +
                                   producer_type + " vs " + consumer_type),
        result_(result),
        from_(std::move(from)),
        to_(std::move(to)),
        producer_type_(std::move(producer_type)),
        consumer_type_(std::move(consumer_type)) {}

  Comparison result() const noexcept { return result_; }
  const PortRef& from() const noexcept { return from_; }
  const PortRef& to() const noexcept { return to_; }
  const std::string& producer_type() const noexcept { return producer_type_; }
  const std::string& consumer_type() const noexcept { return consumer_type_; }

 private:
  Comparison result_;
  PortRef from_, to_;
  std::string producer_type_, consumer_type_;
};

struct ValidationReport {
  std::vector<PortRef> unbound_inputs;
  std::vector<std::vector<std::string>> cycles;  // strongly connected instance sets, sorted
  std::vector<PortRef> unreachable_sinks;

  bool empty() const noexcept { return unbound_inputs.empty() && cycles.empty() && unreachable_sinks.empty(); }
  std::size_t size() const noexcept { return unbound_inputs.size() + cycles.size() + unreachable_sinks.size(); }
};

/// The activation-flow DAG. Every connection is type-checked when it is
/// made; whole-graph properties are checked by validate().
class Graph {
 public:
  Graph(std::shared_ptr<const Registry> registry, std::int64_t seed) : registry_(std::move(registry)), seed_(seed) {
    if (!registry_) fail(Errc::UnknownDescriptor, "a graph needs a registry");
  }

  const Registry& registry() const noexcept { return *registry_; }
  std::shared_ptr<const Registry> registry_ptr() const noexcept { return registry_; }
  std::int64_t seed() const noexcept { return seed_; }
  bool validated() const noexcept { return validated_; }

  ModuleInstance& add(const std::string& id, std::string_view cls, const ParamMap& params = {}) {
    if (!is_tag_identifier(id)) fail(Errc::SchemaError, "invalid instance id '" + id + "'");
    if (instances_.count(id)) fail(Errc::DuplicateInstance, "instance '" + id + "' already exists");
    auto inst = instantiate(*registry_, cls, params, id, static_cast<std::uint64_t>(seed_));
    validated_ = false;
    return instances_.emplace(id, std::move(inst)).first->second;
  }

  bool contains(std::string_view id) const { return instances_.find(std::string(id)) != instances_.end(); }

  const ModuleInstance& instance(std::string_view id) const {
    auto it = instances_.find(std::string(id));
    if (it == instances_.end()) fail(Errc::UnknownInstance, "no instance '" + std::string(id) + "'");
    return it->second;
  }
  ModuleInstance& instance(std::string_view id) {
    return const_cast<ModuleInstance&>(std::as_const(*this).instance(id));
  }

  const std::map<std::string, ModuleInstance>& instances() const noexcept { return instances_; }
  std::map<std::string, ModuleInstance>& instances() noexcept { return instances_; }
  const std::vector<Binding>& bindings() const noexcept { return bindings_; }
  const std::vector<PortRef>& sinks() const noexcept { return sinks_; }
  std::size_t cast_count() const noexcept { return casts_; }

  TensorHandle output(const PortRef& ref) const {
    return {ref, instance(ref.instance).output_type(ref.port)};
  }
  TensorHandle output(std::string_view ref) const { return output(PortRef::parse(ref)); }

  const Binding* binding_to(const PortRef& to) const {
    for (const auto& b : bindings_)
      if (b.to == to) return &b;
    return nullptr;
  }

  /// Type-checks and records a connection. With `auto_cast`, a
  /// TRANSPOSE_SAME mismatch is repaired by inserting a Transpose instance.
  Binding connect(const TensorHandle& from, const std::string& to_instance, const std::string& to_port,
                  bool auto_cast = false) {
    PortRef to{to_instance, to_port};
    const auto& producer = instance(from.producer.instance);
    const auto& ptype = producer.output_type(from.producer.port);
    const auto& ctype = instance(to_instance).input_type(to_port);
    if (binding_to(to)) fail(Errc::PortAlreadyBound, to.str() + " is already bound");

    auto cmp = compare_types(registry_->tags(), ptype, ctype);
    if (accepts(cmp)) {
      bindings_.push_back({{from.producer, ptype}, to, cmp});
      validated_ = false;
      return bindings_.back();
    }
    if (cmp == Comparison::TransposeSame && auto_cast) {
      auto perm = *find_transpose(ptype, ctype);
      std::string id = "cast_" + to_instance + "_" + to_port;
      for (int k = 2; contains(id); ++k) id = "cast_" + to_instance + "_" + to_port + "_" + std::to_string(k);
      add(id, "Transpose", {{"input_type", render_type(ptype)}, {"perm", perm}});
      ++casts_;
      connect(from, id, "x", false);
      return connect(output(PortRef{id, "y"}), to_instance, to_port, false);
    }
    throw TypeMismatch(cmp, from.producer, to, render_type(ptype), render_type(ctype));
  }

  Binding connect(std::string_view from, std::string_view to, bool auto_cast = false) {
    auto t = PortRef::parse(to);
    return connect(output(from), t.instance, t.port, auto_cast);
  }

  void add_sink(const PortRef& ref) {
    instance(ref.instance).output_type(ref.port);
    if (std::find(sinks_.begin(), sinks_.end(), ref) == sinks_.end()) sinks_.push_back(ref);
    validated_ = false;
  }
  void add_sink(std::string_view ref) { add_sink(PortRef::parse(ref)); }

  /// Collects every finding; marks the graph validated iff there are none.
  ValidationReport validate() {
    ValidationReport report;
    for (const auto& [id, inst] : instances_) {
      for (const auto& p : inst.inputs) {
        PortRef ref{id, p.name};
        if (!binding_to(ref)) report.unbound_inputs.push_back(ref);
      }
    }
    report.cycles = cycles();
    auto reach = reachable_from_data();
    for (const auto& s : sinks_)
      if (!reach.count(s.instance)) report.unreachable_sinks.push_back(s);
    validated_ = report.empty();
    return report;
  }

  /// Instance ids with every producer before its consumers; ties broken by
  /// lexicographic id.
  std::vector<std::string> topo_order() const {
    if (!validated_) fail(Errc::NotValidated, "topo_order needs a validated graph");
    std::map<std::string, std::set<std::string>> succ;
    std::map<std::string, std::size_t> indeg;
    for (const auto& [id, _] : instances_) indeg[id] = 0;
    for (const auto& b : bindings_) {
      if (succ[b.from.producer.instance].insert(b.to.instance).second) ++indeg[b.to.instance];
    }
    std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
    for (const auto& [id, d] : indeg)
      if (d == 0) ready.push(id);
    std::vector<std::string> order;
    while (!ready.empty()) {
      auto id = ready.top();
      ready.pop();
      order.push_back(id);
      for (const auto& n : succ[id])
        if (--indeg[n] == 0) ready.push(n);
    }
    return order;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, inst] : instances_) n += inst.parameter_count();
    return n;
  }

 private:
  std::vector<std::vector<std::string>> cycles() const {
    // Tarjan's strongly connected components.
    std::map<std::string, std::set<std::string>> succ;
    for (const auto& b : bindings_) succ[b.from.producer.instance].insert(b.to.instance);
    std::map<std::string, int> index, low;
    std::set<std::string> on_stack;
    std::vector<std::string> stack;
    std::vector<std::vector<std::string>> out;
    int counter = 0;
    std::function<void(const std::string&)> visit = [&](const std::string& v) {
      index[v] = low[v] = counter++;
      stack.push_back(v);
      on_stack.insert(v);
      for (const auto& w : succ[v]) {
        if (!index.count(w)) {
          visit(w);
          low[v] = std::min(low[v], low[w]);
        } else if (on_stack.count(w)) {
          low[v] = std::min(low[v], index[w]);
        }
      }
      if (low[v] == index[v]) {
        std::vector<std::string> comp;
        std::string w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack.erase(w);
          comp.push_back(w);
        } while (w != v);
        if (comp.size() > 1 || succ[v].count(v)) {
          std::sort(comp.begin(), comp.end());
          out.push_back(std::move(comp));
        }
      }
    };
    for (const auto& [id, _] : instances_)
      if (!index.count(id)) visit(id);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::set<std::string> reachable_from_data() const {
    std::map<std::string, std::set<std::string>> succ;
    for (const auto& b : bindings_) succ[b.from.producer.instance].insert(b.to.instance);
    std::set<std::string> seen;
    std::vector<std::string> todo;
    for (const auto& [id, inst] : instances_) {
      if (inst.descriptor->is_data_layer()) {
        seen.insert(id);
        todo.push_back(id);
      }
    }
    while (!todo.empty()) {
      auto v = todo.back();
      todo.pop_back();
      for (const auto& w : succ[v])
        if (seen.insert(w).second) todo.push_back(w);
    }
    return seen;
  }

  std::shared_ptr<const Registry> registry_;
  std::int64_t seed_;
  std::map<std::string, ModuleInstance> instances_;
  std::vector<Binding> bindings_;
  std::vector<PortRef> sinks_;
  std::size_t casts_ = 0;
  bool validated_ = false;
};

}  // namespace nmod
