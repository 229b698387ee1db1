#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmod/error.hpp"
#include "nmod/kernels.hpp"
#include "nmod/params.hpp"
#include "nmod/rng.hpp"
#include "nmod/tensor.hpp"
#include "nmod/typesys.hpp"

namespace nmod {

/// A port declaration. `type` is a port template (see evaluate_type_template)
/// and `when` an optional guard such as "label!=" or "time_major=true".
struct PortSpec {
  std::string name;
  std::string type;
  std::string when;
};

struct NodeSpec {
  std::string id;
  std::string cls;
  nlohmann::json params = nlohmann::json::object();
  std::string when;
};

/// Endpoints are "node.port", "$in.port", "$out.port", "$repeat.in" or
/// "$repeat.out".
struct EdgeSpec {
  std::string from;
  std::string to;
  std::string when;
};

/// A chain of `count` copies of a small block. Copy k names its nodes
/// "<id>_<k>"; copy k's entry port is fed by copy k-1's exit port.
struct RepeatSpec {
  std::string count;
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> edges;
  std::string entry;
  std::string exit;
};

struct PrimitiveImpl {
  std::string kernel;
};
struct DataLayerImpl {
  std::string source;  // "csv" or "sequence"
};
struct CompositeImpl {
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> edges;
  std::optional<RepeatSpec> repeat;
};

using ModuleImpl = std::variant<PrimitiveImpl, CompositeImpl, DataLayerImpl>;

struct ModuleDescriptor {
  std::string name;
  ParamSchema params;
  std::vector<PortSpec> inputs;
  std::vector<PortSpec> outputs;
  ModuleImpl impl;
  std::string doc;

  bool is_primitive() const noexcept { return std::holds_alternative<PrimitiveImpl>(impl); }
  bool is_composite() const noexcept { return std::holds_alternative<CompositeImpl>(impl); }
  bool is_data_layer() const noexcept { return std::holds_alternative<DataLayerImpl>(impl); }
};

// ---------------------------------------------------------------------------
// JSON form of descriptors

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) fail(Errc::InvalidDescriptor, where + ": missing '" + key + "'");
  return j.at(key);
}

inline std::string json_string(const nlohmann::json& j, const char* key, const std::string& where,
                               std::string fallback = {}, bool required = false) {
  if (!j.contains(key)) {
    if (required) fail(Errc::InvalidDescriptor, where + ": missing '" + key + "'");
    return fallback;
  }
  if (!j.at(key).is_string()) fail(Errc::InvalidDescriptor, where + "." + key + " must be a string");
  return j.at(key).get<std::string>();
}

inline void only_keys(const nlohmann::json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) fail(Errc::InvalidDescriptor, where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      fail(Errc::InvalidDescriptor, where + ": unknown key '" + k + "'");
    }
  }
}

inline std::vector<PortSpec> ports_from_json(const nlohmann::json& j, const std::string& where) {
  std::vector<PortSpec> out;
  if (!j.is_array()) fail(Errc::InvalidDescriptor, where + " must be an array");
  for (std::size_t i = 0; i < j.size(); ++i) {
    auto w = where + "[" + std::to_string(i) + "]";
    only_keys(j[i], {"name", "type", "when"}, w);
    out.push_back({json_string(j[i], "name", w, {}, true), json_string(j[i], "type", w, {}, true),
                   json_string(j[i], "when", w)});
  }
  return out;
}

inline std::vector<NodeSpec> nodes_from_json(const nlohmann::json& j, const std::string& where) {
  std::vector<NodeSpec> out;
  if (!j.is_array()) fail(Errc::InvalidDescriptor, where + " must be an array");
  for (std::size_t i = 0; i < j.size(); ++i) {
    auto w = where + "[" + std::to_string(i) + "]";
    only_keys(j[i], {"id", "class", "params", "when"}, w);
    NodeSpec n{json_string(j[i], "id", w, {}, true), json_string(j[i], "class", w, {}, true),
               j[i].value("params", nlohmann::json::object()), json_string(j[i], "when", w)};
    if (!n.params.is_object()) fail(Errc::InvalidDescriptor, w + ".params must be an object");
    out.push_back(std::move(n));
  }
  return out;
}

inline std::vector<EdgeSpec> edges_from_json(const nlohmann::json& j, const std::string& where) {
  std::vector<EdgeSpec> out;
  if (!j.is_array()) fail(Errc::InvalidDescriptor, where + " must be an array");
  for (std::size_t i = 0; i < j.size(); ++i) {
    auto w = where + "[" + std::to_string(i) + "]";
    only_keys(j[i], {"from", "to", "when"}, w);
    out.push_back({json_string(j[i], "from", w, {}, true), json_string(j[i], "to", w, {}, true),
                   json_string(j[i], "when", w)});
  }
  return out;
}

inline nlohmann::json ports_to_json(const std::vector<PortSpec>& ports) {
  auto out = nlohmann::json::array();
  for (const auto& p : ports) {
    nlohmann::json e{{"name", p.name}, {"type", p.type}};
    if (!p.when.empty()) e["when"] = p.when;
    out.push_back(std::move(e));
  }
  return out;
}

inline nlohmann::json nodes_to_json(const std::vector<NodeSpec>& nodes) {
  auto out = nlohmann::json::array();
  for (const auto& n : nodes) {
    nlohmann::json e{{"id", n.id}, {"class", n.cls}, {"params", n.params}};
    if (!n.when.empty()) e["when"] = n.when;
    out.push_back(std::move(e));
  }
  return out;
}

inline nlohmann::json edges_to_json(const std::vector<EdgeSpec>& edges) {
  auto out = nlohmann::json::array();
  for (const auto& e : edges) {
    nlohmann::json x{{"from", e.from}, {"to", e.to}};
    if (!e.when.empty()) x["when"] = e.when;
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace detail

inline ParamSchema param_schema_from_json(const nlohmann::json& j, const std::string& where) {
  ParamSchema schema;
  if (!j.is_array()) fail(Errc::InvalidDescriptor, where + " must be an array");
  for (std::size_t i = 0; i < j.size(); ++i) {
    auto w = where + "[" + std::to_string(i) + "]";
    const auto& e = j[i];
    detail::only_keys(e, {"name", "kind", "default", "min", "max", "choices"}, w);
    ParamEntry entry;
    entry.name = detail::json_string(e, "name", w, {}, true);
    auto kind = parse_param_kind(detail::json_string(e, "kind", w, {}, true));
    if (!kind) fail(Errc::InvalidDescriptor, w + ": unknown kind '" + e["kind"].get<std::string>() + "'");
    entry.kind = *kind;
    if (e.contains("default")) {
      entry.required = false;
      entry.default_value = param_from_json(entry.kind, e["default"]);
      if (!entry.default_value) fail(Errc::InvalidDescriptor, w + ": default does not match kind");
    }
    if (e.contains("min")) entry.min = e["min"].get<double>();
    if (e.contains("max")) entry.max = e["max"].get<double>();
    if (e.contains("choices")) entry.choices = e["choices"].get<std::vector<std::string>>();
    schema.add(std::move(entry));
  }
  return schema;
}

inline nlohmann::json param_schema_to_json(const ParamSchema& schema) {
  auto out = nlohmann::json::array();
  for (const auto& e : schema.entries()) {
    nlohmann::json x{{"name", e.name}, {"kind", std::string(param_kind_name(e.kind))}};
    if (e.default_value) x["default"] = param_to_json(*e.default_value);
    if (e.min) x["min"] = *e.min;
    if (e.max) x["max"] = *e.max;
    if (!e.choices.empty()) x["choices"] = e.choices;
    out.push_back(std::move(x));
  }
  return out;
}

/// Parses the descriptor file form:
/// `{"name", "doc"?, "params": [...], "inputs": [...], "outputs": [...], "impl": {...}}`.
inline ModuleDescriptor descriptor_from_json(const nlohmann::json& j) {
  std::string where = "descriptor";
  if (j.is_object() && j.contains("name") && j["name"].is_string()) where = j["name"].get<std::string>();
  detail::only_keys(j, {"name", "doc", "params", "inputs", "outputs", "impl"}, where);
  ModuleDescriptor d;
  d.name = detail::json_string(j, "name", where, {}, true);
  d.doc = detail::json_string(j, "doc", where);
  d.params = param_schema_from_json(j.value("params", nlohmann::json::array()), where + ".params");
  d.inputs = detail::ports_from_json(j.value("inputs", nlohmann::json::array()), where + ".inputs");
  d.outputs = detail::ports_from_json(j.value("outputs", nlohmann::json::array()), where + ".outputs");
  const auto& impl = detail::require_key(j, "impl", where);
  detail::only_keys(impl, {"primitive", "data_layer", "composite"}, where + ".impl");
  if (impl.size() != 1) fail(Errc::InvalidDescriptor, where + ".impl must have exactly one kind");
  if (impl.contains("primitive")) {
    d.impl = PrimitiveImpl{detail::json_string(impl, "primitive", where + ".impl")};
  } else if (impl.contains("data_layer")) {
    d.impl = DataLayerImpl{detail::json_string(impl, "data_layer", where + ".impl")};
  } else {
    const auto& c = impl["composite"];
    auto w = where + ".impl.composite";
    detail::only_keys(c, {"nodes", "edges", "repeat"}, w);
    CompositeImpl comp;
    comp.nodes = detail::nodes_from_json(c.value("nodes", nlohmann::json::array()), w + ".nodes");
    comp.edges = detail::edges_from_json(c.value("edges", nlohmann::json::array()), w + ".edges");
    if (c.contains("repeat")) {
      const auto& r = c["repeat"];
      auto rw = w + ".repeat";
      detail::only_keys(r, {"count", "nodes", "edges", "entry", "exit"}, rw);
      RepeatSpec rep;
      rep.count = detail::json_string(r, "count", rw, {}, true);
      rep.nodes = detail::nodes_from_json(r.value("nodes", nlohmann::json::array()), rw + ".nodes");
      rep.edges = detail::edges_from_json(r.value("edges", nlohmann::json::array()), rw + ".edges");
      rep.entry = detail::json_string(r, "entry", rw, {}, true);
      rep.exit = detail::json_string(r, "exit", rw, {}, true);
      comp.repeat = std::move(rep);
    }
    d.impl = std::move(comp);
  }
  return d;
}

inline nlohmann::json descriptor_to_json(const ModuleDescriptor& d) {
  nlohmann::json j{{"name", d.name},
                   {"params", param_schema_to_json(d.params)},
                   {"inputs", detail::ports_to_json(d.inputs)},
                   {"outputs", detail::ports_to_json(d.outputs)}};
  if (!d.doc.empty()) j["doc"] = d.doc;
  if (const auto* p = std::get_if<PrimitiveImpl>(&d.impl)) {
    j["impl"] = {{"primitive", p->kernel}};
  } else if (const auto* s = std::get_if<DataLayerImpl>(&d.impl)) {
    j["impl"] = {{"data_layer", s->source}};
  } else {
    const auto& c = std::get<CompositeImpl>(d.impl);
    nlohmann::json comp{{"nodes", detail::nodes_to_json(c.nodes)}, {"edges", detail::edges_to_json(c.edges)}};
    if (c.repeat) {
      comp["repeat"] = {{"count", c.repeat->count},
                        {"nodes", detail::nodes_to_json(c.repeat->nodes)},
                        {"edges", detail::edges_to_json(c.repeat->edges)},
                        {"entry", c.repeat->entry},
                        {"exit", c.repeat->exit}};
    }
    j["impl"] = {{"composite", std::move(comp)}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Parameter substitution

/// `$name` lookups over validated parameter values.
class ParamSubstitutions final : public TypeSubstitutions {
 public:
  explicit ParamSubstitutions(const ParamMap& params) : params_(params) {}

  std::string tag(std::string_view p) const override { return get<std::string>(p); }
  std::vector<std::string> tag_list(std::string_view p) const override { return get<std::vector<std::string>>(p); }
  std::int64_t integer(std::string_view p) const override { return get<std::int64_t>(p); }
  std::int64_t list_length(std::string_view p) const override {
    const auto& v = value(p);
    if (const auto* s = std::get_if<std::vector<std::string>>(&v)) return static_cast<std::int64_t>(s->size());
    if (const auto* i = std::get_if<std::vector<std::int64_t>>(&v)) return static_cast<std::int64_t>(i->size());
    fail(Errc::InvalidDescriptor, "'#$" + std::string(p) + "' needs a list parameter");
  }
  std::vector<std::int64_t> int_list(std::string_view p) const override { return get<std::vector<std::int64_t>>(p); }
  std::string type_text(std::string_view p) const override { return get<std::string>(p); }

 private:
  const ParamValue& value(std::string_view p) const {
    auto it = params_.find(p);
    if (it == params_.end()) fail(Errc::InvalidDescriptor, "template refers to unknown parameter '" + std::string(p) + "'");
    return it->second;
  }
  template <class T>
  const T& get(std::string_view p) const {
    const auto* v = std::get_if<T>(&value(p));
    if (!v) fail(Errc::InvalidDescriptor, "parameter '" + std::string(p) + "' has the wrong kind for this template");
    return *v;
  }

  const ParamMap& params_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Evaluates a guard: clauses "p=v" or "p!=v" joined by "&&". Values are
/// compared against render_param text. An empty guard always holds.
inline bool guard_holds(std::string_view when, const ParamMap& params) {
  std::size_t pos = 0;
  while (pos <= when.size()) {
    auto end = when.find("&&", pos);
    auto clause = detail::trim(when.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    if (!clause.empty()) {
      bool negate = false;
      auto op = clause.find("!=");
      std::size_t rhs_at;
      if (op != std::string::npos) {
        negate = true;
        rhs_at = op + 2;
      } else {
        op = clause.find('=');
        if (op == std::string::npos) fail(Errc::InvalidDescriptor, "malformed guard '" + std::string(when) + "'");
        rhs_at = op + 1;
      }
      auto name = detail::trim(std::string_view(clause).substr(0, op));
      auto rhs = detail::trim(std::string_view(clause).substr(rhs_at));
      auto it = params.find(name);
      if (it == params.end()) fail(Errc::InvalidDescriptor, "guard refers to unknown parameter '" + name + "'");
      if ((render_param(it->second) == rhs) == negate) return false;
    }
    if (end == std::string_view::npos) break;
    pos = end + 2;
  }
  return true;
}

/// Integer expression `term (("+"|"-") term)*` with terms Integer, `$p`
/// or `#$p`.
inline std::int64_t evaluate_int_expr(std::string_view text, const ParamMap& params) {
  ParamSubstitutions subs(params);
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < text.size() && text[pos] == ' ') ++pos;
  };
  auto ident = [&] {
    std::size_t start = pos;
    while (pos < text.size() && (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_')) ++pos;
    if (start == pos) fail(Errc::InvalidDescriptor, "malformed expression '" + std::string(text) + "'");
    return text.substr(start, pos - start);
  };
  auto term = [&]() -> std::int64_t {
    skip();
    if (pos < text.size() && text[pos] == '#') {
      ++pos;
      if (pos >= text.size() || text[pos] != '$') fail(Errc::InvalidDescriptor, "malformed expression '" + std::string(text) + "'");
      ++pos;
      return subs.list_length(ident());
    }
    if (pos < text.size() && text[pos] == '$') {
      ++pos;
      return subs.integer(ident());
    }
    std::size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (start == pos) fail(Errc::InvalidDescriptor, "malformed expression '" + std::string(text) + "'");
    return std::stoll(std::string(text.substr(start, pos - start)));
  };
  std::int64_t v = term();
  while (true) {
    skip();
    if (pos >= text.size()) return v;
    char op = text[pos++];
    if (op == '+') v += term();
    else if (op == '-') v -= term();
    else fail(Errc::InvalidDescriptor, "malformed expression '" + std::string(text) + "'");
  }
}

/// Resolves one node parameter value against the enclosing module's params:
/// "$p" copies p whole, "${p}" interpolates its text, "$a-1" style strings are
/// integer expressions; arrays and objects resolve element-wise.
inline nlohmann::json resolve_node_param(const nlohmann::json& v, const ParamMap& params) {
  if (v.is_array()) {
    auto out = nlohmann::json::array();
    for (const auto& x : v) out.push_back(resolve_node_param(x, params));
    return out;
  }
  if (!v.is_string()) return v;
  const auto s = v.get<std::string>();
  if (s.size() > 1 && s[0] == '$' && s[1] != '{' && is_tag_identifier(std::string_view(s).substr(1))) {
    auto it = params.find(std::string_view(s).substr(1));
    if (it == params.end()) fail(Errc::InvalidDescriptor, "node parameter refers to unknown '" + s + "'");
    return param_to_json(it->second);
  }
  if (!s.empty() && (s[0] == '$' || s[0] == '#') && s.find("${") == std::string::npos) {
    return evaluate_int_expr(s, params);
  }
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '$' && i + 1 < s.size() && s[i + 1] == '{') {
      auto close = s.find('}', i);
      if (close == std::string::npos) fail(Errc::InvalidDescriptor, "unterminated '${' in '" + s + "'");
      auto name = s.substr(i + 2, close - i - 2);
      auto it = params.find(name);
      if (it == params.end()) fail(Errc::InvalidDescriptor, "node parameter refers to unknown '" + name + "'");
      out += render_param(it->second);
      i = close;
    } else {
      out += s[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Registry

class Registry;

struct ResolvedPort {
  std::string name;
  NeuralType type;
};

/// A composite-internal edge after guards and repeat expansion. `from_node`
/// is "$in" for composite inputs; `to_node` is "$out" for composite outputs.
struct InternalEdge {
  std::string from_node, from_port, to_node, to_port;
};

/// A configured module: validated params, concrete port types, and for
/// composites the expanded children. Trainable tensors of the whole
/// sub-tree live in the top-level instance's `state`, keyed by
/// "child/.../weight".
struct ModuleInstance {
  std::string id;
  std::shared_ptr<const ModuleDescriptor> descriptor;
  ParamMap params;
  std::vector<ResolvedPort> inputs;
  std::vector<ResolvedPort> outputs;
  std::vector<ModuleInstance> children;
  std::vector<InternalEdge> edges;
  std::map<std::string, Tensor> state;
  std::uint64_t seed = 0;

  const std::string& class_name() const { return descriptor->name; }

  const ResolvedPort* find_input(std::string_view port) const {
    for (const auto& p : inputs)
      if (p.name == port) return &p;
    return nullptr;
  }
  const ResolvedPort* find_output(std::string_view port) const {
    for (const auto& p : outputs)
      if (p.name == port) return &p;
    return nullptr;
  }
  const NeuralType& input_type(std::string_view port) const {
    const auto* p = find_input(port);
    if (!p) fail(Errc::UnknownPort, id + " has no input port '" + std::string(port) + "'");
    return p->type;
  }
  const NeuralType& output_type(std::string_view port) const {
    const auto* p = find_output(port);
    if (!p) fail(Errc::UnknownPort, id + " has no output port '" + std::string(port) + "'");
    return p->type;
  }

  bool trainable() const noexcept { return !state.empty(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : state) n += t.numel();
    return n;
  }
};

class Registry {
 public:
  /// Tags must be frozen: port templates are evaluated against them.
  explicit Registry(std::shared_ptr<const TagHierarchy> tags) : tags_(std::move(tags)) {
    if (!tags_ || !tags_->frozen()) fail(Errc::HierarchyNotFrozen, "a registry needs a frozen tag hierarchy");
  }

  const TagHierarchy& tags() const noexcept { return *tags_; }
  std::shared_ptr<const TagHierarchy> tags_ptr() const noexcept { return tags_; }

  void register_descriptor(ModuleDescriptor d);
  void register_json(const nlohmann::json& j) { register_descriptor(descriptor_from_json(j)); }

  bool contains(std::string_view name) const { return descriptors_.find(name) != descriptors_.end(); }

  const ModuleDescriptor& lookup(std::string_view name) const { return *lookup_ptr(name); }

  std::shared_ptr<const ModuleDescriptor> lookup_ptr(std::string_view name) const {
    auto it = descriptors_.find(name);
    if (it == descriptors_.end()) fail(Errc::UnknownDescriptor, "no module class named '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : descriptors_) out.push_back(k);
    return out;
  }

 private:
  void check_structure(const ModuleDescriptor& d) const;

  std::shared_ptr<const TagHierarchy> tags_;
  std::map<std::string, std::shared_ptr<const ModuleDescriptor>, std::less<>> descriptors_;
};

/// Checks `values` against the descriptor's schema and fills defaults.
inline ParamMap validate_params(const ModuleDescriptor& d, const ParamMap& values) {
  return d.params.validate(values);
}

/// Active ports of `specs` under `params`, with concrete types.
inline std::vector<ResolvedPort> resolve_ports(const TagHierarchy& h, const std::vector<PortSpec>& specs,
                                               const ParamMap& params) {
  std::vector<ResolvedPort> out;
  ParamSubstitutions subs(params);
  for (const auto& spec : specs) {
    if (!guard_holds(spec.when, params)) continue;
    for (const auto& p : out) {
      if (p.name == spec.name) fail(Errc::InvalidDescriptor, "port '" + spec.name + "' is active twice");
    }
    out.push_back({spec.name, evaluate_type_template(h, spec.type, subs)});
  }
  return out;
}

namespace detail {

constexpr int kMaxModuleDepth = 64;

struct Endpoint {
  std::string node;
  std::string port;
};

inline Endpoint split_endpoint(const std::string& text, const std::string& where) {
  auto dot = text.rfind('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == text.size()) {
    fail(Errc::InvalidComposite, where + ": endpoint '" + text + "' must look like node.port");
  }
  return {text.substr(0, dot), text.substr(dot + 1)};
}

struct ExpandedNode {
  std::string id;
  std::string cls;
  nlohmann::json params;
};

struct Expansion {
  std::vector<ExpandedNode> nodes;
  std::vector<InternalEdge> edges;
};

/// Applies guards, resolves node params and unrolls the repeat block.
inline Expansion expand_composite(const ModuleDescriptor& d, const ParamMap& params) {
  const auto& c = std::get<CompositeImpl>(d.impl);
  Expansion ex;
  auto add_node = [&](const NodeSpec& n, const std::string& id) {
    if (!guard_holds(n.when, params)) return;
    nlohmann::json p = nlohmann::json::object();
    for (const auto& [k, v] : n.params.items()) p[k] = resolve_node_param(v, params);
    ex.nodes.push_back({id, n.cls, std::move(p)});
  };
  for (const auto& n : c.nodes) add_node(n, n.id);

  std::int64_t count = 0;
  if (c.repeat) {
    count = evaluate_int_expr(c.repeat->count, params);
    if (count < 0) fail(Errc::InvalidComposite, d.name + ": repeat count " + std::to_string(count) + " is negative");
    for (std::int64_t k = 1; k <= count; ++k) {
      auto suffix = "_" + std::to_string(k);
      for (const auto& n : c.repeat->nodes) add_node(n, n.id + suffix);
      for (const auto& e : c.repeat->edges) {
        if (!guard_holds(e.when, params)) continue;
        auto f = split_endpoint(e.from, d.name);
        auto t = split_endpoint(e.to, d.name);
        ex.edges.push_back({f.node + suffix, f.port, t.node + suffix, t.port});
      }
      if (k > 1) {
        auto f = split_endpoint(c.repeat->exit, d.name);
        auto t = split_endpoint(c.repeat->entry, d.name);
        ex.edges.push_back({f.node + "_" + std::to_string(k - 1), f.port, t.node + suffix, t.port});
      }
    }
  }

  // Edges touching the repeat block are joined through it, or around it
  // when the block is empty.
  std::vector<Endpoint> into_block;
  std::vector<Endpoint> out_of_block;
  for (const auto& e : c.edges) {
    if (!guard_holds(e.when, params)) continue;
    auto f = split_endpoint(e.from, d.name);
    auto t = split_endpoint(e.to, d.name);
    if (t.node == "$repeat") {
      into_block.push_back(f);
      continue;
    }
    if (f.node == "$repeat") {
      out_of_block.push_back(t);
      continue;
    }
    ex.edges.push_back({f.node, f.port, t.node, t.port});
  }
  if (!into_block.empty() || !out_of_block.empty()) {
    if (!c.repeat) fail(Errc::InvalidComposite, d.name + ": edges use $repeat but no repeat block is declared");
    if (into_block.size() != 1) fail(Errc::InvalidComposite, d.name + ": $repeat.in must be fed exactly once");
    const auto& src = into_block.front();
    for (const auto& dst : out_of_block) {
      if (count == 0) {
        ex.edges.push_back({src.node, src.port, dst.node, dst.port});
      } else {
        auto x = split_endpoint(c.repeat->exit, d.name);
        ex.edges.push_back({x.node + "_" + std::to_string(count), x.port, dst.node, dst.port});
      }
    }
    if (count > 0) {
      auto en = split_endpoint(c.repeat->entry, d.name);
      ex.edges.push_back({src.node, src.port, en.node + "_1", en.port});
    }
  }
  return ex;
}

/// Kahn order of children (lexicographic tie-break). Nullopt on a cycle.
inline std::optional<std::vector<std::size_t>> child_order(const std::vector<ModuleInstance>& children,
                                                           const std::vector<InternalEdge>& edges) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < children.size(); ++i) index[children[i].id] = i;
  std::vector<std::set<std::size_t>> succ(children.size());
  std::vector<std::size_t> indeg(children.size(), 0);
  for (const auto& e : edges) {
    auto f = index.find(e.from_node);
    auto t = index.find(e.to_node);
    if (f == index.end() || t == index.end()) continue;
    if (succ[f->second].insert(t->second).second) ++indeg[t->second];
  }
  auto cmp = [&](std::size_t a, std::size_t b) { return children[a].id > children[b].id; };
  std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(cmp)> ready(cmp);
  for (std::size_t i = 0; i < children.size(); ++i)
    if (indeg[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    auto i = ready.top();
    ready.pop();
    order.push_back(i);
    for (auto j : succ[i])
      if (--indeg[j] == 0) ready.push(j);
  }
  if (order.size() != children.size()) return std::nullopt;
  return order;
}

inline std::uint64_t instance_seed(std::uint64_t base, const std::string& id, const ParamMap& params) {
  std::uint64_t s = mix_seed(base, fnv1a(id));
  auto it = params.find("seed");
  if (it != params.end())
    if (const auto* v = std::get_if<std::int64_t>(&it->second)) s = mix_seed(s, static_cast<std::uint64_t>(*v));
  return s;
}

inline void init_weights(const Kernel& kernel, const ParamMap& params, std::uint64_t seed, const std::string& prefix,
                         std::map<std::string, Tensor>& state) {
  for (const auto& w : kernel.weights(params)) {
    Tensor t(w.shape);
    if (w.init == WeightInit::Glorot) {
      Rng rng(mix_seed(seed, fnv1a(w.name)));
      const double a = std::sqrt(6.0 / static_cast<double>(w.fan_in + w.fan_out));
      for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-a, a));
    }
    state.emplace(prefix + w.name, std::move(t));
  }
}

ModuleInstance build_instance(const Registry& reg, std::shared_ptr<const ModuleDescriptor> d, const ParamMap& values,
                              const std::string& id, std::uint64_t seed, const std::string& prefix,
                              std::map<std::string, Tensor>& state, int depth);

inline void check_composite_types(const Registry& reg, ModuleInstance& inst) {
  const auto& h = reg.tags();
  const auto& d = *inst.descriptor;
  std::map<std::string, const ModuleInstance*> by_id;
  for (const auto& c : inst.children) by_id[c.id] = &c;

  auto producer_type = [&](const InternalEdge& e) -> const NeuralType& {
    if (e.from_node == "$in") {
      const auto* p = inst.find_input(e.from_port);
      if (!p) fail(Errc::InvalidComposite, d.name + ": no active input port '" + e.from_port + "'");
      return p->type;
    }
    auto it = by_id.find(e.from_node);
    if (it == by_id.end()) fail(Errc::InvalidComposite, d.name + ": edge from unknown node '" + e.from_node + "'");
    const auto* p = it->second->find_output(e.from_port);
    if (!p) fail(Errc::InvalidComposite, d.name + ": " + e.from_node + " has no output port '" + e.from_port + "'");
    return p->type;
  };
  auto consumer_type = [&](const InternalEdge& e) -> const NeuralType& {
    if (e.to_node == "$out") {
      const auto* p = inst.find_output(e.to_port);
      if (!p) fail(Errc::InvalidComposite, d.name + ": no active output port '" + e.to_port + "'");
      return p->type;
    }
    auto it = by_id.find(e.to_node);
    if (it == by_id.end()) fail(Errc::InvalidComposite, d.name + ": edge to unknown node '" + e.to_node + "'");
    const auto* p = it->second->find_input(e.to_port);
    if (!p) fail(Errc::InvalidComposite, d.name + ": " + e.to_node + " has no input port '" + e.to_port + "'");
    return p->type;
  };

  std::set<std::pair<std::string, std::string>> bound;
  for (const auto& e : inst.edges) {
    if (e.from_node == "$out" || e.to_node == "$in") {
      fail(Errc::InvalidComposite, d.name + ": edges cannot leave through $in or enter through $out");
    }
    const auto& pt = producer_type(e);
    const auto& ct = consumer_type(e);
    auto cmp = compare_types(h, pt, ct);
    if (!accepts(cmp)) {
      fail(Errc::InvalidComposite, d.name + ": internal edge " + e.from_node + "." + e.from_port + " -> " + e.to_node +
                                       "." + e.to_port + " is " + std::string(comparison_name(cmp)) + ": " +
                                       render_type(pt) + " vs " + render_type(ct));
    }
    if (!bound.insert({e.to_node, e.to_port}).second) {
      fail(Errc::InvalidComposite, d.name + ": " + e.to_node + "." + e.to_port + " is bound twice");
    }
  }
  for (const auto& c : inst.children) {
    for (const auto& p : c.inputs) {
      if (!bound.count({c.id, p.name})) {
        fail(Errc::InvalidComposite, d.name + ": input " + c.id + "." + p.name + " is unbound");
      }
    }
  }
  for (const auto& p : inst.outputs) {
    if (!bound.count({"$out", p.name})) fail(Errc::InvalidComposite, d.name + ": output '" + p.name + "' is not produced");
  }
  if (!child_order(inst.children, inst.edges)) fail(Errc::InvalidComposite, d.name + ": internal wiring has a cycle");
}

inline ModuleInstance build_instance(const Registry& reg, std::shared_ptr<const ModuleDescriptor> d,
                                     const ParamMap& values, const std::string& id, std::uint64_t seed,
                                     const std::string& prefix, std::map<std::string, Tensor>& state, int depth) {
  if (depth > kMaxModuleDepth) {
    fail(Errc::RecursionLimit, "module nesting deeper than " + std::to_string(kMaxModuleDepth) + " at '" + id + "'");
  }
  ModuleInstance inst;
  inst.id = id;
  inst.descriptor = d;
  inst.params = validate_params(*d, values);
  inst.seed = seed;
  inst.inputs = resolve_ports(reg.tags(), d->inputs, inst.params);
  inst.outputs = resolve_ports(reg.tags(), d->outputs, inst.params);

  if (const auto* prim = std::get_if<PrimitiveImpl>(&d->impl)) {
    const Kernel* k = find_kernel(prim->kernel);
    if (!k) fail(Errc::InvalidDescriptor, d->name + ": unknown kernel '" + prim->kernel + "'");
    init_weights(*k, inst.params, seed, prefix, state);
    return inst;
  }
  if (d->is_data_layer()) return inst;

  auto ex = expand_composite(*d, inst.params);
  for (const auto& node : ex.nodes) {
    std::shared_ptr<const ModuleDescriptor> cd;
    ParamMap child_values;
    try {
      cd = reg.lookup_ptr(node.cls);
      child_values = cd->params.from_json(node.params);
    } catch (const Error& e) {
      fail(Errc::InvalidComposite, d->name + ": node '" + node.id + "': " + e.what());
    }
    try {
      auto validated = cd->params.validate(child_values);
      inst.children.push_back(build_instance(reg, cd, validated, node.id, instance_seed(seed, node.id, validated),
                                             prefix + node.id + "/", state, depth + 1));
    } catch (const Error& e) {
      if (e.code() == Errc::RecursionLimit || e.code() == Errc::InvalidComposite) throw;
      fail(Errc::InvalidComposite, d->name + ": node '" + node.id + "': " + std::string(e.name()) + ": " + e.what());
    }
  }
  inst.edges = std::move(ex.edges);
  check_composite_types(reg, inst);
  return inst;
}

}  // namespace detail

/// Creates a configured instance. Trainable state is drawn from a generator
/// seeded by mixing `rng_seed` with the FNV-1a hash of `instance_id` (and
/// the module's own `seed` param when it has one).
inline ModuleInstance instantiate(const Registry& reg, std::string_view name, const ParamMap& values,
                                  const std::string& instance_id, std::uint64_t rng_seed) {
  auto d = reg.lookup_ptr(name);
  auto validated = validate_params(*d, values);
  std::map<std::string, Tensor> state;
  auto inst = detail::build_instance(reg, d, validated, instance_id,
                                     detail::instance_seed(rng_seed, instance_id, validated), "", state, 0);
  inst.state = std::move(state);
  return inst;
}

inline void Registry::check_structure(const ModuleDescriptor& d) const {
  auto bad = [&](const std::string& what) { fail(Errc::InvalidDescriptor, d.name + ": " + what); };
  if (!is_tag_identifier(d.name)) bad("descriptor names must be identifiers");
  for (const auto* ports : {&d.inputs, &d.outputs}) {
    for (std::size_t i = 0; i < ports->size(); ++i) {
      const auto& p = (*ports)[i];
      if (!is_tag_identifier(p.name)) bad("invalid port name '" + p.name + "'");
      for (std::size_t j = 0; j < i; ++j) {
        if ((*ports)[j].name == p.name && (p.when.empty() || (*ports)[j].when.empty())) {
          bad("duplicate port '" + p.name + "'");
        }
      }
      if (p.type.find('$') == std::string::npos) {
        try {
          parse_type_expr(*tags_, p.type);
        } catch (const Error& e) {
          bad("port '" + p.name + "': " + e.what());
        }
      }
    }
  }
  if (const auto* prim = std::get_if<PrimitiveImpl>(&d.impl)) {
    if (!find_kernel(prim->kernel)) bad("unknown kernel '" + prim->kernel + "'");
    return;
  }
  if (const auto* src = std::get_if<DataLayerImpl>(&d.impl)) {
    if (!d.inputs.empty()) bad("data layers have no input ports");
    if (src->source != "csv" && src->source != "sequence") bad("unknown data source '" + src->source + "'");
    return;
  }

  const auto& c = std::get<CompositeImpl>(d.impl);
  auto invalid = [&](const std::string& what) { fail(Errc::InvalidComposite, d.name + ": " + what); };
  std::map<std::string, const ModuleDescriptor*> node_class;
  auto check_nodes = [&](const std::vector<NodeSpec>& nodes) {
    for (const auto& n : nodes) {
      if (!is_tag_identifier(n.id)) invalid("invalid node id '" + n.id + "'");
      if (node_class.count(n.id)) invalid("duplicate node id '" + n.id + "'");
      if (n.cls == d.name) invalid("composite refers to itself through node '" + n.id + "'");
      auto it = descriptors_.find(n.cls);
      if (it == descriptors_.end()) invalid("node '" + n.id + "' uses unregistered class '" + n.cls + "'");
      node_class[n.id] = it->second.get();
    }
  };
  check_nodes(c.nodes);
  if (c.repeat) check_nodes(c.repeat->nodes);

  auto has_port = [](const std::vector<PortSpec>& ports, const std::string& name) {
    return std::any_of(ports.begin(), ports.end(), [&](const PortSpec& p) { return p.name == name; });
  };
  auto check_end = [&](const std::string& text, bool is_source) {
    auto e = detail::split_endpoint(text, d.name);
    if (e.node == "$in") {
      if (!is_source || !has_port(d.inputs, e.port)) invalid("bad endpoint '" + text + "'");
    } else if (e.node == "$out") {
      if (is_source || !has_port(d.outputs, e.port)) invalid("bad endpoint '" + text + "'");
    } else if (e.node == "$repeat") {
      if (!c.repeat || e.port != (is_source ? "out" : "in")) invalid("bad endpoint '" + text + "'");
    } else {
      auto it = node_class.find(e.node);
      if (it == node_class.end()) invalid("endpoint '" + text + "' names an unknown node");
      if (!has_port(is_source ? it->second->outputs : it->second->inputs, e.port)) {
        invalid("endpoint '" + text + "': class " + it->second->name + " has no such " +
                (is_source ? "output" : "input") + " port");
      }
    }
  };
  for (const auto& e : c.edges) {
    check_end(e.from, true);
    check_end(e.to, false);
  }
  if (c.repeat) {
    for (const auto& e : c.repeat->edges) {
      check_end(e.from, true);
      check_end(e.to, false);
    }
    check_end(c.repeat->entry, false);
    check_end(c.repeat->exit, true);
  }
}

inline void Registry::register_descriptor(ModuleDescriptor d) {
  if (contains(d.name)) fail(Errc::DuplicateDescriptor, "module class '" + d.name + "' is already registered");
  check_structure(d);
  auto ptr = std::make_shared<const ModuleDescriptor>(std::move(d));
  if (ptr->is_composite() && ptr->params.fully_defaulted()) {
    // Everything is known, so the internal graph can be checked now.
    try {
      std::map<std::string, Tensor> scratch;
      detail::build_instance(*this, ptr, ptr->params.validate({}), "probe", 0, "", scratch, 0);
    } catch (const Error& e) {
      if (e.code() == Errc::InvalidComposite) throw;
      fail(Errc::InvalidComposite, ptr->name + ": " + e.what());
    }
  }
  descriptors_.emplace(ptr->name, std::move(ptr));
}

// ---------------------------------------------------------------------------
// Lowering

/// One primitive evaluation. Value names are "@port" for the lowered
/// instance's inputs and "<path>.<port>" for internal results.
struct Step {
  std::string path;    // "" for a primitive instance, "child/grandchild" inside composites
  std::string kernel;  // kernel id, or "source" for data layers
  ParamMap params;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<NeuralType> output_types;
  std::vector<std::string> weights;  // state keys in kernel order

  bool operator==(const Step&) const = default;
};

struct Lowered {
  std::vector<Step> steps;
  std::map<std::string, std::string> outputs;  // output port -> value name
};

namespace detail {

inline std::string value_name(const std::string& path, const std::string& port) {
  return path.empty() ? port : path + "." + port;
}

inline std::map<std::string, std::string> lower_into(const ModuleInstance& inst, const std::string& path,
                                                     const std::map<std::string, std::string>& in_values,
                                                     std::vector<Step>& steps, int depth) {
  if (depth > kMaxModuleDepth) fail(Errc::RecursionLimit, "lowering exceeded depth " + std::to_string(kMaxModuleDepth));
  std::map<std::string, std::string> out_values;
  const auto& d = *inst.descriptor;
  if (d.is_primitive() || d.is_data_layer()) {
    Step s;
    s.path = path;
    s.kernel = d.is_primitive() ? std::get<PrimitiveImpl>(d.impl).kernel : "source";
    s.params = inst.params;
    for (const auto& p : inst.inputs) s.inputs.push_back(in_values.at(p.name));
    for (const auto& p : inst.outputs) {
      auto v = value_name(path, p.name);
      s.outputs.push_back(v);
      s.output_types.push_back(p.type);
      out_values[p.name] = v;
    }
    if (d.is_primitive()) {
      for (const auto& w : find_kernel(s.kernel)->weights(inst.params)) {
        s.weights.push_back(path.empty() ? w.name : path + "/" + w.name);
      }
    }
    steps.push_back(std::move(s));
    return out_values;
  }
  auto order = child_order(inst.children, inst.edges);
  if (!order) fail(Errc::RecursionLimit, inst.id + ": composite wiring is cyclic");
  std::map<std::string, std::map<std::string, std::string>> produced;
  for (auto i : *order) {
    const auto& child = inst.children[i];
    std::map<std::string, std::string> child_in;
    for (const auto& e : inst.edges) {
      if (e.to_node != child.id) continue;
      child_in[e.to_port] = e.from_node == "$in" ? in_values.at(e.from_port) : produced.at(e.from_node).at(e.from_port);
    }
    auto child_path = path.empty() ? child.id : path + "/" + child.id;
    produced[child.id] = lower_into(child, child_path, child_in, steps, depth + 1);
  }
  for (const auto& e : inst.edges) {
    if (e.to_node != "$out") continue;
    out_values[e.to_port] = e.from_node == "$in" ? in_values.at(e.from_port) : produced.at(e.from_node).at(e.from_port);
  }
  return out_values;
}

}  // namespace detail

/// Expands an instance into primitive steps in dependency order.
inline Lowered lower(const ModuleInstance& inst) {
  std::map<std::string, std::string> in_values;
  for (const auto& p : inst.inputs) in_values[p.name] = "@" + p.name;
  Lowered out;
  out.outputs = detail::lower_into(inst, "", in_values, out.steps, 0);
  return out;
}

/// Steps are already primitive; lowering them again changes nothing.
inline std::vector<Step> lower(const std::vector<Step>& steps) { return steps; }

}  // namespace nmod
