#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmod/checkpoint.hpp"
#include "nmod/collection.hpp"
#include "nmod/error.hpp"
#include "nmod/graph.hpp"
#include "nmod/runtime.hpp"

namespace nmod {

/// One problem found while loading a graph in collect mode.
struct Finding {
  enum class Kind { Type, Unbound, Cycle, UnreachableSink };
  Kind kind = Kind::Type;
  std::string result;          // comparison name for Kind::Type
  std::string from, to;        // port refs; `from` only for unbound/sink
  std::string producer_type, consumer_type;
  std::vector<std::string> cycle;

  std::string text() const {
    switch (kind) {
      case Kind::Type:
        return "ERROR " + result + " at " + from + " -> " + to + ": " + producer_type + " vs " + consumer_type;
      case Kind::Unbound:
        return "ERROR UNBOUND_INPUT at " + to + ": input port is not connected";
      case Kind::Cycle: {
        std::string s = "ERROR CYCLE among";
        for (const auto& id : cycle) s += " " + id;
        return s;
      }
      case Kind::UnreachableSink:
        return "ERROR UNREACHABLE_SINK at " + from + ": no data layer reaches this sink";
    }
    return {};
  }

  nlohmann::json to_json() const {
    switch (kind) {
      case Kind::Type:
        return {{"kind", "type"}, {"result", result}, {"from", from}, {"to", to},
                {"producer_type", producer_type}, {"consumer_type", consumer_type}};
      case Kind::Unbound: return {{"kind", "unbound_input"}, {"port", to}};
      case Kind::Cycle: return {{"kind", "cycle"}, {"instances", cycle}};
      case Kind::UnreachableSink: return {{"kind", "unreachable_sink"}, {"port", from}};
    }
    return {};
  }
};

struct LoadOptions {
  bool auto_cast = false;
  bool collect = false;                 // record type errors instead of throwing
  std::optional<std::int64_t> seed;     // overrides the document's seed
  std::filesystem::path base_dir;       // for relative paths in the document
};

namespace detail {

inline std::string json_path(const std::string& parent, const std::string& key) { return parent + "/" + key; }
inline std::string json_path(const std::string& parent, std::size_t i) { return parent + "/" + std::to_string(i); }

[[noreturn]] inline void schema_error(const std::string& path, const std::string& what) {
  fail(Errc::SchemaError, (path.empty() ? std::string("/") : path) + ": " + what);
}

inline void expect_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                        const std::string& path) {
  if (!j.is_object()) schema_error(path, "expected an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) schema_error(json_path(path, k), "unknown key");
  }
}

inline std::string expect_string(const nlohmann::json& j, const std::string& path) {
  if (!j.is_string()) schema_error(path, "expected a string");
  return j.get_ref<const std::string&>();
}

/// Parses a port reference, checking that the instance and port exist.
inline PortRef expect_port(const Graph& g, const nlohmann::json& j, const std::string& path, bool input) {
  PortRef ref;
  try {
    ref = PortRef::parse(expect_string(j, path));
  } catch (const Error& e) {
    if (e.code() == Errc::SchemaError && std::string(e.what()).rfind(path, 0) == 0) throw;
    schema_error(path, e.what());
  }
  if (!g.contains(ref.instance)) schema_error(path, "no instance '" + ref.instance + "'");
  const auto& inst = g.instance(ref.instance);
  if (input ? !inst.find_input(ref.port) : !inst.find_output(ref.port)) {
    schema_error(path, "instance '" + ref.instance + "' (" + inst.descriptor->name + ") has no " +
                           (input ? "input" : "output") + " port '" + ref.port + "'");
  }
  return ref;
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::string msg = e.what();
    if (auto at = msg.find("]"); at != std::string::npos && at + 2 < msg.size()) msg = msg.substr(at + 2);
    fail(Errc::SchemaError, what + ": " + msg);
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

}  // namespace detail

/// Instances, params, bindings, sinks and seed of `g`. Casts appear as
/// ordinary Transpose instances.
inline nlohmann::json save_graph(const Graph& g) {
  nlohmann::json doc;
  doc["seed"] = g.seed();
  auto& modules = doc["modules"] = nlohmann::json::array();
  for (const auto& [id, inst] : g.instances())
    modules.push_back({{"id", id}, {"class", inst.descriptor->name}, {"params", params_to_json(inst.params)}});
  auto& dag = doc["dag"] = nlohmann::json::array();
  for (const auto& b : g.bindings()) dag.push_back({{"from", b.from.producer.str()}, {"to", b.to.str()}});
  auto& sinks = doc["sinks"] = nlohmann::json::array();
  for (const auto& s : g.sinks()) sinks.push_back(s.str());
  return doc;
}

/// Builds the graph part of a document (seed, modules, dag, sinks) against
/// an existing registry. Other top-level keys are checked for spelling but
/// ignored. In collect mode connection type errors are appended to
/// `findings` instead of thrown.
inline Graph load_graph(const nlohmann::json& doc, std::shared_ptr<const Registry> reg, const LoadOptions& opt = {},
                        std::vector<Finding>* findings = nullptr) {
  detail::expect_keys(doc, {"seed", "tags_file", "modules", "dag", "sinks", "action", "callbacks", "descriptors"}, "");
  std::int64_t seed = 0;
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer()) detail::schema_error("/seed", "expected an integer");
    seed = doc["seed"].get<std::int64_t>();
  }
  if (opt.seed) seed = *opt.seed;
  Graph g(std::move(reg), seed);

  if (!doc.contains("modules")) detail::schema_error("", "missing key 'modules'");
  if (!doc["modules"].is_array()) detail::schema_error("/modules", "expected an array");
  for (std::size_t i = 0; i < doc["modules"].size(); ++i) {
    const auto& m = doc["modules"][i];
    const auto path = detail::json_path("/modules", i);
    detail::expect_keys(m, {"id", "class", "params"}, path);
    if (!m.contains("id")) detail::schema_error(path, "missing key 'id'");
    if (!m.contains("class")) detail::schema_error(path, "missing key 'class'");
    const auto& id = detail::expect_string(m["id"], detail::json_path(path, "id"));
    const auto& cls = detail::expect_string(m["class"], detail::json_path(path, "class"));
    try {
      const auto& d = g.registry().lookup(cls);
      auto params = d.params.from_json(m.value("params", nlohmann::json::object()));
      g.add(id, cls, params);
    } catch (const Error& e) {
      fail(e.code(), path + " (" + id + "): " + e.what());
    }
  }

  if (!doc.contains("dag")) detail::schema_error("", "missing key 'dag'");
  if (!doc["dag"].is_array()) detail::schema_error("/dag", "expected an array");
  for (std::size_t i = 0; i < doc["dag"].size(); ++i) {
    const auto& e = doc["dag"][i];
    const auto path = detail::json_path("/dag", i);
    detail::expect_keys(e, {"from", "to"}, path);
    if (!e.contains("from") || !e.contains("to")) detail::schema_error(path, "an edge needs 'from' and 'to'");
    auto from = detail::expect_port(g, e["from"], detail::json_path(path, "from"), false);
    auto to = detail::expect_port(g, e["to"], detail::json_path(path, "to"), true);
    try {
      g.connect(g.output(from), to.instance, to.port, opt.auto_cast);
    } catch (const TypeMismatch& tm) {
      if (!opt.collect || !findings) throw;
      findings->push_back({Finding::Kind::Type, std::string(comparison_name(tm.result())), tm.from().str(),
                           tm.to().str(), tm.producer_type(), tm.consumer_type(), {}});
    } catch (const Error& err) {
      if (err.code() != Errc::PortAlreadyBound) throw;
      detail::schema_error(detail::json_path(path, "to"), err.what());
    }
  }

  if (doc.contains("sinks")) {
    if (!doc["sinks"].is_array()) detail::schema_error("/sinks", "expected an array");
    for (std::size_t i = 0; i < doc["sinks"].size(); ++i) {
      g.add_sink(detail::expect_port(g, doc["sinks"][i], detail::json_path("/sinks", i), false));
    }
  }
  return g;
}

/// Converts a validation report to findings. Unbound inputs that already
/// carry a type finding are skipped so each problem is reported once.
inline std::vector<Finding> report_findings(const ValidationReport& r, const std::vector<Finding>& type_findings = {}) {
  std::vector<Finding> out;
  for (const auto& p : r.unbound_inputs) {
    auto s = p.str();
    bool dup = std::any_of(type_findings.begin(), type_findings.end(), [&](const Finding& f) { return f.to == s; });
    if (!dup) out.push_back({Finding::Kind::Unbound, {}, {}, s, {}, {}, {}});
  }
  for (const auto& c : r.cycles) out.push_back({Finding::Kind::Cycle, {}, {}, {}, {}, {}, c});
  for (const auto& s : r.unreachable_sinks) out.push_back({Finding::Kind::UnreachableSink, {}, s.str(), {}, {}, {}, {}});
  return out;
}

/// Everything a graph-description file defines.
struct GraphFile {
  std::filesystem::path path;
  std::filesystem::path base_dir;
  std::shared_ptr<Registry> registry;
  std::shared_ptr<Graph> graph;
  std::optional<ActionConfig> action;
  std::vector<Callback> callbacks;
  std::vector<Finding> findings;  // type findings (collect mode) then validation findings
  bool valid = false;
};

struct FileOptions {
  bool auto_cast = false;
  bool collect = false;
  std::optional<std::int64_t> seed;
  std::vector<std::string> extra_tag_files;  // e.g. from --tags
};

namespace detail {

inline std::vector<Callback> callbacks_from_json(const nlohmann::json& j, const std::filesystem::path& base,
                                                 const FileOptions& opt, int depth);

inline GraphFile load_graph_file_impl(const std::filesystem::path& file, const FileOptions& opt, int depth) {
  if (depth > 4) fail(Errc::SchemaError, file.string() + ": evaluator graphs nest too deeply");
  GraphFile gf;
  gf.path = file;
  gf.base_dir = file.parent_path();
  std::string text;
  try {
    text = read_file(file);
  } catch (const Error& e) {
    fail(Errc::IoError, e.what());
  }
  auto doc = parse_json_text(text, file.string());
  if (!doc.is_object()) fail(Errc::SchemaError, file.string() + ": /: a graph document must be an object");

  try {
    std::vector<std::string> tag_files;
    if (doc.contains("tags_file"))
      tag_files.push_back(resolve(gf.base_dir, expect_string(doc["tags_file"], "/tags_file")).string());
    tag_files.insert(tag_files.end(), opt.extra_tag_files.begin(), opt.extra_tag_files.end());
    auto tags = std::make_shared<TagHierarchy>();
    tags->load_json(nlohmann::json::parse(kStdTagsJson));
    for (const auto& t : tag_files) tags->load_file(t);
    tags->freeze();
    gf.registry = std::make_shared<Registry>(tags);
    register_std_descriptors(*gf.registry);

    if (doc.contains("descriptors")) {
      const auto& ds = doc["descriptors"];
      if (!ds.is_array()) schema_error("/descriptors", "expected an array");
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].is_string()) {
          auto p = resolve(gf.base_dir, ds[i].get<std::string>());
          auto sub = parse_json_text(read_file(p), p.string());
          if (sub.is_array()) {
            for (const auto& d : sub) gf.registry->register_json(d);
          } else {
            gf.registry->register_json(sub);
          }
        } else {
          gf.registry->register_json(ds[i]);
        }
      }
    }

    LoadOptions lo{opt.auto_cast, opt.collect, opt.seed, gf.base_dir};
    gf.graph = std::make_shared<Graph>(load_graph(doc, gf.registry, lo, &gf.findings));
    if (doc.contains("action")) gf.action = ActionConfig::from_json(doc["action"]);
    if (doc.contains("callbacks")) gf.callbacks = callbacks_from_json(doc["callbacks"], gf.base_dir, opt, depth);
  } catch (const TypeMismatch&) {
    throw;
  } catch (const Error& e) {
    fail(e.code(), file.string() + ": " + e.what());
  }
  auto report = gf.graph->validate();
  auto more = report_findings(report, gf.findings);
  gf.findings.insert(gf.findings.end(), more.begin(), more.end());
  gf.valid = gf.findings.empty();
  return gf;
}

inline std::vector<Callback> callbacks_from_json(const nlohmann::json& j, const std::filesystem::path& base,
                                                 const FileOptions& opt, int depth) {
  if (!j.is_array()) schema_error("/callbacks", "expected an array");
  std::vector<Callback> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& c = j[i];
    const auto path = json_path("/callbacks", i);
    expect_keys(c, {"kind", "interval", "target", "graph", "action"}, path);
    Callback cb;
    const auto kind = expect_string(c.value("kind", nlohmann::json()), json_path(path, "kind"));
    if (kind == "loss_log") cb.kind = CallbackKind::LossLog;
    else if (kind == "checkpoint") cb.kind = CallbackKind::Checkpoint;
    else if (kind == "evaluator") cb.kind = CallbackKind::Evaluator;
    else schema_error(json_path(path, "kind"), "must be loss_log, checkpoint or evaluator");
    if (c.contains("interval")) {
      if (!c["interval"].is_number_integer() || c["interval"].get<std::int64_t>() < 1)
        schema_error(json_path(path, "interval"), "expected a positive integer");
      cb.interval = c["interval"].get<std::int64_t>();
    }
    if (c.contains("target")) {
      cb.target = expect_string(c["target"], json_path(path, "target"));
      if (cb.target != "-" && !cb.target.empty()) cb.target = resolve(base, cb.target).string();
    }
    if (cb.kind == CallbackKind::Checkpoint && cb.target.empty())
      schema_error(json_path(path, "target"), "a checkpoint callback needs a target");
    if (cb.kind == CallbackKind::Evaluator) {
      if (!c.contains("graph")) schema_error(path, "an evaluator needs 'graph'");
      FileOptions sub = opt;
      sub.collect = false;
      auto eval = load_graph_file_impl(resolve(base, expect_string(c["graph"], json_path(path, "graph"))), sub, depth + 1);
      if (!eval.valid) schema_error(json_path(path, "graph"), "evaluator graph does not validate");
      cb.eval_graph = eval.graph;
      cb.eval_data_dir = eval.base_dir;
      cb.eval_config = eval.action;
      if (c.contains("action")) cb.eval_config = ActionConfig::from_json(c["action"]);
    } else if (c.contains("graph") || c.contains("action")) {
      schema_error(path, "only evaluators take 'graph' and 'action'");
    }
    out.push_back(std::move(cb));
  }
  return out;
}

}  // namespace detail

/// Reads a graph-description file: the shipped tags and descriptors plus
/// the file's tags_file, descriptors, modules, dag, sinks, action and
/// callbacks. Relative paths resolve against the file's directory.
inline GraphFile load_graph_file(const std::filesystem::path& file, const FileOptions& opt = {}) {
  return detail::load_graph_file_impl(file, opt, 0);
}

}  // namespace nmod
