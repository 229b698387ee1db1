#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nmod/graph_io.hpp"
#include "nmod/runtime.hpp"

namespace nmod::cli {

/// Exit codes.
inline constexpr int kClean = 0;
inline constexpr int kFindings = 1;  // also runtime errors
inline constexpr int kUsage = 2;     // also schema errors

struct Invocation {
  std::string command;
  std::string graph_file;
  bool auto_cast = false;
  std::optional<std::int64_t> seed;
  std::string out;
  std::vector<std::string> tags;
  std::optional<std::int64_t> max_steps;
  bool json = false;
};

namespace detail {

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void print_findings(const GraphFile& gf, const Invocation& inv, std::ostream& out) {
  if (inv.json) {
    nlohmann::json j{{"ok", gf.valid}, {"casts", gf.graph->cast_count()}, {"findings", nlohmann::json::array()}};
    for (const auto& f : gf.findings) j["findings"].push_back(f.to_json());
    out << j.dump(2) << '\n';
    return;
  }
  for (const auto& f : gf.findings) out << f.text() << '\n';
  if (gf.graph->cast_count() > 0) out << "NOTE inserted " << gf.graph->cast_count() << " implicit cast(s)\n";
}

inline std::string param_list(const ParamMap& p) {
  std::string s;
  for (const auto& [k, v] : p) s += (s.empty() ? "" : ", ") + k + "=" + render_param(v);
  return s;
}

inline int describe(const GraphFile& gf, const Invocation& inv, std::ostream& out) {
  const auto& g = *gf.graph;
  auto order = g.topo_order();
  if (inv.json) {
    nlohmann::json j{{"seed", g.seed()}, {"parameters", g.parameter_count()}, {"topo_order", order},
                     {"instances", nlohmann::json::array()}, {"bindings", nlohmann::json::array()}};
    for (const auto& id : order) {
      const auto& inst = g.instance(id);
      nlohmann::json ij{{"id", id}, {"class", inst.descriptor->name}, {"params", params_to_json(inst.params)},
                        {"parameters", inst.parameter_count()}, {"inputs", nlohmann::json::object()},
                        {"outputs", nlohmann::json::object()}};
      for (const auto& p : inst.inputs) ij["inputs"][p.name] = render_type(p.type);
      for (const auto& p : inst.outputs) ij["outputs"][p.name] = render_type(p.type);
      j["instances"].push_back(std::move(ij));
    }
    for (const auto& b : g.bindings())
      j["bindings"].push_back(
          {{"from", b.from.producer.str()}, {"to", b.to.str()}, {"comparison", comparison_name(b.comparison)}});
    j["sinks"] = nlohmann::json::array();
    for (const auto& s : g.sinks()) j["sinks"].push_back(s.str());
    out << j.dump(2) << '\n';
    return kClean;
  }
  out << "graph seed=" << g.seed() << " instances=" << order.size() << " parameters=" << g.parameter_count() << '\n';
  out << "instances (topological order):\n";
  for (const auto& id : order) {
    const auto& inst = g.instance(id);
    out << "  " << id << " : " << inst.descriptor->name << " (" << inst.parameter_count() << " parameters)\n";
    if (!inst.params.empty()) out << "    params: " << param_list(inst.params) << '\n';
    for (const auto& p : inst.inputs) out << "    in  " << p.name << ": " << render_type(p.type) << '\n';
    for (const auto& p : inst.outputs) out << "    out " << p.name << ": " << render_type(p.type) << '\n';
  }
  out << "bindings:\n";
  for (const auto& b : g.bindings())
    out << "  " << b.from.producer.str() << " -> " << b.to.str() << ": " << comparison_name(b.comparison) << '\n';
  out << "sinks:";
  for (const auto& s : g.sinks()) out << ' ' << s.str();
  out << '\n';
  if (g.cast_count() > 0) out << "NOTE inserted " << g.cast_count() << " implicit cast(s)\n";
  return kClean;
}

inline ActionConfig action_for(const GraphFile& gf, const Invocation& inv, ActionKind kind) {
  ActionConfig cfg = gf.action.value_or(ActionConfig{});
  cfg.action = kind;
  if (inv.max_steps) cfg.max_steps = *inv.max_steps;
  if (inv.seed) cfg.seed = *inv.seed;
  cfg.check();
  return cfg;
}

inline int run_action(GraphFile& gf, const Invocation& inv, std::ostream& out, std::ostream& err) {
  RunContext ctx{gf.base_dir, &out};
  if (inv.command == "train") {
    auto cfg = action_for(gf, inv, ActionKind::Train);
    auto callbacks = gf.callbacks;
    bool logs = std::any_of(callbacks.begin(), callbacks.end(),
                            [](const Callback& c) { return c.kind == CallbackKind::LossLog; });
    if (!logs) callbacks.insert(callbacks.begin(), Callback{CallbackKind::LossLog, 1, "-", nullptr, {}, {}});
    auto report = train(*gf.graph, cfg, callbacks, ctx);
    for (const auto& ev : report.events) {
      if (!ev.ok) err << "warning: " << callback_name(ev.kind) << " callback at step " << ev.step << ": " << ev.payload << '\n';
      else if (ev.kind == CallbackKind::Evaluator) out << "eval " << ev.payload << '\n';
    }
    if (!inv.out.empty()) {
      save_checkpoint(capture_checkpoint(*gf.graph, nullptr, report.final_step), inv.out);
    }
    return kClean;
  }
  if (inv.command == "eval") {
    auto cfg = action_for(gf, inv, ActionKind::Eval);
    auto metrics = evaluate(*gf.graph, cfg, ctx);
    if (inv.json) {
      out << nlohmann::json(metrics).dump(2) << '\n';
    } else {
      for (const auto& [k, v] : metrics) out << k << '=' << fixed6(v) << '\n';
    }
    return kClean;
  }
  auto cfg = action_for(gf, inv, ActionKind::Infer);
  auto entries = infer(*gf.graph, cfg, inv.out, ctx);
  out << "wrote " << entries.size() << " tensors to " << inv.out << '\n';
  return kClean;
}

}  // namespace detail

/// Runs one command. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Invocation inv;
  CLI::App app{"Type-check and run neural-module graph files", "nmodc"};
  app.require_subcommand(1);
  std::vector<CLI::App*> subs;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("graph", inv.graph_file, "graph-description file")->required();
    sub->add_flag("--auto-cast", inv.auto_cast, "repair TRANSPOSE_SAME connections with a Transpose");
    sub->add_option("--seed", inv.seed, "graph and runtime seed (default 0)");
    sub->add_option("--tags", inv.tags, "extra tag-hierarchy file")->take_all();
    sub->add_flag("--json", inv.json, "machine-readable output");
    subs.push_back(sub);
    return sub;
  };
  add("check", "type-check and validate");
  add("describe", "print instances, port types, order and bindings");
  add("train", "run the train action")->add_option("--max-steps", inv.max_steps, "override max_steps");
  add("eval", "run the eval action")->add_option("--max-steps", inv.max_steps, "override max_steps");
  auto* infer_cmd = add("infer", "run the infer action and dump outputs");
  infer_cmd->add_option("--max-steps", inv.max_steps, "override max_steps");
  infer_cmd->add_option("--out", inv.out, "tensor dump path")->required();
  subs[2]->add_option("--out", inv.out, "final checkpoint path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kClean;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kClean;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }
  for (auto* s : subs)
    if (s->parsed()) inv.command = s->get_name();

  FileOptions fo{inv.auto_cast, true, inv.seed, inv.tags};
  GraphFile gf;
  try {
    gf = load_graph_file(inv.graph_file, fo);
  } catch (const Error& e) {
    err << "error: " << e.name() << ": " << e.what() << '\n';
    return kUsage;
  }

  if (inv.command == "check") {
    detail::print_findings(gf, inv, out);
    return gf.valid ? kClean : kFindings;
  }
  if (!gf.valid) {
    detail::print_findings(gf, inv, out);
    return kFindings;
  }
  try {
    if (inv.command == "describe") return detail::describe(gf, inv, out);
    return detail::run_action(gf, inv, out, err);
  } catch (const Error& e) {
    err << "error: " << e.name() << ": " << e.what() << '\n';
    return kFindings;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFindings;
  }
}

}  // namespace nmod::cli
