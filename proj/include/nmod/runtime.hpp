#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmod/backend.hpp"
#include "nmod/checkpoint.hpp"
#include "nmod/data.hpp"
#include "nmod/error.hpp"
#include "nmod/graph.hpp"
#include "nmod/optim.hpp"
#include "nmod/rng.hpp"

namespace nmod {

enum class ActionKind { Train, Eval, Infer };

constexpr std::string_view action_name(ActionKind a) noexcept {
  switch (a) {
    case ActionKind::Train: return "train";
    case ActionKind::Eval: return "eval";
    case ActionKind::Infer: return "infer";
  }
  return "?";
}

struct ActionConfig {
  ActionKind action = ActionKind::Train;
  std::int64_t max_steps = 1;
  std::int64_t batch_size = 32;
  OptimizerConfig optimizer;
  std::int64_t accumulation_steps = 1;
  std::int64_t seed = 0;

  void check() const {
    if (max_steps < 0) fail(Errc::ConstraintViolation, "max_steps ≥ 0");
    if (batch_size < 1) fail(Errc::ConstraintViolation, "batch_size ≥ 1");
    if (accumulation_steps < 1) fail(Errc::ConstraintViolation, "accumulation_steps ≥ 1");
    optimizer.check();
  }

  static ActionConfig from_json(const nlohmann::json& j) {
    auto bad = [](const std::string& what) { fail(Errc::SchemaError, "action: " + what); };
    if (!j.is_object()) bad("must be an object");
    ActionConfig c;
    for (const auto& [k, v] : j.items()) {
      if (k == "action") {
        auto a = v.is_string() ? v.get<std::string>() : "";
        if (a == "train") c.action = ActionKind::Train;
        else if (a == "eval") c.action = ActionKind::Eval;
        else if (a == "infer") c.action = ActionKind::Infer;
        else bad("action must be train, eval or infer");
      } else if (k == "max_steps" || k == "batch_size" || k == "accumulation_steps" || k == "seed") {
        if (!v.is_number_integer()) bad(k + " must be an integer");
        auto x = v.get<std::int64_t>();
        if (k == "max_steps") c.max_steps = x;
        else if (k == "batch_size") c.batch_size = x;
        else if (k == "accumulation_steps") c.accumulation_steps = x;
        else c.seed = x;
      } else if (k == "optimizer") {
        if (!v.is_object()) bad("optimizer must be an object");
        for (const auto& [ok, ov] : v.items()) {
          if (ok == "kind") {
            if (!ov.is_string()) bad("optimizer.kind must be a string");
            c.optimizer.kind = ov.get<std::string>();
          } else if (ok == "lr" || ok == "momentum" || ok == "beta1" || ok == "beta2" || ok == "eps") {
            if (!ov.is_number()) bad("optimizer." + ok + " must be a number");
            double x = ov.get<double>();
            if (ok == "lr") c.optimizer.lr = x;
            else if (ok == "momentum") c.optimizer.momentum = x;
            else if (ok == "beta1") c.optimizer.beta1 = x;
            else if (ok == "beta2") c.optimizer.beta2 = x;
            else c.optimizer.eps = x;
          } else {
            bad("unknown optimizer key '" + ok + "'");
          }
        }
      } else {
        bad("unknown key '" + k + "'");
      }
    }
    try {
      c.check();
    } catch (const Error& e) {
      bad(e.what());
    }
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json opt{{"kind", optimizer.kind}, {"lr", optimizer.lr}};
    if (optimizer.kind == "sgd") {
      opt["momentum"] = optimizer.momentum;
    } else {
      opt["beta1"] = optimizer.beta1;
      opt["beta2"] = optimizer.beta2;
      opt["eps"] = optimizer.eps;
    }
    return {{"action", std::string(action_name(action))},
            {"max_steps", max_steps},
            {"batch_size", batch_size},
            {"optimizer", opt},
            {"accumulation_steps", accumulation_steps},
            {"seed", seed}};
  }
};

enum class CallbackKind { LossLog, Checkpoint, Evaluator };

constexpr std::string_view callback_name(CallbackKind k) noexcept {
  switch (k) {
    case CallbackKind::LossLog: return "loss_log";
    case CallbackKind::Checkpoint: return "checkpoint";
    case CallbackKind::Evaluator: return "evaluator";
  }
  return "?";
}

/// A routine run every `interval` steps. loss_log writes to `target`
/// (standard log stream when empty or "-"); checkpoint writes to `target`
/// with "{step}" replaced; evaluator runs `eval_graph` with the training
/// weights copied in by instance id.
struct Callback {
  CallbackKind kind = CallbackKind::LossLog;
  std::int64_t interval = 1;
  std::string target;
  std::shared_ptr<Graph> eval_graph;
  std::filesystem::path eval_data_dir;
  std::optional<ActionConfig> eval_config;
};

struct Event {
  std::int64_t step = 0;
  CallbackKind kind = CallbackKind::LossLog;
  std::string payload;
  bool ok = true;
};

struct TrainReport {
  std::vector<double> losses;  // one per optimizer step, mean over micro-batches
  std::uint64_t param_hash = 0;
  std::vector<Event> events;
  std::uint64_t final_step = 0;
};

struct RunContext {
  std::filesystem::path data_dir;   // base for relative data paths
  std::ostream* log = nullptr;      // loss_log lines with no file target
};

inline std::string format_loss_line(std::int64_t step, double loss) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "step=%lld loss=%.6f", static_cast<long long>(step), loss);
  return buf;
}

/// FNV-1a over every trainable tensor: instance id, key, shape, raw bits.
inline std::uint64_t param_hash(const Graph& g) {
  Fnv1a h;
  for (const auto& [id, inst] : g.instances()) {
    for (const auto& [key, t] : inst.state) {
      h.update(id);
      h.update("/");
      h.update(key);
      for (auto d : t.shape()) h.update_value(d);
      h.update(std::as_bytes(t.data()));
    }
  }
  return h.digest();
}

inline Checkpoint capture_checkpoint(const Graph& g, const Optimizer* opt, std::uint64_t step) {
  Checkpoint c;
  c.seed = g.seed();
  for (const auto& [id, inst] : g.instances())
    for (const auto& [key, t] : inst.state) c.params.emplace(id + "/" + key, t);
  if (opt) c.optimizer = opt->state();
  c.step = step;
  return c;
}

/// Copies checkpointed parameters into the graph. Keys and shapes must match
/// exactly.
inline void restore_params(Graph& g, const Checkpoint& c) {
  std::size_t seen = 0;
  for (auto& [id, inst] : g.instances()) {
    for (auto& [key, t] : inst.state) {
      auto it = c.params.find(id + "/" + key);
      if (it == c.params.end()) fail(Errc::CheckpointMismatch, "checkpoint lacks '" + id + "/" + key + "'");
      if (it->second.shape() != t.shape()) {
        fail(Errc::CheckpointMismatch, "'" + id + "/" + key + "' has shape " + render_shape(it->second.shape()) +
                                           " in the checkpoint, " + render_shape(t.shape()) + " in the graph");
      }
      t = it->second;
      ++seen;
    }
  }
  if (seen != c.params.size()) fail(Errc::CheckpointMismatch, "checkpoint has parameters the graph does not");
}

/// Copies every parameter tensor `dst` shares with `src` (same instance id,
/// key and shape).
inline void share_params(const Graph& src, Graph& dst) {
  for (auto& [id, inst] : dst.instances()) {
    if (!src.contains(id)) continue;
    const auto& from = src.instance(id).state;
    for (auto& [key, t] : inst.state) {
      auto it = from.find(key);
      if (it != from.end() && it->second.shape() == t.shape()) t = it->second;
    }
  }
}

namespace detail {

struct Feeds {
  std::vector<std::pair<std::string, DataSource>> sources;  // instance id -> source

  static Feeds load(const Graph& g, const std::filesystem::path& dir) {
    Feeds f;
    for (const auto& [id, inst] : g.instances())
      if (inst.descriptor->is_data_layer()) f.sources.emplace_back(id, load_source(inst, dir));
    if (f.sources.empty()) fail(Errc::DataExhausted, "the graph has no data layer");
    return f;
  }

  static std::int64_t width(const DataSource& s, std::int64_t b) { return s.batch_size() > 0 ? s.batch_size() : b; }

  /// Micro-batch number `u` of a continuous, epoch-shuffled stream.
  Batch training_batch(std::int64_t u, std::int64_t b, std::int64_t seed) const {
    Batch out;
    for (const auto& [id, src] : sources) {
      auto w = width(src, b);
      auto s = mix_seed(static_cast<std::uint64_t>(seed), fnv1a(id));
      for (auto& [port, t] : src.batch_at(u * w, w, s)) out.emplace(id + "." + port, std::move(t));
    }
    return out;
  }

  std::int64_t rows() const { return sources.front().second.rows(); }

  /// Rows [pos, pos + count) in file order.
  Batch pass_batch(std::int64_t pos, std::int64_t count) const {
    Batch out;
    for (const auto& [id, src] : sources) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = 0; i < count; ++i) {
        if (pos + i >= src.rows()) fail(Errc::DataExhausted, id + " has fewer rows than " + sources.front().first);
        idx.push_back(pos + i);
      }
      for (auto& [port, t] : src.gather(idx)) out.emplace(id + "." + port, std::move(t));
    }
    return out;
  }
};

}  // namespace detail

/// Single in-order pass; returns the sample-weighted mean of every scalar
/// sink, keyed by port name ("loss", "accuracy", ...). Never mutates state.
inline std::map<std::string, double> evaluate(Graph& g, const ActionConfig& cfg, const RunContext& ctx = {}) {
  cfg.check();
  Program program(g);
  auto feeds = detail::Feeds::load(g, ctx.data_dir);
  const auto n = feeds.rows();
  if (n == 0) fail(Errc::DataExhausted, "evaluation data is empty");
  std::vector<std::pair<std::string, int>> metrics;
  std::map<std::string, int> port_uses;
  for (const auto& s : g.sinks())
    if (g.instance(s.instance).output_type(s.port).is_scalar()) ++port_uses[s.port];
  for (const auto& s : g.sinks()) {
    if (!g.instance(s.instance).output_type(s.port).is_scalar()) continue;
    metrics.emplace_back(port_uses[s.port] > 1 ? s.str() : s.port, program.value_of(s));
  }
  std::map<std::string, double> sums;
  for (std::int64_t pos = 0; pos < n; pos += cfg.batch_size) {
    const auto count = std::min(cfg.batch_size, n - pos);
    auto tape = forward(program, feeds.pass_batch(pos, count));
    for (const auto& [name, v] : metrics) sums[name] += double(tape.value(v).item()) * double(count);
  }
  for (auto& [_, s] : sums) s /= double(n);
  return sums;
}

/// Writes every sink of every batch to a tensor dump, keyed
/// "<batch index>/<instance.port>".
inline TensorEntries infer(Graph& g, const ActionConfig& cfg, const std::filesystem::path& out,
                           const RunContext& ctx = {}) {
  cfg.check();
  Program program(g);
  auto feeds = detail::Feeds::load(g, ctx.data_dir);
  TensorEntries entries;
  const auto n = feeds.rows();
  for (std::int64_t pos = 0, b = 0; pos < n; pos += cfg.batch_size, ++b) {
    auto tape = forward(program, feeds.pass_batch(pos, std::min(cfg.batch_size, n - pos)));
    for (const auto& s : g.sinks()) entries.emplace_back(std::to_string(b) + "/" + s.str(), tape.at(s));
  }
  save_dump(entries, out);
  return entries;
}

namespace detail {

inline std::string expand_step(std::string target, std::int64_t step) {
  for (auto at = target.find("{step}"); at != std::string::npos; at = target.find("{step}"))
    target.replace(at, 6, std::to_string(step));
  return target;
}

}  // namespace detail

/// Fires every callback whose interval divides `step`, in registration
/// order. Failures become events; they never propagate.
inline std::vector<Event> run_callbacks(std::int64_t step, double loss, const std::vector<Callback>& callbacks,
                                        const Graph& g, const Optimizer* opt, const RunContext& ctx) {
  std::vector<Event> events;
  for (const auto& cb : callbacks) {
    if (cb.interval < 1 || step % cb.interval != 0) continue;
    Event ev{step, cb.kind, {}, true};
    try {
      switch (cb.kind) {
        case CallbackKind::LossLog: {
          ev.payload = format_loss_line(step, loss);
          if (cb.target.empty() || cb.target == "-") {
            if (ctx.log) *ctx.log << ev.payload << '\n' << std::flush;
          } else {
            std::ofstream f(cb.target, std::ios::app);
            if (!f) fail(Errc::IoError, "cannot append to '" + cb.target + "'");
            f << ev.payload << '\n';
          }
          break;
        }
        case CallbackKind::Checkpoint: {
          auto path = detail::expand_step(cb.target, step);
          save_checkpoint(capture_checkpoint(g, opt, static_cast<std::uint64_t>(step)), path);
          ev.payload = path;
          break;
        }
        case CallbackKind::Evaluator: {
          if (!cb.eval_graph) fail(Errc::DataError, "evaluator has no graph");
          share_params(g, *cb.eval_graph);
          auto cfg = cb.eval_config.value_or(ActionConfig{});
          auto metrics = evaluate(*cb.eval_graph, cfg, RunContext{cb.eval_data_dir, nullptr});
          ev.payload = "step=" + std::to_string(step);
          for (const auto& [k, v] : metrics) {
            char buf[64];
            std::snprintf(buf, sizeof buf, " %s=%.6f", k.c_str(), v);
            ev.payload += buf;
          }
          break;
        }
      }
    } catch (const Error& e) {
      ev.ok = false;
      ev.payload = std::string(e.name()) + ": " + e.what();
    } catch (const std::exception& e) {
      ev.ok = false;
      ev.payload = e.what();
    }
    events.push_back(std::move(ev));
  }
  return events;
}

/// Runs optimizer updates until the step counter reaches max_steps. Each
/// update averages the gradients of accumulation_steps micro-batches of
/// batch_size samples. Micro-batch u covers stream samples [u*b, (u+1)*b),
/// so a resumed run sees exactly the samples an uninterrupted one would.
inline TrainReport train(Graph& g, const ActionConfig& cfg, const std::vector<Callback>& callbacks = {},
                         const RunContext& ctx = {}, const Checkpoint* resume = nullptr) {
  cfg.check();
  Program program(g);
  const auto sink = program.value_of(scalar_sink(g));
  Optimizer opt(cfg.optimizer, program.weight_keys(), program.weight_refs());
  std::uint64_t step = 0;
  if (resume) {
    restore_params(g, *resume);
    opt.load_state(resume->optimizer);
    step = resume->step;
  }
  TrainReport report;
  if (step < static_cast<std::uint64_t>(cfg.max_steps)) {
    auto feeds = detail::Feeds::load(g, ctx.data_dir);
    const auto& refs = program.weight_refs();
    const auto k = cfg.accumulation_steps;
    while (step < static_cast<std::uint64_t>(cfg.max_steps)) {
      std::vector<std::vector<double>> acc;
      for (const auto* w : refs) acc.emplace_back(w->numel(), 0.0);
      double loss = 0.0;
      for (std::int64_t m = 0; m < k; ++m) {
        auto micro = static_cast<std::int64_t>(step) * k + m;
        auto tape = forward(program, feeds.training_batch(micro, cfg.batch_size, cfg.seed));
        loss += double(tape.value(sink).item());
        auto grads = backward(tape, sink);
        for (std::size_t i = 0; i < grads.size(); ++i)
          for (std::size_t j = 0; j < grads[i].numel(); ++j) acc[i][j] += double(grads[i][j]);
      }
      for (auto& a : acc)
        for (auto& x : a) x /= double(k);
      loss /= double(k);
      ++step;
      opt.step(refs, acc, step);
      report.losses.push_back(loss);
      auto events = run_callbacks(static_cast<std::int64_t>(step), loss, callbacks, g, &opt, ctx);
      report.events.insert(report.events.end(), events.begin(), events.end());
    }
  }
  report.final_step = step;
  report.param_hash = param_hash(g);
  return report;
}

/// Checkpoint of the graph plus a fresh optimizer for `cfg`; useful before
/// any training step has run.
inline Checkpoint initial_checkpoint(Graph& g, const ActionConfig& cfg) {
  Program program(g);
  Optimizer opt(cfg.optimizer, program.weight_keys(), program.weight_refs());
  return capture_checkpoint(g, &opt, 0);
}

}  // namespace nmod
