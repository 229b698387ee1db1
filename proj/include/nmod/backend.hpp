#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/graph.hpp"
#include "nmod/kernels.hpp"
#include "nmod/module.hpp"
#include "nmod/tensor.hpp"

namespace nmod {

struct ExecOptions {
  bool check_finite = true;
};

/// Data-layer outputs for one batch, keyed "instance.port".
template <class T>
using BasicBatch = std::map<std::string, BasicTensor<T>>;
using Batch = BasicBatch<float>;

/// A fixed-dim requirement a value must meet before an instance runs.
struct InputCheck {
  int value = -1;
  NeuralType type;
  std::string where;
};

struct Op {
  const Kernel* kernel = nullptr;  // null for a data-layer source
  std::string instance;
  std::string path;
  ParamMap params;
  std::vector<int> inputs;
  std::vector<int> outputs;
  std::vector<int> weights;
  std::vector<NeuralType> output_types;
  std::vector<std::string> output_names;
  std::vector<InputCheck> checks;
};

/// A validated graph compiled to a flat list of kernel ops over numbered
/// values. Weights stay owned by the graph's instances.
class Program {
 public:
  explicit Program(Graph& graph, ExecOptions options = {}) : graph_(&graph), options_(options) {
    if (!graph.validated()) fail(Errc::NotValidated, "execution needs a validated graph");
    std::map<std::string, int> port_values;  // "inst.port" -> value id
    for (const auto& id : graph.topo_order()) {
      auto& inst = graph.instance(id);
      auto lowered = lower(inst);
      std::map<std::string, int> local;
      std::vector<InputCheck> checks;
      for (const auto& p : inst.inputs) {
        const auto* b = graph.binding_to(PortRef{id, p.name});
        int v = port_values.at(b->from.producer.str());
        local["@" + p.name] = v;
        checks.push_back({v, p.type, id + "." + p.name});
      }
      bool first = true;
      for (const auto& step : lowered.steps) {
        Op op;
        op.instance = id;
        op.path = step.path;
        op.params = step.params;
        if (step.kernel != "source") op.kernel = find_kernel(step.kernel);
        for (const auto& in : step.inputs) op.inputs.push_back(local.at(in));
        for (std::size_t i = 0; i < step.outputs.size(); ++i) {
          int v = static_cast<int>(value_names_.size());
          value_names_.push_back(id + (step.path.empty() ? "." : "/") + step.outputs[i]);
          local[step.outputs[i]] = v;
          op.outputs.push_back(v);
          op.output_types.push_back(step.output_types[i]);
          op.output_names.push_back(value_names_.back());
        }
        for (const auto& key : step.weights) {
          op.weights.push_back(static_cast<int>(weight_keys_.size()));
          weight_keys_.push_back(id + "/" + key);
          weight_refs_.push_back(&inst.state.at(key));
        }
        if (first) op.checks = std::move(checks);
        first = false;
        ops_.push_back(std::move(op));
      }
      for (const auto& [port, value] : lowered.outputs) port_values[id + "." + port] = local.at(value);
    }
    port_values_ = std::move(port_values);
  }

  const Graph& graph() const noexcept { return *graph_; }
  Graph& graph() noexcept { return *graph_; }
  const ExecOptions& options() const noexcept { return options_; }
  const std::vector<Op>& ops() const noexcept { return ops_; }
  std::size_t value_count() const noexcept { return value_names_.size(); }
  const std::string& value_name(int v) const { return value_names_.at(v); }
  const std::vector<std::string>& weight_keys() const noexcept { return weight_keys_; }
  const std::vector<Tensor*>& weight_refs() const noexcept { return weight_refs_; }

  int value_of(const PortRef& ref) const {
    auto it = port_values_.find(ref.str());
    if (it == port_values_.end()) fail(Errc::UnknownPort, "no value for " + ref.str());
    return it->second;
  }

  template <class T>
  std::vector<BasicTensor<T>> weights_as() const {
    std::vector<BasicTensor<T>> out;
    out.reserve(weight_refs_.size());
    for (const auto* w : weight_refs_) out.push_back(w->template cast<T>());
    return out;
  }

 private:
  Graph* graph_;
  ExecOptions options_;
  std::vector<Op> ops_;
  std::vector<std::string> value_names_;
  std::vector<std::string> weight_keys_;
  std::vector<Tensor*> weight_refs_;
  std::map<std::string, int> port_values_;
};

/// Every value computed by one forward pass, plus the weights it used.
/// Replaying the ops on the same inputs reproduces the values bitwise.
template <class T>
struct BasicTape {
  const Program* program = nullptr;
  std::vector<std::optional<BasicTensor<T>>> values;
  std::vector<const BasicTensor<T>*> weights;

  const BasicTensor<T>& value(int v) const {
    if (!values.at(v)) fail(Errc::DataError, "value " + program->value_name(v) + " was not computed");
    return *values[v];
  }
  const BasicTensor<T>& at(const PortRef& ref) const { return value(program->value_of(ref)); }
};
using Tape = BasicTape<float>;

namespace detail {

template <class T>
void check_shape(const BasicTensor<T>& t, const NeuralType& type, const std::string& where) {
  if (!shape_matches(type, t.shape())) {
    fail(Errc::ShapeMismatch, where + ": expected " + render_type(type) + ", got shape " + render_shape(t.shape()));
  }
}

template <class T>
void check_finite(const BasicTensor<T>& t, const Op& op) {
  for (auto v : t.data()) {
    if (!std::isfinite(v)) {
      fail(Errc::NonFiniteValue, "instance " + op.instance + (op.path.empty() ? "" : " (" + op.path + ")") +
                                     " produced a non-finite value");
    }
  }
}

}  // namespace detail

/// Evaluates every op in order with the given weights (aligned with
/// program.weight_keys()).
template <class T>
BasicTape<T> forward(const Program& program, const BasicBatch<T>& batch, std::vector<const BasicTensor<T>*> weights) {
  if (weights.size() != program.weight_keys().size()) {
    fail(Errc::ShapeMismatch, "expected " + std::to_string(program.weight_keys().size()) + " weight tensors");
  }
  BasicTape<T> tape;
  tape.program = &program;
  tape.values.resize(program.value_count());
  tape.weights = std::move(weights);
  for (const auto& op : program.ops()) {
    for (const auto& c : op.checks) detail::check_shape(tape.value(c.value), c.type, c.where);
    if (!op.kernel) {
      std::optional<std::int64_t> rows;
      for (std::size_t i = 0; i < op.outputs.size(); ++i) {
        auto key = op.instance + "." + op.output_names[i].substr(op.instance.size() + 1);
        auto it = batch.find(key);
        if (it == batch.end()) continue;
        detail::check_shape(it->second, op.output_types[i], key);
        if (it->second.rank() > 0) {
          if (rows && *rows != it->second.dim(0)) {
            fail(Errc::ShapeMismatch, key + ": batch size " + std::to_string(it->second.dim(0)) + " differs from " +
                                          std::to_string(*rows));
          }
          rows = it->second.dim(0);
        }
        tape.values[op.outputs[i]] = it->second;
      }
      continue;
    }
    KernelCall<T> call{op.params, {}, {}};
    for (int v : op.inputs) call.inputs.push_back(&tape.value(v));
    for (int w : op.weights) call.weights.push_back(tape.weights[w]);
    ++kernel_invocation_counter();
    auto outs = op.kernel->forward(call);
    for (std::size_t i = 0; i < outs.size(); ++i) {
      detail::check_shape(outs[i], op.output_types[i], op.output_names[i]);
      if (program.options().check_finite) detail::check_finite(outs[i], op);
      tape.values[op.outputs[i]] = std::move(outs[i]);
    }
  }
  return tape;
}

/// Forward with the graph's own f32 weights.
inline Tape forward(const Program& program, const Batch& batch) {
  std::vector<const Tensor*> w(program.weight_refs().begin(), program.weight_refs().end());
  return forward<float>(program, batch, std::move(w));
}

template <class T>
BasicTape<T> forward(const Program& program, const BasicBatch<T>& batch, const std::vector<BasicTensor<T>>& weights) {
  std::vector<const BasicTensor<T>*> w;
  for (const auto& t : weights) w.push_back(&t);
  return forward<T>(program, batch, std::move(w));
}

/// Reverse pass from a scalar value. Returns one gradient per program
/// weight; weights the sink does not depend on get zeros.
template <class T>
std::vector<BasicTensor<T>> backward(const BasicTape<T>& tape, int sink) {
  const auto& program = *tape.program;
  const auto& out = tape.value(sink);
  if (out.numel() != 1) {
    fail(Errc::NonScalarSink, program.value_name(sink) + " has shape " + render_shape(out.shape()) + ", not a scalar");
  }
  std::vector<std::optional<BasicTensor<T>>> grads(program.value_count());
  grads[sink] = BasicTensor<T>(out.shape(), T{1});
  std::vector<std::optional<std::vector<double>>> wgrads(tape.weights.size());

  const auto& ops = program.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    const auto& op = *it;
    if (!op.kernel || !op.kernel->differentiable()) continue;
    bool any = std::any_of(op.outputs.begin(), op.outputs.end(), [&](int v) { return grads[v].has_value(); });
    if (!any) continue;
    KernelCall<T> call{op.params, {}, {}};
    for (int v : op.inputs) call.inputs.push_back(&tape.value(v));
    for (int w : op.weights) call.weights.push_back(tape.weights[w]);
    std::vector<const BasicTensor<T>*> outs, gouts;
    for (int v : op.outputs) {
      outs.push_back(&tape.value(v));
      gouts.push_back(grads[v] ? &*grads[v] : nullptr);
    }
    auto g = op.kernel->backward(call, outs, gouts);
    for (std::size_t i = 0; i < op.inputs.size() && i < g.inputs.size(); ++i) {
      if (!g.inputs[i]) continue;
      auto& slot = grads[op.inputs[i]];
      if (!slot) {
        slot = std::move(*g.inputs[i]);
      } else {
        for (std::size_t k = 0; k < slot->numel(); ++k)
          (*slot)[k] = static_cast<T>(double((*slot)[k]) + double((*g.inputs[i])[k]));
      }
    }
    for (std::size_t i = 0; i < op.weights.size() && i < g.weights.size(); ++i) {
      auto& acc = wgrads[op.weights[i]];
      if (!acc) acc.emplace(g.weights[i].numel(), 0.0);
      for (std::size_t k = 0; k < acc->size(); ++k) (*acc)[k] += double(g.weights[i][k]);
    }
  }
  std::vector<BasicTensor<T>> result;
  result.reserve(tape.weights.size());
  for (std::size_t i = 0; i < tape.weights.size(); ++i) {
    BasicTensor<T> g(tape.weights[i]->shape());
    if (wgrads[i])
      for (std::size_t k = 0; k < g.numel(); ++k) g[k] = static_cast<T>((*wgrads[i])[k]);
    result.push_back(std::move(g));
  }
  return result;
}

template <class T>
std::vector<BasicTensor<T>> backward(const BasicTape<T>& tape, const PortRef& sink) {
  return backward(tape, tape.program->value_of(sink));
}

/// Gradients keyed "instance/weight".
template <class T>
std::map<std::string, BasicTensor<T>> gradient_map(const Program& program, std::vector<BasicTensor<T>> grads) {
  std::map<std::string, BasicTensor<T>> out;
  for (std::size_t i = 0; i < grads.size(); ++i) out.emplace(program.weight_keys()[i], std::move(grads[i]));
  return out;
}

/// The designated scalar loss: the first sink whose type is scalar(...).
inline PortRef scalar_sink(const Graph& g) {
  for (const auto& s : g.sinks()) {
    if (g.instance(s.instance).output_type(s.port).is_scalar()) return s;
  }
  fail(Errc::NoScalarLoss, "the graph has no scalar sink to use as a loss");
}

struct GradCheckEntry {
  std::string instance;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t masked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t masked = 0;
  bool passed = true;
};

/// Compares reverse-mode gradients with central differences, in double
/// precision. An element is masked when either perturbation flips any relu
/// input across zero. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(const Program& program, const Batch& batch, double epsilon, double tol,
                                  double floor = 1e-6, std::size_t max_parameters = 10000) {
  const auto sink = program.value_of(scalar_sink(program.graph()));
  std::size_t total = 0;
  for (const auto* w : program.weight_refs()) total += w->numel();
  if (total > max_parameters) {
    fail(Errc::TooManyParameters, std::to_string(total) + " parameters exceed the limit of " +
                                      std::to_string(max_parameters));
  }
  BasicBatch<double> dbatch;
  for (const auto& [k, v] : batch) dbatch.emplace(k, v.cast<double>());
  auto weights = program.weights_as<double>();

  std::vector<int> relu_inputs;
  for (const auto& op : program.ops())
    if (op.kernel && op.kernel->id() == "relu") relu_inputs.push_back(op.inputs[0]);
  auto pattern = [&](const BasicTape<double>& t) {
    std::vector<bool> bits;
    for (int v : relu_inputs)
      for (auto x : t.value(v).data()) bits.push_back(x > 0.0);
    return bits;
  };
  auto loss_and_pattern = [&]() {
    auto t = forward<double>(program, dbatch, weights);
    return std::make_pair(t.value(sink).item(), pattern(t));
  };

  auto base = forward<double>(program, dbatch, weights);
  const auto base_pattern = pattern(base);
  auto analytic = backward(base, sink);

  GradCheckReport report;
  std::map<std::string, GradCheckEntry> per_instance;
  for (std::size_t w = 0; w < weights.size(); ++w) {
    const auto& key = program.weight_keys()[w];
    auto inst = key.substr(0, key.find('/'));
    auto& entry = per_instance[inst];
    entry.instance = inst;
    for (std::size_t k = 0; k < weights[w].numel(); ++k) {
      const double orig = weights[w][k];
      weights[w][k] = orig + epsilon;
      auto [lp, pp] = loss_and_pattern();
      weights[w][k] = orig - epsilon;
      auto [lm, pm] = loss_and_pattern();
      weights[w][k] = orig;
      if (pp != base_pattern || pm != base_pattern) {
        ++entry.masked;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double a = analytic[w][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      ++entry.checked;
    }
  }
  for (auto& [_, e] : per_instance) {
    e.passed = e.max_rel_error <= tol;
    report.passed = report.passed && e.passed;
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.masked += e.masked;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace nmod
