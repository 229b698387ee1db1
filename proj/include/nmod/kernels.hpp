#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/params.hpp"
#include "nmod/tensor.hpp"

namespace nmod {

enum class WeightInit { Glorot, Zeros };

/// A trainable tensor a kernel owns, with its initialization rule.
struct WeightSpec {
  std::string name;
  Shape shape;
  WeightInit init = WeightInit::Zeros;
  std::int64_t fan_in = 0;
  std::int64_t fan_out = 0;
};

template <class T>
struct KernelCall {
  const ParamMap& params;
  std::vector<const BasicTensor<T>*> inputs;
  std::vector<const BasicTensor<T>*> weights;
};

template <class T>
struct KernelGrads {
  std::vector<std::optional<BasicTensor<T>>> inputs;  // nullopt: input carries no gradient
  std::vector<BasicTensor<T>> weights;
};

/// Number of kernel evaluations performed by this process. Graph
/// construction and validation never touch it.
inline std::atomic<std::uint64_t>& kernel_invocation_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
inline std::uint64_t kernel_invocations() { return kernel_invocation_counter().load(); }

/// A primitive computation with a forward rule and a vector-Jacobian
/// product. Kernels are stateless; weights are passed in by the executor.
class Kernel {
 public:
  virtual ~Kernel() = default;
  virtual std::string_view id() const noexcept = 0;
  virtual std::vector<WeightSpec> weights(const ParamMap&) const { return {}; }
  virtual bool differentiable() const noexcept { return true; }
  virtual std::vector<Shape> output_shapes(const ParamMap& params, const std::vector<Shape>& inputs) const = 0;

  virtual std::vector<BasicTensor<float>> forward(const KernelCall<float>& call) const = 0;
  virtual std::vector<BasicTensor<double>> forward(const KernelCall<double>& call) const = 0;
  virtual KernelGrads<float> backward(const KernelCall<float>& call,
                                      const std::vector<const BasicTensor<float>*>& outputs,
                                      const std::vector<const BasicTensor<float>*>& output_grads) const = 0;
  virtual KernelGrads<double> backward(const KernelCall<double>& call,
                                       const std::vector<const BasicTensor<double>*>& outputs,
                                       const std::vector<const BasicTensor<double>*>& output_grads) const = 0;
};

/// CRTP adapter: a kernel implements `run<T>` and `grad<T>` once and gets
/// both precisions.
template <class Derived>
class KernelBase : public Kernel {
 public:
  std::vector<BasicTensor<float>> forward(const KernelCall<float>& call) const override {
    return self().template run<float>(call);
  }
  std::vector<BasicTensor<double>> forward(const KernelCall<double>& call) const override {
    return self().template run<double>(call);
  }
  KernelGrads<float> backward(const KernelCall<float>& call, const std::vector<const BasicTensor<float>*>& outputs,
                              const std::vector<const BasicTensor<float>*>& output_grads) const override {
    return self().template grad<float>(call, outputs, output_grads);
  }
  KernelGrads<double> backward(const KernelCall<double>& call, const std::vector<const BasicTensor<double>*>& outputs,
                               const std::vector<const BasicTensor<double>*>& output_grads) const override {
    return self().template grad<double>(call, outputs, output_grads);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

namespace kernels {

[[noreturn]] inline void shape_error(std::string_view kernel, const std::string& what) {
  fail(Errc::ShapeMismatch, std::string(kernel) + ": " + what);
}

template <class T>
BasicTensor<T> zeros_like(const BasicTensor<T>& t) {
  return BasicTensor<T>(t.shape());
}

/// Gradient tensor of an output, or zeros if nothing flowed into it.
template <class T>
BasicTensor<T> grad_or_zero(const BasicTensor<T>* g, const BasicTensor<T>& like) {
  return g ? *g : zeros_like(like);
}

template <class T>
std::int64_t to_index(T value, std::int64_t bound, std::string_view kernel) {
  auto i = static_cast<std::int64_t>(std::llround(static_cast<double>(value)));
  if (static_cast<double>(i) != static_cast<double>(value) || i < 0 || i >= bound) {
    fail(Errc::DataError, std::string(kernel) + ": index " + std::to_string(static_cast<double>(value)) +
                              " outside [0, " + std::to_string(bound) + ")");
  }
  return i;
}

template <class T>
std::vector<BasicTensor<T>> single(BasicTensor<T> t) {
  std::vector<BasicTensor<T>> out;
  out.push_back(std::move(t));
  return out;
}

/// y = x Wᵀ + b over the last axis.
class Linear : public KernelBase<Linear> {
 public:
  std::string_view id() const noexcept override { return "linear"; }

  std::vector<WeightSpec> weights(const ParamMap& p) const override {
    auto in = param_int(p, "in_features");
    auto out = param_int(p, "out_features");
    auto it = p.find("init");
    bool zeros = it != p.end() && std::get<std::string>(it->second) == "zeros";
    return {{"weight", {out, in}, zeros ? WeightInit::Zeros : WeightInit::Glorot, in, out},
            {"bias", {out}, WeightInit::Zeros, in, out}};
  }

  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    if (in.size() != 1 || in[0].empty() || in[0].back() != param_int(p, "in_features")) {
      shape_error(id(), "expected [..., in_features]");
    }
    Shape s = in[0];
    s.back() = param_int(p, "out_features");
    return {s};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& x = *c.inputs[0];
    const auto& w = *c.weights[0];
    const auto& b = *c.weights[1];
    const auto in = param_int(c.params, "in_features");
    const auto out = param_int(c.params, "out_features");
    BasicTensor<T> y(output_shapes(c.params, {x.shape()})[0]);
    const auto rows = x.rows();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t o = 0; o < out; ++o) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < in; ++i) acc += double(x[r * in + i]) * double(w[o * in + i]);
        y[r * out + o] = static_cast<T>(acc + double(b[o]));
      }
    }
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& x = *c.inputs[0];
    const auto& w = *c.weights[0];
    const auto in = param_int(c.params, "in_features");
    const auto out = param_int(c.params, "out_features");
    const auto dy = grad_or_zero(g[0], *outs[0]);
    const auto rows = x.rows();
    BasicTensor<T> dx(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t i = 0; i < in; ++i) {
        double acc = 0.0;
        for (std::int64_t o = 0; o < out; ++o) acc += double(dy[r * out + o]) * double(w[o * in + i]);
        dx[r * in + i] = static_cast<T>(acc);
      }
    }
    BasicTensor<T> dw(w.shape());
    BasicTensor<T> db(Shape{out});
    for (std::int64_t o = 0; o < out; ++o) {
      double bacc = 0.0;
      for (std::int64_t r = 0; r < rows; ++r) bacc += double(dy[r * out + o]);
      db[o] = static_cast<T>(bacc);
      for (std::int64_t i = 0; i < in; ++i) {
        double acc = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) acc += double(dy[r * out + o]) * double(x[r * in + i]);
        dw[o * in + i] = static_cast<T>(acc);
      }
    }
    KernelGrads<T> result;
    result.inputs.emplace_back(std::move(dx));
    result.weights.push_back(std::move(dw));
    result.weights.push_back(std::move(db));
    return result;
  }
};

/// max(x, 0); the subgradient at 0 is 0.
class Relu : public KernelBase<Relu> {
 public:
  std::string_view id() const noexcept override { return "relu"; }
  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override { return {in.at(0)}; }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    BasicTensor<T> y = *c.inputs[0];
    for (auto& v : y.data()) v = v > T{0} ? v : T{0};
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& x = *c.inputs[0];
    auto dx = grad_or_zero(g[0], *outs[0]);
    for (std::size_t i = 0; i < dx.numel(); ++i)
      if (!(x[i] > T{0})) dx[i] = T{0};
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dx));
    return r;
  }
};

class Tanh : public KernelBase<Tanh> {
 public:
  std::string_view id() const noexcept override { return "tanh"; }
  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override { return {in.at(0)}; }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    BasicTensor<T> y = *c.inputs[0];
    for (auto& v : y.data()) v = std::tanh(v);
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>&, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& y = *outs[0];
    auto dx = grad_or_zero(g[0], y);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = static_cast<T>(double(dx[i]) * (1.0 - double(y[i]) * double(y[i])));
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dx));
    return r;
  }
};

/// Numerically stabilized log-softmax over the last axis.
class LogSoftmax : public KernelBase<LogSoftmax> {
 public:
  std::string_view id() const noexcept override { return "log_softmax"; }
  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override {
    if (in.at(0).empty()) shape_error(id(), "needs rank >= 1");
    return {in.at(0)};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& x = *c.inputs[0];
    output_shapes(c.params, {x.shape()});
    BasicTensor<T> y(x.shape());
    const auto k = x.shape().back();
    for (std::int64_t r = 0; r < x.rows(); ++r) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) m = std::max(m, double(x[r * k + j]));
      double s = 0.0;
      for (std::int64_t j = 0; j < k; ++j) s += std::exp(double(x[r * k + j]) - m);
      const double lse = m + std::log(s);
      for (std::int64_t j = 0; j < k; ++j) y[r * k + j] = static_cast<T>(double(x[r * k + j]) - lse);
    }
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>&, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& y = *outs[0];
    const auto dy = grad_or_zero(g[0], y);
    BasicTensor<T> dx(y.shape());
    const auto k = y.shape().back();
    for (std::int64_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (std::int64_t j = 0; j < k; ++j) s += double(dy[r * k + j]);
      for (std::int64_t j = 0; j < k; ++j)
        dx[r * k + j] = static_cast<T>(double(dy[r * k + j]) - std::exp(double(y[r * k + j])) * s);
    }
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dx));
    return r;
  }
};

/// Mean negative log-likelihood of integer labels under log-probabilities.
/// Rows whose label equals `ignore_index` are excluded from the mean.
class NllLoss : public KernelBase<NllLoss> {
 public:
  std::string_view id() const noexcept override { return "nll_loss"; }

  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override {
    if (in.size() != 2 || in[0].empty()) shape_error(id(), "expected log_probs [..., K] and labels");
    Shape lp = in[0];
    lp.pop_back();
    if (shape_numel(lp) != shape_numel(in[1])) {
      shape_error(id(), "labels " + render_shape(in[1]) + " do not match log_probs " + render_shape(in[0]));
    }
    return {Shape{}};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& lp = *c.inputs[0];
    const auto& labels = *c.inputs[1];
    output_shapes(c.params, {lp.shape(), labels.shape()});
    const auto k = lp.shape().back();
    const auto ignore = param_int(c.params, "ignore_index");
    double total = 0.0;
    std::int64_t count = 0;
    for (std::int64_t r = 0; r < lp.rows(); ++r) {
      if (static_cast<std::int64_t>(std::llround(double(labels[r]))) == ignore) continue;
      auto y = to_index(labels[r], k, id());
      total -= double(lp[r * k + y]);
      ++count;
    }
    return single(BasicTensor<T>::scalar(static_cast<T>(count ? total / double(count) : 0.0)));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& lp = *c.inputs[0];
    const auto& labels = *c.inputs[1];
    const auto k = lp.shape().back();
    const auto ignore = param_int(c.params, "ignore_index");
    const double seed = g[0] ? double(g[0]->item()) : 0.0;
    std::int64_t count = 0;
    for (std::int64_t r = 0; r < lp.rows(); ++r)
      if (static_cast<std::int64_t>(std::llround(double(labels[r]))) != ignore) ++count;
    BasicTensor<T> dlp(lp.shape());
    (void)outs;
    if (count) {
      for (std::int64_t r = 0; r < lp.rows(); ++r) {
        if (static_cast<std::int64_t>(std::llround(double(labels[r]))) == ignore) continue;
        dlp[r * k + to_index(labels[r], k, id())] = static_cast<T>(-seed / double(count));
      }
    }
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dlp));
    r.inputs.emplace_back(std::nullopt);
    return r;
  }
};

/// Mean squared error over all elements.
class MseLoss : public KernelBase<MseLoss> {
 public:
  std::string_view id() const noexcept override { return "mse_loss"; }

  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override {
    if (in.size() != 2 || in[0] != in[1]) shape_error(id(), "prediction and target shapes differ");
    return {Shape{}};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& p = *c.inputs[0];
    const auto& t = *c.inputs[1];
    output_shapes(c.params, {p.shape(), t.shape()});
    double total = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double d = double(p[i]) - double(t[i]);
      total += d * d;
    }
    return single(BasicTensor<T>::scalar(static_cast<T>(p.numel() ? total / double(p.numel()) : 0.0)));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>&,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& p = *c.inputs[0];
    const auto& t = *c.inputs[1];
    const double seed = g[0] ? double(g[0]->item()) : 0.0;
    BasicTensor<T> dp(p.shape());
    BasicTensor<T> dt(t.shape());
    const double n = double(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double d = 2.0 * (double(p[i]) - double(t[i])) / n * seed;
      dp[i] = static_cast<T>(d);
      dt[i] = static_cast<T>(-d);
    }
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dp));
    r.inputs.emplace_back(std::move(dt));
    return r;
  }
};

/// Concatenation of two tensors along one axis. `along` is "Batch" (axis 0)
/// or "feature" (last axis).
class Concat : public KernelBase<Concat> {
 public:
  std::string_view id() const noexcept override { return "concat"; }

  static std::size_t axis_for(const ParamMap& p, std::size_t rank) {
    return param_string(p, "along") == "Batch" ? 0 : rank - 1;
  }

  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    if (in.size() != 2 || in[0].size() != in[1].size() || in[0].empty()) {
      shape_error(id(), "inputs must have equal rank >= 1");
    }
    const auto axis = axis_for(p, in[0].size());
    Shape out = in[0];
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (i != axis && in[0][i] != in[1][i]) {
        shape_error(id(), render_shape(in[0]) + " and " + render_shape(in[1]) + " differ off the concat axis");
      }
    }
    out[axis] += in[1][axis];
    return {out};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& a = *c.inputs[0];
    const auto& b = *c.inputs[1];
    BasicTensor<T> y(output_shapes(c.params, {a.shape(), b.shape()})[0]);
    const auto axis = axis_for(c.params, a.rank());
    auto [outer, inner] = split_at(a.shape(), axis);
    const auto la = a.dim(axis) * inner;
    const auto lb = b.dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(a.data().begin() + o * la, la, y.data().begin() + o * (la + lb));
      std::copy_n(b.data().begin() + o * lb, lb, y.data().begin() + o * (la + lb) + la);
    }
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& a = *c.inputs[0];
    const auto& b = *c.inputs[1];
    const auto dy = grad_or_zero(g[0], *outs[0]);
    const auto axis = axis_for(c.params, a.rank());
    auto [outer, inner] = split_at(a.shape(), axis);
    const auto la = a.dim(axis) * inner;
    const auto lb = b.dim(axis) * inner;
    BasicTensor<T> da(a.shape());
    BasicTensor<T> db(b.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(dy.data().begin() + o * (la + lb), la, da.data().begin() + o * la);
      std::copy_n(dy.data().begin() + o * (la + lb) + la, lb, db.data().begin() + o * lb);
    }
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(da));
    r.inputs.emplace_back(std::move(db));
    return r;
  }

 private:
  static std::pair<std::int64_t, std::int64_t> split_at(const Shape& s, std::size_t axis) {
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, inner};
  }
};

/// Axis permutation: output axis i is input axis perm[i].
class Transpose : public KernelBase<Transpose> {
 public:
  std::string_view id() const noexcept override { return "transpose"; }

  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    const auto& perm = param_as<std::vector<std::int64_t>>(p, "perm");
    if (in.size() != 1 || !is_permutation_of_rank(perm, in[0].size())) {
      shape_error(id(), "permutation does not match input rank");
    }
    Shape out;
    for (auto q : perm) out.push_back(in[0][q]);
    return {out};
  }

  template <class T>
  static BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::int64_t>& perm) {
    const auto rank = x.rank();
    Shape out_shape;
    for (auto q : perm) out_shape.push_back(x.dim(q));
    BasicTensor<T> y(out_shape);
    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    std::vector<std::int64_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < y.numel(); ++flat) {
      std::int64_t src = 0;
      for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[perm[i]];
      y[flat] = x[src];
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
    return y;
  }

  static std::vector<std::int64_t> inverse(const std::vector<std::int64_t>& perm) {
    std::vector<std::int64_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<std::int64_t>(i);
    return inv;
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    output_shapes(c.params, {c.inputs[0]->shape()});
    return single(permute(*c.inputs[0], param_as<std::vector<std::int64_t>>(c.params, "perm")));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& perm = param_as<std::vector<std::int64_t>>(c.params, "perm");
    KernelGrads<T> r;
    r.inputs.emplace_back(permute(grad_or_zero(g[0], *outs[0]), inverse(perm)));
    return r;
  }
};

/// Rows of an embedding table selected by integer ids.
class EmbeddingLookup : public KernelBase<EmbeddingLookup> {
 public:
  std::string_view id() const noexcept override { return "embedding_lookup"; }

  std::vector<WeightSpec> weights(const ParamMap& p) const override {
    auto v = param_int(p, "vocab_size");
    auto d = param_int(p, "dim");
    return {{"table", {v, d}, WeightInit::Glorot, v, d}};
  }

  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    Shape s = in.at(0);
    s.push_back(param_int(p, "dim"));
    return {s};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& ids = *c.inputs[0];
    const auto& table = *c.weights[0];
    const auto v = param_int(c.params, "vocab_size");
    const auto d = param_int(c.params, "dim");
    BasicTensor<T> y(output_shapes(c.params, {ids.shape()})[0]);
    for (std::size_t r = 0; r < ids.numel(); ++r) {
      auto row = to_index(ids[r], v, id());
      std::copy_n(table.data().begin() + row * d, d, y.data().begin() + static_cast<std::int64_t>(r) * d);
    }
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& ids = *c.inputs[0];
    const auto& table = *c.weights[0];
    const auto v = param_int(c.params, "vocab_size");
    const auto d = param_int(c.params, "dim");
    const auto dy = grad_or_zero(g[0], *outs[0]);
    std::vector<double> acc(table.numel(), 0.0);
    for (std::size_t r = 0; r < ids.numel(); ++r) {
      auto row = to_index(ids[r], v, id());
      for (std::int64_t j = 0; j < d; ++j) acc[row * d + j] += double(dy[static_cast<std::int64_t>(r) * d + j]);
    }
    BasicTensor<T> dt(table.shape());
    for (std::size_t i = 0; i < acc.size(); ++i) dt[i] = static_cast<T>(acc[i]);
    KernelGrads<T> r;
    r.inputs.emplace_back(std::nullopt);
    r.weights.push_back(std::move(dt));
    return r;
  }
};

/// Teacher-forced tanh recurrence over [B, T, I] inputs:
///   h_t = tanh(W_x x_t + W_h h_{t-1} + F[y_{t-1}] + b),  h_{-1} = 0,
/// where y are the target ids and the feedback term is absent at t = 0.
class RnnCell : public KernelBase<RnnCell> {
 public:
  std::string_view id() const noexcept override { return "rnn"; }

  std::vector<WeightSpec> weights(const ParamMap& p) const override {
    auto i = param_int(p, "in_features");
    auto h = param_int(p, "hidden");
    auto v = param_int(p, "vocab_size");
    return {{"input_weight", {h, i}, WeightInit::Glorot, i, h},
            {"recurrent_weight", {h, h}, WeightInit::Glorot, h, h},
            {"feedback_weight", {v, h}, WeightInit::Glorot, v, h},
            {"bias", {h}, WeightInit::Zeros, i, h}};
  }

  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    if (in.size() != 2 || in[0].size() != 3 || in[0][2] != param_int(p, "in_features")) {
      shape_error(id(), "expected inputs [B, T, in_features]");
    }
    if (in[1] != Shape{in[0][0], in[0][1]}) shape_error(id(), "targets must be [B, T]");
    return {Shape{in[0][0], in[0][1], param_int(p, "hidden")}};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& x = *c.inputs[0];
    const auto& y = *c.inputs[1];
    const auto& wx = *c.weights[0];
    const auto& wh = *c.weights[1];
    const auto& fb = *c.weights[2];
    const auto& bias = *c.weights[3];
    BasicTensor<T> h(output_shapes(c.params, {x.shape(), y.shape()})[0]);
    const auto B = x.dim(0), S = x.dim(1), I = x.dim(2), H = h.dim(2);
    const auto V = param_int(c.params, "vocab_size");
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t t = 0; t < S; ++t) {
        const T* xt = &x[(b * S + t) * I];
        const T* hp = t > 0 ? &h[(b * S + t - 1) * H] : nullptr;
        const std::int64_t prev = t > 0 ? to_index(y[b * S + t - 1], V, id()) : -1;
        for (std::int64_t k = 0; k < H; ++k) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < I; ++i) acc += double(xt[i]) * double(wx[k * I + i]);
          if (hp) {
            double rec = 0.0;
            for (std::int64_t j = 0; j < H; ++j) rec += double(hp[j]) * double(wh[k * H + j]);
            acc += rec;
          }
          if (prev >= 0) acc += double(fb[prev * H + k]);
          h[(b * S + t) * H + k] = static_cast<T>(std::tanh(acc + double(bias[k])));
        }
      }
    }
    return single(std::move(h));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    const auto& x = *c.inputs[0];
    const auto& y = *c.inputs[1];
    const auto& wx = *c.weights[0];
    const auto& wh = *c.weights[1];
    const auto& h = *outs[0];
    const auto dy = grad_or_zero(g[0], h);
    const auto B = x.dim(0), S = x.dim(1), I = x.dim(2), H = h.dim(2);
    const auto V = param_int(c.params, "vocab_size");
    std::vector<double> dwx(H * I, 0.0), dwh(H * H, 0.0), dfb(V * H, 0.0), db(H, 0.0);
    BasicTensor<T> dx(x.shape());
    std::vector<double> carry(H), da(H);
    for (std::int64_t b = 0; b < B; ++b) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::int64_t t = S; t-- > 0;) {
        const auto base = (b * S + t) * H;
        for (std::int64_t k = 0; k < H; ++k) {
          const double hv = double(h[base + k]);
          da[k] = (double(dy[base + k]) + carry[k]) * (1.0 - hv * hv);
        }
        const T* xt = &x[(b * S + t) * I];
        for (std::int64_t k = 0; k < H; ++k) {
          db[k] += da[k];
          for (std::int64_t i = 0; i < I; ++i) dwx[k * I + i] += da[k] * double(xt[i]);
        }
        for (std::int64_t i = 0; i < I; ++i) {
          double acc = 0.0;
          for (std::int64_t k = 0; k < H; ++k) acc += double(wx[k * I + i]) * da[k];
          dx[(b * S + t) * I + i] = static_cast<T>(acc);
        }
        if (t > 0) {
          const auto prev = to_index(y[b * S + t - 1], V, id());
          const auto pbase = (b * S + t - 1) * H;
          for (std::int64_t k = 0; k < H; ++k) {
            dfb[prev * H + k] += da[k];
            for (std::int64_t j = 0; j < H; ++j) dwh[k * H + j] += da[k] * double(h[pbase + j]);
          }
          for (std::int64_t j = 0; j < H; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < H; ++k) acc += double(wh[k * H + j]) * da[k];
            carry[j] = acc;
          }
        }
      }
    }
    auto to_tensor = [](const std::vector<double>& v, Shape s) {
      BasicTensor<T> out(std::move(s));
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
      return out;
    };
    KernelGrads<T> r;
    r.inputs.emplace_back(std::move(dx));
    r.inputs.emplace_back(std::nullopt);
    r.weights.push_back(to_tensor(dwx, {H, I}));
    r.weights.push_back(to_tensor(dwh, {H, H}));
    r.weights.push_back(to_tensor(dfb, {V, H}));
    r.weights.push_back(to_tensor(db, {H}));
    return r;
  }
};

class Add : public KernelBase<Add> {
 public:
  std::string_view id() const noexcept override { return "add"; }
  std::vector<Shape> output_shapes(const ParamMap&, const std::vector<Shape>& in) const override {
    if (in.size() != 2 || shape_numel(in[0]) != shape_numel(in[1])) shape_error(id(), "operands differ in size");
    return {in[0]};
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    output_shapes(c.params, {c.inputs[0]->shape(), c.inputs[1]->shape()});
    BasicTensor<T> y = *c.inputs[0];
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = y[i] + (*c.inputs[1])[i];
    return single(std::move(y));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>& c, const std::vector<const BasicTensor<T>*>& outs,
                      const std::vector<const BasicTensor<T>*>& g) const {
    auto dy = grad_or_zero(g[0], *outs[0]);
    KernelGrads<T> r;
    r.inputs.emplace_back(dy);
    r.inputs.emplace_back(dy.reshaped(c.inputs[1]->shape()));
    return r;
  }
};

/// Fraction of rows whose arg-max class equals the label. Not differentiable.
class Accuracy : public KernelBase<Accuracy> {
 public:
  std::string_view id() const noexcept override { return "accuracy"; }
  bool differentiable() const noexcept override { return false; }
  std::vector<Shape> output_shapes(const ParamMap& p, const std::vector<Shape>& in) const override {
    return NllLoss{}.output_shapes(p, in);
  }

  template <class T>
  std::vector<BasicTensor<T>> run(const KernelCall<T>& c) const {
    const auto& lp = *c.inputs[0];
    const auto& labels = *c.inputs[1];
    output_shapes(c.params, {lp.shape(), labels.shape()});
    const auto k = lp.shape().back();
    const auto ignore = param_int(c.params, "ignore_index");
    std::int64_t hits = 0, count = 0;
    for (std::int64_t r = 0; r < lp.rows(); ++r) {
      if (static_cast<std::int64_t>(std::llround(double(labels[r]))) == ignore) continue;
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j)
        if (lp[r * k + j] > lp[r * k + best]) best = j;
      hits += best == to_index(labels[r], k, id());
      ++count;
    }
    return single(BasicTensor<T>::scalar(static_cast<T>(count ? double(hits) / double(count) : 0.0)));
  }

  template <class T>
  KernelGrads<T> grad(const KernelCall<T>&, const std::vector<const BasicTensor<T>*>&,
                      const std::vector<const BasicTensor<T>*>&) const {
    KernelGrads<T> r;
    r.inputs.resize(2);
    return r;
  }
};

}  // namespace kernels

/// The built-in primitive set, keyed by kernel id.
inline const std::map<std::string, std::unique_ptr<Kernel>, std::less<>>& kernel_set() {
  static const auto set = [] {
    std::map<std::string, std::unique_ptr<Kernel>, std::less<>> m;
    auto add = [&m](std::unique_ptr<Kernel> k) {
      std::string id(k->id());
      m.emplace(std::move(id), std::move(k));
    };
    add(std::make_unique<kernels::Linear>());
    add(std::make_unique<kernels::Relu>());
    add(std::make_unique<kernels::Tanh>());
    add(std::make_unique<kernels::LogSoftmax>());
    add(std::make_unique<kernels::NllLoss>());
    add(std::make_unique<kernels::MseLoss>());
    add(std::make_unique<kernels::Concat>());
    add(std::make_unique<kernels::Transpose>());
    add(std::make_unique<kernels::EmbeddingLookup>());
    add(std::make_unique<kernels::RnnCell>());
    add(std::make_unique<kernels::Add>());
    add(std::make_unique<kernels::Accuracy>());
    return m;
  }();
  return set;
}

inline const Kernel* find_kernel(std::string_view id) {
  const auto& set = kernel_set();
  auto it = set.find(id);
  return it == set.end() ? nullptr : it->second.get();
}

}  // namespace nmod
