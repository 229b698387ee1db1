#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/tensor.hpp"

namespace nmod {

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" or "adam"
  double lr = 0.01;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void check() const {
    if (kind != "sgd" && kind != "adam") fail(Errc::ConstraintViolation, "optimizer must be sgd or adam");
    if (!(lr > 0.0)) fail(Errc::ConstraintViolation, "lr > 0");
    if (momentum < 0.0 || momentum >= 1.0) fail(Errc::ConstraintViolation, "momentum in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail(Errc::ConstraintViolation, "betas in [0, 1)");
    if (!(eps > 0.0)) fail(Errc::ConstraintViolation, "eps > 0");
  }
};

/// Constant-rate sgd (with optional heavy-ball momentum) or Adam with bias
/// correction. State is kept in f32 so a checkpoint captures it exactly.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<std::string> keys, const std::vector<Tensor*>& weights)
      : cfg_(std::move(cfg)), keys_(std::move(keys)) {
    cfg_.check();
    for (const auto* w : weights) {
      if (cfg_.kind == "adam") {
        m_.emplace_back(w->shape());
        v_.emplace_back(w->shape());
      } else if (cfg_.momentum > 0.0) {
        m_.emplace_back(w->shape());
      }
    }
  }

  const OptimizerConfig& config() const noexcept { return cfg_; }

  /// Applies one update; `t` is the 1-based update count (Adam's bias
  /// correction exponent).
  void step(const std::vector<Tensor*>& weights, const std::vector<std::vector<double>>& grads, std::uint64_t t) {
    const bool adam = cfg_.kind == "adam";
    const double c1 = adam ? 1.0 - std::pow(cfg_.beta1, static_cast<double>(t)) : 1.0;
    const double c2 = adam ? 1.0 - std::pow(cfg_.beta2, static_cast<double>(t)) : 1.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      auto& w = *weights[i];
      const auto& g = grads[i];
      for (std::size_t k = 0; k < w.numel(); ++k) {
        double update;
        if (adam) {
          const double m = cfg_.beta1 * double(m_[i][k]) + (1.0 - cfg_.beta1) * g[k];
          const double v = cfg_.beta2 * double(v_[i][k]) + (1.0 - cfg_.beta2) * g[k] * g[k];
          m_[i][k] = static_cast<float>(m);
          v_[i][k] = static_cast<float>(v);
          update = (double(m_[i][k]) / c1) / (std::sqrt(double(v_[i][k]) / c2) + cfg_.eps);
        } else if (cfg_.momentum > 0.0) {
          m_[i][k] = static_cast<float>(cfg_.momentum * double(m_[i][k]) + g[k]);
          update = double(m_[i][k]);
        } else {
          update = g[k];
        }
        w[k] = static_cast<float>(double(w[k]) - cfg_.lr * update);
      }
    }
  }

  /// Keys "adam.m/<weight>", "adam.v/<weight>" or "sgd.velocity/<weight>".
  std::map<std::string, Tensor> state() const {
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      if (cfg_.kind == "adam") {
        out.emplace("adam.m/" + keys_[i], m_[i]);
        out.emplace("adam.v/" + keys_[i], v_[i]);
      } else {
        out.emplace("sgd.velocity/" + keys_[i], m_[i]);
      }
    }
    return out;
  }

  void load_state(const std::map<std::string, Tensor>& state) {
    auto expected = this->state();
    if (expected.size() != state.size()) {
      fail(Errc::CheckpointMismatch, "optimizer state has " + std::to_string(state.size()) + " tensors, expected " +
                                         std::to_string(expected.size()));
    }
    auto take = [&](const std::string& key, Tensor& dst) {
      auto it = state.find(key);
      if (it == state.end()) fail(Errc::CheckpointMismatch, "optimizer state lacks '" + key + "'");
      if (it->second.shape() != dst.shape()) fail(Errc::CheckpointMismatch, "optimizer state '" + key + "' has the wrong shape");
      dst = it->second;
    };
    for (std::size_t i = 0; i < m_.size(); ++i) {
      if (cfg_.kind == "adam") {
        take("adam.m/" + keys_[i], m_[i]);
        take("adam.v/" + keys_[i], v_[i]);
      } else {
        take("sgd.velocity/" + keys_[i], m_[i]);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::string> keys_;
  std::vector<Tensor> m_;  // adam first moment, or sgd velocity
  std::vector<Tensor> v_;  // adam second moment
};

}  // namespace nmod
