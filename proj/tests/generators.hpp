#pragma once

// Random generators and brute-force oracles shared by the property tests and
// the acceptance binary.

#include <numeric>
#include <random>

#include "test_util.hpp"

namespace testgen {

using namespace nmod;

inline std::shared_ptr<Registry> std_registry() {
  static auto r = make_std_registry();
  return r;
}

using Lead = std::vector<std::string>;

inline ParamMap linear(std::int64_t in, std::int64_t out, std::string in_tag = "Channel",
                       std::string out_tag = "Channel") {
  return {{"in_features", in}, {"out_features", out}, {"in_tag", in_tag}, {"out_tag", out_tag}};
}

inline ParamMap csv(std::int64_t features, std::string label = "", std::int64_t classes = 2,
                    std::vector<std::string> targets = {}) {
  std::vector<std::string> cols;
  for (std::int64_t i = 0; i < features; ++i) cols.push_back("f" + std::to_string(i));
  return {{"path", std::string("unused.csv")}, {"features", cols}, {"label", label}, {"num_classes", classes},
          {"targets", targets}};
}

inline Tensor random_tensor(Shape shape, std::mt19937& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline Tensor labels(std::int64_t rows, std::int64_t classes, std::mt19937& rng) {
  Tensor t(Shape{rows, 1});
  for (auto& v : t.data()) v = static_cast<float>(rng() % classes);
  return t;
}

// Parent-chain walk used as the independent subtag oracle.
inline bool walk_is_subtag(const TagHierarchy& h, const std::string& a, const std::string& b) {
  std::optional<std::string> cur = a;
  while (cur) {
    if (*cur == b) return true;
    cur = h.at(*cur).parent;
  }
  return false;
}

// Brute-force reference for the comparison precedence: permutations are
// enumerated directly instead of matched.
inline Comparison oracle_compare(const TagHierarchy& h, const NeuralType& p, const NeuralType& c) {
  if (c.is_root()) return Comparison::Same;
  if (p.is_root()) return Comparison::Greater;
  if (p.is_scalar() != c.is_scalar()) return Comparison::Incompatible;
  if (p.is_scalar()) {
    if (p.element_tag() == c.element_tag()) return Comparison::Same;
    if (walk_is_subtag(h, p.element_tag(), c.element_tag())) return Comparison::Less;
    if (walk_is_subtag(h, c.element_tag(), p.element_tag())) return Comparison::Greater;
    return Comparison::Incompatible;
  }
  const auto n = p.rank();
  if (n != c.rank()) return Comparison::Incompatible;
  auto dims_ok = [](const AxisType& a, const AxisType& b) { return !a.dim || !b.dim || *a.dim == *b.dim; };
  bool unrelated = false, sub = false, super = false, dim_bad = false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = p.axes()[i];
    const auto& b = c.axes()[i];
    bool ab = walk_is_subtag(h, a.tag, b.tag), ba = walk_is_subtag(h, b.tag, a.tag);
    if (!ab && !ba) unrelated = true;
    if (ab && !ba) sub = true;
    if (ba && !ab) super = true;
    if (!dims_ok(a, b)) dim_bad = true;
  }
  if (unrelated) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      bool ok = true;
      for (std::size_t j = 0; j < n && ok; ++j) {
        const auto& pa = p.axes()[perm[j]];
        const auto& ca = c.axes()[j];
        ok = pa.tag == ca.tag && dims_ok(pa, ca);
      }
      if (ok) return Comparison::TransposeSame;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return Comparison::Incompatible;
  }
  if (dim_bad) return Comparison::DimIncompatible;
  if (super) return Comparison::Greater;
  if (sub) return Comparison::Less;
  return Comparison::Same;
}

struct RandomWorld {
  TagHierarchy h;
  std::vector<std::string> names;

  explicit RandomWorld(std::mt19937_64& rng) {
    std::vector<std::string> pool(TagHierarchy::kBuiltinTags.begin(), TagHierarchy::kBuiltinTags.end());
    int extra = std::uniform_int_distribution<int>(0, 8)(rng);
    for (int i = 0; i < extra; ++i) {
      auto parent = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      auto name = "U" + std::to_string(i);
      h.define_tag(name, parent);
      pool.push_back(name);
    }
    h.freeze();
    names = pool;
  }

  std::string tag(std::mt19937_64& rng) const {
    // bias toward a few tags so relations and collisions actually occur
    std::size_t n = std::min<std::size_t>(names.size(), 5 + rng() % names.size());
    return names[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)];
  }

  AxisType axis(std::mt19937_64& rng, bool with_dims) const {
    AxisType a{tag(rng), std::nullopt};
    if (with_dims && rng() % 2) a.dim = 1 + static_cast<std::int64_t>(rng() % 3);
    return a;
  }

  NeuralType type(std::mt19937_64& rng, bool with_dims) const {
    auto roll = rng() % 20;
    if (roll == 0) return NeuralType::root();
    if (roll == 1) return NeuralType::scalar(tag(rng));
    std::size_t rank = 1 + rng() % 4;
    std::vector<AxisType> axes;
    for (std::size_t i = 0; i < rank; ++i) axes.push_back(axis(rng, with_dims));
    return NeuralType::tensor(axes);
  }

  // A relative of `t`: permuted, with tags swapped for parents/children,
  // or unchanged.
  NeuralType relative(std::mt19937_64& rng, const NeuralType& t, bool with_dims) const {
    if (!t.is_tensor()) return type(rng, with_dims);
    auto axes = t.axes();
    switch (rng() % 4) {
      case 0: std::shuffle(axes.begin(), axes.end(), rng); break;
      case 1:
        for (auto& a : axes)
          if (rng() % 2 && h.at(a.tag).parent) a.tag = *h.at(a.tag).parent;
        break;
      case 2:
        for (auto& a : axes) {
          if (rng() % 2) continue;
          for (const auto& cand : h.tags())
            if (cand.parent == a.tag) {
              a.tag = cand.name;
              break;
            }
        }
        break;
      default: break;
    }
    if (with_dims)
      for (auto& a : axes)
        if (rng() % 4 == 0) a.dim = 1 + static_cast<std::int64_t>(rng() % 3);
    return NeuralType::tensor(axes);
  }
};

// A random small differentiable graph and a matching batch.
struct RandomCase {
  Graph graph;
  Batch batch;
  std::string shape;
  bool valid;
};

inline RandomCase random_case(std::uint32_t seed) {
  std::mt19937 rng(seed);
  auto pick = [&](std::int64_t lo, std::int64_t hi) { return lo + static_cast<std::int64_t>(rng() % (hi - lo + 1)); };
  Graph g(std_registry(), seed);
  Batch batch;
  std::string desc;
  const auto rows = pick(2, 6);
  const int family = static_cast<int>(rng() % 4);
  if (family == 3) {
    // token sequences through the encoder/decoder composites
    const auto vocab = pick(3, 6), len = pick(2, 4), hidden = pick(2, 5);
    g.add("data", "SequenceDataLayer", {{"path", std::string("unused")}, {"vocab_size", vocab}, {"max_len", len}});
    g.add("enc", "LinearEncoder", {{"vocab_size", vocab}, {"embed_dim", pick(2, 4)}, {"hidden", hidden},
                                   {"depth", pick(1, 2)}});
    g.connect("data.tokens", "enc.tokens");
    if (rng() % 2) {
      g.add("dec", "RnnDecoder", {{"in_features", hidden}, {"hidden", pick(2, 4)}, {"vocab_size", vocab}});
      g.connect("enc.encoded", "dec.encoder_outputs");
      g.connect("data.labels", "dec.targets");
      desc = "seq-rnn";
    } else {
      g.add("dec", "MlpDecoder", {{"in_features", hidden}, {"hidden", pick(2, 4)}, {"num_classes", vocab},
                                  {"lead", Lead{"Batch", "Time"}}, {"in_tag", std::string("Encoded")}});
      g.connect("enc.encoded", "dec.x");
      desc = "seq-mlp";
    }
    g.add("loss", "NllLoss", {{"classes", vocab}, {"lead", Lead{"Batch", "Time"}},
                              {"labels_type", std::string("[Batch, Time]")}, {"ignore_index", std::int64_t{0}}});
    g.connect("dec.log_probs", "loss.log_probs");
    g.connect("data.labels", "loss.labels");
    g.add_sink("loss.loss");
    Tensor tok(Shape{rows, len}), lab(Shape{rows, len});
    for (std::size_t i = 0; i < tok.numel(); ++i) {
      tok[i] = static_cast<float>(1 + rng() % (vocab - 1));
      lab[i] = static_cast<float>(rng() % vocab);
    }
    batch["data.tokens"] = tok;
    batch["data.labels"] = lab;
  } else {
    const auto f = pick(1, 4);
    const bool classify = family != 0;
    const auto k = pick(2, 4);
    const auto t = pick(1, 3);
    std::vector<std::string> targets;
    for (std::int64_t i = 0; i < t; ++i) targets.push_back("t" + std::to_string(i));
    g.add("data", "CsvDataLayer", classify ? csv(f, "label", k) : csv(f, "", 2, targets));
    std::string cur = "data.features";
    auto width = f;
    const int layers = static_cast<int>(pick(1, 3));
    for (int l = 0; l < layers; ++l) {
      const auto h = pick(2, 6);
      const auto id = std::to_string(l);
      const int kind = static_cast<int>(rng() % 3);
      if (kind == 2) {
        // two branches joined by Add, or by Concat
        g.add("pa" + id, "Linear", linear(width, h));
        g.add("pb" + id, "Linear", linear(width, h));
        g.connect(cur, "pa" + id + ".x");
        g.connect(cur, "pb" + id + ".x");
        if (rng() % 2) {
          g.add("join" + id, "Add", {{"features", h}});
          g.connect("pa" + id + ".y", "join" + id + ".a");
          g.connect("pb" + id + ".y", "join" + id + ".b");
          width = h;
          desc += "+add";
        } else {
          g.add("join" + id, "Concat", {{"along", std::string("Channel")}, {"left_dim", h}, {"right_dim", h}});
          g.connect("pa" + id + ".y", "join" + id + ".left");
          g.connect("pb" + id + ".y", "join" + id + ".right");
          width = 2 * h;
          desc += "+cat";
        }
        cur = "join" + id + ".y";
      } else {
        g.add("fc" + id, "Linear", linear(width, h));
        g.connect(cur, "fc" + id + ".x");
        width = h;
        cur = "fc" + id + ".y";
        desc += "+fc";
      }
      const char* act = rng() % 2 ? "ReLU" : "Tanh";
      g.add("act" + id, act, {{"features", width}});
      g.connect(cur, "act" + id + ".x");
      cur = "act" + id + ".y";
      desc += std::string("+") + act;
    }
    g.add("head", "Linear", linear(width, classify ? k : t));
    g.connect(cur, "head.x");
    if (classify) {
      g.add("lsm", "LogSoftmax", {{"features", k}});
      g.add("loss", "NllLoss", {{"classes", k}});
      g.connect("head.y", "lsm.x");
      g.connect("lsm.log_probs", "loss.log_probs");
      g.connect("data.labels", "loss.labels");
      batch["data.labels"] = labels(rows, k, rng);
    } else {
      g.add("loss", "MseLoss", {{"features", t}});
      g.connect("head.y", "loss.prediction");
      g.connect("data.targets", "loss.target");
      batch["data.targets"] = random_tensor({rows, t}, rng);
    }
    g.add_sink("loss.loss");
    batch["data.features"] = random_tensor({rows, f}, rng, -2.0f, 2.0f);
    desc = (classify ? "cls" : "reg") + desc;
  }
  const bool valid = g.validate().empty();
  return {std::move(g), std::move(batch), desc, valid};
}


}  // namespace testgen
