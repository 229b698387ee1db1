#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmod/error.hpp"

namespace nmod {

/// `[A-Za-z][A-Za-z0-9_]*`
inline bool is_tag_identifier(std::string_view s) noexcept {
  if (s.empty() || !std::isalpha(static_cast<unsigned char>(s[0]))) return false;
  return std::all_of(s.begin() + 1, s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  });
}

/// A semantic axis tag. Only the built-in roots have no parent.
struct Tag {
  std::string name;
  std::optional<std::string> parent;

  bool operator==(const Tag&) const = default;
};

/// Registry of semantic tags related by single-inheritance is-a edges.
///
/// Mutable until frozen; afterwards read-only and safe to share between
/// threads. Type expressions can only be parsed against a frozen hierarchy.
class TagHierarchy {
 public:
  static constexpr std::array<std::string_view, 11> kBuiltinTags = {
      "Batch",    "Time",  "Channel", "Height", "Width", "Embedding",
      "LogProbs", "Label", "Length",  "Loss",   "Metric"};

  TagHierarchy() {
    for (auto name : kBuiltinTags) insert(Tag{std::string(name), std::nullopt});
  }

  const Tag& define_tag(const std::string& name, const std::string& parent) {
    if (frozen_) fail(Errc::HierarchyFrozen, "cannot define '" + name + "': hierarchy is frozen");
    if (!is_tag_identifier(name)) fail(Errc::SyntaxError, "invalid tag name '" + name + "'");
    if (contains(name)) fail(Errc::DuplicateTag, "tag '" + name + "' is already defined");
    if (!contains(parent)) {
      fail(Errc::UnknownParent, "parent tag '" + parent + "' of '" + name + "' is not defined");
    }
    return insert(Tag{name, parent});
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  const Tag& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) fail(Errc::UnknownTag, "unknown tag '" + std::string(name) + "'");
    return tags_[it->second];
  }

  /// True iff `a == b` or `b` is an ancestor of `a`.
  bool is_subtag(std::string_view a, std::string_view b) const {
    const Tag* t = &at(a);
    at(b);
    // parent chains are acyclic: every parent existed before its child
    while (true) {
      if (t->name == b) return true;
      if (!t->parent) return false;
      t = &at(*t->parent);
    }
  }

  /// Number of is-a steps from `name` to its root.
  std::size_t depth(std::string_view name) const {
    std::size_t d = 0;
    for (const Tag* t = &at(name); t->parent; t = &at(*t->parent)) ++d;
    return d;
  }

  void freeze() noexcept { frozen_ = true; }
  bool frozen() const noexcept { return frozen_; }

  /// Tags in registration order; built-ins first.
  const std::vector<Tag>& tags() const noexcept { return tags_; }

  static bool is_builtin(std::string_view name) {
    return std::find(kBuiltinTags.begin(), kBuiltinTags.end(), name) != kBuiltinTags.end();
  }

  /// Adds the tags of a hierarchy document `{"tags": [{"name", "parent"}]}`.
  /// Parents may refer to tags declared earlier in the same document.
  void load_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("tags") || !doc["tags"].is_array()) {
      fail(Errc::SchemaError, "tag hierarchy: expected {\"tags\": [...]}");
    }
    for (const auto& [key, _] : doc.items()) {
      if (key != "tags") fail(Errc::SchemaError, "tag hierarchy: unknown key '" + key + "'");
    }
    std::size_t i = 0;
    for (const auto& entry : doc["tags"]) {
      std::string where = "tags[" + std::to_string(i++) + "]";
      if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string() ||
          !entry.contains("parent") || !entry["parent"].is_string()) {
        fail(Errc::SchemaError, where + ": expected {\"name\": str, \"parent\": str}");
      }
      define_tag(entry["name"].get<std::string>(), entry["parent"].get<std::string>());
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoError, "cannot open tag hierarchy file '" + path + "'");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      fail(Errc::SchemaError, path + ": " + e.what());
    }
    load_json(doc);
  }

  nlohmann::json to_json() const {
    nlohmann::json tags = nlohmann::json::array();
    for (const auto& t : tags_) {
      if (t.parent) tags.push_back({{"name", t.name}, {"parent", *t.parent}});
    }
    return {{"tags", tags}};
  }

 private:
  const Tag& insert(Tag tag) {
    index_.emplace(tag.name, tags_.size());
    tags_.push_back(std::move(tag));
    return tags_.back();
  }

  std::vector<Tag> tags_;
  std::unordered_map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

/// Semantic tag plus optional fixed dimension. A missing dim is dynamic.
struct AxisType {
  std::string tag;
  std::optional<std::int64_t> dim;

  bool operator==(const AxisType&) const = default;
};

enum class TypeKind { Tensor, Root, NonTensor };

class NeuralType {
 public:
  /// Root: accepts any value when used as a consumer type.
  NeuralType() = default;

  static NeuralType root() { return NeuralType{}; }

  static NeuralType scalar(std::string element_tag) {
    NeuralType t;
    t.kind_ = TypeKind::NonTensor;
    t.element_tag_ = std::move(element_tag);
    return t;
  }

  static NeuralType tensor(std::vector<AxisType> axes) {
    if (axes.empty()) fail(Errc::InvalidDim, "a tensor type needs at least one axis; use root");
    for (const auto& a : axes) {
      if (a.dim && *a.dim < 1) {
        fail(Errc::InvalidDim, "axis " + a.tag + " has dim " + std::to_string(*a.dim) + " < 1");
      }
    }
    NeuralType t;
    t.kind_ = TypeKind::Tensor;
    t.axes_ = std::move(axes);
    return t;
  }

  TypeKind kind() const noexcept { return kind_; }
  bool is_root() const noexcept { return kind_ == TypeKind::Root; }
  bool is_tensor() const noexcept { return kind_ == TypeKind::Tensor; }
  bool is_scalar() const noexcept { return kind_ == TypeKind::NonTensor; }
  const std::vector<AxisType>& axes() const noexcept { return axes_; }
  std::size_t rank() const noexcept { return axes_.size(); }
  const std::string& element_tag() const noexcept { return element_tag_; }

  /// Index of the first axis carrying exactly `tag`.
  std::optional<std::size_t> axis_of(std::string_view tag) const {
    for (std::size_t i = 0; i < axes_.size(); ++i)
      if (axes_[i].tag == tag) return i;
    return std::nullopt;
  }

  /// Axis i of the result is axis perm[i] of this type.
  NeuralType permuted(const std::vector<std::int64_t>& perm) const;

  bool operator==(const NeuralType&) const = default;

 private:
  TypeKind kind_ = TypeKind::Root;
  std::vector<AxisType> axes_;
  std::string element_tag_;
};

inline bool is_permutation_of_rank(const std::vector<std::int64_t>& perm, std::size_t rank) {
  if (perm.size() != rank) return false;
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= rank || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

inline NeuralType NeuralType::permuted(const std::vector<std::int64_t>& perm) const {
  if (!is_tensor() || !is_permutation_of_rank(perm, rank())) {
    fail(Errc::ConstraintViolation, "permutation does not match the type's rank");
  }
  std::vector<AxisType> out;
  out.reserve(perm.size());
  for (auto p : perm) out.push_back(axes_[p]);
  return tensor(std::move(out));
}

inline std::string render_type(const NeuralType& t) {
  switch (t.kind()) {
    case TypeKind::Root: return "root";
    case TypeKind::NonTensor: return "scalar(" + t.element_tag() + ")";
    case TypeKind::Tensor: break;
  }
  std::string out = "[";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i) out += ", ";
    out += t.axes()[i].tag;
    if (t.axes()[i].dim) out += ":" + std::to_string(*t.axes()[i].dim);
  }
  return out + "]";
}

enum class Comparison { Same, Less, Greater, DimIncompatible, TransposeSame, Incompatible };

constexpr std::string_view comparison_name(Comparison c) noexcept {
  switch (c) {
    case Comparison::Same: return "SAME";
    case Comparison::Less: return "LESS";
    case Comparison::Greater: return "GREATER";
    case Comparison::DimIncompatible: return "DIM_INCOMPATIBLE";
    case Comparison::TransposeSame: return "TRANSPOSE_SAME";
    case Comparison::Incompatible: return "INCOMPATIBLE";
  }
  return "?";
}

/// Only SAME and LESS permit a connection.
constexpr bool accepts(Comparison c) noexcept {
  return c == Comparison::Same || c == Comparison::Less;
}

namespace detail {

inline void require_tags(const TagHierarchy& h, const NeuralType& t) {
  if (t.is_scalar()) h.at(t.element_tag());
  for (const auto& a : t.axes()) h.at(a.tag);
}

inline bool dims_compatible(const AxisType& a, const AxisType& b) noexcept {
  return !a.dim || !b.dim || *a.dim == *b.dim;
}

// Kuhn's augmenting-path matching of producer axes onto consumer axes.
inline bool augment(std::size_t p, const std::vector<std::vector<bool>>& edge,
                    std::vector<int>& owner, std::vector<bool>& visited) {
  for (std::size_t c = 0; c < edge[p].size(); ++c) {
    if (!edge[p][c] || visited[c]) continue;
    visited[c] = true;
    if (owner[c] < 0 || augment(static_cast<std::size_t>(owner[c]), edge, owner, visited)) {
      owner[c] = static_cast<int>(p);
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Finds `perm` with consumer axis j = producer axis perm[j], matching tags
/// exactly and dims compatibly. Nullopt if the types are not equal up to
/// axis order.
inline std::optional<std::vector<std::int64_t>> find_transpose(const NeuralType& producer,
                                                               const NeuralType& consumer) {
  if (!producer.is_tensor() || !consumer.is_tensor() || producer.rank() != consumer.rank()) {
    return std::nullopt;
  }
  const std::size_t n = producer.rank();
  std::vector<std::vector<bool>> edge(n, std::vector<bool>(n, false));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t c = 0; c < n; ++c) {
      const auto& pa = producer.axes()[p];
      const auto& ca = consumer.axes()[c];
      edge[p][c] = pa.tag == ca.tag && detail::dims_compatible(pa, ca);
    }
  }
  std::vector<int> owner(n, -1);
  for (std::size_t p = 0; p < n; ++p) {
    std::vector<bool> visited(n, false);
    if (!detail::augment(p, edge, owner, visited)) return std::nullopt;
  }
  std::vector<std::int64_t> perm(owner.begin(), owner.end());
  return perm;
}

/// Compares the type flowing out of a producer port against the type a
/// consumer port expects.
///
/// Precedence: a root consumer accepts everything; a root producer feeding a
/// typed consumer is GREATER; scalars only relate to scalars (by element tag);
/// differing ranks are INCOMPATIBLE. If any axis pair has unrelated tags the
/// types can at best be TRANSPOSE_SAME (exact tags, compatible dims under
/// some permutation). Otherwise fixed-dim mismatches dominate
/// (DIM_INCOMPATIBLE), then the tag relations decide SAME / LESS / GREATER.
inline Comparison compare_types(const TagHierarchy& h, const NeuralType& producer,
                                const NeuralType& consumer) {
  detail::require_tags(h, producer);
  detail::require_tags(h, consumer);

  if (consumer.is_root()) return Comparison::Same;
  if (producer.is_root()) return Comparison::Greater;

  if (producer.is_scalar() || consumer.is_scalar()) {
    if (producer.kind() != consumer.kind()) return Comparison::Incompatible;
    const auto& a = producer.element_tag();
    const auto& b = consumer.element_tag();
    if (a == b) return Comparison::Same;
    if (h.is_subtag(a, b)) return Comparison::Less;
    if (h.is_subtag(b, a)) return Comparison::Greater;
    return Comparison::Incompatible;
  }

  if (producer.rank() != consumer.rank()) return Comparison::Incompatible;

  enum class Rel { Equal, ProducerSub, ConsumerSub, Unrelated };
  std::vector<Rel> rel;
  rel.reserve(producer.rank());
  for (std::size_t i = 0; i < producer.rank(); ++i) {
    const auto& a = producer.axes()[i].tag;
    const auto& b = consumer.axes()[i].tag;
    if (a == b) rel.push_back(Rel::Equal);
    else if (h.is_subtag(a, b)) rel.push_back(Rel::ProducerSub);
    else if (h.is_subtag(b, a)) rel.push_back(Rel::ConsumerSub);
    else rel.push_back(Rel::Unrelated);
  }

  if (std::find(rel.begin(), rel.end(), Rel::Unrelated) != rel.end()) {
    return find_transpose(producer, consumer) ? Comparison::TransposeSame
                                              : Comparison::Incompatible;
  }
  for (std::size_t i = 0; i < producer.rank(); ++i) {
    if (!detail::dims_compatible(producer.axes()[i], consumer.axes()[i])) {
      return Comparison::DimIncompatible;
    }
  }
  if (std::find(rel.begin(), rel.end(), Rel::ConsumerSub) != rel.end()) return Comparison::Greater;
  if (std::find(rel.begin(), rel.end(), Rel::ProducerSub) != rel.end()) return Comparison::Less;
  return Comparison::Same;
}

/// Supplies values for `$name` references when a type expression is a
/// template. Implemented over module parameters.
class TypeSubstitutions {
 public:
  virtual ~TypeSubstitutions() = default;
  virtual std::string tag(std::string_view param) const = 0;
  virtual std::vector<std::string> tag_list(std::string_view param) const = 0;
  virtual std::int64_t integer(std::string_view param) const = 0;
  virtual std::int64_t list_length(std::string_view param) const = 0;
  virtual std::vector<std::int64_t> int_list(std::string_view param) const = 0;
  virtual std::string type_text(std::string_view param) const = 0;
};

namespace detail {

// Grammar (concrete types use only the first alternatives):
//   type  := "root" | "scalar" "(" tag ")" | "[" axis ("," axis)* "]"
//          | "$" name ("@" "$" name)?          whole-type param, optional permutation
//   axis  := "$" name "*"                      splice a string-list param (dynamic dims)
//          | tag (":" dim)?
//   tag   := Ident | "$" name
//   dim   := "-"? term (("+" | "-") term)*
//   term  := Integer | "$" name | "#" "$" name  (list length)
class TypeParser {
 public:
  TypeParser(const TagHierarchy& h, std::string_view text, const TypeSubstitutions* subs)
      : h_(h), text_(text), subs_(subs) {}

  NeuralType parse() {
    NeuralType t = parse_type();
    skip_ws();
    if (pos_ != text_.size()) error("unexpected trailing input");
    return t;
  }

 private:
  [[noreturn]] void error(const std::string& what) const {
    fail(Errc::SyntaxError, "type expression '" + std::string(text_) + "' at column " +
                                std::to_string(pos_ + 1) + ": " + what);
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool consume(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!consume(c)) error(std::string("expected '") + c + "'");
  }

  bool peek(char c) {
    skip_ws();
    return pos_ < text_.size() && text_[pos_] == c;
  }

  std::string identifier() {
    skip_ws();
    std::size_t start = pos_;
    if (pos_ < text_.size() &&
        (std::isalpha(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
      while (pos_ < text_.size() &&
             (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
        ++pos_;
    }
    if (start == pos_) error("expected an identifier");
    return std::string(text_.substr(start, pos_ - start));
  }

  const TypeSubstitutions& subs() {
    if (!subs_) error("'$' references are only allowed in port templates");
    return *subs_;
  }

  std::string tag_name(std::string name) {
    if (!is_tag_identifier(name)) error("invalid tag name '" + name + "'");
    h_.at(name);
    return name;
  }

  std::string parse_tag() {
    if (consume('$')) return tag_name(subs().tag(identifier()));
    return tag_name(identifier());
  }

  std::int64_t parse_term() {
    skip_ws();
    if (consume('#')) {
      expect('$');
      return subs().list_length(identifier());
    }
    if (consume('$')) return subs().integer(identifier());
    std::size_t start = pos_;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    if (start == pos_) error("expected a dimension");
    if (pos_ - start > 15) error("dimension too large");
    return std::stoll(std::string(text_.substr(start, pos_ - start)));
  }

  std::int64_t parse_dim() {
    skip_ws();
    std::int64_t value = consume('-') ? -parse_term() : parse_term();
    while (true) {
      if (consume('+')) value += parse_term();
      else if (consume('-')) value -= parse_term();
      else return value;
    }
  }

  void parse_axis(std::vector<AxisType>& axes) {
    skip_ws();
    if (peek('$')) {
      std::size_t save = pos_;
      consume('$');
      std::string name = identifier();
      if (consume('*')) {
        for (auto& t : subs().tag_list(name)) axes.push_back({tag_name(t), std::nullopt});
        return;
      }
      pos_ = save;
    }
    AxisType axis{parse_tag(), std::nullopt};
    if (consume(':')) {
      std::int64_t d = parse_dim();
      if (d < 1) {
        fail(Errc::InvalidDim, "type expression '" + std::string(text_) + "': axis " + axis.tag +
                                   " has dim " + std::to_string(d) + " < 1");
      }
      axis.dim = d;
    }
    axes.push_back(std::move(axis));
  }

  NeuralType parse_type() {
    skip_ws();
    if (consume('[')) {
      std::vector<AxisType> axes;
      parse_axis(axes);
      while (consume(',')) parse_axis(axes);
      expect(']');
      if (axes.empty()) error("empty axis list; use root");
      return NeuralType::tensor(std::move(axes));
    }
    if (consume('$')) {
      std::string name = identifier();
      std::string inner = subs().type_text(name);
      NeuralType t = TypeParser(h_, inner, nullptr).parse();
      if (consume('@')) {
        expect('$');
        auto perm = subs().int_list(identifier());
        if (!t.is_tensor() || !is_permutation_of_rank(perm, t.rank())) {
          error("permutation does not match the rank of '" + inner + "'");
        }
        t = t.permuted(perm);
      }
      return t;
    }
    std::string word = identifier();
    if (word == "root") return NeuralType::root();
    if (word == "scalar") {
      expect('(');
      std::string tag = parse_tag();
      expect(')');
      return NeuralType::scalar(std::move(tag));
    }
    error("expected 'root', 'scalar(...)' or '['");
  }

  const TagHierarchy& h_;
  std::string_view text_;
  const TypeSubstitutions* subs_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses `root`, `scalar(Tag)` or `[Tag(:dim)?, ...]`.
/// Inverse of render_type.
inline NeuralType parse_type_expr(const TagHierarchy& h, std::string_view text) {
  if (!h.frozen()) fail(Errc::HierarchyNotFrozen, "types can only be built on a frozen hierarchy");
  return detail::TypeParser(h, text, nullptr).parse();
}

/// Evaluates a port template such as `[$lead*, $in_tag:$in_features]`.
inline NeuralType evaluate_type_template(const TagHierarchy& h, std::string_view text,
                                         const TypeSubstitutions& subs) {
  if (!h.frozen()) fail(Errc::HierarchyNotFrozen, "types can only be built on a frozen hierarchy");
  return detail::TypeParser(h, text, &subs).parse();
}

}  // namespace nmod
