#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmod/error.hpp"

namespace nmod {

enum class ParamKind { Int, Float, String, Bool, IntList, StringList };

using ParamValue = std::variant<std::int64_t, double, std::string, bool,
                                std::vector<std::int64_t>,
                                std::vector<std::string>>;
using ParamMap = std::map<std::string, ParamValue, std::less<>>;

constexpr std::string_view param_kind_name(ParamKind kind) noexcept {
  switch (kind) {
    case ParamKind::Int: return "int";
    case ParamKind::Float: return "float";
    case ParamKind::String: return "string";
    case ParamKind::Bool: return "bool";
    case ParamKind::IntList: return "int-list";
    case ParamKind::StringList: return "string-list";
  }
  return "?";
}

inline std::optional<ParamKind> parse_param_kind(std::string_view text) {
  for (ParamKind k : {ParamKind::Int, ParamKind::Float, ParamKind::String,
                      ParamKind::Bool, ParamKind::IntList,
                      ParamKind::StringList}) {
    if (param_kind_name(k) == text) return k;
  }
  return std::nullopt;
}

inline ParamKind kind_of(const ParamValue& v) noexcept {
  return static_cast<ParamKind>(v.index());
}

/// Canonical text of a value. Used by port guards, `${name}` interpolation
/// and the `describe` report.
inline std::string render_param(const ParamValue& v) {
  struct Visitor {
    std::string operator()(std::int64_t i) const { return std::to_string(i); }
    std::string operator()(double d) const {
      std::ostringstream os;
      os.precision(17);
      os << d;
      return os.str();
    }
    std::string operator()(const std::string& s) const { return s; }
    std::string operator()(bool b) const { return b ? "true" : "false"; }
    std::string operator()(const std::vector<std::int64_t>& xs) const {
      std::string out = "[";
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(xs[i]);
      }
      return out + "]";
    }
    std::string operator()(const std::vector<std::string>& xs) const {
      std::string out = "[";
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ", ";
        out += xs[i];
      }
      return out + "]";
    }
  };
  return std::visit(Visitor{}, v);
}

inline nlohmann::json param_to_json(const ParamValue& v) {
  return std::visit([](const auto& x) { return nlohmann::json(x); }, v);
}

/// Converts a JSON value to `kind`, or returns nullopt on a kind mismatch.
/// Integral floats are accepted for int; ints are accepted for float.
inline std::optional<ParamValue> param_from_json(ParamKind kind,
                                                 const nlohmann::json& j) {
  auto as_int = [](const nlohmann::json& x) -> std::optional<std::int64_t> {
    if (x.is_number_integer()) return x.get<std::int64_t>();
    if (x.is_number_float()) {
      double d = x.get<double>();
      if (std::floor(d) == d && std::abs(d) < 9.0e15)
        return static_cast<std::int64_t>(d);
    }
    return std::nullopt;
  };
  switch (kind) {
    case ParamKind::Int:
      if (auto i = as_int(j)) return ParamValue{*i};
      return std::nullopt;
    case ParamKind::Float:
      if (j.is_number()) return ParamValue{j.get<double>()};
      return std::nullopt;
    case ParamKind::String:
      if (j.is_string()) return ParamValue{j.get<std::string>()};
      return std::nullopt;
    case ParamKind::Bool:
      if (j.is_boolean()) return ParamValue{j.get<bool>()};
      return std::nullopt;
    case ParamKind::IntList: {
      if (!j.is_array()) return std::nullopt;
      std::vector<std::int64_t> out;
      for (const auto& x : j) {
        auto i = as_int(x);
        if (!i) return std::nullopt;
        out.push_back(*i);
      }
      return ParamValue{std::move(out)};
    }
    case ParamKind::StringList: {
      if (!j.is_array()) return std::nullopt;
      std::vector<std::string> out;
      for (const auto& x : j) {
        if (!x.is_string()) return std::nullopt;
        out.push_back(x.get<std::string>());
      }
      return ParamValue{std::move(out)};
    }
  }
  return std::nullopt;
}

/// One named, typed constructor parameter of a module.
struct ParamEntry {
  std::string name;
  ParamKind kind = ParamKind::Int;
  bool required = true;
  std::optional<ParamValue> default_value;
  std::optional<double> min;  // numeric kinds: each value must be >= min
  std::optional<double> max;  // numeric kinds: each value must be <= max
  std::vector<std::string> choices;  // string kinds: allowed values

  /// Human-readable constraint, e.g. "in_features ≥ 1".
  std::string constraint_text() const {
    std::vector<std::string> parts;
    auto num = [](double d) { return render_param(ParamValue{d}); };
    if (min) parts.push_back(name + " ≥ " + num(*min));
    if (max) parts.push_back(name + " ≤ " + num(*max));
    if (!choices.empty()) {
      std::string c = name + " one of {";
      for (std::size_t i = 0; i < choices.size(); ++i) {
        if (i) c += ", ";
        c += choices[i];
      }
      parts.push_back(c + "}");
    }
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i) out += ", ";
      out += parts[i];
    }
    return out;
  }

  /// Empty string when `v` is acceptable, otherwise the violated constraint.
  std::string check(const ParamValue& v) const {
    if (kind_of(v) != kind) {
      return name + " must be " + std::string(param_kind_name(kind));
    }
    auto in_range = [&](double d) {
      return (!min || d >= *min) && (!max || d <= *max);
    };
    auto in_choices = [&](const std::string& s) {
      return choices.empty() ||
             std::find(choices.begin(), choices.end(), s) != choices.end();
    };
    bool ok = std::visit(
        [&](const auto& x) -> bool {
          using X = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<X, std::int64_t> ||
                        std::is_same_v<X, double>) {
            return in_range(static_cast<double>(x));
          } else if constexpr (std::is_same_v<X, std::vector<std::int64_t>>) {
            return std::all_of(x.begin(), x.end(), [&](std::int64_t i) {
              return in_range(static_cast<double>(i));
            });
          } else if constexpr (std::is_same_v<X, std::string>) {
            return in_choices(x);
          } else if constexpr (std::is_same_v<X, std::vector<std::string>>) {
            return std::all_of(x.begin(), x.end(), in_choices);
          } else {
            return true;
          }
        },
        v);
    return ok ? std::string{} : constraint_text();
  }
};

class ParamSchema {
 public:
  ParamSchema() = default;

  /// Adds an entry. Required entries carry no default; defaults must satisfy
  /// their own constraints.
  ParamSchema& add(ParamEntry entry) {
    if (find(entry.name)) {
      fail(Errc::InvalidDescriptor, "duplicate parameter '" + entry.name + "'");
    }
    if (entry.required && entry.default_value) {
      fail(Errc::InvalidDescriptor,
           "required parameter '" + entry.name + "' has a default");
    }
    if (!entry.required && !entry.default_value) {
      fail(Errc::InvalidDescriptor,
           "optional parameter '" + entry.name + "' has no default");
    }
    if (entry.default_value) {
      if (auto why = entry.check(*entry.default_value); !why.empty()) {
        fail(Errc::InvalidDescriptor,
             "default of '" + entry.name + "' violates " + why);
      }
    }
    entries_.push_back(std::move(entry));
    return *this;
  }

  const ParamEntry* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }

  /// True when every entry has a default, so `validate({})` succeeds.
  bool fully_defaulted() const {
    return std::all_of(entries_.begin(), entries_.end(),
                       [](const ParamEntry& e) { return !e.required; });
  }

  /// Rejects unknown keys, checks kinds and constraints, fills defaults.
  ParamMap validate(const ParamMap& values) const {
    for (const auto& [key, _] : values) {
      if (!find(key)) fail(Errc::UnknownParam, "unknown parameter '" + key + "'");
    }
    ParamMap out;
    for (const auto& e : entries_) {
      auto it = values.find(e.name);
      if (it == values.end()) {
        if (e.required) {
          fail(Errc::MissingParam, "missing required parameter '" + e.name + "'");
        }
        out.emplace(e.name, *e.default_value);
        continue;
      }
      ParamValue v = it->second;
      // int literals are acceptable float values
      if (e.kind == ParamKind::Float && kind_of(v) == ParamKind::Int) {
        v = static_cast<double>(std::get<std::int64_t>(v));
      }
      if (auto why = e.check(v); !why.empty()) {
        fail(Errc::ConstraintViolation, why);
      }
      out.emplace(e.name, std::move(v));
    }
    return out;
  }

  /// Converts a JSON object of parameter values guided by the schema.
  ParamMap from_json(const nlohmann::json& j) const {
    if (!j.is_object()) fail(Errc::SchemaError, "params must be an object");
    ParamMap out;
    for (const auto& [key, value] : j.items()) {
      const ParamEntry* e = find(key);
      if (!e) fail(Errc::UnknownParam, "unknown parameter '" + key + "'");
      auto v = param_from_json(e->kind, value);
      if (!v) {
        fail(Errc::ConstraintViolation,
             key + " must be " + std::string(param_kind_name(e->kind)));
      }
      out.emplace(key, std::move(*v));
    }
    return out;
  }

 private:
  std::vector<ParamEntry> entries_;
};

template <class T>
const T& param_as(const ParamMap& params, std::string_view name) {
  auto it = params.find(name);
  if (it == params.end()) {
    fail(Errc::MissingParam, "missing parameter '" + std::string(name) + "'");
  }
  const T* v = std::get_if<T>(&it->second);
  if (!v) {
    fail(Errc::ConstraintViolation,
         "parameter '" + std::string(name) + "' has the wrong kind");
  }
  return *v;
}

inline std::int64_t param_int(const ParamMap& p, std::string_view name) {
  return param_as<std::int64_t>(p, name);
}
inline double param_float(const ParamMap& p, std::string_view name) {
  return param_as<double>(p, name);
}
inline const std::string& param_string(const ParamMap& p, std::string_view name) {
  return param_as<std::string>(p, name);
}
inline bool param_bool(const ParamMap& p, std::string_view name) {
  return param_as<bool>(p, name);
}

inline nlohmann::json params_to_json(const ParamMap& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : params) j[k] = param_to_json(v);
  return j;
}

}  // namespace nmod
