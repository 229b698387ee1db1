#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nmod/error.hpp"
#include "nmod/module.hpp"
#include "nmod/rng.hpp"
#include "nmod/tensor.hpp"

namespace nmod {

/// Rows of a dataset, materialized per output port. Row i of every port
/// belongs to sample i.
class DataSource {
 public:
  DataSource(std::int64_t rows, std::map<std::string, Tensor> columns, bool shuffle, bool repeats,
             std::int64_t batch_size)
      : rows_(rows), columns_(std::move(columns)), shuffle_(shuffle), repeats_(repeats), batch_size_(batch_size) {}

  std::int64_t rows() const noexcept { return rows_; }
  bool shuffle() const noexcept { return shuffle_; }
  bool repeats() const noexcept { return repeats_; }
  std::int64_t batch_size() const noexcept { return batch_size_; }  // 0: use the action's
  const std::map<std::string, Tensor>& columns() const noexcept { return columns_; }

  /// Gathers the given sample indices into batch tensors.
  std::map<std::string, Tensor> gather(const std::vector<std::int64_t>& index) const {
    std::map<std::string, Tensor> out;
    for (const auto& [port, col] : columns_) {
      Shape s = col.shape();
      const std::int64_t width = rows_ ? static_cast<std::int64_t>(col.numel()) / rows_ : shape_numel(Shape(s.begin() + 1, s.end()));
      s[0] = static_cast<std::int64_t>(index.size());
      Tensor t(s);
      for (std::size_t r = 0; r < index.size(); ++r) {
        std::copy_n(col.data().begin() + index[r] * width, width, t.data().begin() + static_cast<std::int64_t>(r) * width);
      }
      out.emplace(port, std::move(t));
    }
    return out;
  }

  /// Sample at stream position `pos`. The stream runs through epochs back
  /// to back; epoch e is a Fisher-Yates permutation seeded by (seed, e).
  std::int64_t sample_at(std::int64_t pos, std::uint64_t seed) const {
    const std::int64_t epoch = pos / rows_;
    const std::int64_t offset = pos % rows_;
    if (!shuffle_) return offset;
    if (epoch != cached_epoch_ || seed != cached_seed_) {
      perm_.resize(static_cast<std::size_t>(rows_));
      std::iota(perm_.begin(), perm_.end(), std::int64_t{0});
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
      for (std::int64_t i = rows_ - 1; i > 0; --i) {
        auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i) + 1));
        std::swap(perm_[i], perm_[j]);
      }
      cached_epoch_ = epoch;
      cached_seed_ = seed;
    }
    return perm_[offset];
  }

  /// `count` samples starting at stream position `pos`.
  std::map<std::string, Tensor> batch_at(std::int64_t pos, std::int64_t count, std::uint64_t seed) const {
    if (rows_ == 0) fail(Errc::DataExhausted, "data source is empty");
    if (!repeats_ && pos + count > rows_) {
      fail(Errc::DataExhausted, "data source has " + std::to_string(rows_) + " rows; samples " + std::to_string(pos) +
                                    ".." + std::to_string(pos + count - 1) + " were requested");
    }
    std::vector<std::int64_t> index;
    for (std::int64_t i = 0; i < count; ++i) index.push_back(sample_at(pos + i, seed));
    return gather(index);
  }

 private:
  std::int64_t rows_;
  std::map<std::string, Tensor> columns_;
  bool shuffle_, repeats_;
  std::int64_t batch_size_;
  mutable std::vector<std::int64_t> perm_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::uint64_t cached_seed_ = 0;
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& text, const std::string& where) {
  double v = 0.0;
  const char* b = text.data();
  const char* e = b + text.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && e[-1] == ' ') --e;
  if (b < e && *b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || b == e) fail(Errc::DataError, where + ": '" + text + "' is not a number");
  return v;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open '" + path + "'");
  return in;
}

}  // namespace detail

/// Comma-separated file with a header row; no quoting.
inline DataSource load_csv_source(const std::string& path, const ParamMap& p) {
  auto in = detail::open_input(path);
  std::string line;
  if (!std::getline(in, line)) fail(Errc::DataError, path + ": missing header row");
  auto header = detail::split(line, ',');
  for (auto& h : header) h = detail::trim(h);
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(Errc::DataError, path + ": no column named '" + name + "'");
  };
  const auto& features = param_as<std::vector<std::string>>(p, "features");
  const auto& targets = param_as<std::vector<std::string>>(p, "targets");
  const auto& label = param_string(p, "label");
  const auto classes = param_int(p, "num_classes");
  std::vector<std::size_t> fcols, tcols;
  for (const auto& f : features) fcols.push_back(column(f));
  for (const auto& t : targets) tcols.push_back(column(t));
  std::optional<std::size_t> lcol;
  if (!label.empty()) lcol = column(label);

  std::vector<float> fdata, tdata, ldata;
  std::int64_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split(line, ',');
    auto where = path + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) {
      fail(Errc::DataError, where + ": expected " + std::to_string(header.size()) + " fields, found " +
                                std::to_string(cells.size()));
    }
    for (auto c : fcols) fdata.push_back(static_cast<float>(detail::parse_number(cells[c], where)));
    for (auto c : tcols) tdata.push_back(static_cast<float>(detail::parse_number(cells[c], where)));
    if (lcol) {
      double v = detail::parse_number(cells[*lcol], where);
      if (v != std::floor(v) || v < 0 || v >= static_cast<double>(classes)) {
        fail(Errc::DataError, where + ": label " + cells[*lcol] + " outside [0, " + std::to_string(classes) + ")");
      }
      ldata.push_back(static_cast<float>(v));
    }
    ++rows;
  }
  std::map<std::string, Tensor> cols;
  cols.emplace("features", Tensor({rows, static_cast<std::int64_t>(features.size())}, std::move(fdata)));
  if (lcol) cols.emplace("labels", Tensor({rows, 1}, std::move(ldata)));
  if (!targets.empty()) cols.emplace("targets", Tensor({rows, static_cast<std::int64_t>(targets.size())}, std::move(tdata)));
  return DataSource(rows, std::move(cols), param_bool(p, "shuffle"), param_bool(p, "repeats"), param_int(p, "batch_size"));
}

/// One space-separated token-id sequence per line. Tokens are the sequence
/// without its last id, labels the sequence shifted left by one; both are
/// cut to max_len and padded with pad_id, where mask is 0.
inline DataSource load_sequence_source(const std::string& path, const ParamMap& p) {
  auto in = detail::open_input(path);
  const auto vocab = param_int(p, "vocab_size");
  const auto max_len = param_int(p, "max_len");
  const auto pad = static_cast<float>(param_int(p, "pad_id"));
  std::vector<float> tokens, mask, labels;
  std::int64_t rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::istringstream is(line);
    std::vector<std::int64_t> ids;
    std::string word;
    while (is >> word) {
      double v = detail::parse_number(word, path + ":" + std::to_string(line_no));
      if (v != std::floor(v) || v < 0 || v >= static_cast<double>(vocab)) {
        fail(Errc::DataError, path + ":" + std::to_string(line_no) + ": token " + word + " outside [0, " +
                                  std::to_string(vocab) + ")");
      }
      ids.push_back(static_cast<std::int64_t>(v));
    }
    if (ids.size() < 2) fail(Errc::DataError, path + ":" + std::to_string(line_no) + ": a sequence needs two tokens");
    for (std::int64_t t = 0; t < max_len; ++t) {
      bool real = t + 1 < static_cast<std::int64_t>(ids.size());
      tokens.push_back(real ? static_cast<float>(ids[t]) : pad);
      labels.push_back(real ? static_cast<float>(ids[t + 1]) : pad);
      mask.push_back(real ? 1.0f : 0.0f);
    }
    ++rows;
  }
  std::map<std::string, Tensor> cols;
  cols.emplace("tokens", Tensor({rows, max_len}, std::move(tokens)));
  cols.emplace("mask", Tensor({rows, max_len}, std::move(mask)));
  cols.emplace("labels", Tensor({rows, max_len}, std::move(labels)));
  return DataSource(rows, std::move(cols), param_bool(p, "shuffle"), param_bool(p, "repeats"), param_int(p, "batch_size"));
}

/// Loads the dataset behind a data-layer instance. Relative paths resolve
/// against `base_dir`.
inline DataSource load_source(const ModuleInstance& inst, const std::filesystem::path& base_dir = {}) {
  const auto* impl = std::get_if<DataLayerImpl>(&inst.descriptor->impl);
  if (!impl) fail(Errc::DataError, inst.id + " is not a data layer");
  std::filesystem::path path = param_string(inst.params, "path");
  if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
  auto src = impl->source == "csv" ? load_csv_source(path.string(), inst.params)
                                   : load_sequence_source(path.string(), inst.params);
  // Only ports the instance actually exposes are emitted.
  std::map<std::string, Tensor> cols;
  for (const auto& port : inst.outputs) {
    auto it = src.columns().find(port.name);
    if (it != src.columns().end()) cols.emplace(port.name, it->second);
  }
  return DataSource(src.rows(), std::move(cols), src.shuffle(), src.repeats(), src.batch_size());
}

}  // namespace nmod
