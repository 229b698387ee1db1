#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "nmod/nmod.hpp"

namespace testutil {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(NMOD_FIXTURES) / name; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("nmod_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Frozen std tags as used by every shipped fixture.
inline std::shared_ptr<const nmod::TagHierarchy> std_tags() { return nmod::make_std_tags(); }

inline nmod::NeuralType T(const nmod::TagHierarchy& h, const std::string& text) {
  return nmod::parse_type_expr(h, text);
}

/// All topological orders of a small DAG given as successor sets, by brute
/// force over permutations.
inline std::vector<std::vector<std::string>> all_topo_orders(const std::vector<std::string>& nodes,
                                                             const std::set<std::pair<std::string, std::string>>& edges) {
  std::vector<std::string> perm = nodes;
  std::sort(perm.begin(), perm.end());
  std::vector<std::vector<std::string>> out;
  do {
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < perm.size(); ++i) pos[perm[i]] = i;
    bool ok = std::all_of(edges.begin(), edges.end(), [&](const auto& e) { return pos[e.first] < pos[e.second]; });
    if (ok) out.push_back(perm);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

/// Nodes lying on at least one directed cycle, by brute-force DFS from each
/// node back to itself.
inline std::set<std::string> nodes_on_cycles(const std::vector<std::string>& nodes,
                                             const std::set<std::pair<std::string, std::string>>& edges) {
  std::set<std::string> out;
  for (const auto& start : nodes) {
    std::set<std::string> seen;
    std::function<bool(const std::string&)> reach = [&](const std::string& n) {
      for (const auto& [a, b] : edges) {
        if (a != n) continue;
        if (b == start) return true;
        if (seen.insert(b).second && reach(b)) return true;
      }
      return false;
    };
    if (reach(start)) out.insert(start);
  }
  return out;
}

}  // namespace testutil
