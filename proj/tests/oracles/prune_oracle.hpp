// Copyright 2026 The Shipyard Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Test-only brute-force reference for the pruner. Compatibility is decided by
// searching a finite version grid for a version every member accepts; it
// never calls intersect() or touches ImageSpec. Valid for corpora whose
// constraint bounds all lie on the grid (generate_corpus output does).

#ifndef SHIPYARD_TESTS_PRUNE_ORACLE_HPP
#define SHIPYARD_TESTS_PRUNE_ORACLE_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "shipyard/instance.hpp"

namespace shipyard::oracle {

inline const std::vector<Version>& version_grid() {
  static const std::vector<Version> grid = [] {
    std::vector<Version> g;
    for (std::uint64_t major = 0; major <= 12; ++major) {
      g.push_back(Version({major, 0}));
      g.push_back(Version({major, 5}));
    }
    return g;
  }();
  return grid;
}

using Group = std::vector<std::size_t>;  // indices into the instance list

inline std::set<std::string> names_of(const std::vector<TaskInstance>& all, const Group& g) {
  std::set<std::string> names;
  for (std::size_t i : g) {
    for (const auto& d : all[i].deps) names.insert(d.name);
  }
  return names;
}

inline bool groups_compatible(const std::vector<TaskInstance>& all, const Group& a, const Group& b) {
  std::set<std::string> na = names_of(all, a);
  std::set<std::string> nb = names_of(all, b);
  Group members = a;
  members.insert(members.end(), b.begin(), b.end());
  for (const auto& name : na) {
    if (nb.count(name) == 0) continue;
    bool witness = false;
    for (const Version& v : version_grid()) {
      bool ok = true;
      for (std::size_t i : members) {
        const Constraint* c = all[i].find_dep(name);
        if (c && !c->satisfied_by(v)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        witness = true;
        break;
      }
    }
    if (!witness) return false;
  }
  return true;
}

struct GreedyResult {
  std::vector<std::set<std::string>> partition;  // instance ids per image, scan order
  std::size_t image_count = 0;
  std::uint64_t bytes_after = 0;
};

// Per package name, the grid versions every member accepts, as a bitmask.
using GridMasks = std::map<std::string, std::uint32_t>;

inline GridMasks masks_of(const TaskInstance& inst) {
  GridMasks out;
  const auto& grid = version_grid();
  for (const auto& d : inst.deps) {
    std::uint32_t mask = 0;
    for (std::size_t v = 0; v < grid.size(); ++v) {
      if (d.constraint.satisfied_by(grid[v])) mask |= 1u << v;
    }
    out[d.name] = mask;
  }
  return out;
}

// Greedy merge with the production candidate order: descending dependency
// count then id; each image repeatedly absorbs the later compatible image
// with the largest savings (earliest on ties) until none remains; passes
// repeat until nothing merges. Always accepts merges.
inline GreedyResult greedy(const std::vector<TaskInstance>& all, const SizeModel& m) {
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (all[x].deps.size() != all[y].deps.size()) return all[x].deps.size() > all[y].deps.size();
    return all[x].instance_id < all[y].instance_id;
  });
  struct Slot {
    Group members;
    GridMasks masks;
    bool alive = true;
  };
  std::vector<Slot> slots;
  for (std::size_t i : order) slots.push_back({{i}, masks_of(all[i]), true});

  auto bytes = [&](const GridMasks& masks) {
    std::uint64_t total = m.base_bytes;
    for (const auto& entry : masks) total += m.package(entry.first);
    return total;
  };
  auto combine = [](const GridMasks& a, const GridMasks& b) -> std::optional<GridMasks> {
    GridMasks out = a;
    for (const auto& [name, mask] : b) {
      auto [it, inserted] = out.emplace(name, mask);
      if (!inserted) {
        it->second &= mask;
        if (it->second == 0) return std::nullopt;
      }
    }
    return out;
  };

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t a = 0; a < slots.size(); ++a) {
      if (!slots[a].alive) continue;
      while (true) {
        std::size_t best = slots.size();
        std::uint64_t best_saving = 0;
        GridMasks best_masks;
        const std::uint64_t bytes_a = bytes(slots[a].masks);
        for (std::size_t b = a + 1; b < slots.size(); ++b) {
          if (!slots[b].alive) continue;
          auto u = combine(slots[a].masks, slots[b].masks);
          if (!u) continue;
          std::uint64_t saving = bytes_a + bytes(slots[b].masks) - bytes(*u);
          if (best == slots.size() || saving > best_saving) {
            best = b;
            best_saving = saving;
            best_masks = std::move(*u);
          }
        }
        if (best == slots.size()) break;
        slots[a].members.insert(slots[a].members.end(), slots[best].members.begin(),
                                slots[best].members.end());
        slots[a].masks = std::move(best_masks);
        slots[best].alive = false;
        changed = true;
      }
    }
  }

  GreedyResult r;
  for (const auto& slot : slots) {
    if (!slot.alive) continue;
    std::set<std::string> ids;
    for (std::size_t i : slot.members) ids.insert(all[i].instance_id);
    r.partition.push_back(std::move(ids));
    r.bytes_after += bytes(slot.masks);
    ++r.image_count;
  }
  r.bytes_after += m.per_instance_overhead_bytes * all.size();
  return r;
}

// Image counts of every fixed point reachable by merging compatible pairs in
// any order. Exponential; meant for corpora of a dozen instances.
inline std::set<std::size_t> reachable_fixed_point_counts(const std::vector<TaskInstance>& all) {
  using State = std::vector<std::uint32_t>;  // sorted bitmasks
  std::map<std::uint64_t, bool> compat_cache;
  auto members = [](std::uint32_t mask) {
    Group g;
    for (std::size_t i = 0; i < 32; ++i) {
      if (mask & (1u << i)) g.push_back(i);
    }
    return g;
  };
  auto compat = [&](std::uint32_t x, std::uint32_t y) {
    std::uint64_t key = (static_cast<std::uint64_t>(std::min(x, y)) << 32) | std::max(x, y);
    auto it = compat_cache.find(key);
    if (it != compat_cache.end()) return it->second;
    bool ok = groups_compatible(all, members(x), members(y));
    compat_cache.emplace(key, ok);
    return ok;
  };
  auto encode = [](const State& s) {
    return std::string(reinterpret_cast<const char*>(s.data()), s.size() * sizeof(std::uint32_t));
  };

  State start;
  for (std::size_t i = 0; i < all.size(); ++i) start.push_back(1u << i);
  std::set<std::size_t> counts;
  std::unordered_set<std::string> seen{encode(start)};
  std::vector<State> stack{start};
  while (!stack.empty()) {
    State s = std::move(stack.back());
    stack.pop_back();
    bool terminal = true;
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = i + 1; j < s.size(); ++j) {
        if (!compat(s[i], s[j])) continue;
        terminal = false;
        State next;
        for (std::size_t k = 0; k < s.size(); ++k) {
          if (k != i && k != j) next.push_back(s[k]);
        }
        next.push_back(s[i] | s[j]);
        std::sort(next.begin(), next.end());
        if (seen.insert(encode(next)).second) stack.push_back(std::move(next));
      }
    }
    if (terminal) counts.insert(s.size());
  }
  return counts;
}

}  // namespace shipyard::oracle

#endif  // SHIPYARD_TESTS_PRUNE_ORACLE_HPP
