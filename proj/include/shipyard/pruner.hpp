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

#ifndef SHIPYARD_PRUNER_HPP
#define SHIPYARD_PRUNER_HPP

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "shipyard/digest.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/version.hpp"

namespace shipyard {

inline constexpr const char* kDefaultBaseProfile = "slim";

// A buildable environment shared by one or more task instances.
//
// Invariants (checked by audit_report):
//  - assigned_instances is non-empty, sorted and unique;
//  - for every assigned instance and each of its deps, packages[name] is a
//    subset of the instance's constraint;
//  - every package is required by at least one assigned instance.
struct ImageSpec {
  std::string image_id;
  std::string base_profile = kDefaultBaseProfile;
  std::map<std::string, Constraint> packages;
  std::vector<std::string> assigned_instances;
  std::uint64_t estimated_bytes = 0;

  friend bool operator==(const ImageSpec&, const ImageSpec&) = default;
};

class IncompatibleImages : public std::logic_error {
public:
  IncompatibleImages(const std::string& a, const std::string& b)
    : std::logic_error("images " + a + " and " + b + " are not compatible") {}
};

class UnknownInstance : public std::runtime_error {
public:
  explicit UnknownInstance(const std::string& id)
    : std::runtime_error("unknown instance '" + id + "'"), id_(id) {}
  const std::string& id() const noexcept { return id_; }

private:
  std::string id_;
};

inline std::string image_content_id(const std::string& base_profile,
                                    const std::map<std::string, Constraint>& packages) {
  ContentHasher h;
  h.add(base_profile);
  for (const auto& [name, constraint] : packages) {
    h.add(name).add(constraint.to_string());
  }
  return "sha256:" + h.hex().substr(0, 16);
}

inline std::uint64_t image_bytes(const std::map<std::string, Constraint>& packages,
                                 const SizeModel& size_model) {
  std::uint64_t total = size_model.base_bytes;
  for (const auto& entry : packages) {
    total += size_model.package(entry.first);
  }
  return total;
}

inline ImageSpec make_image(std::string base_profile, std::map<std::string, Constraint> packages,
                            std::vector<std::string> instances, const SizeModel& size_model) {
  std::sort(instances.begin(), instances.end());
  instances.erase(std::unique(instances.begin(), instances.end()), instances.end());
  ImageSpec spec;
  spec.base_profile = std::move(base_profile);
  spec.packages = std::move(packages);
  spec.assigned_instances = std::move(instances);
  spec.estimated_bytes = image_bytes(spec.packages, size_model);
  spec.image_id = image_content_id(spec.base_profile, spec.packages);
  return spec;
}

inline ImageSpec image_for_instance(const TaskInstance& inst, const SizeModel& size_model,
                                    const std::string& base_profile = kDefaultBaseProfile) {
  std::map<std::string, Constraint> packages;
  for (const auto& d : inst.deps) {
    packages.emplace(d.name, d.constraint);
  }
  return make_image(base_profile, std::move(packages), {inst.instance_id}, size_model);
}

namespace detail {

// Walks the shared package names of two images. Returns the bytes a merge
// would save, or nullopt if some shared package has an empty intersection or
// fewer than `min_shared` names are shared.
inline std::optional<std::uint64_t> merge_savings(const ImageSpec& i, const ImageSpec& j,
                                                  const SizeModel* size_model,
                                                  std::size_t min_shared) {
  if (i.base_profile != j.base_profile) return std::nullopt;
  std::uint64_t saved = size_model ? size_model->base_bytes : 0;
  std::size_t shared = 0;
  auto a = i.packages.begin();
  auto b = j.packages.begin();
  while (a != i.packages.end() && b != j.packages.end()) {
    if (a->first < b->first) {
      ++a;
    } else if (b->first < a->first) {
      ++b;
    } else {
      if (!intersect(a->second, b->second)) return std::nullopt;
      ++shared;
      if (size_model) saved += size_model->package(a->first);
      ++a;
      ++b;
    }
  }
  if (shared < min_shared) return std::nullopt;
  return saved;
}

}  // namespace detail

// Two images are compatible when every package they both carry has a
// non-empty constraint intersection. Packages present on one side only never
// block a merge. `min_shared` optionally requires that many shared names.
inline bool compatible(const ImageSpec& i, const ImageSpec& j, std::size_t min_shared = 0) {
  return detail::merge_savings(i, j, nullptr, min_shared).has_value();
}

inline ImageSpec merge(const ImageSpec& i, const ImageSpec& j, const SizeModel& size_model) {
  if (!compatible(i, j)) {
    throw IncompatibleImages(i.image_id, j.image_id);
  }
  std::map<std::string, Constraint> packages = i.packages;
  for (const auto& [name, constraint] : j.packages) {
    auto [it, inserted] = packages.emplace(name, constraint);
    if (!inserted) {
      it->second = *intersect(it->second, constraint);
    }
  }
  std::vector<std::string> instances = i.assigned_instances;
  instances.insert(instances.end(), j.assigned_instances.begin(), j.assigned_instances.end());
  return make_image(i.base_profile, std::move(packages), std::move(instances), size_model);
}

// Decides whether a merged image still serves the instances being moved onto
// it. `absorbed` lists the instances that come from the absorbed image.
using MergeValidator =
    std::function<bool(const ImageSpec& merged, std::span<const std::string> absorbed)>;

inline MergeValidator accept_all_merges() {
  return [](const ImageSpec&, std::span<const std::string>) { return true; };
}

struct MergeRecord {
  std::string survivor;
  std::string absorbed;
  std::string result;
  friend bool operator==(const MergeRecord&, const MergeRecord&) = default;
};

struct PruneReport {
  std::vector<ImageSpec> images;
  std::map<std::string, std::string> assignment;  // instance_id -> image_id
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
  std::vector<MergeRecord> merge_log;
  std::vector<MergeRecord> rejected_log;  // result is empty for rejections

  const ImageSpec* find_image(const std::string& image_id) const {
    for (const auto& img : images) {
      if (img.image_id == image_id) return &img;
    }
    return nullptr;
  }

  friend bool operator==(const PruneReport&, const PruneReport&) = default;
};

struct PruneOptions {
  std::string base_profile = kDefaultBaseProfile;
  std::size_t min_shared = 0;
};

using InstanceIndex = std::unordered_map<std::string, const TaskInstance*>;

inline InstanceIndex index_instances(std::span<const TaskInstance> instances) {
  InstanceIndex index;
  for (const auto& inst : instances) index.emplace(inst.instance_id, &inst);
  return index;
}

inline std::uint64_t bytes_one_image_per_instance(std::span<const TaskInstance> instances,
                                                  const SizeModel& size_model) {
  std::uint64_t total = 0;
  for (const auto& inst : instances) {
    total += size_model.base_bytes + size_model.per_instance_overhead_bytes;
    for (const auto& d : inst.deps) total += size_model.package(d.name);
  }
  return total;
}

inline std::uint64_t bytes_for_images(std::span<const ImageSpec> images, std::size_t instance_count,
                                      const SizeModel& size_model) {
  std::uint64_t total = size_model.per_instance_overhead_bytes * instance_count;
  for (const auto& img : images) total += img.estimated_bytes;
  return total;
}

namespace detail {

// Gives images with colliding content ids (identical package sets whose merge
// the validator refused) distinct ids, in list order.
inline void disambiguate_ids(std::vector<ImageSpec>& images) {
  std::map<std::string, int> seen;
  for (auto& img : images) {
    int n = seen[img.image_id]++;
    if (n > 0) img.image_id += "-" + std::to_string(n + 1);
  }
}

}  // namespace detail

// Greedy fixed-point merge of one-image-per-instance into shared images.
//
// Images start in order of descending dependency count, then instance id.
// In each pass every live image repeatedly merges with the best compatible
// later image (largest byte savings, earliest position on ties) that the
// validator accepts, until it has no acceptable partner. Passes repeat until
// one makes no merge.
inline PruneReport prune(std::span<const TaskInstance> instances, const SizeModel& size_model,
                         const MergeValidator& validator, const PruneOptions& options = {}) {
  if (instances.empty()) {
    throw std::invalid_argument("prune requires at least one instance");
  }
  std::vector<const TaskInstance*> order;
  for (const auto& inst : instances) order.push_back(&inst);
  std::sort(order.begin(), order.end(), [](const TaskInstance* a, const TaskInstance* b) {
    if (a->deps.size() != b->deps.size()) return a->deps.size() > b->deps.size();
    return a->instance_id < b->instance_id;
  });

  std::vector<std::optional<ImageSpec>> slots;
  slots.reserve(order.size());
  for (const TaskInstance* inst : order) {
    slots.emplace_back(image_for_instance(*inst, size_model, options.base_profile));
  }

  PruneReport report;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t a = 0; a < slots.size(); ++a) {
      if (!slots[a]) continue;
      std::set<std::size_t> refused;
      while (true) {
        std::optional<std::size_t> best;
        std::uint64_t best_savings = 0;
        for (std::size_t b = a + 1; b < slots.size(); ++b) {
          if (!slots[b] || refused.count(b) != 0) continue;
          auto savings = detail::merge_savings(*slots[a], *slots[b], &size_model, options.min_shared);
          if (savings && (!best || *savings > best_savings)) {
            best = b;
            best_savings = *savings;
          }
        }
        if (!best) break;
        ImageSpec merged = merge(*slots[a], *slots[*best], size_model);
        const auto& absorbed = slots[*best]->assigned_instances;
        if (!validator(merged, absorbed)) {
          report.rejected_log.push_back({slots[a]->image_id, slots[*best]->image_id, ""});
          refused.insert(*best);
          continue;
        }
        report.merge_log.push_back({slots[a]->image_id, slots[*best]->image_id, merged.image_id});
        slots[a] = std::move(merged);
        slots[*best].reset();
        refused.clear();
        changed = true;
      }
    }
  }

  for (auto& slot : slots) {
    if (slot) report.images.push_back(std::move(*slot));
  }
  detail::disambiguate_ids(report.images);
  for (const auto& img : report.images) {
    for (const auto& id : img.assigned_instances) report.assignment[id] = img.image_id;
  }
  report.bytes_before = bytes_one_image_per_instance(instances, size_model);
  report.bytes_after = bytes_for_images(report.images, instances.size(), size_model);
  return report;
}

inline PruneReport prune(std::span<const TaskInstance> instances, const SizeModel& size_model) {
  return prune(instances, size_model, accept_all_merges());
}

// Drops packages that no assigned instance requires.
inline ImageSpec minimize(const ImageSpec& image, const InstanceIndex& instances,
                          const SizeModel& size_model) {
  std::set<std::string> required;
  for (const auto& id : image.assigned_instances) {
    auto it = instances.find(id);
    if (it == instances.end() || it->second == nullptr) {
      throw UnknownInstance(id);
    }
    for (const auto& d : it->second->deps) required.insert(d.name);
  }
  std::map<std::string, Constraint> packages;
  for (const auto& [name, constraint] : image.packages) {
    if (required.count(name) != 0) packages.emplace(name, constraint);
  }
  ImageSpec out = make_image(image.base_profile, std::move(packages), image.assigned_instances,
                             size_model);
  if (out.packages == image.packages) {
    out.image_id = image.image_id;
  }
  return out;
}

struct StorageSummary {
  std::size_t image_count = 0;
  std::size_t instance_count = 0;
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
  double ratio = 1.0;
};

inline StorageSummary storage_summary(const PruneReport& report, const SizeModel& /*size_model*/) {
  StorageSummary s;
  s.image_count = report.images.size();
  s.instance_count = report.assignment.size();
  s.bytes_before = report.bytes_before;
  s.bytes_after = report.bytes_after;
  s.ratio = report.bytes_after == 0
                ? 1.0
                : static_cast<double>(report.bytes_before) / static_cast<double>(report.bytes_after);
  return s;
}

// Every violated report invariant, as human readable lines. Empty means the
// report is sound for `instances`.
inline std::vector<std::string> audit_report(const PruneReport& report,
                                             std::span<const TaskInstance> instances) {
  std::vector<std::string> problems;
  std::map<std::string, const ImageSpec*> by_id;
  for (const auto& img : report.images) {
    if (!by_id.emplace(img.image_id, &img).second) {
      problems.push_back("duplicate image id " + img.image_id);
    }
    if (img.assigned_instances.empty()) {
      problems.push_back("image " + img.image_id + " has no instances");
    }
  }
  InstanceIndex index = index_instances(instances);
  std::map<std::string, std::set<std::string>> required;
  for (const auto& inst : instances) {
    auto it = report.assignment.find(inst.instance_id);
    if (it == report.assignment.end()) {
      problems.push_back("instance " + inst.instance_id + " is unassigned");
      continue;
    }
    auto img_it = by_id.find(it->second);
    if (img_it == by_id.end()) {
      problems.push_back("instance " + inst.instance_id + " assigned to missing image " + it->second);
      continue;
    }
    const ImageSpec& img = *img_it->second;
    if (!std::binary_search(img.assigned_instances.begin(), img.assigned_instances.end(),
                            inst.instance_id)) {
      problems.push_back("image " + img.image_id + " does not list " + inst.instance_id);
    }
    for (const auto& d : inst.deps) {
      required[img.image_id].insert(d.name);
      auto pkg = img.packages.find(d.name);
      if (pkg == img.packages.end()) {
        problems.push_back(inst.instance_id + ": image lacks " + d.name);
      } else if (!is_subset(pkg->second, d.constraint)) {
        problems.push_back(inst.instance_id + ": " + d.name + pkg->second.to_string() +
                           " does not satisfy " + d.constraint.to_string());
      }
    }
  }
  for (const auto& img : report.images) {
    for (const auto& id : img.assigned_instances) {
      if (index.count(id) == 0) problems.push_back("image " + img.image_id + " lists unknown " + id);
    }
    for (const auto& entry : img.packages) {
      if (required[img.image_id].count(entry.first) == 0) {
        problems.push_back("image " + img.image_id + " carries orphan package " + entry.first);
      }
    }
  }
  if (report.bytes_after > report.bytes_before) {
    problems.push_back("bytes_after exceeds bytes_before");
  }
  return problems;
}

inline json to_json(const ImageSpec& img) {
  json packages = json::object();
  for (const auto& [name, c] : img.packages) packages[name] = c.to_string();
  return {{"image_id", img.image_id},
          {"base_profile", img.base_profile},
          {"packages", packages},
          {"assigned_instances", img.assigned_instances},
          {"estimated_bytes", img.estimated_bytes}};
}

inline ImageSpec image_from_json(const json& j) {
  ImageSpec img;
  img.image_id = j.at("image_id").get<std::string>();
  img.base_profile = j.at("base_profile").get<std::string>();
  for (auto it = j.at("packages").begin(); it != j.at("packages").end(); ++it) {
    img.packages.emplace(it.key(), Constraint::parse(it.value().get<std::string>()));
  }
  img.assigned_instances = j.at("assigned_instances").get<std::vector<std::string>>();
  img.estimated_bytes = j.at("estimated_bytes").get<std::uint64_t>();
  return img;
}

inline json to_json(const PruneReport& r) {
  json images = json::array();
  for (const auto& img : r.images) images.push_back(to_json(img));
  auto log = [](const std::vector<MergeRecord>& records) {
    json out = json::array();
    for (const auto& m : records) {
      json entry = json::array({m.survivor, m.absorbed});
      if (!m.result.empty()) entry.push_back(m.result);
      out.push_back(std::move(entry));
    }
    return out;
  };
  return {{"images", images},
          {"assignment", r.assignment},
          {"bytes_before", r.bytes_before},
          {"bytes_after", r.bytes_after},
          {"merge_log", log(r.merge_log)},
          {"rejected_merges", log(r.rejected_log)}};
}

inline PruneReport prune_report_from_json(const json& j) {
  PruneReport r;
  for (const auto& img : j.at("images")) r.images.push_back(image_from_json(img));
  r.assignment = j.at("assignment").get<std::map<std::string, std::string>>();
  r.bytes_before = j.at("bytes_before").get<std::uint64_t>();
  r.bytes_after = j.at("bytes_after").get<std::uint64_t>();
  auto log = [](const json& entries) {
    std::vector<MergeRecord> out;
    for (const auto& e : entries) {
      MergeRecord m{e.at(0).get<std::string>(), e.at(1).get<std::string>(), ""};
      if (e.size() > 2) m.result = e.at(2).get<std::string>();
      out.push_back(std::move(m));
    }
    return out;
  };
  r.merge_log = log(j.at("merge_log"));
  if (j.contains("rejected_merges")) r.rejected_log = log(j.at("rejected_merges"));
  return r;
}

}  // namespace shipyard

#endif  // SHIPYARD_PRUNER_HPP
