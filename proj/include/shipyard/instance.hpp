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

#ifndef SHIPYARD_INSTANCE_HPP
#define SHIPYARD_INSTANCE_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "shipyard/version.hpp"

namespace shipyard {

using json = nlohmann::json;

struct DependencySpec {
  std::string name;
  Constraint constraint;

  friend bool operator==(const DependencySpec&, const DependencySpec&) = default;
};

// One executable task: a repository snapshot, the packages it needs, and the
// test partition that decides whether a patch resolves it.
struct TaskInstance {
  std::string instance_id;
  std::string repo;
  std::string base_commit;
  std::vector<DependencySpec> deps;
  std::vector<std::string> fail_to_pass;
  std::vector<std::string> pass_to_pass;
  std::string gold_patch;
  std::string test_cmd;
  // Fields the manifest carried that this version does not interpret.
  json extra = json::object();

  const Constraint* find_dep(const std::string& name) const {
    for (const auto& d : deps) {
      if (d.name == name) return &d.constraint;
    }
    return nullptr;
  }

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

class ManifestError : public std::runtime_error {
public:
  enum class Kind { Parse, DuplicateId, EmptyFailToPass };

  ManifestError(Kind kind, std::size_t line, std::string subject, const std::string& what)
    : std::runtime_error(what), kind_(kind), line_(line), subject_(std::move(subject)) {}

  static ManifestError parse(std::size_t line, const std::string& reason) {
    return {Kind::Parse, line, reason, "line " + std::to_string(line) + ": " + reason};
  }
  static ManifestError duplicate_id(std::size_t line, const std::string& id) {
    return {Kind::DuplicateId, line, id,
            "line " + std::to_string(line) + ": duplicate instance_id '" + id + "'"};
  }
  static ManifestError empty_fail_to_pass(std::size_t line, const std::string& id) {
    return {Kind::EmptyFailToPass, line, id,
            "line " + std::to_string(line) + ": instance '" + id + "' has empty fail_to_pass"};
  }

  Kind kind() const noexcept { return kind_; }
  std::size_t line() const noexcept { return line_; }
  // The offending instance id, or the reason for parse errors.
  const std::string& subject() const noexcept { return subject_; }

private:
  Kind kind_;
  std::size_t line_;
  std::string subject_;
};

namespace detail {

inline bool valid_package_name(const std::string& name) {
  return !name.empty() && std::none_of(name.begin(), name.end(), [](unsigned char c) {
    return std::isspace(c) != 0;
  });
}

inline std::vector<std::string> string_array(const json& record, const char* key) {
  const json& value = record.at(key);
  if (!value.is_array()) {
    throw std::invalid_argument(std::string("'") + key + "' must be an array of strings");
  }
  std::vector<std::string> out;
  for (const auto& item : value) {
    if (!item.is_string()) {
      throw std::invalid_argument(std::string("'") + key + "' must be an array of strings");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

inline std::string string_field(const json& record, const char* key) {
  const json& value = record.at(key);
  if (!value.is_string()) {
    throw std::invalid_argument(std::string("'") + key + "' must be a string");
  }
  return value.get<std::string>();
}

}  // namespace detail

inline const std::vector<std::string>& manifest_fields() {
  static const std::vector<std::string> fields = {
      "instance_id", "repo", "base_commit", "deps", "fail_to_pass",
      "pass_to_pass", "gold_patch", "test_cmd"};
  return fields;
}

// Parses one manifest record. Structural problems throw
// std::invalid_argument / invalid_version / json errors; the caller attaches
// the line number.
inline TaskInstance parse_instance(const json& record) {
  if (!record.is_object()) {
    throw std::invalid_argument("record is not an object");
  }
  TaskInstance inst;
  inst.instance_id = detail::string_field(record, "instance_id");
  if (inst.instance_id.empty()) {
    throw std::invalid_argument("instance_id is empty");
  }
  inst.repo = detail::string_field(record, "repo");
  inst.base_commit = detail::string_field(record, "base_commit");
  inst.gold_patch = detail::string_field(record, "gold_patch");
  inst.test_cmd = detail::string_field(record, "test_cmd");
  inst.fail_to_pass = detail::string_array(record, "fail_to_pass");
  inst.pass_to_pass = detail::string_array(record, "pass_to_pass");

  const json& deps = record.at("deps");
  if (!deps.is_array()) {
    throw std::invalid_argument("'deps' must be an array");
  }
  std::set<std::string> seen;
  for (const auto& d : deps) {
    DependencySpec spec;
    spec.name = detail::string_field(d, "name");
    if (!detail::valid_package_name(spec.name)) {
      throw std::invalid_argument("invalid package name '" + spec.name + "'");
    }
    if (!seen.insert(spec.name).second) {
      throw std::invalid_argument("duplicate dependency '" + spec.name + "'");
    }
    spec.constraint = Constraint::parse(detail::string_field(d, "constraint"));
    inst.deps.push_back(std::move(spec));
  }

  std::set<std::string> f2p(inst.fail_to_pass.begin(), inst.fail_to_pass.end());
  for (const auto& t : inst.pass_to_pass) {
    if (f2p.count(t) != 0) {
      throw std::invalid_argument("test '" + t + "' is in both fail_to_pass and pass_to_pass");
    }
  }

  const auto& known = manifest_fields();
  for (auto it = record.begin(); it != record.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      inst.extra[it.key()] = it.value();
    }
  }
  return inst;
}

inline json to_json(const TaskInstance& inst) {
  json deps = json::array();
  for (const auto& d : inst.deps) {
    deps.push_back({{"name", d.name}, {"constraint", d.constraint.to_string()}});
  }
  json record = inst.extra.is_object() ? inst.extra : json::object();
  record["instance_id"] = inst.instance_id;
  record["repo"] = inst.repo;
  record["base_commit"] = inst.base_commit;
  record["deps"] = std::move(deps);
  record["fail_to_pass"] = inst.fail_to_pass;
  record["pass_to_pass"] = inst.pass_to_pass;
  record["gold_patch"] = inst.gold_patch;
  record["test_cmd"] = inst.test_cmd;
  return record;
}

inline std::vector<TaskInstance> parse_manifest(std::istream& in) {
  std::vector<TaskInstance> out;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ManifestError::parse(lineno, std::string("malformed record: ") + e.what());
    }
    TaskInstance inst;
    try {
      inst = parse_instance(record);
    } catch (const json::exception& e) {
      throw ManifestError::parse(lineno, e.what());
    } catch (const std::exception& e) {
      throw ManifestError::parse(lineno, e.what());
    }
    if (inst.fail_to_pass.empty()) {
      throw ManifestError::empty_fail_to_pass(lineno, inst.instance_id);
    }
    if (!ids.insert(inst.instance_id).second) {
      throw ManifestError::duplicate_id(lineno, inst.instance_id);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::vector<TaskInstance> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ManifestError::parse(0, "cannot open manifest '" + path.string() + "'");
  }
  return parse_manifest(in);
}

inline std::string serialize_manifest(const std::vector<TaskInstance>& instances) {
  std::string out;
  for (const auto& inst : instances) {
    out += to_json(inst).dump();
    out += '\n';
  }
  return out;
}

// Byte accounting for images. Values are plain byte counts.
struct SizeModel {
  std::uint64_t base_bytes = 0;
  std::map<std::string, std::uint64_t> package_bytes;
  std::uint64_t default_package_bytes = 1;
  std::uint64_t per_instance_overhead_bytes = 0;

  std::uint64_t package(const std::string& name) const {
    auto it = package_bytes.find(name);
    return it == package_bytes.end() ? default_package_bytes : it->second;
  }

  static SizeModel from_json(const json& j) {
    SizeModel m;
    m.base_bytes = j.value("base_bytes", std::uint64_t{0});
    m.default_package_bytes = j.value("default_package_bytes", std::uint64_t{1});
    m.per_instance_overhead_bytes = j.value("per_instance_overhead_bytes", std::uint64_t{0});
    if (j.contains("package_bytes")) {
      m.package_bytes = j.at("package_bytes").get<std::map<std::string, std::uint64_t>>();
    }
    if (m.default_package_bytes == 0) {
      throw std::invalid_argument("default_package_bytes must be positive");
    }
    return m;
  }

  json to_json() const {
    return {{"base_bytes", base_bytes},
            {"package_bytes", package_bytes},
            {"default_package_bytes", default_package_bytes},
            {"per_instance_overhead_bytes", per_instance_overhead_bytes}};
  }
};

constexpr std::uint64_t kMiB = 1024ULL * 1024ULL;

// 50 MB slim base, 20 MB per package, 2 MB per-instance checkout layer.
inline SizeModel default_size_model() {
  SizeModel m;
  m.base_bytes = 50 * kMiB;
  m.default_package_bytes = 20 * kMiB;
  m.per_instance_overhead_bytes = 2 * kMiB;
  return m;
}

}  // namespace shipyard

#endif  // SHIPYARD_INSTANCE_HPP
