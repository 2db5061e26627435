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

#ifndef SHIPYARD_SIM_BACKEND_HPP
#define SHIPYARD_SIM_BACKEND_HPP

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "shipyard/digest.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/patch.hpp"
#include "shipyard/random.hpp"
#include "shipyard/sandbox.hpp"

namespace shipyard {

class ProfileError : public std::runtime_error {
public:
  explicit ProfileError(const std::string& what) : std::runtime_error(what) {}
};

// Duration model for simulated execs. Lognormal is parameterized by its
// median so profiles read in seconds.
struct DurationModel {
  enum class Kind { Constant, Lognormal, Uniform };
  Kind kind = Kind::Constant;
  double a = 1.0;  // value, median or lower bound
  double b = 0.0;  // sigma or upper bound

  static DurationModel constant(double seconds) { return {Kind::Constant, seconds, 0.0}; }

  double draw(std::uint64_t seed) const {
    switch (kind) {
      case Kind::Constant:
        return a;
      case Kind::Lognormal: {
        Rng rng(seed);
        return rng.lognormal(std::log(a), b);
      }
      case Kind::Uniform: {
        Rng rng(seed);
        return rng.uniform(a, b);
      }
    }
    return a;
  }

  static DurationModel from_json(const json& j) {
    if (j.is_number()) {
      if (j.get<double>() <= 0) throw ProfileError("durations must be positive");
      return constant(j.get<double>());
    }
    const std::string dist = j.value("dist", "constant");
    DurationModel m;
    if (dist == "constant") {
      m = constant(j.at("seconds").get<double>());
    } else if (dist == "lognormal") {
      m = {Kind::Lognormal, j.at("median").get<double>(), j.at("sigma").get<double>()};
      if (m.b < 0) throw ProfileError("lognormal sigma must be non-negative");
    } else if (dist == "uniform") {
      m = {Kind::Uniform, j.at("lo").get<double>(), j.at("hi").get<double>()};
      if (m.b < m.a) throw ProfileError("uniform needs lo <= hi");
    } else {
      throw ProfileError("unknown duration distribution '" + dist + "'");
    }
    if (m.a <= 0) throw ProfileError("durations must be positive");
    return m;
  }

  json to_json() const {
    switch (kind) {
      case Kind::Constant:
        return {{"dist", "constant"}, {"seconds", a}};
      case Kind::Lognormal:
        return {{"dist", "lognormal"}, {"median", a}, {"sigma", b}};
      case Kind::Uniform:
        return {{"dist", "uniform"}, {"lo", a}, {"hi", b}};
    }
    return nullptr;
  }
};

enum class Phase { PrePatch, PostPatch, PostGold };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::PrePatch:
      return "pre_patch";
    case Phase::PostPatch:
      return "post_patch";
    case Phase::PostGold:
      return "post_gold";
  }
  return "?";
}

struct PhaseOutcome {
  std::optional<DurationModel> duration;
  std::map<std::string, bool> tests;  // empty: canonical behaviour for the phase
};

struct InstanceProfile {
  std::map<Phase, PhaseOutcome> phases;
  std::optional<FileTree> repo;              // files the patch is applied to
  std::set<std::string> breaks_with;         // packages that break this instance's tests
};

struct SizeClass {
  std::string name;
  std::optional<std::uint64_t> max_bytes;  // inclusive; nullopt = unbounded
  double seconds = 0.0;
};

struct SimProfile {
  std::string name = "default";
  std::uint64_t seed = 0;
  std::set<std::string> base_profiles{kDefaultBaseProfile};
  bool layer_cache = true;
  double build_seconds = 58.0;
  std::map<std::string, double> build_seconds_by_image;
  std::vector<SizeClass> size_classes;
  double cache_hit_build_seconds = 1.0;
  DurationModel eval_duration = DurationModel::constant(17.0);
  double apply_seconds = 0.0;
  // Probability that a non-gold patch resolves its instance.
  double resolve_rate = 1.0;
  double infra_fault_rate = 0.0;
  double timeout_fault_rate = 0.0;
  std::set<std::string> build_failures;  // packages whose install step fails
  std::map<std::string, InstanceProfile> instances;
  std::size_t max_sandboxes = 1024;
  // Real seconds slept per modeled test second; 0 keeps execs instantaneous.
  // Stress runs use it to make threaded evaluations overlap.
  double wall_scale = 0.0;

  double cold_build_seconds(const ImageSpec& spec) const {
    if (auto it = build_seconds_by_image.find(spec.image_id); it != build_seconds_by_image.end()) {
      return it->second;
    }
    for (const auto& c : size_classes) {
      if (!c.max_bytes || spec.estimated_bytes <= *c.max_bytes) return c.seconds;
    }
    return build_seconds;
  }

  static SimProfile from_json(const json& j) {
    SimProfile p;
    try {
      p.name = j.value("name", p.name);
      p.seed = j.value("seed", p.seed);
      if (j.contains("base_profiles")) {
        p.base_profiles = j.at("base_profiles").get<std::set<std::string>>();
      }
      p.layer_cache = j.value("layer_cache", p.layer_cache);
      if (j.contains("build_seconds")) {
        const json& b = j.at("build_seconds");
        if (b.is_number()) {
          p.build_seconds = b.get<double>();
        } else {
          p.build_seconds = b.value("default", p.build_seconds);
          if (b.contains("images")) {
            p.build_seconds_by_image = b.at("images").get<std::map<std::string, double>>();
          }
        }
      }
      if (j.contains("size_classes")) {
        for (const auto& c : j.at("size_classes")) {
          SizeClass sc;
          sc.name = c.at("name").get<std::string>();
          if (c.contains("max_bytes") && !c.at("max_bytes").is_null()) {
            sc.max_bytes = c.at("max_bytes").get<std::uint64_t>();
          }
          sc.seconds = c.at("seconds").get<double>();
          p.size_classes.push_back(std::move(sc));
        }
      }
      p.cache_hit_build_seconds = j.value("cache_hit_build_seconds", p.cache_hit_build_seconds);
      if (j.contains("eval_duration")) p.eval_duration = DurationModel::from_json(j.at("eval_duration"));
      p.apply_seconds = j.value("apply_seconds", p.apply_seconds);
      p.resolve_rate = j.value("resolve_rate", p.resolve_rate);
      if (j.contains("faults")) {
        p.infra_fault_rate = j.at("faults").value("infra", 0.0);
        p.timeout_fault_rate = j.at("faults").value("timeout", 0.0);
      }
      if (j.contains("build_failures")) {
        p.build_failures = j.at("build_failures").get<std::set<std::string>>();
      }
      p.max_sandboxes = j.value("max_sandboxes", p.max_sandboxes);
      p.wall_scale = j.value("wall_scale", p.wall_scale);
      if (j.contains("instances")) {
        for (auto it = j.at("instances").begin(); it != j.at("instances").end(); ++it) {
          InstanceProfile ip;
          const json& v = it.value();
          for (Phase ph : {Phase::PrePatch, Phase::PostPatch, Phase::PostGold}) {
            if (!v.contains(phase_name(ph))) continue;
            const json& o = v.at(phase_name(ph));
            PhaseOutcome out;
            if (o.contains("duration")) out.duration = DurationModel::from_json(o.at("duration"));
            if (o.contains("tests")) {
              for (auto t = o.at("tests").begin(); t != o.at("tests").end(); ++t) {
                const std::string s = t.value().get<std::string>();
                if (s != "PASS" && s != "FAIL") throw ProfileError("test outcome must be PASS or FAIL");
                out.tests[t.key()] = s == "PASS";
              }
            }
            ip.phases[ph] = std::move(out);
          }
          if (v.contains("repo")) ip.repo = v.at("repo").get<FileTree>();
          if (v.contains("breaks_with")) ip.breaks_with = v.at("breaks_with").get<std::set<std::string>>();
          p.instances[it.key()] = std::move(ip);
        }
      }
    } catch (const json::exception& e) {
      throw ProfileError(std::string("bad sim profile: ") + e.what());
    }
    auto positive = [](double v) { return v > 0 && std::isfinite(v); };
    if (!positive(p.build_seconds) || !positive(p.cache_hit_build_seconds)) {
      throw ProfileError("build durations must be positive");
    }
    for (const auto& c : p.size_classes) {
      if (!positive(c.seconds)) throw ProfileError("size class durations must be positive");
    }
    for (const auto& [id, s] : p.build_seconds_by_image) {
      if (!positive(s)) throw ProfileError("build duration for " + id + " must be positive");
    }
    if (p.apply_seconds < 0) throw ProfileError("apply_seconds must be non-negative");
    if (!(p.wall_scale >= 0.0 && p.wall_scale < 1.0)) throw ProfileError("wall_scale must lie in [0, 1)");
    for (double rate : {p.resolve_rate, p.infra_fault_rate, p.timeout_fault_rate}) {
      if (!(rate >= 0.0 && rate <= 1.0)) throw ProfileError("rates must lie in [0, 1]");
    }
    if (p.infra_fault_rate + p.timeout_fault_rate > 1.0) throw ProfileError("fault rates sum past 1");
    return p;
  }

  // Profiles are object notation with // line comments allowed.
  static SimProfile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ProfileError("cannot open profile " + path.string());
    json j;
    try {
      j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
      throw ProfileError(path.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

// Deterministic simulated backend. Durations are modeled, not slept; every
// random choice is keyed on (seed, instance, trajectory, phase) so results do
// not depend on call order or thread interleaving.
class SimBackend final : public Backend {
public:
  // `max_sandboxes` of 0 keeps the profile's limit.
  SimBackend(SimProfile profile, std::span<const TaskInstance> instances, std::size_t max_sandboxes = 0)
    : profile_(std::move(profile)),
      gate_(max_sandboxes != 0 ? max_sandboxes : profile_.max_sandboxes) {
    for (const auto& inst : instances) instances_.emplace(inst.instance_id, inst);
  }

  bool simulated() const noexcept override { return true; }
  const SimProfile& profile() const noexcept { return profile_; }
  CapacityGate& capacity() override { return gate_; }
  void set_clock(double now) override { clock_.store(now); }

  BuildResult build_image(const ResolvedImage& image, LayerCache& cache) override {
    const std::string& id = image.spec.image_id;
    if (profile_.base_profiles.count(image.spec.base_profile) == 0) {
      throw BuildFailure(id, "unknown base profile '" + image.spec.base_profile + "'");
    }
    for (const auto& p : image.packages) {
      if (profile_.build_failures.count(p.name) != 0) {
        throw BuildFailure(id, "installing " + p.to_string() + " failed");
      }
    }
    BuildResult r;
    r.layers_total = image.layers.size();
    r.layers_cached = profile_.layer_cache ? cache.claim(image.layers) : 0;
    const double cold = profile_.cold_build_seconds(image.spec);
    const double hit = profile_.cache_hit_build_seconds;
    if (r.layers_cached == r.layers_total) {
      r.seconds = hit;
    } else {
      const double missed = static_cast<double>(r.layers_total - r.layers_cached);
      r.seconds = hit + (cold - hit) * missed / static_cast<double>(r.layers_total);
    }
    r.image = {id, image.content_key(), "sim/" + image.content_key().substr(0, 16)};
    std::lock_guard lock(mutex_);
    auto& pkgs = image_packages_[r.image.ref];
    for (const auto& p : image.packages) pkgs.insert(p.name);
    return r;
  }

  SandboxHandle create_sandbox(const ImageHandle& image, std::uint64_t workdir_seed,
                               const SandboxLabels& labels) override {
    {
      std::lock_guard lock(mutex_);
      if (image_packages_.count(image.ref) == 0) throw BackendError("image " + image.ref + " was never built");
    }
    capacity().acquire();
    SandboxHandle h;
    h.sandbox_id = "sim-" + std::to_string(next_id_.fetch_add(1));
    h.image_id = image.image_id;
    h.workdir = randomized_workdir(workdir_seed);
    h.created_at = clock_.load();
    h.labels = labels;
    h.engine_ref = image.ref;
    State st;
    if (auto it = profile_.instances.find(labels.instance_id); it != profile_.instances.end() && it->second.repo) {
      st.tree = *it->second.repo;
    }
    std::lock_guard lock(mutex_);
    live_.emplace(h.sandbox_id, std::move(st));
    return h;
  }

  ExecResult exec(const SandboxHandle& sb, const std::string& cmd, double timeout) override {
    std::unique_lock lock(mutex_);
    auto it = live_.find(sb.sandbox_id);
    if (it == live_.end()) throw SandboxGone(sb.sandbox_id);
    State& st = it->second;
    auto which = step::of(cmd);
    if (!which) return run_builtin(st, cmd);
    if (*which == step::kCheckout) return {};
    if (*which == step::kWritePatch) {
      auto open = cmd.find("printf '%s' '");
      if (open == std::string::npos) return fail("malformed write step");
      open += 13;
      auto close = cmd.find('\'', open);
      try {
        st.patch = base64_decode(cmd.substr(open, close - open));
      } catch (const std::exception& e) {
        return fail(e.what());
      }
      return {};
    }
    if (*which == step::kApply) return apply(st, timeout);
    if (*which == step::kTest) {
      auto pkgs = image_packages_[sb.engine_ref];
      lock.unlock();
      return run_tests(sb, st.patch, pkgs, timeout);
    }
    return fail("unknown step " + *which);
  }

  void destroy(const SandboxHandle& sb) override {
    std::size_t erased = 0;
    {
      std::lock_guard lock(mutex_);
      erased = live_.erase(sb.sandbox_id);
    }
    if (erased != 0) capacity().release();
  }

  std::size_t live_count() const {
    std::lock_guard lock(mutex_);
    return live_.size();
  }

  // The phase a sandbox's tests run in follows from the patch it received.
  Phase phase_for(const std::string& instance_id, const std::string& patch) const {
    if (patch.empty()) return Phase::PrePatch;
    auto it = instances_.find(instance_id);
    if (it != instances_.end() && it->second.gold_patch == patch) return Phase::PostGold;
    return Phase::PostPatch;
  }

private:
  struct State {
    std::string patch;
    FileTree tree;
    std::set<std::string> files;  // written by builtin commands
  };

  static ExecResult fail(std::string why) {
    ExecResult r;
    r.exit_code = 1;
    r.stderr_text = std::move(why) + "\n";
    return r;
  }

  ExecResult apply(State& st, double timeout) const {
    ExecResult r;
    r.duration = profile_.apply_seconds;
    if (r.duration > timeout) {
      r.duration = timeout;
      r.timed_out = true;
      r.exit_code = kTimeoutExitCode;
      return r;
    }
    try {
      auto parsed = parse_unified_diff(st.patch);
      if (!st.tree.empty()) apply_patch(st.tree, parsed);
    } catch (const PatchError& e) {
      r.exit_code = 1;
      r.stderr_text = std::string("error: ") + e.what() + "\n";
    }
    return r;
  }

  // Enough of a shell for smoke and isolation checks.
  static ExecResult run_builtin(State& st, const std::string& cmd) {
    ExecResult r;
    if (cmd.starts_with("echo ")) {
      r.stdout_text = cmd.substr(5) + "\n";
    } else if (cmd == "echo") {
      r.stdout_text = "\n";
    } else if (cmd.starts_with("touch ")) {
      st.files.insert(cmd.substr(6));
    } else if (cmd.starts_with("test -e ")) {
      r.exit_code = st.files.count(cmd.substr(8)) != 0 || st.tree.count(cmd.substr(8)) != 0 ? 0 : 1;
    } else if (cmd == "true") {
    } else {
      r.exit_code = 127;
      r.stderr_text = "sim: unsupported command\n";
    }
    return r;
  }

  std::uint64_t key(const SandboxHandle& sb, Phase ph, std::string_view what) const {
    std::string k = sb.labels.instance_id + '\x1f' + std::to_string(sb.labels.trajectory) + '\x1f' +
                    phase_name(ph) + '\x1f' + std::string(what);
    return mix64(profile_.seed, k);
  }

  static double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

  ExecResult run_tests(const SandboxHandle& sb, const std::string& patch, const std::set<std::string>& pkgs,
                       double timeout) const {
    const std::string& id = sb.labels.instance_id;
    auto inst_it = instances_.find(id);
    if (inst_it == instances_.end()) return fail("sim: unknown instance " + id);
    const TaskInstance& inst = inst_it->second;
    const Phase ph = phase_for(id, patch);
    const InstanceProfile* ip = nullptr;
    if (auto it = profile_.instances.find(id); it != profile_.instances.end()) ip = &it->second;
    const PhaseOutcome* po = nullptr;
    if (ip) {
      if (auto it = ip->phases.find(ph); it != ip->phases.end()) po = &it->second;
    }

    // Outcome table, in report order.
    std::vector<std::pair<std::string, bool>> tests;
    if (po && !po->tests.empty()) {
      for (const auto& [t, pass] : po->tests) tests.emplace_back(t, pass);
    } else {
      bool fixed = ph == Phase::PostGold;
      if (ph == Phase::PostPatch) {
        fixed = unit(mix64(profile_.seed, "resolve\x1f" + id + '\x1f' + sha256_hex(patch))) < profile_.resolve_rate;
      }
      for (const auto& t : inst.fail_to_pass) tests.emplace_back(t, fixed);
      for (const auto& t : inst.pass_to_pass) tests.emplace_back(t, true);
    }
    if (ip && !ip->breaks_with.empty()) {
      for (const auto& p : ip->breaks_with) {
        if (pkgs.count(p) != 0) {
          for (auto& t : tests) t.second = false;
          break;
        }
      }
    }

    const DurationModel& dm = po && po->duration ? *po->duration : profile_.eval_duration;
    double total = dm.draw(key(sb, ph, "duration"));
    const double u = unit(key(sb, ph, "fault"));
    if (u < profile_.infra_fault_rate) {
      throw BackendError("injected infrastructure fault in " + sb.sandbox_id);
    }
    if (u < profile_.infra_fault_rate + profile_.timeout_fault_rate) {
      total = std::max(total, timeout) * 10.0 + 1.0;
    }

    ExecResult r;
    const bool over = total > timeout;
    const double n = static_cast<double>(std::max<std::size_t>(tests.size(), 1));
    bool all_pass = true;
    for (std::size_t k = 0; k < tests.size(); ++k) {
      // Tests finish evenly spaced across the run.
      const double done_at = total * static_cast<double>(k + 1) / n;
      if (over && done_at > timeout) break;
      r.stdout_text += "TEST " + tests[k].first + (tests[k].second ? " PASS\n" : " FAIL\n");
      all_pass = all_pass && tests[k].second;
    }
    if (profile_.wall_scale > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(std::min(total, timeout) * profile_.wall_scale));
    }
    if (over) {
      r.timed_out = true;
      r.duration = timeout;
      r.exit_code = kTimeoutExitCode;
    } else {
      r.duration = total;
      r.exit_code = all_pass ? 0 : 1;
    }
    return r;
  }

  SimProfile profile_;
  std::unordered_map<std::string, TaskInstance> instances_;
  CapacityGate gate_;
  std::atomic<double> clock_{0.0};
  std::atomic<std::uint64_t> next_id_{1};
  mutable std::mutex mutex_;
  std::map<std::string, std::set<std::string>> image_packages_;
  std::map<std::string, State> live_;
};

}  // namespace shipyard

#endif  // SHIPYARD_SIM_BACKEND_HPP
