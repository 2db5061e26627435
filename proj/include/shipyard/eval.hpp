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

#ifndef SHIPYARD_EVAL_HPP
#define SHIPYARD_EVAL_HPP

#include <algorithm>
#include <chrono>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "shipyard/digest.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/sandbox.hpp"

namespace shipyard {

inline constexpr double kDefaultTimeoutSeconds = 120.0;

enum class Status { Resolved, TestsFailed, PatchApplyError, BuildError, Timeout, InfraError };
enum class TestResult { Pass, Fail, NotRun };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::Resolved:
      return "Resolved";
    case Status::TestsFailed:
      return "TestsFailed";
    case Status::PatchApplyError:
      return "PatchApplyError";
    case Status::BuildError:
      return "BuildError";
    case Status::Timeout:
      return "Timeout";
    case Status::InfraError:
      return "InfraError";
  }
  return "?";
}

inline Status status_from_name(const std::string& s) {
  for (Status st : {Status::Resolved, Status::TestsFailed, Status::PatchApplyError, Status::BuildError,
                    Status::Timeout, Status::InfraError}) {
    if (s == status_name(st)) return st;
  }
  throw std::invalid_argument("unknown status '" + s + "'");
}

inline const char* test_result_name(TestResult r) {
  switch (r) {
    case TestResult::Pass:
      return "pass";
    case TestResult::Fail:
      return "fail";
    case TestResult::NotRun:
      return "not_run";
  }
  return "?";
}

using PerTest = std::map<std::string, TestResult>;

struct Verdict {
  std::string instance_id;
  std::size_t trajectory = 0;
  Status status = Status::InfraError;
  PerTest per_test;
  double eval_seconds = 0.0;
  int reward = 0;
  std::string detail;  // first error line, if any

  friend bool operator==(const Verdict&, const Verdict&) = default;
};

inline json to_json(const Verdict& v) {
  json tests = json::object();
  for (const auto& [t, r] : v.per_test) tests[t] = test_result_name(r);
  json j = {{"instance_id", v.instance_id},
            {"trajectory_idx", v.trajectory},
            {"status", status_name(v.status)},
            {"reward", v.reward},
            {"eval_seconds", v.eval_seconds},
            {"per_test", tests}};
  if (!v.detail.empty()) j["detail"] = v.detail;
  return j;
}

// Parses the pivot format: one `TEST <id> PASS|FAIL` line per test. Other
// lines are ignored; a repeated id keeps its last result.
inline PerTest parse_test_output(const std::string& out) {
  PerTest results;
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream words(line);
    std::string tag, id, outcome, extra;
    if (!(words >> tag >> id >> outcome) || tag != "TEST" || (words >> extra)) continue;
    if (outcome == "PASS") {
      results[id] = TestResult::Pass;
    } else if (outcome == "FAIL") {
      results[id] = TestResult::Fail;
    }
  }
  return results;
}

// Restricts `observed` to the instance's test partition, filling missing
// entries with NotRun.
inline PerTest partition_results(const PerTest& observed, const TaskInstance& inst) {
  PerTest out;
  for (const auto* group : {&inst.fail_to_pass, &inst.pass_to_pass}) {
    for (const auto& t : *group) {
      auto it = observed.find(t);
      out[t] = it == observed.end() ? TestResult::NotRun : it->second;
    }
  }
  return out;
}

// Binary reward: resolved iff every listed test was observed passing.
inline std::pair<Status, int> grade(const PerTest& per_test, const TaskInstance& inst) {
  for (const auto* group : {&inst.fail_to_pass, &inst.pass_to_pass}) {
    for (const auto& t : *group) {
      auto it = per_test.find(t);
      if (it == per_test.end() || it->second != TestResult::Pass) return {Status::TestsFailed, 0};
    }
  }
  return {Status::Resolved, 1};
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

// Expands {tests} and {workdir} in a test command template.
inline std::string expand_test_cmd(const TaskInstance& inst, const std::string& workdir) {
  std::string tests;
  for (const auto* group : {&inst.fail_to_pass, &inst.pass_to_pass}) {
    for (const auto& t : *group) {
      if (!tests.empty()) tests += ' ';
      tests += shell_quote(t);
    }
  }
  std::string out;
  const std::string& tpl = inst.test_cmd;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 7, "{tests}") == 0) {
      out += tests;
      i += 7;
    } else if (tpl.compare(i, 9, "{workdir}") == 0) {
      out += shell_quote(workdir);
      i += 9;
    } else {
      out += tpl[i++];
    }
  }
  return out;
}

namespace detail {

// Destroys the sandbox on every exit path.
class SandboxGuard {
public:
  SandboxGuard(Backend& backend, SandboxHandle handle) : backend_(backend), handle_(std::move(handle)) {}
  ~SandboxGuard() {
    try {
      backend_.destroy(handle_);
    } catch (...) {
    }
  }
  SandboxGuard(const SandboxGuard&) = delete;
  SandboxGuard& operator=(const SandboxGuard&) = delete;
  const SandboxHandle& get() const { return handle_; }

private:
  Backend& backend_;
  SandboxHandle handle_;
};

inline std::string first_line(const std::string& s) {
  auto nl = s.find('\n');
  return nl == std::string::npos ? s : s.substr(0, nl);
}

}  // namespace detail

struct EvalOptions {
  double timeout = kDefaultTimeoutSeconds;
  std::size_t trajectory = 0;
  std::uint64_t workdir_seed = 0;
  // How long to wait for a free sandbox slot before giving up.
  std::chrono::milliseconds capacity_wait{std::chrono::minutes(10)};
};

// Grades `patch` for `inst` in a fresh sandbox. The timeout covers patch
// application and test execution together. Never throws.
inline Verdict evaluate(const TaskInstance& inst, const std::string& patch, Backend& backend,
                        const ImageHandle& image, const EvalOptions& opt = {}) {
  Verdict v;
  v.instance_id = inst.instance_id;
  v.trajectory = opt.trajectory;
  v.per_test = partition_results({}, inst);
  const double cap = opt.timeout;

  auto infra = [&](const std::string& why) {
    v.status = Status::InfraError;
    v.reward = 0;
    v.detail = why;
    return v;
  };

  std::optional<SandboxHandle> handle;
  const auto deadline = std::chrono::steady_clock::now() + opt.capacity_wait;
  const std::uint64_t seed = opt.workdir_seed ^ mix64(opt.trajectory, inst.instance_id);
  try {
    while (!handle) {
      try {
        handle = backend.create_sandbox(image, seed, {inst.instance_id, opt.trajectory});
      } catch (const ResourceExhausted&) {
        if (std::chrono::steady_clock::now() >= deadline) throw;
        backend.capacity().wait(std::chrono::milliseconds(50));
      }
    }
  } catch (const std::exception& e) {
    return infra(e.what());
  }

  detail::SandboxGuard guard(backend, *handle);
  const SandboxHandle& sb = guard.get();
  const std::string repo_dir = sb.workdir + "/repo";
  double used = 0.0;

  auto timed_out = [&](const PerTest& observed) {
    v.status = Status::Timeout;
    v.reward = 0;
    v.eval_seconds = cap;
    v.per_test = partition_results(observed, inst);
    return v;
  };

  try {
    std::string checkout = step::marker(step::kCheckout) + "mkdir -p " + shell_quote(repo_dir);
    if (!inst.repo.empty()) {
      checkout = step::marker(step::kCheckout) + "git clone --quiet " + shell_quote(inst.repo) + " " +
                 shell_quote(repo_dir) + " && git -C " + shell_quote(repo_dir) + " checkout --quiet " +
                 shell_quote(inst.base_commit);
    }
    ExecResult co = backend.exec(sb, checkout, cap);
    if (co.timed_out || co.exit_code != 0) {
      return infra("checkout failed: " + detail::first_line(co.stderr_text));
    }

    if (!patch.empty()) {
      const std::string file = sb.workdir + "/.shipyard.patch";
      ExecResult w = backend.exec(
          sb, step::marker(step::kWritePatch) + "printf '%s' '" + base64_encode(patch) + "' | base64 -d > " +
                  shell_quote(file),
          cap);
      if (w.exit_code != 0) return infra("writing patch failed: " + detail::first_line(w.stderr_text));
      const std::string q = shell_quote(file);
      ExecResult a = backend.exec(
          sb,
          step::marker(step::kApply) + "cd " + shell_quote(repo_dir) +
              " && if command -v git >/dev/null 2>&1; then git apply --whitespace=nowarn " + q +
              "; else patch -p1 -F0 --batch --silent -i " + q + "; fi",
          cap);
      used += a.duration;
      if (a.timed_out || used >= cap) return timed_out({});
      if (a.exit_code != 0) {
        v.status = Status::PatchApplyError;
        v.reward = 0;
        v.eval_seconds = used;
        v.detail = detail::first_line(a.stderr_text.empty() ? a.stdout_text : a.stderr_text);
        return v;
      }
    }

    const double remaining = cap - used;
    ExecResult t = backend.exec(
        sb, step::marker(step::kTest) + "cd " + shell_quote(repo_dir) + " && " + expand_test_cmd(inst, sb.workdir),
        remaining);
    PerTest observed = parse_test_output(t.stdout_text);
    if (t.timed_out || used + t.duration > cap) return timed_out(observed);
    v.per_test = partition_results(observed, inst);
    auto [status, reward] = grade(v.per_test, inst);
    v.status = status;
    v.reward = reward;
    v.eval_seconds = std::min(cap, used + t.duration);
    return v;
  } catch (const std::exception& e) {
    return infra(e.what());
  }
}

struct ValidationResult {
  std::string instance_id;
  bool valid = false;
  std::vector<std::string> reasons;
};

// Checks the instance's tests behave as declared: before the gold patch every
// FAIL_TO_PASS test fails and every PASS_TO_PASS test passes; after it,
// everything passes.
inline ValidationResult validate_instance(const TaskInstance& inst, Backend& backend, const ImageHandle& image,
                                          double timeout = kDefaultTimeoutSeconds) {
  ValidationResult out;
  out.instance_id = inst.instance_id;
  EvalOptions opt;
  opt.timeout = timeout;

  auto phase_error = [&](const Verdict& v, const char* phase) {
    if (v.status == Status::InfraError) {
      out.reasons.push_back(std::string("InfraError ") + phase + ": " + v.detail);
      return true;
    }
    if (v.status == Status::Timeout) {
      out.reasons.push_back(std::string("Timeout ") + phase);
      return true;
    }
    if (v.status == Status::PatchApplyError) {
      out.reasons.push_back("gold patch does not apply: " + v.detail);
      return true;
    }
    return false;
  };

  Verdict pre = evaluate(inst, "", backend, image, opt);
  if (!phase_error(pre, "pre-patch")) {
    for (const auto& t : inst.fail_to_pass) {
      if (pre.per_test.at(t) == TestResult::Pass) out.reasons.push_back("F2P " + t + " passes pre-patch");
    }
    for (const auto& t : inst.pass_to_pass) {
      if (pre.per_test.at(t) != TestResult::Pass) out.reasons.push_back("P2P " + t + " fails pre-patch");
    }
  }
  Verdict post = evaluate(inst, inst.gold_patch, backend, image, opt);
  if (!phase_error(post, "post-gold")) {
    for (const auto& t : inst.fail_to_pass) {
      if (post.per_test.at(t) != TestResult::Pass) out.reasons.push_back("F2P " + t + " fails post-gold");
    }
    for (const auto& t : inst.pass_to_pass) {
      if (post.per_test.at(t) != TestResult::Pass) out.reasons.push_back("P2P " + t + " fails post-gold");
    }
  }
  out.valid = out.reasons.empty();
  return out;
}

}  // namespace shipyard

#endif  // SHIPYARD_EVAL_HPP
