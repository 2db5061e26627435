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

// shipyard: prune, build, evaluate and benchmark from the command line.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shipyard/container_backend.hpp"
#include "shipyard/eval.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/pipeline.hpp"
#include "shipyard/pruner.hpp"
#include "shipyard/scheduler.hpp"
#include "shipyard/sim_backend.hpp"

namespace fs = std::filesystem;
using namespace shipyard;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInput = 2;
constexpr int kExitBackend = 3;

// Bad input from the operator: maps to exit code 2.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Config {
  std::string command;
  std::string manifest;
  std::string backend = "sim";
  std::string profile = "table1";
  bool profile_given = false;
  std::size_t builders = 4;
  std::size_t evaluators = 8;
  double timeout = kDefaultTimeoutSeconds;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t workers = 32;
  std::size_t trials = 20;
  std::string dist = "lognormal";
  std::string dist_params;
  std::size_t min_shared = 0;
  bool deterministic = false;
  std::size_t max_sandboxes = 0;
  std::vector<std::string> inputs;  // positional arguments

  json to_json() const {
    return {{"command", command},         {"manifest", manifest},       {"backend", backend},
            {"profile", profile},         {"builders", builders},       {"evaluators", evaluators},
            {"timeout", timeout},         {"seed", seed ? json(*seed) : json(nullptr)},
            {"workers", workers},         {"trials", trials},           {"dist", dist},
            {"dist_params", dist_params}, {"min_shared", min_shared},   {"max_sandboxes", max_sandboxes},
            {"inputs", inputs}};
  }
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

json read_json(const fs::path& p) {
  auto j = json::parse(read_text(p), nullptr, false, true);
  if (j.is_discarded()) throw InputError(p.string() + ": not valid object notation");
  return j;
}

// Run directories are named by a hash of the configuration and never reused.
fs::path make_run_dir(const Config& cfg) {
  const std::string run_id = sha256_hex(cfg.to_json().dump()).substr(0, 12);
  fs::path dir = fs::path(cfg.out) / run_id;
  for (int n = 2; fs::exists(dir); ++n) dir = fs::path(cfg.out) / (run_id + "-" + std::to_string(n));
  fs::create_directories(dir);
  json run = {{"run_id", dir.filename().string()}, {"config", cfg.to_json()}};
  if (!cfg.deterministic) {
    run["started_at"] =
        std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  }
  write_text(dir / "run.json", run.dump(2) + "\n");
  return dir;
}

std::vector<TaskInstance> load_instances(const Config& cfg) {
  if (cfg.manifest.empty()) throw InputError("--manifest is required");
  try {
    return load_manifest(cfg.manifest);
  } catch (const ManifestError& e) {
    throw InputError(cfg.manifest + ": " + e.what());
  }
}

fs::path resolve_profile_path(const std::string& name) {
  fs::path p(name);
  if (fs::exists(p)) return p;
  fs::path bundled = fs::path(SHIPYARD_DATA_DIR) / "profiles" / (name + ".json");
  if (fs::exists(bundled)) return bundled;
  throw InputError("no sim profile '" + name + "' (neither a file nor a bundled profile)");
}

SimProfile load_profile(const Config& cfg) {
  SimProfile p;
  try {
    p = SimProfile::load(resolve_profile_path(cfg.profile));
  } catch (const ProfileError& e) {
    throw InputError(e.what());
  }
  if (const char* env = std::getenv("FORGE_SIM_SEED"); env && *env) {
    try {
      p.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw InputError("FORGE_SIM_SEED must be an unsigned integer");
    }
  }
  if (cfg.seed) p.seed = *cfg.seed;
  return p;
}

std::unique_ptr<Backend> make_backend(const Config& cfg, std::span<const TaskInstance> instances) {
  if (cfg.backend == "sim") {
    return std::make_unique<SimBackend>(load_profile(cfg), instances, cfg.max_sandboxes);
  }
  if (cfg.backend == "container") {
    ContainerOptions opt;
    if (cfg.max_sandboxes) opt.max_sandboxes = cfg.max_sandboxes;
    auto b = std::make_unique<ContainerBackend>(opt);
    b->ping();
    return b;
  }
  throw InputError("unknown backend '" + cfg.backend + "' (expected sim or container)");
}

void check_pools(const Config& cfg) {
  if (cfg.builders == 0 || cfg.evaluators == 0) throw InputError("--builders and --evaluators must be >= 1");
  if (!(cfg.timeout > 0)) throw InputError("--timeout must be positive");
}

PruneReport load_report(const std::string& path) {
  try {
    return prune_report_from_json(read_json(path));
  } catch (const json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
}

std::vector<Submission> load_patches(const std::string& path) {
  std::vector<Submission> subs;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      subs.push_back({j.at("instance_id").get<std::string>(), j.value("trajectory_idx", std::size_t{0}),
                      j.at("patch").get<std::string>()});
    } catch (const json::exception& e) {
      throw InputError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return subs;
}

BuildPlan make_plan(const PruneReport& report, std::span<const TaskInstance> instances) {
  try {
    return plan_builds(report, catalog_from_instances(instances));
  } catch (const UnresolvableConstraint& e) {
    throw InputError(e.what());
  }
}

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

int cmd_prune(const Config& cfg) {
  auto instances = load_instances(cfg);
  SizeModel sm = default_size_model();
  if (!cfg.inputs.empty()) {
    try {
      sm = SizeModel::from_json(read_json(cfg.inputs[0]));
    } catch (const std::exception& e) {
      throw InputError(cfg.inputs[0] + ": " + e.what());
    }
  }
  PruneOptions opt;
  opt.min_shared = cfg.min_shared;
  MergeValidator validator = accept_all_merges();
  std::unique_ptr<Backend> backend;
  if (cfg.profile_given) {
    // Re-validate every merged image on the backend before accepting it.
    backend = make_backend(cfg, instances);
    validator = backend_merge_validator(instances, *backend, catalog_from_instances(instances), cfg.timeout);
  }
  PruneReport report = prune(instances, sm, validator, opt);
  auto s = storage_summary(report, sm);
  fs::path dir = make_run_dir(cfg);
  write_text(dir / "prune_report.json", to_json(report).dump(2) + "\n");
  json summary = {{"instances", s.instance_count}, {"images", s.image_count}, {"bytes_before", s.bytes_before},
                  {"bytes_after", s.bytes_after},  {"ratio", s.ratio}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << "instances=" << s.instance_count << " images=" << s.image_count << " bytes_before=" << s.bytes_before
            << " bytes_after=" << s.bytes_after << " ratio=" << fmt(s.ratio, 4) << "\n";
  std::cout << "report=" << (dir / "prune_report.json").string() << "\n";
  return kExitOk;
}

int cmd_build(const Config& cfg) {
  check_pools(cfg);
  if (cfg.inputs.empty()) throw InputError("build needs a prune report path");
  auto instances = load_instances(cfg);
  auto report = load_report(cfg.inputs[0]);
  auto plan = make_plan(report, instances);
  auto backend = make_backend(cfg, instances);
  PipelineOptions opt;
  opt.builders = cfg.builders;
  opt.evaluators = cfg.evaluators;
  opt.timeout = cfg.timeout;
  opt.run_evals = false;
  auto res = run_pipeline(plan, instances, {}, *backend, opt);
  auto lat = latency_report(res.trace, res.verdicts);
  fs::path dir = make_run_dir(cfg);
  write_text(dir / "trace.json", to_json(res.trace).dump(2) + "\n");
  write_text(dir / "trace.csv", to_csv(res.trace));
  const double layers = static_cast<double>(res.trace.cache_hits + res.trace.cache_misses);
  const double hit_rate = layers > 0 ? static_cast<double>(res.trace.cache_hits) / layers : 0.0;
  std::size_t failed = 0;
  for (const auto& b : res.trace.builds) failed += b.failed ? 1 : 0;
  std::cout << "images=" << plan.images.size() << " failed=" << failed << " mean_build_s=" << fmt(lat.mean_build_s)
            << " cache_hit_rate=" << fmt(hit_rate, 4) << " makespan_s=" << fmt(res.trace.makespan) << "\n";
  return kExitOk;
}

int cmd_eval(const Config& cfg) {
  check_pools(cfg);
  if (cfg.inputs.empty()) throw InputError("eval needs a prune report path");
  auto instances = load_instances(cfg);
  auto report = load_report(cfg.inputs[0]);
  auto subs = cfg.inputs.size() > 1 ? load_patches(cfg.inputs[1]) : gold_submissions(instances);
  auto plan = make_plan(report, instances);
  auto backend = make_backend(cfg, instances);
  PipelineOptions opt;
  opt.builders = cfg.builders;
  opt.evaluators = cfg.evaluators;
  opt.timeout = cfg.timeout;
  opt.workdir_seed = cfg.seed.value_or(0);
  PipelineResult res;
  try {
    res = run_pipeline(plan, instances, subs, *backend, opt);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  auto lat = latency_report(res.trace, res.verdicts);
  fs::path dir = make_run_dir(cfg);
  std::string log;
  std::size_t resolved = 0;
  for (const auto& v : res.verdicts) {
    log += to_json(v).dump() + "\n";
    resolved += v.reward;
    write_text(dir / "artifacts" / v.instance_id / std::to_string(v.trajectory) / "verdict.json",
               to_json(v).dump(2) + "\n");
  }
  for (const auto& s : subs) {
    write_text(dir / "artifacts" / s.instance_id / std::to_string(s.trajectory) / "patch.diff", s.patch);
  }
  write_text(dir / "verdicts.jsonl", log);
  write_text(dir / "latency.json", to_json(lat).dump(2) + "\n");
  write_text(dir / "trace.json", to_json(res.trace).dump(2) + "\n");
  write_text(dir / "trace.csv", to_csv(res.trace));
  std::cout << "resolved=" << resolved << "/" << res.verdicts.size() << " mean_eval_s=" << fmt(lat.mean_eval_s)
            << " pct_2min=" << fmt(lat.pct_within_2min) << "\n";
  std::cout << "run_dir=" << dir.string() << "\n";
  return kExitOk;
}

int cmd_bench_sched(const Config& cfg) {
  std::size_t n = 256;
  if (!cfg.inputs.empty()) {
    try {
      n = std::stoul(cfg.inputs[0]);
    } catch (const std::exception&) {
      throw InputError("item count must be a positive integer");
    }
  }
  if (n == 0 || cfg.workers == 0 || cfg.trials == 0) throw InputError("items, --workers and --trials must be >= 1");
  DistributionSpec dist;
  try {
    dist = DistributionSpec::parse(cfg.dist, cfg.dist_params);
  } catch (const InvalidDistribution& e) {
    throw InputError(e.what());
  }
  const std::uint64_t seed = cfg.seed.value_or(7);
  auto cmp = compare(n, cfg.workers, cfg.trials, dist, seed);
  fs::path dir = make_run_dir(cfg);
  json summary = to_json(cmp);
  summary["distribution"] = {{"name", dist.name()}, {"params", dist.params}};
  summary["items"] = n;
  summary["workers"] = cfg.workers;
  write_text(dir / "comparison.json", summary.dump(2) + "\n");
  auto items = generate_workload(dist, n, mix64(seed));
  write_text(dir / "trace_balanced.csv", to_csv(balanced_batching(items, cfg.workers), items));
  write_text(dir / "trace_producer_consumer.csv", to_csv(producer_consumer(items, cfg.workers), items));
  write_text(dir / "trace_work_stealing.csv", to_csv(work_stealing(items, cfg.workers), items));
  for (std::size_t k = 0; k < cmp.trials.size(); ++k) {
    const auto& t = cmp.trials[k];
    std::cout << "trial=" << k << " balanced_s=" << fmt(t.balanced_makespan) << " producer_consumer_s="
              << fmt(t.pc_makespan) << " speedup=" << fmt(t.ratio, 4) << " work_stealing_s=" << fmt(t.ws_makespan)
              << "\n";
  }
  std::cout << "mean_speedup=" << fmt(cmp.mean_speedup, 4) << " min=" << fmt(cmp.min_speedup, 4)
            << " max=" << fmt(cmp.max_speedup, 4) << " stddev=" << fmt(cmp.stddev_speedup, 4) << "\n";
  std::cout << "work_stealing_mean_speedup=" << fmt(cmp.mean_ws_speedup, 4)
            << " min=" << fmt(cmp.min_ws_speedup, 4) << "\n";
  return kExitOk;
}

int cmd_validate(const Config& cfg) {
  auto instances = load_instances(cfg);
  PruneReport report = cfg.inputs.empty() ? prune(instances, default_size_model()) : load_report(cfg.inputs[0]);
  auto plan = make_plan(report, instances);
  auto backend = make_backend(cfg, instances);
  auto index = index_instances(instances);
  LayerCache cache;
  std::string log;
  std::size_t valid = 0, invalid = 0;
  std::map<std::string, std::size_t> reasons;
  for (const auto& img : plan.images) {
    std::optional<ImageHandle> handle;
    std::string build_error;
    try {
      handle = backend->build_image(img, cache).image;
    } catch (const std::exception& e) {
      build_error = e.what();
    }
    for (const auto& id : img.spec.assigned_instances) {
      auto it = index.find(id);
      if (it == index.end()) continue;
      ValidationResult r;
      r.instance_id = id;
      if (handle) {
        r = validate_instance(*it->second, *backend, *handle, cfg.timeout);
      } else {
        r.reasons.push_back("BuildError: " + build_error);
      }
      (r.valid ? valid : invalid)++;
      for (const auto& why : r.reasons) reasons[why]++;
      log += json{{"instance_id", r.instance_id}, {"valid", r.valid}, {"reasons", r.reasons}}.dump() + "\n";
    }
  }
  fs::path dir = make_run_dir(cfg);
  write_text(dir / "validation.jsonl", log);
  std::cout << "valid=" << valid << " invalid=" << invalid << "\n";
  for (const auto& [why, count] : reasons) std::cout << "  " << count << "x " << why << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shipyard: shared-image pruning, streaming build/eval pipeline and rollout scheduling"};
  app.require_subcommand(1);
  Config cfg;

  auto add_common = [&](CLI::App* sub, bool pools) {
    sub->add_option("--manifest", cfg.manifest, "Line-delimited task instance manifest");
    sub->add_option("--backend", cfg.backend, "sim or container")->capture_default_str();
    sub->add_option("--profile", cfg.profile, "Sim profile: bundled name or file path")->capture_default_str();
    sub->add_option("--timeout", cfg.timeout, "Per-eval hard cap in seconds")->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Seed for every stochastic path");
    sub->add_option("--out", cfg.out, "Output root; each run gets its own directory")->capture_default_str();
    sub->add_flag("--deterministic", cfg.deterministic, "Omit timestamps from reports");
    sub->add_option("--max-sandboxes", cfg.max_sandboxes, "Max live sandboxes (0: backend default)");
    if (pools) {
      sub->add_option("--builders", cfg.builders, "Concurrent image builds")->capture_default_str();
      sub->add_option("--evaluators", cfg.evaluators, "Concurrent evaluations")->capture_default_str();
    }
    sub->add_option("inputs", cfg.inputs, "Positional inputs");
  };

  auto* prune_cmd = app.add_subcommand("prune", "Merge per-instance images; args: [size_model.json]");
  add_common(prune_cmd, false);
  prune_cmd->add_option("--min-shared", cfg.min_shared, "Shared packages required to merge")->capture_default_str();
  auto* build_cmd = app.add_subcommand("build", "Build all images; args: <prune_report.json>");
  add_common(build_cmd, true);
  auto* eval_cmd = app.add_subcommand("eval", "Build and evaluate; args: <prune_report.json> [patches.jsonl]");
  add_common(eval_cmd, true);
  auto* bench_cmd = app.add_subcommand("bench-sched", "Balanced batching vs producer-consumer; args: [items]");
  bench_cmd->add_option("--workers", cfg.workers, "Rollout workers")->capture_default_str();
  bench_cmd->add_option("--trials", cfg.trials, "Batches to compare")->capture_default_str();
  bench_cmd->add_option("--dist", cfg.dist, "constant, uniform, lognormal or pareto")->capture_default_str();
  bench_cmd->add_option("--dist-params", cfg.dist_params, "Comma-separated parameters");
  bench_cmd->add_option("--seed", cfg.seed, "Workload seed (default 7)");
  bench_cmd->add_option("--out", cfg.out, "Output root")->capture_default_str();
  bench_cmd->add_flag("--deterministic", cfg.deterministic, "Omit timestamps from reports");
  bench_cmd->add_option("inputs", cfg.inputs, "Item count");
  auto* validate_cmd = app.add_subcommand("validate", "Check instances before/after the gold patch; args: [prune_report.json]");
  add_common(validate_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInput;
  }

  for (auto* sub : app.get_subcommands()) {
    cfg.command = sub->get_name();
    if (auto* opt = sub->get_option_no_throw("--profile")) cfg.profile_given = opt->count() > 0;
  }

  try {
    if (cfg.command == "prune") return cmd_prune(cfg);
    if (cfg.command == "build") return cmd_build(cfg);
    if (cfg.command == "eval") return cmd_eval(cfg);
    if (cfg.command == "bench-sched") return cmd_bench_sched(cfg);
    if (cfg.command == "validate") return cmd_validate(cfg);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const BackendUnavailable& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
