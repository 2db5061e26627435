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

#ifndef SHIPYARD_PIPELINE_HPP
#define SHIPYARD_PIPELINE_HPP

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "shipyard/eval.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/pruner.hpp"
#include "shipyard/sandbox.hpp"

namespace shipyard {

class UnresolvableConstraint : public std::runtime_error {
public:
  UnresolvableConstraint(std::string image_id, std::string package, const std::string& constraint)
    : std::runtime_error("image " + image_id + ": no known version of " + package + " satisfies " + constraint),
      image_id_(std::move(image_id)), package_(std::move(package)) {}
  const std::string& image_id() const noexcept { return image_id_; }
  const std::string& package() const noexcept { return package_; }

private:
  std::string image_id_;
  std::string package_;
};

// Known concrete versions per package.
using VersionCatalog = std::map<std::string, std::set<Version>>;

// Every version a manifest names: exact pins and range floors. Range ceilings
// are exclusive and so are never themselves candidates.
inline VersionCatalog catalog_from_instances(std::span<const TaskInstance> instances) {
  VersionCatalog cat;
  for (const auto& inst : instances) {
    for (const auto& d : inst.deps) {
      auto& versions = cat[d.name];
      if (auto* e = d.constraint.as_exact()) versions.insert(e->version);
      if (auto* r = d.constraint.as_range(); r && r->min) versions.insert(*r->min);
    }
  }
  return cat;
}

inline VersionCatalog catalog_from_json(const json& j) {
  VersionCatalog cat;
  for (auto it = j.begin(); it != j.end(); ++it) {
    for (const auto& v : it.value()) cat[it.key()].insert(Version::parse(v.get<std::string>()));
  }
  return cat;
}

// Resolves each constraint to the largest catalog version it admits. An
// unconstrained package with no known versions installs unpinned.
inline ResolvedImage resolve_image(const ImageSpec& spec, const VersionCatalog& catalog) {
  ResolvedImage out;
  out.spec = spec;
  for (const auto& [name, c] : spec.packages) {
    std::optional<Version> v;
    if (auto it = catalog.find(name); it != catalog.end()) v = max_satisfying(c, it->second);
    if (!v && !c.is_any()) throw UnresolvableConstraint(spec.image_id, name, c.to_string());
    out.packages.push_back({name, v});
  }
  out.layers = layer_keys(spec.base_profile, out.packages);
  return out;
}

struct BuildPlan {
  std::vector<ResolvedImage> images;

  std::optional<std::size_t> index_of(const std::string& image_id) const {
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].spec.image_id == image_id) return i;
    }
    return std::nullopt;
  }

  std::size_t unique_layers() const {
    std::set<std::string> keys;
    for (const auto& img : images) keys.insert(img.layers.begin(), img.layers.end());
    return keys.size();
  }
};

// Orders images by package count then id, and points each image at the
// earlier image sharing its longest layer prefix. A build waits for its
// parent so the shared prefix is built once.
inline BuildPlan plan_builds(const PruneReport& report, const VersionCatalog& catalog) {
  BuildPlan plan;
  for (const auto& img : report.images) plan.images.push_back(resolve_image(img, catalog));
  std::stable_sort(plan.images.begin(), plan.images.end(), [](const ResolvedImage& a, const ResolvedImage& b) {
    if (a.packages.size() != b.packages.size()) return a.packages.size() < b.packages.size();
    return a.spec.image_id < b.spec.image_id;
  });
  for (std::size_t i = 0; i < plan.images.size(); ++i) {
    auto& img = plan.images[i];
    std::size_t best = 0;
    for (std::size_t j = 0; j < i; ++j) {
      const auto& other = plan.images[j];
      std::size_t k = 0;
      while (k < img.layers.size() && k < other.layers.size() && img.layers[k] == other.layers[k]) ++k;
      // k counts the base layer too.
      if (k > 1 && k - 1 > best) {
        best = k - 1;
        img.parent = j;
      }
    }
    img.shared_prefix = best;
  }
  return plan;
}

// One patch to grade: (instance, trajectory) plus the diff.
struct Submission {
  std::string instance_id;
  std::size_t trajectory = 0;
  std::string patch;
};

inline std::vector<Submission> gold_submissions(std::span<const TaskInstance> instances) {
  std::vector<Submission> out;
  for (const auto& inst : instances) out.push_back({inst.instance_id, 0, inst.gold_patch});
  return out;
}

struct BuildEvent {
  std::string image_id;
  double start = 0.0;
  double finish = 0.0;
  std::size_t builder = 0;
  bool failed = false;
  std::size_t layers_total = 0;
  std::size_t layers_cached = 0;
  std::string content_key;
  std::string error;
};

struct EvalEvent {
  std::string instance_id;
  std::size_t trajectory = 0;
  std::string image_id;
  double eligible = 0.0;
  double start = 0.0;
  double finish = 0.0;
  std::size_t evaluator = 0;
};

struct PipelineTrace {
  std::string mode;  // "events", "threads" or "sequential"
  std::size_t builders = 0;
  std::size_t evaluators = 0;
  std::vector<BuildEvent> builds;
  std::vector<EvalEvent> evals;
  double makespan = 0.0;
  double builder_idle_fraction = 0.0;
  double evaluator_idle_fraction = 0.0;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
  std::size_t peak_sandboxes = 0;
  std::size_t peak_queue = 0;
  std::size_t max_builds_in_flight = 0;

  const BuildEvent* build_of(const std::string& image_id) const {
    for (const auto& b : builds) {
      if (b.image_id == image_id) return &b;
    }
    return nullptr;
  }
};

namespace detail {

inline std::size_t max_overlap(std::vector<std::pair<double, double>> intervals) {
  std::vector<std::pair<double, int>> points;
  for (const auto& [s, f] : intervals) {
    if (f <= s) continue;
    points.emplace_back(s, +1);
    points.emplace_back(f, -1);
  }
  // Ends sort before starts at the same instant.
  std::sort(points.begin(), points.end());
  std::size_t cur = 0;
  std::size_t best = 0;
  for (const auto& [t, d] : points) {
    cur = d > 0 ? cur + 1 : cur - 1;
    best = std::max(best, cur);
  }
  return best;
}

inline void finish_trace(PipelineTrace& tr) {
  double busy_b = 0.0;
  double busy_e = 0.0;
  tr.makespan = 0.0;
  std::vector<std::pair<double, double>> build_iv;
  for (const auto& b : tr.builds) {
    tr.makespan = std::max(tr.makespan, b.finish);
    busy_b += b.finish - b.start;
    build_iv.emplace_back(b.start, b.finish);
    if (!b.failed) {
      tr.cache_hits += b.layers_cached;
      tr.cache_misses += b.layers_total - b.layers_cached;
    }
  }
  for (const auto& e : tr.evals) {
    tr.makespan = std::max(tr.makespan, e.finish);
    busy_e += e.finish - e.start;
  }
  tr.max_builds_in_flight = max_overlap(build_iv);
  if (tr.makespan > 0) {
    tr.builder_idle_fraction = 1.0 - busy_b / (static_cast<double>(tr.builders) * tr.makespan);
    tr.evaluator_idle_fraction = 1.0 - busy_e / (static_cast<double>(tr.evaluators) * tr.makespan);
  }
}

inline bool verdict_order(const Verdict& a, const Verdict& b) {
  return std::tie(a.instance_id, a.trajectory) < std::tie(b.instance_id, b.trajectory);
}

}  // namespace detail

inline json to_json(const PipelineTrace& tr) {
  json builds = json::array();
  for (const auto& b : tr.builds) {
    builds.push_back({{"image_id", b.image_id},
                      {"start", b.start},
                      {"finish", b.finish},
                      {"builder", b.builder},
                      {"failed", b.failed},
                      {"layers_total", b.layers_total},
                      {"layers_cached", b.layers_cached},
                      {"content_key", b.content_key},
                      {"error", b.error}});
  }
  json evals = json::array();
  for (const auto& e : tr.evals) {
    evals.push_back({{"instance_id", e.instance_id},
                     {"trajectory_idx", e.trajectory},
                     {"image_id", e.image_id},
                     {"eligible", e.eligible},
                     {"start", e.start},
                     {"finish", e.finish},
                     {"evaluator", e.evaluator}});
  }
  return {{"mode", tr.mode},
          {"builders", tr.builders},
          {"evaluators", tr.evaluators},
          {"makespan", tr.makespan},
          {"builder_idle_fraction", tr.builder_idle_fraction},
          {"evaluator_idle_fraction", tr.evaluator_idle_fraction},
          {"cache_hits", tr.cache_hits},
          {"cache_misses", tr.cache_misses},
          {"peak_sandboxes", tr.peak_sandboxes},
          {"peak_queue", tr.peak_queue},
          {"max_builds_in_flight", tr.max_builds_in_flight},
          {"builds", builds},
          {"evals", evals}};
}

inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Plot-ready rows: kind,id,lane,start,end.
inline std::string to_csv(const PipelineTrace& tr) {
  std::string out = "kind,id,lane,start,end\n";
  for (const auto& b : tr.builds) {
    out += std::string(b.failed ? "build_failed" : "build") + "," + b.image_id + ",builder" +
           std::to_string(b.builder) + "," + csv_number(b.start) + "," + csv_number(b.finish) + "\n";
  }
  for (const auto& e : tr.evals) {
    out += "eval," + e.instance_id + "#" + std::to_string(e.trajectory) + ",evaluator" + std::to_string(e.evaluator) +
           "," + csv_number(e.start) + "," + csv_number(e.finish) + "\n";
  }
  return out;
}

struct PipelineOptions {
  std::size_t builders = 1;
  std::size_t evaluators = 1;
  double timeout = kDefaultTimeoutSeconds;
  enum class Mode { Auto, Events, Threads } mode = Mode::Auto;
  bool run_evals = true;  // false: build only
  std::uint64_t workdir_seed = 0;
};

struct PipelineResult {
  std::vector<Verdict> verdicts;  // sorted by (instance, trajectory)
  PipelineTrace trace;
};

namespace detail {

struct Unit {
  const TaskInstance* inst = nullptr;
  const Submission* sub = nullptr;
  std::size_t image = 0;
  double eligible = 0.0;
};

struct Workload {
  std::vector<std::vector<Unit>> by_image;  // sorted by (instance, trajectory)
};

inline Workload make_workload(const BuildPlan& plan, std::span<const TaskInstance> instances,
                              std::span<const Submission> subs) {
  std::unordered_map<std::string, const TaskInstance*> by_id;
  for (const auto& inst : instances) by_id.emplace(inst.instance_id, &inst);
  std::unordered_map<std::string, std::size_t> image_of;
  for (std::size_t i = 0; i < plan.images.size(); ++i) {
    for (const auto& id : plan.images[i].spec.assigned_instances) image_of.emplace(id, i);
  }
  Workload w;
  w.by_image.resize(plan.images.size());
  std::set<std::pair<std::string, std::size_t>> seen;
  for (const auto& s : subs) {
    auto inst = by_id.find(s.instance_id);
    if (inst == by_id.end()) throw std::invalid_argument("submission for unknown instance " + s.instance_id);
    auto img = image_of.find(s.instance_id);
    if (img == image_of.end()) throw std::invalid_argument("instance " + s.instance_id + " has no image in the plan");
    if (!seen.insert({s.instance_id, s.trajectory}).second) {
      throw std::invalid_argument("duplicate submission " + s.instance_id + "#" + std::to_string(s.trajectory));
    }
    w.by_image[img->second].push_back({inst->second, &s, img->second, 0.0});
  }
  for (auto& units : w.by_image) {
    std::sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) {
      return std::tie(a.inst->instance_id, a.sub->trajectory) < std::tie(b.inst->instance_id, b.sub->trajectory);
    });
  }
  return w;
}

inline Verdict build_error_verdict(const Unit& u, const std::string& why) {
  Verdict v;
  v.instance_id = u.inst->instance_id;
  v.trajectory = u.sub->trajectory;
  v.status = Status::BuildError;
  v.per_test = partition_results({}, *u.inst);
  v.detail = why;
  return v;
}

inline EvalOptions eval_options(const PipelineOptions& opt, const Unit& u) {
  EvalOptions e;
  e.timeout = opt.timeout;
  e.trajectory = u.sub->trajectory;
  e.workdir_seed = opt.workdir_seed;
  return e;
}

// Discrete-event run on the simulated clock. Backend calls happen at event
// start and report modeled durations; nothing sleeps.
inline PipelineResult run_events(const BuildPlan& plan, const Workload& work, Backend& backend,
                                 const PipelineOptions& opt) {
  PipelineResult res;
  PipelineTrace& tr = res.trace;
  tr.mode = "events";
  tr.builders = opt.builders;
  tr.evaluators = opt.evaluators;
  LayerCache cache;

  const std::size_t n = plan.images.size();
  const std::size_t queue_cap = 4 * opt.evaluators;
  const std::size_t eval_slots = std::min(opt.evaluators, backend.capacity().limit());

  enum class ImgState { Pending, Building, Done, Failed };
  std::vector<ImgState> state(n, ImgState::Pending);
  std::vector<std::optional<ImageHandle>> handles(n);

  struct Builder {
    bool busy = false;
    std::deque<Unit> blocked;  // finished build output waiting for queue space
    double blocked_since = 0.0;
    std::size_t image = 0;
    std::size_t event = 0;
  };
  std::vector<Builder> builders(opt.builders);
  std::vector<bool> eval_busy(opt.evaluators, false);
  std::vector<Unit> eval_unit(opt.evaluators);
  std::vector<std::size_t> eval_event(opt.evaluators);
  std::deque<Unit> queue;
  std::size_t live = 0;

  // (time, seq, kind, worker)
  using Ev = std::tuple<double, std::uint64_t, int, std::size_t>;
  std::priority_queue<Ev, std::vector<Ev>, std::greater<>> events;
  std::uint64_t seq = 0;
  double now = 0.0;

  auto ready = [&](std::size_t i) {
    if (state[i] != ImgState::Pending) return false;
    auto p = plan.images[i].parent;
    return !p || state[*p] == ImgState::Done || state[*p] == ImgState::Failed;
  };

  auto dispatch = [&] {
    bool progress = true;
    while (progress) {
      progress = false;
      // Blocked builders hand over output in the order their builds ended.
      std::vector<std::size_t> waiting;
      for (std::size_t b = 0; b < builders.size(); ++b) {
        if (!builders[b].blocked.empty()) waiting.push_back(b);
      }
      std::stable_sort(waiting.begin(), waiting.end(), [&](std::size_t x, std::size_t y) {
        return builders[x].blocked_since < builders[y].blocked_since;
      });
      for (std::size_t b : waiting) {
        while (!builders[b].blocked.empty() && queue.size() < queue_cap) {
          queue.push_back(builders[b].blocked.front());
          builders[b].blocked.pop_front();
          progress = true;
        }
      }
      tr.peak_queue = std::max(tr.peak_queue, queue.size());
      for (std::size_t e = 0; e < eval_busy.size() && !queue.empty() && live < eval_slots; ++e) {
        if (eval_busy[e]) continue;
        Unit u = queue.front();
        queue.pop_front();
        backend.set_clock(now);
        Verdict v = evaluate(*u.inst, u.sub->patch, backend, *handles[u.image], eval_options(opt, u));
        eval_busy[e] = true;
        eval_unit[e] = u;
        ++live;
        tr.peak_sandboxes = std::max(tr.peak_sandboxes, live);
        eval_event[e] = tr.evals.size();
        tr.evals.push_back({u.inst->instance_id, u.sub->trajectory, plan.images[u.image].spec.image_id, u.eligible,
                            now, now + v.eval_seconds, e});
        events.emplace(now + v.eval_seconds, seq++, 1, e);
        res.verdicts.push_back(std::move(v));
        progress = true;
      }
      for (std::size_t b = 0; b < builders.size(); ++b) {
        if (builders[b].busy || !builders[b].blocked.empty()) continue;
        std::optional<std::size_t> next;
        for (std::size_t i = 0; i < n; ++i) {
          if (ready(i)) {
            next = i;
            break;
          }
        }
        if (!next) break;
        state[*next] = ImgState::Building;
        backend.set_clock(now);
        BuildEvent ev{plan.images[*next].spec.image_id, now, now, b, false, plan.images[*next].layers.size(), 0, "", ""};
        try {
          LayerCache view = cache.snapshot();
          BuildResult r = backend.build_image(plan.images[*next], view);
          handles[*next] = r.image;
          ev.finish = now + r.seconds;
          ev.layers_cached = r.layers_cached;
          ev.content_key = r.image.content_key;
        } catch (const std::exception& f) {
          ev.failed = true;
          ev.error = f.what();
        }
        builders[b].busy = true;
        builders[b].image = *next;
        builders[b].event = tr.builds.size();
        tr.builds.push_back(ev);
        events.emplace(ev.finish, seq++, 0, b);
        progress = true;
      }
    }
  };

  dispatch();
  while (!events.empty()) {
    auto [t, s, kind, w] = events.top();
    events.pop();
    now = t;
    if (kind == 0) {
      Builder& b = builders[w];
      b.busy = false;
      const BuildEvent& ev = tr.builds[b.event];
      if (ev.failed) {
        state[b.image] = ImgState::Failed;
        for (const auto& u : work.by_image[b.image]) {
          res.verdicts.push_back(build_error_verdict(u, ev.error));
        }
      } else {
        state[b.image] = ImgState::Done;
        cache.commit(plan.images[b.image].layers);
        if (opt.run_evals) {
          for (Unit u : work.by_image[b.image]) {
            u.eligible = now;
            b.blocked.push_back(u);
          }
          b.blocked_since = now;
        }
      }
    } else {
      eval_busy[w] = false;
      --live;
    }
    dispatch();
  }
  std::sort(res.verdicts.begin(), res.verdicts.end(), verdict_order);
  finish_trace(tr);
  return res;
}

// Real concurrency: two thread pools joined by a bounded queue. Times are
// wall-clock seconds since the run started.
inline PipelineResult run_threads(const BuildPlan& plan, const Workload& work, Backend& backend,
                                  const PipelineOptions& opt) {
  PipelineResult res;
  PipelineTrace& tr = res.trace;
  tr.mode = "threads";
  tr.builders = opt.builders;
  tr.evaluators = opt.evaluators;
  LayerCache cache;

  const std::size_t n = plan.images.size();
  const std::size_t queue_cap = 4 * opt.evaluators;
  const auto t0 = std::chrono::steady_clock::now();
  auto clock = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  std::mutex m;
  std::condition_variable cv;
  enum class ImgState { Pending, Building, Done, Failed };
  std::vector<ImgState> state(n, ImgState::Pending);
  std::vector<std::optional<ImageHandle>> handles(n);
  std::deque<Unit> queue;
  std::size_t settled = 0;
  std::size_t pushing = 0;  // builders still handing over output

  auto ready = [&](std::size_t i) {
    if (state[i] != ImgState::Pending) return false;
    auto p = plan.images[i].parent;
    return !p || state[*p] == ImgState::Done || state[*p] == ImgState::Failed;
  };

  auto builder = [&](std::size_t b) {
    for (;;) {
      std::size_t next = n;
      {
        std::unique_lock lock(m);
        cv.wait(lock, [&] {
          if (settled == n) return true;
          for (std::size_t i = 0; i < n; ++i) {
            if (ready(i)) return true;
          }
          return false;
        });
        for (std::size_t i = 0; i < n; ++i) {
          if (ready(i)) {
            next = i;
            break;
          }
        }
        if (next == n) return;
        state[next] = ImgState::Building;
        ++pushing;
      }
      BuildEvent ev{plan.images[next].spec.image_id, clock(), 0.0, b, false, plan.images[next].layers.size(), 0, "", ""};
      try {
        LayerCache view = cache.snapshot();
        BuildResult r = backend.build_image(plan.images[next], view);
        handles[next] = r.image;
        ev.layers_cached = r.layers_cached;
        ev.content_key = r.image.content_key;
        cache.commit(plan.images[next].layers);
      } catch (const std::exception& f) {
        ev.failed = true;
        ev.error = f.what();
      }
      ev.finish = clock();
      std::unique_lock lock(m);
      tr.builds.push_back(ev);
      state[next] = ev.failed ? ImgState::Failed : ImgState::Done;
      ++settled;
      cv.notify_all();
      if (ev.failed) {
        for (const auto& u : work.by_image[next]) res.verdicts.push_back(build_error_verdict(u, ev.error));
      } else if (opt.run_evals) {
        for (Unit u : work.by_image[next]) {
          u.eligible = ev.finish;
          cv.wait(lock, [&] { return queue.size() < queue_cap; });
          queue.push_back(u);
          tr.peak_queue = std::max(tr.peak_queue, queue.size());
          cv.notify_all();
        }
      }
      --pushing;
      cv.notify_all();
    }
  };

  auto evaluator = [&](std::size_t e) {
    for (;;) {
      Unit u;
      {
        std::unique_lock lock(m);
        cv.wait(lock, [&] { return !queue.empty() || (settled == n && pushing == 0); });
        if (queue.empty()) return;
        u = queue.front();
        queue.pop_front();
        cv.notify_all();
      }
      const double start = clock();
      Verdict v = evaluate(*u.inst, u.sub->patch, backend, *handles[u.image], eval_options(opt, u));
      const double finish = clock();
      std::lock_guard lock(m);
      tr.evals.push_back({u.inst->instance_id, u.sub->trajectory, plan.images[u.image].spec.image_id, u.eligible,
                          start, finish, e});
      res.verdicts.push_back(std::move(v));
    }
  };

  {
    std::vector<std::jthread> pool;
    for (std::size_t b = 0; b < opt.builders; ++b) pool.emplace_back(builder, b);
    for (std::size_t e = 0; e < opt.evaluators; ++e) pool.emplace_back(evaluator, e);
  }
  tr.peak_sandboxes = backend.capacity().peak();
  std::sort(tr.builds.begin(), tr.builds.end(),
            [](const BuildEvent& a, const BuildEvent& b) { return std::tie(a.start, a.image_id) < std::tie(b.start, b.image_id); });
  std::sort(tr.evals.begin(), tr.evals.end(), [](const EvalEvent& a, const EvalEvent& b) {
    return std::tie(a.start, a.instance_id, a.trajectory) < std::tie(b.start, b.instance_id, b.trajectory);
  });
  std::sort(res.verdicts.begin(), res.verdicts.end(), verdict_order);
  finish_trace(tr);
  return res;
}

}  // namespace detail

// Streaming build and evaluate: an instance becomes eligible the moment its
// image is built while other builds continue.
inline PipelineResult run_pipeline(const BuildPlan& plan, std::span<const TaskInstance> instances,
                                   std::span<const Submission> submissions, Backend& backend,
                                   const PipelineOptions& opt) {
  if (opt.builders == 0 || opt.evaluators == 0) throw std::invalid_argument("builders and evaluators must be >= 1");
  if (!(opt.timeout > 0)) throw std::invalid_argument("timeout must be positive");
  auto work = detail::make_workload(plan, instances, submissions);
  bool events = opt.mode == PipelineOptions::Mode::Events ||
                (opt.mode == PipelineOptions::Mode::Auto && backend.simulated());
  return events ? detail::run_events(plan, work, backend, opt) : detail::run_threads(plan, work, backend, opt);
}

// Builds every image one at a time without a layer cache, then evaluates
// every submission one at a time.
inline PipelineResult sequential_baseline(const BuildPlan& plan, std::span<const TaskInstance> instances,
                                          std::span<const Submission> submissions, Backend& backend,
                                          double timeout = kDefaultTimeoutSeconds, std::uint64_t workdir_seed = 0) {
  auto work = detail::make_workload(plan, instances, submissions);
  PipelineResult res;
  PipelineTrace& tr = res.trace;
  tr.mode = "sequential";
  tr.builders = 1;
  tr.evaluators = 1;
  LayerCache cache(false);
  PipelineOptions opt;
  opt.timeout = timeout;
  opt.workdir_seed = workdir_seed;
  const bool sim = backend.simulated();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  double now = 0.0;

  std::vector<std::optional<ImageHandle>> handles(plan.images.size());
  std::vector<detail::Unit> units;
  for (std::size_t i = 0; i < plan.images.size(); ++i) {
    backend.set_clock(now);
    BuildEvent ev{plan.images[i].spec.image_id, now, now, 0, false, plan.images[i].layers.size(), 0, "", ""};
    try {
      BuildResult r = backend.build_image(plan.images[i], cache);
      handles[i] = r.image;
      ev.layers_cached = r.layers_cached;
      ev.content_key = r.image.content_key;
      now = sim ? now + r.seconds : wall();
      for (auto u : work.by_image[i]) {
        u.eligible = now;
        units.push_back(u);
      }
    } catch (const std::exception& f) {
      ev.failed = true;
      ev.error = f.what();
      now = sim ? now : wall();
      for (const auto& u : work.by_image[i]) res.verdicts.push_back(detail::build_error_verdict(u, ev.error));
    }
    ev.finish = now;
    tr.builds.push_back(ev);
  }
  std::sort(units.begin(), units.end(), [](const detail::Unit& a, const detail::Unit& b) {
    return std::tie(a.inst->instance_id, a.sub->trajectory) < std::tie(b.inst->instance_id, b.sub->trajectory);
  });
  for (const auto& u : units) {
    backend.set_clock(now);
    const double start = now;
    Verdict v = evaluate(*u.inst, u.sub->patch, backend, *handles[u.image], detail::eval_options(opt, u));
    now = sim ? now + v.eval_seconds : wall();
    tr.evals.push_back({u.inst->instance_id, u.sub->trajectory, plan.images[u.image].spec.image_id, u.eligible, start,
                        now, 0});
    res.verdicts.push_back(std::move(v));
  }
  tr.peak_sandboxes = units.empty() ? 0 : 1;
  std::sort(res.verdicts.begin(), res.verdicts.end(), detail::verdict_order);
  detail::finish_trace(tr);
  return res;
}

inline constexpr double kTwoMinutes = 120.0;

struct LatencyReport {
  double mean_build_s = 0.0;
  double mean_eval_s = 0.0;
  // Evals finished by the two-minute mark; a timeout counts as finishing
  // at the cap.
  double pct_within_120s = 0.0;
  // Evals that completed (no timeout) within two minutes.
  double pct_within_2min = 0.0;
  std::size_t builds = 0;
  std::size_t evals = 0;
  std::size_t timeouts = 0;
};

// Eval statistics come from verdicts; BuildError verdicts never reached a
// sandbox and are left out.
inline LatencyReport latency_report(const PipelineTrace& trace, std::span<const Verdict> verdicts) {
  LatencyReport r;
  double build_sum = 0.0;
  for (const auto& b : trace.builds) {
    if (b.failed) continue;
    build_sum += b.finish - b.start;
    ++r.builds;
  }
  if (r.builds) r.mean_build_s = build_sum / static_cast<double>(r.builds);
  double eval_sum = 0.0;
  std::size_t within_cap = 0;
  std::size_t completed = 0;
  for (const auto& v : verdicts) {
    if (v.status == Status::BuildError) continue;
    ++r.evals;
    eval_sum += v.eval_seconds;
    if (v.status == Status::Timeout) ++r.timeouts;
    if (v.eval_seconds <= kTwoMinutes) ++within_cap;
    if (v.status != Status::Timeout && v.eval_seconds <= kTwoMinutes) ++completed;
  }
  if (r.evals) {
    const double n = static_cast<double>(r.evals);
    r.mean_eval_s = eval_sum / n;
    r.pct_within_120s = 100.0 * static_cast<double>(within_cap) / n;
    r.pct_within_2min = 100.0 * static_cast<double>(completed) / n;
  }
  return r;
}

inline json to_json(const LatencyReport& r) {
  return {{"mean_build_s", r.mean_build_s}, {"mean_eval_s", r.mean_eval_s},
          {"pct_within_120s", r.pct_within_120s}, {"pct_within_2min", r.pct_within_2min},
          {"builds", r.builds}, {"evals", r.evals}, {"timeouts", r.timeouts}};
}

// Accepts a merge only if the merged image builds and every instance it
// would serve still validates on it.
inline MergeValidator backend_merge_validator(std::span<const TaskInstance> instances, Backend& backend,
                                              VersionCatalog catalog, double timeout = kDefaultTimeoutSeconds) {
  auto index = std::make_shared<InstanceIndex>(index_instances(instances));
  auto cat = std::make_shared<VersionCatalog>(std::move(catalog));
  return [index, cat, &backend, timeout](const ImageSpec& merged, std::span<const std::string>) {
    try {
      ResolvedImage img = resolve_image(merged, *cat);
      LayerCache cache(false);
      ImageHandle h = backend.build_image(img, cache).image;
      for (const auto& id : merged.assigned_instances) {
        auto it = index->find(id);
        if (it == index->end()) return false;
        if (!validate_instance(*it->second, backend, h, timeout).valid) return false;
      }
      return true;
    } catch (const std::exception&) {
      return false;
    }
  };
}

}  // namespace shipyard

#endif  // SHIPYARD_PIPELINE_HPP
