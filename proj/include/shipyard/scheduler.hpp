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

#ifndef SHIPYARD_SCHEDULER_HPP
#define SHIPYARD_SCHEDULER_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <deque>
#include <cmath>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "shipyard/instance.hpp"
#include "shipyard/random.hpp"

namespace shipyard {

class InvalidDistribution : public std::invalid_argument {
public:
  explicit InvalidDistribution(const std::string& what) : std::invalid_argument(what) {}
};

// One rollout: a trajectory of an instance.
struct WorkItem {
  std::string instance_id;
  std::size_t trajectory = 0;
  double duration = 0.0;

  friend bool operator==(const WorkItem&, const WorkItem&) = default;
};

struct ScheduledItem {
  std::size_t item = 0;  // index into the input batch
  double start = 0.0;
  double finish = 0.0;
};

struct ScheduleTrace {
  std::string strategy;
  std::vector<std::vector<ScheduledItem>> workers;
  double makespan = 0.0;
  double total_idle = 0.0;
  std::vector<double> idle;  // per worker, up to the makespan

  std::size_t item_count() const {
    std::size_t n = 0;
    for (const auto& w : workers) n += w.size();
    return n;
  }
};

namespace detail {

inline void close_trace(ScheduleTrace& tr) {
  tr.makespan = 0.0;
  for (const auto& w : tr.workers) {
    if (!w.empty()) tr.makespan = std::max(tr.makespan, w.back().finish);
  }
  tr.idle.assign(tr.workers.size(), 0.0);
  tr.total_idle = 0.0;
  for (std::size_t k = 0; k < tr.workers.size(); ++k) {
    double busy = 0.0;
    for (const auto& s : tr.workers[k]) busy += s.finish - s.start;
    tr.idle[k] = tr.makespan - busy;
    tr.total_idle += tr.idle[k];
  }
}

inline void check_workers(std::size_t workers) {
  if (workers == 0) throw std::invalid_argument("workers must be >= 1");
}

}  // namespace detail

// Fixed round-robin partition by item index; each worker runs its share back
// to back and the batch ends at the slowest worker.
inline ScheduleTrace balanced_batching(std::span<const WorkItem> items, std::size_t workers) {
  detail::check_workers(workers);
  ScheduleTrace tr;
  tr.strategy = "balanced_batching";
  tr.workers.resize(workers);
  std::vector<double> clock(workers, 0.0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t w = i % workers;
    tr.workers[w].push_back({i, clock[w], clock[w] + items[i].duration});
    clock[w] += items[i].duration;
  }
  detail::close_trace(tr);
  return tr;
}

// One shared queue in input order (or longest first); whichever worker frees
// up first takes the next item, lowest index on ties. The scheduler never
// looks at a duration to decide; durations only drive the clock.
inline ScheduleTrace producer_consumer(std::span<const WorkItem> items, std::size_t workers,
                                       bool longest_first = false) {
  detail::check_workers(workers);
  ScheduleTrace tr;
  tr.strategy = longest_first ? "producer_consumer_lpt" : "producer_consumer";
  tr.workers.resize(workers);
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  if (longest_first) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return items[a].duration > items[b].duration; });
  }
  using Free = std::pair<double, std::size_t>;  // (free at, worker)
  std::priority_queue<Free, std::vector<Free>, std::greater<>> free;
  for (std::size_t w = 0; w < workers; ++w) free.emplace(0.0, w);
  for (std::size_t i : order) {
    auto [t, w] = free.top();
    free.pop();
    tr.workers[w].push_back({i, t, t + items[i].duration});
    free.emplace(t + items[i].duration, w);
  }
  detail::close_trace(tr);
  return tr;
}

// Round-robin queues, but a worker whose own queue is empty takes the last
// item of the longest remaining queue (lowest index on ties). A worker only
// loses items and only steals while idle, so no worker ends later than under
// balanced batching.
inline ScheduleTrace work_stealing(std::span<const WorkItem> items, std::size_t workers) {
  detail::check_workers(workers);
  ScheduleTrace tr;
  tr.strategy = "work_stealing";
  tr.workers.resize(workers);
  std::vector<std::deque<std::size_t>> queues(workers);
  for (std::size_t i = 0; i < items.size(); ++i) queues[i % workers].push_back(i);
  using Free = std::pair<double, std::size_t>;
  std::priority_queue<Free, std::vector<Free>, std::greater<>> free;
  for (std::size_t w = 0; w < workers; ++w) free.emplace(0.0, w);
  while (!free.empty()) {
    auto [t, w] = free.top();
    free.pop();
    std::size_t i = 0;
    if (!queues[w].empty()) {
      i = queues[w].front();
      queues[w].pop_front();
    } else {
      std::size_t victim = workers;
      for (std::size_t v = 0; v < workers; ++v) {
        if (!queues[v].empty() && (victim == workers || queues[v].size() > queues[victim].size())) victim = v;
      }
      if (victim == workers) continue;  // nothing left anywhere; retire
      i = queues[victim].back();
      queues[victim].pop_back();
    }
    tr.workers[w].push_back({i, t, t + items[i].duration});
    free.emplace(t + items[i].duration, w);
  }
  detail::close_trace(tr);
  return tr;
}

struct DistributionSpec {
  enum class Kind { Constant, Uniform, Lognormal, Pareto };
  Kind kind = Kind::Lognormal;
  // constant: {value}; uniform: {lo, hi}; lognormal: {mu, sigma};
  // pareto: {scale, shape}.
  std::vector<double> params{std::log(60.0), 1.0};

  static DistributionSpec parse(const std::string& name, const std::string& params_csv) {
    DistributionSpec d;
    if (name == "constant") {
      d.kind = Kind::Constant;
    } else if (name == "uniform") {
      d.kind = Kind::Uniform;
    } else if (name == "lognormal") {
      d.kind = Kind::Lognormal;
    } else if (name == "pareto") {
      d.kind = Kind::Pareto;
    } else {
      throw InvalidDistribution("unknown distribution '" + name + "'");
    }
    d.params.clear();
    if (params_csv.empty()) {
      d.params = d.defaults();
    } else {
      std::stringstream ss(params_csv);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          std::size_t used = 0;
          d.params.push_back(std::stod(tok, &used));
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw InvalidDistribution("bad distribution parameter '" + tok + "'");
        }
      }
    }
    d.validate();
    return d;
  }

  std::vector<double> defaults() const {
    switch (kind) {
      case Kind::Constant:
        return {60.0};
      case Kind::Uniform:
        return {10.0, 110.0};
      case Kind::Lognormal:
        return {std::log(60.0), 1.0};
      case Kind::Pareto:
        return {30.0, 2.0};
    }
    return {};
  }

  void validate() const {
    const std::size_t want = kind == Kind::Constant ? 1 : 2;
    if (params.size() != want) {
      throw InvalidDistribution("expected " + std::to_string(want) + " distribution parameters");
    }
    for (double p : params) {
      if (!std::isfinite(p)) throw InvalidDistribution("distribution parameters must be finite");
    }
    switch (kind) {
      case Kind::Constant:
        if (params[0] <= 0) throw InvalidDistribution("constant duration must be positive");
        break;
      case Kind::Uniform:
        if (params[0] <= 0 || params[1] < params[0]) throw InvalidDistribution("uniform needs 0 < lo <= hi");
        break;
      case Kind::Lognormal:
        // mu is a log-scale location and may be any real.
        if (params[1] <= 0) throw InvalidDistribution("lognormal sigma must be positive");
        break;
      case Kind::Pareto:
        if (params[0] <= 0 || params[1] <= 0) throw InvalidDistribution("pareto scale and shape must be positive");
        break;
    }
  }

  std::string name() const {
    switch (kind) {
      case Kind::Constant:
        return "constant";
      case Kind::Uniform:
        return "uniform";
      case Kind::Lognormal:
        return "lognormal";
      case Kind::Pareto:
        return "pareto";
    }
    return "?";
  }

  double draw(Rng& rng) const {
    switch (kind) {
      case Kind::Constant:
        return params[0];
      case Kind::Uniform:
        return rng.uniform(params[0], params[1]);
      case Kind::Lognormal:
        return rng.lognormal(params[0], params[1]);
      case Kind::Pareto:
        return rng.pareto(params[0], params[1]);
    }
    return params[0];
  }
};

// Items are named inst<k> with trajectory index cycling 0..7, mirroring
// several rollouts per instance.
inline std::vector<WorkItem> generate_workload(const DistributionSpec& dist, std::size_t n_items, std::uint64_t seed,
                                               std::size_t trajectories_per_instance = 8) {
  if (n_items == 0) throw std::invalid_argument("n_items must be >= 1");
  dist.validate();
  Rng rng(seed);
  std::vector<WorkItem> items;
  items.reserve(n_items);
  const std::size_t per = std::max<std::size_t>(trajectories_per_instance, 1);
  for (std::size_t i = 0; i < n_items; ++i) {
    double d = dist.draw(rng);
    // Guard against a zero draw from the uniform lower edge.
    if (!(d > 0)) d = std::numeric_limits<double>::min();
    items.push_back({"inst" + std::to_string(i / per), i % per, d});
  }
  return items;
}

struct TrialResult {
  double balanced_makespan = 0.0;
  double pc_makespan = 0.0;
  double ratio = 0.0;
  double balanced_idle = 0.0;
  double pc_idle = 0.0;
  double ws_makespan = 0.0;
  double ws_ratio = 0.0;  // balanced / work stealing
  double sum = 0.0;
  double max_item = 0.0;
};

struct Comparison {
  std::vector<TrialResult> trials;
  double mean_speedup = 0.0;
  double min_speedup = 0.0;
  double max_speedup = 0.0;
  double stddev_speedup = 0.0;
  double mean_ws_speedup = 0.0;
  double min_ws_speedup = 0.0;
};

// Speedup of producer-consumer over balanced batching on `trials` batches.
// Trial k draws from seed mix64(seed + k).
inline Comparison compare(std::size_t n_items, std::size_t workers, std::size_t trials, const DistributionSpec& dist,
                          std::uint64_t seed, bool longest_first = false) {
  if (trials == 0) throw std::invalid_argument("trials must be >= 1");
  detail::check_workers(workers);
  dist.validate();
  Comparison c;
  for (std::size_t k = 0; k < trials; ++k) {
    auto items = generate_workload(dist, n_items, mix64(seed + k));
    auto bb = balanced_batching(items, workers);
    auto pc = producer_consumer(items, workers, longest_first);
    TrialResult r;
    r.balanced_makespan = bb.makespan;
    r.pc_makespan = pc.makespan;
    r.ratio = bb.makespan / pc.makespan;
    r.balanced_idle = bb.total_idle;
    r.pc_idle = pc.total_idle;
    r.ws_makespan = work_stealing(items, workers).makespan;
    r.ws_ratio = bb.makespan / r.ws_makespan;
    for (const auto& it : items) {
      r.sum += it.duration;
      r.max_item = std::max(r.max_item, it.duration);
    }
    c.trials.push_back(r);
  }
  double sum = 0.0;
  double ws_sum = 0.0;
  c.min_speedup = c.trials.front().ratio;
  c.min_ws_speedup = c.trials.front().ws_ratio;
  c.max_speedup = c.trials.front().ratio;
  for (const auto& r : c.trials) {
    sum += r.ratio;
    c.min_speedup = std::min(c.min_speedup, r.ratio);
    c.max_speedup = std::max(c.max_speedup, r.ratio);
    ws_sum += r.ws_ratio;
    c.min_ws_speedup = std::min(c.min_ws_speedup, r.ws_ratio);
  }
  c.mean_ws_speedup = ws_sum / static_cast<double>(trials);
  c.mean_speedup = sum / static_cast<double>(trials);
  double var = 0.0;
  for (const auto& r : c.trials) var += (r.ratio - c.mean_speedup) * (r.ratio - c.mean_speedup);
  c.stddev_speedup = std::sqrt(var / static_cast<double>(trials));
  return c;
}

inline json to_json(const Comparison& c) {
  json trials = json::array();
  for (const auto& r : c.trials) {
    trials.push_back({{"balanced_makespan", r.balanced_makespan},
                      {"producer_consumer_makespan", r.pc_makespan},
                      {"speedup", r.ratio},
                      {"balanced_idle", r.balanced_idle},
                      {"producer_consumer_idle", r.pc_idle},
                      {"work_stealing_makespan", r.ws_makespan}});
  }
  return {{"mean_speedup", c.mean_speedup}, {"min_speedup", c.min_speedup}, {"max_speedup", c.max_speedup},
          {"stddev_speedup", c.stddev_speedup}, {"mean_work_stealing_speedup", c.mean_ws_speedup},
          {"min_work_stealing_speedup", c.min_ws_speedup}, {"trials", trials}};
}

// Same CSV layout as pipeline traces: kind,id,lane,start,end.
inline std::string to_csv(const ScheduleTrace& tr, std::span<const WorkItem> items) {
  char buf[160];
  std::string out = "kind,id,lane,start,end\n";
  for (std::size_t w = 0; w < tr.workers.size(); ++w) {
    for (const auto& s : tr.workers[w]) {
      const auto& it = items[s.item];
      std::snprintf(buf, sizeof buf, "rollout,%s#%zu,worker%zu,%.6f,%.6f\n", it.instance_id.c_str(), it.trajectory, w,
                    s.start, s.finish);
      out += buf;
    }
  }
  return out;
}

// Integration mode: real worker threads pull from a shared queue and call
// `run` on each item; measured wall durations fill the trace afterwards.
inline ScheduleTrace run_producer_consumer(std::span<const WorkItem> items, std::size_t workers,
                                           const std::function<void(const WorkItem&)>& run) {
  detail::check_workers(workers);
  ScheduleTrace tr;
  tr.strategy = "producer_consumer_live";
  tr.workers.resize(workers);
  std::atomic<std::size_t> next{0};
  const auto t0 = std::chrono::steady_clock::now();
  auto now = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= items.size()) return;
          const double start = now();
          run(items[i]);
          tr.workers[w].push_back({i, start, now()});
        }
      });
    }
  }
  detail::close_trace(tr);
  return tr;
}

}  // namespace shipyard

#endif  // SHIPYARD_SCHEDULER_HPP
