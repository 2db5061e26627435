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


// Reference timing model for the streaming pipeline, written as two list
// schedules instead of an event loop. Valid when images have no build
// dependencies and the ready queue never fills.

#ifndef SHIPYARD_TESTS_ORACLES_PIPELINE_ORACLE_HPP
#define SHIPYARD_TESTS_ORACLES_PIPELINE_ORACLE_HPP

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

namespace shipyard::oracle {

struct OracleUnit {
  std::size_t image = 0;
  double duration = 0.0;
};

struct OracleSchedule {
  std::vector<double> build_finish;  // per image
  std::vector<double> eval_start;    // per unit, input order
  double makespan = 0.0;
};

// `units` are listed per image in evaluation order.
inline OracleSchedule stream_schedule(const std::vector<double>& build_seconds, const std::vector<OracleUnit>& units,
                                      std::size_t builders, std::size_t evaluators) {
  OracleSchedule s;
  std::vector<double> bfree(builders, 0.0);
  s.build_finish.resize(build_seconds.size());
  for (std::size_t i = 0; i < build_seconds.size(); ++i) {
    auto it = std::min_element(bfree.begin(), bfree.end());
    *it += build_seconds[i];
    s.build_finish[i] = *it;
    s.makespan = std::max(s.makespan, *it);
  }
  // Release order: build finish, then image order, then listing order.
  std::vector<std::size_t> order(units.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double fa = s.build_finish[units[a].image];
    const double fb = s.build_finish[units[b].image];
    if (fa != fb) return fa < fb;
    return units[a].image < units[b].image;
  });
  std::vector<double> efree(evaluators, 0.0);
  s.eval_start.resize(units.size());
  for (std::size_t k : order) {
    auto it = std::min_element(efree.begin(), efree.end());
    const double start = std::max(*it, s.build_finish[units[k].image]);
    s.eval_start[k] = start;
    *it = start + units[k].duration;
    s.makespan = std::max(s.makespan, *it);
  }
  return s;
}

// Everything one at a time.
inline double sequential_makespan(const std::vector<double>& build_seconds, const std::vector<OracleUnit>& units) {
  double t = 0.0;
  for (double b : build_seconds) t += b;
  for (const auto& u : units) t += u.duration;
  return t;
}

}  // namespace shipyard::oracle

#endif  // SHIPYARD_TESTS_ORACLES_PIPELINE_ORACLE_HPP
