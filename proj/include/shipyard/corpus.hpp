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

#ifndef SHIPYARD_CORPUS_HPP
#define SHIPYARD_CORPUS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "shipyard/instance.hpp"
#include "shipyard/digest.hpp"
#include "shipyard/random.hpp"

namespace shipyard {

// Synthetic task corpora. Package popularity is Zipf distributed; each
// package has a canonical major version that most constraints accept, and
// a small fraction of dependencies pin a different major.
//
// All generated versions have the form M.0 with 1 <= M <= 9.
struct CorpusSpec {
  std::size_t instances = 1000;
  std::size_t packages = 200;
  double zipf_s = 1.1;
  double conflict_rate = 0.05;
  std::size_t min_deps = 3;
  std::size_t max_deps = 12;
  std::uint64_t seed = 7;
  std::string id_prefix = "zipf";
};

inline std::string package_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pkg%03zu", index);
  return buf;
}

inline std::vector<TaskInstance> generate_corpus(const CorpusSpec& spec) {
  Rng rng(spec.seed);
  std::vector<double> cumulative(spec.packages);
  double total = 0.0;
  for (std::size_t k = 0; k < spec.packages; ++k) {
    total += 1.0 / std::pow(static_cast<double>(k + 1), spec.zipf_s);
    cumulative[k] = total;
  }
  auto draw_package = [&] {
    double u = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    return static_cast<std::size_t>(std::min<std::ptrdiff_t>(
        it - cumulative.begin(), static_cast<std::ptrdiff_t>(spec.packages) - 1));
  };
  auto major = [](std::uint64_t m) { return Version({m, 0}); };

  std::vector<TaskInstance> out;
  const std::size_t width = std::to_string(spec.instances).size();
  for (std::size_t i = 0; i < spec.instances; ++i) {
    TaskInstance inst;
    std::string num = std::to_string(i);
    inst.instance_id = spec.id_prefix + "-" + std::string(width - num.size(), '0') + num;
    inst.repo = "https://example.invalid/" + spec.id_prefix + "/repo" + std::to_string(i % 17);
    inst.base_commit = sha256_hex(inst.instance_id).substr(0, 12);

    std::size_t span = spec.max_deps - spec.min_deps + 1;
    std::size_t want = spec.min_deps + static_cast<std::size_t>(rng.below(span));
    want = std::min(want, spec.packages);
    std::set<std::size_t> chosen;
    while (chosen.size() < want) chosen.insert(draw_package());

    for (std::size_t p : chosen) {
      const std::uint64_t canonical = 1 + p % 5;
      DependencySpec dep;
      dep.name = package_name(p);
      if (rng.uniform() < spec.conflict_rate) {
        dep.constraint = Constraint::exact(major(canonical + 1 + rng.below(3)));
      } else {
        double form = rng.uniform();
        if (form < 0.35) {
          dep.constraint = Constraint::any();
        } else if (form < 0.65) {
          dep.constraint = Constraint::range(major(canonical), major(canonical + 1));
        } else if (form < 0.85) {
          dep.constraint = Constraint::range(major(canonical), std::nullopt);
        } else {
          dep.constraint = Constraint::exact(major(canonical));
        }
      }
      inst.deps.push_back(std::move(dep));
    }
    inst.fail_to_pass = {"test_" + num + "_fix"};
    std::size_t p2p = 1 + rng.below(3);
    for (std::size_t t = 0; t < p2p; ++t) {
      inst.pass_to_pass.push_back("test_" + num + "_keep" + std::to_string(t));
    }
    inst.gold_patch = "--- a/src/mod" + num + ".txt\n+++ b/src/mod" + num +
                      ".txt\n@@ -1 +1 @@\n-broken\n+fixed\n";
    inst.test_cmd = "run-tests {tests}";
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace shipyard

#endif  // SHIPYARD_CORPUS_HPP
