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

// Writes a synthetic Zipf task manifest to stdout.

#include <iostream>

#include <CLI11.hpp>

#include "shipyard/corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic task manifest"};
  shipyard::CorpusSpec spec;
  app.add_option("--instances", spec.instances, "Number of instances")->capture_default_str();
  app.add_option("--packages", spec.packages, "Package pool size")->capture_default_str();
  app.add_option("--zipf-s", spec.zipf_s, "Zipf exponent")->capture_default_str();
  app.add_option("--conflict-rate", spec.conflict_rate, "Fraction of off-canonical pins")
      ->capture_default_str();
  app.add_option("--min-deps", spec.min_deps)->capture_default_str();
  app.add_option("--max-deps", spec.max_deps)->capture_default_str();
  app.add_option("--seed", spec.seed)->capture_default_str();
  app.add_option("--prefix", spec.id_prefix, "Instance id prefix")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  if (spec.min_deps > spec.max_deps || spec.packages == 0) {
    std::cerr << "invalid corpus parameters\n";
    return 2;
  }
  std::cout << shipyard::serialize_manifest(shipyard::generate_corpus(spec));
  return 0;
}
