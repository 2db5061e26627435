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

#ifndef SHIPYARD_SANDBOX_HPP
#define SHIPYARD_SANDBOX_HPP

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "shipyard/digest.hpp"
#include "shipyard/pruner.hpp"
#include "shipyard/random.hpp"
#include "shipyard/version.hpp"

namespace shipyard {

// Errors raised by backends. Callers turn them into verdicts; none of them
// should escape the evaluation boundary.
class BackendError : public std::runtime_error {
public:
  explicit BackendError(const std::string& what) : std::runtime_error(what) {}
};

class BuildFailure : public BackendError {
public:
  BuildFailure(std::string image_id, std::string log)
    : BackendError("build of " + image_id + " failed: " + log),
      image_id_(std::move(image_id)), log_(std::move(log)) {}
  const std::string& image_id() const noexcept { return image_id_; }
  const std::string& log() const noexcept { return log_; }

private:
  std::string image_id_;
  std::string log_;
};

class ResourceExhausted : public BackendError {
public:
  explicit ResourceExhausted(std::size_t limit)
    : BackendError("sandbox limit of " + std::to_string(limit) + " reached") {}
};

class SandboxGone : public BackendError {
public:
  explicit SandboxGone(const std::string& id) : BackendError("sandbox " + id + " is gone") {}
};

class BackendUnavailable : public BackendError {
public:
  explicit BackendUnavailable(const std::string& what) : BackendError(what) {}
};

struct ResolvedPackage {
  std::string name;
  std::optional<Version> version;  // nullopt: no version is known; install unpinned

  std::string to_string() const { return version ? name + "==" + version->to_string() : name; }
  friend bool operator==(const ResolvedPackage&, const ResolvedPackage&) = default;
};

// Content-addressed identity of the layer chain (base, p1, ..., pk). Equal
// prefixes on the same base give equal keys.
inline std::vector<std::string> layer_keys(const std::string& base_profile,
                                           const std::vector<ResolvedPackage>& packages) {
  std::vector<std::string> keys;
  std::string key = ContentHasher().add("base").add(base_profile).hex();
  keys.push_back(key);
  for (const auto& p : packages) {
    key = ContentHasher().add(key).add(p.name).add(p.version ? p.version->to_string() : "").hex();
    keys.push_back(key);
  }
  return keys;
}

// An ImageSpec with every constraint resolved to a concrete version.
struct ResolvedImage {
  ImageSpec spec;
  std::vector<ResolvedPackage> packages;  // name order; one layer each
  std::vector<std::string> layers;        // layers[0] is the base, then one per package
  // Plan index of an earlier image sharing the longest layer prefix, if any.
  std::optional<std::size_t> parent;
  std::size_t shared_prefix = 0;  // package layers shared with the parent

  const std::string& content_key() const { return layers.back(); }
};

struct ImageHandle {
  std::string image_id;
  std::string content_key;
  std::string ref;  // backend reference, e.g. an engine tag

  friend bool operator==(const ImageHandle&, const ImageHandle&) = default;
};

struct BuildResult {
  ImageHandle image;
  double seconds = 0.0;
  std::size_t layers_total = 0;
  std::size_t layers_cached = 0;
};

struct SandboxLabels {
  std::string instance_id;
  std::size_t trajectory = 0;
};

struct SandboxHandle {
  std::string sandbox_id;
  std::string image_id;
  std::string workdir;
  double created_at = 0.0;
  SandboxLabels labels;
  std::string engine_ref;  // container id for the real backend
};

inline constexpr int kTimeoutExitCode = -1;

struct ExecResult {
  int exit_code = 0;
  std::string stdout_text;
  std::string stderr_text;
  double duration = 0.0;
  bool timed_out = false;
};

// Thread-safe content-addressed layer set shared by builds.
class LayerCache {
public:
  explicit LayerCache(bool enabled = true) : enabled_(enabled) {}
  LayerCache(LayerCache&& other) noexcept
    : enabled_(other.enabled_), keys_(std::move(other.keys_)), hits_(other.hits_), misses_(other.misses_) {}

  bool enabled() const noexcept { return enabled_; }

  // Records `keys` as built; returns how many were already present.
  std::size_t claim(const std::vector<std::string>& keys) {
    std::lock_guard lock(mutex_);
    std::size_t present = 0;
    for (const auto& k : keys) {
      if (!enabled_) {
        ++misses_;
        continue;
      }
      if (keys_.insert(k).second) {
        ++misses_;
      } else {
        ++present;
        ++hits_;
      }
    }
    return present;
  }

  // Copy of the committed keys with fresh counters. Pipelines hand each build
  // a snapshot so layers still being built elsewhere never count as hits.
  LayerCache snapshot() const {
    std::lock_guard lock(mutex_);
    LayerCache c(enabled_);
    c.keys_ = keys_;
    return c;
  }

  // Makes `keys` available to later builds without touching the counters.
  void commit(const std::vector<std::string>& keys) {
    if (!enabled_) return;
    std::lock_guard lock(mutex_);
    keys_.insert(keys.begin(), keys.end());
  }

  bool contains(const std::string& key) const {
    std::lock_guard lock(mutex_);
    return keys_.count(key) != 0;
  }

  std::size_t hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
  }
  std::size_t misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
  }

private:
  bool enabled_;
  mutable std::mutex mutex_;
  std::set<std::string> keys_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

// Counts live sandboxes against a hard limit.
class CapacityGate {
public:
  explicit CapacityGate(std::size_t limit) : limit_(limit == 0 ? 1 : limit) {}

  void acquire() {
    std::lock_guard lock(mutex_);
    if (live_ >= limit_) throw ResourceExhausted(limit_);
    ++live_;
    peak_ = std::max(peak_, live_);
  }

  void release() {
    {
      std::lock_guard lock(mutex_);
      if (live_ > 0) --live_;
    }
    cv_.notify_all();
  }

  // Blocks until a slot is free or `timeout` passes.
  bool wait(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return live_ < limit_; });
  }

  std::size_t live() const {
    std::lock_guard lock(mutex_);
    return live_;
  }
  std::size_t peak() const {
    std::lock_guard lock(mutex_);
    return peak_;
  }
  std::size_t limit() const noexcept { return limit_; }

private:
  std::size_t limit_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

inline std::string randomized_workdir(std::uint64_t seed) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "/work/%016llx", static_cast<unsigned long long>(mix64(seed)));
  return buf;
}

// Execution interface shared by the simulated and the container backends.
// Implementations must be callable from many threads at once.
class Backend {
public:
  virtual ~Backend() = default;

  // True when durations come from a model rather than a wall clock.
  virtual bool simulated() const noexcept = 0;

  // Throws BuildFailure.
  virtual BuildResult build_image(const ResolvedImage& image, LayerCache& cache) = 0;

  // Throws ResourceExhausted when the live sandbox limit is reached.
  virtual SandboxHandle create_sandbox(const ImageHandle& image, std::uint64_t workdir_seed,
                                       const SandboxLabels& labels) = 0;

  // Throws SandboxGone if the sandbox was destroyed.
  virtual ExecResult exec(const SandboxHandle& sandbox, const std::string& cmd, double timeout) = 0;

  // Idempotent.
  virtual void destroy(const SandboxHandle& sandbox) = 0;

  virtual CapacityGate& capacity() = 0;

  // Simulated backends stamp handles with the pipeline's clock.
  virtual void set_clock(double /*now*/) {}
};

// Command steps issued by the evaluator. Each command starts with a shell
// no-op naming its step so a simulated backend can interpret it while a real
// shell simply runs it.
namespace step {
inline constexpr const char* kWritePatch = "write-patch";
inline constexpr const char* kCheckout = "checkout";
inline constexpr const char* kApply = "apply";
inline constexpr const char* kTest = "test";

inline std::string marker(const char* name) { return std::string(": shipyard-step=") + name + "; "; }

inline std::optional<std::string> of(const std::string& cmd) {
  static const std::string prefix = ": shipyard-step=";
  if (!cmd.starts_with(prefix)) return std::nullopt;
  auto end = cmd.find(';', prefix.size());
  if (end == std::string::npos) return std::nullopt;
  return cmd.substr(prefix.size(), end - prefix.size());
}
}  // namespace step

}  // namespace shipyard

#endif  // SHIPYARD_SANDBOX_HPP
