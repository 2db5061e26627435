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

#ifndef SHIPYARD_CONTAINER_BACKEND_HPP
#define SHIPYARD_CONTAINER_BACKEND_HPP

#include <sys/socket.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "httplib.h"
#include "shipyard/eval.hpp"
#include "shipyard/instance.hpp"
#include "shipyard/sandbox.hpp"

namespace shipyard {

struct EngineAddress {
  bool unix_socket = true;
  std::string host = "/var/run/docker.sock";  // socket path when unix_socket
  int port = 80;

  std::string to_string() const {
    return unix_socket ? "unix://" + host : "tcp://" + host + ":" + std::to_string(port);
  }
};

// Accepts unix:///path, tcp://host:port, http://host:port or a bare socket
// path.
inline EngineAddress parse_engine_address(const std::string& spec) {
  EngineAddress a;
  if (spec.starts_with("unix://")) {
    a.host = spec.substr(7);
  } else if (spec.starts_with("tcp://") || spec.starts_with("http://")) {
    std::string rest = spec.substr(spec.find("://") + 3);
    if (!rest.empty() && rest.back() == '/') rest.pop_back();
    a.unix_socket = false;
    auto colon = rest.rfind(':');
    if (colon == std::string::npos) {
      a.host = rest;
      a.port = 2375;
    } else {
      a.host = rest.substr(0, colon);
      a.port = std::atoi(rest.substr(colon + 1).c_str());
    }
  } else if (!spec.empty()) {
    a.host = spec;
  }
  if (a.host.empty()) throw std::invalid_argument("empty container engine address");
  return a;
}

// FORGE_CONTAINER_HOST overrides the default socket.
inline EngineAddress engine_address_from_env() {
  const char* env = std::getenv("FORGE_CONTAINER_HOST");
  return parse_engine_address(env && *env ? env : "unix:///var/run/docker.sock");
}

// Minimal ustar writer for build contexts.
class TarWriter {
public:
  void add(const std::string& name, const std::string& content, unsigned mode = 0644) {
    if (name.size() >= 100) throw std::invalid_argument("tar entry name too long: " + name);
    char header[512];
    std::memset(header, 0, sizeof header);
    std::memcpy(header, name.data(), name.size());
    std::snprintf(header + 100, 8, "%07o", mode);
    std::snprintf(header + 108, 8, "%07o", 0u);
    std::snprintf(header + 116, 8, "%07o", 0u);
    std::snprintf(header + 124, 12, "%011llo", static_cast<unsigned long long>(content.size()));
    std::snprintf(header + 136, 12, "%011o", 0u);
    header[156] = '0';
    std::memcpy(header + 257, "ustar", 6);
    std::memcpy(header + 263, "00", 2);
    std::memset(header + 148, ' ', 8);
    unsigned sum = 0;
    for (unsigned char c : header) sum += c;
    std::snprintf(header + 148, 8, "%06o", sum);
    header[155] = ' ';
    data_.append(header, sizeof header);
    data_ += content;
    data_.append((512 - content.size() % 512) % 512, '\0');
  }

  std::string finish() const { return data_ + std::string(1024, '\0'); }

private:
  std::string data_;
};

// Reads back a ustar archive produced by TarWriter (used by tests and the
// mock engine).
inline std::map<std::string, std::string> read_tar(const std::string& data) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos + 512 <= data.size()) {
    const char* h = data.data() + pos;
    if (h[0] == '\0') break;
    std::string name(h, strnlen(h, 100));
    std::size_t size = std::strtoull(std::string(h + 124, 11).c_str(), nullptr, 8);
    pos += 512;
    if (pos + size > data.size()) throw std::runtime_error("truncated tar entry " + name);
    out[name] = data.substr(pos, size);
    pos += (size + 511) / 512 * 512;
  }
  return out;
}

// Splits the engine's multiplexed attach stream into stdout and stderr.
inline std::pair<std::string, std::string> demux_stream(const std::string& raw) {
  std::string out, err;
  std::size_t pos = 0;
  while (pos + 8 <= raw.size()) {
    const auto* h = reinterpret_cast<const unsigned char*>(raw.data() + pos);
    const std::size_t len = (std::size_t{h[4]} << 24) | (std::size_t{h[5]} << 16) | (std::size_t{h[6]} << 8) | h[7];
    pos += 8;
    std::string chunk = raw.substr(pos, len);
    pos += len;
    if (h[0] == 2) {
      err += chunk;
    } else {
      out += chunk;
    }
  }
  return {out, err};
}

inline std::string mux_frame(int stream, const std::string& payload) {
  std::string f(8, '\0');
  f[0] = static_cast<char>(stream);
  const auto n = static_cast<std::uint32_t>(payload.size());
  f[4] = static_cast<char>((n >> 24) & 0xff);
  f[5] = static_cast<char>((n >> 16) & 0xff);
  f[6] = static_cast<char>((n >> 8) & 0xff);
  f[7] = static_cast<char>(n & 0xff);
  return f + payload;
}

struct ContainerOptions {
  EngineAddress address = engine_address_from_env();
  std::string api_version = "v1.41";
  std::size_t max_sandboxes = 64;
  std::size_t max_in_flight = 16;  // concurrent API calls
  double grace_seconds = 1.0;
  std::map<std::string, std::string> base_images{{kDefaultBaseProfile, "busybox:latest"}};
  // {name} and {version}; {spec} is name==version or just name.
  std::string install_template = "pip install --no-cache-dir {spec}";
};

// Generates the build script: one RUN per package so each package is its
// own layer, in resolved-name order.
inline std::string dockerfile_for(const ResolvedImage& image, const ContainerOptions& opt) {
  auto base = opt.base_images.find(image.spec.base_profile);
  if (base == opt.base_images.end()) {
    throw BuildFailure(image.spec.image_id, "unknown base profile '" + image.spec.base_profile + "'");
  }
  std::string df = "FROM " + base->second + "\n";
  for (const auto& p : image.packages) {
    std::string cmd = opt.install_template;
    auto replace = [&](const std::string& key, const std::string& value) {
      for (std::size_t at = cmd.find(key); at != std::string::npos; at = cmd.find(key, at + value.size())) {
        cmd.replace(at, key.size(), value);
      }
    };
    replace("{spec}", p.to_string());
    replace("{name}", p.name);
    replace("{version}", p.version ? p.version->to_string() : "");
    df += "RUN " + cmd + "\n";
  }
  // Last, so the package layers stay shareable between images.
  df += "LABEL shipyard.image_id=\"" + image.spec.image_id + "\" shipyard.content_key=\"" + image.content_key() + "\"\n";
  return df;
}

// Talks to a container engine's HTTP API directly.
class ContainerBackend final : public Backend {
public:
  explicit ContainerBackend(ContainerOptions opt = {})
    : opt_(std::move(opt)), gate_(opt_.max_sandboxes),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(opt_.max_in_flight, 1))) {}

  bool simulated() const noexcept override { return false; }
  CapacityGate& capacity() override { return gate_; }
  const ContainerOptions& options() const noexcept { return opt_; }

  // Throws BackendUnavailable when the engine does not answer.
  void ping() {
    auto res = call([](httplib::Client& c, const std::string& v) { return c.Get("/" + v + "/_ping"); });
    if (!res || res->status != 200) {
      throw BackendUnavailable("container engine at " + opt_.address.to_string() + " is not reachable");
    }
  }

  static bool reachable(const ContainerOptions& opt = {}) {
    try {
      ContainerBackend b(opt);
      b.ping();
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  BuildResult build_image(const ResolvedImage& image, LayerCache& cache) override {
    const std::string df = dockerfile_for(image, opt_);
    TarWriter tar;
    tar.add("Dockerfile", df);
    const std::string tag = "shipyard/img:" + image.content_key().substr(0, 16);
    const auto t0 = std::chrono::steady_clock::now();
    auto res = call([&](httplib::Client& c, const std::string& v) {
      c.set_read_timeout(std::chrono::hours(2));
      return c.Post("/" + v + "/build?t=" + tag + "&rm=1&forcerm=1", tar.finish(), "application/x-tar");
    });
    if (!res) throw BackendUnavailable("container engine unreachable during build");
    if (res->status != 200) throw BuildFailure(image.spec.image_id, "engine returned " + std::to_string(res->status) + ": " + res->body);
    // The body is a stream of progress objects; any error object fails the build.
    std::istringstream lines(res->body);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      auto j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("error")) throw BuildFailure(image.spec.image_id, j["error"].dump());
    }
    BuildResult r;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.layers_total = image.layers.size();
    r.layers_cached = cache.claim(image.layers);
    r.image = {image.spec.image_id, image.content_key(), tag};
    return r;
  }

  SandboxHandle create_sandbox(const ImageHandle& image, std::uint64_t workdir_seed,
                               const SandboxLabels& labels) override {
    gate_.acquire();
    SandboxHandle h;
    bool registered = false;  // once true, destroy() owns the slot
    try {
      h.image_id = image.image_id;
      h.workdir = randomized_workdir(workdir_seed);
      h.labels = labels;
      json body = {{"Image", image.ref},
                   {"Cmd", {"sh", "-c", "while :; do sleep 3600; done"}},
                   {"WorkingDir", h.workdir},
                   {"Labels",
                    {{"shipyard.instance_id", labels.instance_id},
                     {"shipyard.trajectory", std::to_string(labels.trajectory)},
                     {"shipyard.image_id", image.image_id}}}};
      auto res = call([&](httplib::Client& c, const std::string& v) {
        return c.Post("/" + v + "/containers/create", body.dump(), "application/json");
      });
      if (!res) throw BackendUnavailable("container engine unreachable");
      if (res->status != 201) throw BackendError("create failed (" + std::to_string(res->status) + "): " + res->body);
      h.engine_ref = json::parse(res->body).at("Id").get<std::string>();
      h.sandbox_id = h.engine_ref.substr(0, 12);
      {
        std::lock_guard lock(mutex_);
        live_.insert(h.engine_ref);
      }
      registered = true;
      auto started = call([&](httplib::Client& c, const std::string& v) {
        return c.Post("/" + v + "/containers/" + h.engine_ref + "/start", "", "application/json");
      });
      if (!started || (started->status != 204 && started->status != 304)) {
        throw BackendError("start failed for " + h.sandbox_id);
      }
      h.created_at = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
      return h;
    } catch (...) {
      if (registered) {
        destroy(h);
      } else {
        gate_.release();
      }
      throw;
    }
  }

  ExecResult exec(const SandboxHandle& sb, const std::string& cmd, double timeout) override {
    {
      std::lock_guard lock(mutex_);
      if (live_.count(sb.engine_ref) == 0) throw SandboxGone(sb.sandbox_id);
    }
    // timeout(1) sends TERM at the cap and KILL after the grace period.
    char cap[32], grace[32];
    std::snprintf(cap, sizeof cap, "%.3f", timeout);
    std::snprintf(grace, sizeof grace, "%.3f", opt_.grace_seconds);
    json create = {{"AttachStdout", true},
                   {"AttachStderr", true},
                   {"Cmd", {"timeout", "-k", grace, cap, "sh", "-c", cmd}}};
    auto res = call([&](httplib::Client& c, const std::string& v) {
      return c.Post("/" + v + "/containers/" + sb.engine_ref + "/exec", create.dump(), "application/json");
    });
    if (!res) throw BackendUnavailable("container engine unreachable");
    if (res->status == 404 || res->status == 409) throw SandboxGone(sb.sandbox_id);
    if (res->status != 201) throw BackendError("exec create failed: " + res->body);
    const std::string exec_id = json::parse(res->body).at("Id").get<std::string>();

    const auto t0 = std::chrono::steady_clock::now();
    auto started = call([&](httplib::Client& c, const std::string& v) {
      c.set_read_timeout(std::chrono::milliseconds(static_cast<long>((timeout + opt_.grace_seconds + 5) * 1000)));
      return c.Post("/" + v + "/exec/" + exec_id + "/start", json{{"Detach", false}, {"Tty", false}}.dump(),
                    "application/json");
    });
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!started) throw BackendError("exec stream lost for " + sb.sandbox_id);
    if (started->status == 404 || started->status == 409) throw SandboxGone(sb.sandbox_id);
    if (started->status != 200) throw BackendError("exec start failed: " + started->body);
    auto [out, err] = demux_stream(started->body);

    auto info = call([&](httplib::Client& c, const std::string& v) { return c.Get("/" + v + "/exec/" + exec_id + "/json"); });
    if (!info || info->status != 200) throw BackendError("exec inspect failed for " + sb.sandbox_id);
    auto ij = json::parse(info->body);
    const int code = ij.value("ExitCode", -1);

    ExecResult r;
    r.stdout_text = std::move(out);
    r.stderr_text = std::move(err);
    // 124: timeout(1) fired; 137: killed after the grace period.
    if (code == 124 || (code == 137 && elapsed >= timeout)) {
      r.timed_out = true;
      r.exit_code = kTimeoutExitCode;
      r.duration = std::clamp(elapsed, timeout, timeout + opt_.grace_seconds);
    } else {
      r.exit_code = code;
      r.duration = std::min(elapsed, timeout + opt_.grace_seconds);
    }
    return r;
  }

  void destroy(const SandboxHandle& sb) override {
    {
      std::lock_guard lock(mutex_);
      if (live_.erase(sb.engine_ref) == 0) return;
    }
    call([&](httplib::Client& c, const std::string& v) {
      return c.Delete("/" + v + "/containers/" + sb.engine_ref + "?force=1&v=1");
    });
    gate_.release();
  }

private:
  template <typename F>
  httplib::Result call(F&& f) {
    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{in_flight_};
    httplib::Client c = client();
    return f(c, opt_.api_version);
  }

  httplib::Client client() const {
    if (opt_.address.unix_socket) {
      httplib::Client c(opt_.address.host);
      c.set_address_family(AF_UNIX);
      c.set_connection_timeout(std::chrono::seconds(5));
      return c;
    }
    httplib::Client c(opt_.address.host, opt_.address.port);
    c.set_connection_timeout(std::chrono::seconds(5));
    return c;
  }

  ContainerOptions opt_;
  CapacityGate gate_;
  std::counting_semaphore<> in_flight_;
  std::mutex mutex_;
  std::set<std::string> live_;  // engine container ids
};

}  // namespace shipyard

#endif  // SHIPYARD_CONTAINER_BACKEND_HPP
