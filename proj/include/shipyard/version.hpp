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

#ifndef SHIPYARD_VERSION_HPP
#define SHIPYARD_VERSION_HPP

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace shipyard {

class invalid_version : public std::runtime_error {
public:
  explicit invalid_version(const std::string& what)
    : std::runtime_error(what) {}
};

// A dotted integer version such as 1.4.0. Missing trailing components
// compare as zero, so 1.4 == 1.4.0.
class Version {
public:
  Version() = default;

  explicit Version(std::vector<std::uint64_t> components)
    : components_(std::move(components)) {
    if (components_.empty()) {
      throw invalid_version("version has no components");
    }
  }

  static Version parse(std::string_view text) {
    std::vector<std::uint64_t> parts;
    if (text.empty()) {
      throw invalid_version("empty version string");
    }
    std::size_t pos = 0;
    while (true) {
      std::size_t dot = text.find('.', pos);
      std::string_view piece = text.substr(
          pos, dot == std::string_view::npos ? std::string_view::npos : dot - pos);
      if (piece.empty()) {
        throw invalid_version("empty component in version '" + std::string(text) + "'");
      }
      std::uint64_t value = 0;
      auto [end, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), value);
      if (ec != std::errc() || end != piece.data() + piece.size()) {
        throw invalid_version("non-numeric version '" + std::string(text) + "'");
      }
      parts.push_back(value);
      if (dot == std::string_view::npos) {
        break;
      }
      pos = dot + 1;
    }
    return Version(std::move(parts));
  }

  const std::vector<std::uint64_t>& components() const noexcept { return components_; }

  std::string to_string() const {
    std::string out;
    for (std::size_t i = 0; i < components_.size(); ++i) {
      if (i != 0) out += '.';
      out += std::to_string(components_[i]);
    }
    return out.empty() ? "0" : out;
  }

  friend std::strong_ordering operator<=>(const Version& a, const Version& b) noexcept {
    const std::size_t n = std::max(a.components_.size(), b.components_.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t x = i < a.components_.size() ? a.components_[i] : 0;
      std::uint64_t y = i < b.components_.size() ? b.components_[i] : 0;
      if (x != y) return x <=> y;
    }
    return std::strong_ordering::equal;
  }

  friend bool operator==(const Version& a, const Version& b) noexcept {
    return (a <=> b) == std::strong_ordering::equal;
  }

private:
  std::vector<std::uint64_t> components_{0};
};

// Version constraint algebra: Exact, half-open Range, or Any. Closed under
// intersection; Range values are kept normalized (an unbounded range is Any,
// a bounded range is never empty).
struct Exact {
  Version version;
  friend bool operator==(const Exact&, const Exact&) = default;
};

struct Range {
  std::optional<Version> min;  // inclusive
  std::optional<Version> max;  // exclusive
  friend bool operator==(const Range&, const Range&) = default;
};

struct Any {
  friend bool operator==(const Any&, const Any&) = default;
};

class Constraint {
public:
  Constraint() : value_(Any{}) {}

  static Constraint any() { return Constraint(); }

  static Constraint exact(Version v) {
    Constraint c;
    c.value_ = Exact{std::move(v)};
    return c;
  }

  // Throws invalid_version when the range admits no version. A missing lower
  // bound means 0, the smallest version.
  static Constraint range(std::optional<Version> min, std::optional<Version> max) {
    if (max && !(min.value_or(Version()) < *max)) {
      throw invalid_version("empty range [" + min.value_or(Version()).to_string() + ", " +
                            max->to_string() + ")");
    }
    if (min && *min == Version()) min.reset();
    Constraint c;
    if (!min && !max) {
      c.value_ = Any{};
    } else {
      c.value_ = Range{std::move(min), std::move(max)};
    }
    return c;
  }

  // Accepts "*", "==1.2", ">=1.2", "<2.0" and ">=1.2,<2.0".
  static Constraint parse(std::string_view text) {
    auto trim = [](std::string_view s) {
      while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
      while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
      return s;
    };
    text = trim(text);
    if (text == "*") {
      return any();
    }
    if (text.starts_with("==")) {
      return exact(Version::parse(trim(text.substr(2))));
    }
    std::optional<Version> lo;
    std::optional<Version> hi;
    std::size_t pos = 0;
    bool any_clause = false;
    while (pos <= text.size()) {
      std::size_t comma = text.find(',', pos);
      std::string_view clause = trim(text.substr(
          pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
      if (clause.starts_with(">=")) {
        if (lo) throw invalid_version("duplicate lower bound in '" + std::string(text) + "'");
        lo = Version::parse(trim(clause.substr(2)));
      } else if (clause.starts_with("<") && !clause.starts_with("<=")) {
        if (hi) throw invalid_version("duplicate upper bound in '" + std::string(text) + "'");
        hi = Version::parse(trim(clause.substr(1)));
      } else {
        throw invalid_version("unsupported constraint '" + std::string(text) + "'");
      }
      any_clause = true;
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (!any_clause) {
      throw invalid_version("empty constraint");
    }
    return range(std::move(lo), std::move(hi));
  }

  bool is_any() const noexcept { return std::holds_alternative<Any>(value_); }
  const Exact* as_exact() const noexcept { return std::get_if<Exact>(&value_); }
  const Range* as_range() const noexcept { return std::get_if<Range>(&value_); }

  bool satisfied_by(const Version& v) const noexcept {
    if (auto* e = as_exact()) return e->version == v;
    if (auto* r = as_range()) {
      return (!r->min || *r->min <= v) && (!r->max || v < *r->max);
    }
    return true;
  }

  std::string to_string() const {
    if (auto* e = as_exact()) return "==" + e->version.to_string();
    if (auto* r = as_range()) {
      std::string out;
      if (r->min) out += ">=" + r->min->to_string();
      if (r->max) {
        if (!out.empty()) out += ",";
        out += "<" + r->max->to_string();
      }
      return out;
    }
    return "*";
  }

  friend bool operator==(const Constraint&, const Constraint&) = default;

private:
  std::variant<Any, Exact, Range> value_;
};

// Exact set intersection. std::nullopt is the empty constraint.
inline std::optional<Constraint> intersect(const Constraint& a, const Constraint& b) {
  if (a.is_any()) return b;
  if (b.is_any()) return a;
  if (auto* ea = a.as_exact()) {
    return b.satisfied_by(ea->version) ? std::optional<Constraint>(a) : std::nullopt;
  }
  if (auto* eb = b.as_exact()) {
    return a.satisfied_by(eb->version) ? std::optional<Constraint>(b) : std::nullopt;
  }
  const Range& ra = *a.as_range();
  const Range& rb = *b.as_range();
  std::optional<Version> lo = ra.min;
  if (rb.min && (!lo || *lo < *rb.min)) lo = rb.min;
  std::optional<Version> hi = ra.max;
  if (rb.max && (!hi || *rb.max < *hi)) hi = rb.max;
  if (hi && !(lo.value_or(Version()) < *hi)) return std::nullopt;
  return Constraint::range(std::move(lo), std::move(hi));
}

// a ⊆ b as version sets.
inline bool is_subset(const Constraint& a, const Constraint& b) {
  auto both = intersect(a, b);
  return both && *both == a;
}

// Largest version in `universe` satisfying `c`.
template <typename Range_>
std::optional<Version> max_satisfying(const Constraint& c, const Range_& universe) {
  std::optional<Version> best;
  for (const Version& v : universe) {
    if (c.satisfied_by(v) && (!best || *best < v)) best = v;
  }
  return best;
}

}  // namespace shipyard

#endif  // SHIPYARD_VERSION_HPP
