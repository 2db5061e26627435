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

#include <gtest/gtest.h>

#include <vector>

#include "shipyard/random.hpp"
#include "shipyard/version.hpp"

namespace shipyard {
namespace {

Version V(const char* s) { return Version::parse(s); }

TEST(VersionTest, ComparesComponentwiseWithZeroPadding) {
  EXPECT_LT(V("1.4"), V("1.10"));
  EXPECT_LT(V("1.9.9"), V("2"));
  EXPECT_EQ(V("1.4"), V("1.4.0"));
  EXPECT_GT(V("1.4.0.1"), V("1.4"));
}

TEST(VersionTest, RejectsNonNumericInput) {
  EXPECT_THROW(V(""), invalid_version);
  EXPECT_THROW(V("1..2"), invalid_version);
  EXPECT_THROW(V("1.2a"), invalid_version);
  EXPECT_THROW(V("v1"), invalid_version);
  EXPECT_THROW(V("1.2."), invalid_version);
}

TEST(ConstraintTest, ParsesManifestForms) {
  EXPECT_TRUE(Constraint::parse("*").is_any());
  EXPECT_EQ(Constraint::parse("==1.2"), Constraint::exact(V("1.2")));
  EXPECT_EQ(Constraint::parse(">=1.2,<2.0"), Constraint::range(V("1.2"), V("2.0")));
  EXPECT_EQ(Constraint::parse(">=1.2"), Constraint::range(V("1.2"), std::nullopt));
  EXPECT_EQ(Constraint::parse("<2"), Constraint::range(std::nullopt, V("2")));
  EXPECT_EQ(Constraint::parse(">=1.2,<2.0").to_string(), ">=1.2,<2.0");
}

TEST(ConstraintTest, RejectsEmptyRangesAndGarbage) {
  EXPECT_THROW(Constraint::parse(">=2.0,<2.0"), invalid_version);
  EXPECT_THROW(Constraint::parse(">=3,<2"), invalid_version);
  EXPECT_THROW(Constraint::parse("~=1.0"), invalid_version);
  EXPECT_THROW(Constraint::parse("==1.x"), invalid_version);
  EXPECT_THROW(Constraint::parse(">=1,>=2"), invalid_version);
  EXPECT_THROW(Constraint::parse(""), invalid_version);
  EXPECT_THROW(Constraint::parse("<0"), invalid_version);
}

TEST(ConstraintTest, IntersectExamples) {
  auto e1 = Constraint::exact(V("1.0"));
  EXPECT_EQ(intersect(e1, e1), e1);
  EXPECT_FALSE(intersect(e1, Constraint::exact(V("2.0"))).has_value());

  auto a = Constraint::range(V("1.0"), V("3.0"));
  auto b = Constraint::range(V("2.0"), V("4.0"));
  auto ab = intersect(a, b);
  ASSERT_TRUE(ab.has_value());
  EXPECT_EQ(*ab, Constraint::range(V("2.0"), V("3.0")));

  // Enumeration check over the sample versions.
  std::vector<Version> sample = {V("1.0"), V("1.5"), V("2.0"), V("2.5"), V("3.0"), V("3.5")};
  std::vector<Version> both;
  for (const auto& v : sample) {
    if (a.satisfied_by(v) && b.satisfied_by(v)) both.push_back(v);
  }
  EXPECT_EQ(both, (std::vector<Version>{V("2.0"), V("2.5")}));
  for (const auto& v : sample) {
    EXPECT_EQ(ab->satisfied_by(v), a.satisfied_by(v) && b.satisfied_by(v)) << v.to_string();
  }
}

TEST(ConstraintTest, AdjacentRangesAreDisjoint) {
  auto lo = Constraint::range(V("1.0"), V("2.0"));
  auto hi = Constraint::range(V("2.0"), V("3.0"));
  EXPECT_FALSE(intersect(lo, hi).has_value());
  EXPECT_FALSE(intersect(Constraint::exact(V("2.0")), lo).has_value());
  EXPECT_EQ(intersect(Constraint::exact(V("2.0")), hi), Constraint::exact(V("2.0")));
}

TEST(ConstraintTest, SubsetFollowsSetInclusion) {
  auto any = Constraint::any();
  auto r = Constraint::range(V("1.0"), V("3.0"));
  auto e = Constraint::exact(V("2.0"));
  EXPECT_TRUE(is_subset(e, r));
  EXPECT_TRUE(is_subset(r, any));
  EXPECT_FALSE(is_subset(any, r));
  EXPECT_FALSE(is_subset(r, e));
  EXPECT_TRUE(is_subset(Constraint::range(V("1.5"), V("2.0")), r));
  // >=0 admits every version.
  EXPECT_TRUE(Constraint::parse(">=0").is_any());
  EXPECT_TRUE(is_subset(any, Constraint::parse(">=0.0")));
}

TEST(ConstraintTest, MaxSatisfying) {
  std::vector<Version> universe = {V("1.0"), V("2.0"), V("2.5"), V("3.0")};
  EXPECT_EQ(max_satisfying(Constraint::range(V("1.0"), V("3.0")), universe), V("2.5"));
  EXPECT_EQ(max_satisfying(Constraint::any(), universe), V("3.0"));
  EXPECT_FALSE(max_satisfying(Constraint::range(V("9.0"), V("9.1")), universe).has_value());
}

// Random constraints whose bounds lie on a half-step grid; membership is then
// checked against a finer grid that includes points between the bounds.
class ConstraintGen {
public:
  explicit ConstraintGen(std::uint64_t seed) : rng_(seed) {}

  Constraint next() {
    auto pick = [&] { return Version({rng_.below(5), rng_.below(2) * 5}); };
    switch (rng_.below(4)) {
      case 0:
        return Constraint::any();
      case 1:
        return Constraint::exact(pick());
      default: {
        std::optional<Version> lo;
        std::optional<Version> hi;
        if (rng_.below(3) != 0) lo = pick();
        if (rng_.below(3) != 0) hi = pick();
        if (lo && hi && !(*lo < *hi)) std::swap(lo, hi);
        if (lo && hi && !(*lo < *hi)) hi.reset();
        if (hi && *hi == Version()) hi.reset();
        return Constraint::range(lo, hi);
      }
    }
  }

private:
  Rng rng_;
};

std::vector<Version> fine_grid() {
  std::vector<Version> g;
  for (std::uint64_t major = 0; major <= 5; ++major) {
    for (std::uint64_t minor = 0; minor <= 9; ++minor) g.push_back(Version({major, minor}));
    g.push_back(Version({major, 5, 1}));
  }
  return g;
}

TEST(ConstraintPropertyTest, IntersectionMatchesPointwiseConjunction) {
  ConstraintGen gen(11);
  const auto grid = fine_grid();
  for (int trial = 0; trial < 3000; ++trial) {
    Constraint a = gen.next();
    Constraint b = gen.next();
    auto ab = intersect(a, b);
    bool any_member = false;
    for (const auto& v : grid) {
      bool expected = a.satisfied_by(v) && b.satisfied_by(v);
      any_member = any_member || expected;
      bool got = ab && ab->satisfied_by(v);
      ASSERT_EQ(got, expected) << a.to_string() << " & " << b.to_string() << " at " << v.to_string();
    }
    // Bounds live on the half-step grid, so a non-empty result always has a
    // grid witness.
    ASSERT_EQ(ab.has_value(), any_member) << a.to_string() << " & " << b.to_string();
  }
}

TEST(ConstraintPropertyTest, IntersectionIsCommutativeAndAssociative) {
  ConstraintGen gen(12);
  for (int trial = 0; trial < 3000; ++trial) {
    Constraint a = gen.next();
    Constraint b = gen.next();
    Constraint c = gen.next();
    ASSERT_EQ(intersect(a, b), intersect(b, a)) << a.to_string() << " & " << b.to_string();
    auto left = intersect(a, b);
    auto right = intersect(b, c);
    std::optional<Constraint> lhs = left ? intersect(*left, c) : std::nullopt;
    std::optional<Constraint> rhs = right ? intersect(a, *right) : std::nullopt;
    ASSERT_EQ(lhs, rhs);
    ASSERT_EQ(intersect(a, a), a);
  }
}

TEST(ConstraintPropertyTest, ToStringRoundTrips) {
  ConstraintGen gen(13);
  for (int trial = 0; trial < 500; ++trial) {
    Constraint c = gen.next();
    ASSERT_EQ(Constraint::parse(c.to_string()), c) << c.to_string();
  }
}

}  // namespace
}  // namespace shipyard
