// tests/test_rng.cpp
//
// Copyright 2026 The btda-lab Authors
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

#include "btda/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace btda {
namespace {

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(7);
  double mean = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u;
  }
  mean /= 20000;
  EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(Rng, NormalMomentsRoughlyStandard) {
  Rng r(11);
  double m1 = 0.0, m2 = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    m1 += x;
    m2 += x * x;
  }
  m1 /= n;
  m2 /= n;
  EXPECT_NEAR(m1, 0.0, 0.03);
  EXPECT_NEAR(m2, 1.0, 0.05);
}

TEST(Rng, MultinomialCountsSumAndConcentrate) {
  Rng r(3);
  std::vector<double> p{0.5, 0.3, 0.2};
  auto counts = r.multinomial(10000, p);
  std::int64_t total = 0;
  for (auto c : counts) total += c;
  EXPECT_EQ(total, 10000);
  EXPECT_NEAR(counts[0] / 10000.0, 0.5, 0.03);
  EXPECT_NEAR(counts[1] / 10000.0, 0.3, 0.03);
  EXPECT_NEAR(counts[2] / 10000.0, 0.2, 0.03);
}

TEST(Rng, DeriveSeparatesStreams) {
  EXPECT_NE(Rng::derive(1, 0), Rng::derive(1, 1));
  EXPECT_NE(Rng::derive(1, 0), Rng::derive(2, 0));
  EXPECT_EQ(Rng::derive(9, 4), Rng::derive(9, 4));
}

TEST(Rng, CategoricalRespectsSupport) {
  Rng r(5);
  std::vector<double> p{0.0, 1.0, 0.0};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(r.categorical(p), 1);
}

}  // namespace
}  // namespace btda
