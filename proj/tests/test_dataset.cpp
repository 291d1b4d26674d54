// tests/test_dataset.cpp
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

#include "btda/dataset.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace btda {
namespace {

std::vector<DomainSpec> simple_specs(int domains, int n_per, int k) {
  std::vector<DomainSpec> specs;
  for (int d = 0; d < domains; ++d) {
    DomainSpec s;
    s.domain_id = d;
    s.n_samples = n_per;
    s.label_prior.assign(k, 1.0 / k);
    s.style.background = {0.1 + 0.2 * d, 0.5, 0.9 - 0.2 * d};
    s.style.foreground = {0.9 - 0.2 * d, 0.2, 0.1 + 0.2 * d};
    s.style.noise = 0.02 * d;
    s.style.gradient = 0.1 * d;
    specs.push_back(s);
  }
  return specs;
}

double l1(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(LabelShiftSpec, LongTailedPriorMatchesGeometricSequence) {
  LabelShiftSpec spec;
  spec.kind = LabelShiftSpec::Kind::kLongTailed;
  spec.ratio = 0.5;
  auto p = spec.prior(4);
  // 1, 0.5, 0.25, 0.125 normalized by 1.875
  EXPECT_NEAR(p[0], 8.0 / 15.0, 1e-12);
  EXPECT_NEAR(p[1], 4.0 / 15.0, 1e-12);
  EXPECT_NEAR(p[2], 2.0 / 15.0, 1e-12);
  EXPECT_NEAR(p[3], 1.0 / 15.0, 1e-12);
}

TEST(LabelShiftSpec, ReversePriorIsMirrored) {
  LabelShiftSpec spec;
  spec.kind = LabelShiftSpec::Kind::kReverseLongTailed;
  spec.ratio = 0.5;
  auto p = spec.prior(4);
  EXPECT_NEAR(p[0], 1.0 / 15.0, 1e-12);
  EXPECT_NEAR(p[3], 8.0 / 15.0, 1e-12);
}

TEST(LabelShiftSpec, PriorsAreValidDistributions) {
  for (auto kind : {LabelShiftSpec::Kind::kUniform, LabelShiftSpec::Kind::kLongTailed,
                    LabelShiftSpec::Kind::kReverseLongTailed, LabelShiftSpec::Kind::kGaussian}) {
    LabelShiftSpec spec;
    spec.kind = kind;
    spec.ratio = 0.7;
    spec.center = 1.5;
    spec.width = 1.0;
    for (int k = 2; k <= 8; ++k) {
      auto p = spec.prior(k);
      double sum = std::accumulate(p.begin(), p.end(), 0.0);
      EXPECT_NEAR(sum, 1.0, 1e-12);
      for (double v : p) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(BlendedShapes, DeterministicAndCorrectShape) {
  auto specs = simple_specs(3, 100, 4);
  Dataset a = make_blended_shapes(specs, 4, 7);
  Dataset b = make_blended_shapes(specs, 4, 7);
  EXPECT_EQ(a.n, 300u);
  EXPECT_EQ(a.row_dim(), std::size_t{3 * 16 * 16});
  EXPECT_TRUE(a == b);
  Dataset c = make_blended_shapes(specs, 4, 8);
  EXPECT_FALSE(a == c);
}

TEST(BlendedShapes, PixelsInUnitRangeAndFinite) {
  auto specs = simple_specs(2, 50, 4);
  specs[1].style.noise = 0.3;
  Dataset ds = make_blended_shapes(specs, 4, 3);
  for (float v : ds.data) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(BlendedShapes, BadClassCountRejected) {
  auto specs = simple_specs(1, 10, 4);
  EXPECT_THROW(
      {
        try {
          make_blended_shapes(specs, 0, 1);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kBadK);
          throw;
        }
      },
      Error);
  EXPECT_THROW(make_blended_shapes({}, 4, 1), Error);
}

TEST(BlendedShapes, LabelPriorFidelityAtLargeN) {
  LabelShiftSpec shift;
  shift.kind = LabelShiftSpec::Kind::kLongTailed;
  shift.ratio = 0.5;
  DomainSpec s;
  s.domain_id = 0;
  s.n_samples = 10000;
  s.label_prior = shift.prior(4);
  Dataset ds = make_blended_shapes({s}, 4, 123);
  auto emp = label_distribution(ds, 0);
  EXPECT_LT(l1(emp, s.label_prior), 0.05);
}

TEST(BlendedShapes, StyleSeparationExceedsNoise) {
  auto specs = simple_specs(2, 200, 4);
  specs[0].style.background = {0.9, 0.85, 0.8};
  specs[0].style.foreground = {0.15, 0.2, 0.25};
  specs[0].style.noise = 0.05;
  specs[1].style.background = {0.2, 0.3, 0.55};
  specs[1].style.foreground = {0.85, 0.8, 0.6};
  specs[1].style.noise = 0.05;
  Dataset ds = make_blended_shapes(specs, 4, 5);

  // mean per-channel pixel value per domain
  std::array<double, 3> m0{}, m1{};
  std::array<std::int64_t, 2> counts{};
  const std::size_t hw = 16 * 16;
  for (std::size_t i = 0; i < ds.n; ++i) {
    auto& m = ds.domains[i] == 0 ? m0 : m1;
    counts[ds.domains[i]]++;
    for (int ch = 0; ch < 3; ++ch) {
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += ds.row(i)[ch * hw + p];
      m[ch] += acc / hw;
    }
  }
  double gap = 0.0;
  for (int ch = 0; ch < 3; ++ch)
    gap = std::max(gap, std::abs(m0[ch] / counts[0] - m1[ch] / counts[1]));
  EXPECT_GT(gap, 0.05);  // noise amplitude
}

TEST(GaussianDomains, ZeroStyleClustersAtCanonicalCenters) {
  DomainSpec s;
  s.domain_id = 0;
  s.n_samples = 4000;
  s.label_prior = {0.5, 0.5};
  Dataset ds = make_gaussian_domains({s}, 2, 2, 9);
  std::array<std::array<double, 2>, 2> mean{};
  std::array<int, 2> count{};
  for (std::size_t i = 0; i < ds.n; ++i) {
    mean[ds.labels[i]][0] += ds.row(i)[0];
    mean[ds.labels[i]][1] += ds.row(i)[1];
    count[ds.labels[i]]++;
  }
  for (int cls = 0; cls < 2; ++cls) {
    auto c = gaussian_class_center(cls, 2, 2);
    EXPECT_NEAR(mean[cls][0] / count[cls], c[0], 0.05);
    EXPECT_NEAR(mean[cls][1] / count[cls], c[1], 0.05);
  }
}

TEST(GaussianDomains, PiRotationNegatesCenters) {
  std::vector<DomainSpec> specs(2);
  specs[0].domain_id = 0;
  specs[0].n_samples = 3000;
  specs[0].label_prior = {0.5, 0.5};
  specs[1] = specs[0];
  specs[1].domain_id = 1;
  specs[1].style.gradient = std::numbers::pi;
  Dataset ds = make_gaussian_domains(specs, 2, 2, 21);
  std::array<std::array<double, 2>, 2> mean{};
  std::array<int, 2> count{};
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.domains[i] != 1) continue;
    mean[ds.labels[i]][0] += ds.row(i)[0];
    mean[ds.labels[i]][1] += ds.row(i)[1];
    count[ds.labels[i]]++;
  }
  for (int cls = 0; cls < 2; ++cls) {
    auto c = gaussian_class_center(cls, 2, 2);
    EXPECT_NEAR(mean[cls][0] / count[cls], -c[0], 0.06);
    EXPECT_NEAR(mean[cls][1] / count[cls], -c[1], 0.06);
  }
}

TEST(GaussianDomains, SameSeedIdentical) {
  auto specs = simple_specs(2, 100, 3);
  Dataset a = make_gaussian_domains(specs, 3, 8, 2);
  Dataset b = make_gaussian_domains(specs, 3, 8, 2);
  EXPECT_TRUE(a == b);
}

TEST(GaussianDomains, DimensionRangeEnforced) {
  auto specs = simple_specs(1, 10, 2);
  EXPECT_THROW(make_gaussian_domains(specs, 2, 1, 1), Error);
  EXPECT_THROW(make_gaussian_domains(specs, 2, 65, 1), Error);
}

TEST(LabelDistribution, CountsAndErrors) {
  DomainSpec s;
  s.domain_id = 0;
  s.n_samples = 400;
  s.label_prior = {0.75, 0.25};
  Dataset ds = make_gaussian_domains({s}, 2, 2, 4);
  auto p = label_distribution(ds, 0);
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
  EXPECT_THROW(
      {
        try {
          label_distribution(ds, 3);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kEmptyDomain);
          throw;
        }
      },
      Error);
}

TEST(LabelDistribution, HandCounts) {
  // build a tiny dataset by hand
  Dataset ds;
  ds.mode = Mode::kVector;
  ds.n = 4;
  ds.c = 1;
  ds.h = 1;
  ds.w = 2;
  ds.k = 2;
  ds.n_domains = 1;
  ds.data.assign(8, 0.0f);
  ds.labels = {0, 0, 1, 1};
  ds.domains = {0, 0, 0, 0};
  auto p = label_distribution(ds, 0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  ds.labels = {0, 0, 0, 1};
  p = label_distribution(ds, 0);
  EXPECT_DOUBLE_EQ(p[0], 0.75);
  EXPECT_DOUBLE_EQ(p[1], 0.25);
}

TEST(ResampleLabelShift, ReverseLongTailedHitsTargetPrior) {
  auto specs = simple_specs(2, 4000, 4);
  Dataset ds = make_blended_shapes(specs, 4, 11);
  LabelShiftSpec spec;
  spec.kind = LabelShiftSpec::Kind::kReverseLongTailed;
  spec.ratio = 0.5;
  Dataset out = resample_label_shift(ds, 1, spec, 99);
  auto emp = label_distribution(out, 1);
  auto want = spec.prior(4);
  EXPECT_NEAR(want[0], 1.0 / 15.0, 1e-12);
  EXPECT_NEAR(want[3], 8.0 / 15.0, 1e-12);
  EXPECT_LT(l1(emp, want), 0.06);
  // other domain untouched
  EXPECT_TRUE(std::equal(ds.data.begin(), ds.data.begin() + 4000 * ds.row_dim(),
                         out.data.begin()));
}

TEST(ResampleLabelShift, MissingSupportRejected) {
  DomainSpec s;
  s.domain_id = 0;
  s.n_samples = 50;
  s.label_prior = {1.0, 0.0};  // class 1 absent by design
  Dataset ds = make_gaussian_domains({s}, 2, 2, 6);
  LabelShiftSpec spec;
  spec.kind = LabelShiftSpec::Kind::kUniform;
  EXPECT_THROW(
      {
        try {
          resample_label_shift(ds, 0, spec, 1);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kNoSupport);
          throw;
        }
      },
      Error);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  auto specs = simple_specs(3, 40, 4);
  Dataset ds = make_blended_shapes(specs, 4, 17);
  std::string path = temp_path("btda_roundtrip.btda");
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  EXPECT_TRUE(ds == back);
  std::filesystem::remove(path);
}

TEST(DatasetIo, RandomDatasetsRoundTrip) {
  Rng rng(909);
  for (int trial = 0; trial < 20; ++trial) {
    int domains = 1 + static_cast<int>(rng.uniform_int(3));
    int k = 2 + static_cast<int>(rng.uniform_int(4));
    int n = 5 + static_cast<int>(rng.uniform_int(40));
    auto specs = simple_specs(domains, n, k);
    Dataset ds = rng.uniform() < 0.5
                     ? make_blended_shapes(specs, k, rng.next_u64())
                     : make_gaussian_domains(specs, k, 2 + static_cast<int>(rng.uniform_int(10)),
                                             rng.next_u64());
    std::string path = temp_path("btda_rt_" + std::to_string(trial) + ".btda");
    save_dataset(ds, path);
    EXPECT_TRUE(load_dataset(path) == ds);
    std::filesystem::remove(path);
  }
}

TEST(DatasetIo, CorruptMagicRejected) {
  auto specs = simple_specs(1, 10, 2);
  Dataset ds = make_gaussian_domains(specs, 2, 2, 1);
  std::string path = temp_path("btda_badmagic.btda");
  save_dataset(ds, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  EXPECT_THROW(
      {
        try {
          load_dataset(path);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kBadMagic);
          throw;
        }
      },
      Error);
  std::filesystem::remove(path);
}

TEST(DatasetIo, TruncatedFileRejected) {
  auto specs = simple_specs(1, 10, 2);
  Dataset ds = make_gaussian_domains(specs, 2, 2, 1);
  std::string path = temp_path("btda_trunc.btda");
  save_dataset(ds, path);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  EXPECT_THROW(
      {
        try {
          load_dataset(path);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kTruncated);
          throw;
        }
      },
      Error);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace btda
