// tests/test_mcda.cpp
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

#include "btda/mcda.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

namespace btda {
namespace {

Dataset tiny_vector_dataset(int n_per_domain, int domains, int k, std::uint64_t seed,
                            double spread = 0.0) {
  std::vector<DomainSpec> specs;
  for (int d = 0; d < domains; ++d) {
    DomainSpec s;
    s.domain_id = d;
    s.n_samples = n_per_domain;
    s.label_prior.assign(k, 1.0 / k);
    s.style.noise = spread;
    specs.push_back(s);
  }
  return make_gaussian_domains(specs, k, 2, seed);
}

void zero_discriminator(ModelBundle& m) {
  for (std::size_t b : {kDW1, kDB1, kDW2, kDB2})
    std::fill(m.blocks[b].w.begin(), m.blocks[b].w.end(), 0.0);
}

TEST(Entropy, KnownValues) {
  std::vector<double> uniform4(4, 0.25);
  EXPECT_NEAR(entropy(uniform4), std::log(4.0), 1e-9);
  std::vector<double> onehot4{0.0, 1.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(entropy(onehot4), 0.0);
  std::vector<double> p{0.7, 0.2, 0.1};
  EXPECT_NEAR(entropy(p), 0.8018, 1e-4);
}

TEST(Entropy, RejectsInvalidVectors) {
  std::vector<double> neg{1.2, -0.2};
  EXPECT_THROW(
      {
        try {
          entropy(neg);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kBadProb);
          throw;
        }
      },
      Error);
  std::vector<double> badsum{0.5, 0.4};
  EXPECT_THROW(entropy(badsum), Error);
}

TEST(MixLabel, GatesConfidentPredictions) {
  std::vector<double> confident{0.995, 0.005};
  MixedLabel ml = mix_label(confident, 0.05);
  EXPECT_TRUE(ml.is_onehot);
  EXPECT_DOUBLE_EQ(ml.vec[0], 1.0);
  EXPECT_DOUBLE_EQ(ml.vec[1], 0.0);
  EXPECT_NEAR(ml.entropy, 0.0315, 1e-3);
}

TEST(MixLabel, KeepsUncertainPredictionsSoft) {
  std::vector<double> soft{0.6, 0.4};
  MixedLabel ml = mix_label(soft, 0.05);
  EXPECT_FALSE(ml.is_onehot);
  EXPECT_EQ(ml.vec, soft);
  EXPECT_NEAR(ml.entropy, 0.6730, 1e-4);
}

TEST(MixLabel, OnehotInputUnchanged) {
  std::vector<double> onehot2{0.0, 1.0};
  MixedLabel ml = mix_label(onehot2, 0.05);
  EXPECT_TRUE(ml.is_onehot);
  EXPECT_EQ(ml.vec, onehot2);
}

TEST(MixLabel, ArgmaxTieGoesToLowestIndex) {
  std::vector<double> tie{0.5, 0.5};
  // gamma above ln 2 so the tie is gated
  MixedLabel ml = mix_label(tie, 1.0);
  EXPECT_DOUBLE_EQ(ml.vec[0], 1.0);
  EXPECT_DOUBLE_EQ(ml.vec[1], 0.0);
}

TEST(MixLabel, Idempotent) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    int k = 2 + static_cast<int>(rng.uniform_int(5));
    std::vector<double> p(k);
    double sum = 0.0;
    for (auto& v : p) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (auto& v : p) v /= sum;
    double gamma = rng.uniform(0.0, 1.0);
    auto once = mix_label(p, gamma);
    auto twice = mix_label(once.vec, gamma);
    EXPECT_EQ(once.vec, twice.vec);
  }
}

TEST(MixLabel, GatingMonotoneInGamma) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(4);
    double sum = 0.0;
    for (auto& v : p) {
      v = rng.uniform() + 1e-3;
      sum += v;
    }
    for (auto& v : p) v /= sum;
    double g1 = rng.uniform(0.0, 1.5), g2 = rng.uniform(0.0, 1.5);
    if (g1 > g2) std::swap(g1, g2);
    bool gated_lo = mix_label(p, g1).is_onehot && !mix_label(p, 0.0).is_onehot;
    bool gated_hi = mix_label(p, g2).is_onehot;
    if (gated_lo) EXPECT_TRUE(gated_hi);
  }
}

TEST(BalancedBatch, ExactRoundRobinCounts) {
  Dataset ds = tiny_vector_dataset(100, 1, 2, 1);
  DomainView view = make_domain_view(ds, 0);
  Rng rng(2);
  auto batch = balanced_source_batch(view, rng, 10);
  std::map<int, int> per_class;
  for (int row : batch) per_class[ds.labels[row]]++;
  EXPECT_EQ(per_class[0], 5);
  EXPECT_EQ(per_class[1], 5);
}

TEST(BalancedBatch, ImbalancedPoolStillBalanced) {
  // 190 vs 10 samples
  std::vector<DomainSpec> specs(1);
  specs[0].domain_id = 0;
  specs[0].n_samples = 200;
  specs[0].label_prior = {0.95, 0.05};
  Dataset ds = make_gaussian_domains(specs, 2, 2, 3);
  DomainView view = make_domain_view(ds, 0);
  ASSERT_GE(view.by_class[1].size(), 1u);
  Rng rng(7);
  auto batch = balanced_source_batch(view, rng, 10);
  std::map<int, int> per_class;
  for (int row : batch) per_class[ds.labels[row]]++;
  EXPECT_EQ(per_class[0], 5);
  EXPECT_EQ(per_class[1], 5);
}

TEST(BalancedBatch, EmptyClassRejected) {
  std::vector<DomainSpec> specs(1);
  specs[0].domain_id = 0;
  specs[0].n_samples = 60;
  specs[0].label_prior = {1.0, 0.0};
  Dataset ds = make_gaussian_domains(specs, 2, 2, 3);
  DomainView view = make_domain_view(ds, 0);
  Rng rng(1);
  EXPECT_THROW(
      {
        try {
          balanced_source_batch(view, rng, 8);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kEmptyClass);
          throw;
        }
      },
      Error);
}

TEST(BalancedBatch, LongRunFrequenciesNearUniform) {
  Dataset ds = tiny_vector_dataset(300, 1, 3, 11);
  DomainView view = make_domain_view(ds, 0);
  Rng rng(13);
  std::vector<std::int64_t> counts(3, 0);
  const int batches = 1000, bs = 9;
  for (int b = 0; b < batches; ++b)
    for (int row : balanced_source_batch(view, rng, bs)) counts[ds.labels[row]]++;
  for (int c = 0; c < 3; ++c) {
    double freq = static_cast<double>(counts[c]) / (batches * bs);
    EXPECT_NEAR(freq, 1.0 / 3.0, 0.01);
  }
}

TEST(AdversarialLoss, HalfProbabilityBaseline) {
  Dataset ds = tiny_vector_dataset(10, 2, 2, 5);
  Arch a = arch_for_dataset(ds);
  ModelBundle m = init_model(a, 1);
  zero_discriminator(m);  // all sigmoids are exactly 0.5
  std::vector<int> src{0};
  std::vector<int> tgt{static_cast<int>(ds.rows_of_domain(1)[0])};
  std::vector<std::vector<double>> ysrc{onehot(ds.labels[src[0]], 2)};
  std::vector<std::vector<double>> ytgt{onehot(ds.labels[tgt[0]], 2)};
  double value = adversarial_loss(m, ds, src, tgt, ysrc, ytgt, 1.0);
  EXPECT_NEAR(value, -2.0 * std::log(2.0), 1e-9);
}

TEST(AdversarialLoss, SoftTargetTermAtHalf) {
  Dataset ds = tiny_vector_dataset(10, 2, 2, 5);
  ModelBundle m = init_model(arch_for_dataset(ds), 1);
  zero_discriminator(m);
  std::vector<int> src{0};
  std::vector<int> tgt{ds.rows_of_domain(1)[0]};
  std::vector<std::vector<double>> ysrc{onehot(ds.labels[src[0]], 2)};
  std::vector<std::vector<double>> soft{{0.5, 0.5}};
  double value = adversarial_loss(m, ds, src, tgt, ysrc, soft, 1.0);
  // source term ln(1/2) plus target term 0.5 ln(1/2) + 0.5 ln(1/2)
  EXPECT_NEAR(value - std::log(0.5), -0.6931, 1e-4);
}

TEST(AdversarialLoss, NonPositiveWithZeroSupremum) {
  Rng rng(23);
  Dataset ds = tiny_vector_dataset(40, 2, 3, 6);
  auto tgt_rows = ds.rows_of_domain(1);
  for (int trial = 0; trial < 10; ++trial) {
    ModelBundle m = init_model(arch_for_dataset(ds), 100 + trial);
    std::vector<int> src, tgt;
    std::vector<std::vector<double>> ysrc, ytgt;
    for (int i = 0; i < 6; ++i) {
      int s = static_cast<int>(rng.uniform_int(40));
      int t = tgt_rows[rng.uniform_int(tgt_rows.size())];
      src.push_back(s);
      tgt.push_back(t);
      ysrc.push_back(onehot(ds.labels[s], 3));
      ytgt.push_back(onehot(ds.labels[t], 3));
    }
    EXPECT_LE(adversarial_loss(m, ds, src, tgt, ysrc, ytgt, 1.0), 0.0);
  }
}

TEST(AdversarialLoss, DiscriminatorAscendsTheObjective) {
  Dataset ds = tiny_vector_dataset(60, 2, 2, 9);
  ModelBundle m = init_model(arch_for_dataset(ds), 3);
  auto src_rows = ds.rows_of_domain(0);
  auto tgt_rows = ds.rows_of_domain(1);
  std::vector<int> src(src_rows.begin(), src_rows.begin() + 16);
  std::vector<int> tgt(tgt_rows.begin(), tgt_rows.begin() + 16);
  std::vector<std::vector<double>> ysrc, ytgt;
  for (int r : src) ysrc.push_back(onehot(ds.labels[r], 2));
  for (int r : tgt) ytgt.push_back(onehot(ds.labels[r], 2));

  double before = adversarial_loss(m, ds, src, tgt, ysrc, ytgt, 0.0);
  SgdState sgd;
  for (int step = 0; step < 50; ++step) {
    Gradients g = zero_gradients(m);
    adversarial_loss(m, ds, src, tgt, ysrc, ytgt, /*lambda=*/0.0, &g);
    sgd_step(m, g, sgd, 0.05, 0.9, 0.0);
  }
  double after = adversarial_loss(m, ds, src, tgt, ysrc, ytgt, 0.0);
  EXPECT_GT(after, before);  // lambda 0: only the discriminator learns, by ascent
  EXPECT_LE(after, 0.0);
}

TEST(AdversarialLoss, OnehotLabelsLeaveOtherLogitsSilent) {
  // with one-hot labels only the activated logit row of d.w2 receives grads
  Dataset ds = tiny_vector_dataset(80, 2, 4, 31);
  ModelBundle m = init_model(arch_for_dataset(ds), 8);
  DomainView src_view = make_domain_view(ds, 0);
  auto tgt_rows = ds.rows_of_domain(1);
  std::vector<int> src, tgt;
  std::vector<std::vector<double>> ysrc, ytgt;
  // use only classes 0 and 1 on both sides
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 8; ++i) src.push_back(src_view.by_class[c][i]);
  for (int r : src) ysrc.push_back(onehot(ds.labels[r], 4));
  for (int r : tgt_rows) {
    if (ds.labels[r] <= 1 && tgt.size() < 16) {
      tgt.push_back(r);
      ytgt.push_back(onehot(ds.labels[r], 4));
    }
  }
  ASSERT_EQ(tgt.size(), 16u);

  Gradients g = zero_gradients(m);
  adversarial_loss(m, ds, src, tgt, ysrc, ytgt, 1.0, &g);
  const auto& shape = m.blocks[kDW2].shape;  // [d_out, d_hidden]
  for (std::uint32_t c = 2; c < 4; ++c) {
    EXPECT_EQ(g[kDB2][c], 0.0);
    for (std::uint32_t hcol = 0; hcol < shape[1]; ++hcol)
      EXPECT_EQ(g[kDW2][c * shape[1] + hcol], 0.0);
  }
  // the activated rows do receive gradient
  double mass = 0.0;
  for (std::uint32_t hcol = 0; hcol < shape[1]; ++hcol)
    mass += std::abs(g[kDW2][0 * shape[1] + hcol]);
  EXPECT_GT(mass, 0.0);
}

TEST(AdversarialLoss, UniformLabelsAverageTheLogitPaths) {
  // uniform mixed labels make the categorical term 1/k times the sum of the
  // per-logit one-hot terms; the gradients obey the same identity
  Dataset ds = tiny_vector_dataset(40, 2, 4, 77);
  ModelBundle m = init_model(arch_for_dataset(ds), 12);
  auto src_rows = ds.rows_of_domain(0);
  auto tgt_rows = ds.rows_of_domain(1);
  std::vector<int> src(src_rows.begin(), src_rows.begin() + 8);
  std::vector<int> tgt(tgt_rows.begin(), tgt_rows.begin() + 8);
  std::vector<std::vector<double>> ysrc;
  for (int r : src) ysrc.push_back(onehot(ds.labels[r], 4));

  std::vector<std::vector<double>> uniform(tgt.size(), std::vector<double>(4, 0.25));
  Gradients g_uniform = zero_gradients(m);
  adversarial_loss(m, ds, src, tgt, ysrc, uniform, 1.0, &g_uniform);

  Gradients g_sum = zero_gradients(m);
  for (int c = 0; c < 4; ++c) {
    std::vector<std::vector<double>> hard(tgt.size(), onehot(c, 4));
    Gradients g_c = zero_gradients(m);
    adversarial_loss(m, ds, src, tgt, ysrc, hard, 1.0, &g_c);
    for (std::size_t b = 0; b < g_sum.size(); ++b)
      for (std::size_t i = 0; i < g_sum[b].size(); ++i)
        g_sum[b][i] += 0.25 * g_c[b][i];
  }
  for (std::size_t b = 0; b < g_uniform.size(); ++b)
    for (std::size_t i = 0; i < g_uniform[b].size(); ++i)
      EXPECT_NEAR(g_uniform[b][i], g_sum[b][i], 1e-12);
}

TEST(ClassificationLoss, IdenticalStyleIsIdentity) {
  Dataset ds = tiny_vector_dataset(30, 2, 3, 15);
  ModelBundle m = init_model(arch_for_dataset(ds), 2);
  std::vector<int> one{4};
  Rng rng(1);
  double both = classification_loss(m, ds, one, one, rng);
  // plain term alone
  BatchPlan plan;
  plan.src = one;
  double plain = eval_losses(m, ds, plan, LossScales{}, nullptr).cls;
  EXPECT_NEAR(both, 2.0 * plain, 1e-5);
}

TEST(ClassificationLoss, PerfectClassifierDrivesLossToZero) {
  Dataset ds = tiny_vector_dataset(30, 2, 2, 16);
  ModelBundle m = init_model(arch_for_dataset(ds), 2);
  int row = 3;
  int y = ds.labels[row];
  std::fill(m.blocks[kHW].w.begin(), m.blocks[kHW].w.end(), 0.0);
  std::fill(m.blocks[kHB].w.begin(), m.blocks[kHB].w.end(), -60.0);
  m.blocks[kHB].w[y] = 60.0;
  std::vector<int> one{row};
  Rng rng(1);
  EXPECT_LT(classification_loss(m, ds, one, one, rng), 1e-8);
}

TEST(ClassificationLoss, DeterministicGivenSeed) {
  Dataset ds = tiny_vector_dataset(50, 2, 3, 17);
  ModelBundle m = init_model(arch_for_dataset(ds), 5);
  auto src = ds.rows_of_domain(0);
  auto tgt = ds.rows_of_domain(1);
  src.resize(8);
  tgt.resize(8);
  Rng r1(9), r2(9);
  EXPECT_EQ(classification_loss(m, ds, src, tgt, r1),
            classification_loss(m, ds, src, tgt, r2));
}

TEST(Schedules, KnownValuesAndShape) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_schedule(0.0, cfg), 0.01);
  EXPECT_NEAR(lr_schedule(1.0, cfg), 0.001656, 1e-6);
  EXPECT_DOUBLE_EQ(grl_coeff(0.0), 0.0);
  double prev = -1.0;
  for (double p = 0.0; p <= 1.0; p += 0.05) {
    double l = grl_coeff(p, 1.0);
    EXPECT_GT(l, prev);
    EXPECT_LE(l, 1.0);
    prev = l;
  }
  EXPECT_THROW(lr_schedule(1.5, cfg), Error);
}

TEST(TrainStep, LambdaZeroNoAugEqualsSupervisedSgd) {
  Dataset ds = tiny_vector_dataset(60, 2, 2, 19);
  TrainConfig cfg;
  cfg.method = "source_only";
  MethodFlags flags = resolve_method(cfg);

  ModelBundle m1 = init_model(arch_for_dataset(ds), 4);
  ModelBundle m2 = m1;

  auto src = ds.rows_of_domain(0);
  src.resize(16);
  Rng rng(3);
  SgdState sgd1;
  double p = 0.3;
  train_step(m1, ds, src, {}, cfg, flags, p, rng, sgd1);

  // manual supervised step
  BatchPlan plan;
  plan.src = src;
  Gradients g = zero_gradients(m2);
  eval_losses(m2, ds, plan, LossScales{}, &g);
  SgdState sgd2;
  sgd_step(m2, g, sgd2, lr_schedule(p, cfg), cfg.momentum, cfg.weight_decay);

  for (std::size_t b = 0; b < kNumBlocks; ++b) EXPECT_EQ(m1.blocks[b].w, m2.blocks[b].w);
}

TEST(TrainStep, DeterministicGivenSameInputs) {
  Dataset ds = tiny_vector_dataset(60, 2, 3, 20);
  TrainConfig cfg;
  cfg.method = "mcda";
  MethodFlags flags = resolve_method(cfg);
  auto src = ds.rows_of_domain(0);
  auto tgt = ds.rows_of_domain(1);
  src.resize(12);
  tgt.resize(12);

  auto run = [&](std::uint64_t seed) {
    ModelBundle m = init_model(arch_for_dataset(ds), 4);
    Rng rng(seed);
    SgdState sgd;
    train_step(m, ds, src, tgt, cfg, flags, 0.5, rng, sgd);
    return m;
  };
  ModelBundle a = run(8), b = run(8);
  for (std::size_t blk = 0; blk < kNumBlocks; ++blk)
    EXPECT_EQ(a.blocks[blk].w, b.blocks[blk].w);
}

TEST(Train, SupervisedReachesHighAccuracyOnSeparableData) {
  Dataset ds = tiny_vector_dataset(150, 2, 3, 42);
  TrainConfig cfg;
  cfg.method = "supervised_st";
  cfg.epochs = 12;
  cfg.batch_size = 24;
  cfg.seed = 1;
  TrainResult res = train(ds, cfg);
  EXPECT_GE(res.log.records.back().acc_tgt_mean, 0.99);
}

TEST(Train, InitialGatedFractionIsZero) {
  Dataset ds = tiny_vector_dataset(60, 2, 4, 23);
  TrainConfig cfg;
  cfg.method = "mcda";
  cfg.epochs = 1;
  cfg.batch_size = 16;
  TrainResult res = train(ds, cfg);
  EXPECT_DOUBLE_EQ(res.log.records.front().gated_frac, 0.0);
  EXPECT_FALSE(res.log.records.front().pl_acc.has_value());
}

TEST(Train, UnknownMethodRejected) {
  Dataset ds = tiny_vector_dataset(30, 2, 2, 2);
  TrainConfig cfg;
  cfg.method = "cdan";
  EXPECT_THROW(
      {
        try {
          train(ds, cfg);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Err::kBadMethod);
          throw;
        }
      },
      Error);
}

TEST(Train, DeterministicLogBytes) {
  Dataset ds = tiny_vector_dataset(50, 2, 2, 77);
  TrainConfig cfg;
  cfg.method = "mcda";
  cfg.epochs = 3;
  cfg.batch_size = 10;
  cfg.seed = 5;
  TrainResult a = train(ds, cfg);
  TrainResult b = train(ds, cfg);
  EXPECT_EQ(a.log.to_jsonl(), b.log.to_jsonl());
  for (std::size_t blk = 0; blk < kNumBlocks; ++blk)
    EXPECT_EQ(a.model.blocks[blk].w, b.model.blocks[blk].w);
}

TEST(Train, LogHasOneRecordPerEpochPlusInitial) {
  Dataset ds = tiny_vector_dataset(40, 2, 2, 3);
  TrainConfig cfg;
  cfg.method = "dann";
  cfg.epochs = 4;
  cfg.batch_size = 8;
  TrainResult res = train(ds, cfg);
  ASSERT_EQ(res.log.records.size(), 5u);
  for (int e = 0; e <= 4; ++e) EXPECT_EQ(res.log.records[e].epoch, e);
  // jsonl has the pinned field names
  auto jsonl = res.log.to_jsonl();
  EXPECT_NE(jsonl.find("\"acc_tgt_per_domain\""), std::string::npos);
  EXPECT_NE(jsonl.find("\"gated_frac\""), std::string::npos);
}

}  // namespace
}  // namespace btda
