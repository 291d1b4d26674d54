// include/btda/mcda.hpp
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
//
// The training algorithm: class-balanced source sampling, online pseudo
// labels with entropy gating, a per-class sigmoid domain discriminator
// trained adversarially through gradient reversal, and a classification
// loss augmented with target-style feature transfer. One engine drives all
// five methods (source_only, dann, mcda, mcda_oracle, supervised_st); they
// differ only in the resolved feature flags.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "btda/dataset.hpp"
#include "btda/error.hpp"
#include "btda/nnet.hpp"
#include "btda/rng.hpp"

namespace btda {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double eta0 = 0.01;
  double alpha = 10.0;
  double beta = 0.75;
  double gamma = 0.05;  // uncertainty threshold, nats
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grl_max = 1.0;
  int batch_size = 32;  // per side (source and target)
  int epochs = 20;
  std::uint64_t seed = 1;
  std::string method = "mcda";

  // Tri-state overrides so any method can be degenerated into another
  // (e.g. mcda with everything off is exactly source_only).
  enum class Toggle { kAuto, kOn, kOff };
  Toggle balanced = Toggle::kAuto;
  Toggle augment = Toggle::kAuto;
  Toggle adversarial = Toggle::kAuto;
};

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"source_only", "dann", "mcda",
                                              "mcda_oracle", "supervised_st"};
  return names;
}

inline TrainConfig::Toggle toggle_from_string(const std::string& s) {
  if (s == "auto") return TrainConfig::Toggle::kAuto;
  if (s == "on" || s == "true") return TrainConfig::Toggle::kOn;
  if (s == "off" || s == "false") return TrainConfig::Toggle::kOff;
  fail(Err::kConfig, "expected auto/on/off, got: " + s);
}

/// Assigns one TrainConfig field from its textual form; shared by the config
/// file loader and per-method override lists.
inline void set_train_config_field(TrainConfig& cfg, const std::string& key,
                                   const std::string& value) {
  auto as_double = [&](const std::string& v) {
    try {
      std::size_t used = 0;
      double d = std::stod(v, &used);
      require(used == v.size(), Err::kConfig, "bad number: " + v);
      return d;
    } catch (const Error&) {
      throw;
    } catch (...) {
      fail(Err::kConfig, "bad number for " + key + ": " + v);
    }
  };
  auto as_int = [&](const std::string& v) {
    double d = as_double(v);
    require(d == static_cast<long long>(d), Err::kConfig, "expected integer: " + v);
    return static_cast<long long>(d);
  };
  if (key == "eta0"), cfg.eta0 = as_double(value);
  else if (key == "alpha") cfg.alpha = as_double(value);
  else if (key == "beta") cfg.beta = as_double(value);
  else if (key == "gamma") cfg.gamma = as_double(value);
  else if (key == "momentum") cfg.momentum = as_double(value);
  else if (key == "weight_decay") cfg.weight_decay = as_double(value);
  else if (key == "grl_max") cfg.grl_max = as_double(value);
  else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_int(value));
  else if (key == "epochs") cfg.epochs = static_cast<int>(as_int(value));
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int(value));
  else if (key == "method") cfg.method = value;
  else if (key == "balanced") cfg.balanced = toggle_from_string(value);
  else if (key == "augment") cfg.augment = toggle_from_string(value);
  else if (key == "adversarial") cfg.adversarial = toggle_from_string(value);
  else fail(Err::kConfig, "unknown train setting: " + key);
}

struct MethodFlags {
  enum class Adv { kNone, kBinary, kCategorical, kOracle };
  bool balanced_source = false;
  bool augment = false;
  Adv adv = Adv::kNone;
  bool supervised_targets = false;

  bool needs_target() const {
    return adv != Adv::kNone || augment || supervised_targets;
  }
};

inline MethodFlags resolve_method(const TrainConfig& cfg) {
  MethodFlags f;
  if (cfg.method == "source_only") {
    // all defaults
  } else if (cfg.method == "dann") {
    f.adv = MethodFlags::Adv::kBinary;
  } else if (cfg.method == "mcda") {
    f.balanced_source = true;
    f.augment = true;
    f.adv = MethodFlags::Adv::kCategorical;
  } else if (cfg.method == "mcda_oracle") {
    f.balanced_source = true;
    f.augment = true;
    f.adv = MethodFlags::Adv::kOracle;
  } else if (cfg.method == "supervised_st") {
    f.supervised_targets = true;
  } else {
    fail(Err::kBadMethod, "unknown method: " + cfg.method);
  }
  if (cfg.balanced != TrainConfig::Toggle::kAuto)
    f.balanced_source = cfg.balanced == TrainConfig::Toggle::kOn;
  if (cfg.augment != TrainConfig::Toggle::kAuto)
    f.augment = cfg.augment == TrainConfig::Toggle::kOn;
  if (cfg.adversarial == TrainConfig::Toggle::kOff) {
    f.adv = MethodFlags::Adv::kNone;
  } else if (cfg.adversarial == TrainConfig::Toggle::kOn &&
             f.adv == MethodFlags::Adv::kNone) {
    f.adv = MethodFlags::Adv::kCategorical;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Uncertainty gating

/// Shannon entropy in nats with the 0*ln(0) := 0 convention.
inline double entropy(std::span<const double> p) {
  require(!p.empty(), Err::kBadProb, "empty probability vector");
  double sum = 0.0, h = 0.0;
  for (double v : p) {
    require(v >= 0.0 && std::isfinite(v), Err::kBadProb, "bad probability entry");
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  require(std::abs(sum - 1.0) <= 1e-6, Err::kBadProb, "probabilities must sum to 1");
  return h;
}

struct MixedLabel {
  std::vector<double> vec;
  bool is_onehot = false;
  double entropy = 0.0;
};

/// Soft label below the uncertainty threshold becomes one-hot at its argmax
/// (ties resolve to the lowest class index); otherwise it passes unchanged.
inline MixedLabel mix_label(std::span<const double> p_hat, double gamma) {
  require(gamma >= 0.0, Err::kConfig, "gamma must be nonnegative");
  MixedLabel ml;
  ml.entropy = entropy(p_hat);
  if (ml.entropy < gamma) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p_hat.size(); ++i)
      if (p_hat[i] > p_hat[best]) best = i;
    ml.vec.assign(p_hat.size(), 0.0);
    ml.vec[best] = 1.0;
    ml.is_onehot = true;
  } else {
    ml.vec.assign(p_hat.begin(), p_hat.end());
    int ones = 0;
    bool rest_zero = true;
    for (double v : ml.vec) {
      if (v == 1.0)
        ones++;
      else if (v != 0.0)
        rest_zero = false;
    }
    ml.is_onehot = ones == 1 && rest_zero;
  }
  return ml;
}

// ---------------------------------------------------------------------------
// Batch sampling

struct DomainView {
  std::vector<int> rows;
  std::vector<std::vector<int>> by_class;
};

inline DomainView make_domain_view(const Dataset& ds, int domain_id) {
  DomainView v;
  v.by_class.resize(ds.k);
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.domains[i] == domain_id) {
      v.rows.push_back(static_cast<int>(i));
      v.by_class[ds.labels[i]].push_back(static_cast<int>(i));
    }
  }
  return v;
}

/// All non-source rows pooled together; training never looks at which
/// target domain a row came from.
inline std::vector<int> blended_target_rows(const Dataset& ds) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < ds.n; ++i)
    if (ds.domains[i] != 0) rows.push_back(static_cast<int>(i));
  return rows;
}

/// Class-balanced batch: classes visited round-robin in a per-batch random
/// order, the sample uniform with replacement within its class.
inline std::vector<int> balanced_source_batch(const DomainView& source, Rng& rng,
                                              int batch_size) {
  require(batch_size >= 1, Err::kConfig, "batch size must be positive");
  const std::size_t k = source.by_class.size();
  for (std::size_t c = 0; c < k; ++c)
    require(!source.by_class[c].empty(), Err::kEmptyClass,
            "class " + std::to_string(c) + " has no source samples");
  std::vector<int> order(k);
  for (std::size_t c = 0; c < k; ++c) order[c] = static_cast<int>(c);
  rng.shuffle(order);
  std::vector<int> batch(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const auto& pool = source.by_class[order[i % k]];
    batch[i] = pool[rng.uniform_int(pool.size())];
  }
  return batch;
}

inline std::vector<int> uniform_batch(const std::vector<int>& rows, Rng& rng,
                                      int batch_size) {
  require(!rows.empty(), Err::kEmptyDomain, "cannot sample from an empty pool");
  std::vector<int> batch(batch_size);
  for (int i = 0; i < batch_size; ++i) batch[i] = rows[rng.uniform_int(rows.size())];
  return batch;
}

// ---------------------------------------------------------------------------
// Losses over a frozen batch plan

/// Everything a loss evaluation needs, with the detached quantities (mixed
/// pseudo labels, style statistics) frozen by the caller. Evaluating the
/// same plan at a perturbed parameter point therefore differentiates only
/// the live paths, which is exactly the contract the analytic gradients
/// implement.
struct BatchPlan {
  std::vector<int> src;
  std::vector<int> tgt;
  std::vector<int> pair;                             // source slot -> target slot styles
  std::vector<ChannelStats> styles;                  // per target slot, detached
  std::vector<std::vector<double>> src_adv_labels;   // one-hot (or {1} for binary)
  std::vector<std::vector<double>> tgt_adv_labels;   // mixed labels, detached
  bool supervised_targets = false;
  bool classify_source = true;  // false: pure adversarial objective

  bool has_adv() const { return !src_adv_labels.empty() || !tgt_adv_labels.empty(); }
  bool has_aug() const { return !pair.empty(); }
};

struct LossValues {
  double cls = 0.0;
  double aug = 0.0;
  double adv = 0.0;  // the adversarial objective value (log-likelihood form)
};

/// Gradient-direction multipliers. Training uses {feat_adv = lambda,
/// disc = -1}: the discriminator ascends the adversarial objective while the
/// feature path descends it through gradient reversal. The mathematical
/// gradient of the scalar cls + aug + adv is obtained with {1, +1}.
struct LossScales {
  double feat_adv = 1.0;
  double disc = 1.0;
};

inline LossValues eval_losses(const ModelBundle& m, const Dataset& ds,
                              const BatchPlan& plan, LossScales scales,
                              Gradients* grads) {
  const Arch& a = m.arch;
  LossValues out;
  require(!plan.src.empty(), Err::kEmpty, "source batch is empty");
  const double inv_ns = 1.0 / static_cast<double>(plan.src.size());
  const double inv_nt =
      plan.tgt.empty() ? 0.0 : 1.0 / static_cast<double>(plan.tgt.size());
  const double adv_factor = scales.feat_adv * scales.disc;
  if (plan.has_aug()) {
    require(plan.pair.size() == plan.src.size(), Err::kShape,
            "style pairing does not cover the source batch");
    for (int slot : plan.pair)
      require(slot >= 0 && slot < static_cast<int>(plan.styles.size()), Err::kShape,
              "style pairing out of range");
  }
  if (!plan.src_adv_labels.empty())
    require(plan.src_adv_labels.size() == plan.src.size(), Err::kShape,
            "source adversarial labels do not cover the batch");
  if (!plan.tgt_adv_labels.empty())
    require(plan.tgt_adv_labels.size() == plan.tgt.size(), Err::kShape,
            "target adversarial labels do not cover the batch");

  std::vector<double> glogits(a.k), gfeat, gfeat_adv;
  std::vector<double> adv_glogits(a.d_out);

  // source side: classification, optional stylized classification, and the
  // activated-logit adversarial term
  for (std::size_t i = 0; i < plan.src.size(); ++i) {
    const int row = plan.src[i];
    const int y = ds.labels[row];
    std::span<const float> x(ds.row(row), ds.row_dim());
    FeatureMap zlow = g1_forward(m, x);
    FeatureMap z2;
    std::vector<double> feat;
    g2_forward(m, zlow, z2, feat);

    gfeat.assign(a.g2_out, 0.0);
    if (plan.classify_source) {
      std::vector<double> logits, probs;
      head_forward(m, feat, logits, probs);
      out.cls -= std::log(probs[y]) * inv_ns;
      if (grads) {
        for (std::uint32_t c = 0; c < a.k; ++c)
          glogits[c] =
              (probs[c] - (c == static_cast<std::uint32_t>(y) ? 1.0 : 0.0)) * inv_ns;
        head_backward(m, feat, glogits, *grads, gfeat);
      }
    }

    if (!plan.src_adv_labels.empty()) {
      DiscForward df = disc_forward(m, feat);
      const auto& ylab = plan.src_adv_labels[i];
      require(ylab.size() == a.d_out, Err::kShape, "adversarial label width mismatch");
      for (std::uint32_t c = 0; c < a.d_out; ++c)
        if (ylab[c] != 0.0) out.adv += ylab[c] * std::log(df.d[c]) * inv_ns;
      if (grads) {
        for (std::uint32_t c = 0; c < a.d_out; ++c)
          adv_glogits[c] = scales.disc * ylab[c] * (1.0 - df.d[c]) * inv_ns;
        gfeat_adv.assign(a.g2_out, 0.0);
        disc_backward(m, feat, df, adv_glogits, *grads, gfeat_adv);
        for (std::uint32_t j = 0; j < a.g2_out; ++j)
          gfeat[j] += adv_factor * gfeat_adv[j];
      }
    }

    FeatureMap gzlow(zlow.c, zlow.h, zlow.w);
    if (grads) g2_backward(m, zlow, z2, gfeat, *grads, &gzlow);

    if (plan.has_aug()) {
      const ChannelStats& style = plan.styles[plan.pair[i]];
      FeatureMap zst = adain_with_stats(zlow, style);
      FeatureMap z2a;
      std::vector<double> feata, logitsa, probsa;
      g2_forward(m, zst, z2a, feata);
      head_forward(m, feata, logitsa, probsa);
      out.aug -= std::log(probsa[y]) * inv_ns;
      if (grads) {
        for (std::uint32_t c = 0; c < a.k; ++c)
          glogits[c] =
              (probsa[c] - (c == static_cast<std::uint32_t>(y) ? 1.0 : 0.0)) * inv_ns;
        std::vector<double> gfeata(a.g2_out, 0.0);
        head_backward(m, feata, glogits, *grads, gfeata);
        FeatureMap gzst(zst.c, zst.h, zst.w);
        g2_backward(m, zst, z2a, gfeata, *grads, &gzst);
        FeatureMap gfrom_aug = adain_backward(zlow, style, gzst);
        for (std::size_t j = 0; j < gzlow.v.size(); ++j) gzlow.v[j] += gfrom_aug.v[j];
      }
    }

    if (grads) g1_backward(m, x, zlow, gzlow, *grads);
  }

  // target side: optional supervised term, adversarial non-activation term
  for (std::size_t i = 0; i < plan.tgt.size(); ++i) {
    const int row = plan.tgt[i];
    std::span<const float> x(ds.row(row), ds.row_dim());
    FeatureMap zlow = g1_forward(m, x);
    FeatureMap z2;
    std::vector<double> feat;
    g2_forward(m, zlow, z2, feat);

    gfeat.assign(a.g2_out, 0.0);
    bool need_backward = false;

    if (plan.supervised_targets) {
      const int y = ds.labels[row];
      std::vector<double> logits, probs;
      head_forward(m, feat, logits, probs);
      out.cls -= std::log(probs[y]) * inv_nt;
      if (grads) {
        for (std::uint32_t c = 0; c < a.k; ++c)
          glogits[c] =
              (probs[c] - (c == static_cast<std::uint32_t>(y) ? 1.0 : 0.0)) * inv_nt;
        head_backward(m, feat, glogits, *grads, gfeat);
        need_backward = true;
      }
    }

    if (!plan.tgt_adv_labels.empty()) {
      DiscForward df = disc_forward(m, feat);
      const auto& ybar = plan.tgt_adv_labels[i];
      require(ybar.size() == a.d_out, Err::kShape, "adversarial label width mismatch");
      for (std::uint32_t c = 0; c < a.d_out; ++c)
        if (ybar[c] != 0.0) out.adv += ybar[c] * std::log(1.0 - df.d[c]) * inv_nt;
      if (grads) {
        for (std::uint32_t c = 0; c < a.d_out; ++c)
          adv_glogits[c] = scales.disc * (-ybar[c] * df.d[c] * inv_nt);
        gfeat_adv.assign(a.g2_out, 0.0);
        disc_backward(m, feat, df, adv_glogits, *grads, gfeat_adv);
        for (std::uint32_t j = 0; j < a.g2_out; ++j)
          gfeat[j] += adv_factor * gfeat_adv[j];
        need_backward = true;
      }
    }

    if (grads && need_backward) {
      FeatureMap gzlow(zlow.c, zlow.h, zlow.w);
      g2_backward(m, zlow, z2, gfeat, *grads, &gzlow);
      g1_backward(m, x, zlow, gzlow, *grads);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Public loss surfaces

inline std::vector<double> onehot(int cls, std::size_t k) {
  std::vector<double> v(k, 0.0);
  v[static_cast<std::size_t>(cls)] = 1.0;
  return v;
}

/// The categorical adversarial objective: mean over source of y . log D(g(x))
/// plus mean over target of ybar . log(1 - D(g(x))). When grads is non-null
/// it accumulates the training-direction gradients (discriminator ascends,
/// the feature path descends through gradient reversal scaled by lambda).
inline double adversarial_loss(const ModelBundle& m, const Dataset& ds,
                               std::span<const int> src_batch,
                               std::span<const int> tgt_batch,
                               const std::vector<std::vector<double>>& src_labels,
                               const std::vector<std::vector<double>>& tgt_labels,
                               double lambda, Gradients* grads = nullptr) {
  require(!src_batch.empty() && !tgt_batch.empty(), Err::kEmpty,
          "adversarial batches must be non-empty");
  BatchPlan plan;
  plan.src.assign(src_batch.begin(), src_batch.end());
  plan.tgt.assign(tgt_batch.begin(), tgt_batch.end());
  plan.src_adv_labels = src_labels;
  plan.tgt_adv_labels = tgt_labels;
  plan.classify_source = false;
  return eval_losses(m, ds, plan, LossScales{lambda, -1.0}, grads).adv;
}

/// A frozen-batch scalar objective for gradient verification. The detached
/// quantities (mixed pseudo labels, style statistics) are captured at
/// construction, so the scalar is a differentiable function of the
/// parameters alone and its analytic gradient (mathematical direction,
/// LossScales{1, +1}) is checkable against finite differences.
struct FrozenObjective {
  const Dataset* ds = nullptr;
  BatchPlan plan;

  double value(const ModelBundle& m) const {
    LossValues v = eval_losses(m, *ds, plan, LossScales{}, nullptr);
    return v.cls + v.aug + v.adv;
  }
  std::pair<double, Gradients> operator()(const ModelBundle& m) const {
    Gradients g = zero_gradients(m);
    LossValues v = eval_losses(m, *ds, plan, LossScales{1.0, 1.0}, &g);
    return {v.cls + v.aug + v.adv, g};
  }
};

enum class ObjectivePart { kClassification, kAdversarial, kCombined };

/// Builds a frozen objective from batches, using the current parameters for
/// the detached pseudo labels and style statistics (as train_step does).
inline FrozenObjective make_frozen_objective(const ModelBundle& m, const Dataset& ds,
                                             std::vector<int> src_batch,
                                             std::vector<int> tgt_batch,
                                             const TrainConfig& cfg, ObjectivePart part,
                                             Rng& rng) {
  FrozenObjective obj;
  obj.ds = &ds;
  obj.plan.src = std::move(src_batch);
  obj.plan.tgt = std::move(tgt_batch);
  const bool want_cls = part != ObjectivePart::kAdversarial;
  const bool want_adv = part != ObjectivePart::kClassification;
  obj.plan.classify_source = want_cls;
  if (want_cls && !obj.plan.tgt.empty()) {
    obj.plan.pair.resize(obj.plan.src.size());
    for (auto& slot : obj.plan.pair)
      slot = static_cast<int>(rng.uniform_int(obj.plan.tgt.size()));
  }
  for (int row : obj.plan.tgt) {
    std::span<const float> x(ds.row(row), ds.row_dim());
    FeatureMap zlow = g1_forward(m, x);
    if (want_cls) obj.plan.styles.push_back(channel_stats(zlow));
    if (want_adv) {
      FeatureMap z2;
      std::vector<double> feat, logits, probs;
      g2_forward(m, zlow, z2, feat);
      head_forward(m, feat, logits, probs);
      obj.plan.tgt_adv_labels.push_back(mix_label(probs, cfg.gamma).vec);
    }
  }
  if (want_adv)
    for (int row : obj.plan.src)
      obj.plan.src_adv_labels.push_back(onehot(ds.labels[row], ds.k));
  return obj;
}

/// Plain plus style-augmented cross entropy on a source batch; the style of
/// each source sample comes from a uniformly drawn member of the target
/// batch. Style statistics are detached. Returns the summed value.
inline double classification_loss(const ModelBundle& m, const Dataset& ds,
                                  std::span<const int> src_batch,
                                  std::span<const int> tgt_batch, Rng& rng,
                                  Gradients* grads = nullptr) {
  require(!src_batch.empty() && !tgt_batch.empty(), Err::kEmpty,
          "classification batches must be non-empty");
  BatchPlan plan;
  plan.src.assign(src_batch.begin(), src_batch.end());
  plan.pair.resize(plan.src.size());
  for (auto& slot : plan.pair)
    slot = static_cast<int>(rng.uniform_int(tgt_batch.size()));
  plan.styles.reserve(tgt_batch.size());
  for (int row : tgt_batch) {
    std::span<const float> x(ds.row(row), ds.row_dim());
    plan.styles.push_back(channel_stats(g1_forward(m, x)));
  }
  LossValues v = eval_losses(m, ds, plan, LossScales{}, grads);
  return v.cls + v.aug;
}

// ---------------------------------------------------------------------------
// Schedules

/// eta(p) = eta0 * (1 + alpha p)^(-beta), p in [0, 1].
inline double lr_schedule(double p, const TrainConfig& cfg = TrainConfig{}) {
  require(p >= 0.0 && p <= 1.0, Err::kConfig, "progress must be in [0, 1]");
  return cfg.eta0 * std::pow(1.0 + cfg.alpha * p, -cfg.beta);
}

/// lambda(p) = grl_max * (2 / (1 + exp(-10 p)) - 1), zero at p = 0.
inline double grl_coeff(double p, double grl_max = 1.0) {
  require(p >= 0.0 && p <= 1.0, Err::kConfig, "progress must be in [0, 1]");
  return grl_max * (2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0);
}

// ---------------------------------------------------------------------------
// Optimizer and the single training step

struct SgdState {
  Gradients velocity;
};

inline void sgd_step(ModelBundle& m, const Gradients& grads, SgdState& state, double lr,
                     double momentum, double weight_decay) {
  if (state.velocity.empty()) state.velocity = zero_gradients(m);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& w = m.blocks[b].w;
    auto& v = state.velocity[b];
    const auto& g = grads[b];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

struct StepRecord {
  double loss_cls = 0.0, loss_aug = 0.0, loss_adv = 0.0;
  double lr = 0.0, grl = 0.0;
};

/// Builds the frozen plan for one step from the already-drawn batches:
/// pseudo labels come from the current parameters (detached) and are gated
/// online; style statistics are detached. Then one combined backward pass
/// and one SGD-with-momentum update.
inline StepRecord train_step(ModelBundle& m, const Dataset& ds,
                             std::span<const int> src_batch,
                             std::span<const int> tgt_batch, const TrainConfig& cfg,
                             const MethodFlags& flags, double p, Rng& rng,
                             SgdState& sgd) {
  StepRecord rec;
  rec.lr = lr_schedule(p, cfg);
  rec.grl = flags.adv == MethodFlags::Adv::kNone ? 0.0 : grl_coeff(p, cfg.grl_max);

  BatchPlan plan;
  plan.src.assign(src_batch.begin(), src_batch.end());
  plan.supervised_targets = flags.supervised_targets;
  if (flags.needs_target())
    plan.tgt.assign(tgt_batch.begin(), tgt_batch.end());

  if (flags.augment) {
    require(!plan.tgt.empty(), Err::kEmpty, "style augmentation needs a target batch");
    plan.pair.resize(plan.src.size());
    for (auto& slot : plan.pair)
      slot = static_cast<int>(rng.uniform_int(plan.tgt.size()));
  }

  // detached pre-pass over the target batch: styles and mixed pseudo labels
  const bool adv_on = flags.adv != MethodFlags::Adv::kNone;
  if (flags.augment || adv_on) {
    plan.styles.reserve(plan.tgt.size());
    if (adv_on) plan.tgt_adv_labels.reserve(plan.tgt.size());
    for (int row : plan.tgt) {
      std::span<const float> x(ds.row(row), ds.row_dim());
      FeatureMap zlow = g1_forward(m, x);
      if (flags.augment) plan.styles.push_back(channel_stats(zlow));
      if (!adv_on) continue;
      switch (flags.adv) {
        case MethodFlags::Adv::kBinary:
          plan.tgt_adv_labels.push_back({1.0});
          break;
        case MethodFlags::Adv::kOracle:
          plan.tgt_adv_labels.push_back(onehot(ds.labels[row], ds.k));
          break;
        case MethodFlags::Adv::kCategorical: {
          FeatureMap z2;
          std::vector<double> feat, logits, probs;
          g2_forward(m, zlow, z2, feat);
          head_forward(m, feat, logits, probs);
          plan.tgt_adv_labels.push_back(mix_label(probs, cfg.gamma).vec);
          break;
        }
        case MethodFlags::Adv::kNone:
          break;
      }
    }
  }
  if (adv_on) {
    plan.src_adv_labels.reserve(plan.src.size());
    for (int row : plan.src) {
      if (flags.adv == MethodFlags::Adv::kBinary)
        plan.src_adv_labels.push_back({1.0});
      else
        plan.src_adv_labels.push_back(onehot(ds.labels[row], ds.k));
    }
  }

  Gradients grads = zero_gradients(m);
  LossValues v = eval_losses(m, ds, plan, LossScales{rec.grl, -1.0}, &grads);
  require(std::isfinite(v.cls) && std::isfinite(v.aug) && std::isfinite(v.adv),
          Err::kNonFinite, "loss diverged (cls=" + std::to_string(v.cls) +
                               " aug=" + std::to_string(v.aug) +
                               " adv=" + std::to_string(v.adv) + ")");
  sgd_step(m, grads, sgd, rec.lr, cfg.momentum, cfg.weight_decay);

  rec.loss_cls = v.cls;
  rec.loss_aug = v.aug;
  rec.loss_adv = v.adv;
  return rec;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<int> preds;  // argmax class per dataset row
  double acc_src = 0.0;
  std::vector<double> acc_tgt;  // per target domain, index 0 = domain 1
  double acc_tgt_mean = 0.0;
  double gated_frac = 0.0;               // over all target rows
  std::optional<double> pl_acc;          // accuracy among gated target rows
};

inline EvalResult evaluate(const ModelBundle& m, const Dataset& ds, double gamma) {
  EvalResult r;
  r.preds.resize(ds.n);
  std::vector<std::int64_t> correct(ds.n_domains, 0), count(ds.n_domains, 0);
  std::int64_t gated = 0, gated_correct = 0, n_tgt = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    std::span<const float> x(ds.row(i), ds.row_dim());
    SampleForward f = forward(m, x);
    int pred = 0;
    for (std::size_t c = 1; c < f.probs.size(); ++c)
      if (f.probs[c] > f.probs[pred]) pred = static_cast<int>(c);
    r.preds[i] = pred;
    const int dom = ds.domains[i];
    count[dom]++;
    if (pred == ds.labels[i]) correct[dom]++;
    if (dom != 0) {
      n_tgt++;
      if (entropy(f.probs) < gamma) {
        gated++;
        if (pred == ds.labels[i]) gated_correct++;
      }
    }
  }
  for (std::size_t d = 0; d < ds.n_domains; ++d)
    require(count[d] > 0, Err::kEmptyDomain,
            "domain " + std::to_string(d) + " has no samples");
  r.acc_src = static_cast<double>(correct[0]) / count[0];
  for (std::size_t d = 1; d < ds.n_domains; ++d)
    r.acc_tgt.push_back(static_cast<double>(correct[d]) / count[d]);
  double mean = 0.0;
  for (double a : r.acc_tgt) mean += a;
  r.acc_tgt_mean = r.acc_tgt.empty() ? 0.0 : mean / r.acc_tgt.size();
  r.gated_frac = n_tgt > 0 ? static_cast<double>(gated) / n_tgt : 0.0;
  if (gated > 0) r.pl_acc = static_cast<double>(gated_correct) / gated;
  return r;
}

// ---------------------------------------------------------------------------
// The training loop

struct EpochRecord {
  int epoch = 0;
  double acc_src = 0.0;
  double acc_tgt_mean = 0.0;
  std::vector<double> acc_tgt;
  std::optional<double> pl_acc;
  double gated_frac = 0.0;
  double loss_cls = 0.0, loss_aug = 0.0, loss_adv = 0.0;
  double lr = 0.0, grl = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  /// One JSON object per line, fixed field order.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) {
      nlohmann::ordered_json j;
      j["epoch"] = r.epoch;
      j["acc_src"] = r.acc_src;
      j["acc_tgt_mean"] = r.acc_tgt_mean;
      j["acc_tgt_per_domain"] = r.acc_tgt;
      if (r.pl_acc)
        j["pl_acc"] = *r.pl_acc;
      else
        j["pl_acc"] = nullptr;
      j["gated_frac"] = r.gated_frac;
      j["loss_cls"] = r.loss_cls;
      j["loss_aug"] = r.loss_aug;
      j["loss_adv"] = r.loss_adv;
      j["lr"] = r.lr;
      j["grl"] = r.grl;
      out += j.dump();
      out += '\n';
    }
    return out;
  }
};

struct TrainResult {
  ModelBundle model;
  TrainLog log;
};

namespace detail {

/// Deterministic whole-dataset plan used for the epoch-0 record: canonical
/// pairing (source i takes the style of target i mod n_t), current pseudo
/// labels, no RNG consumption.
inline BatchPlan full_plan(const ModelBundle& m, const Dataset& ds,
                           const std::vector<int>& src_rows,
                           const std::vector<int>& tgt_rows, const TrainConfig& cfg,
                           const MethodFlags& flags) {
  BatchPlan plan;
  plan.src = src_rows;
  plan.supervised_targets = flags.supervised_targets;
  if (flags.needs_target()) plan.tgt = tgt_rows;
  const bool adv_on = flags.adv != MethodFlags::Adv::kNone;
  if (flags.augment) {
    plan.pair.resize(plan.src.size());
    for (std::size_t i = 0; i < plan.src.size(); ++i)
      plan.pair[i] = static_cast<int>(i % plan.tgt.size());
  }
  if (flags.augment || adv_on) {
    for (int row : plan.tgt) {
      std::span<const float> x(ds.row(row), ds.row_dim());
      FeatureMap zlow = g1_forward(m, x);
      if (flags.augment) plan.styles.push_back(channel_stats(zlow));
      if (!adv_on) continue;
      if (flags.adv == MethodFlags::Adv::kBinary) {
        plan.tgt_adv_labels.push_back({1.0});
      } else if (flags.adv == MethodFlags::Adv::kOracle) {
        plan.tgt_adv_labels.push_back(onehot(ds.labels[row], ds.k));
      } else {
        FeatureMap z2;
        std::vector<double> feat, logits, probs;
        g2_forward(m, zlow, z2, feat);
        head_forward(m, feat, logits, probs);
        plan.tgt_adv_labels.push_back(mix_label(probs, cfg.gamma).vec);
      }
    }
  }
  if (adv_on) {
    for (int row : plan.src) {
      if (flags.adv == MethodFlags::Adv::kBinary)
        plan.src_adv_labels.push_back({1.0});
      else
        plan.src_adv_labels.push_back(onehot(ds.labels[row], ds.k));
    }
  }
  return plan;
}

}  // namespace detail

/// Runs the selected method for epochs * (n_src / batch) steps and logs one
/// record per epoch (record 0 describes the initial model). Deterministic in
/// (dataset, config).
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  const MethodFlags flags = resolve_method(cfg);
  require(ds.n_domains >= 2, Err::kEmptyDomain,
          "need a source domain and at least one target domain");
  require(cfg.epochs >= 1, Err::kConfig, "epochs must be positive");
  require(cfg.batch_size >= 1, Err::kConfig, "batch size must be positive");
  if (flags.balanced_source)
    require(cfg.batch_size >= static_cast<int>(ds.k), Err::kConfig,
            "balanced batches need batch_size >= k");

  DomainView source = make_domain_view(ds, 0);
  require(!source.rows.empty(), Err::kEmptyDomain, "source domain has no samples");
  std::vector<int> targets = blended_target_rows(ds);
  require(!targets.empty(), Err::kEmptyDomain, "no target samples");

  Arch arch = arch_for_dataset(
      ds, flags.adv == MethodFlags::Adv::kBinary ? 1 : ds.k);
  ModelBundle model = init_model(arch, cfg.seed);

  const int steps_per_epoch =
      std::max(1, static_cast<int>(source.rows.size()) / cfg.batch_size);
  const std::int64_t total_steps =
      static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;

  Rng rng(Rng::derive(cfg.seed, 1));
  SgdState sgd;
  TrainLog log;

  {
    // initial-state record: whole-set losses with the canonical plan
    BatchPlan plan = detail::full_plan(model, ds, source.rows, targets, cfg, flags);
    LossValues v = eval_losses(model, ds, plan, LossScales{}, nullptr);
    EvalResult ev = evaluate(model, ds, cfg.gamma);
    EpochRecord rec;
    rec.epoch = 0;
    rec.acc_src = ev.acc_src;
    rec.acc_tgt_mean = ev.acc_tgt_mean;
    rec.acc_tgt = ev.acc_tgt;
    rec.pl_acc = ev.pl_acc;
    rec.gated_frac = ev.gated_frac;
    rec.loss_cls = v.cls;
    rec.loss_aug = v.aug;
    rec.loss_adv = v.adv;
    rec.lr = lr_schedule(0.0, cfg);
    rec.grl = flags.adv == MethodFlags::Adv::kNone ? 0.0 : grl_coeff(0.0, cfg.grl_max);
    log.records.push_back(std::move(rec));
  }

  std::int64_t step_index = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum_cls = 0.0, sum_aug = 0.0, sum_adv = 0.0;
    StepRecord last;
    for (int s = 0; s < steps_per_epoch; ++s, ++step_index) {
      double p = total_steps > 1
                     ? static_cast<double>(step_index) / (total_steps - 1)
                     : 0.0;
      std::vector<int> src_batch =
          flags.balanced_source ? balanced_source_batch(source, rng, cfg.batch_size)
                                : uniform_batch(source.rows, rng, cfg.batch_size);
      std::vector<int> tgt_batch;
      if (flags.needs_target()) tgt_batch = uniform_batch(targets, rng, cfg.batch_size);
      last = train_step(model, ds, src_batch, tgt_batch, cfg, flags, p, rng, sgd);
      sum_cls += last.loss_cls;
      sum_aug += last.loss_aug;
      sum_adv += last.loss_adv;
    }
    EvalResult ev = evaluate(model, ds, cfg.gamma);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.acc_src = ev.acc_src;
    rec.acc_tgt_mean = ev.acc_tgt_mean;
    rec.acc_tgt = ev.acc_tgt;
    rec.pl_acc = ev.pl_acc;
    rec.gated_frac = ev.gated_frac;
    rec.loss_cls = sum_cls / steps_per_epoch;
    rec.loss_aug = sum_aug / steps_per_epoch;
    rec.loss_adv = sum_adv / steps_per_epoch;
    rec.lr = last.lr;
    rec.grl = last.grl;
    log.records.push_back(std::move(rec));
  }
  return TrainResult{std::move(model), std::move(log)};
}

}  // namespace btda
