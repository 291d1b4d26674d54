// include/btda/metrics.hpp
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
// Error-rate and bound-term estimators over a labeled multi-domain dataset:
// per-domain error rates, the balanced (worst per-class) source error, the
// mean worst per-class conditional-error gap between source and each target,
// the resulting error-decomposition bound check, and two diagnostics (the
// KNN same-class cluster probe and pseudo-label gating statistics). All
// conditional probabilities are plain empirical frequencies; missing class
// support is an error rather than a silent zero.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "btda/dataset.hpp"
#include "btda/error.hpp"
#include "btda/mcda.hpp"

namespace btda {

/// L1 distance between two distributions; in [0, 2] for probability vectors.
inline double l1_distance(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), Err::kShape, "distribution lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return s;
}

struct TargetErrors {
  double eps_src = 0.0;
  std::vector<double> eps_tgt;  // per target domain (domain 1..K)
  double eps_tgt_mean = 0.0;
};

inline TargetErrors per_target_errors(std::span<const int> preds, const Dataset& ds) {
  require(preds.size() == ds.n, Err::kShape, "predictions do not cover the dataset");
  std::vector<std::int64_t> wrong(ds.n_domains, 0), count(ds.n_domains, 0);
  for (std::size_t i = 0; i < ds.n; ++i) {
    count[ds.domains[i]]++;
    if (preds[i] != ds.labels[i]) wrong[ds.domains[i]]++;
  }
  TargetErrors out;
  for (std::size_t d = 0; d < ds.n_domains; ++d)
    require(count[d] > 0, Err::kEmptyDomain,
            "domain " + std::to_string(d) + " has no samples");
  out.eps_src = static_cast<double>(wrong[0]) / count[0];
  for (std::size_t d = 1; d < ds.n_domains; ++d)
    out.eps_tgt.push_back(static_cast<double>(wrong[d]) / count[d]);
  double mean = 0.0;
  for (double e : out.eps_tgt) mean += e;
  out.eps_tgt_mean = out.eps_tgt.empty() ? 0.0 : mean / out.eps_tgt.size();
  return out;
}

/// Worst per-class conditional error rate: max over classes of
/// P(pred != label | label = class). Every class must have support.
inline double ber(std::span<const int> preds, std::span<const std::uint16_t> labels,
                  int k) {
  require(preds.size() == labels.size(), Err::kShape, "prediction/label size mismatch");
  std::vector<std::int64_t> wrong(k, 0), count(k, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    count[labels[i]]++;
    if (preds[i] != labels[i]) wrong[labels[i]]++;
  }
  double worst = 0.0;
  for (int c = 0; c < k; ++c) {
    require(count[c] > 0, Err::kNoSupport,
            "class " + std::to_string(c) + " has no labeled samples");
    worst = std::max(worst, static_cast<double>(wrong[c]) / count[c]);
  }
  return worst;
}

namespace detail {

// per-class conditional error rates of one domain; requires full support
inline std::vector<double> class_error_profile(std::span<const int> preds,
                                               const Dataset& ds, int domain_id) {
  std::vector<std::int64_t> wrong(ds.k, 0), count(ds.k, 0);
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.domains[i] != domain_id) continue;
    count[ds.labels[i]]++;
    if (preds[i] != ds.labels[i]) wrong[ds.labels[i]]++;
  }
  std::vector<double> e(ds.k);
  for (std::size_t c = 0; c < ds.k; ++c) {
    require(count[c] > 0, Err::kNoSupport,
            "class " + std::to_string(c) + " absent from domain " +
                std::to_string(domain_id));
    e[c] = static_cast<double>(wrong[c]) / count[c];
  }
  return e;
}

}  // namespace detail

/// Mean over targets of the worst per-class conditional-error gap between
/// the source and that target.
inline double delta_btce(std::span<const int> preds, const Dataset& ds) {
  require(preds.size() == ds.n, Err::kShape, "predictions do not cover the dataset");
  require(ds.n_domains >= 2, Err::kEmptyDomain, "need at least one target domain");
  auto src = detail::class_error_profile(preds, ds, 0);
  double sum = 0.0;
  for (std::uint32_t d = 1; d < ds.n_domains; ++d) {
    auto tgt = detail::class_error_profile(preds, ds, static_cast<int>(d));
    double worst = 0.0;
    for (std::size_t c = 0; c < ds.k; ++c)
      worst = std::max(worst, std::abs(src[c] - tgt[c]));
    sum += worst;
  }
  return sum / (ds.n_domains - 1);
}

struct BoundReport {
  double eps_src = 0.0;
  std::vector<double> eps_tgt_per_domain;
  double eps_tgt_mean = 0.0;
  std::vector<double> l1_per_domain;
  double ber = 0.0;
  double delta_btce = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  double tol = 0.0;
  bool holds = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["eps_src"] = eps_src;
    j["eps_tgt_per_domain"] = eps_tgt_per_domain;
    j["eps_tgt_mean"] = eps_tgt_mean;
    j["l1_per_domain"] = l1_per_domain;
    j["ber"] = ber;
    j["delta_btce"] = delta_btce;
    j["lhs"] = lhs;
    j["rhs"] = rhs;
    j["tol"] = tol;
    j["holds"] = holds;
    return j;
  }
};

/// Binomial standard error of |eps_src - mean_j eps_tgt_j| from the
/// per-domain sample counts (independent binomials).
inline double lhs_standard_error(const TargetErrors& e, const Dataset& ds) {
  std::vector<std::int64_t> count(ds.n_domains, 0);
  for (std::size_t i = 0; i < ds.n; ++i) count[ds.domains[i]]++;
  double var = e.eps_src * (1.0 - e.eps_src) / count[0];
  const double K = static_cast<double>(ds.n_domains - 1);
  for (std::size_t d = 1; d < ds.n_domains; ++d)
    var += e.eps_tgt[d - 1] * (1.0 - e.eps_tgt[d - 1]) / (count[d] * K * K);
  return std::sqrt(var);
}

/// Assembles both sides of the error-decomposition inequality
///   |eps_S - mean_j eps_Tj|
///     <= mean_j ||P_S(Y) - P_Tj(Y)||_1 * BER + 2 (c - 1) * delta_BTCE
/// over the empirical sample, with c the class count.
inline BoundReport bound_check(std::span<const int> preds, const Dataset& ds,
                               double tol) {
  TargetErrors errs = per_target_errors(preds, ds);
  BoundReport r;
  r.eps_src = errs.eps_src;
  r.eps_tgt_per_domain = errs.eps_tgt;
  r.eps_tgt_mean = errs.eps_tgt_mean;

  std::vector<std::uint16_t> src_labels;
  std::vector<int> src_preds;
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.domains[i] == 0) {
      src_labels.push_back(ds.labels[i]);
      src_preds.push_back(preds[i]);
    }
  }
  r.ber = btda::ber(src_preds, src_labels, static_cast<int>(ds.k));
  r.delta_btce = btda::delta_btce(preds, ds);

  auto p_src = label_distribution(ds, 0);
  double weighted = 0.0;
  for (std::uint32_t d = 1; d < ds.n_domains; ++d) {
    auto p_tgt = label_distribution(ds, static_cast<int>(d));
    double l1 = l1_distance(p_src, p_tgt);
    r.l1_per_domain.push_back(l1);
    weighted += l1 * r.ber;
  }
  weighted /= (ds.n_domains - 1);

  r.lhs = std::abs(r.eps_src - r.eps_tgt_mean);
  r.rhs = weighted + 2.0 * (static_cast<double>(ds.k) - 1.0) * r.delta_btce;
  r.tol = tol;
  r.holds = r.lhs <= r.rhs + tol;
  return r;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct KnnProbe {
  std::vector<double> rates;  // per class
  double mean = 0.0;
};

/// For each class center (arithmetic mean of its features), the fraction of
/// its k nearest samples (Euclidean, over the whole probed set) that share
/// the class.
inline KnnProbe knn_same_class_rate(const std::vector<std::vector<double>>& features,
                                    std::span<const std::uint16_t> labels,
                                    int k_neighbors, int k_classes) {
  const std::size_t n = features.size();
  require(labels.size() == n, Err::kShape, "feature/label size mismatch");
  require(k_neighbors >= 1 && static_cast<std::size_t>(k_neighbors) < n, Err::kBadK,
          "k_neighbors must be in [1, n)");
  std::vector<std::vector<double>> centers(k_classes);
  std::vector<std::int64_t> counts(k_classes, 0);
  const std::size_t dim = features.empty() ? 0 : features[0].size();
  for (auto& c : centers) c.assign(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    counts[labels[i]]++;
    for (std::size_t j = 0; j < dim; ++j) centers[labels[i]][j] += features[i][j];
  }
  KnnProbe probe;
  for (int cls = 0; cls < k_classes; ++cls) {
    require(counts[cls] > 0, Err::kNoSupport,
            "class " + std::to_string(cls) + " has no samples");
    for (auto& v : centers[cls]) v /= static_cast<double>(counts[cls]);

    std::vector<std::pair<double, std::size_t>> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        double d = features[i][j] - centers[cls][j];
        d2 += d * d;
      }
      dist[i] = {d2, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k_neighbors, dist.end());
    std::int64_t same = 0;
    for (int i = 0; i < k_neighbors; ++i)
      if (labels[dist[i].second] == cls) same++;
    probe.rates.push_back(static_cast<double>(same) / k_neighbors);
  }
  for (double r : probe.rates) probe.mean += r;
  probe.mean /= probe.rates.size();
  return probe;
}

inline std::string knn_to_csv(const KnnProbe& probe) {
  std::string csv = "class_id,rate\n";
  for (std::size_t c = 0; c < probe.rates.size(); ++c)
    csv += std::to_string(c) + "," + std::to_string(probe.rates[c]) + "\n";
  csv += "mean," + std::to_string(probe.mean) + "\n";
  return csv;
}

struct PseudoLabelStats {
  double gated_frac = 0.0;
  std::optional<double> gated_acc;  // absent when the gated set is empty
};

/// Fraction of predictions whose entropy falls below gamma, and the argmax
/// accuracy within that gated set.
inline PseudoLabelStats pseudo_label_stats(const std::vector<std::vector<double>>& probs,
                                           std::span<const std::uint16_t> true_labels,
                                           double gamma) {
  require(probs.size() == true_labels.size(), Err::kShape,
          "probability/label size mismatch");
  require(!probs.empty(), Err::kEmpty, "no predictions");
  std::int64_t gated = 0, correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (entropy(probs[i]) >= gamma) continue;
    gated++;
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs[i].size(); ++c)
      if (probs[i][c] > probs[i][best]) best = c;
    if (best == true_labels[i]) correct++;
  }
  PseudoLabelStats out;
  out.gated_frac = static_cast<double>(gated) / probs.size();
  if (gated > 0) out.gated_acc = static_cast<double>(correct) / gated;
  return out;
}

/// Feature vectors (the extractor output) for the given dataset rows.
inline std::vector<std::vector<double>> extract_features(const ModelBundle& m,
                                                         const Dataset& ds,
                                                         const std::vector<int>& rows) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (int r : rows) {
    std::span<const float> x(ds.row(r), ds.row_dim());
    out.push_back(forward(m, x).feat);
  }
  return out;
}

/// Raw rows as doubles (the "pixel space" probe baseline).
inline std::vector<std::vector<double>> raw_features(const Dataset& ds,
                                                     const std::vector<int>& rows) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (int r : rows)
    out.emplace_back(ds.row(r), ds.row(r) + ds.row_dim());
  return out;
}

}  // namespace btda
