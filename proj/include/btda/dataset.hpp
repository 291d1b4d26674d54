// include/btda/dataset.hpp
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
// Synthetic multi-domain datasets with controllable per-domain style and
// label distributions, plus their binary on-disk format ("BTDA", see
// README for the exact layout). Domain 0 is always the source.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "btda/binio.hpp"
#include "btda/error.hpp"
#include "btda/rng.hpp"

namespace btda {

enum class Mode : std::uint8_t { kImage = 0, kVector = 1 };

constexpr std::uint32_t kImageChannels = 3;
constexpr std::uint32_t kImageSize = 16;

/// Per-domain rendering style. In image mode the palettes are RGB colors,
/// noise is an additive uniform amplitude and gradient an additive
/// horizontal ramp. In vector mode the same record parameterizes an affine
/// transform: rotation angle = gradient (radians, first two dims),
/// scale = 1 + foreground[0], translation[i] = background[i % 3],
/// cluster spread = 0.5 + noise.
struct DomainStyle {
  std::array<double, 3> background{0.0, 0.0, 0.0};
  std::array<double, 3> foreground{0.0, 0.0, 0.0};
  double noise = 0.0;
  double gradient = 0.0;
};

struct DomainSpec {
  int domain_id = 0;
  DomainStyle style;
  int n_samples = 0;
  std::vector<double> label_prior;  // length k, entries >= 0, sums to 1
};

struct LabelShiftSpec {
  enum class Kind { kUniform, kLongTailed, kReverseLongTailed, kGaussian };
  Kind kind = Kind::kUniform;
  double ratio = 0.5;   // per-class geometric decay for the long-tailed kinds
  double center = 0.0;  // gaussian kind, in class-index space
  double width = 1.0;

  /// The induced label prior over k classes.
  std::vector<double> prior(int k) const {
    require(k >= 1, Err::kBadK, "class count must be positive");
    std::vector<double> p(static_cast<std::size_t>(k), 0.0);
    switch (kind) {
      case Kind::kUniform:
        for (auto& v : p) v = 1.0 / k;
        break;
      case Kind::kLongTailed:
        require(ratio > 0.0 && ratio <= 1.0, Err::kConfig, "ratio must be in (0,1]");
        for (int j = 0; j < k; ++j) p[j] = std::pow(ratio, j);
        break;
      case Kind::kReverseLongTailed:
        require(ratio > 0.0 && ratio <= 1.0, Err::kConfig, "ratio must be in (0,1]");
        for (int j = 0; j < k; ++j) p[j] = std::pow(ratio, k - 1 - j);
        break;
      case Kind::kGaussian:
        require(width > 0.0, Err::kConfig, "width must be positive");
        for (int j = 0; j < k; ++j) {
          double d = (j - center) / width;
          p[j] = std::exp(-0.5 * d * d);
        }
        break;
    }
    double sum = 0.0;
    for (double v : p) sum += v;
    for (auto& v : p) v /= sum;
    return p;
  }
};

inline LabelShiftSpec::Kind shift_kind_from_string(const std::string& s) {
  if (s == "uniform") return LabelShiftSpec::Kind::kUniform;
  if (s == "long_tailed") return LabelShiftSpec::Kind::kLongTailed;
  if (s == "reverse_long_tailed") return LabelShiftSpec::Kind::kReverseLongTailed;
  if (s == "gaussian") return LabelShiftSpec::Kind::kGaussian;
  fail(Err::kConfig, "unknown label shift kind: " + s);
}

/// Dense sample array with class labels and domain ids. Domain ids are for
/// evaluation only; the training loop never reads them for target domains
/// beyond splitting source (domain 0) from the blended rest.
struct Dataset {
  Mode mode = Mode::kImage;
  std::uint32_t n = 0, c = 0, h = 0, w = 0;
  std::uint32_t k = 0;          // class count
  std::uint32_t n_domains = 0;  // K + 1, domain 0 = source
  std::vector<float> data;      // n * (c*h*w), row-major, sample-major
  std::vector<std::uint16_t> labels;
  std::vector<std::uint16_t> domains;

  std::size_t row_dim() const { return static_cast<std::size_t>(c) * h * w; }
  const float* row(std::size_t i) const { return data.data() + i * row_dim(); }

  std::vector<int> rows_of_domain(int domain_id) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < n; ++i)
      if (domains[i] == domain_id) out.push_back(static_cast<int>(i));
    return out;
  }

  bool operator==(const Dataset& o) const {
    return mode == o.mode && n == o.n && c == o.c && h == o.h && w == o.w && k == o.k &&
           n_domains == o.n_domains && data == o.data && labels == o.labels &&
           domains == o.domains;
  }
};

namespace detail {

inline void check_specs(const std::vector<DomainSpec>& specs, int k) {
  require(k >= 2 && k <= 8, Err::kBadK, "class count must be in [2, 8]");
  require(!specs.empty(), Err::kEmptySpecs, "need at least one domain spec");
  for (const auto& s : specs) {
    require(s.n_samples > 0, Err::kEmptySpecs, "domain needs a positive sample count");
    require(s.style.noise >= 0.0 && s.style.gradient >= 0.0, Err::kConfig,
            "noise and gradient strengths must be nonnegative");
    require(static_cast<int>(s.label_prior.size()) == k, Err::kBadK,
            "label prior length must equal class count");
    double sum = 0.0;
    for (double p : s.label_prior) {
      require(p >= 0.0, Err::kBadProb, "label prior entries must be nonnegative");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, Err::kBadProb, "label prior must sum to 1");
  }
}

inline bool shape_mask(int cls, double dy, double dx, double r) {
  switch (cls % 8) {
    case 0:  // disk
      return dy * dy + dx * dx <= r * r;
    case 1:  // square
      return std::max(std::abs(dy), std::abs(dx)) <= r * 0.82;
    case 2:  // cross
      return (std::abs(dx) <= r * 0.34 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r * 0.34 && std::abs(dx) <= r);
    case 3:  // triangle, apex up
      return dy >= -r && dy <= r * 0.8 && std::abs(dx) <= (dy + r) * 0.55;
    case 4:  // ring
      return dy * dy + dx * dx <= r * r && dy * dy + dx * dx >= r * r * 0.3;
    case 5:  // diamond
      return std::abs(dy) + std::abs(dx) <= r * 1.1;
    case 6:  // horizontal bars
      return std::abs(dy) <= r && std::abs(dx) <= r * 0.9 &&
             (static_cast<int>(std::floor(dy + r)) % 4) < 2;
    case 7:  // frame
      return std::max(std::abs(dy), std::abs(dx)) <= r * 0.9 &&
             std::max(std::abs(dy), std::abs(dx)) >= r * 0.45;
  }
  return false;
}

// One 16x16x3 image: shape of class `cls` in the domain's foreground color
// over a background with an optional horizontal ramp, then additive uniform
// noise, clamped to [0, 1]. Geometry is jittered per sample.
inline void render_shape(int cls, const DomainStyle& st, Rng& rng, float* out) {
  const int H = kImageSize, W = kImageSize;
  double cy = (H - 1) / 2.0 + rng.uniform(-2.0, 2.0);
  double cx = (W - 1) / 2.0 + rng.uniform(-2.0, 2.0);
  double r = 4.5 * rng.uniform(0.78, 1.22);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      bool inside = shape_mask(cls, y - cy, x - cx, r);
      double ramp = st.gradient * (static_cast<double>(x) / (W - 1) - 0.5);
      for (int ch = 0; ch < static_cast<int>(kImageChannels); ++ch) {
        double v = inside ? st.foreground[ch] : st.background[ch] + ramp;
        if (st.noise > 0.0) v += st.noise * rng.uniform(-1.0, 1.0);
        v = std::min(1.0, std::max(0.0, v));
        out[(ch * H + y) * W + x] = static_cast<float>(v);
      }
    }
  }
}

}  // namespace detail

/// Canonical class centers for the Gaussian vector mode: a circle of radius
/// 3 in the first two dims, zero elsewhere.
inline std::vector<double> gaussian_class_center(int cls, int k, int d) {
  std::vector<double> c(static_cast<std::size_t>(d), 0.0);
  double a = 2.0 * std::numbers::pi * cls / k;
  c[0] = 3.0 * std::cos(a);
  if (d > 1) c[1] = 3.0 * std::sin(a);
  return c;
}

/// Procedural shape images, one domain per spec, deterministic in
/// (specs, seed). Rows are ordered by domain, then class, then draw index.
inline Dataset make_blended_shapes(const std::vector<DomainSpec>& specs, int k,
                                   std::uint64_t seed) {
  detail::check_specs(specs, k);
  Dataset ds;
  ds.mode = Mode::kImage;
  ds.c = kImageChannels;
  ds.h = ds.w = kImageSize;
  ds.k = static_cast<std::uint32_t>(k);
  ds.n_domains = static_cast<std::uint32_t>(specs.size());
  std::size_t total = 0;
  for (const auto& s : specs) total += static_cast<std::size_t>(s.n_samples);
  ds.n = static_cast<std::uint32_t>(total);
  ds.data.resize(total * ds.row_dim());
  ds.labels.resize(total);
  ds.domains.resize(total);

  std::size_t row = 0;
  for (const auto& spec : specs) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(spec.domain_id)));
    auto counts = rng.multinomial(spec.n_samples, spec.label_prior);
    for (int cls = 0; cls < k; ++cls) {
      for (std::int64_t i = 0; i < counts[cls]; ++i, ++row) {
        detail::render_shape(cls, spec.style, rng, ds.data.data() + row * ds.row_dim());
        ds.labels[row] = static_cast<std::uint16_t>(cls);
        ds.domains[row] = static_cast<std::uint16_t>(spec.domain_id);
      }
    }
  }
  return ds;
}

/// Gaussian class clusters in d dimensions; each domain applies its own
/// affine transform (see DomainStyle) to every cluster.
inline Dataset make_gaussian_domains(const std::vector<DomainSpec>& specs, int k, int d,
                                     std::uint64_t seed) {
  detail::check_specs(specs, k);
  require(d >= 2 && d <= 64, Err::kBadDim, "vector dimension must be in [2, 64]");
  Dataset ds;
  ds.mode = Mode::kVector;
  ds.c = 1;
  ds.h = 1;
  ds.w = static_cast<std::uint32_t>(d);
  ds.k = static_cast<std::uint32_t>(k);
  ds.n_domains = static_cast<std::uint32_t>(specs.size());
  std::size_t total = 0;
  for (const auto& s : specs) total += static_cast<std::size_t>(s.n_samples);
  ds.n = static_cast<std::uint32_t>(total);
  ds.data.resize(total * ds.row_dim());
  ds.labels.resize(total);
  ds.domains.resize(total);

  std::size_t row = 0;
  for (const auto& spec : specs) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(spec.domain_id)));
    auto counts = rng.multinomial(spec.n_samples, spec.label_prior);
    const double angle = spec.style.gradient;
    const double scale = 1.0 + spec.style.foreground[0];
    const double spread = 0.5 + spec.style.noise;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int cls = 0; cls < k; ++cls) {
      auto center = gaussian_class_center(cls, k, d);
      for (std::int64_t i = 0; i < counts[cls]; ++i, ++row) {
        float* out = ds.data.data() + row * ds.row_dim();
        std::vector<double> v(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) v[j] = center[j] + spread * rng.normal();
        // rotation in the first two dims, then scale and translate
        double r0 = ca * v[0] - sa * v[1];
        double r1 = sa * v[0] + ca * v[1];
        v[0] = r0;
        v[1] = r1;
        for (int j = 0; j < d; ++j)
          out[j] = static_cast<float>(scale * v[j] + spec.style.background[j % 3]);
        ds.labels[row] = static_cast<std::uint16_t>(cls);
        ds.domains[row] = static_cast<std::uint16_t>(spec.domain_id);
      }
    }
  }
  return ds;
}

/// Empirical class frequencies of one domain.
inline std::vector<double> label_distribution(const Dataset& ds, int domain_id) {
  std::vector<std::int64_t> counts(ds.k, 0);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.domains[i] == domain_id) {
      counts[ds.labels[i]]++;
      total++;
    }
  }
  require(total > 0, Err::kEmptyDomain,
          "domain " + std::to_string(domain_id) + " has no samples");
  std::vector<double> p(ds.k);
  for (std::size_t j = 0; j < ds.k; ++j) p[j] = static_cast<double>(counts[j]) / total;
  return p;
}

/// Resample one domain's rows with replacement so its label distribution
/// follows the spec's induced prior; the total count and all other domains
/// are untouched. Every class with nonzero target prior must already be
/// present in the domain.
inline Dataset resample_label_shift(const Dataset& ds, int domain_id,
                                    const LabelShiftSpec& spec, std::uint64_t seed) {
  auto prior = spec.prior(static_cast<int>(ds.k));
  auto rows = ds.rows_of_domain(domain_id);
  require(!rows.empty(), Err::kEmptyDomain,
          "domain " + std::to_string(domain_id) + " has no samples");

  std::vector<std::vector<int>> by_class(ds.k);
  for (int r : rows) by_class[ds.labels[r]].push_back(r);
  for (std::size_t j = 0; j < ds.k; ++j)
    require(prior[j] == 0.0 || !by_class[j].empty(), Err::kNoSupport,
            "class " + std::to_string(j) + " absent from domain " +
                std::to_string(domain_id));

  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(domain_id) + 0x5151));
  auto counts = rng.multinomial(static_cast<std::int64_t>(rows.size()), prior);

  Dataset out = ds;
  std::size_t dim = ds.row_dim();
  std::size_t slot = 0;
  for (std::size_t j = 0; j < ds.k; ++j) {
    for (std::int64_t i = 0; i < counts[j]; ++i, ++slot) {
      int src = by_class[j][rng.uniform_int(by_class[j].size())];
      int dst = rows[slot];
      std::copy(ds.data.begin() + src * dim, ds.data.begin() + (src + 1) * dim,
                out.data.begin() + dst * dim);
      out.labels[dst] = ds.labels[src];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary format (little-endian): magic "BTDA", u16 version, u8 mode,
// u32 n,c,h,w,k,n_domains, then n*c*h*w f32 values, n u16 labels,
// n u16 domain ids.

constexpr std::uint32_t kDatasetMagic = 0x41445442;  // "BTDA"
constexpr std::uint16_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  w.u32(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u8(static_cast<std::uint8_t>(ds.mode));
  w.u32(ds.n);
  w.u32(ds.c);
  w.u32(ds.h);
  w.u32(ds.w);
  w.u32(ds.k);
  w.u32(ds.n_domains);
  for (float v : ds.data) w.f32(v);
  for (auto v : ds.labels) w.u16(v);
  for (auto v : ds.domains) w.u16(v);
  w.save(path);
}

inline Dataset load_dataset(const std::string& path) {
  ByteReader r = ByteReader::load(path);
  require(r.remaining() >= 4, Err::kTruncated, "file too short for magic");
  require(r.u32() == kDatasetMagic, Err::kBadMagic, "not a BTDA dataset file: " + path);
  std::uint16_t version = r.u16();
  require(version == kDatasetVersion, Err::kBadMagic,
          "unsupported dataset version " + std::to_string(version));
  Dataset ds;
  std::uint8_t mode = r.u8();
  require(mode <= 1, Err::kBadMagic, "bad mode byte");
  ds.mode = static_cast<Mode>(mode);
  ds.n = r.u32();
  ds.c = r.u32();
  ds.h = r.u32();
  ds.w = r.u32();
  ds.k = r.u32();
  ds.n_domains = r.u32();
  std::size_t dim = ds.row_dim();
  ds.data.resize(ds.n * dim);
  for (auto& v : ds.data) v = r.f32();
  ds.labels.resize(ds.n);
  for (auto& v : ds.labels) v = r.u16();
  ds.domains.resize(ds.n);
  for (auto& v : ds.domains) v = r.u16();
  return ds;
}

}  // namespace btda
