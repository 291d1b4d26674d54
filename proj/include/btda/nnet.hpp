// include/btda/nnet.hpp
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
// Minimal differentiable model: shallow extractor g1, deep extractor g2,
// classifier head, per-class sigmoid discriminator head, instance-statistics
// style transfer (AdaIN) and gradient reversal. All arithmetic is double
// precision; every backward function is an exact analytic gradient of its
// forward counterpart. No autodiff framework, no hidden state.
//
// Image mode:  g1 = 3x3 conv (3 -> g1_out, stride 1, pad 1) + ReLU
//              g2 = 3x3 conv (g1_out -> g2_out, stride 2, pad 1) + ReLU
//                   + global average pool
// Vector mode: g1 = affine (d -> g1_out) + ReLU, viewed as a 1-channel
//              feature map of width g1_out; g2 = affine + ReLU
// Head h = linear (g2_out -> k); discriminator = linear -> ReLU -> linear
// with d_out independent sigmoid outputs (d_out = k, or 1 for a marginal
// binary discriminator).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "btda/binio.hpp"
#include "btda/dataset.hpp"
#include "btda/error.hpp"
#include "btda/rng.hpp"

namespace btda {

constexpr double kStatsEpsilon = 1e-5;   // variance guard inside channel stats
constexpr double kSigmoidClamp = 1e-12;  // keeps the adversarial logs finite

struct Arch {
  Mode mode = Mode::kImage;
  std::uint32_t in_c = 3, in_h = 16, in_w = 16;
  std::uint32_t g1_out = 16;
  std::uint32_t g2_out = 32;
  std::uint32_t d_hidden = 64;
  std::uint32_t k = 4;
  std::uint32_t d_out = 4;  // k for the per-class discriminator, 1 for binary

  std::size_t input_dim() const { return static_cast<std::size_t>(in_c) * in_h * in_w; }
  // g1 output spatial dims (stride 1, pad 1 keeps the size in image mode)
  std::uint32_t h1() const { return mode == Mode::kImage ? in_h : 1; }
  std::uint32_t w1() const { return mode == Mode::kImage ? in_w : g1_out; }
  std::uint32_t c1() const { return mode == Mode::kImage ? g1_out : 1; }
  // g2 conv output spatial dims (stride 2, pad 1)
  std::uint32_t h2() const { return mode == Mode::kImage ? (in_h - 1) / 2 + 1 : 1; }
  std::uint32_t w2() const { return mode == Mode::kImage ? (in_w - 1) / 2 + 1 : 1; }
};

inline Arch default_arch(Mode mode, std::uint32_t k, std::uint32_t vec_dim = 2,
                         std::uint32_t d_out = 0) {
  Arch a;
  a.mode = mode;
  a.k = k;
  a.d_out = d_out == 0 ? k : d_out;
  if (mode == Mode::kVector) {
    a.in_c = 1;
    a.in_h = 1;
    a.in_w = vec_dim;
    a.g1_out = 32;
  }
  return a;
}

inline Arch arch_for_dataset(const Dataset& ds, std::uint32_t d_out = 0) {
  return default_arch(ds.mode, ds.k, ds.mode == Mode::kVector ? ds.w : 0, d_out);
}

struct ParamBlock {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<double> w;

  std::size_t size() const { return w.size(); }
};

enum BlockIndex : std::size_t {
  kG1W = 0,
  kG1B,
  kG2W,
  kG2B,
  kHW,
  kHB,
  kDW1,
  kDB1,
  kDW2,
  kDB2,
  kNumBlocks,
};

struct ModelBundle {
  Arch arch;
  std::vector<ParamBlock> blocks;  // fixed order, see BlockIndex

  const std::vector<double>& p(std::size_t i) const { return blocks[i].w; }
  std::vector<double>& p(std::size_t i) { return blocks[i].w; }
};

/// Per-block gradient buffers, parallel to ModelBundle::blocks.
using Gradients = std::vector<std::vector<double>>;

inline Gradients zero_gradients(const ModelBundle& m) {
  Gradients g(m.blocks.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) g[i].assign(m.blocks[i].size(), 0.0);
  return g;
}

/// Channel-spatial feature map; vector mode uses layout (1, 1, d).
struct FeatureMap {
  std::uint32_t c = 0, h = 0, w = 0;
  std::vector<double> v;

  FeatureMap() = default;
  FeatureMap(std::uint32_t c_, std::uint32_t h_, std::uint32_t w_)
      : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, 0.0) {}

  std::size_t spatial() const { return static_cast<std::size_t>(h) * w; }
  bool same_layout(const FeatureMap& o) const { return c == o.c && h == o.h && w == o.w; }
};

struct ChannelStats {
  std::vector<double> mu;
  std::vector<double> sigma;  // sqrt(population variance + epsilon)
};

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline void xavier_fill(std::vector<double>& w, std::size_t fan_in, std::size_t fan_out,
                        Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : w) x = rng.uniform(-limit, limit);
}

inline ParamBlock make_block(const std::string& name, std::vector<std::uint32_t> shape) {
  ParamBlock b;
  b.name = name;
  b.shape = std::move(shape);
  std::size_t n = 1;
  for (auto d : b.shape) n *= d;
  b.w.assign(n, 0.0);
  return b;
}

}  // namespace detail

inline void validate_arch(const Arch& a) {
  require(a.k >= 2, Err::kBadArch, "classifier needs at least 2 classes");
  require(a.d_out == a.k || a.d_out == 1, Err::kBadArch,
          "discriminator output width must be k or 1");
  require(a.g1_out > 0 && a.g2_out > 0 && a.d_hidden > 0, Err::kBadArch,
          "layer widths must be positive");
  if (a.mode == Mode::kImage) {
    require(a.in_c == 3 && a.in_h >= 2 && a.in_w >= 2, Err::kBadArch,
            "image mode expects 3 x H x W input");
  } else {
    require(a.in_c == 1 && a.in_h == 1, Err::kBadArch,
            "vector mode expects 1 x 1 x d input");
    require(a.in_w >= 2 && a.in_w <= 64, Err::kBadArch, "vector dim must be in [2, 64]");
  }
}

/// Deterministic Xavier-uniform initialization; biases zero.
inline ModelBundle init_model(const Arch& arch, std::uint64_t seed) {
  validate_arch(arch);
  ModelBundle m;
  m.arch = arch;
  m.blocks.resize(kNumBlocks);
  if (arch.mode == Mode::kImage) {
    m.blocks[kG1W] = detail::make_block("g1.w", {arch.g1_out, arch.in_c, 3, 3});
    m.blocks[kG2W] = detail::make_block("g2.w", {arch.g2_out, arch.g1_out, 3, 3});
  } else {
    m.blocks[kG1W] = detail::make_block("g1.w", {arch.g1_out, arch.in_w});
    m.blocks[kG2W] = detail::make_block("g2.w", {arch.g2_out, arch.g1_out});
  }
  m.blocks[kG1B] = detail::make_block("g1.b", {arch.g1_out});
  m.blocks[kG2B] = detail::make_block("g2.b", {arch.g2_out});
  m.blocks[kHW] = detail::make_block("h.w", {arch.k, arch.g2_out});
  m.blocks[kHB] = detail::make_block("h.b", {arch.k});
  m.blocks[kDW1] = detail::make_block("d.w1", {arch.d_hidden, arch.g2_out});
  m.blocks[kDB1] = detail::make_block("d.b1", {arch.d_hidden});
  m.blocks[kDW2] = detail::make_block("d.w2", {arch.d_out, arch.d_hidden});
  m.blocks[kDB2] = detail::make_block("d.b2", {arch.d_out});

  Rng rng(Rng::derive(seed, 0x1717));
  if (arch.mode == Mode::kImage) {
    detail::xavier_fill(m.blocks[kG1W].w, arch.in_c * 9, arch.g1_out * 9, rng);
    detail::xavier_fill(m.blocks[kG2W].w, arch.g1_out * 9, arch.g2_out * 9, rng);
  } else {
    detail::xavier_fill(m.blocks[kG1W].w, arch.in_w, arch.g1_out, rng);
    detail::xavier_fill(m.blocks[kG2W].w, arch.g1_out, arch.g2_out, rng);
  }
  detail::xavier_fill(m.blocks[kHW].w, arch.g2_out, arch.k, rng);
  detail::xavier_fill(m.blocks[kDW1].w, arch.g2_out, arch.d_hidden, rng);
  detail::xavier_fill(m.blocks[kDW2].w, arch.d_hidden, arch.d_out, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Layer primitives

namespace detail {

inline void conv3x3_forward(const double* in, std::size_t ic, std::size_t ih,
                            std::size_t iw, const double* W, const double* b,
                            std::size_t oc, std::size_t stride, double* out,
                            std::size_t oh, std::size_t ow) {
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b[o];
        std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * stride) - 1;
        std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * stride) - 1;
        for (std::size_t i = 0; i < ic; ++i) {
          const double* wrow = W + ((o * ic + i) * 9);
          const double* irow = in + i * ih * iw;
          for (int ky = 0; ky < 3; ++ky) {
            std::ptrdiff_t iy = iy0 + ky;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              std::ptrdiff_t ix = ix0 + kx;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              acc += wrow[ky * 3 + kx] * irow[iy * iw + ix];
            }
          }
        }
        out[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

// gout is the gradient at the conv output (post any activation gating).
// gin may be null when the input gradient is not needed.
inline void conv3x3_backward(const double* in, std::size_t ic, std::size_t ih,
                             std::size_t iw, const double* W, std::size_t oc,
                             std::size_t stride, const double* gout, std::size_t oh,
                             std::size_t ow, double* gin, double* gW, double* gb) {
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double g = gout[(o * oh + oy) * ow + ox];
        if (g == 0.0) continue;
        gb[o] += g;
        std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * stride) - 1;
        std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * stride) - 1;
        for (std::size_t i = 0; i < ic; ++i) {
          const double* wrow = W + ((o * ic + i) * 9);
          double* gwrow = gW + ((o * ic + i) * 9);
          const double* irow = in + i * ih * iw;
          double* girow = gin ? gin + i * ih * iw : nullptr;
          for (int ky = 0; ky < 3; ++ky) {
            std::ptrdiff_t iy = iy0 + ky;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              std::ptrdiff_t ix = ix0 + kx;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              gwrow[ky * 3 + kx] += g * irow[iy * iw + ix];
              if (girow) girow[iy * iw + ix] += g * wrow[ky * 3 + kx];
            }
          }
        }
      }
    }
  }
}

inline void linear_forward(const double* x, std::size_t in_dim, const double* W,
                           const double* b, std::size_t out_dim, double* out) {
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = b[o];
    const double* wrow = W + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * x[i];
    out[o] = acc;
  }
}

inline void linear_backward(const double* x, std::size_t in_dim, const double* W,
                            std::size_t out_dim, const double* gout, double* gx,
                            double* gW, double* gb) {
  for (std::size_t o = 0; o < out_dim; ++o) {
    double g = gout[o];
    gb[o] += g;
    const double* wrow = W + o * in_dim;
    double* gwrow = gW + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) {
      gwrow[i] += g * x[i];
      if (gx) gx[i] += g * wrow[i];
    }
  }
}

inline void relu_inplace(std::vector<double>& v) {
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Instance statistics and AdaIN

/// Per-channel mean and epsilon-guarded standard deviation over the spatial
/// positions (population variance).
inline ChannelStats channel_stats(const FeatureMap& z, double epsilon = kStatsEpsilon) {
  require(z.spatial() >= 1 && z.c >= 1, Err::kEmpty, "feature map has no elements");
  ChannelStats s;
  s.mu.resize(z.c);
  s.sigma.resize(z.c);
  const double m = static_cast<double>(z.spatial());
  for (std::uint32_t ch = 0; ch < z.c; ++ch) {
    const double* p = z.v.data() + static_cast<std::size_t>(ch) * z.spatial();
    double mean = 0.0;
    for (std::size_t i = 0; i < z.spatial(); ++i) mean += p[i];
    mean /= m;
    double var = 0.0;
    for (std::size_t i = 0; i < z.spatial(); ++i) {
      double d = p[i] - mean;
      var += d * d;
    }
    var /= m;
    s.mu[ch] = mean;
    s.sigma[ch] = std::sqrt(var + epsilon);
  }
  return s;
}

/// Re-normalize content to the given target statistics, per channel. Both
/// standard deviations are epsilon-guarded. Differentiable in the content;
/// the target statistics are treated as constants by the backward pass.
inline FeatureMap adain_with_stats(const FeatureMap& content, const ChannelStats& target,
                                   double epsilon = kStatsEpsilon) {
  require(target.mu.size() == content.c, Err::kShape,
          "style stats do not match content channels");
  ChannelStats cs = channel_stats(content, epsilon);
  FeatureMap out(content.c, content.h, content.w);
  for (std::uint32_t ch = 0; ch < content.c; ++ch) {
    const double* p = content.v.data() + static_cast<std::size_t>(ch) * content.spatial();
    double* q = out.v.data() + static_cast<std::size_t>(ch) * content.spatial();
    double a = target.sigma[ch] / cs.sigma[ch];
    for (std::size_t i = 0; i < content.spatial(); ++i)
      q[i] = a * (p[i] - cs.mu[ch]) + target.mu[ch];
  }
  return out;
}

inline FeatureMap adain(const FeatureMap& content, const FeatureMap& style,
                        double epsilon = kStatsEpsilon) {
  require(content.same_layout(style), Err::kShape, "adain layouts differ");
  return adain_with_stats(content, channel_stats(style, epsilon), epsilon);
}

/// Exact gradient of adain_with_stats w.r.t. the content map (the stylized
/// output's dependence on its own mean/std is included; the target stats
/// contribute nothing). Returns the content gradient.
inline FeatureMap adain_backward(const FeatureMap& content, const ChannelStats& target,
                                 const FeatureMap& gout, double epsilon = kStatsEpsilon) {
  ChannelStats cs = channel_stats(content, epsilon);
  FeatureMap gin(content.c, content.h, content.w);
  const double m = static_cast<double>(content.spatial());
  for (std::uint32_t ch = 0; ch < content.c; ++ch) {
    const double* p = content.v.data() + static_cast<std::size_t>(ch) * content.spatial();
    const double* go = gout.v.data() + static_cast<std::size_t>(ch) * content.spatial();
    double* gi = gin.v.data() + static_cast<std::size_t>(ch) * content.spatial();
    const double inv_sigma = 1.0 / cs.sigma[ch];
    double gmean = 0.0, gdot = 0.0;
    for (std::size_t i = 0; i < content.spatial(); ++i) {
      gmean += go[i];
      gdot += go[i] * (p[i] - cs.mu[ch]) * inv_sigma;
    }
    gmean /= m;
    gdot /= m;
    const double a = target.sigma[ch] * inv_sigma;
    for (std::size_t i = 0; i < content.spatial(); ++i) {
      double xhat = (p[i] - cs.mu[ch]) * inv_sigma;
      gi[i] = a * (go[i] - gmean - xhat * gdot);
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Gradient reversal

/// Forward identity. The training step applies grl_backward at the junction
/// between the feature extractor and the discriminator head.
inline std::vector<double> grl(std::vector<double> x, double /*lambda*/) { return x; }

inline std::vector<double> grl_backward(std::span<const double> gout, double lambda) {
  std::vector<double> g(gout.size());
  for (std::size_t i = 0; i < gout.size(); ++i) g[i] = -lambda * gout[i];
  return g;
}

// ---------------------------------------------------------------------------
// Model forward / backward

struct SampleForward {
  FeatureMap zlow;             // g1 output (post ReLU)
  FeatureMap z2;               // g2 output (post ReLU); vector mode: (1,1,g2_out)
  std::vector<double> feat;    // feature vector fed to the heads
  std::vector<double> logits;  // classifier logits
  std::vector<double> probs;   // softmax(logits)
};

inline void softmax(std::span<const double> logits, std::vector<double>& probs) {
  probs.resize(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (auto& p : probs) p /= sum;
}

/// Shallow extractor only: x -> z_low.
inline FeatureMap g1_forward(const ModelBundle& m, std::span<const float> x) {
  const Arch& a = m.arch;
  require(x.size() == a.input_dim(), Err::kShape, "input size does not match arch");
  std::vector<double> xd(x.begin(), x.end());
  FeatureMap z(a.c1(), a.h1(), a.w1());
  if (a.mode == Mode::kImage) {
    detail::conv3x3_forward(xd.data(), a.in_c, a.in_h, a.in_w, m.p(kG1W).data(),
                            m.p(kG1B).data(), a.g1_out, 1, z.v.data(), a.h1(), a.w1());
  } else {
    detail::linear_forward(xd.data(), a.in_w, m.p(kG1W).data(), m.p(kG1B).data(),
                           a.g1_out, z.v.data());
  }
  detail::relu_inplace(z.v);
  return z;
}

/// Deep extractor: z_low (or a stylized map with the same layout) -> feature.
inline void g2_forward(const ModelBundle& m, const FeatureMap& in, FeatureMap& z2,
                       std::vector<double>& feat) {
  const Arch& a = m.arch;
  require(in.c == a.c1() && in.h == a.h1() && in.w == a.w1(), Err::kShape,
          "g2 input layout mismatch");
  if (a.mode == Mode::kImage) {
    z2 = FeatureMap(a.g2_out, a.h2(), a.w2());
    detail::conv3x3_forward(in.v.data(), a.g1_out, a.h1(), a.w1(), m.p(kG2W).data(),
                            m.p(kG2B).data(), a.g2_out, 2, z2.v.data(), a.h2(), a.w2());
    detail::relu_inplace(z2.v);
    feat.assign(a.g2_out, 0.0);
    const double inv = 1.0 / static_cast<double>(z2.spatial());
    for (std::uint32_t ch = 0; ch < a.g2_out; ++ch) {
      const double* p = z2.v.data() + static_cast<std::size_t>(ch) * z2.spatial();
      double acc = 0.0;
      for (std::size_t i = 0; i < z2.spatial(); ++i) acc += p[i];
      feat[ch] = acc * inv;
    }
  } else {
    z2 = FeatureMap(1, 1, a.g2_out);
    detail::linear_forward(in.v.data(), a.g1_out, m.p(kG2W).data(), m.p(kG2B).data(),
                           a.g2_out, z2.v.data());
    detail::relu_inplace(z2.v);
    feat = z2.v;
  }
}

inline void head_forward(const ModelBundle& m, std::span<const double> feat,
                         std::vector<double>& logits, std::vector<double>& probs) {
  const Arch& a = m.arch;
  require(feat.size() == a.g2_out, Err::kShape, "feature width mismatch");
  logits.resize(a.k);
  detail::linear_forward(feat.data(), a.g2_out, m.p(kHW).data(), m.p(kHB).data(), a.k,
                         logits.data());
  softmax(logits, probs);
}

/// Full forward pass: z_low, feature, classifier logits and probabilities.
inline SampleForward forward(const ModelBundle& m, std::span<const float> x) {
  SampleForward f;
  f.zlow = g1_forward(m, x);
  g2_forward(m, f.zlow, f.z2, f.feat);
  head_forward(m, f.feat, f.logits, f.probs);
  return f;
}

struct DiscForward {
  std::vector<double> hidden;  // post ReLU
  std::vector<double> logits;
  std::vector<double> d;  // clamped sigmoids, one per output, no coupling
};

inline DiscForward disc_forward(const ModelBundle& m, std::span<const double> feat) {
  const Arch& a = m.arch;
  require(feat.size() == a.g2_out, Err::kShape, "feature width mismatch");
  DiscForward f;
  f.hidden.resize(a.d_hidden);
  detail::linear_forward(feat.data(), a.g2_out, m.p(kDW1).data(), m.p(kDB1).data(),
                         a.d_hidden, f.hidden.data());
  detail::relu_inplace(f.hidden);
  f.logits.resize(a.d_out);
  detail::linear_forward(f.hidden.data(), a.d_hidden, m.p(kDW2).data(), m.p(kDB2).data(),
                         a.d_out, f.logits.data());
  f.d.resize(a.d_out);
  for (std::uint32_t i = 0; i < a.d_out; ++i) {
    double s = 1.0 / (1.0 + std::exp(-f.logits[i]));
    f.d[i] = std::min(1.0 - kSigmoidClamp, std::max(kSigmoidClamp, s));
  }
  return f;
}

/// Per-class sigmoid outputs of the discriminator for one feature vector.
inline std::vector<double> discriminator_forward(const ModelBundle& m,
                                                 std::span<const double> feat) {
  return disc_forward(m, feat).d;
}

// --- backward passes -------------------------------------------------------

/// Classifier head backward for a cross-entropy-style logit gradient
/// glogits; accumulates into grads and into gfeat.
inline void head_backward(const ModelBundle& m, std::span<const double> feat,
                          std::span<const double> glogits, Gradients& g,
                          std::vector<double>& gfeat) {
  const Arch& a = m.arch;
  if (gfeat.size() != a.g2_out) gfeat.assign(a.g2_out, 0.0);
  detail::linear_backward(feat.data(), a.g2_out, m.p(kHW).data(), a.k, glogits.data(),
                          gfeat.data(), g[kHW].data(), g[kHB].data());
}

/// Discriminator backward for given logit gradients; accumulates parameter
/// gradients and the feature gradient (pre gradient-reversal).
inline void disc_backward(const ModelBundle& m, std::span<const double> feat,
                          const DiscForward& f, std::span<const double> glogits,
                          Gradients& g, std::vector<double>& gfeat) {
  const Arch& a = m.arch;
  std::vector<double> ghidden(a.d_hidden, 0.0);
  detail::linear_backward(f.hidden.data(), a.d_hidden, m.p(kDW2).data(), a.d_out,
                          glogits.data(), ghidden.data(), g[kDW2].data(),
                          g[kDB2].data());
  for (std::uint32_t i = 0; i < a.d_hidden; ++i)
    if (f.hidden[i] <= 0.0) ghidden[i] = 0.0;
  if (gfeat.size() != a.g2_out) gfeat.assign(a.g2_out, 0.0);
  detail::linear_backward(feat.data(), a.g2_out, m.p(kDW1).data(), a.d_hidden,
                          ghidden.data(), gfeat.data(), g[kDW1].data(), g[kDB1].data());
}

/// Backward through g2 given the input map that was fed forward (z_low or a
/// stylized map) and its post-ReLU output z2. Accumulates parameter
/// gradients; writes the input-map gradient into gin when non-null.
inline void g2_backward(const ModelBundle& m, const FeatureMap& in, const FeatureMap& z2,
                        std::span<const double> gfeat, Gradients& g, FeatureMap* gin) {
  const Arch& a = m.arch;
  if (gin && !gin->same_layout(in)) *gin = FeatureMap(in.c, in.h, in.w);
  if (a.mode == Mode::kImage) {
    // average pool backward, then ReLU gate
    FeatureMap gz2(a.g2_out, a.h2(), a.w2());
    const double inv = 1.0 / static_cast<double>(z2.spatial());
    for (std::uint32_t ch = 0; ch < a.g2_out; ++ch) {
      double gs = gfeat[ch] * inv;
      double* p = gz2.v.data() + static_cast<std::size_t>(ch) * z2.spatial();
      const double* zp = z2.v.data() + static_cast<std::size_t>(ch) * z2.spatial();
      for (std::size_t i = 0; i < z2.spatial(); ++i) p[i] = zp[i] > 0.0 ? gs : 0.0;
    }
    detail::conv3x3_backward(in.v.data(), a.g1_out, a.h1(), a.w1(), m.p(kG2W).data(),
                             a.g2_out, 2, gz2.v.data(), a.h2(), a.w2(),
                             gin ? gin->v.data() : nullptr, g[kG2W].data(),
                             g[kG2B].data());
  } else {
    std::vector<double> gz2(a.g2_out);
    for (std::uint32_t i = 0; i < a.g2_out; ++i)
      gz2[i] = z2.v[i] > 0.0 ? gfeat[i] : 0.0;
    detail::linear_backward(in.v.data(), a.g1_out, m.p(kG2W).data(), a.g2_out,
                            gz2.data(), gin ? gin->v.data() : nullptr, g[kG2W].data(),
                            g[kG2B].data());
  }
}

/// Backward through g1 given the raw input and g1's post-ReLU output.
inline void g1_backward(const ModelBundle& m, std::span<const float> x,
                        const FeatureMap& zlow, const FeatureMap& gzlow, Gradients& g) {
  const Arch& a = m.arch;
  std::vector<double> xd(x.begin(), x.end());
  std::vector<double> ga1(zlow.v.size());
  for (std::size_t i = 0; i < zlow.v.size(); ++i)
    ga1[i] = zlow.v[i] > 0.0 ? gzlow.v[i] : 0.0;
  if (a.mode == Mode::kImage) {
    detail::conv3x3_backward(xd.data(), a.in_c, a.in_h, a.in_w, m.p(kG1W).data(),
                             a.g1_out, 1, ga1.data(), a.h1(), a.w1(), nullptr,
                             g[kG1W].data(), g[kG1B].data());
  } else {
    detail::linear_backward(xd.data(), a.in_w, m.p(kG1W).data(), a.g1_out, ga1.data(),
                            nullptr, g[kG1W].data(), g[kG1B].data());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian): magic "BTDM", u16 version, arch record,
// block manifest (name, shape, byte offset into the payload), f64 payload.

constexpr std::uint32_t kModelMagic = 0x4d445442;  // "BTDM"
constexpr std::uint16_t kModelVersion = 1;

inline void save_model(const ModelBundle& m, const std::string& path) {
  ByteWriter w;
  w.u32(kModelMagic);
  w.u16(kModelVersion);
  w.u8(static_cast<std::uint8_t>(m.arch.mode));
  for (std::uint32_t v : {m.arch.in_c, m.arch.in_h, m.arch.in_w, m.arch.g1_out,
                          m.arch.g2_out, m.arch.d_hidden, m.arch.k, m.arch.d_out})
    w.u32(v);
  w.u32(static_cast<std::uint32_t>(m.blocks.size()));
  std::uint64_t offset = 0;
  for (const auto& b : m.blocks) {
    w.u16(static_cast<std::uint16_t>(b.name.size()));
    w.bytes(b.name);
    w.u8(static_cast<std::uint8_t>(b.shape.size()));
    for (auto d : b.shape) w.u32(d);
    w.u64(offset);
    offset += b.size() * sizeof(double);
  }
  for (const auto& b : m.blocks)
    for (double v : b.w) w.f64(v);
  w.save(path);
}

inline ModelBundle load_model(const std::string& path) {
  ByteReader r = ByteReader::load(path);
  require(r.remaining() >= 4, Err::kTruncated, "file too short for magic");
  require(r.u32() == kModelMagic, Err::kBadMagic, "not a BTDM checkpoint: " + path);
  require(r.u16() == kModelVersion, Err::kBadMagic, "unsupported checkpoint version");
  ModelBundle m;
  m.arch.mode = static_cast<Mode>(r.u8());
  m.arch.in_c = r.u32();
  m.arch.in_h = r.u32();
  m.arch.in_w = r.u32();
  m.arch.g1_out = r.u32();
  m.arch.g2_out = r.u32();
  m.arch.d_hidden = r.u32();
  m.arch.k = r.u32();
  m.arch.d_out = r.u32();
  std::uint32_t n_blocks = r.u32();
  m.blocks.resize(n_blocks);
  std::uint64_t expect_offset = 0;
  for (auto& b : m.blocks) {
    std::uint16_t len = r.u16();
    b.name = r.bytes(len);
    std::uint8_t nd = r.u8();
    b.shape.resize(nd);
    std::size_t count = 1;
    for (auto& d : b.shape) {
      d = r.u32();
      count *= d;
    }
    std::uint64_t offset = r.u64();
    require(offset == expect_offset, Err::kBadMagic, "manifest offsets inconsistent");
    expect_offset += count * sizeof(double);
    b.w.resize(count);
  }
  for (auto& b : m.blocks)
    for (auto& v : b.w) v = r.f64();
  validate_arch(m.arch);
  require(m.blocks.size() == kNumBlocks, Err::kBadMagic, "unexpected block count");
  return m;
}

}  // namespace btda
