#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "sparsevox/common.hpp"
#include "sparsevox/sparse_tensor.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// Kernel offsets. Enumeration order is lexicographic in (dz, dy, dx) and is
// part of the weight-serialization contract. Odd kernels are centered; even
// kernels use the forward window {0 .. K-1} (the Minkowski convention for
// stride-2 down/upsampling kernels).
// ---------------------------------------------------------------------------

struct KernelOffset {
  std::int32_t dx, dy, dz;
};

inline std::vector<KernelOffset> kernel_offsets(int k) {
  const int lo = (k % 2 == 1) ? -(k - 1) / 2 : 0;
  const int hi = (k % 2 == 1) ? (k - 1) / 2 : k - 1;
  std::vector<KernelOffset> out;
  out.reserve(static_cast<std::size_t>(k) * k * k);
  for (int dz = lo; dz <= hi; ++dz)
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) out.push_back({dx, dy, dz});
  return out;
}

enum class ConvMode { submanifold, strided, transposed };

// Shape and mode of one sparse convolution; weights live in the network
// layer. K^3 weight blocks are ordered like kernel_offsets(K).
struct ConvSpec {
  int c_in = 1;
  int c_out = 1;
  int kernel = 3;
  int stride = 1;
  ConvMode mode = ConvMode::submanifold;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kernel) * kernel * kernel * c_in * c_out;
  }

  void validate() const {
    if (c_in < 1 || c_out < 1) throw ConfigError("channel widths must be >= 1");
    if (kernel < 1) throw ConfigError("kernel size must be >= 1");
    if (mode == ConvMode::submanifold) {
      if (kernel % 2 == 0)
        throw ConfigError("submanifold convolution requires an odd kernel");
      if (stride != 1)
        throw ConfigError("submanifold convolution requires stride 1");
    } else if (stride < 1) {
      throw ConfigError("stride must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// KernelMap: per kernel offset, the (input row, output row) pairs that make
// convolution a gather-GEMM-scatter. Pair lists are ordered by output row,
// so scatter order is deterministic.
// ---------------------------------------------------------------------------

struct KernelMap {
  struct Pair {
    std::int32_t in, out;
  };
  std::vector<std::vector<Pair>> pairs;  // one list per kernel offset
  std::vector<Coord> out_coords;
  std::int32_t out_stride = 1;
};

// target_coords is required for transposed mode: the decoder upsamples onto
// the coordinate set cached from the matching encoder level. TensorT is any
// type with coords, stride, and lookup() (SparseTensor or a bare CoordSet).
template <typename TensorT>
KernelMap build_kernel_map(const TensorT& in, const ConvSpec& spec,
                           const std::vector<Coord>* target_coords = nullptr) {
  spec.validate();
  const auto offsets = kernel_offsets(spec.kernel);
  KernelMap map;
  map.pairs.resize(offsets.size());

  const std::int32_t t_in = in.stride;
  if (spec.mode == ConvMode::submanifold) {
    map.out_coords = in.coords;
    map.out_stride = t_in;
  } else if (spec.mode == ConvMode::strided) {
    map.out_stride = t_in * spec.stride;
    std::unordered_map<Coord, bool, CoordHash> seen;
    for (const Coord& c : in.coords) {
      Coord q = c;
      for (int a = 1; a < 4; ++a)
        q[a] = floor_div(q[a], map.out_stride) * map.out_stride;
      if (seen.emplace(q, true).second) map.out_coords.push_back(q);
    }
    std::sort(map.out_coords.begin(), map.out_coords.end(), coord_less);
  } else {
    if (!target_coords)
      throw ConfigError("transposed convolution requires target coordinates");
    if (t_in % spec.stride != 0)
      throw ConfigError("transposed stride does not divide the tensor stride");
    map.out_stride = t_in / spec.stride;
    map.out_coords = *target_coords;
  }

  // The pair rule is uniform across modes: offsets step at the finer of the
  // two strides. Submanifold/strided gather input at c_out + d*t_in;
  // transposed gathers input at c_out - d*t_out (the adjoint pairing).
  const std::int32_t step =
      spec.mode == ConvMode::transposed ? map.out_stride : t_in;
  const std::int32_t sign = spec.mode == ConvMode::transposed ? -1 : 1;
  for (std::size_t j = 0; j < map.out_coords.size(); ++j) {
    const Coord& oc = map.out_coords[j];
    for (std::size_t o = 0; o < offsets.size(); ++o) {
      const Coord probe = {oc[0], oc[1] + sign * offsets[o].dx * step,
                           oc[2] + sign * offsets[o].dy * step,
                           oc[3] + sign * offsets[o].dz * step};
      const std::int32_t i = in.lookup(probe);
      if (i >= 0)
        map.pairs[o].push_back({i, static_cast<std::int32_t>(j)});
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Convolution forward/backward as flat-buffer kernels. Feature buffers are
// row-major [sites x channels]; weights are [K^3 x C_in x C_out]
// offset-major; bias may be empty.
// ---------------------------------------------------------------------------

template <typename Real>
void conv_forward(const std::vector<Real>& in_feats, int c_in,
                  const KernelMap& map, const std::vector<Real>& weights,
                  const std::vector<Real>& bias, int c_out,
                  std::vector<Real>& out_feats) {
  const std::size_t n_out = map.out_coords.size();
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(c_out))
    throw DataError("bias width does not match output channels");
  if (weights.size() != map.pairs.size() * static_cast<std::size_t>(c_in) *
                            static_cast<std::size_t>(c_out))
    throw DataError("weight count does not match kernel map and channels");

  out_feats.assign(n_out * static_cast<std::size_t>(c_out), Real(0));
  if (!bias.empty())
    for (std::size_t j = 0; j < n_out; ++j)
      for (int co = 0; co < c_out; ++co)
        out_feats[j * c_out + co] = bias[co];

  for (std::size_t o = 0; o < map.pairs.size(); ++o) {
    const Real* w = weights.data() + o * c_in * c_out;
    for (const auto& pr : map.pairs[o]) {
      const Real* x = in_feats.data() + static_cast<std::size_t>(pr.in) * c_in;
      Real* y = out_feats.data() + static_cast<std::size_t>(pr.out) * c_out;
      for (int ci = 0; ci < c_in; ++ci) {
        const Real xv = x[ci];
        const Real* wrow = w + ci * c_out;
        for (int co = 0; co < c_out; ++co) y[co] += xv * wrow[co];
      }
    }
  }
}

template <typename Real>
void conv_backward(const std::vector<Real>& grad_out,
                   const std::vector<Real>& in_feats, int c_in,
                   const KernelMap& map, const std::vector<Real>& weights,
                   bool has_bias, int c_out, std::vector<Real>& grad_in,
                   std::vector<Real>& grad_weights,
                   std::vector<Real>& grad_bias) {
  const std::size_t n_in = in_feats.size() / static_cast<std::size_t>(c_in);
  grad_in.assign(n_in * static_cast<std::size_t>(c_in), Real(0));
  grad_weights.assign(weights.size(), Real(0));
  grad_bias.assign(has_bias ? static_cast<std::size_t>(c_out) : 0, Real(0));

  if (has_bias) {
    const std::size_t n_out = grad_out.size() / static_cast<std::size_t>(c_out);
    for (std::size_t j = 0; j < n_out; ++j)
      for (int co = 0; co < c_out; ++co)
        grad_bias[co] += grad_out[j * c_out + co];
  }

  for (std::size_t o = 0; o < map.pairs.size(); ++o) {
    const Real* w = weights.data() + o * c_in * c_out;
    Real* gw = grad_weights.data() + o * c_in * c_out;
    for (const auto& pr : map.pairs[o]) {
      const Real* x = in_feats.data() + static_cast<std::size_t>(pr.in) * c_in;
      const Real* gy =
          grad_out.data() + static_cast<std::size_t>(pr.out) * c_out;
      Real* gx = grad_in.data() + static_cast<std::size_t>(pr.in) * c_in;
      for (int ci = 0; ci < c_in; ++ci) {
        const Real* wrow = w + ci * c_out;
        Real* gwrow = gw + ci * c_out;
        Real acc = 0;
        for (int co = 0; co < c_out; ++co) {
          acc += gy[co] * wrow[co];
          gwrow[co] += x[ci] * gy[co];
        }
        gx[ci] += acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Batch normalization over all active sites across the batch, per channel.
// ---------------------------------------------------------------------------

template <typename Real>
struct BatchNormState {
  std::vector<Real> gamma, beta;
  std::vector<Real> running_mean, running_var;
  Real momentum = Real(0.1);
  Real epsilon = Real(1e-5);

  explicit BatchNormState(int channels = 0)
      : gamma(channels, Real(1)),
        beta(channels, Real(0)),
        running_mean(channels, Real(0)),
        running_var(channels, Real(1)) {}

  int channels() const { return static_cast<int>(gamma.size()); }
};

template <typename Real>
struct BatchNormCache {
  std::vector<Real> x_hat;     // normalized inputs
  std::vector<Real> inv_std;   // per channel
  bool training = true;
};

template <typename Real>
void batch_norm_forward(const std::vector<Real>& in, int channels,
                        BatchNormState<Real>& state, bool training,
                        std::vector<Real>& out, BatchNormCache<Real>& cache) {
  if (state.channels() != channels)
    throw DataError("batch-norm channel mismatch");
  const std::size_t n = in.size() / static_cast<std::size_t>(channels);
  if (training && n == 0)
    throw DataError("batch norm in training mode requires active sites");

  std::vector<Real> mean(channels, Real(0)), var(channels, Real(0));
  if (training) {
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < channels; ++c) mean[c] += in[i * channels + c];
    for (int c = 0; c < channels; ++c) mean[c] /= static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < channels; ++c) {
        const Real d = in[i * channels + c] - mean[c];
        var[c] += d * d;
      }
    for (int c = 0; c < channels; ++c) var[c] /= static_cast<Real>(n);
    for (int c = 0; c < channels; ++c) {
      state.running_mean[c] = (Real(1) - state.momentum) * state.running_mean[c] +
                              state.momentum * mean[c];
      state.running_var[c] = (Real(1) - state.momentum) * state.running_var[c] +
                             state.momentum * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  cache.training = training;
  cache.inv_std.resize(channels);
  for (int c = 0; c < channels; ++c)
    cache.inv_std[c] = Real(1) / std::sqrt(var[c] + state.epsilon);

  out.resize(in.size());
  cache.x_hat.resize(in.size());
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < channels; ++c) {
      const Real xh = (in[i * channels + c] - mean[c]) * cache.inv_std[c];
      cache.x_hat[i * channels + c] = xh;
      out[i * channels + c] = state.gamma[c] * xh + state.beta[c];
    }
}

template <typename Real>
void batch_norm_backward(const std::vector<Real>& grad_out, int channels,
                         const BatchNormState<Real>& state,
                         const BatchNormCache<Real>& cache,
                         std::vector<Real>& grad_in,
                         std::vector<Real>& grad_gamma,
                         std::vector<Real>& grad_beta) {
  const std::size_t n = grad_out.size() / static_cast<std::size_t>(channels);
  grad_in.assign(grad_out.size(), Real(0));
  grad_gamma.assign(channels, Real(0));
  grad_beta.assign(channels, Real(0));

  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < channels; ++c) {
      grad_gamma[c] += grad_out[i * channels + c] * cache.x_hat[i * channels + c];
      grad_beta[c] += grad_out[i * channels + c];
    }

  if (!cache.training) {
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < channels; ++c)
        grad_in[i * channels + c] =
            grad_out[i * channels + c] * state.gamma[c] * cache.inv_std[c];
    return;
  }

  for (int c = 0; c < channels; ++c) {
    const Real mean_dy = grad_beta[c] / static_cast<Real>(n);
    const Real mean_dy_xhat = grad_gamma[c] / static_cast<Real>(n);
    const Real scale = state.gamma[c] * cache.inv_std[c];
    for (std::size_t i = 0; i < n; ++i)
      grad_in[i * channels + c] =
          scale * (grad_out[i * channels + c] - mean_dy -
                   cache.x_hat[i * channels + c] * mean_dy_xhat);
  }
}

// ---------------------------------------------------------------------------
// ReLU.
// ---------------------------------------------------------------------------

template <typename Real>
void relu_forward(const std::vector<Real>& in, std::vector<Real>& out) {
  out.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = in[i] > Real(0) ? in[i] : Real(0);
}

template <typename Real>
void relu_backward(const std::vector<Real>& grad_out,
                   const std::vector<Real>& in, std::vector<Real>& grad_in) {
  grad_in.resize(grad_out.size());
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    grad_in[i] = in[i] > Real(0) ? grad_out[i] : Real(0);
}

// ---------------------------------------------------------------------------
// Global average pool per batch element, and its unpool (broadcast).
// ---------------------------------------------------------------------------

template <typename Real>
void global_avg_pool(const std::vector<Real>& in, int channels,
                     const std::vector<Coord>& coords, int num_batches,
                     std::vector<Real>& out, std::vector<std::size_t>& counts) {
  out.assign(static_cast<std::size_t>(num_batches) * channels, Real(0));
  counts.assign(num_batches, 0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::int32_t b = coords[i][0];
    ++counts[b];
    for (int c = 0; c < channels; ++c)
      out[static_cast<std::size_t>(b) * channels + c] += in[i * channels + c];
  }
  for (int b = 0; b < num_batches; ++b)
    if (counts[b] > 0)
      for (int c = 0; c < channels; ++c)
        out[static_cast<std::size_t>(b) * channels + c] /=
            static_cast<Real>(counts[b]);
}

template <typename Real>
void global_avg_pool_backward(const std::vector<Real>& grad_out, int channels,
                              const std::vector<Coord>& coords,
                              const std::vector<std::size_t>& counts,
                              std::vector<Real>& grad_in) {
  grad_in.assign(coords.size() * static_cast<std::size_t>(channels), Real(0));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::int32_t b = coords[i][0];
    for (int c = 0; c < channels; ++c)
      grad_in[i * channels + c] =
          grad_out[static_cast<std::size_t>(b) * channels + c] /
          static_cast<Real>(counts[b]);
  }
}

template <typename Real>
void global_unpool(const std::vector<Real>& pooled, int channels,
                   const std::vector<Coord>& coords, std::vector<Real>& out) {
  out.resize(coords.size() * static_cast<std::size_t>(channels));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::int32_t b = coords[i][0];
    for (int c = 0; c < channels; ++c)
      out[i * channels + c] =
          pooled[static_cast<std::size_t>(b) * channels + c];
  }
}

}  // namespace sparsevox
