#include "lungcad/layers.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

namespace lungcad {

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

struct ConvGeometry {
  Index channels, x, y, z, kx, ky, kz;
  Index spatial() const { return x * y * z; }
  Index rows() const { return channels * kx * ky * kz; }
};

// cols(((c*kx+dx)*ky+dy)*kz+dz, ((x-x0)*Y+y)*Z+z) = in(c, x+dx-px, y+dy-py, z+dz-pz)
// for x in [x0, x1).
template <typename Scalar>
void im2col(const Scalar* in, const ConvGeometry& g, Scalar* cols, Index x0, Index x1) {
  const Index n = (x1 - x0) * g.y * g.z;
  const Index px = g.kx / 2, py = g.ky / 2, pz = g.kz / 2;
  for (Index c = 0; c < g.channels; ++c)
    for (Index dx = 0; dx < g.kx; ++dx)
      for (Index dy = 0; dy < g.ky; ++dy)
        for (Index dz = 0; dz < g.kz; ++dz) {
          Scalar* dst = cols + (((c * g.kx + dx) * g.ky + dy) * g.kz + dz) * n;
          const Index zlo = std::max<Index>(0, pz - dz);
          const Index zhi = std::min<Index>(g.z, g.z + pz - dz);
          for (Index x = x0; x < x1; ++x) {
            const Index sx = x + dx - px;
            for (Index y = 0; y < g.y; ++y) {
              Scalar* row = dst + ((x - x0) * g.y + y) * g.z;
              const Index sy = y + dy - py;
              if (sx < 0 || sx >= g.x || sy < 0 || sy >= g.y) {
                std::fill(row, row + g.z, Scalar(0));
                continue;
              }
              const Scalar* src = in + ((c * g.x + sx) * g.y + sy) * g.z + (dz - pz);
              std::fill(row, row + zlo, Scalar(0));
              std::copy(src + zlo, src + zhi, row + zlo);
              std::fill(row + zhi, row + g.z, Scalar(0));
            }
          }
        }
}

// Adjoint of im2col over the same x range; accumulates into out.
template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* out, Index x0, Index x1) {
  const Index n = (x1 - x0) * g.y * g.z;
  const Index px = g.kx / 2, py = g.ky / 2, pz = g.kz / 2;
  for (Index c = 0; c < g.channels; ++c)
    for (Index dx = 0; dx < g.kx; ++dx)
      for (Index dy = 0; dy < g.ky; ++dy)
        for (Index dz = 0; dz < g.kz; ++dz) {
          const Scalar* src = cols + (((c * g.kx + dx) * g.ky + dy) * g.kz + dz) * n;
          const Index zlo = std::max<Index>(0, pz - dz);
          const Index zhi = std::min<Index>(g.z, g.z + pz - dz);
          for (Index x = x0; x < x1; ++x) {
            const Index sx = x + dx - px;
            if (sx < 0 || sx >= g.x) continue;
            for (Index y = 0; y < g.y; ++y) {
              const Index sy = y + dy - py;
              if (sy < 0 || sy >= g.y) continue;
              const Scalar* row = src + ((x - x0) * g.y + y) * g.z;
              Scalar* dst = out + ((c * g.x + sx) * g.y + sy) * g.z + (dz - pz);
              for (Index z = zlo; z < zhi; ++z) dst[z] += row[z];
            }
          }
        }
}

// x planes per im2col tile so the column buffer stays around 256 KiB.
template <typename Scalar>
Index planes_per_tile(const ConvGeometry& g) {
  const Index plane_bytes = g.rows() * g.y * g.z * Index(sizeof(Scalar));
  return std::clamp<Index>((Index(1) << 18) / std::max<Index>(plane_bytes, 1), 1, g.x);
}

template <typename Scalar>
ConvGeometry check_conv(const Tensor<Scalar>& input, const Tensor<Scalar>& weights, const Tensor<Scalar>& bias) {
  if (input.rank() != 5 || weights.rank() != 5)
    throw InvalidArgument("conv3d expects 5D input and weights, got " + shape_string(input.shape) + " and " +
                          shape_string(weights.shape));
  if (weights.dim(1) != input.dim(1))
    throw InvalidArgument("conv3d channel mismatch: input " + shape_string(input.shape) + ", weights " +
                          shape_string(weights.shape));
  if (bias.size() != weights.dim(0)) throw InvalidArgument("conv3d bias length mismatch");
  for (Index a = 2; a < 5; ++a)
    if (weights.dim(a) % 2 == 0) throw InvalidArgument("conv3d kernel extents must be odd");
  return {input.dim(1), input.dim(2), input.dim(3), input.dim(4), weights.dim(2), weights.dim(3), weights.dim(4)};
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv3d_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                              const Tensor<Scalar>& bias) {
  const ConvGeometry g = check_conv(input, weights, bias);
  const Index batch = input.dim(0), out_ch = weights.dim(0), n = g.spatial();
  Tensor<Scalar> out({batch, out_ch, g.x, g.y, g.z});
  ConstRowMap<Scalar> w(weights.ptr(), out_ch, g.rows());
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.ptr(), out_ch);
  const Index tile = planes_per_tile<Scalar>(g), plane = g.y * g.z;
  parallel_for(batch, [&](Index s) {
    std::vector<Scalar> buf(static_cast<std::size_t>(g.rows() * tile * plane));
    RowMap<Scalar> y(out.ptr() + s * out_ch * n, out_ch, n);
    for (Index x0 = 0; x0 < g.x; x0 += tile) {
      const Index x1 = std::min(g.x, x0 + tile), len = (x1 - x0) * plane;
      im2col(input.ptr() + s * g.channels * n, g, buf.data(), x0, x1);
      y.middleCols(x0 * plane, len).noalias() = w * ConstRowMap<Scalar>(buf.data(), g.rows(), len);
    }
    y.colwise() += b;
  });
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv3d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_output) {
  const ConvGeometry g = check_conv(input, weights, Tensor<Scalar>({weights.dim(0)}));
  const Index batch = input.dim(0), out_ch = weights.dim(0), n = g.spatial();
  ConvGrads<Scalar> grads{Tensor<Scalar>(input.shape), Tensor<Scalar>(weights.shape),
                          Tensor<Scalar>({out_ch})};
  ConstRowMap<Scalar> w(weights.ptr(), out_ch, g.rows());
  std::vector<RowMatrix<Scalar>> per_sample_w(batch);
  std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> per_sample_b(batch);
  const Index tile = planes_per_tile<Scalar>(g), plane = g.y * g.z;
  parallel_for(batch, [&](Index s) {
    std::vector<Scalar> buf(static_cast<std::size_t>(g.rows() * tile * plane)), dbuf(buf.size());
    ConstRowMap<Scalar> dy(grad_output.ptr() + s * out_ch * n, out_ch, n);
    per_sample_w[s] = RowMatrix<Scalar>::Zero(out_ch, g.rows());
    per_sample_b[s] = dy.rowwise().sum();
    for (Index x0 = 0; x0 < g.x; x0 += tile) {
      const Index x1 = std::min(g.x, x0 + tile), len = (x1 - x0) * plane;
      im2col(input.ptr() + s * g.channels * n, g, buf.data(), x0, x1);
      const auto dy_tile = dy.middleCols(x0 * plane, len);
      per_sample_w[s].noalias() += dy_tile * ConstRowMap<Scalar>(buf.data(), g.rows(), len).transpose();
      RowMap<Scalar>(dbuf.data(), g.rows(), len).noalias() = w.transpose() * dy_tile;
      col2im(dbuf.data(), g, grads.input.ptr() + s * g.channels * n, x0, x1);
    }
  });
  RowMap<Scalar> dw(grads.weights.ptr(), out_ch, g.rows());
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> db(grads.bias.ptr(), out_ch);
  for (Index s = 0; s < batch; ++s) {
    dw += per_sample_w[s];
    db += per_sample_b[s];
  }
  return grads;
}

template <typename Scalar>
PoolResult<Scalar> maxpool3d_forward(const Tensor<Scalar>& input, const Dims3& pool) {
  if (input.rank() != 5) throw InvalidArgument("maxpool3d expects a 5D input");
  for (int a = 0; a < 3; ++a)
    if (pool[a] < 1 || input.dim(2 + a) % pool[a] != 0)
      throw InvalidArgument("maxpool3d: extents " + shape_string(input.shape) + " not divisible by pool");
  const Index planes = input.dim(0) * input.dim(1);
  const Index X = input.dim(2), Y = input.dim(3), Z = input.dim(4);
  const Index ox = X / pool[0], oy = Y / pool[1], oz = Z / pool[2];
  PoolResult<Scalar> r{Tensor<Scalar>({input.dim(0), input.dim(1), ox, oy, oz}), {}};
  r.argmax.resize(static_cast<std::size_t>(r.output.size()));
  const Scalar* src = input.ptr();
  Scalar* dst = r.output.ptr();
  Index* arg = r.argmax.data();
  for (Index p = 0; p < planes; ++p) {
    const Index in_base = p * X * Y * Z;
    for (Index x = 0; x < ox; ++x)
      for (Index y = 0; y < oy; ++y) {
        const Index row = in_base + (x * pool[0] * Y + y * pool[1]) * Z;
        for (Index z = 0; z < oz; ++z) {
          Index best = row + z * pool[2];
          Scalar best_v = src[best];
          for (Index i = 0; i < pool[0]; ++i)
            for (Index j = 0; j < pool[1]; ++j) {
              const Index base = row + (i * Y + j) * Z + z * pool[2];
              for (Index k = 0; k < pool[2]; ++k)
                if (src[base + k] > best_v) {
                  best = base + k;
                  best_v = src[best];
                }
            }
          *dst++ = best_v;
          *arg++ = best;
        }
      }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> maxpool3d_backward(const Tensor<Scalar>& grad_output, const std::vector<Index>& argmax,
                                  const Shape& input_shape) {
  Tensor<Scalar> g(input_shape);
  for (Index o = 0; o < grad_output.size(); ++o) g[argmax[static_cast<std::size_t>(o)]] += grad_output[o];
  return g;
}

template <typename Scalar>
Tensor<Scalar> batchnorm_apply(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, BatchNormStats<Scalar>& stats, Mode mode,
                               BatchNormCache<Scalar>* cache) {
  if (input.rank() < 2) throw InvalidArgument("batchnorm expects (batch, channels, ...)");
  const Index batch = input.dim(0), channels = input.dim(1);
  if (batch < 1) throw InvalidArgument("batchnorm on an empty batch");
  if (gamma.size() != channels || beta.size() != channels || stats.running_mean.size() != channels ||
      stats.running_var.size() != channels)
    throw InvalidArgument("batchnorm parameter length does not match channel count");
  const Index n = input.size() / (batch * channels);
  Tensor<Scalar> out(input.shape);
  if (cache) {
    cache->inv_std.resize(channels);
    cache->normalized = Tensor<Scalar>(input.shape);
  }
  for (Index c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = input.ptr() + (b * channels + c) * n;
        for (Index i = 0; i < n; ++i) sum += double(p[i]);
      }
      const double count = double(batch * n);
      mean = sum / count;
      double sq = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = input.ptr() + (b * channels + c) * n;
        for (Index i = 0; i < n; ++i) sq += (double(p[i]) - mean) * (double(p[i]) - mean);
      }
      var = sq / count;
      stats.running_mean[c] =
          Scalar(stats.momentum * double(stats.running_mean[c]) + (1.0 - stats.momentum) * mean);
      stats.running_var[c] = Scalar(stats.momentum * double(stats.running_var[c]) + (1.0 - stats.momentum) * var);
    } else {
      mean = double(stats.running_mean[c]);
      var = double(stats.running_var[c]);
    }
    const double inv_std = 1.0 / std::sqrt(var + stats.eps);
    if (cache) cache->inv_std[c] = inv_std;
    const double gm = double(gamma[c]), bt = double(beta[c]);
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * n;
      for (Index i = 0; i < n; ++i) {
        const double xhat = (double(input[off + i]) - mean) * inv_std;
        if (cache) cache->normalized[off + i] = Scalar(xhat);
        out[off + i] = Scalar(gm * xhat + bt);
      }
    }
  }
  return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& gamma,
                                          const BatchNormCache<Scalar>& cache) {
  const Index batch = grad_output.dim(0), channels = grad_output.dim(1);
  const Index n = grad_output.size() / (batch * channels);
  const double count = double(batch * n);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(grad_output.shape), Tensor<Scalar>({channels}),
                           Tensor<Scalar>({channels})};
  for (Index c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * n;
      for (Index i = 0; i < n; ++i) {
        sum_dy += double(grad_output[off + i]);
        sum_dy_xhat += double(grad_output[off + i]) * double(cache.normalized[off + i]);
      }
    }
    g.beta[c] = Scalar(sum_dy);
    g.gamma[c] = Scalar(sum_dy_xhat);
    const double scale = double(gamma[c]) * cache.inv_std[c] / count;
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * n;
      for (Index i = 0; i < n; ++i)
        g.input[off + i] = Scalar(scale * (count * double(grad_output[off + i]) - sum_dy -
                                           double(cache.normalized[off + i]) * sum_dy_xhat));
    }
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> dense_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                             const Tensor<Scalar>& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || weights.dim(1) != input.dim(1) || bias.size() != weights.dim(0))
    throw InvalidArgument("dense shape mismatch: input " + shape_string(input.shape) + ", weights " +
                          shape_string(weights.shape));
  const Index batch = input.dim(0), units = weights.dim(0), features = weights.dim(1);
  Tensor<Scalar> out({batch, units});
  ConstRowMap<Scalar> w(weights.ptr(), units, features);
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.ptr(), units);
  for (Index s = 0; s < batch; ++s) {
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> x(input.ptr() + s * features, features);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> y(out.ptr() + s * units, units);
    y.noalias() = w * x;
    y += b;
  }
  return out;
}

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_output) {
  const Index batch = input.dim(0), units = weights.dim(0), features = weights.dim(1);
  DenseGrads<Scalar> g{Tensor<Scalar>(input.shape), Tensor<Scalar>(weights.shape), Tensor<Scalar>({units})};
  ConstRowMap<Scalar> w(weights.ptr(), units, features);
  RowMap<Scalar> dw(g.weights.ptr(), units, features);
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> db(g.bias.ptr(), units);
  for (Index s = 0; s < batch; ++s) {
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> x(input.ptr() + s * features, features);
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dy(grad_output.ptr() + s * units, units);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dx(g.input.ptr() + s * features, features);
    dw.noalias() += dy * x.transpose();
    db += dy;
    dx.noalias() = w.transpose() * dy;
  }
  return g;
}

#define LUNGCAD_INSTANTIATE_LAYERS(S)                                                                   \
  template Tensor<S> conv3d_forward<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);         \
  template ConvGrads<S> conv3d_backward<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);     \
  template PoolResult<S> maxpool3d_forward<S>(const Tensor<S>&, const Dims3&);                        \
  template Tensor<S> maxpool3d_backward<S>(const Tensor<S>&, const std::vector<Index>&, const Shape&); \
  template Tensor<S> batchnorm_apply<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,         \
                                        BatchNormStats<S>&, Mode, BatchNormCache<S>*);                \
  template BatchNormGrads<S> batchnorm_backward<S>(const Tensor<S>&, const Tensor<S>&,                \
                                                   const BatchNormCache<S>&);                         \
  template Tensor<S> dense_forward<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);          \
  template DenseGrads<S> dense_backward<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

LUNGCAD_INSTANTIATE_LAYERS(float)
LUNGCAD_INSTANTIATE_LAYERS(double)

#undef LUNGCAD_INSTANTIATE_LAYERS

}  // namespace lungcad
