#ifndef LUNGCAD_LAYERS_HPP
#define LUNGCAD_LAYERS_HPP

#include <vector>

#include "lungcad/tensor.hpp"

namespace lungcad {

enum class Mode { Train, Infer };

// All kernels process batch entries independently (the batchnorm statistics
// in Train mode are the only cross-sample coupling), so grouping samples into
// batches never changes per-sample results.

/// 3D convolution, stride 1, zero "same" padding (odd kernel extents).
/// input (B, C, X, Y, Z), weights (O, C, kx, ky, kz), bias (O).
template <typename Scalar>
Tensor<Scalar> conv3d_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                              const Tensor<Scalar>& bias);

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input, weights, bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv3d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_output);

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // linear input index per output element
};

/// Max pooling with non-overlapping windows; ties resolve to the lowest
/// linear index.
template <typename Scalar>
PoolResult<Scalar> maxpool3d_forward(const Tensor<Scalar>& input, const Dims3& pool);

template <typename Scalar>
Tensor<Scalar> maxpool3d_backward(const Tensor<Scalar>& grad_output, const std::vector<Index>& argmax,
                                  const Shape& input_shape);

template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> running_mean, running_var;
  double momentum = 0.99;
  double eps = 1e-5;
};

template <typename Scalar>
struct BatchNormCache {
  Eigen::ArrayXd inv_std;
  Tensor<Scalar> normalized;
};

/// Per-channel normalisation over (batch, x, y, z). Train mode uses batch
/// moments and folds them into the running statistics with the configured
/// momentum; Infer mode uses the running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm_apply(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, BatchNormStats<Scalar>& stats, Mode mode,
                               BatchNormCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input, gamma, beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& gamma,
                                          const BatchNormCache<Scalar>& cache);

/// Fully connected: input (B, F), weights (U, F), bias (U) -> (B, U).
template <typename Scalar>
Tensor<Scalar> dense_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                             const Tensor<Scalar>& bias);

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input, weights, bias;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_output);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y = x;
  y.data = x.data.max(Scalar(0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output) {
  Tensor<Scalar> g = grad_output;
  g.data = (input.data > Scalar(0)).select(grad_output.data, Scalar(0));
  return g;
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  return z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z)) : std::exp(z) / (Scalar(1) + std::exp(z));
}

}  // namespace lungcad

#endif  // LUNGCAD_LAYERS_HPP
