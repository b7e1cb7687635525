#ifndef LUNGCAD_TENSOR_HPP
#define LUNGCAD_TENSOR_HPP

#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lungcad/common.hpp"

namespace lungcad {

using Shape = std::vector<Index>;

std::string shape_string(const Shape& s);

/// Dense row-major tensor, innermost axis fastest. Activations use the
/// (batch, channels, x, y, z) layout; conv weights (out, in, kx, ky, kz).
template <typename Scalar>
struct Tensor {
  using Data = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Data data;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape(std::move(s)) {
    for (Index e : shape)
      if (e < 1) throw InvalidArgument("tensor extents must be >= 1, got " + shape_string(shape));
    data = Data::Constant(element_count(shape), fill);
  }

  static Index element_count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), Index(1), std::multiplies<Index>());
  }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape[static_cast<std::size_t>(i)]; }
  Scalar* ptr() { return data.data(); }
  const Scalar* ptr() const { return data.data(); }
  Scalar& operator[](Index i) { return data[i]; }
  Scalar operator[](Index i) const { return data[i]; }

  // Number of elements per batch entry.
  Index sample_size() const { return size() / shape.front(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data = data.template cast<Other>();
    return t;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }
};

}  // namespace lungcad

#endif  // LUNGCAD_TENSOR_HPP
