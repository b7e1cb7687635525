#ifndef LUNGCAD_VOLUME_HPP
#define LUNGCAD_VOLUME_HPP

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "lungcad/common.hpp"

namespace lungcad {

enum class Unit { RawDetector, Hounsfield, Luminance };

std::string to_string(Unit u);
Unit unit_from_string(const std::string& s);

struct WorldPoint {
  double x_mm = 0, y_mm = 0, z_mm = 0;

  double operator[](int axis) const { return axis == 0 ? x_mm : axis == 1 ? y_mm : z_mm; }
  bool finite() const { return std::isfinite(x_mm) && std::isfinite(y_mm) && std::isfinite(z_mm); }
};

/// Geometry shared by volumes, masks and probability grids: voxel counts,
/// physical voxel size and the world position of voxel (0,0,0).
/// Linear order is x-fastest.
struct Grid {
  Dims3 dims{0, 0, 0};
  Vec3 spacing_mm{1, 1, 1};
  Vec3 origin_mm{0, 0, 0};

  Index size() const { return voxel_count(dims); }
  Index index(Index x, Index y, Index z) const { return x + dims[0] * (y + dims[1] * z); }
  bool contains(Index x, Index y, Index z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  // Continuous voxel coordinate of a world point along one axis.
  double continuous(const WorldPoint& p, int axis) const {
    return (p[axis] - origin_mm[axis]) / spacing_mm[axis];
  }
  WorldPoint world(double x, double y, double z) const {
    return {origin_mm[0] + x * spacing_mm[0], origin_mm[1] + y * spacing_mm[1],
            origin_mm[2] + z * spacing_mm[2]};
  }
  bool same_geometry(const Grid& o) const {
    return dims == o.dims && spacing_mm == o.spacing_mm && origin_mm == o.origin_mm;
  }
  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw InvalidVolume("volume dims must be positive");
      if (!(spacing_mm[a] > 0)) throw InvalidVolume("volume spacing must be positive");
    }
  }
};

template <typename Scalar>
struct Volume {
  using Data = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Grid grid;
  Unit unit = Unit::Hounsfield;
  Data data;

  Volume() = default;
  Volume(const Grid& g, Unit u, Scalar fill = Scalar(0)) : grid(g), unit(u) {
    grid.validate();
    data = Data::Constant(grid.size(), fill);
  }

  const Dims3& dims() const { return grid.dims; }
  Index size() const { return grid.size(); }
  Scalar& operator()(Index x, Index y, Index z) { return data[grid.index(x, y, z)]; }
  Scalar operator()(Index x, Index y, Index z) const { return data[grid.index(x, y, z)]; }

  // Value at the nearest voxel with coordinates clamped into the volume.
  Scalar clamped(Index x, Index y, Index z) const {
    x = std::clamp<Index>(x, 0, grid.dims[0] - 1);
    y = std::clamp<Index>(y, 0, grid.dims[1] - 1);
    z = std::clamp<Index>(z, 0, grid.dims[2] - 1);
    return (*this)(x, y, z);
  }

  // Trilinear interpolation at a continuous voxel coordinate; samples outside
  // the volume use the nearest voxel.
  Scalar trilinear(double cx, double cy, double cz) const {
    const double c[3] = {cx, cy, cz};
    Index lo[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
      const double v = std::clamp(c[a], 0.0, double(grid.dims[a] - 1));
      lo[a] = static_cast<Index>(std::floor(v));
      frac[a] = v - double(lo[a]);
      if (lo[a] >= grid.dims[a] - 1) {
        lo[a] = grid.dims[a] - 1;
        frac[a] = 0.0;
      }
    }
    // Nested lerps a + t (b - a) so equal corners reproduce their value exactly.
    auto at = [&](Index dx, Index dy, Index dz) {
      return double((*this)(std::min(lo[0] + dx, grid.dims[0] - 1), std::min(lo[1] + dy, grid.dims[1] - 1),
                            std::min(lo[2] + dz, grid.dims[2] - 1)));
    };
    auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); };
    double face[2];
    for (Index dz = 0; dz < 2; ++dz) {
      const double e0 = lerp(at(0, 0, dz), at(1, 0, dz), frac[0]);
      const double e1 = lerp(at(0, 1, dz), at(1, 1, dz), frac[0]);
      face[dz] = lerp(e0, e1, frac[1]);
    }
    const double acc = lerp(face[0], face[1], frac[2]);
    return static_cast<Scalar>(acc);
  }

  template <typename Other>
  Volume<Other> cast() const {
    Volume<Other> out;
    out.grid = grid;
    out.unit = unit;
    out.data = data.template cast<Other>();
    return out;
  }
};

using VolumeF = Volume<float>;
using VolumeD = Volume<double>;

template <typename Scalar>
Volume<Scalar> hu_from_raw(const Volume<Scalar>& raw, double slope, double intercept) {
  raw.grid.validate();
  if (raw.unit != Unit::RawDetector) throw InvalidArgument("hu_from_raw expects a raw volume");
  Volume<Scalar> out;
  out.grid = raw.grid;
  out.unit = Unit::Hounsfield;
  out.data = (raw.data.template cast<double>() * slope + intercept).template cast<Scalar>();
  return out;
}

template <typename Scalar>
Volume<Scalar> resample(const Volume<Scalar>& v, const Vec3& target_spacing_mm) {
  if (v.size() == 0) throw InvalidVolume("cannot resample an empty volume");
  v.grid.validate();
  Grid g;
  g.origin_mm = v.grid.origin_mm;
  g.spacing_mm = target_spacing_mm;
  double ratio[3];
  for (int a = 0; a < 3; ++a) {
    if (!(target_spacing_mm[a] > 0)) throw InvalidArgument("target spacing must be positive");
    const double extent = double(v.grid.dims[a]) * v.grid.spacing_mm[a];
    g.dims[a] = std::max<Index>(1, static_cast<Index>(std::llround(extent / target_spacing_mm[a])));
    ratio[a] = target_spacing_mm[a] / v.grid.spacing_mm[a];
  }
  Volume<Scalar> out(g, v.unit);
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x)
        out(x, y, z) = v.trilinear(double(x) * ratio[0], double(y) * ratio[1], double(z) * ratio[2]);
  return out;
}

inline constexpr double kClipLowHu = -1200.0;
inline constexpr double kClipHighHu = 600.0;
inline constexpr double kWaterLuminance = 170.0;

inline double luminance_from_hu(double hu) {
  const double c = std::clamp(hu, kClipLowHu, kClipHighHu);
  return (c - kClipLowHu) * 255.0 / (kClipHighHu - kClipLowHu);
}

template <typename Scalar>
Volume<Scalar> clip_and_rescale(const Volume<Scalar>& v) {
  if (v.unit != Unit::Hounsfield) throw InvalidArgument("clip_and_rescale expects Hounsfield units");
  Volume<Scalar> out;
  out.grid = v.grid;
  out.unit = Unit::Luminance;
  out.data = v.data.unaryExpr([](Scalar hu) { return static_cast<Scalar>(luminance_from_hu(double(hu))); });
  return out;
}

}  // namespace lungcad

#endif  // LUNGCAD_VOLUME_HPP
