#ifndef LUNGCAD_SEGMENTATION_HPP
#define LUNGCAD_SEGMENTATION_HPP

#include <vector>

#include <Eigen/Core>

#include "lungcad/volume.hpp"

namespace lungcad {

struct Mask {
  using Bits = Eigen::Array<bool, Eigen::Dynamic, 1>;

  Grid grid;
  Bits bits;

  Mask() = default;
  explicit Mask(const Grid& g, bool fill = false) : grid(g), bits(Bits::Constant(g.size(), fill)) {}

  Index size() const { return grid.size(); }
  Index count() const { return bits.count(); }
  bool operator()(Index x, Index y, Index z) const { return bits[grid.index(x, y, z)]; }
  bool& operator()(Index x, Index y, Index z) { return bits[grid.index(x, y, z)]; }
  bool operator==(const Mask& o) const {
    return grid.same_geometry(o.grid) && (bits == o.bits).all();
  }
};

enum class Connectivity { Six = 6, TwentySix = 26 };

struct LabeledComponents {
  Grid grid;
  Eigen::Array<std::int32_t, Eigen::Dynamic, 1> labels;  // 0 = background
  std::int32_t count = 0;
  std::vector<Index> sizes;  // sizes[label - 1]
};

template <typename Scalar>
Mask binarize(const Volume<Scalar>& v, double threshold_hu) {
  if (v.unit != Unit::Hounsfield) throw InvalidArgument("binarize expects Hounsfield units");
  Mask m(v.grid);
  m.bits = v.data.template cast<double>() > threshold_hu;
  return m;
}

/// Per-axis structuring-element radii in voxels for a physical radius.
Dims3 voxel_radii(const Grid& g, double radius_mm);

/// Ellipsoidal structuring element with the given per-axis voxel radii. Out
/// of volume neighbours are ignored by both dilation and erosion.
Mask dilate_voxels(const Mask& m, const Dims3& radii);
Mask erode_voxels(const Mask& m, const Dims3& radii);

Mask morphological_dilate(const Mask& m, double radius_mm);
Mask morphological_erode(const Mask& m, double radius_mm);
Mask morphological_close(const Mask& m, double radius_mm);

LabeledComponents connected_components(const Mask& m, Connectivity c);

/// Largest component; ties go to the smaller label.
Mask largest_component(const LabeledComponents& lc);

/// Voxels of m connected (within m) to any of the given seed voxels.
Mask connected_to(const Mask& m, const std::vector<Index>& seeds, Connectivity c);

struct LungMasks {
  Mask lung;  // dilated lung mask
  Mask ring;  // dilated minus undilated
};

struct LungMaskParams {
  double close_radius_mm = 3.0;
  double threshold_hu = -320.0;
  double dilate_radius_mm = 10.0;
};

template <typename Scalar>
LungMasks extract_lung_mask(const Volume<Scalar>& v, const LungMaskParams& p = {});

template <typename Scalar>
Volume<Scalar> apply_mask_normalize(const Volume<Scalar>& v, const Mask& lung, const Mask& ring);

inline constexpr double kRingBoneLuminance = 210.0;

}  // namespace lungcad

#endif  // LUNGCAD_SEGMENTATION_HPP
