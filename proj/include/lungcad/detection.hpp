#ifndef LUNGCAD_DETECTION_HPP
#define LUNGCAD_DETECTION_HPP

#include <filesystem>
#include <vector>

#include "lungcad/network.hpp"
#include "lungcad/segmentation.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

enum class ScaleTag { Small32, Large64, Fused };

std::string to_string(ScaleTag s);
ScaleTag scale_tag_from_string(const std::string& s);

/// Physical patch size of a detection scale (32 mm or 64 mm cube).
Vec3 scale_patch_mm(ScaleTag s);

/// Coarse per-cell probabilities. prob.grid has spacing cell_mm on every axis
/// and its origin at the center of cell (0,0,0).
struct ProbabilityMap {
  VolumeF prob;
  double cell_mm = 8.0;
  ScaleTag scale_tag = ScaleTag::Small32;

  const Grid& grid() const { return prob.grid; }
  /// World-space box of one cell.
  std::pair<WorldPoint, WorldPoint> cell_bounds(Index linear) const;
};

/// Cell grid tiling the volume extent: ceil(extent / cell) cells per axis,
/// starting at the lower voxel edge.
Grid cell_grid(const Grid& volume, double cell_mm);

struct SlidingWindowOptions {
  double cell_mm = 8.0;
  Index batch_size = 32;
};

/// One patch per cell whose center falls inside the lung mask, classified by
/// the detector in Infer mode; all other cells are 0. Batching only affects
/// throughput: every patch is evaluated independently.
ProbabilityMap sliding_window_predict(const ModelParams<float>& model, const VolumeF& luminance, const Mask& lung,
                                      ScaleTag scale, const SlidingWindowOptions& o = {});

/// Element-wise mean of maps sharing one geometry.
ProbabilityMap fuse_scales(const std::vector<ProbabilityMap>& maps);

void write_probability_map(const std::filesystem::path& base, const ProbabilityMap& pm);
ProbabilityMap read_probability_map(const std::filesystem::path& base);

}  // namespace lungcad

#endif  // LUNGCAD_DETECTION_HPP
