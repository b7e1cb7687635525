#ifndef LUNGCAD_TRAINING_HPP
#define LUNGCAD_TRAINING_HPP

#include <functional>
#include <string>
#include <vector>

#include "lungcad/detection.hpp"
#include "lungcad/froc.hpp"
#include "lungcad/sampling.hpp"

namespace lungcad {

/// A preprocessed scan held in memory for sampling.
struct ScanData {
  std::string scan_id;
  VolumeF luminance;  // masked and normalized
  Mask lung;
  std::vector<NoduleAnnotation> annotations;  // relevant and irrelevant
  std::vector<WorldPoint> candidates;
};

/// HU volume -> luminance with everything outside the lungs replaced, plus the
/// lung mask used to select sliding-window cells.
ScanData prepare_scan(const std::string& scan_id, const VolumeF& hu, const LungMaskParams& p = {});

struct TrainOptions {
  Index steps = 1000;
  Index batch_size = 40;
  double lr = 1e-4;
  // Cosine decay from lr to lr * lr_final_fraction over the run; 1 keeps it constant.
  double lr_final_fraction = 1.0;
  std::uint64_t seed = 0;
  std::function<void(Index step, double loss)> on_step;
};

/// Patch location in one of the training scans. Positives are re-cropped at
/// every draw with a fresh shift and flip; negatives get a fresh flip.
struct PatchRef {
  std::size_t scan = 0;
  WorldPoint center;
  Provenance provenance = Provenance::Positive;
  NoduleAnnotation nodule;  // positives only
};

struct DetectorPools {
  std::vector<PatchRef> positives, negatives;
  SamplingReport report;
};

/// Positives for every nodule that counts for detection and fits the patch;
/// random and candidate negatives per scan with seeds derived per scan.
DetectorPools build_detector_pools(const std::vector<ScanData>& scans, const Vec3& patch_mm,
                                   const NegativeOptions& neg, std::uint64_t seed);

/// Cluster the map at threshold, drop clusters overlapping any annotation,
/// rank the rest by peak probability (ties keep label order) and return at
/// most max_per_scan centroids.
std::vector<WorldPoint> hard_negative_centers(const ProbabilityMap& pm, const std::vector<NoduleAnnotation>& annotations,
                                              double threshold = 0.5, std::size_t max_per_scan = 10);

/// Sliding-window prediction of the detector on one scan followed by
/// hard_negative_centers; patches are cropped at the returned centroids.
std::vector<PatchSample> mine_hard_negatives(const ModelParams<float>& model, const ScanData& scan, ScaleTag scale,
                                             double threshold = 0.5, std::size_t max_per_scan = 10);

/// Adam on balanced batches with binary cross-entropy.
void train_detector(ModelParams<float>& model, const std::vector<ScanData>& scans, const DetectorPools& pools,
                    const TrainOptions& o);

struct RegressionOptions {
  bool flips = true;
  double max_rotation_deg = 180.0;
  double scale_min = 0.8, scale_max = 1.2;
};

/// Centered crops of nodules carrying a malignancy score.
std::vector<PatchRef> regression_refs(const std::vector<ScanData>& scans, const std::vector<std::size_t>& scan_subset);

/// Adam on shuffled epochs of centered crops with squared error; every draw
/// applies a random flip, rotation about z and isotropic scaling.
void train_regressor(ModelParams<float>& model, const std::vector<ScanData>& scans, const std::vector<PatchRef>& refs,
                     const TrainOptions& o, const RegressionOptions& aug = {});

/// Infer-mode outputs for centered crops, in refs order.
std::vector<double> predict_patches(const ModelParams<float>& model, const std::vector<ScanData>& scans,
                                    const std::vector<PatchRef>& refs, Index batch_size = 32);

}  // namespace lungcad

#endif  // LUNGCAD_TRAINING_HPP
