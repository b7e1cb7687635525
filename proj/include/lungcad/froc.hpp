#ifndef LUNGCAD_FROC_HPP
#define LUNGCAD_FROC_HPP

#include <array>
#include <vector>

#include "lungcad/detection.hpp"
#include "lungcad/sampling.hpp"

namespace lungcad {

struct Cluster {
  std::vector<Index> cells;  // linear cell indices, ascending
  double peak = 0.0;
  WorldPoint centroid;       // mean of the cell centers
};

/// Cells with prob >= threshold grouped by 26-connectivity, in label order.
std::vector<Cluster> cluster_predictions(const ProbabilityMap& pm, double threshold);

/// Nodules that count for sensitivity: relevant and 3 mm <= diameter < 30 mm.
/// Everything else annotated is an irrelevant finding.
bool counts_for_detection(const NoduleAnnotation& a);

bool cluster_overlaps(const ProbabilityMap& pm, const Cluster& c, const NoduleAnnotation& a);

struct MatchResult {
  std::vector<std::size_t> detected;  // indices into the annotation list
  Index fp_clusters = 0;
  Index ignored_clusters = 0;
  Index relevant_nodules = 0;
};

MatchResult match_clusters(const ProbabilityMap& pm, const std::vector<Cluster>& clusters,
                           const std::vector<NoduleAnnotation>& annotations);

struct FrocPoint {
  double threshold = 0.0;
  double fp_per_scan = 0.0;   // running maximum over higher thresholds
  double sensitivity = 0.0;
  double raw_fp_per_scan = 0.0;  // before the monotone envelope
};

struct FrocCurve {
  std::vector<FrocPoint> points;  // threshold descending
  Index n_scans = 0;
  Index n_nodules = 0;
};

inline constexpr std::array<double, 7> kFrocRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

/// Unique cell probabilities (at most max_levels evenly indexed quantiles)
/// plus 0 and 1, descending.
std::vector<double> default_thresholds(const std::vector<ProbabilityMap>& maps, std::size_t max_levels = 512);

FrocCurve froc_curve(const std::vector<ProbabilityMap>& maps,
                     const std::vector<std::vector<NoduleAnnotation>>& annotations,
                     const std::vector<double>& thresholds);

/// Linear interpolation of sensitivity against FP/scan; (0,0) anchors the low
/// end and the last point's sensitivity holds beyond the curve.
double sensitivity_at(const FrocCurve& curve, double fp_rate);
double average_sensitivity(const FrocCurve& curve);

}  // namespace lungcad

#endif  // LUNGCAD_FROC_HPP
