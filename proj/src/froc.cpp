#include "lungcad/froc.hpp"

#include <algorithm>
#include <set>

namespace lungcad {

std::vector<Cluster> cluster_predictions(const ProbabilityMap& pm, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidArgument("threshold must lie in [0, 1]");
  Mask above(pm.grid());
  for (Index i = 0; i < pm.prob.size(); ++i) above.bits[i] = double(pm.prob.data[i]) >= threshold;
  const LabeledComponents lc = connected_components(above, Connectivity::TwentySix);
  std::vector<Cluster> out(static_cast<std::size_t>(lc.count));
  for (Index i = 0; i < lc.labels.size(); ++i) {
    const std::int32_t l = lc.labels[i];
    if (l == 0) continue;
    Cluster& c = out[static_cast<std::size_t>(l - 1)];
    c.cells.push_back(i);
    c.peak = std::max(c.peak, double(pm.prob.data[i]));
  }
  const Grid& g = pm.grid();
  for (Cluster& c : out) {
    double sx = 0, sy = 0, sz = 0;
    for (Index i : c.cells) {
      const WorldPoint p = g.world(double(i % g.dims[0]), double((i / g.dims[0]) % g.dims[1]),
                                   double(i / (g.dims[0] * g.dims[1])));
      sx += p.x_mm;
      sy += p.y_mm;
      sz += p.z_mm;
    }
    const double n = double(c.cells.size());
    c.centroid = {sx / n, sy / n, sz / n};
  }
  return out;
}

bool counts_for_detection(const NoduleAnnotation& a) {
  return a.relevance == Relevance::Relevant && a.diameter_mm >= 3.0 && a.diameter_mm < 30.0;
}

bool cluster_overlaps(const ProbabilityMap& pm, const Cluster& c, const NoduleAnnotation& a) {
  for (Index i : c.cells) {
    const auto [lo, hi] = pm.cell_bounds(i);
    if (sphere_intersects_box(a.center, a.radius_mm(), Box{{lo.x_mm, lo.y_mm, lo.z_mm}, {hi.x_mm, hi.y_mm, hi.z_mm}}))
      return true;
  }
  return false;
}

MatchResult match_clusters(const ProbabilityMap& pm, const std::vector<Cluster>& clusters,
                           const std::vector<NoduleAnnotation>& annotations) {
  MatchResult r;
  std::vector<bool> detected(annotations.size(), false);
  for (const auto& a : annotations) r.relevant_nodules += counts_for_detection(a);
  for (const Cluster& c : clusters) {
    bool on_nodule = false, on_irrelevant = false;
    for (std::size_t k = 0; k < annotations.size(); ++k) {
      if (!cluster_overlaps(pm, c, annotations[k])) continue;
      if (counts_for_detection(annotations[k])) {
        detected[k] = true;
        on_nodule = true;
      } else {
        on_irrelevant = true;
      }
    }
    if (on_nodule) continue;
    if (on_irrelevant)
      ++r.ignored_clusters;
    else
      ++r.fp_clusters;
  }
  for (std::size_t k = 0; k < annotations.size(); ++k)
    if (detected[k]) r.detected.push_back(k);
  return r;
}

std::vector<double> default_thresholds(const std::vector<ProbabilityMap>& maps, std::size_t max_levels) {
  std::set<double> unique;
  for (const auto& m : maps)
    for (Index i = 0; i < m.prob.size(); ++i) unique.insert(double(m.prob.data[i]));
  std::vector<double> levels(unique.begin(), unique.end());
  std::set<double> chosen{0.0, 1.0};
  if (levels.size() <= max_levels || max_levels < 2) {
    chosen.insert(levels.begin(), levels.end());
  } else {
    for (std::size_t k = 0; k < max_levels; ++k)
      chosen.insert(levels[k * (levels.size() - 1) / (max_levels - 1)]);
  }
  std::vector<double> out(chosen.rbegin(), chosen.rend());
  return out;
}

FrocCurve froc_curve(const std::vector<ProbabilityMap>& maps,
                     const std::vector<std::vector<NoduleAnnotation>>& annotations,
                     const std::vector<double>& thresholds) {
  if (maps.empty()) throw InvalidArgument("froc_curve needs at least one scan");
  if (maps.size() != annotations.size()) throw InvalidArgument("one annotation list per scan is required");
  FrocCurve curve;
  curve.n_scans = Index(maps.size());
  for (const auto& list : annotations)
    for (const auto& a : list) curve.n_nodules += counts_for_detection(a);
  if (curve.n_nodules == 0) throw UndefinedSensitivity("no relevant nodules: sensitivity is undefined");

  std::vector<double> sorted = thresholds;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  struct Counts {
    Index detected = 0, fp = 0;
  };
  std::vector<std::vector<Counts>> per_scan(maps.size(), std::vector<Counts>(sorted.size()));
  parallel_for(Index(maps.size()), [&](Index s) {
    for (std::size_t t = 0; t < sorted.size(); ++t) {
      const auto clusters = cluster_predictions(maps[s], sorted[t]);
      const MatchResult m = match_clusters(maps[s], clusters, annotations[s]);
      Index det = 0;
      for (std::size_t k : m.detected) det += counts_for_detection(annotations[s][k]);
      per_scan[s][t] = {det, m.fp_clusters};
    }
  });
  double envelope = 0.0;
  for (std::size_t t = 0; t < sorted.size(); ++t) {
    Index det = 0, fp = 0;
    for (const auto& scan : per_scan) {
      det += scan[t].detected;
      fp += scan[t].fp;
    }
    FrocPoint p;
    p.threshold = sorted[t];
    p.sensitivity = double(det) / double(curve.n_nodules);
    p.raw_fp_per_scan = double(fp) / double(curve.n_scans);
    envelope = std::max(envelope, p.raw_fp_per_scan);
    p.fp_per_scan = envelope;
    curve.points.push_back(p);
  }
  return curve;
}

double sensitivity_at(const FrocCurve& curve, double fp_rate) {
  if (curve.points.empty()) throw InvalidArgument("sensitivity_at on an empty curve");
  if (!(fp_rate >= 0.0)) throw InvalidArgument("fp rate must be non-negative");
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (const auto& p : curve.points) pts.emplace_back(p.fp_per_scan, p.sensitivity);
  // fp is non-decreasing along pts, so the points with fp <= fp_rate form a prefix.
  std::size_t last = 0;
  while (last + 1 < pts.size() && pts[last + 1].first <= fp_rate) ++last;
  if (last + 1 == pts.size()) return pts.back().second;
  const std::size_t next = last + 1;
  const auto [x0, y0] = pts[last];
  const auto [x1, y1] = pts[next];
  return y0 + (y1 - y0) * (fp_rate - x0) / (x1 - x0);
}

double average_sensitivity(const FrocCurve& curve) {
  double sum = 0.0;
  for (double r : kFrocRates) sum += sensitivity_at(curve, r);
  return sum / double(kFrocRates.size());
}

}  // namespace lungcad
