#include "lungcad/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "lungcad/nvol.hpp"

namespace lungcad {

namespace {

double scheduled_lr(const TrainOptions& o, Index step) {
  if (!(o.lr_final_fraction >= 0.0 && o.lr_final_fraction <= 1.0))
    throw InvalidArgument("lr_final_fraction must be in [0, 1]");
  if (o.lr_final_fraction == 1.0 || o.steps < 2) return o.lr;
  const double t = double(step) / double(o.steps - 1);
  return o.lr * (o.lr_final_fraction + (1.0 - o.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

Tensor<float> positive_patch(const ScanData& s, const PatchRef& r, const PositiveOptions& po, Rng& rng) {
  const auto c = draw_positive_center(s.luminance.grid, r.nodule, po, rng);
  Tensor<float> p = crop_patch(s.luminance, c ? *c : r.center, po.patch_mm);
  return augment_flip(p, std::uniform_int_distribution<int>(0, 7)(rng));
}

Tensor<float> targets_tensor(const std::vector<float>& t) {
  Tensor<float> out({Index(t.size()), 1});
  for (std::size_t i = 0; i < t.size(); ++i) out[Index(i)] = t[i];
  return out;
}

Vec3 patch_mm_of(const Architecture& arch, const Grid& g) {
  return {double(arch.input[0]) * g.spacing_mm[0], double(arch.input[1]) * g.spacing_mm[1],
          double(arch.input[2]) * g.spacing_mm[2]};
}

}  // namespace

ScanData prepare_scan(const std::string& scan_id, const VolumeF& hu, const LungMaskParams& p) {
  ScanData s;
  s.scan_id = scan_id;
  const LungMasks m = extract_lung_mask(hu, p);
  s.luminance = apply_mask_normalize(clip_and_rescale(hu), m.lung, m.ring);
  s.lung = m.lung;
  return s;
}

DetectorPools build_detector_pools(const std::vector<ScanData>& scans, const Vec3& patch_mm,
                                   const NegativeOptions& neg_in, std::uint64_t seed) {
  DetectorPools pools;
  NegativeOptions neg = neg_in;
  neg.patch_mm = patch_mm;
  PositiveOptions po;
  po.patch_mm = patch_mm;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    const ScanData& s = scans[i];
    Rng rng(mix_seed(seed, hash_string(s.scan_id)));
    for (const auto& a : s.annotations) {
      if (!counts_for_detection(a)) continue;
      if (!draw_positive_center(s.luminance.grid, a, po, rng)) {
        pools.report.shortfall = true;
        pools.report.warnings.push_back("nodule of " + format_number(a.diameter_mm) + " mm in scan '" + s.scan_id +
                                        "' cannot fit inside the patch; skipped");
        continue;
      }
      pools.positives.push_back({i, a.center, Provenance::Positive, a});
    }
    for (const auto& [c, prov] :
         draw_negative_centers(s.luminance.grid, s.lung, s.candidates, s.annotations, rng, neg, &pools.report))
      pools.negatives.push_back({i, c, prov, {}});
  }
  return pools;
}

std::vector<WorldPoint> hard_negative_centers(const ProbabilityMap& pm, const std::vector<NoduleAnnotation>& annotations,
                                              double threshold, std::size_t max_per_scan) {
  std::vector<Cluster> fps;
  for (auto& c : cluster_predictions(pm, threshold)) {
    bool hit = false;
    for (const auto& a : annotations) hit = hit || cluster_overlaps(pm, c, a);
    if (!hit) fps.push_back(std::move(c));
  }
  std::stable_sort(fps.begin(), fps.end(), [](const Cluster& a, const Cluster& b) { return a.peak > b.peak; });
  std::vector<WorldPoint> out;
  for (std::size_t i = 0; i < fps.size() && i < max_per_scan; ++i) out.push_back(fps[i].centroid);
  return out;
}

std::vector<PatchSample> mine_hard_negatives(const ModelParams<float>& model, const ScanData& scan, ScaleTag scale,
                                             double threshold, std::size_t max_per_scan) {
  const ProbabilityMap pm = sliding_window_predict(model, scan.luminance, scan.lung, scale);
  std::vector<PatchSample> out;
  for (const auto& c : hard_negative_centers(pm, scan.annotations, threshold, max_per_scan))
    out.push_back({crop_patch(scan.luminance, c, scale_patch_mm(scale)), 0.0, Provenance::HardNegative, c});
  return out;
}

void train_detector(ModelParams<float>& model, const std::vector<ScanData>& scans, const DetectorPools& pools,
                    const TrainOptions& o) {
  if (model.arch.mode != ModelMode::Detector) throw ModeMismatch("train_detector needs a detector model");
  if (pools.positives.empty() || pools.negatives.empty())
    throw InvalidArgument("detector training needs positive and negative samples");
  if (scans.empty()) throw InvalidArgument("no training scans");
  const Vec3 patch_mm = patch_mm_of(model.arch, scans.front().luminance.grid);
  PositiveOptions po;
  po.patch_mm = patch_mm;

  BalancedBatcher batcher(pools.positives.size(), pools.negatives.size(), o.batch_size, mix_seed(o.seed, 1));
  Rng aug(mix_seed(o.seed, 2));
  Rng dropout(mix_seed(o.seed, 3));
  AdamState<float> adam = make_adam(model, o.lr);
  for (Index step = 0; step < o.steps; ++step) {
    const auto b = batcher.next();
    std::vector<Tensor<float>> patches;
    std::vector<float> targets;
    for (std::size_t i : b.positives) {
      const PatchRef& r = pools.positives[i];
      patches.push_back(positive_patch(scans[r.scan], r, po, aug));
      targets.push_back(1.0f);
    }
    for (std::size_t i : b.negatives) {
      const PatchRef& r = pools.negatives[i];
      patches.push_back(augment_flip(crop_patch(scans[r.scan].luminance, r.center, patch_mm),
                                     std::uniform_int_distribution<int>(0, 7)(aug)));
      targets.push_back(0.0f);
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& p : patches) ptrs.push_back(&p);
    const auto g = loss_and_gradients(model, stack_standardized(ptrs), targets_tensor(targets),
                                      LossKind::BinaryCrossEntropy, dropout);
    adam.lr = scheduled_lr(o, step);
    adam_step(model, g, adam);
    if (o.on_step) o.on_step(step, g.loss);
  }
}

std::vector<PatchRef> regression_refs(const std::vector<ScanData>& scans, const std::vector<std::size_t>& scan_subset) {
  std::vector<PatchRef> out;
  for (std::size_t i : scan_subset)
    for (const auto& a : scans.at(i).annotations)
      if (a.relevance == Relevance::Relevant && a.malignancy) out.push_back({i, a.center, Provenance::Positive, a});
  return out;
}

void train_regressor(ModelParams<float>& model, const std::vector<ScanData>& scans, const std::vector<PatchRef>& refs,
                     const TrainOptions& o, const RegressionOptions& aug_opts) {
  if (model.arch.mode != ModelMode::Regressor) throw ModeMismatch("train_regressor needs a regressor model");
  if (refs.empty()) throw InvalidArgument("regressor training needs at least one nodule");
  const Vec3 patch_mm = patch_mm_of(model.arch, scans.front().luminance.grid);

  Rng order_rng(mix_seed(o.seed, 1));
  Rng aug(mix_seed(o.seed, 2));
  Rng dropout(mix_seed(o.seed, 3));
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::size_t cursor = order.size();
  AdamState<float> adam = make_adam(model, o.lr);
  const Index batch = std::min<Index>(o.batch_size, Index(refs.size()));
  for (Index step = 0; step < o.steps; ++step) {
    std::vector<Tensor<float>> patches;
    std::vector<float> targets;
    for (Index k = 0; k < batch; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const PatchRef& r = refs[order[cursor++]];
      Tensor<float> p = crop_patch(scans[r.scan].luminance, r.center, patch_mm);
      if (aug_opts.flips) p = augment_flip(p, std::uniform_int_distribution<int>(0, 7)(aug));
      const double rot =
          std::uniform_real_distribution<double>(-aug_opts.max_rotation_deg, aug_opts.max_rotation_deg)(aug);
      const double sc = std::uniform_real_distribution<double>(aug_opts.scale_min, aug_opts.scale_max)(aug);
      if (aug_opts.max_rotation_deg > 0 || aug_opts.scale_min != 1.0 || aug_opts.scale_max != 1.0)
        p = augment_affine(p, rot, sc);
      patches.push_back(std::move(p));
      targets.push_back(float(*r.nodule.malignancy));
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& p : patches) ptrs.push_back(&p);
    const auto g = loss_and_gradients(model, stack_standardized(ptrs), targets_tensor(targets),
                                      LossKind::SquaredError, dropout);
    adam.lr = scheduled_lr(o, step);
    adam_step(model, g, adam);
    if (o.on_step) o.on_step(step, g.loss);
  }
}

std::vector<double> predict_patches(const ModelParams<float>& model, const std::vector<ScanData>& scans,
                                    const std::vector<PatchRef>& refs, Index batch_size) {
  std::vector<double> out;
  if (refs.empty()) return out;
  const Vec3 patch_mm = patch_mm_of(model.arch, scans.at(refs.front().scan).luminance.grid);
  Rng unused(0);
  for (std::size_t start = 0; start < refs.size(); start += std::size_t(batch_size)) {
    const std::size_t end = std::min(refs.size(), start + std::size_t(batch_size));
    std::vector<Tensor<float>> patches;
    for (std::size_t i = start; i < end; ++i)
      patches.push_back(crop_patch(scans[refs[i].scan].luminance, refs[i].center, patch_mm));
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& p : patches) ptrs.push_back(&p);
    const Tensor<float> y = model_forward(model, stack_standardized(ptrs), Mode::Infer, unused);
    for (Index k = 0; k < y.size(); ++k) out.push_back(double(y[k]));
  }
  return out;
}

}  // namespace lungcad
