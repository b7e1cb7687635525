#ifndef LUNGCAD_PHANTOM_HPP
#define LUNGCAD_PHANTOM_HPP

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lungcad/sampling.hpp"

namespace lungcad {

enum class NoduleShape { Smooth, CalcifiedCore, Spiculated };

std::string to_string(NoduleShape s);
NoduleShape nodule_shape_from_string(const std::string& s);

/// Nodule generator of one diagnosis class.
struct NoduleProfile {
  NoduleLabel label = NoduleLabel::Unlabeled;
  int count_min = 1, count_max = 3;
  double diameter_min_mm = 4.0, diameter_max_mm = 14.0;
  double mean_hu = 30.0;
  double texture_hu = 15.0;
  std::array<double, 3> shape_weights{1.0, 1.0, 1.0};  // smooth, calcified core, spiculated
  double iodine_hu = 20.0;  // part of the conventional value carried by contrast uptake
};

/// Geometric chest phantom. Anatomy is laid out as fractions of the physical
/// extent so any volume size yields the same picture.
struct PhantomSpec {
  Dims3 dims{128, 128, 64};
  Vec3 spacing_mm{1.0, 1.0, 2.0};

  // Elliptic body cylinder (x, y semi-axes) and the two lung ellipsoids,
  // centred at +-lung_offset_frac of the x extent.
  std::array<double, 2> body_semi_frac{0.46, 0.38};
  double lung_offset_frac = 0.22;
  Vec3 lung_semi_frac{0.17, 0.28, 0.42};

  double air_hu = -1000.0;
  double body_hu = 40.0;
  double lung_hu = -850.0;
  double vessel_hu = 30.0;
  double bone_hu = 700.0;
  double noise_sigma_hu = 15.0;

  int vessel_junctions = 16;
  double vessel_radius_min_mm = 0.7, vessel_radius_max_mm = 1.3;
  int irrelevant_min = 0, irrelevant_max = 2;
  double irrelevant_diameter_mm = 2.0;
  double calcium_hu = 450.0;

  // View multipliers of each material's conventional contribution.
  double iodine_low_kev = 2.2, iodine_high_kev = 0.45;
  double calcium_low_kev = 1.6, calcium_high_kev = 0.75;
  bool spectral = false;

  // Stored raw value = (HU - intercept) / slope.
  double rescale_slope = 1.0, rescale_intercept = -1024.0;

  std::vector<NoduleProfile> profiles;
  std::uint64_t seed = 0;

  const NoduleProfile& profile(NoduleLabel l) const;
  Grid grid() const;

  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);

  /// LIDC-like corpus: 1-3 mixed-shape nodules per scan, no diagnosis.
  static PhantomSpec detection_default();
  /// Spectral corpus with the five diagnosis classes (nodule counts and sizes
  /// follow the reference dataset's per-class means).
  static PhantomSpec spectral_default();
};

struct PhantomScan {
  std::string scan_id;
  NoduleLabel diagnosis = NoduleLabel::Unlabeled;
  VolumeF conventional;  // Hounsfield
  VolumeF low_kev, high_kev;  // empty unless spec.spectral
  Mask lung_truth;  // lungs and airways
  std::vector<NoduleAnnotation> annotations;  // relevant nodules
  std::vector<NoduleShape> shapes;  // aligned with annotations
  std::vector<NoduleAnnotation> irrelevant;  // sub-3 mm findings
  std::vector<WorldPoint> candidates;  // vessel junctions and branch ends
};

PhantomScan generate_scan(const PhantomSpec& spec, NoduleLabel diagnosis, std::uint64_t scan_seed,
                          const std::string& scan_id = "scan");

/// Noise-free malignancy of a nodule: 1 + shape bonus (calcified 0, smooth
/// 0.5, spiculated 2) + 0.1 per mm above 4 mm.
double malignancy_base(NoduleShape shape, double diameter_mm);
/// malignancy_base plus uniform jitter in [-0.3, 0.3], clamped to [1, 5].
double malignancy_truth(NoduleShape shape, double diameter_mm, Rng& rng);

using ClassMix = std::vector<std::pair<NoduleLabel, int>>;

/// Writes scans/<id>/<view> NVOL files (raw detector values), lung_truth masks,
/// annotations.csv, candidates.csv and manifest.json under out_dir; returns
/// the manifest. Scan order is a seeded shuffle of the class mix.
nlohmann::json generate_corpus(const PhantomSpec& spec, const ClassMix& mix, std::uint64_t seed,
                               const std::filesystem::path& out_dir);

}  // namespace lungcad

#endif  // LUNGCAD_PHANTOM_HPP
