#include "lungcad/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "lungcad/nvol.hpp"

namespace lungcad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kGeneratorVersion = 1;
constexpr int kPlacementAttempts = 5000;

struct P3 {
  double x, y, z;
};

P3 operator+(P3 a, P3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
P3 operator-(P3 a, P3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
P3 operator*(double s, P3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(P3 a, P3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
double norm(P3 a) { return std::sqrt(dot(a, a)); }

struct Ellipsoid {
  P3 c, semi;

  // Inside the ellipsoid shrunk by margin along every axis.
  bool contains(P3 p, double margin = 0.0) const {
    const double ax = semi.x - margin, ay = semi.y - margin, az = semi.z - margin;
    if (ax <= 0 || ay <= 0 || az <= 0) return false;
    const P3 d = p - c;
    return (d.x * d.x) / (ax * ax) + (d.y * d.y) / (ay * ay) + (d.z * d.z) / (az * az) <= 1.0;
  }
};

struct Segment {
  P3 a, b;
  double radius;
};

double segment_distance(P3 p, const Segment& s) {
  const P3 ab = s.b - s.a;
  const double len2 = dot(ab, ab);
  const double t = len2 > 0 ? std::clamp(dot(p - s.a, ab) / len2, 0.0, 1.0) : 0.0;
  return norm(p - (s.a + t * ab));
}

// Partial-volume weight of a voxel center at distance d from a surface of
// radius r: a 1 mm linear ramp centred on the surface.
double edge_weight(double d, double r) { return std::clamp(r - d + 0.5, 0.0, 1.0); }

P3 random_direction(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    const P3 v{n(rng), n(rng), n(rng)};
    const double l = norm(v);
    if (l > 1e-6) return (1.0 / l) * v;
  }
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

class Canvas {
 public:
  explicit Canvas(const Grid& g) : g_(g) {}

  P3 center(Index x, Index y, Index z) const {
    const WorldPoint w = g_.world(double(x), double(y), double(z));
    return {w.x_mm, w.y_mm, w.z_mm};
  }

  // Visits voxels whose centers lie in the world box [lo, hi].
  template <typename Fn>
  void for_box(P3 lo, P3 hi, Fn&& fn) const {
    const double l[3] = {lo.x, lo.y, lo.z}, h[3] = {hi.x, hi.y, hi.z};
    Index a[3], b[3];
    for (int k = 0; k < 3; ++k) {
      a[k] = std::max<Index>(0, Index(std::ceil((l[k] - g_.origin_mm[k]) / g_.spacing_mm[k])));
      b[k] = std::min<Index>(g_.dims[k] - 1, Index(std::floor((h[k] - g_.origin_mm[k]) / g_.spacing_mm[k])));
    }
    for (Index z = a[2]; z <= b[2]; ++z)
      for (Index y = a[1]; y <= b[1]; ++y)
        for (Index x = a[0]; x <= b[0]; ++x) fn(g_.index(x, y, z), center(x, y, z));
  }

  template <typename Fn>
  void for_sphere(P3 c, double r, Fn&& fn) const {
    const double m = r + 1.0;
    for_box(c - P3{m, m, m}, c + P3{m, m, m}, [&](Index i, P3 p) {
      const double w = edge_weight(norm(p - c), r);
      if (w > 0) fn(i, p, w);
    });
  }

  template <typename Fn>
  void for_capsule(const Segment& s, Fn&& fn) const {
    const double m = s.radius + 1.0;
    const P3 lo{std::min(s.a.x, s.b.x) - m, std::min(s.a.y, s.b.y) - m, std::min(s.a.z, s.b.z) - m};
    const P3 hi{std::max(s.a.x, s.b.x) + m, std::max(s.a.y, s.b.y) + m, std::max(s.a.z, s.b.z) + m};
    for_box(lo, hi, [&](Index i, P3 p) {
      const double w = edge_weight(segment_distance(p, s), s.radius);
      if (w > 0) fn(i, p, w);
    });
  }

 private:
  Grid g_;
};

struct Anatomy {
  P3 extent;
  Ellipsoid lungs[2];
  std::vector<Segment> airways;
  double body_ax = 0, body_ay = 0;
  P3 body_c{};
  P3 spine_c{};
  double spine_r = 0;

  bool in_lung(P3 p, double margin = 0.0) const { return lungs[0].contains(p, margin) || lungs[1].contains(p, margin); }
  double airway_clearance(P3 p) const {
    double best = 1e300;
    for (const auto& s : airways) best = std::min(best, segment_distance(p, s) - s.radius);
    return best;
  }
};

Anatomy layout(const PhantomSpec& s) {
  Anatomy a;
  const Grid g = s.grid();
  a.extent = {double(g.dims[0]) * g.spacing_mm[0], double(g.dims[1]) * g.spacing_mm[1],
              double(g.dims[2]) * g.spacing_mm[2]};
  const P3 E = a.extent;
  const P3 c{0.5 * E.x, 0.5 * E.y, 0.5 * E.z};
  a.body_c = c;
  a.body_ax = s.body_semi_frac[0] * E.x;
  a.body_ay = s.body_semi_frac[1] * E.y;
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    a.lungs[side].c = {c.x + sign * s.lung_offset_frac * E.x, c.y, c.z};
    a.lungs[side].semi = {s.lung_semi_frac[0] * E.x, s.lung_semi_frac[1] * E.y, s.lung_semi_frac[2] * E.z};
  }
  // Airways join the lungs into one air space: trachea down to a carina, then
  // a bronchus into each lung. Radii stay wide enough to survive closing.
  const double tr = std::max(0.05 * E.x, 4.5), br = std::max(0.035 * E.x, 4.0);
  const P3 carina{c.x, c.y, c.z + 0.2 * E.z};
  a.airways.push_back({{c.x, c.y, E.z + tr}, carina, tr});
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    a.airways.push_back({carina, {c.x + sign * 0.85 * s.lung_offset_frac * E.x, c.y, c.z + 0.12 * E.z}, br});
  }
  a.spine_c = {c.x, c.y + 0.3 * E.y, c.z};
  a.spine_r = 0.07 * E.x;
  return a;
}

// Sum of a few random plane waves, unit amplitude.
struct Texture {
  P3 k[3];
  double phase[3];

  explicit Texture(Rng& rng) {
    for (int i = 0; i < 3; ++i) {
      k[i] = uniform(rng, 0.3, 0.8) * random_direction(rng);
      phase[i] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
  }
  double operator()(P3 p) const {
    double v = 0.0;
    for (int i = 0; i < 3; ++i) v += std::cos(dot(k[i], p) + phase[i]);
    return v / 3.0;
  }
};

NoduleShape draw_shape(const NoduleProfile& p, Rng& rng) {
  std::discrete_distribution<int> d(p.shape_weights.begin(), p.shape_weights.end());
  return NoduleShape(d(rng));
}

json profile_to_json(const NoduleProfile& p) {
  return {{"label", to_string(p.label)},
          {"count", {p.count_min, p.count_max}},
          {"diameter_mm", {p.diameter_min_mm, p.diameter_max_mm}},
          {"mean_hu", p.mean_hu},
          {"texture_hu", p.texture_hu},
          {"shape_weights", p.shape_weights},
          {"iodine_hu", p.iodine_hu}};
}

NoduleProfile profile_from_json(const json& j) {
  NoduleProfile p;
  p.label = nodule_label_from_string(j.at("label").get<std::string>());
  p.count_min = j.at("count").at(0).get<int>();
  p.count_max = j.at("count").at(1).get<int>();
  p.diameter_min_mm = j.at("diameter_mm").at(0).get<double>();
  p.diameter_max_mm = j.at("diameter_mm").at(1).get<double>();
  p.mean_hu = j.value("mean_hu", p.mean_hu);
  p.texture_hu = j.value("texture_hu", p.texture_hu);
  if (j.contains("shape_weights")) p.shape_weights = j.at("shape_weights").get<std::array<double, 3>>();
  p.iodine_hu = j.value("iodine_hu", p.iodine_hu);
  return p;
}

void validate(const PhantomSpec& s) {
  s.grid().validate();
  if (s.profiles.empty()) throw InvalidArgument("phantom spec has no nodule profiles");
  for (const auto& p : s.profiles) {
    if (p.count_min < 1 || p.count_max < p.count_min) throw InvalidArgument("nodule count range must be positive");
    if (p.diameter_min_mm < 3.0 || p.diameter_max_mm < p.diameter_min_mm)
      throw InvalidArgument("relevant nodule diameters must be at least 3 mm");
    double wsum = 0.0;
    for (double w : p.shape_weights) {
      if (w < 0) throw InvalidArgument("shape weights must be non-negative");
      wsum += w;
    }
    if (wsum <= 0) throw InvalidArgument("shape weights must not all be zero");
  }
  if (s.noise_sigma_hu < 0) throw InvalidArgument("noise sigma must be non-negative");
  if (s.irrelevant_min < 0 || s.irrelevant_max < s.irrelevant_min) throw InvalidArgument("bad irrelevant range");
  if (s.vessel_junctions < 0) throw InvalidArgument("vessel count must be non-negative");
  if (s.rescale_slope == 0) throw InvalidArgument("rescale slope must be non-zero");
}

VolumeF to_raw(const VolumeF& hu, double slope, double intercept) {
  VolumeF raw = hu;
  raw.unit = Unit::RawDetector;
  raw.data = ((hu.data.cast<double>() - intercept) / slope).cast<float>();
  return raw;
}

}  // namespace

std::string to_string(NoduleShape s) {
  switch (s) {
    case NoduleShape::Smooth: return "smooth";
    case NoduleShape::CalcifiedCore: return "calcified";
    case NoduleShape::Spiculated: return "spiculated";
  }
  return "smooth";
}

NoduleShape nodule_shape_from_string(const std::string& s) {
  if (s == "smooth") return NoduleShape::Smooth;
  if (s == "calcified") return NoduleShape::CalcifiedCore;
  if (s == "spiculated") return NoduleShape::Spiculated;
  throw InvalidArgument("unknown nodule shape '" + s + "'");
}

double malignancy_base(NoduleShape shape, double diameter_mm) {
  const double bonus = shape == NoduleShape::Spiculated ? 2.0 : shape == NoduleShape::Smooth ? 0.5 : 0.0;
  return 1.0 + bonus + 0.1 * (diameter_mm - 4.0);
}

double malignancy_truth(NoduleShape shape, double diameter_mm, Rng& rng) {
  return std::clamp(malignancy_base(shape, diameter_mm) + uniform(rng, -0.3, 0.3), 1.0, 5.0);
}

const NoduleProfile& PhantomSpec::profile(NoduleLabel l) const {
  for (const auto& p : profiles)
    if (p.label == l) return p;
  throw InvalidArgument("phantom spec has no profile for label '" + to_string(l) + "'");
}

Grid PhantomSpec::grid() const {
  Grid g;
  g.dims = dims;
  g.spacing_mm = spacing_mm;
  return g;
}

json PhantomSpec::to_json() const {
  json profs = json::array();
  for (const auto& p : profiles) profs.push_back(profile_to_json(p));
  return {{"dims", dims},
          {"spacing_mm", spacing_mm},
          {"body_semi_frac", body_semi_frac},
          {"lung_offset_frac", lung_offset_frac},
          {"lung_semi_frac", lung_semi_frac},
          {"air_hu", air_hu},
          {"body_hu", body_hu},
          {"lung_hu", lung_hu},
          {"vessel_hu", vessel_hu},
          {"bone_hu", bone_hu},
          {"noise_sigma_hu", noise_sigma_hu},
          {"vessel_junctions", vessel_junctions},
          {"vessel_radius_mm", {vessel_radius_min_mm, vessel_radius_max_mm}},
          {"irrelevant_count", {irrelevant_min, irrelevant_max}},
          {"irrelevant_diameter_mm", irrelevant_diameter_mm},
          {"calcium_hu", calcium_hu},
          {"iodine_kev", {iodine_low_kev, iodine_high_kev}},
          {"calcium_kev", {calcium_low_kev, calcium_high_kev}},
          {"spectral", spectral},
          {"rescale_slope", rescale_slope},
          {"rescale_intercept", rescale_intercept},
          {"profiles", profs},
          {"seed", seed}};
}

PhantomSpec PhantomSpec::from_json(const json& j) {
  PhantomSpec s;
  auto pair = [&](const char* key, double& a, double& b) {
    if (j.contains(key)) {
      a = j.at(key).at(0).get<double>();
      b = j.at(key).at(1).get<double>();
    }
  };
  if (j.contains("dims")) s.dims = j.at("dims").get<Dims3>();
  if (j.contains("spacing_mm")) s.spacing_mm = j.at("spacing_mm").get<Vec3>();
  if (j.contains("body_semi_frac")) s.body_semi_frac = j.at("body_semi_frac").get<std::array<double, 2>>();
  s.lung_offset_frac = j.value("lung_offset_frac", s.lung_offset_frac);
  if (j.contains("lung_semi_frac")) s.lung_semi_frac = j.at("lung_semi_frac").get<Vec3>();
  s.air_hu = j.value("air_hu", s.air_hu);
  s.body_hu = j.value("body_hu", s.body_hu);
  s.lung_hu = j.value("lung_hu", s.lung_hu);
  s.vessel_hu = j.value("vessel_hu", s.vessel_hu);
  s.bone_hu = j.value("bone_hu", s.bone_hu);
  s.noise_sigma_hu = j.value("noise_sigma_hu", s.noise_sigma_hu);
  s.vessel_junctions = j.value("vessel_junctions", s.vessel_junctions);
  pair("vessel_radius_mm", s.vessel_radius_min_mm, s.vessel_radius_max_mm);
  if (j.contains("irrelevant_count")) {
    s.irrelevant_min = j.at("irrelevant_count").at(0).get<int>();
    s.irrelevant_max = j.at("irrelevant_count").at(1).get<int>();
  }
  s.irrelevant_diameter_mm = j.value("irrelevant_diameter_mm", s.irrelevant_diameter_mm);
  s.calcium_hu = j.value("calcium_hu", s.calcium_hu);
  pair("iodine_kev", s.iodine_low_kev, s.iodine_high_kev);
  pair("calcium_kev", s.calcium_low_kev, s.calcium_high_kev);
  s.spectral = j.value("spectral", s.spectral);
  s.rescale_slope = j.value("rescale_slope", s.rescale_slope);
  s.rescale_intercept = j.value("rescale_intercept", s.rescale_intercept);
  if (j.contains("profiles")) {
    s.profiles.clear();
    for (const auto& p : j.at("profiles")) s.profiles.push_back(profile_from_json(p));
  }
  s.seed = j.value("seed", s.seed);
  return s;
}

PhantomSpec PhantomSpec::detection_default() {
  PhantomSpec s;
  NoduleProfile p;
  p.label = NoduleLabel::Unlabeled;
  p.count_min = 1;
  p.count_max = 3;
  p.diameter_min_mm = 4.0;
  p.diameter_max_mm = 14.0;
  p.mean_hu = 30.0;
  p.texture_hu = 20.0;
  p.shape_weights = {0.4, 0.3, 0.3};
  p.iodine_hu = 30.0;
  s.profiles = {p};
  return s;
}

PhantomSpec PhantomSpec::spectral_default() {
  PhantomSpec s;
  s.spectral = true;
  s.irrelevant_max = 1;
  auto make = [](NoduleLabel l, int lo, int hi, double dlo, double dhi, double hu, std::array<double, 3> w,
                 double iodine) {
    NoduleProfile p;
    p.label = l;
    p.count_min = lo;
    p.count_max = hi;
    p.diameter_min_mm = dlo;
    p.diameter_max_mm = dhi;
    p.mean_hu = hu;
    p.texture_hu = 15.0;
    p.shape_weights = w;
    p.iodine_hu = iodine;
    return p;
  };
  s.profiles = {
      make(NoduleLabel::BenignMultinodular, 8, 14, 3.5, 8.0, 30.0, {0.2, 0.8, 0.0}, 10.0),
      make(NoduleLabel::Benign, 1, 3, 3.5, 6.0, 30.0, {0.2, 0.8, 0.0}, 10.0),
      make(NoduleLabel::PrimaryLung, 6, 10, 8.0, 15.0, 35.0, {0.2, 0.0, 0.8}, 40.0),
      make(NoduleLabel::Melanoma, 13, 20, 5.0, 11.0, 40.0, {1.0, 0.0, 0.0}, 60.0),
      make(NoduleLabel::Colorectal, 15, 21, 6.0, 12.0, 40.0, {1.0, 0.0, 0.0}, 50.0),
  };
  return s;
}

PhantomScan generate_scan(const PhantomSpec& spec, NoduleLabel diagnosis, std::uint64_t scan_seed,
                          const std::string& scan_id) {
  validate(spec);
  const NoduleProfile& prof = spec.profile(diagnosis);
  Rng rng(mix_seed(spec.seed, scan_seed));
  const Grid g = spec.grid();
  const Anatomy an = layout(spec);
  const Canvas canvas(g);

  PhantomScan out;
  out.scan_id = scan_id;
  out.diagnosis = diagnosis;
  out.lung_truth = Mask(g);
  VolumeD hu(g, Unit::Hounsfield, spec.air_hu);
  Eigen::ArrayXd iodine = Eigen::ArrayXd::Zero(g.size());
  Eigen::ArrayXd calcium = Eigen::ArrayXd::Zero(g.size());
  auto blend = [&](Index i, double w, double target) { hu.data[i] += w * (target - hu.data[i]); };

  // Body, spine, lungs and airways.
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) {
        const Index i = g.index(x, y, z);
        const P3 p = canvas.center(x, y, z);
        const double ex = (p.x - an.body_c.x) / an.body_ax, ey = (p.y - an.body_c.y) / an.body_ay;
        const double rho = std::sqrt(ex * ex + ey * ey);
        // Radial ramp of about 1 mm at the skin.
        const double w = std::clamp((1.0 - rho) * std::min(an.body_ax, an.body_ay) + 0.5, 0.0, 1.0);
        hu.data[i] = spec.air_hu + w * (spec.body_hu - spec.air_hu);
        const double ds = std::hypot(p.x - an.spine_c.x, p.y - an.spine_c.y);
        blend(i, edge_weight(ds, an.spine_r), spec.bone_hu);
        if (an.in_lung(p)) {
          hu.data[i] = spec.lung_hu;
          out.lung_truth.bits[i] = true;
        }
      }
  for (const auto& s : an.airways)
    canvas.for_capsule(s, [&](Index i, P3, double w) {
      blend(i, w, spec.air_hu);
      if (w >= 0.5) out.lung_truth.bits[i] = true;
    });

  // Vessel trees; each junction and branch end is a distractor candidate.
  for (int j = 0; j < spec.vessel_junctions; ++j) {
    P3 c{};
    bool found = false;
    for (int t = 0; t < kPlacementAttempts && !found; ++t) {
      c = {uniform(rng, 0, an.extent.x), uniform(rng, 0, an.extent.y), uniform(rng, 0, an.extent.z)};
      found = an.in_lung(c, 3.0) && an.airway_clearance(c) > 3.0;
    }
    if (!found) throw GenerationError("could not place vessel junction in " + scan_id);
    out.candidates.push_back({c.x, c.y, c.z});
    const double radius = uniform(rng, spec.vessel_radius_min_mm, spec.vessel_radius_max_mm);
    for (int b = 0; b < 3; ++b) {
      const P3 end = c + uniform(rng, 8.0, 16.0) * random_direction(rng);
      canvas.for_capsule({c, end, radius}, [&](Index i, P3 p, double w) {
        if (an.in_lung(p) && an.airway_clearance(p) > 0)
          hu.data[i] = std::max(hu.data[i], spec.lung_hu + w * (spec.vessel_hu - spec.lung_hu));
      });
      if (an.in_lung(end, 1.0)) out.candidates.push_back({end.x, end.y, end.z});
    }
    canvas.for_sphere(c, 1.3 * radius, [&](Index i, P3 p, double w) {
      if (an.in_lung(p)) hu.data[i] = std::max(hu.data[i], spec.lung_hu + w * (spec.vessel_hu - spec.lung_hu));
    });
  }

  // Nodules: rejection-sampled centers that keep a margin to the pleura, the
  // airways and each other.
  struct Placed {
    P3 c;
    double r;
  };
  std::vector<Placed> placed;
  auto place = [&](double r, double gap) -> P3 {
    for (int t = 0; t < kPlacementAttempts; ++t) {
      const P3 c{uniform(rng, 0, an.extent.x), uniform(rng, 0, an.extent.y), uniform(rng, 0, an.extent.z)};
      if (!an.in_lung(c, r + 1.5) || an.airway_clearance(c) < r + 2.0) continue;
      bool clear = true;
      for (const auto& q : placed) clear = clear && norm(c - q.c) >= r + q.r + gap;
      if (clear) return c;
    }
    throw GenerationError("nodule placement failed in " + scan_id + " after " +
                          std::to_string(kPlacementAttempts) + " attempts");
  };

  // Largest footprints are placed first so dense profiles still pack.
  struct Draw {
    double d;
    NoduleShape shape;
    double footprint() const { return shape == NoduleShape::Spiculated ? 0.8 * d : 0.5 * d; }
  };
  std::vector<Draw> draws(std::size_t(uniform_int(rng, prof.count_min, prof.count_max)));
  for (auto& dr : draws) {
    dr.d = uniform(rng, prof.diameter_min_mm, prof.diameter_max_mm);
    dr.shape = draw_shape(prof, rng);
  }
  std::stable_sort(draws.begin(), draws.end(),
                   [](const Draw& a, const Draw& b) { return a.footprint() > b.footprint(); });
  for (const Draw& dr : draws) {
    const double d = dr.d;
    const double r = 0.5 * d;
    const NoduleShape shape = dr.shape;
    const P3 c = place(dr.footprint(), 3.0);
    placed.push_back({c, dr.footprint()});
    const Texture tex(rng);

    auto paint = [&](Index i, P3 p, double w) {
      if (!an.in_lung(p)) return;
      const double target = prof.mean_hu + prof.texture_hu * tex(p);
      blend(i, w, target);
      iodine[i] += w * (prof.iodine_hu - iodine[i]);
    };
    canvas.for_sphere(c, r, paint);
    if (shape == NoduleShape::Spiculated) {
      const int spikes = uniform_int(rng, 6, 10);
      for (int s = 0; s < spikes; ++s) {
        const P3 u = random_direction(rng);
        const double len = r * uniform(rng, 1.5, 2.0);
        canvas.for_capsule({c, c + len * u, 0.6}, paint);
      }
    }
    if (shape == NoduleShape::CalcifiedCore)
      canvas.for_sphere(c, 0.5 * r, [&](Index i, P3, double w) {
        hu.data[i] += w * spec.calcium_hu;
        calcium[i] += w * spec.calcium_hu;
      });

    NoduleAnnotation a;
    a.scan_id = scan_id;
    a.center = {c.x, c.y, c.z};
    a.diameter_mm = d;
    a.label = diagnosis;
    a.malignancy = malignancy_truth(shape, d, rng);
    out.annotations.push_back(a);
    out.shapes.push_back(shape);
  }

  // Sub-3 mm findings.
  const int n_irr = uniform_int(rng, spec.irrelevant_min, spec.irrelevant_max);
  for (int k = 0; k < n_irr; ++k) {
    const double r = 0.5 * spec.irrelevant_diameter_mm;
    const P3 c = place(r, 6.0);
    placed.push_back({c, r});
    canvas.for_sphere(c, r, [&](Index i, P3, double w) { blend(i, w, 150.0); });
    NoduleAnnotation a;
    a.scan_id = scan_id;
    a.center = {c.x, c.y, c.z};
    a.diameter_mm = spec.irrelevant_diameter_mm;
    a.label = diagnosis;
    a.relevance = Relevance::Irrelevant;
    out.irrelevant.push_back(a);
  }

  std::normal_distribution<double> noise(0.0, spec.noise_sigma_hu);
  if (spec.noise_sigma_hu > 0)
    for (Index i = 0; i < hu.size(); ++i) hu.data[i] += noise(rng);

  out.conventional = hu.cast<float>();
  if (spec.spectral) {
    auto view = [&](double ki, double kc) {
      VolumeD v = hu;
      v.data += (ki - 1.0) * iodine + (kc - 1.0) * calcium;
      return v.cast<float>();
    };
    out.low_kev = view(spec.iodine_low_kev, spec.calcium_low_kev);
    out.high_kev = view(spec.iodine_high_kev, spec.calcium_high_kev);
  }
  return out;
}

json generate_corpus(const PhantomSpec& spec_in, const ClassMix& mix, std::uint64_t seed, const fs::path& out_dir) {
  PhantomSpec spec = spec_in;
  spec.seed = seed;
  validate(spec);
  std::vector<NoduleLabel> labels;
  for (const auto& [label, n] : mix) {
    if (n < 0) throw InvalidArgument("class mix counts must be non-negative");
    spec.profile(label);
    labels.insert(labels.end(), std::size_t(n), label);
  }
  if (labels.empty()) throw InvalidArgument("class mix is empty");
  Rng order_rng(mix_seed(seed, 0x5ca1ab1eULL));
  std::shuffle(labels.begin(), labels.end(), order_rng);

  const std::size_t n = labels.size();
  const int width = std::max<int>(3, int(std::to_string(n - 1).size()));
  std::vector<std::string> ids(n);
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string num = std::to_string(i);
    ids[i] = "scan" + std::string(std::size_t(width) - num.size(), '0') + num;
    seeds[i] = mix_seed(seed, i);
  }

  fs::create_directories(out_dir);
  std::vector<std::vector<NoduleAnnotation>> annotations(n);
  std::vector<std::vector<Candidate>> candidates(n);
  const json rescale = {{"rescale_slope", spec.rescale_slope}, {"rescale_intercept", spec.rescale_intercept}};
  parallel_for(Index(n), [&](Index i) {
    const auto k = std::size_t(i);
    const PhantomScan s = generate_scan(spec, labels[k], seeds[k], ids[k]);
    const fs::path dir = out_dir / "scans" / ids[k];
    fs::create_directories(dir);
    write_nvol(dir / "conventional", to_raw(s.conventional, spec.rescale_slope, spec.rescale_intercept), rescale);
    if (spec.spectral) {
      write_nvol(dir / "low_kev", to_raw(s.low_kev, spec.rescale_slope, spec.rescale_intercept), rescale);
      write_nvol(dir / "high_kev", to_raw(s.high_kev, spec.rescale_slope, spec.rescale_intercept), rescale);
    }
    write_mask(dir / "lung_truth", s.lung_truth);
    annotations[k] = s.annotations;
    annotations[k].insert(annotations[k].end(), s.irrelevant.begin(), s.irrelevant.end());
    for (const auto& c : s.candidates) candidates[k].push_back({ids[k], c});
  });

  std::vector<NoduleAnnotation> all_ann;
  std::vector<Candidate> all_cand;
  json scans = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    all_ann.insert(all_ann.end(), annotations[i].begin(), annotations[i].end());
    all_cand.insert(all_cand.end(), candidates[i].begin(), candidates[i].end());
    json views = {{"conventional", "scans/" + ids[i] + "/conventional"}};
    if (spec.spectral) {
      views["low_kev"] = "scans/" + ids[i] + "/low_kev";
      views["high_kev"] = "scans/" + ids[i] + "/high_kev";
    }
    scans.push_back({{"scan_id", ids[i]},
                     {"label", to_string(labels[i])},
                     {"seed", seeds[i]},
                     {"views", views},
                     {"lung_truth", "scans/" + ids[i] + "/lung_truth"}});
  }
  write_annotations_csv(out_dir / "annotations.csv", all_ann);
  write_candidates_csv(out_dir / "candidates.csv", all_cand);
  json manifest = {{"format", "lungcad-phantom"},
                   {"generator_version", kGeneratorVersion},
                   {"seed", seed},
                   {"spec", spec.to_json()},
                   {"scans", scans},
                   {"annotations", "annotations.csv"},
                   {"candidates", "candidates.csv"}};
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace lungcad
