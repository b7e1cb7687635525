#include <doctest.h>

#include <filesystem>
#include <map>

#include "lungcad/nvol.hpp"
#include "lungcad/phantom.hpp"

using namespace lungcad;
namespace fs = std::filesystem;

namespace {

// Mean HU over voxels whose centers lie within radius of center.
double ball_mean(const VolumeF& v, const WorldPoint& c, double radius) {
  double sum = 0.0;
  Index n = 0;
  const Grid& g = v.grid;
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) {
        const WorldPoint p = g.world(double(x), double(y), double(z));
        const double d2 = (p.x_mm - c.x_mm) * (p.x_mm - c.x_mm) + (p.y_mm - c.y_mm) * (p.y_mm - c.y_mm) +
                          (p.z_mm - c.z_mm) * (p.z_mm - c.z_mm);
        if (d2 <= radius * radius) {
          sum += v(x, y, z);
          ++n;
        }
      }
  REQUIRE(n > 0);
  return sum / double(n);
}

// Voxels fully inside the nodule, clear of the partial-volume rim.
double core_mean(const VolumeF& v, const NoduleAnnotation& a) { return ball_mean(v, a.center, a.radius_mm() - 0.5); }

std::string slurp(const fs::path& p) { return read_text_file(p); }

}  // namespace

TEST_CASE("generation is deterministic in both seeds") {
  const PhantomSpec spec = PhantomSpec::detection_default();
  const PhantomScan a = generate_scan(spec, NoduleLabel::Unlabeled, 11, "a");
  const PhantomScan b = generate_scan(spec, NoduleLabel::Unlabeled, 11, "a");
  CHECK((a.conventional.data == b.conventional.data).all());
  CHECK(a.lung_truth == b.lung_truth);
  REQUIRE(a.annotations.size() == b.annotations.size());
  for (std::size_t i = 0; i < a.annotations.size(); ++i) {
    CHECK(a.annotations[i].center.x_mm == b.annotations[i].center.x_mm);
    CHECK(a.annotations[i].malignancy == b.annotations[i].malignancy);
  }
  CHECK(a.candidates.size() == b.candidates.size());
  const PhantomScan c = generate_scan(spec, NoduleLabel::Unlabeled, 12, "a");
  CHECK_FALSE((a.conventional.data == c.conventional.data).all());
  PhantomSpec other = spec;
  other.seed = 5;
  CHECK_FALSE((generate_scan(other, NoduleLabel::Unlabeled, 11).conventional.data == a.conventional.data).all());
}

TEST_CASE("annotation spheres lie inside the lungs") {
  const PhantomSpec spec = PhantomSpec::spectral_default();
  for (NoduleLabel l : {NoduleLabel::BenignMultinodular, NoduleLabel::PrimaryLung, NoduleLabel::Colorectal}) {
    const PhantomScan s = generate_scan(spec, l, 3, "s");
    const auto& prof = spec.profile(l);
    CHECK(int(s.annotations.size()) >= prof.count_min);
    CHECK(int(s.annotations.size()) <= prof.count_max);
    CHECK(s.shapes.size() == s.annotations.size());
    const Grid& g = s.lung_truth.grid;
    for (const auto& a : s.annotations) {
      CHECK(a.diameter_mm >= 3.0);
      CHECK(a.label == l);
      CHECK(a.relevance == Relevance::Relevant);
      REQUIRE(a.malignancy.has_value());
      for (Index z = 0; z < g.dims[2]; ++z)
        for (Index y = 0; y < g.dims[1]; ++y)
          for (Index x = 0; x < g.dims[0]; ++x) {
            const WorldPoint p = g.world(double(x), double(y), double(z));
            const double d = std::hypot(p.x_mm - a.center.x_mm, p.y_mm - a.center.y_mm, p.z_mm - a.center.z_mm);
            if (d <= a.radius_mm()) CHECK(s.lung_truth.bits[g.index(x, y, z)]);
          }
    }
    for (const auto& a : s.irrelevant) CHECK(a.diameter_mm < 3.0);
    CHECK(s.low_kev.grid.same_geometry(s.conventional.grid));
    CHECK(s.high_kev.grid.same_geometry(s.conventional.grid));
  }
}

TEST_CASE("calcified benign nodules are denser than smooth metastases") {
  const PhantomSpec spec = PhantomSpec::spectral_default();
  double min_calcified = 1e9, max_smooth = -1e9;
  int n_calc = 0, n_smooth = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const PhantomScan b = generate_scan(spec, NoduleLabel::BenignMultinodular, seed);
    for (std::size_t i = 0; i < b.annotations.size(); ++i)
      if (b.shapes[i] == NoduleShape::CalcifiedCore) {
        min_calcified = std::min(min_calcified, core_mean(b.conventional, b.annotations[i]));
        ++n_calc;
      }
    const PhantomScan m = generate_scan(spec, NoduleLabel::Melanoma, seed);
    for (std::size_t i = 0; i < m.annotations.size(); ++i)
      if (m.shapes[i] == NoduleShape::Smooth) {
        max_smooth = std::max(max_smooth, core_mean(m.conventional, m.annotations[i]));
        ++n_smooth;
      }
  }
  REQUIRE(n_calc > 5);
  REQUIRE(n_smooth > 5);
  CHECK(min_calcified > max_smooth);
}

TEST_CASE("malignancy scoring") {
  CHECK(malignancy_base(NoduleShape::Smooth, 4.0) == 1.5);
  CHECK(malignancy_base(NoduleShape::Spiculated, 20.0) == doctest::Approx(4.6));
  Rng rng(1);
  double lo = 10, hi = -10;
  for (int i = 0; i < 10000; ++i) {
    const double smooth = malignancy_truth(NoduleShape::Smooth, 4.0, rng);
    CHECK(smooth <= 2.3);
    CHECK(malignancy_truth(NoduleShape::Spiculated, 20.0, rng) >= 4.0);
    const double any = malignancy_truth(NoduleShape(i % 3), double(i % 40), rng);
    CHECK(any >= 1.0);
    CHECK(any <= 5.0);
    lo = std::min(lo, smooth - 1.5);
    hi = std::max(hi, smooth - 1.5);
  }
  CHECK(lo >= -0.3);
  CHECK(hi <= 0.3);
  CHECK(hi - lo > 0.5);
}

TEST_CASE("segmentation recovers the phantom lungs") {
  const PhantomSpec spec = PhantomSpec::detection_default();
  for (std::uint64_t seed : {1u, 2u}) {
    const PhantomScan s = generate_scan(spec, NoduleLabel::Unlabeled, seed);
    const LungMasks m = extract_lung_mask(s.conventional);
    const Mask shell = morphological_dilate(s.lung_truth, 10.0);
    Index truth = 0, covered = 0, outside = 0, total = 0;
    for (Index i = 0; i < s.lung_truth.grid.size(); ++i) {
      truth += s.lung_truth.bits[i];
      covered += s.lung_truth.bits[i] && m.lung.bits[i];
      outside += m.lung.bits[i] && !shell.bits[i];
      total += m.lung.bits[i];
    }
    CHECK(double(covered) >= 0.99 * double(truth));
    CHECK(double(outside) <= 0.01 * double(total));
  }
}

TEST_CASE("spectral views differ only at material-tagged voxels") {
  const PhantomSpec spec = PhantomSpec::spectral_default();
  const PhantomScan s = generate_scan(spec, NoduleLabel::PrimaryLung, 9);
  const Grid& g = s.conventional.grid;
  Index changed_inside = 0;
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) {
        const WorldPoint p = g.world(double(x), double(y), double(z));
        bool near = false;
        for (const auto& a : s.annotations)
          near = near || std::hypot(p.x_mm - a.center.x_mm, p.y_mm - a.center.y_mm, p.z_mm - a.center.z_mm) <=
                             2.0 * a.radius_mm() + 1.5;
        const Index i = g.index(x, y, z);
        if (!near) {
          CHECK(s.low_kev.data[i] == s.conventional.data[i]);
          CHECK(s.high_kev.data[i] == s.conventional.data[i]);
        } else {
          changed_inside += s.low_kev.data[i] != s.conventional.data[i];
        }
      }
  CHECK(changed_inside > 0);
  // Iodine uptake brightens the low-energy view inside the nodules.
  const auto& a = s.annotations.front();
  CHECK(ball_mean(s.low_kev, a.center, a.radius_mm() - 0.5) >
        ball_mean(s.conventional, a.center, a.radius_mm() - 0.5) + 20.0);
  CHECK(ball_mean(s.high_kev, a.center, a.radius_mm() - 0.5) <
        ball_mean(s.conventional, a.center, a.radius_mm() - 0.5));
}

TEST_CASE("default class profiles follow the reference nodule counts") {
  const PhantomSpec spec = PhantomSpec::spectral_default();
  auto mean_count = [&](NoduleLabel l) {
    const auto& p = spec.profile(l);
    return 0.5 * (p.count_min + p.count_max);
  };
  CHECK(mean_count(NoduleLabel::BenignMultinodular) == doctest::Approx(11.1).epsilon(0.05));
  CHECK(mean_count(NoduleLabel::Benign) == doctest::Approx(2.2).epsilon(0.1));
  CHECK(mean_count(NoduleLabel::PrimaryLung) == doctest::Approx(8.3).epsilon(0.05));
  CHECK(mean_count(NoduleLabel::Melanoma) == doctest::Approx(16.5).epsilon(0.05));
  CHECK(mean_count(NoduleLabel::Colorectal) == doctest::Approx(18.0).epsilon(0.05));
  CHECK_THROWS_AS(spec.profile(NoduleLabel::Unlabeled), InvalidArgument);
}

TEST_CASE("classes are separable on simple nodule statistics") {
  // Leave-one-out nearest centroid on (mean nodule HU, mean diameter).
  const PhantomSpec spec = PhantomSpec::spectral_default();
  const std::vector<std::pair<NoduleLabel, int>> classes{
      {NoduleLabel::Benign, 0}, {NoduleLabel::PrimaryLung, 1}, {NoduleLabel::Colorectal, 2}};
  std::vector<std::array<double, 2>> feats;
  std::vector<int> y;
  for (const auto& [label, cls] : classes)
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const PhantomScan s = generate_scan(spec, label, 100 + seed);
      double hu = 0, d = 0;
      for (const auto& a : s.annotations) {
        hu += ball_mean(s.conventional, a.center, a.radius_mm());
        d += a.diameter_mm;
      }
      feats.push_back({hu / double(s.annotations.size()) / 50.0, d / double(s.annotations.size())});
      y.push_back(cls);
    }
  int hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::array<double, 3> cx{}, cy{}, cn{};
    for (std::size_t j = 0; j < y.size(); ++j)
      if (j != i) {
        cx[std::size_t(y[j])] += feats[j][0];
        cy[std::size_t(y[j])] += feats[j][1];
        cn[std::size_t(y[j])] += 1;
      }
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 3; ++c) {
      const double dx = feats[i][0] - cx[std::size_t(c)] / cn[std::size_t(c)];
      const double dy = feats[i][1] - cy[std::size_t(c)] / cn[std::size_t(c)];
      if (dx * dx + dy * dy < best_d) {
        best_d = dx * dx + dy * dy;
        best = c;
      }
    }
    hits += best == y[i];
  }
  CHECK(double(hits) / double(y.size()) > 1.0 / 3.0 + 0.2);
}

TEST_CASE("placement failure and invalid specs") {
  PhantomSpec spec = PhantomSpec::detection_default();
  spec.profiles[0].count_min = spec.profiles[0].count_max = 300;
  spec.profiles[0].diameter_min_mm = 12.0;
  CHECK_THROWS_AS(generate_scan(spec, NoduleLabel::Unlabeled, 1), GenerationError);
  spec = PhantomSpec::detection_default();
  spec.profiles[0].diameter_min_mm = 2.0;
  CHECK_THROWS_AS(generate_scan(spec, NoduleLabel::Unlabeled, 1), InvalidArgument);
  spec = PhantomSpec::detection_default();
  spec.profiles[0].count_min = 0;
  CHECK_THROWS_AS(generate_scan(spec, NoduleLabel::Unlabeled, 1), InvalidArgument);
}

TEST_CASE("spec JSON round trip") {
  PhantomSpec spec = PhantomSpec::spectral_default();
  spec.dims = {64, 60, 30};
  spec.noise_sigma_hu = 7.5;
  spec.seed = 99;
  const PhantomSpec back = PhantomSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK(back.profiles.size() == 5);
  CHECK(back.profile(NoduleLabel::Melanoma).iodine_hu == 60.0);
}

TEST_CASE("corpus on disk") {
  const PhantomSpec spec = PhantomSpec::spectral_default();
  const ClassMix mix{{NoduleLabel::Benign, 2}, {NoduleLabel::PrimaryLung, 1}, {NoduleLabel::Melanoma, 1}};
  const fs::path root = fs::temp_directory_path() / "lungcad_test_phantom";
  fs::remove_all(root);
  const auto m1 = generate_corpus(spec, mix, 21, root / "a");
  const auto m2 = generate_corpus(spec, mix, 21, root / "b");
  REQUIRE(m1["scans"].size() == 4);
  std::map<std::string, int> counts;
  for (const auto& s : m1["scans"]) counts[s["label"].get<std::string>()]++;
  CHECK(counts[to_string(NoduleLabel::Benign)] == 2);
  CHECK(counts[to_string(NoduleLabel::PrimaryLung)] == 1);
  CHECK(counts[to_string(NoduleLabel::Melanoma)] == 1);
  CHECK(m1 == m2);
  for (const char* f : {"manifest.json", "annotations.csv", "candidates.csv"})
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  const std::string view = m1["scans"][0]["views"]["low_kev"].get<std::string>();
  CHECK(slurp(root / "a" / (view + ".raw")) == slurp(root / "b" / (view + ".raw")));

  // Stored raw values convert back to the generated HU volume.
  const auto& s0 = m1["scans"][0];
  const NvolFile f = read_nvol(root / "a" / s0["views"]["conventional"].get<std::string>());
  CHECK(f.volume.unit == Unit::RawDetector);
  const VolumeF hu = hu_from_raw(f.volume, f.header["rescale_slope"].get<double>(),
                                 f.header["rescale_intercept"].get<double>());
  PhantomSpec seeded = spec;
  seeded.seed = 21;
  const PhantomScan direct = generate_scan(seeded, nodule_label_from_string(s0["label"].get<std::string>()),
                                           s0["seed"].get<std::uint64_t>(), s0["scan_id"].get<std::string>());
  CHECK(((hu.data - direct.conventional.data).abs() < 1e-3f).all());
  const auto ann = read_annotations_csv(root / "a" / "annotations.csv");
  Index relevant = 0;
  for (const auto& a : ann) relevant += a.relevance == Relevance::Relevant;
  CHECK(relevant >= 2 * 1 + 6 + 13);

  CHECK_THROWS_AS(generate_corpus(spec, {{NoduleLabel::Unlabeled, 1}}, 1, root / "c"), InvalidArgument);
  fs::remove_all(root);
}
