#include <doctest.h>

#include <filesystem>
#include <set>

#include "lungcad/sampling.hpp"

using namespace lungcad;

namespace {

Grid grid_of(Index nx, Index ny, Index nz, Vec3 sp = {1, 1, 2}, Vec3 origin = {0, 0, 0}) {
  Grid g;
  g.dims = {nx, ny, nz};
  g.spacing_mm = sp;
  g.origin_mm = origin;
  return g;
}

// Volume whose value encodes the voxel coordinate.
VolumeF coded_volume(const Grid& g) {
  VolumeF v(g, Unit::Luminance);
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) v(x, y, z) = float(x + 100 * y + 10000 * z);
  return v;
}

NoduleAnnotation nodule(WorldPoint c, double d, Relevance rel = Relevance::Relevant) {
  NoduleAnnotation a;
  a.scan_id = "s0";
  a.center = c;
  a.diameter_mm = d;
  a.relevance = rel;
  return a;
}

}  // namespace

TEST_CASE("patch window centres on the rounded voxel") {
  const Grid g = grid_of(64, 64, 32);
  const PatchWindow w = patch_window(g, {20.0, 30.4, 20.0}, {32, 32, 32});
  CHECK(w.size == Dims3{32, 32, 16});
  CHECK(w.start == Dims3{4, 14, 2});
  const Box b = window_box(g, w);
  CHECK(b.lo[0] == doctest::Approx(3.5));
  CHECK(b.hi[0] == doctest::Approx(35.5));
  CHECK(b.lo[2] == doctest::Approx(3.0));
  CHECK(b.hi[2] == doctest::Approx(35.0));
  CHECK_THROWS_AS(patch_window(g, {-17.0, 0, 0}, {32, 32, 32}), OutOfBounds);
  CHECK_NOTHROW(patch_window(g, {-16.0, 0, 0}, {32, 32, 32}));
  CHECK_THROWS_AS(patch_window(g, {0, 0, 0}, {0, 32, 32}), InvalidArgument);
}

TEST_CASE("crop copies voxels and pads with water luminance") {
  const Grid g = grid_of(20, 20, 10);
  const VolumeF v = coded_volume(g);
  const Tensor<float> p = crop_patch(v, {10, 10, 10}, {8, 8, 8});
  REQUIRE(p.shape == Shape{1, 8, 8, 4});
  // start = (6, 6, 3)
  CHECK(p[0] == v(6, 6, 3));
  CHECK(p[(3 * 8 + 2) * 4 + 1] == v(9, 8, 4));
  const Tensor<float> edge = crop_patch(v, {0, 0, 0}, {8, 8, 8});
  CHECK(edge[0] == float(kWaterLuminance));
  CHECK(edge[(4 * 8 + 4) * 4 + 2] == v(0, 0, 0));
}

TEST_CASE("sphere and box predicates") {
  const Box b{{0, 0, 0}, {10, 10, 10}};
  CHECK(sphere_inside_box({5, 5, 5}, 5.0, b));
  CHECK_FALSE(sphere_inside_box({5, 5, 5}, 5.1, b));
  CHECK(sphere_intersects_box({12, 5, 5}, 2.5, b));
  CHECK_FALSE(sphere_intersects_box({12, 5, 5}, 2.0, b));
  CHECK_FALSE(sphere_intersects_box({13, 13, 5}, 4.0, b));  // sqrt(18) > 4
  CHECK(sphere_intersects_box({13, 13, 5}, 4.3, b));
}

TEST_CASE("flip reverses selected axes and is an involution") {
  Tensor<float> t({1, 2, 3, 4});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(i);
  for (int code = 0; code < 8; ++code) {
    const Tensor<float> f = augment_flip(t, code);
    CHECK((augment_flip(f, code).data == t.data).all());
    const Index x = 1, y = 0, z = 3;
    const Index fx = code & 1 ? 1 - x : x, fy = code & 2 ? 2 - y : y, fz = code & 4 ? 3 - z : z;
    CHECK(f[(x * 3 + y) * 4 + z] == t[(fx * 3 + fy) * 4 + fz]);
  }
  CHECK_THROWS_AS(augment_flip(t, 8), InvalidArgument);
}

TEST_CASE("affine augmentation") {
  Tensor<double> t({1, 9, 9, 5});
  for (Index i = 0; i < t.size(); ++i) t[i] = double(i % 17) * 3.0;

  SUBCASE("identity") {
    const Tensor<double> a = augment_affine(t, 0.0, 1.0);
    CHECK((a.data == t.data).all());
  }
  SUBCASE("quarter turn permutes axes exactly") {
    const Tensor<double> a = augment_affine(t, 90.0, 1.0);
    for (Index x = 0; x < 9; ++x)
      for (Index y = 0; y < 9; ++y)
        for (Index z = 0; z < 5; ++z) {
          // src = c + R^-1 (p - c): (x, y) -> (4 + (y - 4), 4 - (x - 4))
          const Index sx = y, sy = 8 - x;
          CHECK(a[(x * 9 + y) * 5 + z] == doctest::Approx(t[(sx * 9 + sy) * 5 + z]).epsilon(1e-9));
        }
  }
  SUBCASE("constant patches stay constant where sampled inside") {
    Tensor<double> c({1, 9, 9, 5}, 42.0);
    const Tensor<double> a = augment_affine(c, 33.0, 0.7);
    for (Index i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(42.0));
    const Tensor<double> b = augment_affine(c, 0.0, 1.4);
    CHECK(b[0] == kWaterLuminance);
    CHECK(b[(4 * 9 + 4) * 5 + 2] == 42.0);
  }
  CHECK_THROWS_AS(augment_affine(t, 0.0, 1.6), InvalidArgument);
}

TEST_CASE("positive draws keep the nodule inside the crop") {
  const Grid g = grid_of(64, 64, 32);
  Rng rng(3);
  PositiveOptions o;
  const NoduleAnnotation a = nodule({32, 32, 32}, 10.0);
  for (int i = 0; i < 200; ++i) {
    const auto c = draw_positive_center(g, a, o, rng);
    REQUIRE(c);
    for (int ax = 0; ax < 3; ++ax) CHECK(std::abs((*c)[ax] - a.center[ax]) <= 4.0);
    CHECK(sphere_inside_box(a.center, a.radius_mm(), window_box(g, patch_window(g, *c, o.patch_mm))));
  }
  CHECK_FALSE(draw_positive_center(g, nodule({32, 32, 32}, 34.0), o, rng));

  VolumeF v(g, Unit::Luminance, 100.0f);
  SamplingReport report;
  o.copies = 3;
  const auto pos = sample_positives(v, {a, nodule({32, 32, 32}, 40.0), nodule({20, 20, 20}, 6.0, Relevance::Irrelevant)},
                                    rng, o, &report);
  CHECK(pos.size() == 3);
  CHECK(report.shortfall);
  CHECK(report.warnings.size() == 1);
  for (const auto& p : pos) {
    CHECK(p.label == 1.0);
    CHECK(p.patch.shape == Shape{1, 32, 32, 16});
  }
}

TEST_CASE("regression positives are centred and carry malignancy") {
  const Grid g = grid_of(64, 64, 32);
  const VolumeF v = coded_volume(g);
  NoduleAnnotation a = nodule({30, 31, 30}, 8.0);
  a.malignancy = 3.5;
  PositiveOptions o;
  o.regression = true;
  Rng rng(1);
  const auto pos = sample_positives(v, {a}, rng, o);
  REQUIRE(pos.size() == 1);
  CHECK(pos[0].label == 3.5);
  CHECK((pos[0].patch.data == crop_patch(v, a.center, o.patch_mm).data).all());
  a.malignancy.reset();
  CHECK_THROWS_AS(sample_positives(v, {a}, rng, o), InvalidArgument);
}

TEST_CASE("negatives never overlap annotations") {
  const Grid g = grid_of(64, 64, 32);
  Mask lung(g, false);
  for (Index z = 4; z < 28; ++z)
    for (Index y = 8; y < 56; ++y)
      for (Index x = 8; x < 56; ++x) lung(x, y, z) = true;
  const std::vector<NoduleAnnotation> ann{nodule({32, 32, 32}, 8.0), nodule({12, 12, 12}, 2.0, Relevance::Irrelevant)};
  std::vector<WorldPoint> candidates;
  for (int i = 0; i < 60; ++i) candidates.push_back(g.world(double(i % 8) * 8.0, double(i / 8) * 8.0, 16.0));
  candidates.push_back({-1000, 0, 0});
  Rng rng(11);
  SamplingReport report;
  NegativeOptions o;
  const auto centers = draw_negative_centers(g, lung, candidates, ann, rng, o, &report);
  int random = 0, cand = 0;
  for (const auto& [c, prov] : centers) {
    CHECK(negative_is_clear(g, c, o.patch_mm, ann));
    (prov == Provenance::RandomNegative ? random : cand)++;
  }
  CHECK(random == 20);
  CHECK(cand <= 40);

  SUBCASE("impossible requests are reported") {
    const std::vector<NoduleAnnotation> huge{nodule({32, 32, 32}, 200.0)};
    SamplingReport r2;
    const auto none = draw_negative_centers(g, lung, candidates, huge, rng, o, &r2);
    CHECK(none.empty());
    CHECK(r2.shortfall);
  }
}

TEST_CASE("balanced batcher") {
  BalancedBatcher b(3, 10, 8, 5);
  std::multiset<std::size_t> pos_seen;
  std::set<std::size_t> neg_seen;
  for (int i = 0; i < 5; ++i) {
    const auto batch = b.next();
    CHECK(batch.positives.size() == 4);
    CHECK(batch.negatives.size() == 4);
    pos_seen.insert(batch.positives.begin(), batch.positives.end());
    neg_seen.insert(batch.negatives.begin(), batch.negatives.end());
  }
  CHECK(pos_seen.count(0) >= 6);
  CHECK(neg_seen.size() == 10);
  BalancedBatcher b2(3, 10, 8, 5);
  BalancedBatcher b3(3, 10, 8, 5);
  for (int i = 0; i < 4; ++i) CHECK(b2.next().positives == b3.next().positives);
  CHECK_THROWS_AS(BalancedBatcher(3, 3, 7, 0), InvalidArgument);
  CHECK_THROWS_AS(BalancedBatcher(0, 3, 8, 0), InvalidArgument);
}

TEST_CASE("stacking divides by 255") {
  Tensor<float> a({1, 2, 2, 2}, 255.0f), c({1, 2, 2, 2}, 51.0f);
  const Tensor<float> s = stack_standardized({&a, &c});
  CHECK(s.shape == Shape{2, 1, 2, 2, 2});
  CHECK(s[0] == 1.0f);
  CHECK(s[8] == doctest::Approx(0.2f));
  Tensor<float> bad({1, 2, 2, 3});
  CHECK_THROWS_AS(stack_standardized({&a, &bad}), InvalidArgument);
}

TEST_CASE("annotation and candidate CSV round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "lungcad_test_sampling";
  std::filesystem::create_directories(dir);
  NoduleAnnotation a = nodule({1.5, -2.25, 100.125}, 6.5);
  a.label = NoduleLabel::Melanoma;
  a.malignancy = 4.2;
  NoduleAnnotation b = nodule({0, 0, 0}, 2.0, Relevance::Irrelevant);
  write_annotations_csv(dir / "a.csv", {a, b});
  const auto back = read_annotations_csv(dir / "a.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].center.z_mm == 100.125);
  CHECK(back[0].label == NoduleLabel::Melanoma);
  CHECK(*back[0].malignancy == 4.2);
  CHECK_FALSE(back[1].malignancy);
  CHECK(back[1].relevance == Relevance::Irrelevant);
  write_candidates_csv(dir / "c.csv", {{"s1", {1, 2, 3}}});
  const auto cands = read_candidates_csv(dir / "c.csv");
  REQUIRE(cands.size() == 1);
  CHECK(cands[0].scan_id == "s1");
  CHECK(cands[0].center.y_mm == 2.0);
  CHECK_THROWS_AS(nodule_label_from_string("cancer"), InvalidArgument);
  std::filesystem::remove_all(dir);
}
