#include <doctest.h>

#include <filesystem>

#include "lungcad/detection.hpp"
#include "lungcad/froc.hpp"

using namespace lungcad;

namespace {

Architecture tiny_detector() {
  Architecture a;
  a.input = {8, 8, 8};
  a.base_filters = 4;
  a.width_divisor = 1;
  a.convs_per_group = {1, 1};
  a.dense_units = 8;
  a.mode = ModelMode::Detector;
  return a;
}

// 6x6x6 cells of 8 mm whose centres sit at 4 + 8 i.
ProbabilityMap empty_map() {
  Grid g;
  g.dims = {6, 6, 6};
  g.spacing_mm = {8, 8, 8};
  g.origin_mm = {4, 4, 4};
  ProbabilityMap pm;
  pm.prob = VolumeF(g, Unit::RawDetector, 0.0f);
  pm.cell_mm = 8.0;
  return pm;
}

WorldPoint cell_center(Index x, Index y, Index z) { return {4.0 + 8.0 * x, 4.0 + 8.0 * y, 4.0 + 8.0 * z}; }

NoduleAnnotation finding(const std::string& scan, WorldPoint c, double d, Relevance rel = Relevance::Relevant) {
  NoduleAnnotation a;
  a.scan_id = scan;
  a.center = c;
  a.diameter_mm = d;
  a.relevance = rel;
  return a;
}

}  // namespace

TEST_CASE("cell grid tiles the volume extent") {
  Grid v;
  v.dims = {100, 80, 41};
  v.spacing_mm = {1, 1, 2};
  v.origin_mm = {10, 20, 30};
  const Grid c = cell_grid(v, 8.0);
  CHECK(c.dims == Dims3{13, 10, 11});
  CHECK(c.origin_mm[0] == doctest::Approx(13.5));
  CHECK(c.origin_mm[2] == doctest::Approx(33.0));
  CHECK_THROWS_AS(cell_grid(v, 0.0), InvalidArgument);
  CHECK(scale_patch_mm(ScaleTag::Large64)[2] == 64.0);
  CHECK_THROWS_AS(scale_patch_mm(ScaleTag::Fused), InvalidArgument);
  CHECK(scale_tag_from_string(to_string(ScaleTag::Fused)) == ScaleTag::Fused);
}

TEST_CASE("sliding window prediction") {
  Grid g;
  g.dims = {12, 10, 9};
  g.spacing_mm = {4, 4, 4};
  VolumeF lum(g, Unit::Luminance, 170.0f);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  for (Index i = 0; i < lum.size(); ++i) lum.data[i] = u(gen);
  Mask lung(g, false);
  for (Index z = 2; z < 8; ++z)
    for (Index y = 1; y < 9; ++y)
      for (Index x = 2; x < 10; ++x) lung(x, y, z) = true;
  const auto model = init_model<float>(tiny_detector(), 9);

  SlidingWindowOptions o;
  o.batch_size = 1;
  const ProbabilityMap one = sliding_window_predict(model, lum, lung, ScaleTag::Small32, o);
  o.batch_size = 5;
  const ProbabilityMap five = sliding_window_predict(model, lum, lung, ScaleTag::Small32, o);
  CHECK(one.grid().dims == Dims3{6, 5, 5});
  CHECK((one.prob.data == five.prob.data).all());

  // Reference: each in-lung cell evaluated on its own crop.
  Rng rng(0);
  Index inside = 0;
  const Grid& cg = one.grid();
  for (Index z = 0; z < cg.dims[2]; ++z)
    for (Index y = 0; y < cg.dims[1]; ++y)
      for (Index x = 0; x < cg.dims[0]; ++x) {
        const WorldPoint c = cg.world(double(x), double(y), double(z));
        const Index vx = std::llround(g.continuous(c, 0)), vy = std::llround(g.continuous(c, 1)),
                    vz = std::llround(g.continuous(c, 2));
        const float p = one.prob(x, y, z);
        if (!g.contains(vx, vy, vz) || !lung(vx, vy, vz)) {
          CHECK(p == 0.0f);
          continue;
        }
        ++inside;
        const Tensor<float> patch = crop_patch(lum, c, {32, 32, 32});
        const Tensor<float> ref = model_forward(model, stack_standardized({&patch}), Mode::Infer, rng);
        CHECK(p == ref[0]);
        CHECK(p > 0.0f);
        CHECK(p < 1.0f);
      }
  CHECK(inside > 0);

  SUBCASE("contract violations") {
    CHECK_THROWS_AS(sliding_window_predict(model, lum, lung, ScaleTag::Large64), InvalidArgument);
    Architecture ra = tiny_detector();
    ra.mode = ModelMode::Regressor;
    CHECK_THROWS_AS(sliding_window_predict(init_model<float>(ra, 1), lum, lung, ScaleTag::Small32), InvalidArgument);
    VolumeF hu = lum;
    hu.unit = Unit::Hounsfield;
    CHECK_THROWS_AS(sliding_window_predict(model, hu, lung, ScaleTag::Small32), InvalidArgument);
  }
}

TEST_CASE("scale fusion and probability map files") {
  ProbabilityMap a = empty_map(), b = empty_map();
  a.prob.data.setConstant(0.25f);
  b.scale_tag = ScaleTag::Large64;
  b.prob.data.setConstant(0.75f);
  b.prob(1, 2, 3) = 0.0f;
  const ProbabilityMap f = fuse_scales({a, b});
  CHECK(f.scale_tag == ScaleTag::Fused);
  CHECK(f.prob(0, 0, 0) == 0.5f);
  CHECK(f.prob(1, 2, 3) == 0.125f);
  ProbabilityMap c = empty_map();
  c.cell_mm = 4.0;
  CHECK_THROWS_AS(fuse_scales({a, c}), InvalidArgument);

  const auto base = std::filesystem::temp_directory_path() / "lungcad_test_pm";
  write_probability_map(base, f);
  const ProbabilityMap back = read_probability_map(base);
  CHECK(back.scale_tag == ScaleTag::Fused);
  CHECK(back.cell_mm == 8.0);
  CHECK(back.grid().same_geometry(f.grid()));
  CHECK((back.prob.data == f.prob.data).all());
}

TEST_CASE("clustering uses 26-connectivity and >= thresholds") {
  ProbabilityMap pm = empty_map();
  pm.prob(0, 0, 0) = 0.5f;
  pm.prob(1, 1, 1) = 0.75f;  // diagonal neighbour
  pm.prob(4, 4, 4) = 0.25f;
  auto c = cluster_predictions(pm, 0.5);
  REQUIRE(c.size() == 1);
  CHECK(c[0].cells.size() == 2);
  CHECK(c[0].peak == 0.75);
  CHECK(c[0].centroid.x_mm == doctest::Approx(8.0));
  CHECK(cluster_predictions(pm, 0.25).size() == 2);
  CHECK(cluster_predictions(pm, 0.0).size() == 1);
  CHECK_THROWS_AS(cluster_predictions(pm, 1.5), InvalidArgument);
}

TEST_CASE("relevance rules") {
  CHECK(counts_for_detection(finding("a", {}, 3.0)));
  CHECK(counts_for_detection(finding("a", {}, 29.9)));
  CHECK_FALSE(counts_for_detection(finding("a", {}, 2.9)));
  CHECK_FALSE(counts_for_detection(finding("a", {}, 30.0)));
  CHECK_FALSE(counts_for_detection(finding("a", {}, 8.0, Relevance::Irrelevant)));
}

// Two scans enumerated by hand. Scan A holds nodules N1 (0.875) and N2
// (0.375), a sub-3 mm finding (0.625), a finding flagged irrelevant (0.5) and
// false positives at 0.75 and 0.25. Scan B holds nodule N3 (0.5), a 35 mm mass
// (0.75) and false positives at 0.9375 and 0.625. At threshold 0 every cell
// joins one cluster per scan, which touches a nodule and is not a false positive.
TEST_CASE("FROC on a hand-enumerated two-scan scenario") {
  ProbabilityMap a = empty_map(), b = empty_map();
  a.prob(1, 1, 1) = 0.875f;
  a.prob(4, 4, 4) = 0.375f;
  a.prob(4, 1, 1) = 0.625f;
  a.prob(1, 4, 1) = 0.5f;
  a.prob(4, 1, 4) = 0.75f;
  a.prob(1, 4, 4) = 0.25f;
  b.prob(2, 2, 2) = 0.5f;
  b.prob(5, 0, 5) = 0.75f;
  b.prob(5, 5, 5) = 0.9375f;
  b.prob(0, 5, 0) = 0.625f;
  const std::vector<NoduleAnnotation> ann_a{
      finding("A", cell_center(1, 1, 1), 6.0), finding("A", cell_center(4, 4, 4), 10.0),
      finding("A", cell_center(4, 1, 1), 2.0), finding("A", cell_center(1, 4, 1), 5.0, Relevance::Irrelevant)};
  const std::vector<NoduleAnnotation> ann_b{finding("B", cell_center(2, 2, 2), 8.0),
                                            finding("B", cell_center(5, 0, 5), 35.0)};

  const std::vector<double> thresholds{0.0, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 0.9375, 1.0};
  const FrocCurve curve = froc_curve({a, b}, {ann_a, ann_b}, thresholds);
  CHECK(curve.n_scans == 2);
  CHECK(curve.n_nodules == 3);

  struct Row {
    double t, sens, raw_fp, fp;
  };
  const Row expected[] = {
      {1.0, 0.0, 0.0, 0.0},       {0.9375, 0.0, 0.5, 0.5}, {0.875, 1.0 / 3, 0.5, 0.5},
      {0.75, 1.0 / 3, 1.0, 1.0},  {0.625, 1.0 / 3, 1.5, 1.5}, {0.5, 2.0 / 3, 1.5, 1.5},
      {0.375, 1.0, 1.5, 1.5},     {0.25, 1.0, 2.0, 2.0},   {0.0, 1.0, 0.0, 2.0},
  };
  REQUIRE(curve.points.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CAPTURE(i);
    CHECK(curve.points[i].threshold == expected[i].t);
    CHECK(curve.points[i].sensitivity == doctest::Approx(expected[i].sens).epsilon(1e-15));
    CHECK(curve.points[i].raw_fp_per_scan == expected[i].raw_fp);
    CHECK(curve.points[i].fp_per_scan == expected[i].fp);
  }

  SUBCASE("match details at 0.625") {
    const auto m = match_clusters(a, cluster_predictions(a, 0.625), ann_a);
    CHECK(m.detected == std::vector<std::size_t>{0});
    CHECK(m.fp_clusters == 1);
    CHECK(m.ignored_clusters == 1);
    CHECK(m.relevant_nodules == 2);
    const auto mb = match_clusters(b, cluster_predictions(b, 0.625), ann_b);
    CHECK(mb.fp_clusters == 2);
    CHECK(mb.ignored_clusters == 1);
    CHECK(mb.relevant_nodules == 1);
  }

  SUBCASE("operating points") {
    CHECK(sensitivity_at(curve, 0.125) == 0.0);
    CHECK(sensitivity_at(curve, 0.25) == 0.0);
    CHECK(sensitivity_at(curve, 0.5) == doctest::Approx(1.0 / 3));
    CHECK(sensitivity_at(curve, 0.75) == doctest::Approx(1.0 / 3));
    CHECK(sensitivity_at(curve, 1.75) == doctest::Approx(1.0));
    CHECK(sensitivity_at(curve, 2.0) == 1.0);
    CHECK(sensitivity_at(curve, 8.0) == 1.0);
    CHECK(average_sensitivity(curve) == doctest::Approx(11.0 / 21.0).epsilon(1e-15));
  }

  SUBCASE("default thresholds") {
    const auto t = default_thresholds({a, b});
    CHECK(t == std::vector<double>{1.0, 0.9375, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.0});
    CHECK(default_thresholds({a, b}, 4).size() <= 6);
  }
}

TEST_CASE("FROC envelope is monotone on random maps") {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<ProbabilityMap> maps;
  std::vector<std::vector<NoduleAnnotation>> ann;
  for (int s = 0; s < 4; ++s) {
    ProbabilityMap pm = empty_map();
    for (Index i = 0; i < pm.prob.size(); ++i) pm.prob.data[i] = u(gen) < 0.85f ? 0.0f : u(gen);
    maps.push_back(pm);
    ann.push_back({finding("s", cell_center(s, 2, 3), 6.0)});
  }
  const FrocCurve c = froc_curve(maps, ann, default_thresholds(maps));
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    CHECK(c.points[i].threshold < c.points[i - 1].threshold);
    CHECK(c.points[i].fp_per_scan >= c.points[i - 1].fp_per_scan);
    CHECK(c.points[i].sensitivity >= c.points[i - 1].sensitivity);
    CHECK(c.points[i].fp_per_scan >= c.points[i].raw_fp_per_scan);
  }
  CHECK_THROWS_AS(froc_curve(maps, {{}, {}, {}, {}}, {0.5}), UndefinedSensitivity);
  CHECK_THROWS_AS(froc_curve(maps, {{}}, {0.5}), InvalidArgument);
}
