#include <doctest.h>

#include <filesystem>
#include <map>
#include <random>

#include "lungcad/nvol.hpp"
#include "lungcad/pipeline.hpp"

using namespace lungcad;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Bags of 2-6 noisy copies of a class prototype direction.
ClassificationData synthetic_bags(int per_class, int classes, double spread, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> noise(0.0, spread);
  std::uniform_int_distribution<int> count(2, 6);
  ClassificationData d;
  d.view_names = {"conventional"};
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      FeatureBag b;
      b.scan_id = "c" + std::to_string(c) + "_" + std::to_string(i);
      b.label = c;
      const int n = count(gen);
      for (int k = 0; k < n; ++k) {
        Eigen::VectorXd v = Eigen::VectorXd::Constant(6, 0.1);
        v[c] = 1.0;
        for (Index j = 0; j < v.size(); ++j) v[j] += noise(gen);
        b.vectors.push_back(v.cwiseAbs());
      }
      d.bags.push_back(b);
    }
  return d;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_text_file(e.path());
  return out;
}

}  // namespace

TEST_CASE("configuration merges over the defaults") {
  const json user = {{"seed", 7}, {"detection", {{"lr", 0.5}}}, {"paths", {{"corpus", "/abs/corpus"}}}};
  const PipelineConfig cfg = PipelineConfig::from_json(user, "out");
  CHECK(cfg.seed() == 7);
  CHECK(cfg.at("/detection/lr").get<double>() == 0.5);
  CHECK(cfg.at("/detection/train_scans").get<int>() == 80);
  CHECK(cfg.at("/detection/batch_size/small32").get<int>() == 40);
  CHECK(cfg.at("/detection/batch_size/large64").get<int>() == 10);
  CHECK(cfg.at("/network/width_divisor").get<int>() == 8);
  CHECK(cfg.at("/preprocess/threshold_hu").get<double>() == -320.0);
  CHECK(cfg.at("/classify/c_grid").get<std::vector<double>>() == kDefaultCGrid);
  CHECK(cfg.path("corpus") == fs::path("/abs/corpus"));
  CHECK(cfg.path("models") == fs::path("out") / "models");
  CHECK_THROWS_AS(cfg.at("/no/such/key"), InvalidArgument);
  CHECK(command_names().size() == 9);
  CHECK_THROWS_AS(run_command("bogus", cfg), InvalidArgument);
}

TEST_CASE("diagnosis labels fold into two or three classes") {
  CHECK(fold_label(NoduleLabel::Benign, ClassMode::Three) == 0);
  CHECK(fold_label(NoduleLabel::BenignMultinodular, ClassMode::Three) == 0);
  CHECK(fold_label(NoduleLabel::PrimaryLung, ClassMode::Three) == 1);
  CHECK(fold_label(NoduleLabel::Melanoma, ClassMode::Three) == 2);
  CHECK(fold_label(NoduleLabel::Colorectal, ClassMode::Three) == 2);
  // Primary lung cancer and metastases together form the malignant class.
  CHECK(fold_label(NoduleLabel::Benign, ClassMode::Two) == 0);
  CHECK(fold_label(NoduleLabel::BenignMultinodular, ClassMode::Two) == 0);
  CHECK(fold_label(NoduleLabel::PrimaryLung, ClassMode::Two) == 1);
  CHECK(fold_label(NoduleLabel::Melanoma, ClassMode::Two) == 1);
  CHECK(fold_label(NoduleLabel::Colorectal, ClassMode::Two) == 1);
  CHECK_THROWS_AS(fold_label(NoduleLabel::Unlabeled, ClassMode::Two), InvalidArgument);
  CHECK(class_names(ClassMode::Two).size() == 2);
  CHECK(class_names(ClassMode::Three).size() == 3);
  CHECK(fold_label(NoduleLabel::Melanoma, ClassMode::Four) == 2);
  CHECK(fold_label(NoduleLabel::Colorectal, ClassMode::Four) == 3);
  CHECK(fold_label(NoduleLabel::BenignMultinodular, ClassMode::Four) == 0);
  CHECK(class_names(ClassMode::Four).size() == 4);
  CHECK(class_mode_from_string("four") == ClassMode::Four);
  CHECK_THROWS_AS(class_mode_from_string("five"), InvalidArgument);
}

TEST_CASE("cross-validation on separable bags") {
  const ClassificationData d = synthetic_bags(10, 3, 0.05, 3);
  ClassifierSettings s;
  s.folds = 5;
  s.seed = 11;
  const ClassificationOutcome o = cross_validate(d, s);
  CHECK(o.accuracy == 1.0);
  CHECK(o.f1 == 1.0);
  CHECK(o.predicted.size() == 30);
  CHECK(o.fold_accuracy.size() == 5);
  CHECK(o.c_scores.size() == kDefaultCGrid.size());
  CHECK(o.confusion.total() == 30);
  for (Index n : o.sample_nodule) CHECK(n == -1);

  // Deterministic, and the same scans always share a fold.
  const ClassificationOutcome again = cross_validate(d, s);
  CHECK(again.predicted == o.predicted);
  CHECK(again.fold == o.fold);

  s.nodule_level = true;
  const ClassificationOutcome nl = cross_validate(d, s);
  std::size_t nodules = 0;
  for (const auto& b : d.bags) nodules += b.vectors.size();
  CHECK(nl.predicted.size() == nodules);
  std::map<std::string, int> fold_of;
  for (std::size_t i = 0; i < nl.sample_scan.size(); ++i) {
    auto [it, fresh] = fold_of.emplace(nl.sample_scan[i], nl.fold[i]);
    CHECK(it->second == nl.fold[i]);
  }
  CHECK(nl.accuracy > 0.95);

  s.nodule_level = false;
  s.distance_bags = true;
  const ClassificationOutcome db = cross_validate(d, s);
  CHECK(db.accuracy > 0.9);
  s.nodule_level = true;
  CHECK_THROWS_AS(cross_validate(d, s), InvalidArgument);
}

TEST_CASE("label overrides drive the permutation null") {
  const ClassificationData d = synthetic_bags(8, 2, 0.05, 5);
  ClassifierSettings s;
  s.folds = 4;
  s.c_grid = {0.1, 1.0, 10.0};
  std::vector<int> y;
  for (const auto& b : d.bags) y.push_back(b.label);
  CHECK(cross_validate(d, s, &y).accuracy == cross_validate(d, s).accuracy);
  std::vector<int> shuffled = y;
  std::mt19937_64 gen(2);
  std::shuffle(shuffled.begin(), shuffled.end(), gen);
  const ClassificationOutcome o = cross_validate(d, s, &shuffled);
  CHECK(o.truth.size() == y.size());
  CHECK(o.accuracy < 1.0);
  const double p = permutation_test([&](const std::vector<int>& l) { return cross_validate(d, s, &l).accuracy; }, y,
                                    19, 4);
  CHECK(p == doctest::Approx(0.05));
  const std::vector<int> wrong(3, 0);
  CHECK_THROWS_AS(cross_validate(d, s, &wrong), InvalidArgument);
}

TEST_CASE("micro-corpus runs end to end and reruns byte-identically") {
  const fs::path root = fs::temp_directory_path() / "lungcad_test_pipeline";
  fs::remove_all(root);
  const json user = json::parse(read_text_file(fs::path(LUNGCAD_CONFIG_DIR) / "micro.json"));
  PipelineConfig cfg = PipelineConfig::from_json(user, root);

  CHECK_THROWS_AS(cmd_preprocess(cfg), IoError);  // no corpus yet
  std::map<std::string, json> first;
  for (const auto& name : command_names()) first[name] = run_command(name, cfg);
  CHECK(first["phantom"]["scans"] == 6);
  CHECK(first["train-detector"]["small32"]["hard_negatives"].get<int>() <= 2);
  CHECK(first["detect"]["scans"].size() == 1);
  CHECK(first["detect"]["maps"].size() == 3);
  for (const char* tag : {"small32", "large64", "fused"}) CHECK(first["froc"][tag]["monotone"].get<bool>());
  CHECK(first["extract-features"].size() == 3);
  CHECK(first["classify"]["spectral"]["scan"]["samples"] == 6);
  CHECK(first["stats"]["paired_t_test"].contains("p"));
  for (const auto& name : command_names()) CHECK(fs::exists(cfg.path("provenance") / (name + ".json")));

  const auto before = snapshot(root);
  for (const auto& name : command_names()) CHECK(run_command(name, cfg) == first[name]);
  const auto after = snapshot(root);
  REQUIRE(before.size() == after.size());
  for (const auto& [path, bytes] : before) {
    INFO(path);
    CHECK(after.at(path) == bytes);
  }

  // Missing upstream artifacts are reported, not silently skipped.
  fs::remove_all(cfg.path("models"));
  CHECK_THROWS_AS(cmd_detect(cfg), IoError);
  CHECK_THROWS_AS(cmd_extract_features(cfg), IoError);
  fs::remove_all(root);
}
