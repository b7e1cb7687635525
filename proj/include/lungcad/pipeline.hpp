#ifndef LUNGCAD_PIPELINE_HPP
#define LUNGCAD_PIPELINE_HPP

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungcad/features.hpp"
#include "lungcad/metrics.hpp"
#include "lungcad/phantom.hpp"
#include "lungcad/svm.hpp"
#include "lungcad/training.hpp"

namespace lungcad {

/// Every knob of the pipeline with its default, as one JSON document. User
/// configs are merged over it (RFC 7386 merge patch), except that a given
/// phantom class mix replaces the default mix.
nlohmann::json default_config();

struct PipelineConfig {
  nlohmann::json values;
  std::filesystem::path out_dir = "lungcad_out";
  std::ostream* log = nullptr;

  static PipelineConfig from_json(const nlohmann::json& user, const std::filesystem::path& out_dir);
  /// Value at a JSON pointer such as "/detection/lr".
  const nlohmann::json& at(const std::string& pointer) const;
  /// Named path from "/paths", relative to out_dir unless absolute.
  std::filesystem::path path(const std::string& name) const;
  std::uint64_t seed() const;
};

// Pipeline stages. Each reads the previous stage's artifacts from disk,
// writes its own outputs plus a provenance record, and returns the summary
// it wrote.
nlohmann::json cmd_phantom(const PipelineConfig& cfg);
nlohmann::json cmd_preprocess(const PipelineConfig& cfg);
nlohmann::json cmd_train_detector(const PipelineConfig& cfg);
nlohmann::json cmd_detect(const PipelineConfig& cfg);
nlohmann::json cmd_froc(const PipelineConfig& cfg);
nlohmann::json cmd_train_regressor(const PipelineConfig& cfg);
nlohmann::json cmd_extract_features(const PipelineConfig& cfg);
nlohmann::json cmd_classify(const PipelineConfig& cfg);
nlohmann::json cmd_stats(const PipelineConfig& cfg);

/// Scan-level diagnosis classes: three-class {benign, primary, metastases},
/// two-class {benign, malignant}, or four-class with the metastases split by
/// origin.
enum class ClassMode { Two, Three, Four };

ClassMode class_mode_from_string(const std::string& s);
int fold_label(NoduleLabel l, ClassMode mode);
std::vector<std::string> class_names(ClassMode mode);

/// Nodule feature vectors of one classification run, grouped per scan.
struct ClassificationData {
  std::vector<FeatureBag> bags;  // labels already folded
  std::vector<std::string> view_names;
};

ClassificationData load_classification_data(const PipelineConfig& cfg, const std::vector<View>& views, ClassMode mode);

struct ClassificationOutcome {
  double C = 0.0;
  std::vector<double> c_scores;  // mean F1-macro per grid value
  std::vector<int> predicted;  // per sample
  std::vector<Eigen::VectorXd> decision_values;
  std::vector<int> truth;
  std::vector<int> fold;
  std::vector<std::string> sample_scan;
  std::vector<Index> sample_nodule;  // -1 at scan level
  std::vector<double> fold_accuracy, fold_f1;
  ConfusionMatrix confusion;
  double accuracy = 0.0, f1 = 0.0;
};

struct ClassifierSettings {
  ClassMode mode = ClassMode::Three;
  Aggregation aggregation = Aggregation::Max;
  bool distance_bags = false;  // bag dissimilarity instead of element-wise pooling
  bool nodule_level = false;
  int folds = 10;
  std::vector<double> c_grid = kDefaultCGrid;
  std::uint64_t seed = 0;
};

/// Grouped stratified cross-validation of the linear SVM. The fold plan comes
/// from the true labels; labels, when given, replace the bag labels (used by
/// the permutation test so the C search is refit on permuted data).
ClassificationOutcome cross_validate(const ClassificationData& data, const ClassifierSettings& s,
                                     const std::vector<int>* labels = nullptr);

/// Runs a named stage ("phantom", "preprocess", ...).
nlohmann::json run_command(const std::string& name, const PipelineConfig& cfg);
const std::vector<std::string>& command_names();

}  // namespace lungcad

#endif  // LUNGCAD_PIPELINE_HPP
