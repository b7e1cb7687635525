#ifndef LUNGCAD_FEATURES_HPP
#define LUNGCAD_FEATURES_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lungcad/network.hpp"

namespace lungcad {

enum class View { Conventional, LowKev, HighKev };

std::string to_string(View v);
View view_from_string(const std::string& s);

struct FeatureVector {
  Eigen::VectorXd values;
  std::vector<View> views;
};

/// Conv stack of a regressor (Infer mode, dense layers excluded) applied to a
/// (1, x, y, z) luminance patch.
FeatureVector extract_features(const ModelParams<float>& model, const Tensor<float>& patch, View view);
std::vector<FeatureVector> extract_features(const ModelParams<float>& model, const std::vector<Tensor<float>>& patches,
                                            View view, Index batch_size = 32);

/// Concatenation in the fixed order conventional, low keV, high keV.
FeatureVector concat_spectral(const std::vector<FeatureVector>& per_view);

enum class Aggregation { Max, Min, Mean };

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

/// The per-nodule vectors of one scan (B_i = {x_ik}, k < n_i).
struct FeatureBag {
  std::string scan_id;
  std::vector<Eigen::VectorXd> vectors;
  int label = 0;
};

Eigen::VectorXd aggregate_elementwise(const FeatureBag& bag, Aggregation func = Aggregation::Max);

/// func over k of min over l of |x_ik - x_jl|; not symmetric in general.
double bag_distance(const FeatureBag& bi, const FeatureBag& bj, Aggregation func);

Eigen::MatrixXd dissimilarity_matrix(const std::vector<FeatureBag>& bags, const std::vector<FeatureBag>& prototypes,
                                     Aggregation func);

struct Normalized {
  Eigen::VectorXd values;
  bool degenerate = false;  // zero input returned unchanged
};

Normalized normalize_unit(const Eigen::VectorXd& x);

// Feature store: 8 magic bytes "NFEAT1\0\n", u64 header length, JSON header (rows with
// scan_id / nodule index, view tags, dims), then f32 little-endian rows.
struct FeatureRow {
  std::string scan_id;
  Index nodule_index = 0;
  int label = 0;
};

struct FeatureTable {
  std::vector<View> views;
  std::vector<FeatureRow> rows;
  Eigen::MatrixXf values;  // one row per FeatureRow
};

void write_feature_table(const std::filesystem::path& path, const FeatureTable& t);
FeatureTable read_feature_table(const std::filesystem::path& path);

}  // namespace lungcad

#endif  // LUNGCAD_FEATURES_HPP
