#ifndef LUNGCAD_METRICS_HPP
#define LUNGCAD_METRICS_HPP

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lungcad/common.hpp"

namespace lungcad {

/// counts(t, p): items of true class t predicted as p, in the order of classes.
struct ConfusionMatrix {
  std::vector<int> classes;
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> counts;

  Index total() const { return counts.sum(); }
  nlohmann::json to_json(const std::vector<std::string>& names = {}) const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                 const std::vector<int>& classes);
ConfusionMatrix confusion_from_counts(const std::vector<std::vector<Index>>& counts);

double accuracy(const ConfusionMatrix& cm);
/// Unweighted mean of per-class F1; a class never predicted and never true scores 0.
double f1_macro(const ConfusionMatrix& cm);

double mae(const std::vector<double>& preds, const std::vector<double>& targets);
/// Fraction of predictions with |error| strictly below 1.
double one_off_accuracy(const std::vector<double>& preds, const std::vector<double>& targets);

struct FoldPlan {
  int k = 10;
  std::uint64_t seed = 0;
  std::vector<std::string> scan_ids;
  std::vector<int> fold;  // aligned with scan_ids

  int fold_of(const std::string& scan_id) const;
};

/// Stratified by label, grouped by scan: each class is shuffled and dealt
/// round-robin, continuing the deal where the previous class stopped.
FoldPlan kfold_splits(const std::vector<std::string>& scan_ids, const std::vector<int>& labels, int k,
                      std::uint64_t seed);

/// p = (1 + #{perm score >= observed}) / (1 + n_perm). score_fn must be safe to
/// call concurrently; permutation i shuffles y with a seed derived from (seed, i).
double permutation_test(const std::function<double(const std::vector<int>&)>& score_fn, const std::vector<int>& y,
                        int n_perm, std::uint64_t seed, double* observed = nullptr);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  Index dof = 0;
};

/// Paired two-sided t-test on a - b; identical samples give t = 0, p = 1.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
/// CDF of Student's t with nu degrees of freedom.
double student_t_cdf(double t, double nu);

double mean_of(const std::vector<double>& v);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double stddev_of(const std::vector<double>& v);

}  // namespace lungcad

#endif  // LUNGCAD_METRICS_HPP
