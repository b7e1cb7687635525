#ifndef LUNGCAD_SVM_HPP
#define LUNGCAD_SVM_HPP

#include <vector>

#include <Eigen/Core>

#include "lungcad/common.hpp"

namespace lungcad {

struct SvmOptions {
  Index max_iterations = 100000;
  double tolerance = 1e-6;  // on the maximal KKT violation
};

/// Linear soft-margin SVM: minimises 0.5 |w|^2 + C sum max(0, 1 - y (w.x + b)).
struct BinarySvm {
  Eigen::VectorXd w;
  double b = 0.0;
  double objective = 0.0;
  Index iterations = 0;

  double decision(const Eigen::VectorXd& x) const { return w.dot(x) + b; }
};

/// Rows of X are samples; y holds +1 / -1.
BinarySvm svm_train(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const SvmOptions& o = {});

double svm_objective(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const Eigen::VectorXd& w, double b);

/// One-vs-rest over the distinct labels in ascending order.
struct SvmModel {
  std::vector<int> classes;
  Eigen::MatrixXd W;  // one row per class
  Eigen::VectorXd b;
  double C = 1.0;

  Eigen::VectorXd decision_values(const Eigen::VectorXd& x) const { return W * x + b; }
};

SvmModel svm_train_ovr(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const SvmOptions& o = {});

/// Arg-max of the decision values; ties go to the lowest class index.
int svm_predict(const SvmModel& m, const Eigen::VectorXd& x);

inline const std::vector<double> kDefaultCGrid{0.01, 0.03, 0.1, 0.3, 1, 3, 10, 30, 100, 300, 1000};

/// Highest mean F1-macro over the given folds (fold[i] in [0, k)); ties go to
/// the smaller C. Scores of every C are written to scores when non-null.
double select_C(const Eigen::MatrixXd& X, const std::vector<int>& y, const std::vector<int>& fold, int k,
                const std::vector<double>& grid, std::vector<double>* scores = nullptr, const SvmOptions& o = {});

}  // namespace lungcad

#endif  // LUNGCAD_SVM_HPP
