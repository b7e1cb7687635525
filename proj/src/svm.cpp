#include "lungcad/svm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lungcad/metrics.hpp"

namespace lungcad {

double svm_objective(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const Eigen::VectorXd& w, double b) {
  double hinge = 0.0;
  for (Index i = 0; i < X.rows(); ++i)
    hinge += std::max(0.0, 1.0 - double(y[std::size_t(i)]) * (X.row(i).dot(w) + b));
  return 0.5 * w.squaredNorm() + C * hinge;
}

// Dual coordinate ascent over maximal violating pairs (SMO) on the linear
// Gram matrix; the bias comes from the free support vectors.
BinarySvm svm_train(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const SvmOptions& o) {
  const Index n = X.rows();
  if (Index(y.size()) != n) throw InvalidArgument("svm_train: label count does not match rows");
  if (!(C > 0)) throw InvalidArgument("svm_train: C must be positive");
  bool has_pos = false, has_neg = false;
  for (int v : y) {
    if (v == 1)
      has_pos = true;
    else if (v == -1)
      has_neg = true;
    else
      throw InvalidArgument("svm_train: labels must be +1 or -1");
  }
  if (!has_pos || !has_neg) throw InvalidArgument("svm_train needs examples of both classes");

  const Eigen::MatrixXd K = X * X.transpose();
  Eigen::VectorXd yd(n);
  for (Index i = 0; i < n; ++i) yd[i] = double(y[std::size_t(i)]);
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd G = Eigen::VectorXd::Constant(n, -1.0);
  constexpr double tau = 1e-12;

  auto in_up = [&](Index t) { return yd[t] > 0 ? alpha[t] < C : alpha[t] > 0; };
  auto in_low = [&](Index t) { return yd[t] > 0 ? alpha[t] > 0 : alpha[t] < C; };

  BinarySvm out;
  for (out.iterations = 0; out.iterations < o.max_iterations; ++out.iterations) {
    Index i = -1, j = -1;
    double vmax = -std::numeric_limits<double>::infinity(), vmin = std::numeric_limits<double>::infinity();
    for (Index t = 0; t < n; ++t) {
      const double v = -yd[t] * G[t];
      if (in_up(t) && v > vmax) {
        vmax = v;
        i = t;
      }
      if (in_low(t) && v < vmin) {
        vmin = v;
        j = t;
      }
    }
    if (i < 0 || j < 0 || vmax - vmin < o.tolerance) break;

    const double ai = alpha[i], aj = alpha[j];
    const double kij = yd[i] * yd[j] * K(i, j);
    if (yd[i] != yd[j]) {
      double quad = K(i, i) + K(j, j) + 2.0 * kij;
      if (quad <= 0) quad = tau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = ai - aj;
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      double quad = K(i, i) + K(j, j) - 2.0 * kij;
      if (quad <= 0) quad = tau;
      const double delta = (G[i] - G[j]) / quad;
      const double sum = ai + aj;
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = sum;
        }
        if (alpha[i] < 0) {
          alpha[i] = 0;
          alpha[j] = sum;
        }
      }
    }
    const double di = alpha[i] - ai, dj = alpha[j] - aj;
    for (Index t = 0; t < n; ++t)
      G[t] += yd[t] * (yd[i] * K(i, t) * di + yd[j] * K(j, t) * dj);
  }

  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  double free_sum = 0.0;
  Index n_free = 0;
  for (Index t = 0; t < n; ++t) {
    const double yg = yd[t] * G[t];
    if (alpha[t] >= C) {
      if (yd[t] < 0)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else if (alpha[t] <= 0) {
      if (yd[t] > 0)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else {
      ++n_free;
      free_sum += yg;
    }
  }
  const double rho = n_free > 0 ? free_sum / double(n_free) : 0.5 * (ub + lb);
  out.w = X.transpose() * (alpha.cwiseProduct(yd));
  out.b = -rho;
  out.objective = svm_objective(X, y, C, out.w, out.b);
  return out;
}

SvmModel svm_train_ovr(const Eigen::MatrixXd& X, const std::vector<int>& y, double C, const SvmOptions& o) {
  SvmModel m;
  m.classes = y;
  std::sort(m.classes.begin(), m.classes.end());
  m.classes.erase(std::unique(m.classes.begin(), m.classes.end()), m.classes.end());
  if (m.classes.size() < 2) throw InvalidArgument("one-vs-rest needs at least two classes");
  m.C = C;
  m.W.resize(Index(m.classes.size()), X.cols());
  m.b.resize(Index(m.classes.size()));
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    std::vector<int> yb(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) yb[i] = y[i] == m.classes[c] ? 1 : -1;
    const BinarySvm s = svm_train(X, yb, C, o);
    m.W.row(Index(c)) = s.w.transpose();
    m.b[Index(c)] = s.b;
  }
  return m;
}

int svm_predict(const SvmModel& m, const Eigen::VectorXd& x) {
  const Eigen::VectorXd d = m.decision_values(x);
  Index best = 0;
  for (Index c = 1; c < d.size(); ++c)
    if (d[c] > d[best]) best = c;
  return m.classes[std::size_t(best)];
}

double select_C(const Eigen::MatrixXd& X, const std::vector<int>& y, const std::vector<int>& fold, int k,
                const std::vector<double>& grid, std::vector<double>* scores, const SvmOptions& o) {
  if (grid.empty()) throw InvalidArgument("select_C needs a nonempty grid");
  if (fold.size() != y.size() || Index(y.size()) != X.rows()) throw InvalidArgument("select_C: size mismatch");
  std::vector<Index> fold_size(std::size_t(std::max(k, 0)), 0);
  for (int f : fold) {
    if (f < 0 || f >= k) throw InvalidArgument("select_C: fold index out of range");
    ++fold_size[std::size_t(f)];
  }
  for (Index s : fold_size)
    if (s == 0) throw InvalidArgument("select_C: fewer groups than folds");
  if (grid.size() == 1) {
    if (scores) scores->assign(1, std::numeric_limits<double>::quiet_NaN());
    return grid.front();
  }

  std::vector<int> classes = y;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  std::vector<double> f1(grid.size() * std::size_t(k), 0.0);
  parallel_for(Index(f1.size()), [&](Index job) {
    const std::size_t ci = std::size_t(job) / std::size_t(k);
    const int f = int(std::size_t(job) % std::size_t(k));
    std::vector<Index> train, test;
    for (std::size_t i = 0; i < y.size(); ++i) (fold[i] == f ? test : train).push_back(Index(i));
    Eigen::MatrixXd Xtr(Index(train.size()), X.cols());
    std::vector<int> ytr;
    for (std::size_t r = 0; r < train.size(); ++r) {
      Xtr.row(Index(r)) = X.row(train[r]);
      ytr.push_back(y[std::size_t(train[r])]);
    }
    const SvmModel m = svm_train_ovr(Xtr, ytr, grid[ci], o);
    std::vector<int> truth, pred;
    for (Index t : test) {
      truth.push_back(y[std::size_t(t)]);
      pred.push_back(svm_predict(m, X.row(t).transpose()));
    }
    f1[std::size_t(job)] = f1_macro(confusion_matrix(truth, pred, classes));
  });

  double best_score = -1.0, best_C = grid.front();
  std::vector<double> means;
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    double sum = 0.0;
    for (int f = 0; f < k; ++f) sum += f1[ci * std::size_t(k) + std::size_t(f)];
    const double mean = sum / double(k);
    means.push_back(mean);
    if (mean > best_score || (mean == best_score && grid[ci] < best_C)) {
      best_score = mean;
      best_C = grid[ci];
    }
  }
  if (scores) *scores = means;
  return best_C;
}

}  // namespace lungcad
