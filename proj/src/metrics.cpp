#include "lungcad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace lungcad {

nlohmann::json ConfusionMatrix::to_json(const std::vector<std::string>& names) const {
  nlohmann::json j;
  nlohmann::json cls = nlohmann::json::array();
  for (std::size_t i = 0; i < classes.size(); ++i)
    cls.push_back(i < names.size() ? nlohmann::json(names[i]) : nlohmann::json(classes[i]));
  j["classes"] = cls;
  nlohmann::json rows = nlohmann::json::array();
  for (Index t = 0; t < counts.rows(); ++t) {
    nlohmann::json r = nlohmann::json::array();
    for (Index p = 0; p < counts.cols(); ++p) r.push_back(counts(t, p));
    rows.push_back(r);
  }
  j["counts"] = rows;
  return j;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                 const std::vector<int>& classes) {
  if (y_true.size() != y_pred.size()) throw InvalidArgument("confusion_matrix: length mismatch");
  ConfusionMatrix cm;
  cm.classes = classes;
  const Index k = Index(classes.size());
  cm.counts = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic>::Zero(k, k);
  auto index_of = [&](int label) {
    const auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) throw InvalidArgument("confusion_matrix: unknown label " + std::to_string(label));
    return Index(it - classes.begin());
  };
  for (std::size_t i = 0; i < y_true.size(); ++i) ++cm.counts(index_of(y_true[i]), index_of(y_pred[i]));
  return cm;
}

ConfusionMatrix confusion_from_counts(const std::vector<std::vector<Index>>& counts) {
  ConfusionMatrix cm;
  const Index k = Index(counts.size());
  cm.counts.resize(k, k);
  for (Index t = 0; t < k; ++t) {
    if (Index(counts[std::size_t(t)].size()) != k) throw InvalidArgument("confusion matrix must be square");
    cm.classes.push_back(int(t));
    for (Index p = 0; p < k; ++p) {
      if (counts[std::size_t(t)][std::size_t(p)] < 0) throw InvalidArgument("negative confusion count");
      cm.counts(t, p) = counts[std::size_t(t)][std::size_t(p)];
    }
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const Index total = cm.total();
  if (total == 0) throw InvalidArgument("accuracy of an empty confusion matrix");
  return double(cm.counts.trace()) / double(total);
}

double f1_macro(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidArgument("f1 of an empty confusion matrix");
  const Index k = cm.counts.rows();
  double sum = 0.0;
  for (Index c = 0; c < k; ++c) {
    const double tp = double(cm.counts(c, c));
    const double predicted = double(cm.counts.col(c).sum());
    const double actual = double(cm.counts.row(c).sum());
    if (tp == 0.0) continue;
    const double precision = tp / predicted, recall = tp / actual;
    sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / double(k);
}

double mae(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.empty() || preds.size() != targets.size()) throw InvalidArgument("mae needs equal nonzero lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - targets[i]);
  return s / double(preds.size());
}

double one_off_accuracy(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.empty() || preds.size() != targets.size())
    throw InvalidArgument("one-off accuracy needs equal nonzero lengths");
  Index hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += std::abs(preds[i] - targets[i]) < 1.0;
  return double(hits) / double(preds.size());
}

int FoldPlan::fold_of(const std::string& scan_id) const {
  const auto it = std::find(scan_ids.begin(), scan_ids.end(), scan_id);
  if (it == scan_ids.end()) throw InvalidArgument("scan '" + scan_id + "' is not in the fold plan");
  return fold[std::size_t(it - scan_ids.begin())];
}

FoldPlan kfold_splits(const std::vector<std::string>& scan_ids, const std::vector<int>& labels, int k,
                      std::uint64_t seed) {
  if (scan_ids.size() != labels.size()) throw InvalidArgument("kfold_splits: one label per scan is required");
  if (k < 2 || std::size_t(k) > scan_ids.size()) throw InvalidArgument("kfold_splits: need 2 <= k <= number of scans");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.scan_ids = scan_ids;
  plan.fold.assign(scan_ids.size(), -1);
  Rng rng(seed);
  std::size_t offset = 0;
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); ++i) plan.fold[members[i]] = int((offset + i) % std::size_t(k));
    offset += members.size();
  }
  return plan;
}

double permutation_test(const std::function<double(const std::vector<int>&)>& score_fn, const std::vector<int>& y,
                        int n_perm, std::uint64_t seed, double* observed) {
  if (n_perm < 1) throw InvalidArgument("permutation_test needs n_perm >= 1");
  const double base = score_fn(y);
  if (observed) *observed = base;
  std::vector<char> at_least(std::size_t(n_perm), 0);
  parallel_for(n_perm, [&](Index i) {
    std::vector<int> perm = y;
    Rng rng(mix_seed(seed, std::uint64_t(i)));
    std::shuffle(perm.begin(), perm.end(), rng);
    at_least[std::size_t(i)] = score_fn(perm) >= base;
  });
  Index count = 0;
  for (char c : at_least) count += c;
  return double(1 + count) / double(1 + n_perm);
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw NumericFailure("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw InvalidArgument("incomplete_beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double nu) {
  if (!(nu > 0)) throw InvalidArgument("student_t_cdf needs nu > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * nu, 0.5, nu / (nu + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("paired_t_test needs two equal samples of size >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  TTestResult r;
  r.dof = Index(d.size()) - 1;
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return r;
  const double m = mean_of(d), s = stddev_of(d);
  if (s == 0.0) {
    r.t = m > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = m / (s / std::sqrt(double(d.size())));
  const double nu = double(r.dof);
  r.p = std::min(1.0, incomplete_beta(0.5 * nu, 0.5, nu / (nu + r.t * r.t)));
  return r;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace lungcad
