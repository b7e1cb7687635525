#include "lungcad/features.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "lungcad/nvol.hpp"
#include "lungcad/sampling.hpp"

namespace lungcad {

using nlohmann::json;

std::string to_string(View v) {
  switch (v) {
    case View::Conventional:
      return "conventional";
    case View::LowKev:
      return "low_kev";
    case View::HighKev:
      return "high_kev";
  }
  return "conventional";
}

View view_from_string(const std::string& s) {
  if (s == "conventional") return View::Conventional;
  if (s == "low_kev") return View::LowKev;
  if (s == "high_kev") return View::HighKev;
  throw InvalidArgument("unknown view '" + s + "'");
}

std::vector<FeatureVector> extract_features(const ModelParams<float>& model, const std::vector<Tensor<float>>& patches,
                                            View view, Index batch_size) {
  if (model.arch.mode != ModelMode::Regressor)
    throw ModeMismatch("feature extraction needs a regressor, got a " + to_string(model.arch.mode));
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
  std::vector<FeatureVector> out;
  out.reserve(patches.size());
  for (std::size_t begin = 0; begin < patches.size(); begin += std::size_t(batch_size)) {
    const std::size_t end = std::min(patches.size(), begin + std::size_t(batch_size));
    std::vector<const Tensor<float>*> ptrs;
    for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&patches[i]);
    const Tensor<float> f = forward_features(model, stack_standardized(ptrs));
    const Index d = f.dim(1);
    for (std::size_t i = begin; i < end; ++i)
      out.push_back({f.data.segment(Index(i - begin) * d, d).cast<double>().matrix(), {view}});
  }
  return out;
}

FeatureVector extract_features(const ModelParams<float>& model, const Tensor<float>& patch, View view) {
  return extract_features(model, std::vector<Tensor<float>>{patch}, view).front();
}

FeatureVector concat_spectral(const std::vector<FeatureVector>& per_view) {
  if (per_view.empty()) throw InvalidArgument("concat_spectral needs at least one view");
  FeatureVector out;
  Index total = 0;
  int previous = -1;
  for (const auto& f : per_view) {
    if (f.values.size() != per_view.front().values.size())
      throw InvalidArgument("concat_spectral: per-view lengths differ");
    for (View v : f.views) {
      if (int(v) <= previous) throw InvalidArgument("concat_spectral: views must follow conventional, low, high");
      previous = int(v);
      out.views.push_back(v);
    }
    total += f.values.size();
  }
  out.values.resize(total);
  Index at = 0;
  for (const auto& f : per_view) {
    out.values.segment(at, f.values.size()) = f.values;
    at += f.values.size();
  }
  return out;
}

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::Max:
      return "max";
    case Aggregation::Min:
      return "min";
    case Aggregation::Mean:
      return "mean";
  }
  return "max";
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "max") return Aggregation::Max;
  if (s == "min") return Aggregation::Min;
  if (s == "mean") return Aggregation::Mean;
  throw InvalidArgument("unknown aggregation '" + s + "'");
}

Eigen::VectorXd aggregate_elementwise(const FeatureBag& bag, Aggregation func) {
  if (bag.vectors.empty()) throw InvalidArgument("cannot aggregate an empty bag");
  Eigen::VectorXd acc = bag.vectors.front();
  for (std::size_t k = 1; k < bag.vectors.size(); ++k) {
    const Eigen::VectorXd& v = bag.vectors[k];
    if (v.size() != acc.size()) throw InvalidArgument("bag vectors differ in length");
    switch (func) {
      case Aggregation::Max:
        acc = acc.cwiseMax(v);
        break;
      case Aggregation::Min:
        acc = acc.cwiseMin(v);
        break;
      case Aggregation::Mean:
        acc += v;
        break;
    }
  }
  if (func == Aggregation::Mean) acc /= double(bag.vectors.size());
  return acc;
}

double bag_distance(const FeatureBag& bi, const FeatureBag& bj, Aggregation func) {
  if (bi.vectors.empty() || bj.vectors.empty()) throw InvalidArgument("bag_distance on an empty bag");
  double acc = func == Aggregation::Max ? -std::numeric_limits<double>::infinity()
               : func == Aggregation::Min ? std::numeric_limits<double>::infinity()
                                          : 0.0;
  for (const auto& x : bi.vectors) {
    double nearest = std::numeric_limits<double>::infinity();
    for (const auto& y : bj.vectors) {
      if (x.size() != y.size()) throw InvalidArgument("bag_distance: vector lengths differ");
      nearest = std::min(nearest, (x - y).norm());
    }
    switch (func) {
      case Aggregation::Max:
        acc = std::max(acc, nearest);
        break;
      case Aggregation::Min:
        acc = std::min(acc, nearest);
        break;
      case Aggregation::Mean:
        acc += nearest;
        break;
    }
  }
  return func == Aggregation::Mean ? acc / double(bi.vectors.size()) : acc;
}

Eigen::MatrixXd dissimilarity_matrix(const std::vector<FeatureBag>& bags, const std::vector<FeatureBag>& prototypes,
                                     Aggregation func) {
  if (prototypes.empty()) throw InvalidArgument("dissimilarity_matrix needs prototypes");
  Eigen::MatrixXd d(Index(bags.size()), Index(prototypes.size()));
  parallel_for(Index(bags.size()), [&](Index i) {
    for (std::size_t j = 0; j < prototypes.size(); ++j) d(i, Index(j)) = bag_distance(bags[i], prototypes[j], func);
  });
  return d;
}

Normalized normalize_unit(const Eigen::VectorXd& x) {
  const double n = x.norm();
  if (n == 0.0) return {x, true};
  return {x / n, false};
}

namespace {
constexpr char kFeatureMagic[8] = {'N', 'F', 'E', 'A', 'T', '1', '\0', '\n'};
}

void write_feature_table(const std::filesystem::path& path, const FeatureTable& t) {
  if (Index(t.rows.size()) != t.values.rows()) throw InvalidArgument("feature table row count mismatch");
  json h;
  h["format"] = "NFEAT1";
  json views = json::array();
  for (View v : t.views) views.push_back(to_string(v));
  h["views"] = views;
  h["dims"] = t.values.cols();
  json rows = json::array();
  for (const auto& r : t.rows) rows.push_back({{"scan_id", r.scan_id}, {"nodule_index", r.nodule_index}, {"label", r.label}});
  h["rows"] = rows;
  const std::string text = h.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kFeatureMagic, 8);
  write_u64_le(os, text.size());
  os.write(text.data(), std::streamsize(text.size()));
  for (Index i = 0; i < t.values.rows(); ++i) {
    const Eigen::VectorXf row = t.values.row(i).transpose();
    write_f32_le(os, row.data(), std::size_t(row.size()));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

FeatureTable read_feature_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw IoError(path.string() + " is not a feature table");
  const std::uint64_t len = read_u64_le(is);
  std::string text(len, '\0');
  is.read(text.data(), std::streamsize(len));
  if (std::uint64_t(is.gcount()) != len) throw IoError(path.string() + ": truncated header");
  const json h = json::parse(text);
  FeatureTable t;
  for (const auto& v : h.at("views")) t.views.push_back(view_from_string(v.get<std::string>()));
  for (const auto& r : h.at("rows"))
    t.rows.push_back({r.at("scan_id").get<std::string>(), r.at("nodule_index").get<Index>(), r.at("label").get<int>()});
  const Index dims = h.at("dims").get<Index>();
  t.values.resize(Index(t.rows.size()), dims);
  Eigen::VectorXf row(dims);
  for (Index i = 0; i < t.values.rows(); ++i) {
    read_f32_le(is, row.data(), std::size_t(dims));
    t.values.row(i) = row.transpose();
  }
  return t;
}

}  // namespace lungcad
