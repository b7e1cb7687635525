#include "lungcad/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lungcad/nvol.hpp"

namespace lungcad {

namespace {

const std::array<std::pair<NoduleLabel, const char*>, 6> kLabelNames{{
    {NoduleLabel::Benign, "benign"},
    {NoduleLabel::BenignMultinodular, "benign_multinodular"},
    {NoduleLabel::PrimaryLung, "primary_lung"},
    {NoduleLabel::Melanoma, "melanoma"},
    {NoduleLabel::Colorectal, "colorectal"},
    {NoduleLabel::Unlabeled, "unlabeled"},
}};

}  // namespace

std::string to_string(NoduleLabel l) {
  for (const auto& [k, name] : kLabelNames)
    if (k == l) return name;
  return "unlabeled";
}

NoduleLabel nodule_label_from_string(const std::string& s) {
  for (const auto& [k, name] : kLabelNames)
    if (s == name) return k;
  throw InvalidArgument("unknown nodule label '" + s + "'");
}

std::string to_string(Relevance r) { return r == Relevance::Relevant ? "relevant" : "irrelevant"; }

Relevance relevance_from_string(const std::string& s) {
  if (s == "relevant") return Relevance::Relevant;
  if (s == "irrelevant") return Relevance::Irrelevant;
  throw InvalidArgument("unknown relevance '" + s + "'");
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Positive:
      return "positive";
    case Provenance::RandomNegative:
      return "random_negative";
    case Provenance::CandidateNegative:
      return "candidate_negative";
    case Provenance::HardNegative:
      return "hard_negative";
  }
  return "positive";
}

void write_annotations_csv(const std::filesystem::path& path, const std::vector<NoduleAnnotation>& rows) {
  std::vector<std::vector<std::string>> out;
  for (const auto& a : rows)
    out.push_back({a.scan_id, format_number(a.center.x_mm), format_number(a.center.y_mm),
                   format_number(a.center.z_mm), format_number(a.diameter_mm), to_string(a.label),
                   a.malignancy ? format_number(*a.malignancy) : "", to_string(a.relevance)});
  write_csv(path, {"scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "label", "malignancy", "relevance"}, out);
}

std::vector<NoduleAnnotation> read_annotations_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t id = t.column("scan_id"), x = t.column("x_mm"), y = t.column("y_mm"), z = t.column("z_mm"),
                    d = t.column("diameter_mm"), lab = t.column("label"), mal = t.column("malignancy"),
                    rel = t.column("relevance");
  std::vector<NoduleAnnotation> out;
  for (const auto& r : t.rows) {
    NoduleAnnotation a;
    a.scan_id = r[id];
    a.center = {parse_number(r[x]), parse_number(r[y]), parse_number(r[z])};
    a.diameter_mm = parse_number(r[d]);
    if (!(a.diameter_mm > 0)) throw InvalidArgument(path.string() + ": diameter must be positive");
    a.label = nodule_label_from_string(r[lab]);
    if (!r[mal].empty()) a.malignancy = parse_number(r[mal]);
    a.relevance = relevance_from_string(r[rel]);
    out.push_back(std::move(a));
  }
  return out;
}

void write_candidates_csv(const std::filesystem::path& path, const std::vector<Candidate>& rows) {
  std::vector<std::vector<std::string>> out;
  for (const auto& c : rows)
    out.push_back({c.scan_id, format_number(c.center.x_mm), format_number(c.center.y_mm),
                   format_number(c.center.z_mm)});
  write_csv(path, {"scan_id", "x_mm", "y_mm", "z_mm"}, out);
}

std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t id = t.column("scan_id"), x = t.column("x_mm"), y = t.column("y_mm"), z = t.column("z_mm");
  std::vector<Candidate> out;
  for (const auto& r : t.rows) out.push_back({r[id], {parse_number(r[x]), parse_number(r[y]), parse_number(r[z])}});
  return out;
}

PatchWindow patch_window(const Grid& g, const WorldPoint& center, const Vec3& size_mm) {
  if (!center.finite()) throw InvalidArgument("patch center must be finite");
  PatchWindow w;
  for (int a = 0; a < 3; ++a) {
    if (!(size_mm[a] > 0)) throw InvalidArgument("patch size must be positive");
    const Index n = std::max<Index>(1, std::llround(size_mm[a] / g.spacing_mm[a]));
    const double c = g.continuous(center, a);
    if (c < -0.5 * double(n) || c > double(g.dims[a] - 1) + 0.5 * double(n))
      throw OutOfBounds("patch center lies more than half a patch outside the volume");
    w.size[a] = n;
    w.start[a] = static_cast<Index>(std::floor(c + 0.5)) - n / 2;
  }
  return w;
}

Box window_box(const Grid& g, const PatchWindow& w) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = g.origin_mm[a] + (double(w.start[a]) - 0.5) * g.spacing_mm[a];
    b.hi[a] = g.origin_mm[a] + (double(w.start[a] + w.size[a]) - 0.5) * g.spacing_mm[a];
  }
  return b;
}

bool sphere_intersects_box(const WorldPoint& c, double radius, const Box& b) {
  double d2 = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double v = c[a];
    const double d = v < b.lo[a] ? b.lo[a] - v : v > b.hi[a] ? v - b.hi[a] : 0.0;
    d2 += d * d;
  }
  return d2 < radius * radius;
}

bool sphere_inside_box(const WorldPoint& c, double radius, const Box& b) {
  for (int a = 0; a < 3; ++a)
    if (c[a] - radius < b.lo[a] || c[a] + radius > b.hi[a]) return false;
  return true;
}

namespace {

template <typename Scalar>
Tensor<Scalar> affine_impl(const Tensor<Scalar>& patch, double rotation_deg, double scale) {
  if (!(scale >= 0.5 && scale <= 1.5)) throw InvalidArgument("affine scale must lie in [0.5, 1.5]");
  if (patch.rank() < 3) throw InvalidArgument("affine augmentation expects three spatial axes");
  const Index r = patch.rank();
  const Index n[3] = {patch.dim(r - 3), patch.dim(r - 2), patch.dim(r - 1)};
  const Index lead = patch.size() / (n[0] * n[1] * n[2]);
  const double theta = rotation_deg * M_PI / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double c[3] = {0.5 * double(n[0] - 1), 0.5 * double(n[1] - 1), 0.5 * double(n[2] - 1)};
  constexpr double tol = 1e-6;
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); };

  Tensor<Scalar> out(patch.shape, Scalar(kWaterLuminance));
  for (Index x = 0; x < n[0]; ++x)
    for (Index y = 0; y < n[1]; ++y)
      for (Index z = 0; z < n[2]; ++z) {
        const double dx = double(x) - c[0], dy = double(y) - c[1], dz = double(z) - c[2];
        const double src[3] = {c[0] + scale * (cs * dx + sn * dy), c[1] + scale * (-sn * dx + cs * dy),
                               c[2] + scale * dz};
        Index lo[3];
        double frac[3];
        bool inside = true;
        for (int a = 0; a < 3 && inside; ++a) {
          if (src[a] < -tol || src[a] > double(n[a] - 1) + tol) {
            inside = false;
            break;
          }
          const double v = std::clamp(src[a], 0.0, double(n[a] - 1));
          lo[a] = std::min<Index>(static_cast<Index>(std::floor(v)), n[a] - 1);
          frac[a] = v - double(lo[a]);
          if (frac[a] < tol) frac[a] = 0.0;
        }
        if (!inside) continue;
        for (Index l = 0; l < lead; ++l) {
          const Scalar* p = patch.ptr() + l * n[0] * n[1] * n[2];
          auto at = [&](Index ox, Index oy, Index oz) {
            return double(p[(std::min(lo[0] + ox, n[0] - 1) * n[1] + std::min(lo[1] + oy, n[1] - 1)) * n[2] +
                            std::min(lo[2] + oz, n[2] - 1)]);
          };
          double face[2];
          for (Index oz = 0; oz < 2; ++oz) {
            const double e0 = lerp(at(0, 0, oz), at(1, 0, oz), frac[0]);
            const double e1 = lerp(at(0, 1, oz), at(1, 1, oz), frac[0]);
            face[oz] = lerp(e0, e1, frac[1]);
          }
          out[((l * n[0] + x) * n[1] + y) * n[2] + z] = Scalar(lerp(face[0], face[1], frac[2]));
        }
      }
  return out;
}

}  // namespace

Tensor<float> augment_affine(const Tensor<float>& patch, double rotation_deg, double scale) {
  return affine_impl(patch, rotation_deg, scale);
}

Tensor<double> augment_affine(const Tensor<double>& patch, double rotation_deg, double scale) {
  return affine_impl(patch, rotation_deg, scale);
}

std::optional<WorldPoint> draw_positive_center(const Grid& g, const NoduleAnnotation& a, const PositiveOptions& o,
                                               Rng& rng) {
  const double r = a.radius_mm();
  double feasible[3];
  for (int ax = 0; ax < 3; ++ax) {
    feasible[ax] = std::min(o.max_shift_mm, 0.5 * o.patch_mm[ax] - r);
    if (feasible[ax] < 0) return std::nullopt;
  }
  auto fits = [&](const WorldPoint& c) {
    return sphere_inside_box(a.center, r, window_box(g, patch_window(g, c, o.patch_mm)));
  };
  for (int attempt = 0; attempt < o.max_attempts; ++attempt) {
    double shift[3];
    for (int ax = 0; ax < 3; ++ax)
      shift[ax] = feasible[ax] > 0 ? std::uniform_real_distribution<double>(-feasible[ax], feasible[ax])(rng) : 0.0;
    const WorldPoint c{a.center.x_mm + shift[0], a.center.y_mm + shift[1], a.center.z_mm + shift[2]};
    if (fits(c)) return c;
  }
  if (fits(a.center)) return a.center;
  return std::nullopt;
}

std::vector<PatchSample> sample_positives(const VolumeF& v, const std::vector<NoduleAnnotation>& annotations,
                                          Rng& rng, const PositiveOptions& o, SamplingReport* report) {
  std::vector<PatchSample> out;
  for (const auto& a : annotations) {
    if (a.relevance != Relevance::Relevant) continue;
    if (o.regression) {
      if (!a.malignancy) throw InvalidArgument("regression positives need a malignancy score");
      out.push_back({crop_patch(v, a.center, o.patch_mm), *a.malignancy, Provenance::Positive, a.center});
      continue;
    }
    for (int copy = 0; copy < o.copies; ++copy) {
      const auto c = draw_positive_center(v.grid, a, o, rng);
      if (!c) {
        if (report) {
          report->warnings.push_back("nodule of " + format_number(a.diameter_mm) + " mm in scan '" + a.scan_id +
                                     "' cannot fit inside the patch; skipped");
          report->shortfall = true;
        }
        break;
      }
      out.push_back({crop_patch(v, *c, o.patch_mm), 1.0, Provenance::Positive, *c});
    }
  }
  return out;
}

bool negative_is_clear(const Grid& g, const WorldPoint& center, const Vec3& patch_mm,
                       const std::vector<NoduleAnnotation>& annotations) {
  const Box b = window_box(g, patch_window(g, center, patch_mm));
  for (const auto& a : annotations)
    if (sphere_intersects_box(a.center, a.radius_mm(), b)) return false;
  return true;
}

std::vector<std::pair<WorldPoint, Provenance>> draw_negative_centers(const Grid& g, const Mask& lung,
                                                                    const std::vector<WorldPoint>& candidates,
                                                                    const std::vector<NoduleAnnotation>& annotations,
                                                                    Rng& rng, const NegativeOptions& o,
                                                                    SamplingReport* report) {
  if (!lung.grid.same_geometry(g)) throw InvalidArgument("lung mask geometry does not match the volume");
  std::vector<std::pair<WorldPoint, Provenance>> out;
  auto flag = [&](const std::string& msg) {
    if (!report) return;
    report->shortfall = true;
    report->warnings.push_back(msg);
  };

  std::vector<Index> lung_voxels;
  for (Index i = 0; i < lung.bits.size(); ++i)
    if (lung.bits[i]) lung_voxels.push_back(i);
  int found = 0;
  if (!lung_voxels.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, lung_voxels.size() - 1);
    for (int k = 0; k < o.n_random; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < o.attempts_per_sample && !ok; ++attempt) {
        const Index i = lung_voxels[pick(rng)];
        const Index x = i % g.dims[0], y = (i / g.dims[0]) % g.dims[1], z = i / (g.dims[0] * g.dims[1]);
        const WorldPoint c = g.world(double(x), double(y), double(z));
        if (negative_is_clear(g, c, o.patch_mm, annotations)) {
          out.emplace_back(c, Provenance::RandomNegative);
          ok = true;
        }
      }
      if (!ok) break;
      ++found;
    }
  }
  if (found < o.n_random)
    flag("only " + std::to_string(found) + " of " + std::to_string(o.n_random) + " random negatives found");

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::shuffle(order.begin(), order.end(), rng);
  int taken = 0;
  for (std::size_t k = 0; k < order.size() && taken < o.n_candidate; ++k) {
    const WorldPoint& c = candidates[order[k]];
    try {
      if (!negative_is_clear(g, c, o.patch_mm, annotations)) continue;
    } catch (const OutOfBounds&) {
      continue;
    }
    out.emplace_back(c, Provenance::CandidateNegative);
    ++taken;
  }
  if (taken < o.n_candidate)
    flag("only " + std::to_string(taken) + " of " + std::to_string(o.n_candidate) + " candidate negatives found");
  return out;
}

std::vector<PatchSample> sample_negatives(const VolumeF& v, const Mask& lung, const std::vector<WorldPoint>& candidates,
                                          const std::vector<NoduleAnnotation>& annotations, Rng& rng,
                                          const NegativeOptions& o, SamplingReport* report) {
  std::vector<PatchSample> out;
  for (const auto& [c, prov] : draw_negative_centers(v.grid, lung, candidates, annotations, rng, o, report))
    out.push_back({crop_patch(v, c, o.patch_mm), 0.0, prov, c});
  return out;
}

BalancedBatcher::BalancedBatcher(std::size_t n_pos, std::size_t n_neg, Index batch_size, std::uint64_t seed)
    : half_(batch_size / 2), rng_(seed) {
  if (batch_size < 2 || batch_size % 2 != 0) throw InvalidArgument("balanced batch size must be even and >= 2");
  if (n_pos == 0 || n_neg == 0) throw InvalidArgument("balanced batches need both positives and negatives");
  pos_.order.resize(n_pos);
  neg_.order.resize(n_neg);
  std::iota(pos_.order.begin(), pos_.order.end(), std::size_t(0));
  std::iota(neg_.order.begin(), neg_.order.end(), std::size_t(0));
  pos_.cursor = n_pos;
  neg_.cursor = n_neg;
}

std::size_t BalancedBatcher::draw(Pool& p) {
  if (p.cursor == p.order.size()) {
    std::shuffle(p.order.begin(), p.order.end(), rng_);
    p.cursor = 0;
  }
  return p.order[p.cursor++];
}

BalancedBatcher::Batch BalancedBatcher::next() {
  Batch b;
  for (Index i = 0; i < half_; ++i) b.positives.push_back(draw(pos_));
  for (Index i = 0; i < half_; ++i) b.negatives.push_back(draw(neg_));
  return b;
}

Tensor<float> stack_standardized(const std::vector<const Tensor<float>*>& patches) {
  if (patches.empty()) throw InvalidArgument("cannot stack an empty patch list");
  const Tensor<float>& first = *patches.front();
  if (first.rank() != 4 || first.dim(0) != 1) throw InvalidArgument("patches must have shape (1, x, y, z)");
  Tensor<float> out({Index(patches.size()), 1, first.dim(1), first.dim(2), first.dim(3)});
  const Index n = first.size();
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i]->shape != first.shape) throw InvalidArgument("patches in a batch must share a shape");
    out.data.segment(Index(i) * n, n) = patches[i]->data / 255.0f;
  }
  return out;
}

}  // namespace lungcad
