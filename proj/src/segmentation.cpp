#include "lungcad/segmentation.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace lungcad {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One pass of the lower-envelope squared distance transform along an axis:
// out(q) = min_p f(p) + w (q - p)^2.
void distance_pass(std::vector<double>& f, const Dims3& dims, int axis, double w) {
  const Index n = dims[axis];
  const Index stride = axis == 0 ? 1 : axis == 1 ? dims[0] : dims[0] * dims[1];
  const Index lines = voxel_count(dims) / n;
  std::vector<double> line(n), out(n), z(n + 1);
  std::vector<Index> v(n);
  for (Index l = 0; l < lines; ++l) {
    Index base;
    if (axis == 0) {
      base = l * dims[0];
    } else if (axis == 1) {
      base = (l % dims[0]) + (l / dims[0]) * dims[0] * dims[1];
    } else {
      base = l;
    }
    bool any = false;
    for (Index i = 0; i < n; ++i) {
      line[i] = f[base + i * stride];
      any |= std::isfinite(line[i]);
    }
    if (!any) continue;
    Index k = -1;
    for (Index q = 0; q < n; ++q) {
      if (!std::isfinite(line[q])) continue;
      double s = -kInf;
      while (k >= 0) {
        const Index p = v[k];
        s = ((line[q] + w * double(q) * double(q)) - (line[p] + w * double(p) * double(p))) /
            (2.0 * w * double(q - p));
        if (s <= z[k]) {
          --k;
        } else {
          break;
        }
      }
      ++k;
      v[k] = q;
      z[k] = k == 0 ? -kInf : s;
      z[k + 1] = kInf;
    }
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
      while (z[j + 1] < double(q)) ++j;
      const double d = double(q - v[j]);
      out[q] = line[v[j]] + w * d * d;
    }
    for (Index i = 0; i < n; ++i) f[base + i * stride] = out[i];
  }
}

struct UnionFind {
  std::vector<std::int32_t> parent;
  std::int32_t make() {
    parent.push_back(static_cast<std::int32_t>(parent.size()));
    return parent.back();
  }
  std::int32_t find(std::int32_t a) {
    std::int32_t r = a;
    while (parent[r] != r) r = parent[r];
    while (parent[a] != r) {
      const std::int32_t next = parent[a];
      parent[a] = r;
      a = next;
    }
    return r;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) {
      parent[b] = a;
    } else {
      parent[a] = b;
    }
  }
};

std::vector<std::array<Index, 3>> backward_offsets(Connectivity c) {
  std::vector<std::array<Index, 3>> offs;
  for (Index dz = -1; dz <= 0; ++dz)
    for (Index dy = -1; dy <= 1; ++dy)
      for (Index dx = -1; dx <= 1; ++dx) {
        const bool backward = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
        if (!backward) continue;
        const int nonzero = (dx != 0) + (dy != 0) + (dz != 0);
        if (c == Connectivity::Six && nonzero != 1) continue;
        offs.push_back({dx, dy, dz});
      }
  return offs;
}

}  // namespace

Dims3 voxel_radii(const Grid& g, double radius_mm) {
  if (radius_mm < 0) throw InvalidArgument("structuring element radius must be non-negative");
  Dims3 r;
  for (int a = 0; a < 3; ++a) r[a] = static_cast<Index>(std::floor(radius_mm / g.spacing_mm[a] + 0.5));
  return r;
}

Mask dilate_voxels(const Mask& m, const Dims3& radii) {
  std::vector<int> active;
  for (int a = 0; a < 3; ++a)
    if (radii[a] > 0) active.push_back(a);
  if (active.empty()) return m;

  // Offsets d are inside the ellipsoid iff sum_a d_a^2 / r_a^2 <= 1; scaled by
  // the product of the squared radii everything stays integral.
  double threshold = 1.0;
  for (int a : active) threshold *= double(radii[a] * radii[a]);
  std::vector<double> f(m.size());
  for (Index i = 0; i < m.size(); ++i) f[i] = m.bits[i] ? 0.0 : kInf;
  for (int a : active) {
    const double w = threshold / double(radii[a] * radii[a]);
    distance_pass(f, m.grid.dims, a, w);
  }
  Mask out(m.grid);
  for (Index i = 0; i < m.size(); ++i) out.bits[i] = f[i] <= threshold;
  return out;
}

Mask erode_voxels(const Mask& m, const Dims3& radii) {
  Mask inv(m.grid);
  inv.bits = !m.bits;
  Mask d = dilate_voxels(inv, radii);
  d.bits = !d.bits;
  return d;
}

Mask morphological_dilate(const Mask& m, double radius_mm) {
  return dilate_voxels(m, voxel_radii(m.grid, radius_mm));
}

Mask morphological_erode(const Mask& m, double radius_mm) {
  return erode_voxels(m, voxel_radii(m.grid, radius_mm));
}

Mask morphological_close(const Mask& m, double radius_mm) {
  const Dims3 r = voxel_radii(m.grid, radius_mm);
  return erode_voxels(dilate_voxels(m, r), r);
}

LabeledComponents connected_components(const Mask& m, Connectivity c) {
  const Grid& g = m.grid;
  const auto offs = backward_offsets(c);
  std::vector<std::int32_t> provisional(m.size(), -1);
  UnionFind uf;
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) {
        const Index i = g.index(x, y, z);
        if (!m.bits[i]) continue;
        std::int32_t label = -1;
        for (const auto& o : offs) {
          const Index nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!g.contains(nx, ny, nz)) continue;
          const std::int32_t nl = provisional[g.index(nx, ny, nz)];
          if (nl < 0) continue;
          if (label < 0) {
            label = nl;
          } else {
            uf.unite(label, nl);
          }
        }
        provisional[i] = label < 0 ? uf.make() : label;
      }

  LabeledComponents lc;
  lc.grid = g;
  lc.labels = decltype(lc.labels)::Zero(m.size());
  std::vector<std::int32_t> final_label(uf.parent.size(), 0);
  for (Index i = 0; i < m.size(); ++i) {
    if (provisional[i] < 0) continue;
    const std::int32_t root = uf.find(provisional[i]);
    if (final_label[root] == 0) {
      final_label[root] = ++lc.count;
      lc.sizes.push_back(0);
    }
    lc.labels[i] = final_label[root];
    ++lc.sizes[final_label[root] - 1];
  }
  return lc;
}

Mask largest_component(const LabeledComponents& lc) {
  if (lc.count == 0) throw EmptySelection("no components to select from");
  std::int32_t best = 1;
  for (std::int32_t l = 2; l <= lc.count; ++l)
    if (lc.sizes[l - 1] > lc.sizes[best - 1]) best = l;
  Mask out(lc.grid);
  out.bits = lc.labels == best;
  return out;
}

Mask connected_to(const Mask& m, const std::vector<Index>& seeds, Connectivity c) {
  const LabeledComponents lc = connected_components(m, c);
  std::vector<bool> keep(lc.count + 1, false);
  for (Index s : seeds)
    if (lc.labels[s] > 0) keep[lc.labels[s]] = true;
  Mask out(m.grid);
  for (Index i = 0; i < m.size(); ++i) out.bits[i] = keep[lc.labels[i]];
  return out;
}

namespace {

std::vector<Index> corner_voxels(const Grid& g) {
  std::vector<Index> seeds;
  for (int corner = 0; corner < 8; ++corner)
    seeds.push_back(g.index((corner & 1) ? g.dims[0] - 1 : 0, (corner & 2) ? g.dims[1] - 1 : 0,
                            (corner & 4) ? g.dims[2] - 1 : 0));
  return seeds;
}

}  // namespace

template <typename Scalar>
LungMasks extract_lung_mask(const Volume<Scalar>& v, const LungMaskParams& p) {
  if (v.unit != Unit::Hounsfield) throw InvalidArgument("extract_lung_mask expects Hounsfield units");
  const Grid& g = v.grid;
  const auto corners = corner_voxels(g);

  // Thresholding commutes with flat closing, so closing the binary tissue
  // mask equals binarizing the grey-level closing.
  const Mask tissue = morphological_close(binarize(v, p.threshold_hu), p.close_radius_mm);
  const LabeledComponents tissue_cc = connected_components(tissue, Connectivity::Six);
  if (tissue_cc.count == 0) throw SegmentationFailure("no tissue above threshold");
  const Mask body = largest_component(tissue_cc);

  Mask air(g);
  air.bits = !body.bits;
  const Mask background = connected_to(air, corners, Connectivity::Six);
  Mask interior(g);
  interior.bits = air.bits && !background.bits;
  const LabeledComponents interior_cc = connected_components(interior, Connectivity::Six);
  if (interior_cc.count == 0) throw SegmentationFailure("no below-threshold region inside the body");
  const Mask lungs = largest_component(interior_cc);

  // Inversion: everything not reachable from the corners without crossing the
  // lungs belongs to the lungs, which fills enclosed nodules and vessels.
  Mask not_lungs(g);
  not_lungs.bits = !lungs.bits;
  const Mask outside = connected_to(not_lungs, corners, Connectivity::Six);
  Mask filled(g);
  filled.bits = !outside.bits;

  LungMasks out;
  out.lung = morphological_dilate(filled, p.dilate_radius_mm);
  out.ring = Mask(g);
  out.ring.bits = out.lung.bits && !filled.bits;
  return out;
}

template <typename Scalar>
Volume<Scalar> apply_mask_normalize(const Volume<Scalar>& v, const Mask& lung, const Mask& ring) {
  if (v.unit != Unit::Luminance) throw InvalidArgument("apply_mask_normalize expects luminance");
  if (!v.grid.same_geometry(lung.grid) || !v.grid.same_geometry(ring.grid))
    throw InvalidArgument("mask geometry does not match volume");
  Volume<Scalar> out = v;
  const Scalar water = static_cast<Scalar>(kWaterLuminance);
  for (Index i = 0; i < v.size(); ++i) {
    if (!lung.bits[i]) {
      out.data[i] = water;
    } else if (ring.bits[i] && double(v.data[i]) > kRingBoneLuminance) {
      out.data[i] = water;
    }
  }
  return out;
}

template LungMasks extract_lung_mask<float>(const Volume<float>&, const LungMaskParams&);
template LungMasks extract_lung_mask<double>(const Volume<double>&, const LungMaskParams&);
template Volume<float> apply_mask_normalize<float>(const Volume<float>&, const Mask&, const Mask&);
template Volume<double> apply_mask_normalize<double>(const Volume<double>&, const Mask&, const Mask&);

}  // namespace lungcad
