#include "lungcad/detection.hpp"

#include <cmath>

#include "lungcad/nvol.hpp"
#include "lungcad/sampling.hpp"

namespace lungcad {

std::string to_string(ScaleTag s) {
  switch (s) {
    case ScaleTag::Small32:
      return "small32";
    case ScaleTag::Large64:
      return "large64";
    case ScaleTag::Fused:
      return "fused";
  }
  return "fused";
}

ScaleTag scale_tag_from_string(const std::string& s) {
  if (s == "small32") return ScaleTag::Small32;
  if (s == "large64") return ScaleTag::Large64;
  if (s == "fused") return ScaleTag::Fused;
  throw InvalidArgument("unknown scale tag '" + s + "'");
}

Vec3 scale_patch_mm(ScaleTag s) {
  switch (s) {
    case ScaleTag::Small32:
      return {32.0, 32.0, 32.0};
    case ScaleTag::Large64:
      return {64.0, 64.0, 64.0};
    case ScaleTag::Fused:
      break;
  }
  throw InvalidArgument("the fused tag has no patch size");
}

std::pair<WorldPoint, WorldPoint> ProbabilityMap::cell_bounds(Index linear) const {
  const Grid& g = grid();
  const Index x = linear % g.dims[0], y = (linear / g.dims[0]) % g.dims[1], z = linear / (g.dims[0] * g.dims[1]);
  const WorldPoint c = g.world(double(x), double(y), double(z));
  const double h = 0.5 * cell_mm;
  return {{c.x_mm - h, c.y_mm - h, c.z_mm - h}, {c.x_mm + h, c.y_mm + h, c.z_mm + h}};
}

Grid cell_grid(const Grid& volume, double cell_mm) {
  if (!(cell_mm > 0)) throw InvalidArgument("cell size must be positive");
  volume.validate();
  Grid g;
  for (int a = 0; a < 3; ++a) {
    const double extent = double(volume.dims[a]) * volume.spacing_mm[a];
    g.dims[a] = std::max<Index>(1, static_cast<Index>(std::ceil(extent / cell_mm - 1e-9)));
    g.spacing_mm[a] = cell_mm;
    g.origin_mm[a] = volume.origin_mm[a] - 0.5 * volume.spacing_mm[a] + 0.5 * cell_mm;
  }
  return g;
}

ProbabilityMap sliding_window_predict(const ModelParams<float>& model, const VolumeF& luminance, const Mask& lung,
                                      ScaleTag scale, const SlidingWindowOptions& o) {
  if (model.arch.mode != ModelMode::Detector) throw InvalidArgument("sliding-window prediction needs a detector");
  if (luminance.unit != Unit::Luminance) throw InvalidArgument("sliding-window prediction expects luminance");
  if (!lung.grid.same_geometry(luminance.grid)) throw InvalidArgument("lung mask geometry does not match");
  if (o.batch_size < 1) throw InvalidArgument("batch size must be positive");
  const Vec3 patch_mm = scale_patch_mm(scale);
  for (int a = 0; a < 3; ++a)
    if (std::llround(patch_mm[a] / luminance.grid.spacing_mm[a]) != model.arch.input[a])
      throw InvalidArgument("model input " + shape_string({model.arch.input[0], model.arch.input[1],
                                                           model.arch.input[2]}) +
                            " does not match the " + to_string(scale) + " patch at this spacing");

  ProbabilityMap pm;
  pm.cell_mm = o.cell_mm;
  pm.scale_tag = scale;
  pm.prob = VolumeF(cell_grid(luminance.grid, o.cell_mm), Unit::RawDetector, 0.0f);
  const Grid& cg = pm.grid();

  std::vector<Index> cells;
  std::vector<WorldPoint> centers;
  for (Index z = 0; z < cg.dims[2]; ++z)
    for (Index y = 0; y < cg.dims[1]; ++y)
      for (Index x = 0; x < cg.dims[0]; ++x) {
        const WorldPoint c = cg.world(double(x), double(y), double(z));
        const Index vx = std::llround(luminance.grid.continuous(c, 0));
        const Index vy = std::llround(luminance.grid.continuous(c, 1));
        const Index vz = std::llround(luminance.grid.continuous(c, 2));
        if (!lung.grid.contains(vx, vy, vz) || !lung(vx, vy, vz)) continue;
        cells.push_back(cg.index(x, y, z));
        centers.push_back(c);
      }

  Rng unused(0);
  for (std::size_t begin = 0; begin < cells.size(); begin += std::size_t(o.batch_size)) {
    const std::size_t end = std::min(cells.size(), begin + std::size_t(o.batch_size));
    std::vector<Tensor<float>> patches(end - begin);
    parallel_for(Index(end - begin),
                 [&](Index i) { patches[i] = crop_patch(luminance, centers[begin + std::size_t(i)], patch_mm); });
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& p : patches) ptrs.push_back(&p);
    const Tensor<float> out = model_forward(model, stack_standardized(ptrs), Mode::Infer, unused);
    for (std::size_t i = begin; i < end; ++i) pm.prob.data[cells[i]] = out[Index(i - begin)];
  }
  return pm;
}

ProbabilityMap fuse_scales(const std::vector<ProbabilityMap>& maps) {
  if (maps.empty()) throw InvalidArgument("fuse_scales needs at least one map");
  for (const auto& m : maps)
    if (!m.grid().same_geometry(maps.front().grid()) || m.cell_mm != maps.front().cell_mm)
      throw InvalidArgument("fuse_scales: probability maps differ in geometry");
  ProbabilityMap out = maps.front();
  out.scale_tag = ScaleTag::Fused;
  for (Index i = 0; i < out.prob.size(); ++i) {
    double sum = 0.0;
    for (const auto& m : maps) sum += double(m.prob.data[i]);
    out.prob.data[i] = float(sum / double(maps.size()));
  }
  return out;
}

void write_probability_map(const std::filesystem::path& base, const ProbabilityMap& pm) {
  write_nvol(base, pm.prob, {{"scale_tag", to_string(pm.scale_tag)}, {"cell_mm", pm.cell_mm}});
}

ProbabilityMap read_probability_map(const std::filesystem::path& base) {
  NvolFile f = read_nvol(base);
  ProbabilityMap pm;
  pm.prob = std::move(f.volume);
  if (!f.header.contains("scale_tag")) throw InvalidArgument(base.string() + ": not a probability map");
  pm.scale_tag = scale_tag_from_string(f.header.at("scale_tag").get<std::string>());
  pm.cell_mm = f.header.value("cell_mm", pm.prob.grid.spacing_mm[0]);
  return pm;
}

}  // namespace lungcad
