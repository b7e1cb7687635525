#ifndef LUNGCAD_SAMPLING_HPP
#define LUNGCAD_SAMPLING_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lungcad/segmentation.hpp"
#include "lungcad/tensor.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

enum class NoduleLabel { Benign, BenignMultinodular, PrimaryLung, Melanoma, Colorectal, Unlabeled };
enum class Relevance { Relevant, Irrelevant };
enum class Provenance { Positive, RandomNegative, CandidateNegative, HardNegative };

std::string to_string(NoduleLabel l);
NoduleLabel nodule_label_from_string(const std::string& s);
std::string to_string(Relevance r);
Relevance relevance_from_string(const std::string& s);
std::string to_string(Provenance p);

struct NoduleAnnotation {
  std::string scan_id;
  WorldPoint center;
  double diameter_mm = 0.0;
  NoduleLabel label = NoduleLabel::Unlabeled;
  std::optional<double> malignancy;
  Relevance relevance = Relevance::Relevant;

  double radius_mm() const { return 0.5 * diameter_mm; }
};

struct Candidate {
  std::string scan_id;
  WorldPoint center;
};

struct PatchSample {
  Tensor<float> patch;  // (1, x, y, z), luminance
  double label = 0.0;
  Provenance provenance = Provenance::Positive;
  WorldPoint center;
};

// Annotation CSV: scan_id,x_mm,y_mm,z_mm,diameter_mm,label,malignancy,relevance
// (malignancy empty when absent). Candidate CSV: scan_id,x_mm,y_mm,z_mm.
void write_annotations_csv(const std::filesystem::path& path, const std::vector<NoduleAnnotation>& rows);
std::vector<NoduleAnnotation> read_annotations_csv(const std::filesystem::path& path);
void write_candidates_csv(const std::filesystem::path& path, const std::vector<Candidate>& rows);
std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path);

struct Box {
  Vec3 lo, hi;
};

/// Voxel window cropped around a world point: start = round(c) - n/2 per axis
/// with n = round(size_mm / spacing).
struct PatchWindow {
  Dims3 start, size;
};

PatchWindow patch_window(const Grid& g, const WorldPoint& center, const Vec3& size_mm);
/// World-space box covered by the window's voxels (voxel edges, not centers).
Box window_box(const Grid& g, const PatchWindow& w);
bool sphere_intersects_box(const WorldPoint& c, double radius, const Box& b);
bool sphere_inside_box(const WorldPoint& c, double radius, const Box& b);

template <typename Scalar>
Tensor<Scalar> crop_window(const Volume<Scalar>& v, const PatchWindow& w, Scalar fill = Scalar(kWaterLuminance)) {
  Tensor<Scalar> out({1, w.size[0], w.size[1], w.size[2]}, fill);
  const Dims3 d = v.dims();
  Scalar* dst = out.ptr();
  for (Index x = 0; x < w.size[0]; ++x) {
    const Index sx = w.start[0] + x;
    for (Index y = 0; y < w.size[1]; ++y, dst += w.size[2]) {
      const Index sy = w.start[1] + y;
      if (sx < 0 || sx >= d[0] || sy < 0 || sy >= d[1]) continue;
      for (Index z = 0; z < w.size[2]; ++z) {
        const Index sz = w.start[2] + z;
        if (sz >= 0 && sz < d[2]) dst[z] = v(sx, sy, sz);
      }
    }
  }
  return out;
}

/// Nearest-voxel crop of size_mm around center; voxels outside the volume are
/// filled with the water luminance. Throws OutOfBounds when the center lies
/// more than half a patch outside the volume.
template <typename Scalar>
Tensor<Scalar> crop_patch(const Volume<Scalar>& v, const WorldPoint& center, const Vec3& size_mm) {
  return crop_window(v, patch_window(v.grid, center, size_mm));
}

/// Reverses the spatial axes selected by the bits of code (1 = x, 2 = y, 4 = z).
template <typename Scalar>
Tensor<Scalar> augment_flip(const Tensor<Scalar>& patch, int code) {
  if (code < 0 || code > 7) throw InvalidArgument("flip code must be in [0, 7]");
  if (patch.rank() < 3) throw InvalidArgument("flip expects at least three spatial axes");
  const Index r = patch.rank();
  const Index X = patch.dim(r - 3), Y = patch.dim(r - 2), Z = patch.dim(r - 1);
  const Index lead = patch.size() / (X * Y * Z);
  Tensor<Scalar> out(patch.shape);
  for (Index l = 0; l < lead; ++l)
    for (Index x = 0; x < X; ++x)
      for (Index y = 0; y < Y; ++y)
        for (Index z = 0; z < Z; ++z) {
          const Index fx = code & 1 ? X - 1 - x : x;
          const Index fy = code & 2 ? Y - 1 - y : y;
          const Index fz = code & 4 ? Z - 1 - z : z;
          out[((l * X + x) * Y + y) * Z + z] = patch[((l * X + fx) * Y + fy) * Z + fz];
        }
  return out;
}

/// Rotation about the z axis through the patch center followed by isotropic
/// scaling about the center, resampled trilinearly onto the same grid. Output
/// voxel p reads the input at center + scale * R^-1 (p - center), so scale < 1
/// magnifies. Samples outside the patch read the water luminance.
Tensor<float> augment_affine(const Tensor<float>& patch, double rotation_deg, double scale);
Tensor<double> augment_affine(const Tensor<double>& patch, double rotation_deg, double scale);

struct PositiveOptions {
  Vec3 patch_mm{32.0, 32.0, 32.0};
  double max_shift_mm = 4.0;
  int max_attempts = 100;
  int copies = 1;
  bool regression = false;  // centered crops labelled with malignancy
};

struct SamplingReport {
  std::vector<std::string> warnings;
  bool shortfall = false;
};

/// Crop center for one positive draw: the nodule center plus a uniform shift
/// within the feasible region, redrawn until the sphere lies inside the crop.
/// Empty when the nodule cannot fit.
std::optional<WorldPoint> draw_positive_center(const Grid& g, const NoduleAnnotation& a, const PositiveOptions& o,
                                               Rng& rng);

std::vector<PatchSample> sample_positives(const VolumeF& v, const std::vector<NoduleAnnotation>& annotations,
                                          Rng& rng, const PositiveOptions& o = {},
                                          SamplingReport* report = nullptr);

struct NegativeOptions {
  Vec3 patch_mm{32.0, 32.0, 32.0};
  int n_random = 20;
  int n_candidate = 40;
  int attempts_per_sample = 100;
};

/// True when the crop box around center intersects no annotation sphere.
bool negative_is_clear(const Grid& g, const WorldPoint& center, const Vec3& patch_mm,
                       const std::vector<NoduleAnnotation>& annotations);

/// Negative crop centers: n_random uniformly from lung voxels, then up to
/// n_candidate from the candidate list (without replacement); all clear of
/// every annotation.
std::vector<std::pair<WorldPoint, Provenance>> draw_negative_centers(const Grid& g, const Mask& lung,
                                                                    const std::vector<WorldPoint>& candidates,
                                                                    const std::vector<NoduleAnnotation>& annotations,
                                                                    Rng& rng, const NegativeOptions& o = {},
                                                                    SamplingReport* report = nullptr);

std::vector<PatchSample> sample_negatives(const VolumeF& v, const Mask& lung, const std::vector<WorldPoint>& candidates,
                                          const std::vector<NoduleAnnotation>& annotations, Rng& rng,
                                          const NegativeOptions& o = {}, SamplingReport* report = nullptr);

/// Endless stream of balanced index batches: half positives, half negatives.
/// Each pool is walked in a shuffled order that is reshuffled when exhausted,
/// so the smaller pool repeats within an epoch.
class BalancedBatcher {
 public:
  BalancedBatcher(std::size_t n_pos, std::size_t n_neg, Index batch_size, std::uint64_t seed);

  struct Batch {
    std::vector<std::size_t> positives, negatives;
  };
  Batch next();

 private:
  struct Pool {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  std::size_t draw(Pool& p);

  Index half_;
  Rng rng_;
  Pool pos_, neg_;
};

/// Stacks (1, x, y, z) patches into a (B, 1, x, y, z) batch, dividing by 255.
Tensor<float> stack_standardized(const std::vector<const Tensor<float>*>& patches);

}  // namespace lungcad

#endif  // LUNGCAD_SAMPLING_HPP
