#ifndef LUNGCAD_COMMON_HPP
#define LUNGCAD_COMMON_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace lungcad {

using Index = Eigen::Index;
using Rng = std::mt19937_64;

// Error taxonomy. Every failure surfaced by the library derives from Error so
// callers can catch one type; the subclasses name the contract that broke.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LUNGCAD_ERROR(Name)                 \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

LUNGCAD_ERROR(InvalidArgument);
LUNGCAD_ERROR(InvalidVolume);
LUNGCAD_ERROR(SegmentationFailure);
LUNGCAD_ERROR(EmptySelection);
LUNGCAD_ERROR(NumericFailure);
LUNGCAD_ERROR(CorruptModel);
LUNGCAD_ERROR(ModeMismatch);
LUNGCAD_ERROR(OutOfBounds);
LUNGCAD_ERROR(GenerationError);
LUNGCAD_ERROR(UndefinedSensitivity);
LUNGCAD_ERROR(IoError);

#undef LUNGCAD_ERROR

using Dims3 = std::array<Index, 3>;
using Vec3 = std::array<double, 3>;

inline Index voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

// SplitMix64 finalizer; used to derive independent child seeds from a parent
// seed and a tag so that per-scan / per-fold streams do not depend on the
// order in which they are consumed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(const std::string& s);

// Worker-thread budget shared by all parallel kernels. Results never depend
// on it: every parallel loop writes disjoint outputs and reductions happen in
// a fixed order afterwards.
void set_num_threads(int n);
int num_threads();

// Runs body(i) for i in [0, n). Nested calls from inside a worker run inline.
void parallel_for(Index n, const std::function<void(Index)>& body);

}  // namespace lungcad

#endif  // LUNGCAD_COMMON_HPP
