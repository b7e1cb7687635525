#ifndef LUNGCAD_NETWORK_HPP
#define LUNGCAD_NETWORK_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungcad/layers.hpp"

namespace lungcad {

enum class ModelMode { Detector, Regressor };
enum class LayerKind { Conv3d, MaxPool3d, BatchNorm, Dense, Relu, Sigmoid, Dropout, Flatten };
enum class LossKind { BinaryCrossEntropy, SquaredError };

std::string to_string(ModelMode m);
ModelMode model_mode_from_string(const std::string& s);

struct LayerSpec {
  LayerKind kind;
  std::string name;
  Index units = 0;          // conv filters or dense units
  Dims3 kernel{3, 3, 3};    // conv
  Dims3 pool{2, 2, 2};      // max pool
  double rate = 0.0;        // dropout
  bool feature_extractor = false;  // part of the transferred conv stack
};

/// The VGG-style 3D network family: conv groups of (conv [relu conv]) + pool +
/// batchnorm + relu, flatten, dense + relu + dropout, then a sigmoid unit for
/// detection or a linear unit for regression.
struct Architecture {
  Dims3 input{32, 32, 16};
  Index in_channels = 1;
  Index base_filters = 64;
  Index width_divisor = 8;
  std::vector<int> convs_per_group{1, 1, 2, 2};
  Index dense_units = 64;
  double dropout = 0.5;
  bool dropout_before_activation = false;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;
  ModelMode mode = ModelMode::Detector;

  Index group_filters(std::size_t group) const;
  std::vector<LayerSpec> layers() const;
  Dims3 feature_map_extent() const;  // spatial extent after the last group
  Index flatten_size() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);

  static Architecture small_scale(Index width_divisor, ModelMode mode);
  static Architecture large_scale(Index width_divisor, ModelMode mode);
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> value;
  bool trainable = true;
};

template <typename Scalar>
struct ModelParams {
  Architecture arch;
  std::vector<NamedTensor<Scalar>> tensors;

  Index index_of(const std::string& name) const;
  const Tensor<Scalar>& get(const std::string& name) const { return tensors[index_of(name)].value; }
  Tensor<Scalar>& get(const std::string& name) { return tensors[index_of(name)].value; }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.arch = arch;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.value.template cast<Other>(), t.trainable});
    return out;
  }
};

/// Shapes of every parameter tensor in order, derived from the architecture.
std::vector<std::pair<std::string, Shape>> parameter_layout(const Architecture& arch,
                                                            std::vector<bool>* trainable = nullptr);

/// He-normal (fan-in) conv/dense weights, zero biases, gamma 1, beta 0,
/// running mean 0, running variance 1.
template <typename Scalar>
ModelParams<Scalar> init_model(const Architecture& arch, std::uint64_t seed);

template <typename Scalar>
Tensor<Scalar> model_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch, Mode mode, Rng& rng);

/// Conv stack only (up to and including flatten), Infer mode: (B, flatten).
template <typename Scalar>
Tensor<Scalar> forward_features(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch);

template <typename Scalar>
struct Gradients {
  double loss = 0.0;
  std::vector<Tensor<Scalar>> grads;  // aligned with params.tensors; empty for non-trainable
  std::vector<std::pair<Index, Tensor<Scalar>>> state_updates;  // new running statistics
};

/// Mean loss over the batch and reverse-mode gradients of every trainable
/// tensor. targets has shape (B, 1). Batchnorm runs in Train mode; the updated
/// running statistics are returned rather than written.
template <typename Scalar>
Gradients<Scalar> loss_and_gradients(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch,
                                     const Tensor<Scalar>& targets, LossKind loss, Rng& rng);

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m, v;
  std::int64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
AdamState<Scalar> make_adam(const ModelParams<Scalar>& params, double lr);

/// Bias-corrected Adam update of every trainable tensor; also folds in the
/// batchnorm running-statistic updates carried by grads.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const Gradients<Scalar>& grads, AdamState<Scalar>& state);

// NCAD1 container: 8 magic bytes, u64 header length, JSON header, then the
// float32 little-endian payloads at the offsets listed in the header.
void save_model(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load_model(const std::filesystem::path& path,
                              std::optional<ModelMode> expected = std::nullopt);

}  // namespace lungcad

#endif  // LUNGCAD_NETWORK_HPP
