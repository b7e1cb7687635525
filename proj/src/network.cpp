#include "lungcad/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "lungcad/nvol.hpp"

namespace lungcad {

using nlohmann::json;

std::string to_string(ModelMode m) { return m == ModelMode::Detector ? "detector" : "regressor"; }

ModelMode model_mode_from_string(const std::string& s) {
  if (s == "detector") return ModelMode::Detector;
  if (s == "regressor") return ModelMode::Regressor;
  throw InvalidArgument("unknown model mode '" + s + "'");
}

Index Architecture::group_filters(std::size_t group) const {
  return std::max<Index>(1, (base_filters << group) / std::max<Index>(1, width_divisor));
}

std::vector<LayerSpec> Architecture::layers() const {
  std::vector<LayerSpec> out;
  Dims3 extent = input;
  for (std::size_t g = 0; g < convs_per_group.size(); ++g) {
    const std::string gp = "g" + std::to_string(g + 1);
    for (int c = 0; c < convs_per_group[g]; ++c) {
      if (c > 0) out.push_back({LayerKind::Relu, gp + ".relu" + std::to_string(c), 0, {}, {}, 0.0, true});
      LayerSpec conv{LayerKind::Conv3d, gp + ".conv" + std::to_string(c + 1), group_filters(g), {3, 3, 3}, {}, 0.0,
                     true};
      out.push_back(conv);
    }
    LayerSpec pool{LayerKind::MaxPool3d, gp + ".pool", 0, {}, g == 0 ? Dims3{2, 2, 1} : Dims3{2, 2, 2}, 0.0, true};
    for (int a = 0; a < 3; ++a) {
      if (extent[a] % pool.pool[a] != 0)
        throw InvalidArgument("architecture input extent not divisible through the pooling chain");
      extent[a] /= pool.pool[a];
    }
    out.push_back(pool);
    out.push_back({LayerKind::BatchNorm, gp + ".bn", 0, {}, {}, 0.0, true});
    out.push_back({LayerKind::Relu, gp + ".relu", 0, {}, {}, 0.0, true});
  }
  out.push_back({LayerKind::Flatten, "flatten", 0, {}, {}, 0.0, true});
  out.push_back({LayerKind::Dense, "fc1", dense_units, {}, {}, 0.0, false});
  const LayerSpec drop{LayerKind::Dropout, "fc1.dropout", 0, {}, {}, dropout, false};
  if (dropout_before_activation) out.push_back(drop);
  out.push_back({LayerKind::Relu, "fc1.relu", 0, {}, {}, 0.0, false});
  if (!dropout_before_activation) out.push_back(drop);
  out.push_back({LayerKind::Dense, "out", 1, {}, {}, 0.0, false});
  if (mode == ModelMode::Detector) out.push_back({LayerKind::Sigmoid, "out.sigmoid", 0, {}, {}, 0.0, false});
  return out;
}

Dims3 Architecture::feature_map_extent() const {
  Dims3 extent = input;
  for (std::size_t g = 0; g < convs_per_group.size(); ++g) {
    const Dims3 pool = g == 0 ? Dims3{2, 2, 1} : Dims3{2, 2, 2};
    for (int a = 0; a < 3; ++a) extent[a] /= pool[a];
  }
  return extent;
}

Index Architecture::flatten_size() const {
  const Dims3 e = feature_map_extent();
  return voxel_count(e) * group_filters(convs_per_group.size() - 1);
}

json Architecture::to_json() const {
  return json{{"input", {input[0], input[1], input[2]}},
              {"in_channels", in_channels},
              {"base_filters", base_filters},
              {"width_divisor", width_divisor},
              {"convs_per_group", convs_per_group},
              {"dense_units", dense_units},
              {"dropout", dropout},
              {"dropout_before_activation", dropout_before_activation},
              {"bn_momentum", bn_momentum},
              {"bn_eps", bn_eps},
              {"mode", to_string(mode)}};
}

Architecture Architecture::from_json(const json& j) {
  Architecture a;
  for (int i = 0; i < 3; ++i) a.input[i] = j.at("input").at(i).get<Index>();
  a.in_channels = j.at("in_channels").get<Index>();
  a.base_filters = j.at("base_filters").get<Index>();
  a.width_divisor = j.at("width_divisor").get<Index>();
  a.convs_per_group = j.at("convs_per_group").get<std::vector<int>>();
  a.dense_units = j.at("dense_units").get<Index>();
  a.dropout = j.at("dropout").get<double>();
  a.dropout_before_activation = j.value("dropout_before_activation", false);
  a.bn_momentum = j.value("bn_momentum", 0.99);
  a.bn_eps = j.value("bn_eps", 1e-5);
  a.mode = model_mode_from_string(j.at("mode").get<std::string>());
  return a;
}

Architecture Architecture::small_scale(Index width_divisor, ModelMode mode) {
  Architecture a;
  a.width_divisor = width_divisor;
  a.mode = mode;
  return a;
}

Architecture Architecture::large_scale(Index width_divisor, ModelMode mode) {
  Architecture a = small_scale(width_divisor, mode);
  a.input = {64, 64, 32};
  return a;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const Architecture& arch, std::vector<bool>* trainable) {
  std::vector<std::pair<std::string, Shape>> out;
  auto add = [&](const std::string& name, Shape s, bool train) {
    out.emplace_back(name, std::move(s));
    if (trainable) trainable->push_back(train);
  };
  Index channels = arch.in_channels;
  Dims3 extent = arch.input;
  Index features = 0;
  for (const LayerSpec& l : arch.layers()) {
    switch (l.kind) {
      case LayerKind::Conv3d:
        add(l.name + ".weight", {l.units, channels, l.kernel[0], l.kernel[1], l.kernel[2]}, true);
        add(l.name + ".bias", {l.units}, true);
        channels = l.units;
        break;
      case LayerKind::MaxPool3d:
        for (int a = 0; a < 3; ++a) extent[a] /= l.pool[a];
        break;
      case LayerKind::BatchNorm:
        add(l.name + ".gamma", {channels}, true);
        add(l.name + ".beta", {channels}, true);
        add(l.name + ".running_mean", {channels}, false);
        add(l.name + ".running_var", {channels}, false);
        break;
      case LayerKind::Flatten:
        features = channels * voxel_count(extent);
        break;
      case LayerKind::Dense:
        add(l.name + ".weight", {l.units, features}, true);
        add(l.name + ".bias", {l.units}, true);
        features = l.units;
        break;
      default:
        break;
    }
  }
  return out;
}

template <typename Scalar>
Index ModelParams<Scalar>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<Index>(i);
  throw InvalidArgument("model has no tensor named '" + name + "'");
}

template <typename Scalar>
ModelParams<Scalar> init_model(const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams<Scalar> p;
  p.arch = arch;
  std::vector<bool> trainable;
  for (auto& [name, shape] : parameter_layout(arch, &trainable)) {
    Tensor<Scalar> t(shape);
    const auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".weight")) {
      const Index fan_in = t.size() / shape[0];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
      for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(dist(rng));
    } else if (ends_with(".gamma") || ends_with(".running_var")) {
      t.data.setOnes();
    }
    p.tensors.push_back({name, std::move(t), trainable[p.tensors.size()]});
  }
  return p;
}

namespace {

template <typename Scalar>
struct LayerTrace {
  Tensor<Scalar> input;
  std::vector<Index> argmax;
  BatchNormCache<Scalar> bn;
  Tensor<Scalar> dropout_mask;
};

template <typename Scalar>
struct ForwardRun {
  Tensor<Scalar> output;
  std::vector<LayerTrace<Scalar>> trace;  // only when recording
  std::vector<std::pair<Index, Tensor<Scalar>>> state_updates;
};

enum class Stop { AtOutput, AtFlatten, BeforeSigmoid };

template <typename Scalar>
ForwardRun<Scalar> run_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch, Mode mode,
                               Rng& rng, bool record, Stop stop) {
  const Architecture& arch = params.arch;
  if (batch.rank() != 5 || batch.dim(1) != arch.in_channels || batch.dim(2) != arch.input[0] ||
      batch.dim(3) != arch.input[1] || batch.dim(4) != arch.input[2])
    throw InvalidArgument("batch shape " + shape_string(batch.shape) + " does not match architecture input");
  ForwardRun<Scalar> run;
  Tensor<Scalar> x = batch;
  for (const LayerSpec& l : arch.layers()) {
    if (stop == Stop::BeforeSigmoid && l.kind == LayerKind::Sigmoid) break;
    LayerTrace<Scalar> tr;
    if (record) tr.input = x;
    switch (l.kind) {
      case LayerKind::Conv3d:
        x = conv3d_forward(x, params.get(l.name + ".weight"), params.get(l.name + ".bias"));
        break;
      case LayerKind::MaxPool3d: {
        auto r = maxpool3d_forward(x, l.pool);
        x = std::move(r.output);
        if (record) tr.argmax = std::move(r.argmax);
        break;
      }
      case LayerKind::BatchNorm: {
        const Index mean_idx = params.index_of(l.name + ".running_mean");
        const Index var_idx = params.index_of(l.name + ".running_var");
        BatchNormStats<Scalar> stats{params.tensors[mean_idx].value, params.tensors[var_idx].value,
                                     arch.bn_momentum, arch.bn_eps};
        x = batchnorm_apply(x, params.get(l.name + ".gamma"), params.get(l.name + ".beta"), stats, mode,
                            record ? &tr.bn : nullptr);
        if (mode == Mode::Train) {
          run.state_updates.emplace_back(mean_idx, std::move(stats.running_mean));
          run.state_updates.emplace_back(var_idx, std::move(stats.running_var));
        }
        break;
      }
      case LayerKind::Relu:
        x = relu(x);
        break;
      case LayerKind::Sigmoid:
        x.data = x.data.unaryExpr([](Scalar z) { return sigmoid(z); });
        break;
      case LayerKind::Dropout:
        if (mode == Mode::Train && l.rate > 0.0) {
          const double keep = 1.0 - l.rate;
          std::bernoulli_distribution bern(keep);
          Tensor<Scalar> mask(x.shape);
          for (Index i = 0; i < mask.size(); ++i) mask[i] = bern(rng) ? Scalar(1.0 / keep) : Scalar(0);
          x.data *= mask.data;
          if (record) tr.dropout_mask = std::move(mask);
        }
        break;
      case LayerKind::Flatten:
        x.shape = {x.dim(0), x.sample_size()};
        break;
      case LayerKind::Dense:
        x = dense_forward(x, params.get(l.name + ".weight"), params.get(l.name + ".bias"));
        break;
    }
    if (record) {
      if (!x.data.allFinite()) throw NumericFailure("non-finite activation after layer '" + l.name + "'");
      run.trace.push_back(std::move(tr));
    }
    if (stop == Stop::AtFlatten && l.kind == LayerKind::Flatten) break;
  }
  run.output = std::move(x);
  return run;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> model_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch, Mode mode, Rng& rng) {
  return run_forward(params, batch, mode, rng, false, Stop::AtOutput).output;
}

template <typename Scalar>
Tensor<Scalar> forward_features(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch) {
  Rng unused(0);
  return run_forward(params, batch, Mode::Infer, unused, false, Stop::AtFlatten).output;
}

template <typename Scalar>
Gradients<Scalar> loss_and_gradients(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch,
                                     const Tensor<Scalar>& targets, LossKind loss, Rng& rng) {
  const auto layers = params.arch.layers();
  const bool fused_sigmoid = loss == LossKind::BinaryCrossEntropy && layers.back().kind == LayerKind::Sigmoid;
  ForwardRun<Scalar> run =
      run_forward(params, batch, Mode::Train, rng, true, fused_sigmoid ? Stop::BeforeSigmoid : Stop::AtOutput);
  const Tensor<Scalar>& out = run.output;
  if (out.size() != targets.size())
    throw InvalidArgument("targets shape " + shape_string(targets.shape) + " does not match output " +
                          shape_string(out.shape));
  const Index batch_size = out.dim(0);

  Gradients<Scalar> result;
  Tensor<Scalar> grad(out.shape);
  double total = 0.0;
  for (Index i = 0; i < out.size(); ++i) {
    const double y = double(out[i]), t = double(targets[i]);
    if (loss == LossKind::SquaredError) {
      total += (y - t) * (y - t);
      grad[i] = Scalar(2.0 * (y - t) / double(batch_size));
    } else if (fused_sigmoid) {
      // y is the logit: loss = softplus(y) - t*y, stable for large |y|.
      total += std::max(y, 0.0) - t * y + std::log1p(std::exp(-std::abs(y)));
      grad[i] = Scalar((double(sigmoid(y)) - t) / double(batch_size));
    } else {
      const double p = std::clamp(y, 1e-12, 1.0 - 1e-12);
      total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
      grad[i] = Scalar((-(t / p) + (1.0 - t) / (1.0 - p)) / double(batch_size));
    }
  }
  result.loss = total / double(batch_size);
  if (!std::isfinite(result.loss)) throw NumericFailure("non-finite loss");

  result.grads.resize(params.tensors.size());
  auto put = [&](const std::string& name, Tensor<Scalar>&& g) { result.grads[params.index_of(name)] = std::move(g); };

  const std::size_t executed = run.trace.size();
  for (std::size_t li = executed; li-- > 0;) {
    const LayerSpec& l = layers[li];
    LayerTrace<Scalar>& tr = run.trace[li];
    switch (l.kind) {
      case LayerKind::Conv3d: {
        auto g = conv3d_backward(tr.input, params.get(l.name + ".weight"), grad);
        put(l.name + ".weight", std::move(g.weights));
        put(l.name + ".bias", std::move(g.bias));
        grad = std::move(g.input);
        break;
      }
      case LayerKind::MaxPool3d:
        grad = maxpool3d_backward(grad, tr.argmax, tr.input.shape);
        break;
      case LayerKind::BatchNorm: {
        auto g = batchnorm_backward(grad, params.get(l.name + ".gamma"), tr.bn);
        put(l.name + ".gamma", std::move(g.gamma));
        put(l.name + ".beta", std::move(g.beta));
        grad = std::move(g.input);
        break;
      }
      case LayerKind::Relu:
        grad = relu_backward(tr.input, grad);
        break;
      case LayerKind::Sigmoid: {
        for (Index i = 0; i < grad.size(); ++i) {
          const Scalar s = sigmoid(tr.input[i]);
          grad[i] *= s * (Scalar(1) - s);
        }
        break;
      }
      case LayerKind::Dropout:
        if (tr.dropout_mask.size() > 0) grad.data *= tr.dropout_mask.data;
        break;
      case LayerKind::Flatten:
        grad.shape = tr.input.shape;
        break;
      case LayerKind::Dense: {
        auto g = dense_backward(tr.input, params.get(l.name + ".weight"), grad);
        put(l.name + ".weight", std::move(g.weights));
        put(l.name + ".bias", std::move(g.bias));
        grad = std::move(g.input);
        break;
      }
    }
  }
  result.state_updates = std::move(run.state_updates);
  return result;
}

template <typename Scalar>
AdamState<Scalar> make_adam(const ModelParams<Scalar>& params, double lr) {
  AdamState<Scalar> s;
  s.lr = lr;
  for (const auto& t : params.tensors) {
    s.m.push_back(t.trainable ? Tensor<Scalar>(t.value.shape) : Tensor<Scalar>());
    s.v.push_back(t.trainable ? Tensor<Scalar>(t.value.shape) : Tensor<Scalar>());
  }
  return s;
}

template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const Gradients<Scalar>& grads, AdamState<Scalar>& state) {
  if (grads.grads.size() != params.tensors.size() || state.m.size() != params.tensors.size())
    throw InvalidArgument("adam_step: gradient/state layout does not match parameters");
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i];
    if (!p.trainable) continue;
    const Tensor<Scalar>& g = grads.grads[i];
    if (g.size() != p.value.size()) throw InvalidArgument("adam_step: gradient shape mismatch for " + p.name);
    Tensor<Scalar>& m = state.m[i];
    Tensor<Scalar>& v = state.v[i];
    for (Index k = 0; k < g.size(); ++k) {
      const double gk = double(g[k]);
      const double mk = state.beta1 * double(m[k]) + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * double(v[k]) + (1.0 - state.beta2) * gk * gk;
      m[k] = Scalar(mk);
      v[k] = Scalar(vk);
      const double mhat = mk / c1, vhat = vk / c2;
      p.value[k] = Scalar(double(p.value[k]) - state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
  for (const auto& [idx, value] : grads.state_updates) params.tensors[idx].value = value;
}

namespace {
constexpr char kMagic[8] = {'N', 'C', 'A', 'D', '1', '\0', '\r', '\n'};
}

void save_model(const ModelParams<float>& params, const std::filesystem::path& path) {
  json header;
  header["format"] = "NCAD1";
  header["mode"] = to_string(params.arch.mode);
  header["architecture"] = params.arch.to_json();
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : params.tensors) {
    table.push_back({{"name", t.name}, {"shape", t.value.shape}, {"offset", offset}, {"trainable", t.trainable}});
    offset += static_cast<std::uint64_t>(t.value.size()) * 4;
  }
  header["tensors"] = table;
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write model " + path.string());
  os.write(kMagic, 8);
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : params.tensors) write_f32_le(os, t.value.ptr(), static_cast<std::size_t>(t.value.size()));
  if (!os) throw IoError("failed writing model " + path.string());
}

ModelParams<float> load_model(const std::filesystem::path& path, std::optional<ModelMode> expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read model " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) throw CorruptModel("bad magic in " + path.string());
  ModelParams<float> p;
  json header;
  try {
    const std::uint64_t len = read_u64_le(is);
    if (len > (1u << 26)) throw CorruptModel("implausible header length");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::uint64_t>(is.gcount()) != len) throw CorruptModel("truncated header");
    header = json::parse(text);
    p.arch = Architecture::from_json(header.at("architecture"));
  } catch (const json::exception& e) {
    throw CorruptModel(std::string("malformed model header: ") + e.what());
  } catch (const IoError& e) {
    throw CorruptModel(std::string("truncated model: ") + e.what());
  }
  if (expected && *expected != p.arch.mode)
    throw ModeMismatch("model is a " + to_string(p.arch.mode) + ", expected " + to_string(*expected));

  std::vector<bool> trainable;
  const auto layout = parameter_layout(p.arch, &trainable);
  const json& table = header.at("tensors");
  if (table.size() != layout.size()) throw CorruptModel("tensor table does not match architecture");
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const json& e = table[i];
    if (e.at("name").get<std::string>() != layout[i].first || e.at("shape").get<Shape>() != layout[i].second ||
        e.at("offset").get<std::uint64_t>() != offset)
      throw CorruptModel("tensor '" + layout[i].first + "' shape/offset mismatch");
    Tensor<float> t(layout[i].second);
    try {
      read_f32_le(is, t.ptr(), static_cast<std::size_t>(t.size()));
    } catch (const IoError&) {
      throw CorruptModel("truncated payload in " + path.string());
    }
    offset += static_cast<std::uint64_t>(t.size()) * 4;
    p.tensors.push_back({layout[i].first, std::move(t), trainable[i]});
  }
  return p;
}

#define LUNGCAD_INSTANTIATE_NETWORK(S)                                                                       \
  template struct ModelParams<S>;                                                                            \
  template ModelParams<S> init_model<S>(const Architecture&, std::uint64_t);                                 \
  template Tensor<S> model_forward<S>(const ModelParams<S>&, const Tensor<S>&, Mode, Rng&);                  \
  template Tensor<S> forward_features<S>(const ModelParams<S>&, const Tensor<S>&);                           \
  template Gradients<S> loss_and_gradients<S>(const ModelParams<S>&, const Tensor<S>&, const Tensor<S>&,     \
                                              LossKind, Rng&);                                               \
  template AdamState<S> make_adam<S>(const ModelParams<S>&, double);                                         \
  template void adam_step<S>(ModelParams<S>&, const Gradients<S>&, AdamState<S>&);

LUNGCAD_INSTANTIATE_NETWORK(float)
LUNGCAD_INSTANTIATE_NETWORK(double)

#undef LUNGCAD_INSTANTIATE_NETWORK

}  // namespace lungcad
