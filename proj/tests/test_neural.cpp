#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "lungcad/network.hpp"
#include "oracles.hpp"

using namespace lungcad;
using namespace oracles;

namespace {

double dot(const TD& a, const TD& b) { return (a.data * b.data).sum(); }

}  // namespace

TEST_CASE("conv3d_forward") {
  std::mt19937_64 rng(1);

  SUBCASE("1x1x1 unit kernel is the identity") {
    const TD in = random_tensor({2, 1, 4, 3, 5}, rng);
    const TD out = conv3d_forward(in, TD({1, 1, 1, 1, 1}, 1.0), TD({1}));
    CHECK((out.data == in.data).all());
  }

  SUBCASE("all-ones 3x3x3 kernel counts in-bounds neighbours") {
    const TD out = conv3d_forward(TD({1, 1, 5, 5, 5}, 1.0), TD({1, 1, 3, 3, 3}, 1.0), TD({1}));
    CHECK(out[((2 * 5) + 2) * 5 + 2] == 27.0);
    CHECK(out[0] == 8.0);
    CHECK(out[out.size() - 1] == 8.0);
  }

  SUBCASE("matches the naive oracle on random shapes") {
    std::uniform_int_distribution<Index> ext(1, 6), small(1, 3), bat(1, 2), z(1, 4);
    for (int trial = 0; trial < 60; ++trial) {
      const Index B = bat(rng), C = small(rng), O = small(rng);
      const Index k = trial % 3 == 0 ? 1 : 3;
      const TD in = random_tensor({B, C, ext(rng), ext(rng), z(rng)}, rng);
      const TD w = random_tensor({O, C, k, k, k}, rng);
      const TD b = random_tensor({O}, rng);
      const TD fast = conv3d_forward(in, w, b);
      CHECK((fast.data - naive_conv(in, w, b).data).abs().maxCoeff() < 1e-10);
    }
  }

  SUBCASE("linearity in the input") {
    const TD a = random_tensor({2, 2, 5, 4, 3}, rng), b = random_tensor({2, 2, 5, 4, 3}, rng);
    const TD w = random_tensor({3, 2, 3, 3, 3}, rng), bias = random_tensor({3}, rng);
    TD sum = a;
    sum.data += b.data;
    const TD lhs = conv3d_forward(sum, w, bias);
    TD rhs = conv3d_forward(a, w, bias);
    rhs.data += conv3d_forward(b, w, bias).data;
    for (Index i = 0; i < rhs.size(); ++i) rhs[i] -= bias[(i / (5 * 4 * 3)) % 3];
    CHECK((lhs.data - rhs.data).abs().maxCoeff() < 1e-9);
  }

  SUBCASE("shape errors") {
    CHECK_THROWS_AS(conv3d_forward(TD({1, 2, 3, 3, 3}), TD({1, 1, 3, 3, 3}), TD({1})), InvalidArgument);
    CHECK_THROWS_AS(conv3d_forward(TD({1, 1, 3, 3, 3}), TD({1, 1, 2, 2, 2}), TD({1})), InvalidArgument);
  }
}

TEST_CASE("maxpool3d_forward") {
  TD window({1, 1, 2, 2, 2});
  for (Index i = 0; i < 8; ++i) window[i] = double(i + 1);
  const auto r = maxpool3d_forward(window, {2, 2, 2});
  CHECK(r.output[0] == 8.0);
  CHECK(r.argmax[0] == 7);

  CHECK(maxpool3d_forward(TD({1, 1, 32, 32, 16}), {2, 2, 1}).output.shape == Shape{1, 1, 16, 16, 16});
  CHECK_THROWS_AS(maxpool3d_forward(TD({1, 1, 3, 2, 2}), {2, 2, 2}), InvalidArgument);

  SUBCASE("ties resolve to the lowest linear index") {
    const auto t = maxpool3d_forward(TD({1, 1, 2, 2, 2}, 5.0), {2, 2, 2});
    CHECK(t.argmax[0] == 0);
  }

  SUBCASE("matches windowed-max oracle") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 40; ++trial) {
      const Dims3 p = trial % 2 ? Dims3{2, 2, 1} : Dims3{2, 2, 2};
      const TD in = random_tensor({2, 3, 4, 6, 4}, rng);
      CHECK((maxpool3d_forward(in, p).output.data == naive_pool(in, p).data).all());
    }
  }
}

TEST_CASE("batchnorm_apply") {
  std::mt19937_64 rng(9);
  const TD in = random_tensor({4, 2, 3, 3, 2}, rng, 3.0);
  BatchNormStats<double> stats{TD({2}), TD({2}, 1.0)};

  SUBCASE("train mode standardises each channel") {
    const TD out = batchnorm_apply(in, TD({2}, 1.0), TD({2}), stats, Mode::Train);
    const Index n = 3 * 3 * 2;
    for (Index c = 0; c < 2; ++c) {
      double sum = 0, sq = 0;
      for (Index b = 0; b < 4; ++b)
        for (Index i = 0; i < n; ++i) sum += out[(b * 2 + c) * n + i];
      const double mean = sum / (4.0 * n);
      for (Index b = 0; b < 4; ++b)
        for (Index i = 0; i < n; ++i) sq += std::pow(out[(b * 2 + c) * n + i] - mean, 2);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(sq / (4.0 * n) - 1.0) < 1e-5);
    }
    CHECK(stats.running_mean[0] != 0.0);
  }

  SUBCASE("gamma and beta apply an affine map to the standardised input") {
    BatchNormStats<double> s2 = stats;
    const TD unit = batchnorm_apply(in, TD({2}, 1.0), TD({2}), stats, Mode::Train);
    const TD scaled = batchnorm_apply(in, TD({2}, 2.0), TD({2}, 3.0), s2, Mode::Train);
    CHECK((scaled.data - (2.0 * unit.data + 3.0)).abs().maxCoeff() < 1e-12);
  }

  SUBCASE("infer with unit statistics is the identity within epsilon") {
    const TD out = batchnorm_apply(in, TD({2}, 1.0), TD({2}), stats, Mode::Infer);
    CHECK((out.data - in.data).abs().maxCoeff() < 1e-4);
  }

  CHECK_THROWS_AS(batchnorm_apply(in, TD({3}, 1.0), TD({2}), stats, Mode::Train), InvalidArgument);
}

TEST_CASE("layer backward passes agree with central differences in isolation") {
  std::mt19937_64 rng(21);

  SUBCASE("conv3d") {
    TD in = random_tensor({2, 2, 4, 3, 3}, rng);
    TD w = random_tensor({3, 2, 3, 3, 3}, rng);
    TD b = random_tensor({3}, rng);
    const TD probe = random_tensor({2, 3, 4, 3, 3}, rng);
    auto f = [&] { return dot(conv3d_forward(in, w, b), probe); };
    const auto g = conv3d_backward(in, w, probe);
    CHECK(max_rel_error(g.input, numeric_grad(in, f)) < 1e-6);
    CHECK(max_rel_error(g.weights, numeric_grad(w, f)) < 1e-6);
    CHECK(max_rel_error(g.bias, numeric_grad(b, f)) < 1e-6);
  }

  SUBCASE("maxpool") {
    TD in = random_tensor({2, 2, 4, 4, 2}, rng);
    const TD probe = random_tensor({2, 2, 2, 2, 1}, rng);
    auto f = [&] { return dot(maxpool3d_forward(in, {2, 2, 2}).output, probe); };
    const auto r = maxpool3d_forward(in, {2, 2, 2});
    CHECK(max_rel_error(maxpool3d_backward(probe, r.argmax, in.shape), numeric_grad(in, f)) < 1e-6);
  }

  SUBCASE("batchnorm in train mode") {
    TD in = random_tensor({3, 2, 2, 2, 2}, rng);
    TD gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
    const TD probe = random_tensor(in.shape, rng);
    auto f = [&] {
      BatchNormStats<double> s{TD({2}), TD({2}, 1.0)};
      return dot(batchnorm_apply(in, gamma, beta, s, Mode::Train), probe);
    };
    BatchNormStats<double> s{TD({2}), TD({2}, 1.0)};
    BatchNormCache<double> cache;
    batchnorm_apply(in, gamma, beta, s, Mode::Train, &cache);
    const auto g = batchnorm_backward(probe, gamma, cache);
    CHECK(max_rel_error(g.input, numeric_grad(in, f), 1e-6) < 1e-5);
    CHECK(max_rel_error(g.gamma, numeric_grad(gamma, f)) < 1e-6);
    CHECK(max_rel_error(g.beta, numeric_grad(beta, f)) < 1e-6);
  }

  SUBCASE("dense and relu") {
    TD in = random_tensor({3, 5}, rng);
    TD w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
    const TD probe = random_tensor({3, 4}, rng);
    auto f = [&] { return dot(relu(dense_forward(in, w, b)), probe); };
    const TD pre = dense_forward(in, w, b);
    const auto g = dense_backward(in, w, relu_backward(pre, probe));
    CHECK(max_rel_error(g.input, numeric_grad(in, f)) < 1e-6);
    CHECK(max_rel_error(g.weights, numeric_grad(w, f)) < 1e-6);
    CHECK(max_rel_error(g.bias, numeric_grad(b, f)) < 1e-6);
  }
}

TEST_CASE("architecture") {
  SUBCASE("full width small scale flattens to 4096") {
    const Architecture a = Architecture::small_scale(1, ModelMode::Regressor);
    CHECK(a.flatten_size() == 4096);
    CHECK(a.feature_map_extent() == Dims3{2, 2, 2});
  }
  SUBCASE("full width large scale flattens to 32768") {
    CHECK(Architecture::large_scale(1, ModelMode::Detector).flatten_size() == 32768);
  }
  SUBCASE("desk-scale divisor 8 uses 8..64 filters") {
    const Architecture a = Architecture::small_scale(8, ModelMode::Detector);
    CHECK(a.group_filters(0) == 8);
    CHECK(a.group_filters(3) == 64);
    CHECK(a.flatten_size() == 512);
  }
  SUBCASE("first pool only pools x and y") {
    const auto layers = Architecture::small_scale(8, ModelMode::Detector).layers();
    std::vector<Dims3> pools;
    for (const auto& l : layers)
      if (l.kind == LayerKind::MaxPool3d) pools.push_back(l.pool);
    REQUIRE(pools.size() == 4);
    CHECK(pools[0] == Dims3{2, 2, 1});
    CHECK(pools[1] == Dims3{2, 2, 2});
    CHECK(layers.back().kind == LayerKind::Sigmoid);
    CHECK(Architecture::small_scale(8, ModelMode::Regressor).layers().back().kind == LayerKind::Dense);
  }
  SUBCASE("json round trip") {
    Architecture a = mini_arch(ModelMode::Regressor);
    a.dropout_before_activation = true;
    const Architecture b = Architecture::from_json(a.to_json());
    CHECK(b.to_json() == a.to_json());
  }
}

TEST_CASE("model_forward") {
  const auto params = init_model<double>(mini_arch(ModelMode::Detector), 3);
  std::mt19937_64 rng(5);
  const TD batch = random_tensor({4, 1, 8, 8, 4}, rng, 50.0);

  SUBCASE("detector outputs are probabilities") {
    Rng r(1);
    const TD out = model_forward(params, batch, Mode::Train, r);
    CHECK(out.shape == Shape{4, 1});
    CHECK((out.data > 0.0).all());
    CHECK((out.data < 1.0).all());
  }

  SUBCASE("inference is deterministic and per-sample") {
    Rng r1(1), r2(99);
    const TD a = model_forward(params, batch, Mode::Infer, r1);
    const TD b = model_forward(params, batch, Mode::Infer, r2);
    CHECK((a.data == b.data).all());
    TD single({1, 1, 8, 8, 4});
    single.data = batch.data.segment(2 * 256, 256);
    CHECK(model_forward(params, single, Mode::Infer, r1)[0] == a[2]);
  }

  SUBCASE("full-width regressor type-checks with a 4096 feature vector") {
    const auto full = init_model<float>(Architecture::small_scale(1, ModelMode::Regressor), 1);
    Tensor<float> x({1, 1, 32, 32, 16}, 0.5f);
    CHECK(forward_features(full, x).shape == Shape{1, 4096});
  }

  CHECK_THROWS_AS(
      [&] {
        Rng r(1);
        model_forward(params, TD({1, 1, 8, 8, 8}), Mode::Infer, r);
      }(),
      InvalidArgument);
}

TEST_CASE("losses") {
  // A net whose output is exactly the chosen value: zero every weight and set the final bias.
  auto constant_model = [](ModelMode mode, double out_bias) {
    auto p = init_model<double>(mini_arch(mode), 1);
    for (auto& t : p.tensors)
      if (t.trainable && t.name.find("gamma") == std::string::npos) t.value.data.setZero();
    p.get("out.bias")[0] = out_bias;
    return p;
  };
  const TD batch({1, 1, 8, 8, 4}, 1.0);

  SUBCASE("bce at p = 0.5 with target 1 is ln 2") {
    const auto p = constant_model(ModelMode::Detector, 0.0);
    Rng r(0);
    const auto g = loss_and_gradients(p, batch, TD({1, 1}, 1.0), LossKind::BinaryCrossEntropy, r);
    CHECK(g.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("squared error at an exact prediction is zero with zero output gradient") {
    const auto p = constant_model(ModelMode::Regressor, 3.0);
    Rng r(0);
    const auto g = loss_and_gradients(p, batch, TD({1, 1}, 3.0), LossKind::SquaredError, r);
    CHECK(g.loss == 0.0);
    CHECK(g.grads[p.index_of("out.bias")][0] == 0.0);
  }

  SUBCASE("non-finite activations are reported with the layer name") {
    auto p = constant_model(ModelMode::Regressor, 1.0);
    p.get("g1.conv1.bias")[0] = NAN;
    Rng r(0);
    CHECK_THROWS_WITH_AS(loss_and_gradients(p, batch, TD({1, 1}, 3.0), LossKind::SquaredError, r),
                         doctest::Contains("g1.conv1"), NumericFailure);
  }
}

TEST_CASE("composed miniature network gradient check") {
  std::mt19937_64 data_rng(17);
  const TD batch = random_tensor({3, 1, 8, 8, 4}, data_rng);
  for (ModelMode mode : {ModelMode::Detector, ModelMode::Regressor}) {
    auto params = init_model<double>(mini_arch(mode), 11);
    for (auto& t : params.tensors)
      if (t.name.find(".beta") != std::string::npos || t.name.find(".bias") != std::string::npos)
        for (Index i = 0; i < t.value.size(); ++i) t.value[i] = 0.1 * std::sin(double(i + 1));
    const TD targets = mode == ModelMode::Detector ? TD({3, 1}, 1.0) : TD({3, 1}, 2.5);
    const LossKind loss = mode == ModelMode::Detector ? LossKind::BinaryCrossEntropy : LossKind::SquaredError;
    TD tgt = targets;
    if (mode == ModelMode::Detector) tgt[1] = 0.0;

    Rng seeded(42);
    Rng r = seeded;
    const auto analytic = loss_and_gradients(params, batch, tgt, loss, r);
    double worst = 0.0;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      if (!params.tensors[i].trainable) continue;
      auto f = [&] {
        Rng rr = seeded;
        return loss_and_gradients(params, batch, tgt, loss, rr).loss;
      };
      const TD numeric = numeric_grad(params.tensors[i].value, f);
      // Biases feeding a batchnorm have an exactly zero gradient, so use an absolute floor.
      const double err = max_rel_error(analytic.grads[i], numeric, 1e-6);
      INFO(params.tensors[i].name);
      CHECK(err < 1e-3);
      worst = std::max(worst, err);
    }
    MESSAGE("max relative gradient error (" << to_string(mode) << "): " << worst);
  }
}

TEST_CASE("adam_step") {
  auto params = init_model<double>(mini_arch(ModelMode::Regressor), 2);
  auto state = make_adam(params, 1e-4);
  Gradients<double> g;
  for (const auto& t : params.tensors) g.grads.push_back(t.trainable ? TD(t.value.shape) : TD());

  SUBCASE("zero gradients leave parameters unchanged") {
    const auto before = params;
    adam_step(params, g, state);
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
      CHECK((params.tensors[i].value.data == before.tensors[i].value.data).all());
    CHECK(state.step == 1);
  }

  SUBCASE("first step with unit gradient moves by lr / (1 + eps)") {
    const Index k = params.index_of("out.bias");
    const double before = params.tensors[k].value[0];
    g.grads[k][0] = 1.0;
    adam_step(params, g, state);
    CHECK(params.tensors[k].value[0] - before == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-9));
  }

  SUBCASE("opposite gradients give opposite updates") {
    const Index k = params.index_of("fc1.bias");
    const double a0 = params.tensors[k].value[0], b0 = params.tensors[k].value[1];
    g.grads[k][0] = 0.37;
    g.grads[k][1] = -0.37;
    adam_step(params, g, state);
    CHECK(params.tensors[k].value[0] - a0 == doctest::Approx(-(params.tensors[k].value[1] - b0)));
  }
}

TEST_CASE("training is bit-reproducible under a fixed seed") {
  auto run = [] {
    auto params = init_model<float>(mini_arch(ModelMode::Detector), 8);
    auto state = make_adam(params, 1e-3);
    Rng rng(77);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (int step = 0; step < 5; ++step) {
      Tensor<float> batch({4, 1, 8, 8, 4});
      for (Index i = 0; i < batch.size(); ++i) batch[i] = n(rng);
      Tensor<float> targets({4, 1});
      targets.data << 1, 0, 1, 0;
      adam_step(params, loss_and_gradients(params, batch, targets, LossKind::BinaryCrossEntropy, rng), state);
    }
    return params;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.tensors.size(); ++i) CHECK((a.tensors[i].value.data == b.tensors[i].value.data).all());
}

TEST_CASE("model container") {
  const auto dir = std::filesystem::temp_directory_path() / "lungcad_test_model";
  std::filesystem::create_directories(dir);
  auto params = init_model<float>(mini_arch(ModelMode::Detector), 4);
  params.get("g1.bn.running_var")[1] = 2.5f;
  save_model(params, dir / "m.ncad");

  SUBCASE("round trip is bit-exact") {
    const auto loaded = load_model(dir / "m.ncad", ModelMode::Detector);
    REQUIRE(loaded.tensors.size() == params.tensors.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      CHECK(loaded.tensors[i].name == params.tensors[i].name);
      CHECK(loaded.tensors[i].trainable == params.tensors[i].trainable);
      CHECK((loaded.tensors[i].value.data == params.tensors[i].value.data).all());
    }
    CHECK(loaded.arch.to_json() == params.arch.to_json());
  }

  SUBCASE("truncated file is corrupt") {
    const auto size = std::filesystem::file_size(dir / "m.ncad");
    std::filesystem::copy_file(dir / "m.ncad", dir / "t.ncad", std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(dir / "t.ncad", size - 10);
    CHECK_THROWS_AS(load_model(dir / "t.ncad"), CorruptModel);
    std::filesystem::resize_file(dir / "t.ncad", 5);
    CHECK_THROWS_AS(load_model(dir / "t.ncad"), CorruptModel);
  }

  SUBCASE("mode mismatch") { CHECK_THROWS_AS(load_model(dir / "m.ncad", ModelMode::Regressor), ModeMismatch); }
}
