#include "doctest.h"

#include "support/primitive_checks.hpp"

#include <filesystem>

using namespace kp;
using namespace kp::ad;
using kp::testing::TensorD;
using kp::testing::VarD;

namespace {

TensorD iota(Shape s) {
  TensorD t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i % 17) - 8.0 + 0.1 * i;
  return t;
}

TensorD shift_cols(const TensorD& x, Index k) {
  TensorD out(x.shape());
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  for (Index c = 0; c < C; ++c)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) out(c, h, (w + k) % W) = x(c, h, w);
  return out;
}

}  // namespace

TEST_CASE("backward: sum of x gives unit gradient") {
  VarD x(iota({2, 3}), true);
  backward(sum(x));
  CHECK((x.grad().array() == 1.0).all());
}

TEST_CASE("backward: x*x at 3 gives 6") {
  VarD x(TensorD::scalar(3.0), true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: diamond graph accumulates both paths") {
  VarD x(TensorD::scalar(2.0), true);
  VarD a = scale(x, 3.0);
  VarD b = scale(x, 5.0);
  backward(add(a, b));
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("backward: non-scalar root is rejected") {
  VarD x(iota({2, 2}), true);
  CHECK_THROWS_AS(backward(x), ShapeError);
}

TEST_CASE("no-grad guard records nothing") {
  VarD x(iota({2, 2}), true);
  NoGradGuard guard;
  VarD y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("conv2d: 1x1 unit kernel is identity") {
  VarD x(iota({1, 4, 8}));
  VarD k(TensorD(Shape{1, 1, 1, 1}, 1.0));
  VarD y = conv2d(x, k, VarD(), Conv2dOptions{});
  CHECK((y.value().array() == x.value().array()).all());
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones 8x8, cyclic") {
  VarD x(TensorD(Shape{1, 8, 8}, 1.0));
  VarD k(TensorD(Shape{1, 1, 3, 3}, 1.0));
  VarD y = conv2d(x, k, VarD(), Conv2dOptions{1, 1, PadMode::cyclic_lon, 1});
  CHECK(y.value()(0, 4, 4) == 9.0);
  // Longitude wraps: edge columns also see 9 taps away from the poles.
  CHECK(y.value()(0, 4, 0) == 9.0);
  // Latitude is zero-padded: top row sees only 6.
  CHECK(y.value()(0, 0, 3) == 6.0);
}

TEST_CASE("conv2d: stride-4 embedding shape") {
  // Full-scale shape contract computed on a reduced channel count; the
  // geometry does not depend on channels.
  VarD x(TensorD(Shape{1, 720, 1440}, 0.5));
  VarD k(TensorD(Shape{2, 1, 4, 4}, 0.1));
  VarD y = conv2d(x, k, VarD(), Conv2dOptions{4, 0, PadMode::zero, 1});
  CHECK(y.shape() == Shape{2, 180, 360});
}

TEST_CASE("conv2d: shape mismatch throws") {
  VarD x(iota({3, 4, 4}));
  VarD k(TensorD(Shape{2, 2, 3, 3}, 1.0));
  CHECK_THROWS_AS(conv2d(x, k, VarD(), Conv2dOptions{}), ShapeError);
}

TEST_CASE("conv2d: cyclic_lon commutes with column shift") {
  Rng rng(3);
  TensorD x = random_uniform<double>({3, 6, 16}, rng, -1, 1);
  VarD k(random_uniform<double>({4, 3, 3, 3}, rng, -1, 1));
  Conv2dOptions o{1, 1, PadMode::cyclic_lon, 1};
  for (Index s : {1, 5, 8}) {
    auto a = conv2d(VarD(shift_cols(x, s)), k, VarD(), o).value();
    auto b = shift_cols(conv2d(VarD(x), k, VarD(), o).value(), s);
    CHECK((a.array() - b.array()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv2d_transpose: stride-2 upsampling shape") {
  VarD x(TensorD(Shape{8, 5, 10}, 1.0));
  VarD k(TensorD(Shape{8, 4, 2, 2}, 1.0));
  CHECK(conv2d_transpose(x, k, VarD(), 2).shape() == Shape{4, 10, 20});
}

TEST_CASE("conv2d_transpose: delta input stamps the kernel") {
  TensorD xd(Shape{1, 3, 3});
  xd(0, 1, 1) = 1.0;
  TensorD kd = iota({1, 1, 2, 2});
  auto y = conv2d_transpose(VarD(xd), VarD(kd), VarD(), 2).value();
  REQUIRE(y.shape() == Shape{1, 6, 6});
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) CHECK(y(0, 2 + i, 2 + j) == kd[i * 2 + j]);
  CHECK(y.array().abs().sum() == doctest::Approx(kd.array().abs().sum()));
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Index stride = 1 + trial % 3, k = 2 + trial % 2;
    const Index ho = 3 + trial, wo = 4 + trial;
    const Index H = (ho - 1) * stride + k, W = (wo - 1) * stride + k;
    TensorD x = random_uniform<double>({3, H, W}, rng, -1, 1);
    TensorD y = random_uniform<double>({2, ho, wo}, rng, -1, 1);
    TensorD kern = random_uniform<double>({2, 3, k, k}, rng, -1, 1);
    auto cx = conv2d(VarD(x), VarD(kern), VarD(), Conv2dOptions{stride, 0, PadMode::zero, 1}).value();
    auto ty = conv2d_transpose(VarD(y), VarD(kern), VarD(), stride).value();
    REQUIRE(cx.shape() == y.shape());
    REQUIRE(ty.shape() == x.shape());
    const double lhs = (cx.array() * y.array()).sum();
    const double rhs = (x.array() * ty.array()).sum();
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("layer_norm: constant channel vector normalizes to zero") {
  VarD x(TensorD(Shape{4, 2, 2}, 3.0));
  VarD g(TensorD(Shape{4}, 1.0)), b(TensorD(Shape{4}, 0.0));
  CHECK(layer_norm(x, g, b).value().array().abs().maxCoeff() == 0.0);
}

TEST_CASE("layer_norm: zero mean, unit variance per position") {
  Rng rng(5);
  VarD x(random_uniform<double>({6, 3, 4}, rng, -5, 5));
  VarD g(TensorD(Shape{6}, 1.0)), b(TensorD(Shape{6}, 0.0));
  auto y = layer_norm(x, g, b).value();
  auto Y = y.cols();
  for (Index p = 0; p < Y.rows(); ++p) {
    CHECK(std::abs(Y.row(p).mean()) < 1e-6);
    CHECK(std::abs((Y.row(p).array() - Y.row(p).mean()).square().mean() - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm: single channel is rejected") {
  VarD x(TensorD(Shape{1, 2, 2}, 1.0));
  VarD g(TensorD(Shape{1}, 1.0)), b(TensorD(Shape{1}, 0.0));
  CHECK_THROWS_AS(layer_norm(x, g, b), ShapeError);
}

TEST_CASE("gelu: anchor values") {
  TensorD t(Shape{2});
  t[0] = 0.0;
  t[1] = 10.0;
  auto y = gelu(VarD(t)).value();
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 10.0) < 1e-3);
}

TEST_CASE("linear: identity and zero weights") {
  VarD x(iota({3, 2, 2}));
  TensorD eye(Shape{3, 3});
  for (Index i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK((linear(x, VarD(eye), VarD()).value().array() == x.value().array()).all());
  TensorD bias(Shape{2});
  bias[0] = 1.5;
  bias[1] = -2.0;
  auto y = linear(x, VarD(TensorD(Shape{2, 3})), VarD(bias)).value();
  CHECK(y.shape() == Shape{2, 2, 2});
  for (Index p = 0; p < 4; ++p) {
    CHECK(y[p] == 1.5);
    CHECK(y[4 + p] == -2.0);
  }
}

TEST_CASE("bilinear_sample_cyclic: nodes, periodicity, clamping") {
  TensorD x = iota({2, 4, 8});
  TensorD c(Shape{4, 2});
  c[0] = 2.0; c[1] = 5.0;    // node
  c[2] = 1.0; c[3] = 8.3;    // W + 0.3
  c[4] = 1.0; c[5] = 0.3;    // 0.3
  c[6] = -3.0; c[7] = 2.0;   // clamped to row 0
  auto y = bilinear_sample_cyclic(VarD(x), VarD(c)).value();
  CHECK(y[0] == x(0, 2, 5));
  CHECK(std::abs(y[1] - y[2]) < 1e-12);
  CHECK(y[3] == x(0, 0, 2));
  CHECK(y[4 + 0] == x(1, 2, 5));

  // Convex combination: 1-Lipschitz in the sampled values.
  Rng rng(9);
  TensorD dx = random_uniform<double>({2, 4, 8}, rng, -1, 1);
  TensorD x2 = x;
  x2.array() += dx.array();
  auto y2 = bilinear_sample_cyclic(VarD(x2), VarD(c)).value();
  CHECK((y2.array() - y.array()).abs().maxCoeff() <= dx.array().abs().maxCoeff() + 1e-12);
}

TEST_CASE("deform_conv_cyclic with zero offsets equals grouped cyclic conv2d") {
  Rng rng(21);
  const Index C = 4, H = 5, W = 8;
  TensorD x = random_uniform<double>({C, H, W}, rng, -1, 1);
  TensorD k = random_uniform<double>({C, 2, 3, 3}, rng, -1, 1);
  TensorD b = random_uniform<double>({C}, rng, -1, 1);
  DeformOptions o;
  o.heads = 2;
  auto dcn = deform_conv_cyclic(VarD(x), VarD(TensorD(Shape{2 * 27, H, W})), VarD(k), VarD(b), o).value();
  auto ref = conv2d(VarD(x), VarD(k), VarD(b), Conv2dOptions{1, 1, PadMode::cyclic_lon, 2}).value();
  CHECK((dcn.array() - ref.array()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("every primitive passes randomized finite-difference checks") {
  for (const auto& r : kp::testing::run_primitive_gradchecks(20)) {
    INFO(r.name << " worst relative error " << r.worst);
    CHECK(r.shapes >= 20);
    CHECK(r.worst <= 1e-4);
  }
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
  Rng rng(2);
  ParamStore<float> store;
  store.add("b.weight", random_uniform<float>({3, 4}, rng, -1, 1));
  store.add("a.bias", random_uniform<float>({5}, rng, -1, 1));
  const auto path = (std::filesystem::temp_directory_path() / "kp_ckpt_test.kpc").string();
  save_checkpoint(path, snapshot(store));
  const TensorMap back = load_checkpoint(path);
  REQUIRE(back.size() == 2);
  for (const auto& [label, v] : store) {
    CHECK(std::memcmp(back.at(label).data(), v.value().data(), sizeof(float) * v.size()) == 0);
  }
  ParamStore<float> other;
  other.add("b.weight", Tensor<float>(Shape{3, 4}));
  other.add("a.bias", Tensor<float>(Shape{5}));
  assign(other, back);
  CHECK((other.get("a.bias").value().array() == store.get("a.bias").value().array()).all());

  TensorMap bad = back;
  bad.at("a.bias")[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS(save_checkpoint(path, bad));
  std::filesystem::remove(path);
}
