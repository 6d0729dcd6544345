#include "doctest.h"

#include "kunpeng/geogrid.hpp"

#include <cmath>

using namespace kp;

TEST_CASE("latitude weights: symmetric pair is uniform") {
  const std::vector<double> lat{-45.0, 45.0};
  const auto w = latitude_weights(lat);
  CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("latitude weights: equator row is heavier") {
  const std::vector<double> lat{-45.0, 0.0, 45.0};
  const auto w = latitude_weights(lat);
  const double s = std::sqrt(0.5);
  const double expect_mid = 3.0 / (1.0 + 2.0 * s);
  CHECK(w[1] == doctest::Approx(expect_mid).epsilon(1e-14));
  CHECK(w[0] == doctest::Approx(s * expect_mid).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(1.2426406871).epsilon(1e-9));
  CHECK(w[0] == doctest::Approx(0.8786796564).epsilon(1e-9));
  CHECK(w[2] == w[0]);
}

TEST_CASE("latitude weights: mean one and independent of longitude count") {
  for (Index n : {8, 40, 720}) {
    const auto g = GeoGrid::global(n, 2 * n, {});
    const auto w = latitude_weights(g);
    CHECK(std::abs(w.weights.mean() - 1.0) < 1e-12);
    CHECK((w.weights > 0.0).all());
    const auto g2 = GeoGrid::global(n, 4 * n, {});
    CHECK((latitude_weights(g2).weights == w.weights).all());
  }
}

TEST_CASE("grid validation") {
  CHECK_THROWS_AS(GeoGrid({-90.0, 0.0}, {0.0}, {}), GridError);
  CHECK_THROWS_AS(GeoGrid({0.0, 0.0}, {0.0}, {}), GridError);
  CHECK_THROWS_AS(GeoGrid({0.0}, {0.0, 180.0}, {}), GridError);
  CHECK_THROWS_AS(GeoGrid({0.0}, {0.0, 1.0, 3.0}, {}), GridError);
  CHECK_THROWS_AS(GeoGrid({0.0}, {0.0}, {10.0, 5.0}), GridError);
  CHECK_NOTHROW(GeoGrid({10.0, 0.0, -10.0}, {-180.0, 0.0}, {1.0}));

  const auto g = GeoGrid::global(40, 80, default_depth_targets());
  CHECK(g.n_deep() == 10);
  CHECK(g.lat_spacing_deg() == doctest::Approx(4.5));
  CHECK(g.lon_deg().front() == -180.0);
  CHECK_NOTHROW(g.require_model_compatible());
  CHECK_THROWS_AS(GeoGrid::global(12, 80, {}).require_model_compatible(), GridError);
}

TEST_CASE("binarize_mask: ceiling and idempotence") {
  Tensor<float> f({1, 1, 3});
  f[0] = 0.0f;
  f[1] = 0.3f;
  f[2] = 1.0f;
  const auto m = binarize_mask(f);
  CHECK(m.values()[0] == 0.0f);
  CHECK(m.values()[1] == 1.0f);
  CHECK(m.values()[2] == 1.0f);
  CHECK((binarize_mask(m.values()).values().array() == m.values().array()).all());

  f[1] = 1.5f;
  CHECK_THROWS_AS(binarize_mask(f), std::out_of_range);
  f[1] = -0.1f;
  CHECK_THROWS_AS(binarize_mask(f), std::out_of_range);
}

TEST_CASE("ocean mask rejects ocean below land") {
  Tensor<float> v({2, 1, 2}, 1.0f);
  v(0, 0, 1) = 0.0f;
  CHECK_THROWS_AS(OceanMask{v}, GridError);
  v(1, 0, 1) = 0.0f;
  CHECK_NOTHROW(OceanMask{v});
  v(1, 0, 0) = 0.5f;
  CHECK_THROWS_AS(OceanMask{v}, GridError);
}

TEST_CASE("interpolate_depth") {
  const std::vector<double> src{0.0, 10.0}, vals{0.0, 10.0};
  const std::vector<double> mid{5.0};
  CHECK(interpolate_depth(vals, src, mid)[0] == doctest::Approx(5.0));

  const std::vector<double> s3{1.0, 4.0, 9.0, 20.0}, v3{3.0, -1.0, 2.5, 7.0};
  CHECK(interpolate_depth(v3, s3, s3) == v3);

  // Clamp on both sides; strict refuses.
  const std::vector<double> outside{0.5, 30.0};
  const auto c = interpolate_depth(v3, s3, outside);
  CHECK(c[0] == 3.0);
  CHECK(c[1] == 7.0);
  CHECK_THROWS_AS(interpolate_depth(v3, s3, outside, DepthRange::strict), std::out_of_range);

  const std::vector<double> one{5.0}, one_src{1.0};
  CHECK_THROWS_AS(interpolate_depth(one, one_src, mid), std::invalid_argument);
}

TEST_CASE("interpolate_depth commutes with affine maps") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> src{0.5}, vals;
    for (int i = 0; i < 6; ++i) src.push_back(src.back() + rng.uniform(0.5, 40.0));
    for (std::size_t i = 0; i < src.size(); ++i) vals.push_back(rng.uniform(-5, 30));
    std::vector<double> dst;
    for (int i = 0; i < 12; ++i) dst.push_back(rng.uniform(0.0, src.back() + 5.0));
    const double a = rng.uniform(-3, 3), b = rng.uniform(-10, 10);
    std::vector<double> mapped;
    for (double v : vals) mapped.push_back(a * v + b);
    const auto lhs = interpolate_depth(mapped, src, dst);
    const auto rhs = interpolate_depth(vals, src, dst);
    for (std::size_t i = 0; i < dst.size(); ++i) CHECK(std::abs(lhs[i] - (a * rhs[i] + b)) < 1e-12 * (1 + std::abs(lhs[i])));
  }
}

TEST_CASE("region mask needs a selected cell") {
  CHECK_THROWS_AS(RegionMask("empty", Tensor<float>({2, 2})), GridError);
  CHECK_NOTHROW(RegionMask("one", Tensor<float>({2, 2}, 1.0f)));
}
