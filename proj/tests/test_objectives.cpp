#include "doctest.h"

#include "kunpeng/objectives.hpp"

#include <cmath>
#include <limits>

using namespace kp;

namespace {

LatWeights weights_of(std::initializer_list<double> v) {
  LatWeights w;
  w.weights = Eigen::ArrayXd(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) w.weights[i++] = x;
  return w;
}

struct Case {
  GeoGrid grid = GeoGrid::global(8, 16, {5, 50});
  LatWeights lw = latitude_weights(grid);
  Tensor<double> mask;

  Case() {
    Rng rng(3);
    mask = Tensor<double>({2, 8, 16}, 1.0);
    for (Index i = 0; i < mask.size(); ++i)
      if (rng.uniform() < 0.3) mask[i] = 0.0;
  }
  Tensor<double> field(std::uint64_t seed, double lo = -2, double hi = 2) const {
    Rng rng(seed);
    return random_uniform<double>(mask.shape(), rng, lo, hi);
  }
};

}  // namespace

TEST_CASE("mll1 worked examples") {
  const Tensor<double> zero({1, 3, 1});
  Tensor<double> pred({1, 3, 1}), mask({1, 3, 1});
  pred[0] = 2.0;
  mask[0] = 1.0;
  const auto lw = weights_of({1.2426, 0.9, 0.8574});
  CHECK(mll1(pred, zero, mask, lw) == doctest::Approx(2 * 1.2426 / 3).epsilon(1e-9));
  CHECK(std::abs(mll1(pred, zero, mask, lw) - 0.8284) <= 1e-4);

  Case k;
  const auto y = k.field(1);
  CHECK(mll1(y, y, k.mask, k.lw) == 0.0);
  const Tensor<double> land(k.mask.shape());
  CHECK(mll1(k.field(2), y, land, k.lw) == 0.0);
  CHECK_THROWS_AS(mll1(y, Tensor<double>({2, 8, 15}), k.mask, k.lw), ShapeError);
}

TEST_CASE("mse and mae closed forms") {
  Case k;
  const auto y = k.field(4);
  CHECK(masked_mse(y, y, k.mask, k.lw) == 0.0);
  CHECK(masked_mae(y, y, k.mask, k.lw) == 0.0);

  // One perturbed ocean cell.
  auto p = y;
  const Index c = 1, h = 6, w = 3;
  k.mask(c, h, w) = 1.0;
  p(c, h, w) += 0.75;
  const double n = static_cast<double>(y.size());
  CHECK(masked_mse(p, y, k.mask, k.lw) == doctest::Approx(k.lw[h] * 0.75 * 0.75 / n).epsilon(1e-12));
  CHECK(masked_mae(p, y, k.mask, k.lw) == doctest::Approx(k.lw[h] * 0.75 / n).epsilon(1e-12));

  // Constant offset over the ocean.
  const double delta = 0.3;
  auto q = y;
  q.array() += delta;
  const double ml = cell_weights(k.mask, k.lw).array().sum();
  CHECK(masked_mse(q, y, k.mask, k.lw) == doctest::Approx(delta * delta * ml / n).epsilon(1e-12));
  CHECK(masked_bias(q, y, k.mask, k.lw) == doctest::Approx(delta * ml / n).epsilon(1e-12));
}

TEST_CASE("every metric ignores land values exactly") {
  Case k;
  const auto p = k.field(5), t = k.field(6), clim = k.field(7, -0.5, 0.5);
  auto p2 = p, t2 = t;
  Rng rng(8);
  for (Index i = 0; i < p.size(); ++i) {
    if (k.mask[i] != 0.0) continue;
    p2[i] = rng.uniform(-1e6, 1e6);
    t2[i] = i % 2 ? std::numeric_limits<double>::quiet_NaN() : rng.uniform(-1e6, 1e6);
  }
  CHECK(mll1(p2, t2, k.mask, k.lw) == mll1(p, t, k.mask, k.lw));
  CHECK(masked_mse(p2, t2, k.mask, k.lw) == masked_mse(p, t, k.mask, k.lw));
  CHECK(masked_mae(p2, t2, k.mask, k.lw) == masked_mae(p, t, k.mask, k.lw));
  CHECK(masked_acc(p2, t2, clim, k.mask, k.lw) == masked_acc(p, t, clim, k.mask, k.lw));
}

TEST_CASE("acc: self, antipodal, orthogonal, scale invariance, undefined") {
  Case k;
  const auto t = k.field(9), clim = k.field(10, -0.5, 0.5);
  CHECK(std::abs(masked_acc(t, t, clim, k.mask, k.lw) - 1.0) <= 1e-12);

  Tensor<double> anti(t.shape());
  anti.array() = 2.0 * clim.array() - t.array();
  CHECK(std::abs(masked_acc(anti, t, clim, k.mask, k.lw) + 1.0) <= 1e-12);

  // Gram-Schmidt against the weighted inner product.
  const auto cw = cell_weights(k.mask, k.lw);
  const Eigen::ArrayXd a = t.array() - clim.array();
  Eigen::ArrayXd b = k.field(11).array() - clim.array();
  b -= (cw.array() * a * b).sum() / (cw.array() * a * a).sum() * a;
  Tensor<double> ortho(t.shape());
  ortho.array() = clim.array() + b;
  CHECK(std::abs(masked_acc(ortho, t, clim, k.mask, k.lw)) <= 1e-12);

  const auto p = k.field(12);
  const double base = masked_acc(p, t, clim, k.mask, k.lw);
  for (double s : {0.001, 0.5, 7.0, 1e4}) {
    Tensor<double> ps(t.shape()), ts(t.shape());
    ps.array() = clim.array() + s * (p.array() - clim.array());
    ts.array() = clim.array() + s * (t.array() - clim.array());
    CHECK(std::abs(masked_acc(ps, ts, clim, k.mask, k.lw) - base) <= 1e-12);
  }
  CHECK(base >= -1.0);
  CHECK(base <= 1.0);

  CHECK_THROWS_AS(masked_acc(clim, t, clim, k.mask, k.lw), UndefinedMetricError);
  CHECK_THROWS_AS(masked_acc(t, clim, clim, k.mask, k.lw), UndefinedMetricError);
}

TEST_CASE("triangle inequality for mll1 and mae") {
  Case k;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = k.field(100 + 3 * s), b = k.field(101 + 3 * s), c = k.field(102 + 3 * s);
    CHECK(mll1(a, c, k.mask, k.lw) <= mll1(a, b, k.mask, k.lw) + mll1(b, c, k.mask, k.lw));
    CHECK(masked_mae(a, c, k.mask, k.lw) <= masked_mae(a, b, k.mask, k.lw) + masked_mae(b, c, k.mask, k.lw));
  }
}

TEST_CASE("mse is strictly convex in the ocean-restricted prediction") {
  Case k;
  const auto t = k.field(20);
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto p = k.field(200 + 2 * s), q = k.field(201 + 2 * s);
    // Distinct on the ocean.
    p.array() *= k.mask.array();
    q.array() *= k.mask.array();
    Tensor<double> mid(t.shape());
    mid.array() = 0.5 * (p.array() + q.array());
    const double lhs = masked_mse(mid, t, k.mask, k.lw);
    const double rhs = 0.5 * (masked_mse(p, t, k.mask, k.lw) + masked_mse(q, t, k.mask, k.lw));
    CHECK(lhs < rhs);
  }
}

TEST_CASE("mean bias map") {
  Case k;
  Tensor<double> m({1, 8, 16}, 1.0);
  m(0, 2, 5) = 0.0;
  Tensor<double> t0({1, 8, 16}, 0.25);
  const std::vector<Tensor<double>> truth{t0};
  CHECK((mean_bias<double>(truth, truth, m, k.lw).array() == 0.0).all());

  Tensor<double> over = t0;
  over.array() += 0.4;
  const std::vector<Tensor<double>> pred{over};
  const auto map = mean_bias<double>(pred, truth, m, k.lw);
  CHECK(map.shape() == Shape{8, 16});
  for (Index h = 0; h < 8; ++h)
    for (Index w = 0; w < 16; ++w) {
      const double expect = m(0, h, w) * k.lw[h] * 0.4;
      CHECK(map.array()[h * 16 + w] == doctest::Approx(expect).epsilon(1e-12));
      if (m(0, h, w) != 0.0) CHECK(map.array()[h * 16 + w] > 0.0);
    }

  // Two variables, two depths: average over both.
  const auto m2 = k.mask;
  const auto a = k.field(31), b = k.field(32), c = k.field(33), d = k.field(34);
  const std::vector<Tensor<double>> ps{a, b}, ts{c, d};
  const auto mb = mean_bias<double>(ps, ts, m2, k.lw);
  const double expect = (m2(0, 4, 7) * (a(0, 4, 7) - c(0, 4, 7)) + m2(1, 4, 7) * (a(1, 4, 7) - c(1, 4, 7)) +
                         m2(0, 4, 7) * (b(0, 4, 7) - d(0, 4, 7)) + m2(1, 4, 7) * (b(1, 4, 7) - d(1, 4, 7))) *
                        k.lw[4] / 4.0;
  CHECK(mb.array()[4 * 16 + 7] == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(mean_bias<double>({}, {}, m, k.lw), std::invalid_argument);
}

TEST_CASE("regional reduce") {
  const auto grid = GeoGrid::global(8, 16, {5, 50});
  const auto lw = latitude_weights(grid);
  Tensor<float> mv({2, 8, 16}, 1.0f);
  for (Index w = 0; w < 5; ++w) mv(0, 3, w) = mv(1, 3, w) = mv(1, 4, w) = 0.0f;
  const OceanMask mask(mv);
  const std::vector<ChannelMeta> meta{{"t", 0}, {"t", 1}, {"s", 0}};
  Rng rng(40);
  const FieldTensor f(random_uniform<float>({3, 8, 16}, rng, -1, 1), meta);
  const FieldTensor r(random_uniform<float>({3, 8, 16}, rng, -1, 1), meta);
  const auto cm = channel_mask(mask, meta);

  const RegionMask all("all", Tensor<float>({8, 16}, 1.0f));
  CHECK(regional_reduce(f, mask, all, lw, RegionStat::mse, r) == masked_mse(f.values(), r.values(), cm, lw));
  CHECK(regional_reduce(f, mask, all, lw, RegionStat::mae, r) == masked_mae(f.values(), r.values(), cm, lw));
  CHECK(regional_reduce(f, mask, all, lw, RegionStat::mbe, r) == masked_bias(f.values(), r.values(), cm, lw));
  CHECK(regional_reduce(f, mask, all, lw, RegionStat::mse, f) == 0.0);

  // Single cell, single channel.
  const FieldTensor f1 = f.slice(0, 1), r1 = r.slice(0, 1);
  Tensor<float> one({8, 16});
  one[6 * 16 + 9] = 1.0f;
  const RegionMask cell("cell", one);
  const double res = static_cast<double>(f1.values()(0, 6, 9)) - r1.values()(0, 6, 9);
  CHECK(regional_reduce(f1, mask, cell, lw, RegionStat::mse, r1, RegionNorm::per_cell) ==
        doctest::Approx(lw[6] * res * res).epsilon(1e-12));

  Tensor<float> landonly({8, 16});
  landonly[3 * 16 + 2] = 1.0f;
  CHECK_THROWS_AS(regional_reduce(f, mask, RegionMask("land", landonly), lw, RegionStat::mse, r), EmptyRegionError);
}

TEST_CASE("differentiable mll1 matches the metric and its subgradient") {
  Case k;
  const auto t = k.field(50), p = k.field(51);
  const auto cw = cell_weights(k.mask, k.lw);
  ad::Var<double> pv(p, true);
  const auto loss = mll1_loss(pv, t, cw);
  CHECK(loss.value()[0] == doctest::Approx(mll1(p, t, k.mask, k.lw)).epsilon(1e-12));
  ad::backward(loss);
  const double n = static_cast<double>(p.size());
  for (Index i = 0; i < p.size(); ++i) {
    const double s = p[i] > t[i] ? 1.0 : -1.0;
    CHECK(pv.grad()[i] == doctest::Approx(cw[i] * s / n).epsilon(1e-12));
  }
}

TEST_CASE("metric report serialization and summaries") {
  MetricReport rep;
  rep.n_lat = 8;
  rep.n_lon = 16;
  for (Index lead = 1; lead <= 3; ++lead) {
    rep.rows.push_back({"t", 5.0, lead, 0.1 * lead, 0.2 * lead, 0.9, 0.0});
    rep.rows.push_back({"s", 50.0, lead, 0.3 * lead, 0.4 * lead, 0.7, 0.0});
  }
  const auto csv = rep.to_csv();
  CHECK(csv.rfind("variable,depth_m,lead_days,mse,mae,acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  const auto sum = rep.lead_summary();
  REQUIRE(sum.size() == 3);
  CHECK(sum[1].lead_days == 2);
  CHECK(sum[1].mse == doctest::Approx(0.4));
  CHECK(sum[1].acc == doctest::Approx(0.8));
  const auto j = rep.to_json();
  CHECK(j["rows"].size() == 6);
  CHECK(j["grid"]["n_lon"] == 16);
  CHECK(rep.summary_csv().rfind("lead_days,mse,mae,acc\n", 0) == 0);
}
