#include "doctest.h"

#include "kunpeng/binary_io.hpp"
#include "kunpeng/field.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace kp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "kp_test_field";
  fs::create_directories(dir);
  return dir / name;
}

FieldTensor constant_field(Index c, Index h, Index w, float v) {
  std::vector<ChannelMeta> meta;
  for (Index i = 0; i < c; ++i) meta.push_back({"v" + std::to_string(i), 0});
  return FieldTensor(Tensor<float>({c, h, w}, v), meta);
}

OceanMask all_ocean(Index d, Index h, Index w) { return OceanMask(Tensor<float>({d, h, w}, 1.0f)); }

}  // namespace

TEST_CASE("field tensor validates labels") {
  CHECK_THROWS_AS(FieldTensor(Tensor<float>({2, 3, 4}), {{"a", 0}}), ShapeError);
  CHECK_THROWS_AS(FieldTensor(Tensor<float>({2, 3}), {{"a", 0}, {"b", 0}}), ShapeError);
  const auto f = constant_field(3, 2, 2, 1.0f);
  const auto s = f.slice(1, 2);
  CHECK(s.n_chan() == 2);
  CHECK(s.meta()[0].variable == "v1");
}

TEST_CASE("OFB round trip is bit exact and keeps labels") {
  Rng rng(11);
  Tensor<float> v = random_uniform<float>({3, 5, 8}, rng, -1e3, 1e3);
  v[0] = std::numeric_limits<float>::denorm_min();
  v[1] = -0.0f;
  FieldTensor f(v, {{"temp", 0}, {"salt \"deep\" é", 9}, {"ssh", 0}});
  const auto p = scratch("rt.ofb").string();
  write_field(p, f);
  const auto g = read_field(p);
  CHECK(g.meta() == f.meta());
  REQUIRE(g.values().shape() == f.values().shape());
  CHECK(std::memcmp(g.values().data(), f.values().data(), sizeof(float) * v.size()) == 0);

  // Header layout.
  std::ifstream in(p, std::ios::binary);
  char magic[4];
  std::uint32_t hdr[5];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(hdr), sizeof hdr);
  CHECK(std::string(magic, 4) == "OFB1");
  CHECK(hdr[0] == 1u);
  CHECK(hdr[1] == 3u);
  CHECK(hdr[2] == 5u);
  CHECK(hdr[3] == 8u);
}

TEST_CASE("OFB errors carry byte offsets") {
  const auto f = constant_field(2, 4, 4, 1.5f);
  const auto p = scratch("trunc.ofb").string();
  write_field(p, f);
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 3);
  try {
    read_field(p);
    FAIL("expected a format error");
  } catch (const io::FormatError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }

  write_field(p, f);
  {
    std::fstream io(p, std::ios::in | std::ios::out | std::ios::binary);
    io.seekp(4);
    const std::uint32_t bad = 7;
    io.write(reinterpret_cast<const char*>(&bad), 4);
  }
  try {
    read_field(p);
    FAIL("expected a version error");
  } catch (const io::FormatError& e) {
    CHECK(e.offset() == 4);
  }

  {
    std::ofstream o(p, std::ios::binary);
    o << "NOPE";
  }
  CHECK_THROWS_AS(read_field(p), io::FormatError);
  fs::resize_file(p, 2);
  CHECK_THROWS_AS(read_field(p), io::FormatError);
}

TEST_CASE("norm stats: constants, hand example, order invariance") {
  std::vector<FieldTensor> c{constant_field(1, 2, 2, 3.0f), constant_field(1, 2, 2, 3.0f)};
  auto s = compute_norm_stats(c);
  CHECK((s.mean.array() == 3.0f).all());
  CHECK((s.var.array() == 0.0f).all());

  std::vector<FieldTensor> two{constant_field(1, 2, 2, 0.0f), constant_field(1, 2, 2, 2.0f)};
  s = compute_norm_stats(two);
  CHECK((s.mean.array() == 1.0f).all());
  CHECK((s.var.array() == 1.0f).all());

  const auto grid = GeoGrid::global(8, 16, {0.0});
  auto series = synth_series(grid, 2, 9, 5);
  const auto a = compute_norm_stats(series);
  std::reverse(series.begin(), series.end());
  std::swap(series[1], series[5]);
  const auto b = compute_norm_stats(series);
  CHECK((a.mean.array() - b.mean.array()).abs().maxCoeff() <= 1e-6f);
  CHECK((a.var.array() - b.var.array()).abs().maxCoeff() <= 1e-6f);

  std::vector<FieldTensor> one{constant_field(1, 2, 2, 0.0f)};
  CHECK_THROWS_AS(compute_norm_stats(one), std::invalid_argument);
}

TEST_CASE("normalize: scalar examples and land zeroing") {
  NormStats s{Tensor<float>({1, 1, 2}, 10.0f), Tensor<float>({1, 1, 2}, 4.0f)};
  Tensor<float> m({1, 1, 2}, 1.0f);
  m[1] = 0.0f;
  const OceanMask mask(m);
  FieldTensor x(Tensor<float>({1, 1, 2}, 14.0f), {{"t", 0}});
  x.values()[1] = 123.0f;
  const auto z = normalize(x, s, mask);
  CHECK(z.values()[0] == 2.0f);
  CHECK(z.values()[1] == 0.0f);

  FieldTensor at_mean(Tensor<float>({1, 1, 2}, 10.0f), {{"t", 0}});
  CHECK(normalize(at_mean, s, mask).values()[0] == 0.0f);

  FieldTensor zero(Tensor<float>({1, 1, 2}, 0.0f), {{"t", 0}});
  CHECK(denormalize(zero, s, mask).values()[0] == 10.0f);
  FieldTensor unit(Tensor<float>({1, 1, 2}, 1.0f), {{"t", 0}});
  CHECK(denormalize(unit, s, mask).values()[0] == 12.0f);
  CHECK(denormalize(unit, s, mask).values()[1] == 0.0f);
}

TEST_CASE("normalize: degenerate ocean variance names the cell") {
  NormStats s{Tensor<float>({2, 2, 3}, 0.0f), Tensor<float>({2, 2, 3}, 1.0f)};
  s.var(1, 1, 2) = 0.0f;
  FieldTensor x(Tensor<float>({2, 2, 3}), {{"a", 0}, {"b", 0}});
  try {
    normalize(x, s, all_ocean(1, 2, 3));
    FAIL("expected degenerate statistics");
  } catch (const DegenerateStatsError& e) {
    CHECK(std::string(e.what()).find("channel 1, lat 1, lon 2") != std::string::npos);
  }
  CHECK_THROWS_AS(denormalize(x, s, all_ocean(1, 2, 3)), DegenerateStatsError);
  CHECK(s.degenerate_cells(channel_mask(all_ocean(1, 2, 3), x.meta())) == std::vector<Index>{11});

  // The same cell on land is fine.
  Tensor<float> m({1, 2, 3}, 1.0f);
  m(0, 1, 2) = 0.0f;
  CHECK_NOTHROW(normalize(x, s, OceanMask(m)));
}

TEST_CASE("normalize/denormalize round trips") {
  Rng rng(17);
  const Shape shape{3, 6, 8};
  Tensor<double> mean = random_uniform<double>(shape, rng, -50, 50);
  Tensor<double> var = random_uniform<double>(shape, rng, 1e-3, 40);
  Tensor<double> cm(shape, 1.0);
  for (Index i = 0; i < cm.size(); i += 7) cm[i] = 0.0;
  Tensor<double> x = random_uniform<double>(shape, rng, -80, 80);

  const auto back = unstandardize(standardize(x, mean, var, cm), mean, var, cm);
  const auto back2 = standardize(unstandardize(x, mean, var, cm), mean, var, cm);
  for (Index i = 0; i < x.size(); ++i) {
    if (cm[i] == 0.0) {
      CHECK(back[i] == 0.0);
      continue;
    }
    CHECK(std::abs(back[i] - x[i]) <= 1e-12 * std::max(1.0, std::abs(x[i])));
    CHECK(std::abs(back2[i] - x[i]) <= 1e-12 * std::max(1.0, std::abs(x[i])));
  }

  const auto grid = GeoGrid::global(8, 16, {0.0, 50.0});
  SynthOptions opt;
  opt.meta = {{"a", 0}, {"b", 1}};
  const auto series = synth_series(grid, 2, 12, 8, opt);
  const auto mask = synth_ocean_mask(grid);
  const auto stats = compute_norm_stats(series);
  const auto cmask = channel_mask(mask, opt.meta);
  for (const auto& f : series) {
    const auto r = denormalize(normalize(f, stats, mask), stats, mask);
    for (Index i = 0; i < f.values().size(); ++i) {
      if (cmask[i] == 0.0f) continue;
      CHECK(std::abs(r.values()[i] - f.values()[i]) <= 1e-5f * std::max(1.0f, std::abs(f.values()[i])));
    }
  }
}

TEST_CASE("normalized training set has zero mean and unit variance per ocean cell") {
  const auto grid = GeoGrid::global(16, 32, {0.0, 100.0});
  SynthOptions opt;
  opt.meta = {{"a", 0}, {"b", 1}, {"c", 0}};
  const auto series = synth_series(grid, 3, 40, 21, opt);
  const auto mask = synth_ocean_mask(grid);
  const auto stats = compute_norm_stats(series);
  std::vector<FieldTensor> z;
  for (const auto& f : series) z.push_back(normalize(f, stats, mask));
  const auto zs = compute_norm_stats(z);
  const auto cm = channel_mask(mask, opt.meta);
  double worst_mean = 0, worst_var = 0;
  for (Index i = 0; i < cm.size(); ++i) {
    if (cm[i] == 0.0f) continue;
    worst_mean = std::max(worst_mean, std::abs(static_cast<double>(zs.mean[i])));
    worst_var = std::max(worst_var, std::abs(static_cast<double>(zs.var[i]) - 1.0));
  }
  CHECK(worst_mean <= 1e-6);
  CHECK(worst_var <= 1e-4);
}

TEST_CASE("stack_channels") {
  const auto a = constant_field(2, 3, 4, 1.0f), b = constant_field(1, 3, 4, 2.0f);
  FieldTensor bathy(Tensor<float>({1, 3, 4}, 5.0f), {{"bathymetry", 0}});
  std::vector<FieldTensor> dyn{a, b}, rev{b, a}, st{bathy}, none;
  const auto s = stack_channels(dyn, st);
  CHECK(s.n_chan() == 4);
  CHECK(s.meta().back().variable == "bathymetry");
  CHECK(s.values()(3, 2, 3) == 5.0f);
  CHECK(s.values()(2, 0, 0) == 2.0f);
  CHECK(stack_channels(dyn, none).n_chan() == 3);
  const auto r = stack_channels(rev, none);
  CHECK(r.meta()[0] == b.meta()[0]);
  CHECK(r.meta()[1] == a.meta()[0]);

  // 4 ten-layer variables + 2 planar + 3 atmospheric + 1 static.
  std::vector<FieldTensor> full;
  for (int i = 0; i < 4; ++i) full.push_back(constant_field(10, 2, 2, 0.0f));
  full.push_back(constant_field(2, 2, 2, 0.0f));
  full.push_back(constant_field(3, 2, 2, 0.0f));
  std::vector<FieldTensor> one_static{constant_field(1, 2, 2, 0.0f)};
  CHECK(stack_channels(full, one_static).n_chan() == 46);

  std::vector<FieldTensor> bad{a, constant_field(1, 3, 5, 0.0f)};
  CHECK_THROWS_AS(stack_channels(bad, none), ShapeError);
}

TEST_CASE("synth_series: determinism, periodicity, still water, land") {
  const auto grid = GeoGrid::global(8, 16, {0.0, 200.0});
  SynthOptions opt;
  opt.meta = {{"a", 0}, {"b", 1}};
  const auto s1 = synth_series(grid, 2, 5, 42, opt), s2 = synth_series(grid, 2, 5, 42, opt);
  for (int t = 0; t < 5; ++t) {
    CHECK(std::memcmp(s1[t].values().data(), s2[t].values().data(), sizeof(float) * s1[t].values().size()) == 0);
  }
  const auto s3 = synth_series(grid, 2, 5, 43, opt);
  CHECK((s3[0].values().array() != s1[0].values().array()).any());

  // Speeds 0.5 and 0.25 cells/step on 16 columns wrap after 32 and 64 steps.
  opt.speeds = {0.5, 0.25};
  const auto p = synth_series(grid, 2, 70, 1, opt);
  for (int t : {0, 3}) {
    const auto d = (p[t].values().array() - p[t + 64].values().array()).abs().maxCoeff();
    CHECK(d <= 1e-6f);
  }
  CHECK((p[0].values().array() - p[1].values().array()).abs().maxCoeff() > 1e-3f);

  opt.speed_scale = 0.0;
  const auto still = synth_series(grid, 2, 6, 1, opt);
  for (int t = 1; t < 6; ++t) CHECK((still[t].values().array() == still[0].values().array()).all());

  const auto mask = synth_ocean_mask(grid);
  const auto cm = channel_mask(mask, opt.meta);
  CHECK((cm.array() == 0.0f).any());
  for (const auto& f : p) CHECK((cm.array() == 0.0f).select(f.values().array().abs(), 0.0f).maxCoeff() == 0.0f);
}

TEST_CASE("synthetic mask grows with depth and fractions ceil to it") {
  const auto grid = GeoGrid::global(40, 80, default_depth_targets());
  const auto frac = synth_mask_fraction(grid);
  CHECK((frac.array() > 0.0f && frac.array() < 1.0f).any());
  const auto mask = synth_ocean_mask(grid);
  const Index plane = 40 * 80;
  const auto land0 = (mask.values().array().segment(0, plane) == 0.0f).count();
  const auto land9 = (mask.values().array().segment(9 * plane, plane) == 0.0f).count();
  CHECK(land0 > 0);
  CHECK(land9 > land0);
  CHECK(land0 < plane / 4);
}

TEST_CASE("climatology by calendar index") {
  std::vector<FieldTensor> s;
  for (int i = 0; i < 7; ++i) s.push_back(constant_field(1, 1, 2, static_cast<float>(i)));
  const auto clim = compute_climatology(s, 0, 3);
  CHECK(clim.for_date(0)[0] == doctest::Approx(3.0));  // dates 0, 3, 6
  CHECK(clim.for_date(1)[0] == doctest::Approx(2.5));  // 1, 4
  CHECK(clim.for_date(5)[0] == doctest::Approx(3.5));  // 2, 5
  CHECK(clim.for_date(-1)[0] == clim.for_date(2)[0]);

  std::vector<FieldTensor> few{s[0], s[1]};
  const auto sparse = compute_climatology(few, 10, 5);
  CHECK(sparse.has(10));
  CHECK_FALSE(sparse.has(12));
  CHECK_THROWS_AS(sparse.for_date(12), std::out_of_range);
}
