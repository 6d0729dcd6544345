#include "kunpeng/field.hpp"

#include "kunpeng/binary_io.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <numbers>

namespace kp {

using json = nlohmann::json;

FieldTensor::FieldTensor(Tensor<float> values, std::vector<ChannelMeta> meta)
    : values_(std::move(values)), meta_(std::move(meta)) {
  if (values_.rank() != 3) throw ShapeError("field must be (n_chan, n_lat, n_lon), got " + shape_string(values_.shape()));
  if (values_.dim(0) != static_cast<Index>(meta_.size())) {
    throw ShapeError("field has " + std::to_string(values_.dim(0)) + " channels but " +
                     std::to_string(meta_.size()) + " labels");
  }
}

FieldTensor FieldTensor::slice(Index begin, Index count) const {
  if (begin < 0 || count < 0 || begin + count > n_chan()) throw std::out_of_range("channel slice out of range");
  const Index plane = n_lat() * n_lon();
  Tensor<float> v({count, n_lat(), n_lon()}, values_.array().segment(begin * plane, count * plane));
  return FieldTensor(std::move(v), {meta_.begin() + begin, meta_.begin() + begin + count});
}

Tensor<float> channel_mask(const OceanMask& mask, std::span<const ChannelMeta> meta) {
  const Index n = static_cast<Index>(meta.size()), plane = mask.n_lat() * mask.n_lon();
  Tensor<float> out({n, mask.n_lat(), mask.n_lon()});
  for (Index c = 0; c < n; ++c) {
    const int d = meta[static_cast<std::size_t>(c)].depth_index;
    if (d < 0 || d >= mask.n_deep()) {
      throw std::out_of_range("channel " + meta[static_cast<std::size_t>(c)].variable + " depth index " +
                              std::to_string(d) + " outside mask with " + std::to_string(mask.n_deep()) +
                              " layers");
    }
    out.array().segment(c * plane, plane) = mask.values().array().segment(d * plane, plane);
  }
  return out;
}

void zero_land(Tensor<float>& values, const Tensor<float>& cmask) {
  require_same_shape(values, cmask, "zero_land");
  values.array() = (cmask.array() != 0.0f).select(values.array(), 0.0f);
}

// -- OFB ----------------------------------------------------------------------

namespace {

constexpr char kOfbMagic[4] = {'O', 'F', 'B', '1'};
constexpr std::uint32_t kOfbVersion = 1;

json meta_to_json(const std::vector<ChannelMeta>& meta) {
  json arr = json::array();
  for (const auto& m : meta) arr.push_back({{"variable", m.variable}, {"depth_index", m.depth_index}});
  return arr;
}

}  // namespace

void write_field(const std::string& path, const FieldTensor& field) {
  const std::string meta = meta_to_json(field.meta()).dump();
  io::Writer w;
  w.raw(kOfbMagic, 4);
  w.u32(kOfbVersion);
  w.u32(static_cast<std::uint32_t>(field.n_chan()));
  w.u32(static_cast<std::uint32_t>(field.n_lat()));
  w.u32(static_cast<std::uint32_t>(field.n_lon()));
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.f32(field.values().data(), static_cast<std::size_t>(field.values().size()));
  w.commit(path);
}

FieldTensor read_field(const std::string& path) {
  io::Reader r(path);
  if (r.bytes(4, "magic") != std::string(kOfbMagic, 4)) throw io::FormatError("bad OFB magic", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != kOfbVersion) throw io::FormatError("unsupported OFB version", version_at);
  const auto shape_at = r.offset();
  const Index c = r.u32("n_chan"), h = r.u32("n_lat"), w = r.u32("n_lon");
  const std::uint32_t meta_len = r.u32("meta_len");
  const auto meta_at = r.offset();
  const std::string meta_text = r.bytes(meta_len, "channel_meta");

  std::vector<ChannelMeta> meta;
  try {
    const json arr = json::parse(meta_text);
    if (!arr.is_array()) throw io::FormatError("channel_meta is not a JSON array", meta_at);
    for (const auto& e : arr) meta.push_back({e.at("variable").get<std::string>(), e.at("depth_index").get<int>()});
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("malformed channel_meta: ") + e.what(), meta_at);
  }
  if (static_cast<Index>(meta.size()) != c) {
    throw io::FormatError("channel_meta length disagrees with n_chan", shape_at);
  }

  const auto data_at = r.offset();
  const std::uint64_t expected = static_cast<std::uint64_t>(c * h * w) * sizeof(float);
  if (r.remaining() < expected) throw io::FormatError("truncated file while reading values", data_at);
  if (r.remaining() > expected) throw io::FormatError("trailing bytes after values", data_at + expected);
  Tensor<float> values({c, h, w});
  r.f32(values.data(), static_cast<std::size_t>(values.size()), "values");
  return FieldTensor(std::move(values), std::move(meta));
}

// -- normalization ------------------------------------------------------------

DegenerateStatsError::DegenerateStatsError(Index channel, Index row, Index col)
    : std::runtime_error("degenerate statistics: ocean cell (channel " + std::to_string(channel) + ", lat " +
                         std::to_string(row) + ", lon " + std::to_string(col) + ") has variance below " +
                         "the floor") {}

std::vector<Index> NormStats::degenerate_cells(const Tensor<float>& cmask) const {
  require_same_shape(var, cmask, "degenerate_cells");
  std::vector<Index> out;
  for (Index i = 0; i < var.size(); ++i) {
    if (cmask[i] != 0.0f && !(static_cast<double>(var[i]) >= kVarianceFloor)) out.push_back(i);
  }
  return out;
}

NormStats compute_norm_stats(std::span<const FieldTensor> samples) {
  if (samples.size() < 2) throw std::invalid_argument("normalization statistics need at least 2 samples");
  const Shape& shape = samples.front().values().shape();
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(shape_size(shape));
  for (const auto& s : samples) {
    if (s.values().shape() != shape) throw ShapeError("samples differ in shape");
    sum += s.values().array().cast<double>();
  }
  const double n = static_cast<double>(samples.size());
  const Eigen::ArrayXd mean = sum / n;
  // Two-pass for accuracy.
  Eigen::ArrayXd sq = Eigen::ArrayXd::Zero(mean.size());
  for (const auto& s : samples) sq += (s.values().array().cast<double>() - mean).square();
  return NormStats{Tensor<float>(shape, mean.cast<float>()), Tensor<float>(shape, (sq / n).cast<float>())};
}

namespace {

template <typename Scalar>
void check_variance(const Tensor<Scalar>& var, const Tensor<Scalar>& cmask) {
  const Index h = var.dim(1), w = var.dim(2);
  for (Index i = 0; i < var.size(); ++i) {
    if (cmask[i] != Scalar(0) && !(static_cast<double>(var[i]) >= kVarianceFloor)) {
      throw DegenerateStatsError(i / (h * w), (i / w) % h, i % w);
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> standardize(const Tensor<Scalar>& x, const Tensor<Scalar>& mean, const Tensor<Scalar>& var,
                           const Tensor<Scalar>& cmask) {
  require_same_shape(x, mean, "normalize");
  require_same_shape(x, var, "normalize");
  require_same_shape(x, cmask, "normalize");
  check_variance(var, cmask);
  const auto z = (x.array() - mean.array()) / var.array().sqrt();
  return Tensor<Scalar>(x.shape(), (cmask.array() != Scalar(0)).select(z, Scalar(0)));
}

template <typename Scalar>
Tensor<Scalar> unstandardize(const Tensor<Scalar>& z, const Tensor<Scalar>& mean, const Tensor<Scalar>& var,
                             const Tensor<Scalar>& cmask) {
  require_same_shape(z, mean, "denormalize");
  require_same_shape(z, var, "denormalize");
  require_same_shape(z, cmask, "denormalize");
  check_variance(var, cmask);
  const auto x = z.array() * var.array().sqrt() + mean.array();
  return Tensor<Scalar>(z.shape(), (cmask.array() != Scalar(0)).select(x, Scalar(0)));
}

template Tensor<float> standardize(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                   const Tensor<float>&);
template Tensor<double> standardize(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                    const Tensor<double>&);
template Tensor<float> unstandardize(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                     const Tensor<float>&);
template Tensor<double> unstandardize(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                      const Tensor<double>&);

FieldTensor normalize(const FieldTensor& field, const NormStats& stats, const OceanMask& mask) {
  // Computed in double so the float round trip only loses the final rounding.
  const auto cm = channel_mask(mask, field.meta()).cast<double>();
  auto z = standardize(field.values().cast<double>(), stats.mean.cast<double>(), stats.var.cast<double>(), cm);
  return FieldTensor(z.cast<float>(), field.meta());
}

FieldTensor denormalize(const FieldTensor& field, const NormStats& stats, const OceanMask& mask) {
  const auto cm = channel_mask(mask, field.meta()).cast<double>();
  auto x = unstandardize(field.values().cast<double>(), stats.mean.cast<double>(), stats.var.cast<double>(), cm);
  return FieldTensor(x.cast<float>(), field.meta());
}

// -- climatology --------------------------------------------------------------

Climatology::Climatology(Index year_length, std::vector<std::optional<Tensor<float>>> by_index)
    : year_length_(year_length), by_index_(std::move(by_index)) {
  if (year_length_ < 1) throw std::invalid_argument("year length must be positive");
  if (static_cast<Index>(by_index_.size()) != year_length_) {
    throw std::invalid_argument("climatology needs one slot per calendar index");
  }
  bool any = false;
  for (const auto& e : by_index_) any = any || e.has_value();
  if (!any) throw std::invalid_argument("climatology has no dates");
}

Index Climatology::calendar_index(Index date) const {
  const Index r = date % year_length_;
  return r < 0 ? r + year_length_ : r;
}

bool Climatology::has(Index date) const { return by_index_[static_cast<std::size_t>(calendar_index(date))].has_value(); }

const Tensor<float>& Climatology::for_date(Index date) const {
  const auto& e = by_index_[static_cast<std::size_t>(calendar_index(date))];
  if (!e) throw std::out_of_range("no climatology for calendar index " + std::to_string(calendar_index(date)));
  return *e;
}

Climatology compute_climatology(std::span<const FieldTensor> samples, Index first_date, Index year_length) {
  if (samples.empty()) throw std::invalid_argument("climatology needs at least one sample");
  if (year_length < 1) throw std::invalid_argument("year length must be positive");
  const Shape& shape = samples.front().values().shape();
  std::vector<Eigen::ArrayXd> sums(static_cast<std::size_t>(year_length));
  std::vector<int> counts(static_cast<std::size_t>(year_length), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].values().shape() != shape) throw ShapeError("samples differ in shape");
    Index k = (first_date + static_cast<Index>(i)) % year_length;
    if (k < 0) k += year_length;
    auto& s = sums[static_cast<std::size_t>(k)];
    if (s.size() == 0) s = Eigen::ArrayXd::Zero(shape_size(shape));
    s += samples[i].values().array().cast<double>();
    ++counts[static_cast<std::size_t>(k)];
  }
  std::vector<std::optional<Tensor<float>>> out(static_cast<std::size_t>(year_length));
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (counts[k]) out[k] = Tensor<float>(shape, (sums[k] / counts[k]).cast<float>());
  }
  return Climatology(year_length, std::move(out));
}

// -- assembly -----------------------------------------------------------------

FieldTensor stack_channels(std::span<const FieldTensor> fields, std::span<const FieldTensor> statics) {
  std::vector<const FieldTensor*> all;
  for (const auto& f : fields) all.push_back(&f);
  for (const auto& f : statics) all.push_back(&f);
  if (all.empty()) throw std::invalid_argument("nothing to stack");
  const Index h = all.front()->n_lat(), w = all.front()->n_lon();
  Index c = 0;
  for (const auto* f : all) {
    if (f->n_lat() != h || f->n_lon() != w) throw ShapeError("stack_channels: lat/lon shapes differ");
    c += f->n_chan();
  }
  Tensor<float> values({c, h, w});
  std::vector<ChannelMeta> meta;
  Index at = 0;
  for (const auto* f : all) {
    values.array().segment(at, f->values().size()) = f->values().array();
    at += f->values().size();
    meta.insert(meta.end(), f->meta().begin(), f->meta().end());
  }
  return FieldTensor(std::move(values), std::move(meta));
}

// -- synthetic data -----------------------------------------------------------

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Signed land indicator: positive over land. The continent sits off the
// equator and an island near the dateline; both grow with depth level d.
double landness(double lat, double lon, Index d) {
  const double grow = 0.12 * static_cast<double>(d);
  const double c1 = 1.0 + grow - (std::pow((lon - 20.0) / 45.0, 2) + std::pow((lat - 25.0) / 30.0, 2));
  double dlon = lon - 170.0;
  dlon -= 360.0 * std::round(dlon / 360.0);
  const double c2 = 1.0 + grow - (std::pow(dlon / 18.0, 2) + std::pow((lat + 30.0) / 15.0, 2));
  return std::max(c1, c2);
}

}  // namespace

Tensor<float> synth_mask_fraction(const GeoGrid& grid) {
  const Index nd = std::max<Index>(grid.n_deep(), 1);
  Tensor<float> frac({nd, grid.n_lat(), grid.n_lon()});
  for (Index d = 0; d < nd; ++d) {
    for (Index h = 0; h < grid.n_lat(); ++h) {
      for (Index w = 0; w < grid.n_lon(); ++w) {
        // Partial coverage in a thin coastal band; zero only deep inland.
        const double l = landness(grid.lat_deg()[h], grid.lon_deg()[w], d);
        frac(d, h, w) = static_cast<float>(std::clamp(0.5 - 2.0 * l, 0.0, 1.0));
      }
    }
  }
  return frac;
}

OceanMask synth_ocean_mask(const GeoGrid& grid) { return binarize_mask(synth_mask_fraction(grid)); }

std::vector<double> synth_speeds(Index n_chan, std::uint64_t seed, const SynthOptions& opts) {
  std::vector<double> s;
  if (!opts.speeds.empty()) {
    if (static_cast<Index>(opts.speeds.size()) != n_chan) throw std::invalid_argument("one speed per channel");
    s = opts.speeds;
  } else {
    Rng rng(seed ^ 0x5eedULL);
    for (Index c = 0; c < n_chan; ++c) s.push_back(rng.uniform(0.2, 0.45));
  }
  for (double& v : s) v *= opts.speed_scale;
  return s;
}

std::vector<FieldTensor> synth_series(const GeoGrid& grid, Index n_chan, Index n_steps, std::uint64_t seed,
                                      const SynthOptions& opts) {
  if (n_chan < 1 || n_steps < 0) throw std::invalid_argument("synth_series needs n_chan >= 1, n_steps >= 0");
  std::vector<ChannelMeta> meta = opts.meta;
  if (meta.empty()) {
    for (Index c = 0; c < n_chan; ++c) meta.push_back({"var" + std::to_string(c), 0});
  }
  if (static_cast<Index>(meta.size()) != n_chan) throw std::invalid_argument("one label per channel");
  const OceanMask mask = opts.mask ? *opts.mask : synth_ocean_mask(grid);
  const Tensor<float> cmask = channel_mask(mask, meta);
  const std::vector<double> speed = synth_speeds(n_chan, seed, opts);

  constexpr int kWaves = 3;
  struct Wave {
    double k, amp, phase, lat_freq, lat_phase;
  };
  Rng rng(seed);
  std::vector<double> base(static_cast<std::size_t>(n_chan));
  std::vector<std::array<Wave, kWaves>> waves(static_cast<std::size_t>(n_chan));
  for (Index c = 0; c < n_chan; ++c) {
    base[c] = rng.uniform(-2.0, 2.0);
    for (int j = 0; j < kWaves; ++j) {
      waves[c][j] = Wave{static_cast<double>(j + 1), rng.uniform(0.3, 1.0) / (j + 1),
                         rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.5, 2.0),
                         rng.uniform(0.0, 2.0 * std::numbers::pi)};
    }
  }

  const Index H = grid.n_lat(), W = grid.n_lon();
  std::vector<FieldTensor> out;
  out.reserve(static_cast<std::size_t>(n_steps));
  for (Index t = 0; t < n_steps; ++t) {
    Tensor<float> v({n_chan, H, W});
    for (Index c = 0; c < n_chan; ++c) {
      // Shift reduced modulo W so periodic steps evaluate identical arguments.
      double shift = speed[c] * static_cast<double>(t);
      shift -= static_cast<double>(W) * std::floor(shift / static_cast<double>(W));
      for (Index h = 0; h < H; ++h) {
        const double phi = grid.lat_deg()[h] * kDeg;
        for (Index w = 0; w < W; ++w) {
          double f = base[c] * std::cos(phi);
          for (const Wave& wave : waves[c]) {
            const double env = 0.6 + 0.4 * std::sin(wave.lat_freq * phi * 2.0 + wave.lat_phase);
            f += wave.amp * env *
                 std::sin(2.0 * std::numbers::pi * wave.k * (static_cast<double>(w) - shift) / W + wave.phase);
          }
          v(c, h, w) = static_cast<float>(f);
        }
      }
    }
    zero_land(v, cmask);
    out.emplace_back(std::move(v), meta);
  }
  return out;
}

FieldTensor synth_bathymetry(const GeoGrid& grid, const OceanMask& mask) {
  Tensor<float> v({1, grid.n_lat(), grid.n_lon()});
  for (Index h = 0; h < grid.n_lat(); ++h) {
    for (Index w = 0; w < grid.n_lon(); ++w) {
      if (!mask.ocean(0, h, w)) continue;
      // Seabed deepens away from the coasts; count ocean layers as a proxy.
      Index layers = 0;
      for (Index d = 0; d < mask.n_deep(); ++d) layers += mask.ocean(d, h, w) ? 1 : 0;
      const double lam = grid.lon_deg()[w] * kDeg, phi = grid.lat_deg()[h] * kDeg;
      v(0, h, w) = static_cast<float>(1000.0 * layers + 300.0 * std::sin(2 * lam) * std::cos(phi));
    }
  }
  return FieldTensor(std::move(v), {{"bathymetry", 0}});
}

}  // namespace kp
