#include "kunpeng/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

namespace kp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string day_name(Index date) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "day.%04lld.ofb", static_cast<long long>(date));
  return buf;
}

std::string sample_name(Index date) { return "sample." + std::to_string(date) + ".ofb"; }

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return json::parse(is);
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json meta_json(const std::vector<ChannelMeta>& meta) {
  json a = json::array();
  for (const auto& m : meta) a.push_back({{"variable", m.variable}, {"depth_index", m.depth_index}});
  return a;
}

std::vector<ChannelMeta> meta_from(const json& a) {
  std::vector<ChannelMeta> out;
  for (const auto& e : a) out.push_back({e.at("variable").get<std::string>(), e.at("depth_index").get<int>()});
  return out;
}

// One output channel group: a variable on every target level or a planar one.
struct VariablePlan {
  std::string name;
  std::vector<Index> raw_channels;  // ordered by source level
  std::vector<double> levels;       // source depths of raw_channels
};

std::vector<VariablePlan> plan_variables(const std::vector<ChannelMeta>& meta, const std::vector<double>& src_depths) {
  std::vector<VariablePlan> plan;
  std::map<std::string, std::size_t> index;
  for (Index c = 0; c < static_cast<Index>(meta.size()); ++c) {
    const auto& m = meta[static_cast<std::size_t>(c)];
    if (m.depth_index < 0 || m.depth_index >= static_cast<int>(src_depths.size())) {
      throw std::invalid_argument("raw channel " + m.variable + " has depth index " + std::to_string(m.depth_index) +
                                  " outside " + std::to_string(src_depths.size()) + " source levels");
    }
    auto [it, fresh] = index.try_emplace(m.variable, plan.size());
    if (fresh) plan.push_back({m.variable, {}, {}});
    auto& v = plan[it->second];
    v.raw_channels.push_back(c);
    v.levels.push_back(src_depths[static_cast<std::size_t>(m.depth_index)]);
  }
  for (auto& v : plan) {
    for (std::size_t i = 1; i < v.levels.size(); ++i) {
      if (!(v.levels[i] > v.levels[i - 1])) {
        throw std::invalid_argument("levels of " + v.name + " must appear in strictly increasing depth order");
      }
    }
  }
  return plan;
}

}  // namespace

Prepared preprocess(const RawData& raw) {
  if (raw.days.size() < 2) throw std::invalid_argument("preprocess needs at least 2 days");
  if (raw.target_depths.empty()) throw std::invalid_argument("no target depths");
  if (raw.year_length < 1) throw std::invalid_argument("year_length must be positive");
  const Index H = raw.n_lat, W = raw.n_lon, plane = H * W, D = static_cast<Index>(raw.target_depths.size());
  GeoGrid grid = GeoGrid::global(H, W, raw.target_depths);
  if (raw.mask_fraction.shape() != Shape{D, H, W}) {
    throw ShapeError("mask fraction is " + shape_string(raw.mask_fraction.shape()) + ", expected " +
                     shape_string({D, H, W}));
  }
  OceanMask mask = binarize_mask(raw.mask_fraction);

  const auto& raw_meta = raw.days.front().meta();
  for (const auto& d : raw.days) {
    if (d.meta() != raw_meta || d.n_lat() != H || d.n_lon() != W) throw ShapeError("raw days differ in layout");
  }
  const auto plan = plan_variables(raw_meta, raw.source_depths);

  // Interpolation is linear in the profile; apply it as a fixed coefficient matrix.
  std::vector<ChannelMeta> meta;
  std::vector<Eigen::MatrixXd> coeff;
  for (const auto& v : plan) {
    const Index n = static_cast<Index>(v.levels.size());
    if (n == 1) {
      meta.push_back({v.name, 0});
      coeff.push_back(Eigen::MatrixXd::Ones(1, 1));
      continue;
    }
    Eigen::MatrixXd a(D, n);
    for (Index j = 0; j < n; ++j) {
      std::vector<double> e(static_cast<std::size_t>(n), 0.0);
      e[static_cast<std::size_t>(j)] = 1.0;
      const auto col = interpolate_depth(e, v.levels, raw.target_depths);
      for (Index d = 0; d < D; ++d) a(d, j) = col[static_cast<std::size_t>(d)];
    }
    for (Index d = 0; d < D; ++d) meta.push_back({v.name, static_cast<int>(d)});
    coeff.push_back(std::move(a));
  }
  const Index n_dyn = static_cast<Index>(meta.size());

  std::vector<FieldTensor> dynamic;
  dynamic.reserve(raw.days.size());
  for (const auto& day : raw.days) {
    Tensor<float> out({n_dyn, H, W});
    Index row = 0;
    for (std::size_t g = 0; g < plan.size(); ++g) {
      const auto& a = coeff[g];
      for (Index d = 0; d < a.rows(); ++d, ++row) {
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(plane);
        for (Index j = 0; j < a.cols(); ++j) {
          const Index c = plan[g].raw_channels[static_cast<std::size_t>(j)];
          acc += a(d, j) * day.values().array().segment(c * plane, plane).cast<double>();
        }
        out.array().segment(row * plane, plane) = acc.cast<float>();
      }
    }
    dynamic.emplace_back(std::move(out), meta);
  }

  // Temporal statistics for dynamic channels; statics have none, so they are
  // standardized by their spatial ocean mean and variance instead.
  NormStats dyn_stats = compute_norm_stats(dynamic);
  const Index n_static = raw.statics.values().empty() ? 0 : raw.statics.n_chan();
  std::vector<ChannelMeta> all_meta = meta;
  for (Index s = 0; s < n_static; ++s) all_meta.push_back(raw.statics.meta()[static_cast<std::size_t>(s)]);
  const Index C = n_dyn + n_static;
  const Tensor<float> cmask = channel_mask(mask, all_meta);

  NormStats stats{Tensor<float>({C, H, W}), Tensor<float>({C, H, W})};
  stats.mean.array().head(n_dyn * plane) = dyn_stats.mean.array();
  stats.var.array().head(n_dyn * plane) = dyn_stats.var.array();
  for (Index s = 0; s < n_static; ++s) {
    if (raw.statics.n_lat() != H || raw.statics.n_lon() != W) throw ShapeError("static field grid mismatch");
    const Index c = n_dyn + s;
    const auto v = raw.statics.values().array().segment(s * plane, plane).cast<double>();
    const auto m = cmask.array().segment(c * plane, plane) != 0.0f;
    const double n = static_cast<double>(m.count());
    if (n == 0) throw std::invalid_argument("static channel " + all_meta[static_cast<std::size_t>(c)].variable + " has no ocean");
    const double mu = m.select(v, 0.0).sum() / n;
    const double var = m.select((v - mu).square(), 0.0).sum() / n;
    stats.mean.array().segment(c * plane, plane).setConstant(static_cast<float>(mu));
    stats.var.array().segment(c * plane, plane).setConstant(static_cast<float>(var));
  }
  zero_land(stats.mean, cmask);
  zero_land(stats.var, cmask);
  if (const auto bad = stats.degenerate_cells(cmask); !bad.empty()) {
    const Index i = bad.front();
    throw DegenerateStatsError(i / plane, (i / W) % H, i % W);
  }

  std::vector<FieldTensor> samples;
  samples.reserve(dynamic.size());
  const std::vector<FieldTensor> statics = n_static ? std::vector<FieldTensor>{raw.statics} : std::vector<FieldTensor>{};
  for (const auto& d : dynamic) {
    const std::vector<FieldTensor> one{d};
    samples.push_back(normalize(stack_channels(one, statics), stats, mask));
  }
  Climatology clim = compute_climatology(samples, raw.first_date, raw.year_length);

  return Prepared{std::move(grid), std::move(mask), std::move(all_meta), n_dyn, std::move(stats),
                  std::move(samples), std::move(clim), raw.first_date};
}

// -- files --------------------------------------------------------------------

void write_raw(const RawData& raw, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path root(dir);
  write_json(root / "grid.json", {{"n_lat", raw.n_lat},
                                  {"n_lon", raw.n_lon},
                                  {"source_depths", raw.source_depths},
                                  {"target_depths", raw.target_depths},
                                  {"year_length", raw.year_length},
                                  {"first_date", raw.first_date},
                                  {"n_dates", raw.days.size()}});
  const Index D = raw.mask_fraction.dim(0);
  std::vector<ChannelMeta> mask_meta;
  for (Index d = 0; d < D; ++d) mask_meta.push_back({"ocean_fraction", static_cast<int>(d)});
  write_field((root / "mask_fraction.ofb").string(), FieldTensor(raw.mask_fraction, mask_meta));
  write_field((root / "static.ofb").string(), raw.statics);
  for (std::size_t i = 0; i < raw.days.size(); ++i) {
    write_field((root / day_name(raw.first_date + static_cast<Index>(i))).string(), raw.days[i]);
  }
}

std::vector<std::string> missing_raw_inputs(const std::string& dir) {
  const fs::path root(dir);
  std::vector<std::string> missing;
  if (!fs::is_directory(root)) return {root.string()};
  for (const char* f : {"grid.json", "mask_fraction.ofb", "static.ofb"}) {
    if (!fs::exists(root / f)) missing.push_back((root / f).string());
  }
  if (!fs::exists(root / "grid.json")) return missing;
  const json g = read_json(root / "grid.json");
  for (const char* key : {"n_lat", "n_lon", "source_depths", "target_depths", "year_length", "first_date", "n_dates"}) {
    if (!g.contains(key)) missing.push_back((root / "grid.json").string() + ": key " + key);
  }
  if (g.contains("first_date") && g.contains("n_dates")) {
    const Index first = g["first_date"].get<Index>(), n = g["n_dates"].get<Index>();
    for (Index d = first; d < first + n; ++d) {
      if (!fs::exists(root / day_name(d))) missing.push_back((root / day_name(d)).string());
    }
  }
  return missing;
}

RawData read_raw(const std::string& dir) {
  const fs::path root(dir);
  const json g = read_json(root / "grid.json");
  RawData raw;
  raw.n_lat = g.at("n_lat").get<Index>();
  raw.n_lon = g.at("n_lon").get<Index>();
  raw.source_depths = g.at("source_depths").get<std::vector<double>>();
  raw.target_depths = g.at("target_depths").get<std::vector<double>>();
  raw.year_length = g.at("year_length").get<Index>();
  raw.first_date = g.at("first_date").get<Index>();
  raw.mask_fraction = read_field((root / "mask_fraction.ofb").string()).values();
  raw.statics = read_field((root / "static.ofb").string());
  const Index n = g.at("n_dates").get<Index>();
  for (Index d = raw.first_date; d < raw.first_date + n; ++d) raw.days.push_back(read_field((root / day_name(d)).string()));
  return raw;
}

void write_prepared(const Prepared& p, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path root(dir);
  std::vector<ChannelMeta> mask_meta;
  for (Index d = 0; d < p.mask.n_deep(); ++d) mask_meta.push_back({"ocean", static_cast<int>(d)});
  write_field((root / "mask.ofb").string(), FieldTensor(p.mask.values(), mask_meta));
  write_field((root / "stats.mean.ofb").string(), FieldTensor(p.stats.mean, p.meta));
  write_field((root / "stats.var.ofb").string(), FieldTensor(p.stats.var, p.meta));
  std::vector<Index> clim_index;
  const auto& entries = p.clim.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i]) continue;
    write_field((root / ("clim." + std::to_string(i) + ".ofb")).string(), FieldTensor(*entries[i], p.meta));
    clim_index.push_back(static_cast<Index>(i));
  }
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    write_field((root / sample_name(p.first_date + static_cast<Index>(i))).string(), p.samples[i]);
  }
  write_json(root / "dataset.json", {{"n_lat", p.grid.n_lat()},
                                     {"n_lon", p.grid.n_lon()},
                                     {"depths_m", p.grid.depths_m()},
                                     {"channels", meta_json(p.meta)},
                                     {"out_chan", p.out_chan},
                                     {"n_dates", p.samples.size()},
                                     {"first_date", p.first_date},
                                     {"year_length", p.clim.year_length()},
                                     {"climatology_indices", clim_index}});
}

PreparedInfo read_prepared_info(const std::string& dir) {
  const json j = read_json(fs::path(dir) / "dataset.json");
  return PreparedInfo{GeoGrid::global(j.at("n_lat").get<Index>(), j.at("n_lon").get<Index>(),
                                      j.at("depths_m").get<std::vector<double>>()),
                      meta_from(j.at("channels")),
                      j.at("out_chan").get<Index>(),
                      j.at("n_dates").get<Index>(),
                      j.at("first_date").get<Index>(),
                      j.at("year_length").get<Index>()};
}

OceanMask read_mask(const std::string& dir) { return OceanMask(read_field((fs::path(dir) / "mask.ofb").string()).values()); }

NormStats read_stats(const std::string& dir) {
  const fs::path root(dir);
  return NormStats{read_field((root / "stats.mean.ofb").string()).values(),
                   read_field((root / "stats.var.ofb").string()).values()};
}

Climatology read_climatology(const std::string& dir) {
  const fs::path root(dir);
  const json j = read_json(root / "dataset.json");
  const Index year = j.at("year_length").get<Index>();
  std::vector<std::optional<Tensor<float>>> entries(static_cast<std::size_t>(year));
  for (Index i : j.at("climatology_indices").get<std::vector<Index>>()) {
    entries.at(static_cast<std::size_t>(i)) = read_field((root / ("clim." + std::to_string(i) + ".ofb")).string()).values();
  }
  return Climatology(year, std::move(entries));
}

Dataset open_dataset(const std::string& dir, std::size_t cache_capacity, CacheMode mode) {
  const auto info = read_prepared_info(dir);
  const auto mask = read_mask(dir);
  const fs::path root(dir);
  const Index first = info.first_date;
  auto loader = [root, first](Index d) { return read_field((root / sample_name(first + d)).string()).values(); };
  return Dataset(loader, info.n_dates, info.meta, channel_mask(mask, info.meta), latitude_weights(info.grid),
                 cache_capacity, mode);
}

Dataset make_dataset(const Prepared& p, std::size_t cache_capacity, CacheMode mode) {
  std::vector<Tensor<float>> samples;
  for (const auto& s : p.samples) samples.push_back(s.values());
  return Dataset::in_memory(std::move(samples), p.meta, p.channel_mask(), latitude_weights(p.grid), cache_capacity, mode);
}

// -- synthetic raw data -------------------------------------------------------

RawData synth_raw(const SynthRawOptions& o) {
  if (o.source_depths.empty()) throw std::invalid_argument("synth_raw needs source depths");
  const Index S = static_cast<Index>(o.source_depths.size());
  const GeoGrid src = GeoGrid::global(o.n_lat, o.n_lon, o.source_depths);
  const GeoGrid dst = GeoGrid::global(o.n_lat, o.n_lon, o.target_depths);

  std::vector<ChannelMeta> meta;
  std::vector<double> speeds;
  Rng rng(o.seed ^ 0x5eedULL);
  for (const char* v : {"t", "s"}) {
    const double s = rng.uniform(0.2, 0.45);
    for (Index d = 0; d < S; ++d) {
      meta.push_back({v, static_cast<int>(d)});
      speeds.push_back(s);
    }
  }
  for (const char* v : {"u", "v", "ssh"}) {
    meta.push_back({v, 0});
    speeds.push_back(rng.uniform(0.2, 0.45));
  }

  SynthOptions so;
  so.meta = meta;
  so.speeds = speeds;
  // Providers deliver values everywhere; the mask decides what is ocean.
  so.mask = OceanMask(Tensor<float>({S, o.n_lat, o.n_lon}, 1.0f));
  RawData raw;
  raw.n_lat = o.n_lat;
  raw.n_lon = o.n_lon;
  raw.source_depths = o.source_depths;
  raw.target_depths = o.target_depths;
  raw.year_length = o.year_length;
  raw.first_date = 0;
  raw.mask_fraction = synth_mask_fraction(dst);
  raw.days = synth_series(src, static_cast<Index>(meta.size()), o.n_dates, o.seed, so);
  raw.statics = synth_bathymetry(dst, binarize_mask(raw.mask_fraction));
  return raw;
}

}  // namespace kp
