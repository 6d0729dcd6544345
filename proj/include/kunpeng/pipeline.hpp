#pragma once

#include "kunpeng/trainer.hpp"

#include <string>
#include <vector>

namespace kp {

/// Physical fields as a data provider delivers them. Dynamic channels are
/// labelled with a depth index into source_depths; a variable with one level
/// is planar. Static channels are planar.
struct RawData {
  Index n_lat = 0, n_lon = 0;
  std::vector<double> source_depths;
  std::vector<double> target_depths;
  Index year_length = 365;
  Index first_date = 0;
  Tensor<float> mask_fraction;  // (target levels, H, W) coverage in [0, 1]
  std::vector<FieldTensor> days;
  FieldTensor statics;
};

/// Normalized model-ready data on the target depth levels.
struct Prepared {
  GeoGrid grid;
  OceanMask mask;
  std::vector<ChannelMeta> meta;  // dynamic channels then statics
  Index out_chan = 0;             // number of dynamic channels
  NormStats stats;                // per channel, statics standardized spatially
  std::vector<FieldTensor> samples;
  Climatology clim;
  Index first_date = 0;

  Tensor<float> channel_mask() const { return kp::channel_mask(mask, meta); }
};

/// Depth interpolation, mask binarization, statistics, normalization,
/// land zero-fill and channel stacking.
Prepared preprocess(const RawData& raw);

// -- files --------------------------------------------------------------------

/// Raw directory: grid.json, mask_fraction.ofb, static.ofb, day.NNNN.ofb.
void write_raw(const RawData& raw, const std::string& dir);
RawData read_raw(const std::string& dir);
/// Every required raw file that does not exist, checked before any work.
std::vector<std::string> missing_raw_inputs(const std::string& dir);

/// Processed directory: dataset.json, mask.ofb, stats.mean.ofb, stats.var.ofb,
/// clim.<i>.ofb per calendar index present, sample.<date>.ofb.
void write_prepared(const Prepared& p, const std::string& dir);

struct PreparedInfo {
  GeoGrid grid;
  std::vector<ChannelMeta> meta;
  Index out_chan = 0;
  Index n_dates = 0;
  Index first_date = 0;
  Index year_length = 0;
};

PreparedInfo read_prepared_info(const std::string& dir);
OceanMask read_mask(const std::string& dir);
NormStats read_stats(const std::string& dir);
Climatology read_climatology(const std::string& dir);
/// Samples load lazily from sample.<date>.ofb through the cache. Dataset
/// date indices are offsets from first_date.
Dataset open_dataset(const std::string& dir, std::size_t cache_capacity, CacheMode mode = CacheMode::aging);

/// Dataset over in-memory prepared samples.
Dataset make_dataset(const Prepared& p, std::size_t cache_capacity, CacheMode mode = CacheMode::aging);

// -- synthetic raw data -------------------------------------------------------

struct SynthRawOptions {
  Index n_lat = 40, n_lon = 80;
  std::vector<double> source_depths{1, 20, 100};
  std::vector<double> target_depths{5, 50};
  Index n_dates = 160;
  Index year_length = 40;
  std::uint64_t seed = 0;
};

/// Zonally advecting waves: t and s on every source level, u, v and ssh
/// planar, bathymetry static. All levels of one variable share a speed, so
/// depth-interpolated channels advect too. With the default two target
/// levels the stacked input has 8 channels, 7 of them predicted.
RawData synth_raw(const SynthRawOptions& opts);

}  // namespace kp
