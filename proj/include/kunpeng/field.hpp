#pragma once

#include "kunpeng/geogrid.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kp {

struct ChannelMeta {
  std::string variable;
  int depth_index = 0;  // selects the ocean-mask layer
  bool operator==(const ChannelMeta&) const = default;
};

/// (n_chan, n_lat, n_lon) single-precision field with per-channel labels.
class FieldTensor {
 public:
  FieldTensor() = default;
  FieldTensor(Tensor<float> values, std::vector<ChannelMeta> meta);

  const Tensor<float>& values() const { return values_; }
  Tensor<float>& values() { return values_; }
  const std::vector<ChannelMeta>& meta() const { return meta_; }
  Index n_chan() const { return values_.dim(0); }
  Index n_lat() const { return values_.dim(1); }
  Index n_lon() const { return values_.dim(2); }

  /// Channels [begin, begin + count) as a new field.
  FieldTensor slice(Index begin, Index count) const;

 private:
  Tensor<float> values_;
  std::vector<ChannelMeta> meta_;
};

/// Per-channel (C, H, W) 0/1 mask: channel c uses mask layer meta[c].depth_index.
Tensor<float> channel_mask(const OceanMask& mask, std::span<const ChannelMeta> meta);

/// Sets every land cell of the field to exactly zero.
void zero_land(Tensor<float>& values, const Tensor<float>& channel_mask);

// -- OFB file format ----------------------------------------------------------

/// "OFB1", u32 version = 1, u32 n_chan, u32 n_lat, u32 n_lon, u32 meta_len,
/// meta_len bytes of JSON channel_meta, then float32 values (C, H, W)
/// row-major; all little-endian.
void write_field(const std::string& path, const FieldTensor& field);
FieldTensor read_field(const std::string& path);

// -- normalization ------------------------------------------------------------

inline constexpr double kVarianceFloor = 1e-12;

struct NormStats {
  Tensor<float> mean;  // (C, H, W)
  Tensor<float> var;   // population variance, >= 0

  /// Flat indices of ocean cells whose variance is below the floor.
  std::vector<Index> degenerate_cells(const Tensor<float>& channel_mask) const;
};

class DegenerateStatsError : public std::runtime_error {
 public:
  DegenerateStatsError(Index channel, Index row, Index col);
};

/// Per-cell temporal mean and population variance (double accumulation).
NormStats compute_norm_stats(std::span<const FieldTensor> samples);

/// z-score on ocean cells, exact zero on land (applied after standardizing).
FieldTensor normalize(const FieldTensor& field, const NormStats& stats, const OceanMask& mask);
FieldTensor denormalize(const FieldTensor& field, const NormStats& stats, const OceanMask& mask);

/// Scalar-generic kernels behind normalize/denormalize.
template <typename Scalar>
Tensor<Scalar> standardize(const Tensor<Scalar>& x, const Tensor<Scalar>& mean,
                           const Tensor<Scalar>& var, const Tensor<Scalar>& channel_mask);
template <typename Scalar>
Tensor<Scalar> unstandardize(const Tensor<Scalar>& z, const Tensor<Scalar>& mean,
                             const Tensor<Scalar>& var, const Tensor<Scalar>& channel_mask);

// -- climatology --------------------------------------------------------------

/// Mean field per calendar index (day offset within a synthetic year).
class Climatology {
 public:
  Climatology(Index year_length, std::vector<std::optional<Tensor<float>>> by_index);

  Index year_length() const { return year_length_; }
  Index calendar_index(Index date) const;
  bool has(Index date) const;
  /// Throws if no sample fell on this calendar index.
  const Tensor<float>& for_date(Index date) const;
  const std::vector<std::optional<Tensor<float>>>& entries() const { return by_index_; }

 private:
  Index year_length_;
  std::vector<std::optional<Tensor<float>>> by_index_;
};

/// samples[i] is the field for date first_date + i.
Climatology compute_climatology(std::span<const FieldTensor> samples, Index first_date,
                                Index year_length);

// -- assembly -----------------------------------------------------------------

/// Concatenates dynamic fields in order, then static fields.
FieldTensor stack_channels(std::span<const FieldTensor> fields, std::span<const FieldTensor> statics);

// -- synthetic data -----------------------------------------------------------

struct SynthOptions {
  /// Zonal advection speed per channel in grid cells per step; drawn from
  /// [0.2, 0.45] by seed when empty.
  std::vector<double> speeds;
  double speed_scale = 1.0;
  /// Channel labels; default "var<c>" at depth 0.
  std::vector<ChannelMeta> meta;
  /// Land mask applied at every step; synth_ocean_mask(grid) when empty.
  std::optional<OceanMask> mask;
};

/// Land/sea mask with one continent and an island; land grows with depth.
OceanMask synth_ocean_mask(const GeoGrid& grid);

/// Fractional coverage at each depth whose ceiling is synth_ocean_mask.
Tensor<float> synth_mask_fraction(const GeoGrid& grid);

/// Zonally advected sums of periodic waves:
///   f_c(t, h, w) = base_c(h) + sum_j A_cj(h) sin(2 pi k_j (w - s_c t) / W + phase_cj)
/// masked to zero on land. Deterministic in seed.
std::vector<FieldTensor> synth_series(const GeoGrid& grid, Index n_chan, Index n_steps,
                                      std::uint64_t seed, const SynthOptions& opts = {});

/// Per-channel speeds synth_series uses for (n_chan, seed, opts).
std::vector<double> synth_speeds(Index n_chan, std::uint64_t seed, const SynthOptions& opts);

/// Static seabed depth field (one channel, "bathymetry"), zero on land.
FieldTensor synth_bathymetry(const GeoGrid& grid, const OceanMask& mask);

}  // namespace kp
