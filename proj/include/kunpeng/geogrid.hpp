#pragma once

#include "kunpeng/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace kp {

class GridError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Regular latitude/longitude grid with a vertical depth axis.
///
/// Latitudes are strictly monotonic and never reach the poles; longitudes
/// are uniformly spaced in [-180, 180). Rows are cell centers.
class GeoGrid {
 public:
  GeoGrid(std::vector<double> lat_deg, std::vector<double> lon_deg, std::vector<double> depths_m);

  /// Global cell-centered grid: lat_h = -90 + (h + 1/2) * 180 / n_lat,
  /// lon_w = -180 + w * 360 / n_lon.
  static GeoGrid global(Index n_lat, Index n_lon, std::vector<double> depths_m);

  Index n_lat() const { return static_cast<Index>(lat_.size()); }
  Index n_lon() const { return static_cast<Index>(lon_.size()); }
  Index n_deep() const { return static_cast<Index>(depths_.size()); }
  const std::vector<double>& lat_deg() const { return lat_; }
  const std::vector<double>& lon_deg() const { return lon_; }
  const std::vector<double>& depths_m() const { return depths_; }

  /// |lat[1] - lat[0]|; used to scale the 27.8 km per 0.25 degree spacing.
  double lat_spacing_deg() const;

  /// The encoder downsamples by 4 then 2, so both axes must divide by 8.
  void require_model_compatible() const;

  bool operator==(const GeoGrid&) const = default;

 private:
  std::vector<double> lat_, lon_, depths_;
};

/// Standard depth targets in meters.
std::vector<double> default_depth_targets();

struct LatWeights {
  Eigen::ArrayXd weights;  // mean 1, all positive
  double operator[](Index h) const { return weights[h]; }
  Index size() const { return weights.size(); }
};

/// L_h = n_lat * cos(phi_h) / sum_i cos(phi_i).
LatWeights latitude_weights(const GeoGrid& grid);
LatWeights latitude_weights(std::span<const double> lat_deg);

/// Binary (n_deep, n_lat, n_lon) ocean indicator, non-increasing with depth.
class OceanMask {
 public:
  explicit OceanMask(Tensor<float> values);

  const Tensor<float>& values() const { return values_; }
  Index n_deep() const { return values_.dim(0); }
  Index n_lat() const { return values_.dim(1); }
  Index n_lon() const { return values_.dim(2); }
  bool ocean(Index d, Index h, Index w) const { return values_(d, h, w) != 0.0f; }

 private:
  Tensor<float> values_;
};

/// Ceiling of a fractional ocean coverage in [0, 1].
OceanMask binarize_mask(const Tensor<float>& fractional);

enum class DepthRange {
  clamp,   // targets outside the source range take the nearest end level
  strict,  // targets outside the source range are an error
};

/// Piecewise-linear resampling of one vertical profile.
std::vector<double> interpolate_depth(std::span<const double> profile,
                                      std::span<const double> src_depths,
                                      std::span<const double> dst_depths,
                                      DepthRange range = DepthRange::clamp);

/// Named 0/1 (n_lat, n_lon) selection, e.g. an ocean basin.
struct RegionMask {
  RegionMask(std::string name, Tensor<float> values);
  std::string name;
  Tensor<float> values;
};

}  // namespace kp
