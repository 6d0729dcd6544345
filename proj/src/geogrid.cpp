#include "kunpeng/geogrid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace kp {

namespace {

bool strictly_monotonic(const std::vector<double>& v) {
  if (v.size() < 2) return true;
  const bool up = v[1] > v[0];
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (up ? !(v[i] > v[i - 1]) : !(v[i] < v[i - 1])) return false;
  }
  return true;
}

}  // namespace

GeoGrid::GeoGrid(std::vector<double> lat_deg, std::vector<double> lon_deg, std::vector<double> depths_m)
    : lat_(std::move(lat_deg)), lon_(std::move(lon_deg)), depths_(std::move(depths_m)) {
  if (lat_.empty() || lon_.empty()) throw GridError("grid needs at least one row and column");
  for (double phi : lat_) {
    if (!(std::abs(phi) < 90.0)) throw GridError("latitude " + std::to_string(phi) + " not in (-90, 90)");
  }
  if (!strictly_monotonic(lat_)) throw GridError("latitudes must be strictly monotonic");
  for (double lam : lon_) {
    if (!(lam >= -180.0 && lam < 180.0)) {
      throw GridError("longitude " + std::to_string(lam) + " not in [-180, 180)");
    }
  }
  if (lon_.size() > 1) {
    const double step = lon_[1] - lon_[0];
    if (!(step > 0.0)) throw GridError("longitudes must increase");
    for (std::size_t i = 1; i < lon_.size(); ++i) {
      if (std::abs((lon_[i] - lon_[i - 1]) - step) > 1e-9) {
        throw GridError("longitude spacing must be uniform (needed for cyclic sampling)");
      }
    }
  }
  for (std::size_t i = 1; i < depths_.size(); ++i) {
    if (!(depths_[i] > depths_[i - 1])) throw GridError("depths must be strictly increasing");
  }
}

GeoGrid GeoGrid::global(Index n_lat, Index n_lon, std::vector<double> depths_m) {
  if (n_lat < 1 || n_lon < 1) throw GridError("grid dimensions must be positive");
  std::vector<double> lat(static_cast<std::size_t>(n_lat)), lon(static_cast<std::size_t>(n_lon));
  for (Index h = 0; h < n_lat; ++h) lat[h] = -90.0 + (static_cast<double>(h) + 0.5) * 180.0 / n_lat;
  for (Index w = 0; w < n_lon; ++w) lon[w] = -180.0 + static_cast<double>(w) * 360.0 / n_lon;
  return GeoGrid(std::move(lat), std::move(lon), std::move(depths_m));
}

double GeoGrid::lat_spacing_deg() const {
  return lat_.size() > 1 ? std::abs(lat_[1] - lat_[0]) : 0.25;
}

void GeoGrid::require_model_compatible() const {
  if (n_lat() % 8 || n_lon() % 8) {
    throw GridError("grid " + std::to_string(n_lat()) + "x" + std::to_string(n_lon()) +
                    " must have both dimensions divisible by 8");
  }
}

std::vector<double> default_depth_targets() { return {1, 5, 10, 20, 50, 100, 150, 200, 300, 400}; }

LatWeights latitude_weights(std::span<const double> lat_deg) {
  if (lat_deg.empty()) throw GridError("no latitudes");
  Eigen::ArrayXd c(static_cast<Index>(lat_deg.size()));
  for (std::size_t h = 0; h < lat_deg.size(); ++h) {
    if (!(std::abs(lat_deg[h]) < 90.0)) throw GridError("latitude at or beyond a pole");
    c[static_cast<Index>(h)] = std::cos(lat_deg[h] * std::numbers::pi / 180.0);
  }
  return LatWeights{static_cast<double>(c.size()) * c / c.sum()};
}

LatWeights latitude_weights(const GeoGrid& grid) { return latitude_weights(grid.lat_deg()); }

OceanMask::OceanMask(Tensor<float> values) : values_(std::move(values)) {
  if (values_.rank() != 3) throw GridError("ocean mask must be (n_deep, n_lat, n_lon)");
  if (!((values_.array() == 0.0f) || (values_.array() == 1.0f)).all()) {
    throw GridError("ocean mask entries must be 0 or 1");
  }
  const Index plane = values_.dim(1) * values_.dim(2);
  for (Index d = 1; d < values_.dim(0); ++d) {
    for (Index i = 0; i < plane; ++i) {
      if (values_[d * plane + i] > values_[(d - 1) * plane + i]) {
        throw GridError("ocean mask reappears below the seabed at depth " + std::to_string(d) +
                        ", cell " + std::to_string(i));
      }
    }
  }
}

OceanMask binarize_mask(const Tensor<float>& fractional) {
  if (!((fractional.array() >= 0.0f) && (fractional.array() <= 1.0f)).all()) {
    throw std::out_of_range("fractional mask entries must lie in [0, 1]");
  }
  return OceanMask(Tensor<float>(fractional.shape(), fractional.array().ceil()));
}

std::vector<double> interpolate_depth(std::span<const double> profile,
                                      std::span<const double> src_depths,
                                      std::span<const double> dst_depths, DepthRange range) {
  const std::size_t n = src_depths.size();
  if (n < 2) throw std::invalid_argument("depth interpolation needs at least two source levels");
  if (profile.size() != n) throw std::invalid_argument("profile and source depths differ in length");
  for (std::size_t i = 1; i < n; ++i) {
    if (!(src_depths[i] > src_depths[i - 1])) {
      throw std::invalid_argument("source depths must be strictly increasing");
    }
  }
  std::vector<double> out;
  out.reserve(dst_depths.size());
  for (double z : dst_depths) {
    if (z <= src_depths.front() || z >= src_depths.back()) {
      if (range == DepthRange::strict && (z < src_depths.front() || z > src_depths.back())) {
        throw std::out_of_range("target depth " + std::to_string(z) + " m outside source range");
      }
      out.push_back(z <= src_depths.front() ? profile.front() : profile.back());
      continue;
    }
    const auto hi = static_cast<std::size_t>(
        std::upper_bound(src_depths.begin(), src_depths.end(), z) - src_depths.begin());
    const std::size_t lo = hi - 1;
    if (z == src_depths[lo]) {
      out.push_back(profile[lo]);
      continue;
    }
    const double t = (z - src_depths[lo]) / (src_depths[hi] - src_depths[lo]);
    out.push_back(profile[lo] + t * (profile[hi] - profile[lo]));
  }
  return out;
}

RegionMask::RegionMask(std::string name_, Tensor<float> values_)
    : name(std::move(name_)), values(std::move(values_)) {
  if (values.rank() != 2) throw GridError("region mask must be (n_lat, n_lon)");
  if (!((values.array() == 0.0f) || (values.array() == 1.0f)).all()) {
    throw GridError("region mask entries must be 0 or 1");
  }
  if ((values.array() != 0.0f).count() == 0) throw GridError("region " + name + " selects no cells");
}

}  // namespace kp
