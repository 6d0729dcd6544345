#pragma once

#include "kunpeng/field.hpp"
#include "kunpeng/objectives.hpp"

#include <string>
#include <vector>

namespace kp {

/// (n_lat, n_lon) row-major plane; row 0 is the southernmost latitude.
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskPlane = Plane<bool>;

/// Channel c of a (C, H, W) tensor as a double plane.
Plane<double> plane_of(const Tensor<float>& t, Index c);
/// Surface (depth 0) ocean layer.
MaskPlane surface_ocean(const OceanMask& mask);
/// Single-channel (1, H, W) field for OFB output.
FieldTensor plane_field(const Plane<double>& p, const std::string& variable);

// -- eddies -------------------------------------------------------------------

enum class Polarity { cyclonic, anticyclonic, clockwise, counterclockwise };
std::string to_string(Polarity p);

struct Cell {
  Index h = 0, w = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

struct EddyRecord {
  Cell center;
  Polarity polarity = Polarity::anticyclonic;
  std::vector<Cell> cells;  // sorted, 4-connected with longitude wrap
  double amplitude = 0;     // SSH: |center - outermost contour| in m; UV: max speed in m/s
};

struct SshEddyParams {
  Index window = 5;       // odd extremum neighborhood side
  double step_m = 0.01;   // contour spacing
  Index max_cells = 2000;
  Index min_cells = 4;
  void validate() const;
};

/// Strict SSH extrema grown into the largest closed contour region holding
/// no other extremum. Maxima are anticyclonic, minima cyclonic.
std::vector<EddyRecord> detect_eddies_ssh(const Plane<double>& ssh, const MaskPlane& ocean,
                                          const SshEddyParams& params = {});

struct UvEddyParams {
  Index a = 4;            // cells over which |v| (|u|) must grow away from the center
  Index b = 3;            // radius of the speed-minimum search
  Index max_radius = 15;  // largest square ring tested
  void validate() const;
};

/// Velocity-geometry vortex centers; the region is the union of square rings
/// around the center along which the flow turns once, coherently, in the
/// center's rotation sense. Counterclockwise seen from above is positive.
std::vector<EddyRecord> detect_eddies_uv(const Plane<double>& u, const Plane<double>& v,
                                         const MaskPlane& ocean, const UvEddyParams& params = {});

/// +1 anticyclonic or counterclockwise, -1 cyclonic or clockwise, 0 elsewhere.
Plane<double> eddy_labels(const std::vector<EddyRecord>& eddies, Index n_lat, Index n_lon);
/// center_lat_idx,center_lon_idx,polarity,n_cells,amplitude
std::string eddy_csv(const std::vector<EddyRecord>& eddies);

// -- fronts -------------------------------------------------------------------

struct FrontParams {
  double percentile = 95;  // cells at or above this gradient percentile are fronts
  void validate() const;
};

struct FrontMask {
  MaskPlane values;
  Plane<double> gradient;  // degC/km; NaN on land and excluded cells
  double threshold_used = 0;
};

/// Grid spacing in km along latitude and, at row h, along longitude.
double front_dy_km(const GeoGrid& grid);
double front_dx_km(const GeoGrid& grid, Index h);

/// |grad SST| by centered differences, one-sided next to land or the
/// latitude edges; a cell with land on both sides along an axis is excluded.
Plane<double> sst_gradient(const Plane<double>& sst, const GeoGrid& grid, const MaskPlane& ocean);
/// Front cells reach the percentile and exceed the smallest ocean gradient,
/// so a field of equal gradients has no front.
FrontMask detect_fronts(const Plane<double>& sst, const GeoGrid& grid, const MaskPlane& ocean,
                        const FrontParams& params = {});
/// lat_idx,lon_idx,gradient_c_per_km for every front cell.
std::string front_csv(const FrontMask& fronts);

// -- overlap scores -----------------------------------------------------------

/// Both masks empty is undefined.
double iou(const MaskPlane& pred, const MaskPlane& truth);
double f1(const MaskPlane& pred, const MaskPlane& truth);

// -- fishing grounds ----------------------------------------------------------

struct CatchEvent {
  double lat_deg = 0, lon_deg = 0;
  double catch_tons = 0;
  double hauls = 0;
};

struct CpueGrid {
  Plane<double> catch_tons, effort;
  Plane<double> cpue;  // NaN where effort is zero
  MaskPlane fishing;
  Index rejected = 0;  // events outside the grid
  double threshold = 3.0;
};

/// Events snap to the nearest cell center; longitude wraps on global grids.
CpueGrid cpue_grid(const std::vector<CatchEvent>& events, const GeoGrid& grid, double threshold = 3.0);
/// lat_idx,lon_idx,catch_tons,effort,cpue,fishing for every cell with effort.
std::string cpue_csv(const CpueGrid& g);

struct ClassificationMetrics {
  Index tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

/// Confusion-matrix scores over cells where `defined` holds (all cells when
/// empty). No positive truth cell is undefined; no positive prediction gives
/// precision 0.
ClassificationMetrics classification_metrics(const MaskPlane& pred, const MaskPlane& truth,
                                             const MaskPlane& defined = {});

}  // namespace kp
