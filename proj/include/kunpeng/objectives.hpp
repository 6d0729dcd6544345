#pragma once

#include "kunpeng/diffcore.hpp"
#include "kunpeng/field.hpp"

#include <json.hpp>

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kp {

/// A metric whose denominator vanished (zero anomaly, both masks empty, ...).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Region selection that leaves no ocean cell.
class EmptyRegionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// All metrics take (C, H, W) fields with a 0/1 mask of the same shape and
// normalize by the total cell count C * H * W, land included. Sums run in
// double whatever the storage type.

/// M * L per cell: the constant factor inside every masked metric.
template <typename Scalar>
Tensor<Scalar> cell_weights(const Tensor<Scalar>& mask, const LatWeights& weights);

/// Masked latitude-weighted L1: sum(M L |pred - truth|) / N.
template <typename Scalar>
double mll1(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
            const LatWeights& weights);

/// Differentiable mll1 for training; cell_weight from cell_weights().
template <typename Scalar>
ad::Var<Scalar> mll1_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& truth,
                          const Tensor<Scalar>& cell_weight) {
  return ad::weighted_l1(pred, truth, cell_weight);
}

template <typename Scalar>
double masked_mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                  const LatWeights& weights);
template <typename Scalar>
double masked_mae(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                  const LatWeights& weights);
/// Signed sum(M L (pred - truth)) / N.
template <typename Scalar>
double masked_bias(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                   const LatWeights& weights);

/// Weighted cosine similarity of the anomalies pred - clim and truth - clim.
/// Throws UndefinedMetricError when either anomaly vanishes over the mask.
template <typename Scalar>
double masked_acc(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& clim,
                  const Tensor<Scalar>& mask, const LatWeights& weights);

/// OceanMask overloads for fields laid out exactly like the mask (one
/// variable, channel d at depth layer d).
double mll1(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
            const LatWeights& weights);
double masked_mse(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
                  const LatWeights& weights);
double masked_mae(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
                  const LatWeights& weights);
double masked_acc(const Tensor<float>& pred, const Tensor<float>& truth, const Tensor<float>& clim,
                  const OceanMask& mask, const LatWeights& weights);

/// Per-location bias map (H, W) averaged over variables and depths:
///   MBE_hw = sum_v sum_c M_chw L_h (pred - truth) / (N_var * N_deep).
/// Each set entry is one variable's (n_deep, H, W) field. Positive entries
/// mean over-prediction.
template <typename Scalar>
Tensor<double> mean_bias(std::span<const Tensor<Scalar>> preds, std::span<const Tensor<Scalar>> truths,
                         const Tensor<Scalar>& mask, const LatWeights& weights);

enum class RegionStat { mse, mae, mbe };
enum class RegionNorm {
  total,     // divide by C * H * W, as the global metrics do
  per_cell,  // divide by the number of selected ocean cells
};

/// Masked statistic of field against reference with M replaced by M * region.
double regional_reduce(const FieldTensor& field, const OceanMask& mask, const RegionMask& region,
                       const LatWeights& weights, RegionStat stat, const FieldTensor& reference,
                       RegionNorm norm = RegionNorm::total);

// -- reports ------------------------------------------------------------------

struct MetricRow {
  std::string variable;
  double depth_m = 0;
  Index lead_days = 0;
  double mse = 0, mae = 0, acc = 0, mbe = 0;
};

/// Unweighted mean over variables and depths at one lead.
struct LeadSummary {
  Index lead_days = 0;
  double mse = 0, mae = 0, acc = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  Index first_date = 0;  // initialization dates covered
  Index last_date = 0;
  Index n_dates = 0;
  Index n_lat = 0;
  Index n_lon = 0;

  std::vector<LeadSummary> lead_summary() const;
  /// variable,depth_m,lead_days,mse,mae,acc
  std::string to_csv() const;
  /// lead_days,mse,mae,acc
  std::string summary_csv() const;
  nlohmann::json to_json() const;
};

}  // namespace kp
