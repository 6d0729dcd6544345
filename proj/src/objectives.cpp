#include "kunpeng/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace kp {

namespace {

template <typename Scalar>
void check_operands(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                    const LatWeights& weights, const char* what) {
  require_same_shape(pred, truth, what);
  require_same_shape(pred, mask, what);
  if (pred.rank() != 3) throw ShapeError(std::string(what) + ": expected (C, H, W), got " + shape_string(pred.shape()));
  if (weights.size() != pred.dim(1)) {
    throw ShapeError(std::string(what) + ": " + std::to_string(weights.size()) + " latitude weights for " +
                     std::to_string(pred.dim(1)) + " rows");
  }
}

// sum over cells of M_chw * L_h * f(pred - truth), accumulated in double.
template <typename Scalar, typename F>
double weighted_residual_sum(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                             const LatWeights& weights, F f) {
  const Index C = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  double total = 0;
  for (Index c = 0; c < C; ++c) {
    for (Index h = 0; h < H; ++h) {
      double row = 0;
      for (Index w = 0; w < W; ++w) {
        const double m = static_cast<double>(mask(c, h, w));
        if (m == 0.0) continue;  // land values never enter, not even as NaN * 0
        row += m * f(static_cast<double>(pred(c, h, w)) - static_cast<double>(truth(c, h, w)));
      }
      total += weights[h] * row;
    }
  }
  return total;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> cell_weights(const Tensor<Scalar>& mask, const LatWeights& weights) {
  if (mask.rank() != 3 || weights.size() != mask.dim(1)) {
    throw ShapeError("cell_weights: mask " + shape_string(mask.shape()) + " with " +
                     std::to_string(weights.size()) + " latitude weights");
  }
  Tensor<Scalar> out(mask.shape());
  for (Index c = 0; c < mask.dim(0); ++c)
    for (Index h = 0; h < mask.dim(1); ++h)
      for (Index w = 0; w < mask.dim(2); ++w) out(c, h, w) = mask(c, h, w) * static_cast<Scalar>(weights[h]);
  return out;
}

template <typename Scalar>
double mll1(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
            const LatWeights& weights) {
  check_operands(pred, truth, mask, weights, "mll1");
  return weighted_residual_sum(pred, truth, mask, weights, [](double d) { return std::abs(d); }) /
         static_cast<double>(pred.size());
}

template <typename Scalar>
double masked_mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                  const LatWeights& weights) {
  check_operands(pred, truth, mask, weights, "masked_mse");
  return weighted_residual_sum(pred, truth, mask, weights, [](double d) { return d * d; }) /
         static_cast<double>(pred.size());
}

template <typename Scalar>
double masked_mae(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                  const LatWeights& weights) {
  check_operands(pred, truth, mask, weights, "masked_mae");
  return weighted_residual_sum(pred, truth, mask, weights, [](double d) { return std::abs(d); }) /
         static_cast<double>(pred.size());
}

template <typename Scalar>
double masked_bias(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& mask,
                   const LatWeights& weights) {
  check_operands(pred, truth, mask, weights, "masked_bias");
  return weighted_residual_sum(pred, truth, mask, weights, [](double d) { return d; }) /
         static_cast<double>(pred.size());
}

template <typename Scalar>
double masked_acc(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth, const Tensor<Scalar>& clim,
                  const Tensor<Scalar>& mask, const LatWeights& weights) {
  check_operands(pred, truth, mask, weights, "masked_acc");
  require_same_shape(pred, clim, "masked_acc climatology");
  const Index C = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  double pt = 0, pp = 0, tt = 0;
  for (Index c = 0; c < C; ++c) {
    for (Index h = 0; h < H; ++h) {
      const double l = weights[h];
      for (Index w = 0; w < W; ++w) {
        const double m = static_cast<double>(mask(c, h, w));
        if (m == 0.0) continue;
        const double k = static_cast<double>(clim(c, h, w));
        const double a = static_cast<double>(pred(c, h, w)) - k;
        const double b = static_cast<double>(truth(c, h, w)) - k;
        pt += m * l * a * b;
        pp += m * l * a * a;
        tt += m * l * b * b;
      }
    }
  }
  if (pp == 0.0) throw UndefinedMetricError("ACC undefined: predicted anomaly is zero over the mask");
  if (tt == 0.0) throw UndefinedMetricError("ACC undefined: true anomaly is zero over the mask");
  return std::clamp(pt / (std::sqrt(pp) * std::sqrt(tt)), -1.0, 1.0);
}

double mll1(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
            const LatWeights& weights) {
  return mll1(pred, truth, mask.values(), weights);
}
double masked_mse(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
                  const LatWeights& weights) {
  return masked_mse(pred, truth, mask.values(), weights);
}
double masked_mae(const Tensor<float>& pred, const Tensor<float>& truth, const OceanMask& mask,
                  const LatWeights& weights) {
  return masked_mae(pred, truth, mask.values(), weights);
}
double masked_acc(const Tensor<float>& pred, const Tensor<float>& truth, const Tensor<float>& clim,
                  const OceanMask& mask, const LatWeights& weights) {
  return masked_acc(pred, truth, clim, mask.values(), weights);
}

template <typename Scalar>
Tensor<double> mean_bias(std::span<const Tensor<Scalar>> preds, std::span<const Tensor<Scalar>> truths,
                         const Tensor<Scalar>& mask, const LatWeights& weights) {
  if (preds.empty()) throw std::invalid_argument("mean_bias: empty variable set");
  if (preds.size() != truths.size()) throw std::invalid_argument("mean_bias: prediction and truth sets differ in size");
  const Index D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
  Tensor<double> out({H, W});
  for (std::size_t v = 0; v < preds.size(); ++v) {
    check_operands(preds[v], truths[v], mask, weights, "mean_bias");
    for (Index d = 0; d < D; ++d)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          const double m = static_cast<double>(mask(d, h, w));
          if (m == 0.0) continue;
          out.array()[h * W + w] += m * weights[h] *
                                    (static_cast<double>(preds[v](d, h, w)) - static_cast<double>(truths[v](d, h, w)));
        }
  }
  out.array() /= static_cast<double>(preds.size()) * static_cast<double>(D);
  return out;
}

double regional_reduce(const FieldTensor& field, const OceanMask& mask, const RegionMask& region,
                       const LatWeights& weights, RegionStat stat, const FieldTensor& reference, RegionNorm norm) {
  require_same_shape(field.values(), reference.values(), "regional_reduce");
  if (region.values.dim(0) != field.n_lat() || region.values.dim(1) != field.n_lon()) {
    throw ShapeError("regional_reduce: region " + region.name + " is " + shape_string(region.values.shape()) +
                     " but field planes are " + shape_string({field.n_lat(), field.n_lon()}));
  }
  Tensor<float> m = channel_mask(mask, field.meta());
  const Index plane = field.n_lat() * field.n_lon();
  for (Index c = 0; c < field.n_chan(); ++c) m.array().segment(c * plane, plane) *= region.values.array();
  const Index selected = (m.array() != 0.0f).count();
  if (selected == 0) throw EmptyRegionError("region " + region.name + " contains no ocean cells");

  const auto& p = field.values();
  const auto& t = reference.values();
  check_operands(p, t, m, weights, "regional_reduce");
  double s = 0;
  switch (stat) {
    case RegionStat::mse: s = weighted_residual_sum(p, t, m, weights, [](double d) { return d * d; }); break;
    case RegionStat::mae: s = weighted_residual_sum(p, t, m, weights, [](double d) { return std::abs(d); }); break;
    case RegionStat::mbe: s = weighted_residual_sum(p, t, m, weights, [](double d) { return d; }); break;
  }
  return s / static_cast<double>(norm == RegionNorm::total ? p.size() : selected);
}

// -- reports ------------------------------------------------------------------

std::vector<LeadSummary> MetricReport::lead_summary() const {
  std::map<Index, std::pair<LeadSummary, Index>> acc;
  for (const auto& r : rows) {
    auto& [s, n] = acc[r.lead_days];
    s.lead_days = r.lead_days;
    s.mse += r.mse;
    s.mae += r.mae;
    s.acc += r.acc;
    ++n;
  }
  std::vector<LeadSummary> out;
  for (auto& [lead, entry] : acc) {
    auto [s, n] = entry;
    s.mse /= static_cast<double>(n);
    s.mae /= static_cast<double>(n);
    s.acc /= static_cast<double>(n);
    out.push_back(s);
  }
  return out;
}

namespace {

// Enough digits to read back the same double.
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "variable,depth_m,lead_days,mse,mae,acc\n";
  for (const auto& r : rows) {
    os << r.variable << ',' << num(r.depth_m) << ',' << r.lead_days << ',' << num(r.mse) << ',' << num(r.mae)
       << ',' << num(r.acc) << '\n';
  }
  return os.str();
}

std::string MetricReport::summary_csv() const {
  std::ostringstream os;
  os << "lead_days,mse,mae,acc\n";
  for (const auto& s : lead_summary()) {
    os << s.lead_days << ',' << num(s.mse) << ',' << num(s.mae) << ',' << num(s.acc) << '\n';
  }
  return os.str();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"variable", r.variable},
                      {"depth_m", r.depth_m},
                      {"lead_days", r.lead_days},
                      {"mse", r.mse},
                      {"mae", r.mae},
                      {"acc", r.acc},
                      {"mbe", r.mbe}});
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : lead_summary()) {
    summary.push_back({{"lead_days", s.lead_days}, {"mse", s.mse}, {"mae", s.mae}, {"acc", s.acc}});
  }
  return {{"first_date", first_date}, {"last_date", last_date}, {"n_dates", n_dates},
          {"grid", {{"n_lat", n_lat}, {"n_lon", n_lon}}}, {"rows", rows_j}, {"summary", summary}};
}

#define KP_INSTANTIATE(S)                                                                                         \
  template Tensor<S> cell_weights(const Tensor<S>&, const LatWeights&);                                           \
  template double mll1(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LatWeights&);                   \
  template double masked_mse(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LatWeights&);             \
  template double masked_mae(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LatWeights&);             \
  template double masked_bias(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const LatWeights&);            \
  template double masked_acc(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,               \
                             const LatWeights&);                                                                  \
  template Tensor<double> mean_bias(std::span<const Tensor<S>>, std::span<const Tensor<S>>, const Tensor<S>&,      \
                                    const LatWeights&);
KP_INSTANTIATE(float)
KP_INSTANTIATE(double)
#undef KP_INSTANTIATE

}  // namespace kp
