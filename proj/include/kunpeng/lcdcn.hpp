#pragma once

#include "kunpeng/diffcore.hpp"

#include <string>

namespace kp {

/// Longitude-cyclic deformable convolution layer.
struct LcdcnConfig {
  Index channels = 0;
  Index heads = 8;
  Index kernel_h = 3;
  Index kernel_w = 3;
  Index stride = 1;   // only 1 is supported
  Index padding = 1;  // must equal kernel_h / 2
  bool modulation = true;
  ad::Modulation modulation_kind = ad::Modulation::linear;

  /// Throws std::invalid_argument on any violated constraint.
  void validate() const;
  /// heads * kernel_h * kernel_w * 3: (d_row, d_col, modulation) per tap.
  Index offset_channels() const { return heads * kernel_h * kernel_w * 3; }
  ad::DeformOptions deform_options() const;
};

template <typename Scalar>
struct LcdcnParams {
  ad::Var<Scalar> weight;         // (C, C / heads, kh, kw)
  ad::Var<Scalar> bias;           // (C)
  ad::Var<Scalar> offset_weight;  // (offset_channels, C, kh, kw)
  ad::Var<Scalar> offset_bias;    // (offset_channels)
};

/// Base kernel uniform in +-sqrt(1 / fan_in); offset head exactly zero.
template <typename Scalar>
LcdcnParams<Scalar> lcdcn_init(const LcdcnConfig& cfg, Rng& rng);
template <typename Scalar>
LcdcnParams<Scalar> lcdcn_init(const LcdcnConfig& cfg, std::uint64_t seed);

/// Offsets predicted from x by a cyclic conv, then a grouped deformable conv
/// whose taps sample x with longitude wrap.
template <typename Scalar>
ad::Var<Scalar> lcdcn_forward(const ad::Var<Scalar>& x, const LcdcnParams<Scalar>& p, const LcdcnConfig& cfg);

/// The grouped cyclic convolution the layer reduces to at zero offsets.
template <typename Scalar>
ad::Var<Scalar> lcdcn_base_conv(const ad::Var<Scalar>& x, const LcdcnParams<Scalar>& p, const LcdcnConfig& cfg);

/// Registers under "<prefix>weight", "<prefix>bias", "<prefix>offset_weight",
/// "<prefix>offset_bias".
template <typename Scalar>
void lcdcn_register(ad::ParamStore<Scalar>& store, const std::string& prefix, const LcdcnParams<Scalar>& p);
template <typename Scalar>
LcdcnParams<Scalar> lcdcn_fetch(const ad::ParamStore<Scalar>& store, const std::string& prefix);

}  // namespace kp
