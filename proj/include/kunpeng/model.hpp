#pragma once

#include "kunpeng/lcdcn.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <vector>

namespace kp {

/// Encoder/decoder network configuration. Both stages have two blocks: one at
/// embed_dim on the (H/4, W/4) grid and one at 2 * embed_dim on (H/8, W/8).
struct ModelConfig {
  Index in_chan = 8;
  Index out_chan = 7;
  Index embed_dim = 128;
  Index layers_per_block = 4;
  Index blocks_per_stage = 2;
  Index ffn_ratio = 4;
  Index heads = 8;
  Index mtp_k = 2;
  Index n_lat = 40;
  Index n_lon = 80;
  double aux_weight = 1.0;  // lambda in L_main + lambda / k * sum(L_aux)
  bool modulation = true;
  ad::Modulation modulation_kind = ad::Modulation::linear;
  /// Unpredicted channels come from a forcing sequence during rollout
  /// instead of persisting from the initial state.
  bool forced = false;

  void validate() const;
  LcdcnConfig lcdcn(Index channels) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Number of trainable scalars, auxiliary units included. Pure in cfg.
Index parameter_count(const ModelConfig& cfg);
/// The same count with auxiliary units excluded (inference model).
Index inference_parameter_count(const ModelConfig& cfg);

/// Fresh parameters for every label the model uses, auxiliary units included.
template <typename Scalar>
ad::ParamStore<Scalar> model_init(const ModelConfig& cfg, std::uint64_t seed);

template <typename Scalar>
struct ForwardOutput {
  ad::Var<Scalar> prediction;  // (C', H, W)
  ad::Var<Scalar> hidden;      // decoder output plus embedding, (C1, H/4, W/4)
};

/// recovery(decoder(encoder(embed(x))) + embed(x)).
template <typename Scalar>
ForwardOutput<Scalar> forward_with_hidden(const ad::ParamStore<Scalar>& params, const ModelConfig& cfg,
                                          const ad::Var<Scalar>& x);
template <typename Scalar>
ad::Var<Scalar> forward(const ad::ParamStore<Scalar>& params, const ModelConfig& cfg, const ad::Var<Scalar>& x);

/// x_seq holds inputs for t .. t + k. Returns k + 1 predictions for
/// t + 1 .. t + k + 1: the main model then each auxiliary unit in turn.
template <typename Scalar>
std::vector<ad::Var<Scalar>> mtp_forward(const ad::ParamStore<Scalar>& params, const ModelConfig& cfg,
                                         std::span<const ad::Var<Scalar>> x_seq);

/// Autoregressive inference without gradients. Each step feeds the land-zeroed
/// prediction back in place of the first out_chan channels; the remaining
/// channels persist from x0 or, when cfg.forced, come from forcing[step].
/// channel_mask is the (C, H, W) ocean mask of the full input.
template <typename Scalar>
std::vector<Tensor<Scalar>> rollout(const ad::ParamStore<Scalar>& params, const ModelConfig& cfg,
                                    const Tensor<Scalar>& x0, Index steps, const Tensor<Scalar>& channel_mask,
                                    std::span<const Tensor<Scalar>> forcing = {});

/// Label prefix of every auxiliary-unit parameter.
inline constexpr const char* kAuxPrefix = "aux.";

}  // namespace kp
