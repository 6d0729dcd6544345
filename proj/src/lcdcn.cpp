#include "kunpeng/lcdcn.hpp"

namespace kp {

using ad::Var;

void LcdcnConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("lcdcn: " + m); };
  if (channels < 1 || heads < 1) fail("channels and heads must be positive");
  if (channels % heads) fail(std::to_string(channels) + " channels not divisible by " + std::to_string(heads) + " heads");
  if (kernel_h < 1 || kernel_w < 1 || kernel_h % 2 == 0 || kernel_w % 2 == 0) fail("kernel sides must be odd");
  if (stride != 1) fail("only stride 1 is supported");
  if (padding != kernel_h / 2 || kernel_h != kernel_w) fail("padding must be kernel / 2 with a square kernel");
}

ad::DeformOptions LcdcnConfig::deform_options() const {
  ad::DeformOptions o;
  o.heads = heads;
  o.kernel_h = kernel_h;
  o.kernel_w = kernel_w;
  o.modulation = modulation_kind;
  o.lat = ad::LatBoundary::zero;
  return o;
}

template <typename S>
LcdcnParams<S> lcdcn_init(const LcdcnConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index c = cfg.channels, cg = c / cfg.heads, k = cfg.kernel_h * cfg.kernel_w;
  LcdcnParams<S> p;
  p.weight = Var<S>(ad::init_fan_in<S>({c, cg, cfg.kernel_h, cfg.kernel_w}, cg * k, rng), true);
  p.bias = Var<S>(ad::init_fan_in<S>({c}, cg * k, rng), true);
  p.offset_weight = Var<S>(Tensor<S>({cfg.offset_channels(), c, cfg.kernel_h, cfg.kernel_w}), true);
  p.offset_bias = Var<S>(Tensor<S>({cfg.offset_channels()}), true);
  return p;
}

template <typename S>
LcdcnParams<S> lcdcn_init(const LcdcnConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return lcdcn_init<S>(cfg, rng);
}

template <typename S>
Var<S> lcdcn_forward(const Var<S>& x, const LcdcnParams<S>& p, const LcdcnConfig& cfg) {
  if (x.value().rank() != 3 || x.shape()[0] != cfg.channels) {
    throw ShapeError("lcdcn: expected (" + std::to_string(cfg.channels) + ", H, W) input, got " +
                     shape_string(x.shape()));
  }
  ad::Conv2dOptions head{1, cfg.kernel_h / 2, ad::PadMode::cyclic_lon, 1};
  Var<S> offsets = ad::conv2d(x, p.offset_weight, p.offset_bias, head);
  if (!cfg.modulation) {
    // Keep the channel layout but pin every modulation scalar at its neutral raw value.
    Tensor<S> keep(offsets.shape(), S(1));
    const Index plane = x.shape()[1] * x.shape()[2];
    for (Index ch = 2; ch < cfg.offset_channels(); ch += 3) keep.array().segment(ch * plane, plane).setZero();
    offsets = ad::mul(offsets, Var<S>(std::move(keep)));
  }
  return ad::deform_conv_cyclic(x, offsets, p.weight, p.bias, cfg.deform_options());
}

template <typename S>
Var<S> lcdcn_base_conv(const Var<S>& x, const LcdcnParams<S>& p, const LcdcnConfig& cfg) {
  ad::Conv2dOptions o{1, cfg.kernel_h / 2, ad::PadMode::cyclic_lon, cfg.heads};
  return ad::conv2d(x, p.weight, p.bias, o);
}

template <typename S>
void lcdcn_register(ad::ParamStore<S>& store, const std::string& prefix, const LcdcnParams<S>& p) {
  store.add(prefix + "weight", p.weight.value());
  store.add(prefix + "bias", p.bias.value());
  store.add(prefix + "offset_weight", p.offset_weight.value());
  store.add(prefix + "offset_bias", p.offset_bias.value());
}

template <typename S>
LcdcnParams<S> lcdcn_fetch(const ad::ParamStore<S>& store, const std::string& prefix) {
  return {store.get(prefix + "weight"), store.get(prefix + "bias"), store.get(prefix + "offset_weight"),
          store.get(prefix + "offset_bias")};
}

#define KP_INSTANTIATE(S)                                                                          \
  template LcdcnParams<S> lcdcn_init<S>(const LcdcnConfig&, Rng&);                                 \
  template LcdcnParams<S> lcdcn_init<S>(const LcdcnConfig&, std::uint64_t);                        \
  template Var<S> lcdcn_forward<S>(const Var<S>&, const LcdcnParams<S>&, const LcdcnConfig&);      \
  template Var<S> lcdcn_base_conv<S>(const Var<S>&, const LcdcnParams<S>&, const LcdcnConfig&);    \
  template void lcdcn_register<S>(ad::ParamStore<S>&, const std::string&, const LcdcnParams<S>&);  \
  template LcdcnParams<S> lcdcn_fetch<S>(const ad::ParamStore<S>&, const std::string&);

KP_INSTANTIATE(float)
KP_INSTANTIATE(double)

}  // namespace kp
