#include "kunpeng/model.hpp"

namespace kp {

using ad::Var;
using json = nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (in_chan < 2) fail("in_chan must be at least 2");
  if (out_chan < 1 || out_chan >= in_chan) fail("out_chan must satisfy 1 <= out_chan < in_chan");
  if (embed_dim < 16 * in_chan) fail("embed_dim must be at least 16 * in_chan");
  if (layers_per_block < 1) fail("layers_per_block must be positive");
  if (blocks_per_stage != 2) fail("blocks_per_stage must be 2 (one block per resolution)");
  if (ffn_ratio < 1) fail("ffn_ratio must be positive");
  if (heads < 1 || embed_dim % heads) fail("embed_dim must be divisible by heads");
  if (mtp_k < 0) fail("mtp_k must be non-negative");
  if (n_lat < 8 || n_lon < 8 || n_lat % 8 || n_lon % 8) fail("grid dims must be positive multiples of 8");
  if (!(aux_weight >= 0.0)) fail("aux_weight must be non-negative");
}

LcdcnConfig ModelConfig::lcdcn(Index channels) const {
  LcdcnConfig c;
  c.channels = channels;
  c.heads = heads;
  c.modulation = modulation;
  c.modulation_kind = modulation_kind;
  return c;
}

json ModelConfig::to_json() const {
  return {{"in_chan", in_chan},
          {"out_chan", out_chan},
          {"embed_dim", embed_dim},
          {"layers_per_block", layers_per_block},
          {"blocks_per_stage", blocks_per_stage},
          {"ffn_ratio", ffn_ratio},
          {"heads", heads},
          {"mtp_k", mtp_k},
          {"n_lat", n_lat},
          {"n_lon", n_lon},
          {"aux_weight", aux_weight},
          {"modulation", modulation},
          {"modulation_kind", modulation_kind == ad::Modulation::sigmoid ? "sigmoid" : "linear"},
          {"forced", forced}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.in_chan = j.at("in_chan").get<Index>();
  c.out_chan = j.at("out_chan").get<Index>();
  c.embed_dim = j.at("embed_dim").get<Index>();
  c.layers_per_block = j.at("layers_per_block").get<Index>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<Index>();
  c.ffn_ratio = j.at("ffn_ratio").get<Index>();
  c.heads = j.at("heads").get<Index>();
  c.mtp_k = j.at("mtp_k").get<Index>();
  c.n_lat = j.at("n_lat").get<Index>();
  c.n_lon = j.at("n_lon").get<Index>();
  c.aux_weight = j.at("aux_weight").get<double>();
  c.modulation = j.at("modulation").get<bool>();
  const auto kind = j.at("modulation_kind").get<std::string>();
  if (kind != "linear" && kind != "sigmoid") throw std::invalid_argument("unknown modulation_kind " + kind);
  c.modulation_kind = kind == "sigmoid" ? ad::Modulation::sigmoid : ad::Modulation::linear;
  c.forced = j.at("forced").get<bool>();
  c.validate();
  return c;
}

namespace {

// Encoder blocks then mirrored decoder blocks; true marks the wide (2 * C1) ones.
constexpr std::pair<const char*, bool> kBlocks[] = {{"e0", false}, {"e1", true}, {"d0", true}, {"d1", false}};

struct LayerNames {
  std::string lcdcn, norm, ffn;
};

LayerNames main_layer(const std::string& block, Index i) {
  const std::string tail = block + "." + std::to_string(i) + ".";
  return {"lcdcn." + tail, "norm." + tail, "ffn." + tail};
}

LayerNames aux_layer(Index unit) {
  const std::string p = std::string(kAuxPrefix) + std::to_string(unit) + ".";
  return {p + "lcdcn.", p + "norm.", p + "ffn."};
}

std::string aux_proj(Index unit) { return std::string(kAuxPrefix) + std::to_string(unit) + ".proj."; }

Index layer_count(const ModelConfig& cfg, Index d) {
  const LcdcnConfig l = cfg.lcdcn(d);
  const Index k = l.kernel_h * l.kernel_w, oc = l.offset_channels(), hidden = cfg.ffn_ratio * d;
  return d * (d / cfg.heads) * k + d + oc * d * k + oc  // lcdcn
         + 4 * d                                        // two norms
         + 2 * hidden * d + hidden + d;                 // ffn
}

template <typename S>
void add_layer(ad::ParamStore<S>& store, const ModelConfig& cfg, Index d, const LayerNames& n, Rng& rng) {
  lcdcn_register(store, n.lcdcn, lcdcn_init<S>(cfg.lcdcn(d), rng));
  store.add(n.norm + "mix_gain", Tensor<S>({d}, S(1)));
  store.add(n.norm + "mix_bias", Tensor<S>({d}));
  store.add(n.norm + "ffn_gain", Tensor<S>({d}, S(1)));
  store.add(n.norm + "ffn_bias", Tensor<S>({d}));
  const Index hidden = cfg.ffn_ratio * d;
  store.add(n.ffn + "w1", ad::init_fan_in<S>({hidden, d}, d, rng));
  store.add(n.ffn + "b1", ad::init_fan_in<S>({hidden}, d, rng));
  store.add(n.ffn + "w2", ad::init_fan_in<S>({d, hidden}, hidden, rng));
  store.add(n.ffn + "b2", ad::init_fan_in<S>({d}, hidden, rng));
}

// x + LCDCN(LN(x)), then x + FFN(LN(x)).
template <typename S>
Var<S> apply_layer(const ad::ParamStore<S>& p, const ModelConfig& cfg, const LayerNames& n, const Var<S>& x) {
  const Index d = x.shape()[0];
  const Var<S> mixed = lcdcn_forward(ad::layer_norm(x, p.get(n.norm + "mix_gain"), p.get(n.norm + "mix_bias")),
                                     lcdcn_fetch(p, n.lcdcn), cfg.lcdcn(d));
  const Var<S> y = x + mixed;
  const Var<S> z = ad::layer_norm(y, p.get(n.norm + "ffn_gain"), p.get(n.norm + "ffn_bias"));
  const Var<S> h = ad::gelu(ad::linear(z, p.get(n.ffn + "w1"), p.get(n.ffn + "b1")));
  return y + ad::linear(h, p.get(n.ffn + "w2"), p.get(n.ffn + "b2"));
}

template <typename S>
Var<S> embed(const ad::ParamStore<S>& p, const Var<S>& x) {
  return ad::conv2d(x, p.get("embed.weight"), p.get("embed.bias"), ad::Conv2dOptions{4, 0, ad::PadMode::cyclic_lon, 1});
}

template <typename S>
Var<S> recover(const ad::ParamStore<S>& p, const Var<S>& h) {
  return ad::conv2d_transpose(h, p.get("recovery.weight"), p.get("recovery.bias"), 4);
}

template <typename S>
void check_input(const ModelConfig& cfg, const Var<S>& x) {
  const Shape want{cfg.in_chan, cfg.n_lat, cfg.n_lon};
  if (x.shape() != want) {
    throw ShapeError("model input " + shape_string(x.shape()) + " does not match config " + shape_string(want));
  }
}

}  // namespace

Index inference_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const Index c1 = cfg.embed_dim, c2 = 2 * c1;
  Index n = c1 * cfg.in_chan * 16 + c1;  // embed
  n += cfg.layers_per_block * 2 * (layer_count(cfg, c1) + layer_count(cfg, c2));
  n += c2 * c1 * 4 + c2;                // down
  n += c2 * c1 * 4 + c1;                // up
  n += c1 * cfg.out_chan * 16 + cfg.out_chan;  // recovery
  return n;
}

Index parameter_count(const ModelConfig& cfg) {
  const Index c1 = cfg.embed_dim;
  return inference_parameter_count(cfg) + cfg.mtp_k * (2 * c1 * c1 + c1 + layer_count(cfg, c1));
}

template <typename S>
ad::ParamStore<S> model_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ad::ParamStore<S> store;
  const Index c1 = cfg.embed_dim, c2 = 2 * c1;
  store.add("embed.weight", ad::init_fan_in<S>({c1, cfg.in_chan, 4, 4}, cfg.in_chan * 16, rng));
  store.add("embed.bias", ad::init_fan_in<S>({c1}, cfg.in_chan * 16, rng));
  for (const auto& [block, wide] : kBlocks) {
    for (Index i = 0; i < cfg.layers_per_block; ++i) add_layer(store, cfg, wide ? c2 : c1, main_layer(block, i), rng);
  }
  store.add("down.weight", ad::init_fan_in<S>({c2, c1, 2, 2}, c1 * 4, rng));
  store.add("down.bias", ad::init_fan_in<S>({c2}, c1 * 4, rng));
  store.add("up.weight", ad::init_fan_in<S>({c2, c1, 2, 2}, c2, rng));
  store.add("up.bias", ad::init_fan_in<S>({c1}, c2, rng));
  store.add("recovery.weight", ad::init_fan_in<S>({c1, cfg.out_chan, 4, 4}, c1, rng));
  store.add("recovery.bias", ad::init_fan_in<S>({cfg.out_chan}, c1, rng));
  for (Index u = 1; u <= cfg.mtp_k; ++u) {
    store.add(aux_proj(u) + "weight", ad::init_fan_in<S>({c1, 2 * c1}, 2 * c1, rng));
    store.add(aux_proj(u) + "bias", ad::init_fan_in<S>({c1}, 2 * c1, rng));
    add_layer(store, cfg, c1, aux_layer(u), rng);
  }
  return store;
}

template <typename S>
ForwardOutput<S> forward_with_hidden(const ad::ParamStore<S>& p, const ModelConfig& cfg, const Var<S>& x) {
  check_input(cfg, x);
  const Var<S> e = embed(p, x);
  Var<S> h = e;
  for (const auto& [block, wide] : kBlocks) {
    const std::string b = block;
    if (b == "e1") h = ad::conv2d(h, p.get("down.weight"), p.get("down.bias"), ad::Conv2dOptions{2, 0, ad::PadMode::cyclic_lon, 1});
    if (b == "d1") h = ad::conv2d_transpose(h, p.get("up.weight"), p.get("up.bias"), 2);
    for (Index i = 0; i < cfg.layers_per_block; ++i) h = apply_layer(p, cfg, main_layer(b, i), h);
  }
  Var<S> hidden = h + e;
  return {recover(p, hidden), hidden};
}

template <typename S>
Var<S> forward(const ad::ParamStore<S>& p, const ModelConfig& cfg, const Var<S>& x) {
  return forward_with_hidden(p, cfg, x).prediction;
}

template <typename S>
std::vector<Var<S>> mtp_forward(const ad::ParamStore<S>& p, const ModelConfig& cfg, std::span<const Var<S>> x_seq) {
  if (static_cast<Index>(x_seq.size()) < cfg.mtp_k + 1) {
    throw std::invalid_argument("mtp_forward needs " + std::to_string(cfg.mtp_k + 1) + " inputs, got " +
                                std::to_string(x_seq.size()));
  }
  auto main = forward_with_hidden(p, cfg, x_seq[0]);
  std::vector<Var<S>> out{main.prediction};
  Var<S> h = main.hidden;
  for (Index u = 1; u <= cfg.mtp_k; ++u) {
    check_input(cfg, x_seq[u]);
    const Var<S> parts[] = {h, embed(p, x_seq[u])};
    const Var<S> z = ad::linear(ad::concat_channels<S>(parts), p.get(aux_proj(u) + "weight"), p.get(aux_proj(u) + "bias"));
    h = apply_layer(p, cfg, aux_layer(u), z);
    out.push_back(recover(p, h));
  }
  return out;
}

template <typename S>
std::vector<Tensor<S>> rollout(const ad::ParamStore<S>& p, const ModelConfig& cfg, const Tensor<S>& x0, Index steps,
                               const Tensor<S>& cmask, std::span<const Tensor<S>> forcing) {
  if (steps < 1) throw std::invalid_argument("rollout needs at least one step");
  require_same_shape(x0, cmask, "rollout mask");
  const Index keep = cfg.in_chan - cfg.out_chan, plane = cfg.n_lat * cfg.n_lon;
  if (cfg.forced) {
    if (static_cast<Index>(forcing.size()) < steps - 1) {
      throw std::invalid_argument("rollout of " + std::to_string(steps) + " steps needs " +
                                  std::to_string(steps - 1) + " forcing fields, got " + std::to_string(forcing.size()));
    }
    for (const auto& f : forcing) {
      if (f.shape() != Shape{keep, cfg.n_lat, cfg.n_lon}) throw ShapeError("forcing field has shape " + shape_string(f.shape()));
    }
  }
  ad::NoGradGuard no_grad;
  const auto pred_mask = cmask.array().head(cfg.out_chan * plane);
  std::vector<Tensor<S>> out;
  Tensor<S> x = x0;
  for (Index s = 0; s < steps; ++s) {
    Tensor<S> y = forward(p, cfg, Var<S>(x)).value();
    y.array() = (pred_mask != S(0)).select(y.array(), S(0));
    if (s + 1 < steps) {
      Tensor<S> next(x.shape());
      next.array().head(cfg.out_chan * plane) = y.array();
      next.array().tail(keep * plane) = cfg.forced ? forcing[s].array() : x.array().tail(keep * plane);
      next.array() = (cmask.array() != S(0)).select(next.array(), S(0));
      x = std::move(next);
    }
    out.push_back(std::move(y));
  }
  return out;
}

#define KP_INSTANTIATE(S)                                                                                  \
  template ad::ParamStore<S> model_init<S>(const ModelConfig&, std::uint64_t);                             \
  template ForwardOutput<S> forward_with_hidden<S>(const ad::ParamStore<S>&, const ModelConfig&, const Var<S>&); \
  template Var<S> forward<S>(const ad::ParamStore<S>&, const ModelConfig&, const Var<S>&);                 \
  template std::vector<Var<S>> mtp_forward<S>(const ad::ParamStore<S>&, const ModelConfig&,                \
                                              std::span<const Var<S>>);                                    \
  template std::vector<Tensor<S>> rollout<S>(const ad::ParamStore<S>&, const ModelConfig&, const Tensor<S>&, \
                                             Index, const Tensor<S>&, std::span<const Tensor<S>>);

KP_INSTANTIATE(float)
KP_INSTANTIATE(double)

}  // namespace kp
