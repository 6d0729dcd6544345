#include "kunpeng/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace kp {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Var;

// -- optimizer ----------------------------------------------------------------

void AdamWConfig::validate() const {
  if (!(lr >= 0) || !(weight_decay >= 0)) throw std::invalid_argument("adamw: lr and weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("adamw: betas must lie in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("adamw: eps must be > 0");
}

template <typename Scalar>
void adamw_step(std::map<std::string, Tensor<Scalar>*>& params, const std::map<std::string, const Tensor<Scalar>*>& grads,
                OptimState<Scalar>& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adamw: parameter and gradient label sets differ");
  for (const auto& [label, p] : params) {
    auto it = grads.find(label);
    if (it == grads.end()) throw ShapeError("adamw: no gradient for " + label);
    require_same_shape(*p, *it->second, label.c_str());
    if (!it->second->array().allFinite()) throw NonFiniteError("non-finite gradient for " + label);
    auto m = state.m.find(label);
    if (m != state.m.end()) require_same_shape(*p, m->second, label.c_str());
  }

  const auto& hp = state.hp;
  const Index t = state.step + 1;
  const Scalar b1 = static_cast<Scalar>(hp.beta1), b2 = static_cast<Scalar>(hp.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(hp.beta1, static_cast<double>(t)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(hp.beta2, static_cast<double>(t)));
  const Scalar decay = static_cast<Scalar>(1.0 - lr * hp.weight_decay);
  const Scalar rate = static_cast<Scalar>(lr), eps = static_cast<Scalar>(hp.eps);
  for (auto& [label, p] : params) {
    const auto& g = grads.at(label)->array();
    auto [mi, fresh_m] = state.m.try_emplace(label, Tensor<Scalar>::zeros(p->shape()));
    auto [vi, fresh_v] = state.v.try_emplace(label, Tensor<Scalar>::zeros(p->shape()));
    auto& m = mi->second.array();
    auto& v = vi->second.array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p->array() = decay * p->array() - rate * (m / c1) / ((v / c2).sqrt() + eps);
  }
  state.step = t;
}

template <typename Scalar>
void adamw_step(ad::ParamStore<Scalar>& store, OptimState<Scalar>& state, double lr) {
  std::map<std::string, Tensor<Scalar>*> params;
  std::map<std::string, const Tensor<Scalar>*> grads;
  std::map<std::string, Tensor<Scalar>> zeros;
  for (const auto& [label, var] : store) {
    Var<Scalar> handle = var;
    params[label] = &handle.mutable_value();
    if (var.has_grad()) {
      grads[label] = &var.grad();
    } else {
      grads[label] = &zeros.emplace(label, Tensor<Scalar>::zeros(var.shape())).first->second;
    }
  }
  adamw_step(params, grads, state, lr);
}

// -- schedule -----------------------------------------------------------------

void ScheduleConfig::validate() const {
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw std::invalid_argument("schedule: need 0 <= warmup_steps < total_steps, got " + std::to_string(warmup_steps) +
                                " and " + std::to_string(total_steps));
  }
  if (!(lr_min >= 0) || !(lr_min <= lr_init)) throw std::invalid_argument("schedule: need 0 <= lr_min <= lr_init");
}

double lr_at(Index step, const ScheduleConfig& s) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step < s.warmup_steps) return s.lr_init * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.lr_min;
  if (step == s.warmup_steps) return s.lr_init;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.lr_min + (s.lr_init - s.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// -- data ---------------------------------------------------------------------

Dataset::Dataset(Loader loader, Index n_dates, std::vector<ChannelMeta> meta, Tensor<float> channel_mask,
                 LatWeights weights, std::size_t cache_capacity, CacheMode mode)
    : loader_(std::move(loader)),
      n_dates_(n_dates),
      meta_(std::move(meta)),
      mask_(std::move(channel_mask)),
      weights_(std::move(weights)),
      cache_(std::make_shared<SampleCache<Tensor<float>>>(cache_capacity, mode)) {
  if (n_dates_ < 1) throw std::invalid_argument("dataset has no dates");
  if (mask_.rank() != 3 || mask_.dim(0) != n_chan()) {
    throw ShapeError("dataset mask " + shape_string(mask_.shape()) + " does not match " + std::to_string(n_chan()) +
                     " channels");
  }
  if (weights_.size() != mask_.dim(1)) throw ShapeError("dataset latitude weights do not match the grid");
}

Dataset Dataset::in_memory(std::vector<Tensor<float>> samples, std::vector<ChannelMeta> meta, Tensor<float> channel_mask,
                           LatWeights weights, std::size_t cache_capacity, CacheMode mode) {
  for (const auto& s : samples) require_same_shape(s, channel_mask, "dataset sample");
  auto store = std::make_shared<const std::vector<Tensor<float>>>(std::move(samples));
  const auto n = static_cast<Index>(store->size());
  return Dataset([store](Index d) { return store->at(static_cast<std::size_t>(d)); }, n, std::move(meta),
                 std::move(channel_mask), std::move(weights), cache_capacity, mode);
}

std::shared_ptr<const Tensor<float>> Dataset::input(Index date) {
  if (date < 0 || date >= n_dates_) {
    throw std::out_of_range("date " + std::to_string(date) + " outside dataset of " + std::to_string(n_dates_));
  }
  auto r = cache_->get(date, [this](std::int64_t d) {
    Tensor<float> x = loader_(static_cast<Index>(d));
    require_same_shape(x, mask_, "dataset sample");
    return x;
  });
  return r.payload;
}

Tensor<float> Dataset::target(Index date, Index out_chan) {
  const auto x = input(date);
  const Index plane = x->dim(1) * x->dim(2);
  return Tensor<float>({out_chan, x->dim(1), x->dim(2)}, x->array().head(out_chan * plane));
}

Tensor<float> Dataset::target_mask(Index out_chan) const {
  const Index plane = mask_.dim(1) * mask_.dim(2);
  return Tensor<float>({out_chan, mask_.dim(1), mask_.dim(2)}, mask_.array().head(out_chan * plane));
}

Tensor<float> Dataset::target_weights(Index out_chan) const { return cell_weights(target_mask(out_chan), weights_); }

std::vector<Index> Dataset::window_starts(Index mtp_k) const {
  std::vector<Index> out;
  for (Index t = 0; t + mtp_k + 1 < n_dates_; ++t) out.push_back(t);
  return out;
}

// -- training -----------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  sched.validate();
  optim.validate();
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

TrainingAborted::TrainingAborted(const std::string& what, Index step_, std::string last)
    : std::runtime_error(what), step(step_), last_checkpoint(std::move(last)) {}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

json schedule_json(const ScheduleConfig& s) {
  return {{"total_steps", s.total_steps}, {"warmup_steps", s.warmup_steps}, {"lr_init", s.lr_init}, {"lr_min", s.lr_min}};
}

json optim_json(const AdamWConfig& o) {
  return {{"weight_decay", o.weight_decay}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}

class RunFiles {
 public:
  RunFiles(const TrainConfig& cfg) : cfg_(cfg) {
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  }
  bool enabled() const { return !cfg_.out_dir.empty(); }

  std::string checkpoint(const ad::ParamStore<float>& params, Index step) {
    if (!enabled()) return {};
    const auto path = (fs::path(cfg_.out_dir) / ("ckpt." + std::to_string(step))).string();
    ad::save_checkpoint(path, ad::snapshot(params));
    written_.push_back(path);
    return path;
  }

  void finish(const std::vector<LossRecord>& trace, Index steps, const std::string& status) {
    if (!enabled()) return;
    write_text(fs::path(cfg_.out_dir) / "loss.csv", loss_csv(trace, cfg_.model.mtp_k));
    json names = json::array();
    for (const auto& p : written_) names.push_back(fs::path(p).filename().string());
    const json manifest = {{"model", cfg_.model.to_json()},
                           {"schedule", schedule_json(cfg_.sched)},
                           {"optimizer", optim_json(cfg_.optim)},
                           {"batch_size", cfg_.batch_size},
                           {"epochs", cfg_.epochs},
                           {"seed", cfg_.seed},
                           {"steps", steps},
                           {"status", status},
                           {"checkpoints", names}};
    write_text(fs::path(cfg_.out_dir) / "manifest.json", manifest.dump(2) + "\n");
  }

  const std::vector<std::string>& written() const { return written_; }

 private:
  const TrainConfig& cfg_;
  std::vector<std::string> written_;
};

void check_dataset(const Dataset& data, const ModelConfig& m) {
  const auto& s = data.channel_mask().shape();
  if (s != Shape{m.in_chan, m.n_lat, m.n_lon}) {
    throw ShapeError("dataset samples are " + shape_string(s) + " but the model expects " +
                     shape_string({m.in_chan, m.n_lat, m.n_lon}));
  }
}

}  // namespace

std::vector<std::vector<Index>> batch_schedule(const Dataset& data, const TrainConfig& cfg) {
  const auto starts = data.window_starts(cfg.model.mtp_k);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::vector<Index>> out;
  Rng shuffle(cfg.seed ^ 0x5bd1e995ULL);
  for (Index epoch = 0; epoch < cfg.epochs && static_cast<Index>(out.size()) < cfg.sched.total_steps; ++epoch) {
    std::vector<Index> order = starts;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t b = 0; b < order.size() && static_cast<Index>(out.size()) < cfg.sched.total_steps; b += bs) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + bs)));
    }
  }
  return out;
}

TrainResult train(Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  return train(data, cfg, model_init<float>(cfg.model, cfg.seed));
}

TrainResult train(Dataset& data, const TrainConfig& cfg, ad::ParamStore<float> params) {
  cfg.validate();
  check_dataset(data, cfg.model);
  const Index k = cfg.model.mtp_k, out = cfg.model.out_chan;
  const auto starts = data.window_starts(k);
  if (starts.empty()) {
    throw std::invalid_argument("dataset of " + std::to_string(data.n_dates()) + " dates has no window of " +
                                std::to_string(k + 2) + " dates");
  }

  const Tensor<float> cw = data.target_weights(out);
  const float aux_scale = k > 0 ? static_cast<float>(cfg.model.aux_weight / static_cast<double>(k)) : 0.0f;

  RunFiles files(cfg);
  OptimState<float> state;
  state.hp = cfg.optim;
  TrainResult result;

  auto abort = [&](const std::string& why, Index step) {
    const std::string last = files.checkpoint(params, step);
    files.finish(result.trace, step, "aborted: " + why);
    throw TrainingAborted(why + " at step " + std::to_string(step + 1), step, last);
  };

  Index step = 0;
  for (const auto& batch : batch_schedule(data, cfg)) {
    const float inv_batch = 1.0f / static_cast<float>(batch.size());
    params.zero_grad();
    LossRecord rec;
    rec.step = step + 1;
    rec.loss_aux.assign(static_cast<std::size_t>(k), 0.0);
    for (const Index t : batch) {
      std::vector<Var<float>> seq;
      for (Index j = 0; j <= k; ++j) seq.emplace_back(*data.input(t + j));
      const auto preds = mtp_forward<float>(params, cfg.model, seq);
      Var<float> loss = mll1_loss(preds[0], data.target(t + 1, out), cw);
      rec.loss_main += static_cast<double>(loss.value()[0]) * inv_batch;
      if (k > 0) {
        Var<float> aux;
        for (Index j = 1; j <= k; ++j) {
          const auto a = mll1_loss(preds[static_cast<std::size_t>(j)], data.target(t + j + 1, out), cw);
          rec.loss_aux[static_cast<std::size_t>(j - 1)] += static_cast<double>(a.value()[0]) * inv_batch;
          aux = j == 1 ? a : aux + a;
        }
        loss = loss + ad::scale(aux, aux_scale);
      }
      if (!std::isfinite(loss.value()[0])) abort("non-finite loss", step);
      ad::backward(ad::scale(loss, inv_batch));
    }
    rec.lr = lr_at(step + 1, cfg.sched);
    try {
      adamw_step(params, state, rec.lr);
    } catch (const NonFiniteError& e) {
      abort(e.what(), step);
    }
    ++step;
    result.trace.push_back(std::move(rec));
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.sched.total_steps) {
      files.checkpoint(params, step);
    }
  }
  params.zero_grad();
  files.checkpoint(params, step);
  files.finish(result.trace, step, "complete");
  result.checkpoints = files.written();
  result.params = std::move(params);
  return result;
}

std::string loss_csv(const std::vector<LossRecord>& trace, Index mtp_k) {
  std::ostringstream os;
  os << "step,lr,loss_main";
  for (Index i = 1; i <= mtp_k; ++i) os << ",loss_aux_" << i;
  os << '\n';
  for (const auto& r : trace) {
    os << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss_main);
    for (double a : r.loss_aux) os << ',' << fmt(a);
    os << '\n';
  }
  return os.str();
}

double mean_mll1(const ad::ParamStore<float>& params, const ModelConfig& cfg, Dataset& data, std::span<const Index> dates) {
  if (dates.empty()) throw std::invalid_argument("mean_mll1: no dates");
  ad::NoGradGuard no_grad;
  const auto mask = data.target_mask(cfg.out_chan);
  double total = 0;
  for (Index t : dates) {
    const auto y = forward(params, cfg, Var<float>(*data.input(t))).value();
    total += mll1(y, data.target(t + 1, cfg.out_chan), mask, data.weights());
  }
  return total / static_cast<double>(dates.size());
}

// -- evaluation ---------------------------------------------------------------

ModelForecaster::ModelForecaster(ad::ParamStore<float> params, ModelConfig cfg, Tensor<float> channel_mask,
                                 Dataset* forcing_source)
    : params_(std::move(params)), cfg_(std::move(cfg)), mask_(std::move(channel_mask)), forcing_(forcing_source) {
  cfg_.validate();
  if (cfg_.forced && !forcing_) throw std::invalid_argument("a forced model needs a forcing source");
}

std::vector<Tensor<float>> ModelForecaster::forecast(const Tensor<float>& x0, Index init_date, Index steps) {
  std::vector<Tensor<float>> forcing;
  if (cfg_.forced) {
    const Index plane = cfg_.n_lat * cfg_.n_lon, keep = cfg_.in_chan - cfg_.out_chan;
    for (Index s = 1; s < steps; ++s) {
      const auto x = forcing_->input(init_date + s);
      forcing.emplace_back(Shape{keep, cfg_.n_lat, cfg_.n_lon}, x->array().tail(keep * plane));
    }
  }
  return rollout<float>(params_, cfg_, x0, steps, mask_, forcing);
}

namespace {

Tensor<float> channel_of(const Tensor<float>& x, Index c) {
  const Index plane = x.dim(1) * x.dim(2);
  return Tensor<float>({1, x.dim(1), x.dim(2)}, x.array().segment(c * plane, plane));
}

}  // namespace

MetricReport evaluate(Forecaster& model, Dataset& data, const Climatology& clim, const EvalConfig& cfg) {
  if (cfg.leads < 1) throw std::invalid_argument("evaluate: leads must be >= 1");
  if (cfg.out_chan < 1 || cfg.out_chan > data.n_chan()) throw std::invalid_argument("evaluate: bad out_chan");
  std::vector<Index> dates = cfg.init_dates;
  if (dates.empty()) {
    for (Index d = 0; d + cfg.leads < data.n_dates(); ++d) dates.push_back(d);
  }
  if (dates.empty()) throw std::invalid_argument("evaluate: no initialization date has " + std::to_string(cfg.leads) + " successors");
  for (Index d : dates) {
    if (d < 0 || d + cfg.leads >= data.n_dates()) throw std::out_of_range("evaluate: init date " + std::to_string(d) + " lacks truth");
  }

  const Index C = cfg.out_chan, L = cfg.leads;
  std::vector<MetricRow> acc(static_cast<std::size_t>(C * L));
  const auto& meta = data.meta();
  for (Index l = 0; l < L; ++l) {
    for (Index c = 0; c < C; ++c) {
      auto& r = acc[static_cast<std::size_t>(l * C + c)];
      const auto& m = meta[static_cast<std::size_t>(c)];
      r.variable = m.variable;
      const auto di = static_cast<std::size_t>(m.depth_index);
      r.depth_m = di < cfg.depths_m.size() ? cfg.depths_m[di] : static_cast<double>(m.depth_index);
      r.lead_days = l + 1;
    }
  }

  const auto& lw = data.weights();
  for (Index d : dates) {
    const auto x0 = data.input(d);
    const auto preds = model.forecast(*x0, d, L);
    if (static_cast<Index>(preds.size()) != L) throw std::runtime_error("forecaster returned the wrong number of steps");
    for (Index l = 0; l < L; ++l) {
      const Index valid = d + l + 1;
      const auto truth = data.input(valid);
      const auto& pred = preds[static_cast<std::size_t>(l)];
      if (pred.shape() != Shape{C, truth->dim(1), truth->dim(2)}) throw ShapeError("forecast has shape " + shape_string(pred.shape()));
      if (!clim.has(cfg.date_offset + valid)) {
        throw UndefinedMetricError("ACC undefined: no climatology for date " + std::to_string(valid) + " (init " +
                                   std::to_string(d) + ")");
      }
      const auto& k = clim.for_date(cfg.date_offset + valid);
      for (Index c = 0; c < C; ++c) {
        const auto p = channel_of(pred, c), t = channel_of(*truth, c), kc = channel_of(k, c);
        const auto m = channel_of(data.channel_mask(), c);
        auto& r = acc[static_cast<std::size_t>(l * C + c)];
        r.mse += masked_mse(p, t, m, lw);
        r.mae += masked_mae(p, t, m, lw);
        r.mbe += masked_bias(p, t, m, lw);
        try {
          r.acc += masked_acc(p, t, kc, m, lw);
        } catch (const UndefinedMetricError& e) {
          throw UndefinedMetricError(std::string(e.what()) + " for " + r.variable + " at date " + std::to_string(valid) +
                                     " (init " + std::to_string(d) + ")");
        }
      }
    }
  }

  MetricReport rep;
  const double n = static_cast<double>(dates.size());
  for (auto& r : acc) {
    r.mse /= n;
    r.mae /= n;
    r.mbe /= n;
    r.acc /= n;
  }
  // Rows ordered by channel, then lead.
  for (Index c = 0; c < C; ++c)
    for (Index l = 0; l < L; ++l) rep.rows.push_back(acc[static_cast<std::size_t>(l * C + c)]);
  rep.first_date = *std::min_element(dates.begin(), dates.end());
  rep.last_date = *std::max_element(dates.begin(), dates.end());
  rep.n_dates = static_cast<Index>(dates.size());
  rep.n_lat = data.channel_mask().dim(1);
  rep.n_lon = data.channel_mask().dim(2);
  return rep;
}

#define KP_INSTANTIATE(S)                                                                                             \
  template void adamw_step<S>(std::map<std::string, Tensor<S>*>&, const std::map<std::string, const Tensor<S>*>&,  \
                              OptimState<S>&, double);                                                             \
  template void adamw_step<S>(ad::ParamStore<S>&, OptimState<S>&, double);
KP_INSTANTIATE(float)
KP_INSTANTIATE(double)
#undef KP_INSTANTIATE

}  // namespace kp
