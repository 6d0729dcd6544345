#pragma once

#include "kunpeng/cache.hpp"
#include "kunpeng/model.hpp"
#include "kunpeng/objectives.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kp {

// -- optimizer ----------------------------------------------------------------

struct AdamWConfig {
  double lr = 1.25e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Raised before any parameter or moment is touched.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct OptimState {
  AdamWConfig hp;
  Index step = 0;  // completed updates
  std::map<std::string, Tensor<Scalar>> m, v;
};

/// One decoupled-decay Adam update at learning rate lr:
///   p -= lr * wd * p;  p -= lr * m_hat / (sqrt(v_hat) + eps).
/// grads must carry exactly the labels of params. Throws ShapeError or
/// NonFiniteError with params and state unchanged.
template <typename Scalar>
void adamw_step(std::map<std::string, Tensor<Scalar>*>& params, const std::map<std::string, const Tensor<Scalar>*>& grads,
                OptimState<Scalar>& state, double lr);

/// Applies adamw_step to every leaf of the store using its accumulated
/// gradient; leaves the backward pass never reached count as zero gradient.
template <typename Scalar>
void adamw_step(ad::ParamStore<Scalar>& store, OptimState<Scalar>& state, double lr);

// -- schedule -----------------------------------------------------------------

struct ScheduleConfig {
  Index total_steps = 8000;
  Index warmup_steps = 32;
  double lr_init = 1.25e-4;
  double lr_min = 1e-4;

  void validate() const;
};

/// Linear ramp from 0 to lr_init over warmup_steps, then half-cosine decay to
/// lr_min at total_steps; later steps stay at lr_min.
double lr_at(Index step, const ScheduleConfig& sched);

// -- data ---------------------------------------------------------------------

/// Normalized, land-zeroed model inputs (C, H, W) by date index, served
/// through the date-keyed sample cache. The first out_chan channels of the
/// input at date t + 1 are the target of the input at date t.
class Dataset {
 public:
  using Loader = std::function<Tensor<float>(Index date)>;

  Dataset(Loader loader, Index n_dates, std::vector<ChannelMeta> meta, Tensor<float> channel_mask,
          LatWeights weights, std::size_t cache_capacity, CacheMode mode = CacheMode::aging);

  /// Keeps the given samples in memory; the cache still mediates access.
  static Dataset in_memory(std::vector<Tensor<float>> samples, std::vector<ChannelMeta> meta,
                           Tensor<float> channel_mask, LatWeights weights, std::size_t cache_capacity,
                           CacheMode mode = CacheMode::aging);

  Index n_dates() const { return n_dates_; }
  Index n_chan() const { return static_cast<Index>(meta_.size()); }
  const std::vector<ChannelMeta>& meta() const { return meta_; }
  const Tensor<float>& channel_mask() const { return mask_; }
  const LatWeights& weights() const { return weights_; }

  std::shared_ptr<const Tensor<float>> input(Index date);
  Tensor<float> target(Index date, Index out_chan);
  /// First out_chan channels of the mask, and M * L over them.
  Tensor<float> target_mask(Index out_chan) const;
  Tensor<float> target_weights(Index out_chan) const;

  /// Dates t whose window t .. t + k + 1 lies inside the dataset.
  std::vector<Index> window_starts(Index mtp_k) const;

  std::size_t cache_hits() const { return cache_->hits(); }
  std::size_t cache_misses() const { return cache_->misses(); }

 private:
  Loader loader_;
  Index n_dates_;
  std::vector<ChannelMeta> meta_;
  Tensor<float> mask_;
  LatWeights weights_;
  std::shared_ptr<SampleCache<Tensor<float>>> cache_;
};

// -- training -----------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  ScheduleConfig sched;
  AdamWConfig optim;
  Index batch_size = 2;
  /// Loop bound; training also stops once sched.total_steps updates ran.
  Index epochs = 1000000;
  std::uint64_t seed = 0;
  /// Directory for loss.csv, checkpoints and manifest.json; empty keeps
  /// everything in memory.
  std::string out_dir;
  /// Intermediate checkpoint period in steps; 0 writes only the final one.
  Index checkpoint_every = 0;

  void validate() const;
};

struct LossRecord {
  Index step = 0;  // 1-based update index
  double lr = 0;
  double loss_main = 0;
  std::vector<double> loss_aux;  // one per auxiliary unit
};

struct TrainResult {
  ad::ParamStore<float> params;
  std::vector<LossRecord> trace;
  std::vector<std::string> checkpoints;
};

/// Training stopped on a non-finite loss or gradient. The parameters from
/// before the failing step were saved to last_checkpoint (when out_dir is set).
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, Index step, std::string last_checkpoint);
  Index step;
  std::string last_checkpoint;
};

/// Window starts for each update, in order: every epoch shuffles
/// window_starts(mtp_k) with the seed and cuts it into batches (the last one
/// may be short). Stops after sched.total_steps batches or cfg.epochs epochs.
std::vector<std::vector<Index>> batch_schedule(const Dataset& data, const TrainConfig& cfg);

/// Deterministic DC-MTP training. Each epoch shuffles the window starts with
/// the seed, then walks them in batches; each batch item adds
///   (mll1(main) + aux_weight / k * sum_i mll1(aux_i)) / batch
/// to the gradient before one AdamW update at lr_at(step).
TrainResult train(Dataset& data, const TrainConfig& cfg);

/// Continues from given parameters instead of a fresh model_init(seed).
TrainResult train(Dataset& data, const TrainConfig& cfg, ad::ParamStore<float> params);

/// Writes loss.csv columns step,lr,loss_main,loss_aux_1..loss_aux_k.
std::string loss_csv(const std::vector<LossRecord>& trace, Index mtp_k);

/// Mean main-model mll1 over the given window starts, no gradients.
double mean_mll1(const ad::ParamStore<float>& params, const ModelConfig& cfg, Dataset& data,
                 std::span<const Index> dates);

// -- evaluation ---------------------------------------------------------------

/// Anything that maps an initial state to `steps` successive predictions of
/// the first out_chan channels.
class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual std::vector<Tensor<float>> forecast(const Tensor<float>& x0, Index init_date, Index steps) = 0;
};

/// kpmodel rollout with fixed parameters. A forced model reads its
/// unpredicted channels for later steps from forcing_source.
class ModelForecaster : public Forecaster {
 public:
  ModelForecaster(ad::ParamStore<float> params, ModelConfig cfg, Tensor<float> channel_mask,
                  Dataset* forcing_source = nullptr);
  std::vector<Tensor<float>> forecast(const Tensor<float>& x0, Index init_date, Index steps) override;

 private:
  ad::ParamStore<float> params_;
  ModelConfig cfg_;
  Tensor<float> mask_;
  Dataset* forcing_;
};

struct EvalConfig {
  Index leads = 15;
  Index out_chan = 7;
  /// Initialization dates; empty means every date with `leads` successors.
  std::vector<Index> init_dates;
  /// Depth in meters of each mask layer, for report labels.
  std::vector<double> depths_m;
  /// Calendar date of dataset index 0, for climatology lookup.
  Index date_offset = 0;
};

/// Scores every lead of every initialization against the dataset, one row
/// per output channel and lead, each averaged over initialization dates.
/// The climatology is indexed by date and must cover every valid date.
MetricReport evaluate(Forecaster& model, Dataset& data, const Climatology& clim, const EvalConfig& cfg);

}  // namespace kp
