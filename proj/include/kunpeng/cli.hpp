#pragma once

#include "kunpeng/diagnostics.hpp"
#include "kunpeng/pipeline.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace kp {

/// Bad configuration or inputs detected before any output was written.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Flat key=value configuration over a fixed schema of keys with defaults.
///
/// Sources in increasing precedence: schema defaults, the config file,
/// KP_<KEY> environment variables (dots become underscores, upper case),
/// explicit overrides. Unknown keys and malformed values are errors.
class RunConfig {
 public:
  RunConfig();

  /// "key = value" lines; '#' starts a comment.
  void load_file(const std::string& path);
  void load_env();
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  Index integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  std::vector<Index> integers(const std::string& key) const;

  /// Parses every key and checks every section's invariants.
  void validate() const;

  static std::vector<std::string> keys();
  const std::map<std::string, std::string>& values() const { return values_; }

  // Typed views of the sections.
  SynthRawOptions synth() const;
  /// Model hyperparameters; channel counts and grid come from the dataset.
  ModelConfig model(const PreparedInfo& data) const;
  TrainConfig train(const PreparedInfo& data) const;
  CacheMode cache_mode() const;
  SshEddyParams eddy_ssh() const;
  UvEddyParams eddy_uv() const;
  FrontParams front() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Each command validates its whole configuration and inputs, then works.
/// Human-readable progress goes to `log`.
void cmd_synth(const RunConfig& cfg, std::ostream& log);
void cmd_preprocess(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_predict(const RunConfig& cfg, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);
void cmd_diagnose(const RunConfig& cfg, std::ostream& log);
void cmd_bench_cache(const RunConfig& cfg, std::ostream& log);

/// Model configuration recorded in the manifest.json next to a checkpoint.
ModelConfig checkpoint_model_config(const std::string& checkpoint);
/// Inference parameters from a checkpoint; auxiliary units are dropped.
ad::ParamStore<float> load_inference_params(const std::string& checkpoint, const ModelConfig& cfg);

struct CacheBenchResult {
  std::string mode;
  Index requests = 0, hits = 0;
  double hit_rate = 0;
  double later_epoch_hit_rate = 0;  // epochs after the first
  double time_ms = 0, uncached_ms = 0;
  double savings = 0;  // 1 - time / uncached
};

/// Access trace of `epochs` passes over n_dates samples; each sample reads
/// `window` consecutive dates. "shuffled" permutes window starts per epoch,
/// "cycle" walks them in order.
std::vector<std::int64_t> cache_trace(Index n_dates, Index window, Index epochs, const std::string& order,
                                      std::uint64_t seed);
CacheBenchResult bench_cache(std::span<const std::int64_t> trace, std::size_t capacity, CacheMode mode,
                             Index epochs, double load_ms, double hit_ms);

}  // namespace kp
