#include "kunpeng/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace kp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Kind { str, integer, u64, real, boolean, reals, integers, choice };

struct KeySpec {
  const char* name;
  const char* def;
  Kind kind;
  std::vector<std::string> choices = {};
};

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s{
      {"seed", "0", Kind::u64},
      {"raw_dir", "", Kind::str},
      {"data_dir", "", Kind::str},
      {"run_dir", "", Kind::str},
      {"out_dir", "", Kind::str},
      {"checkpoint", "", Kind::str},

      {"synth.n_lat", "40", Kind::integer},
      {"synth.n_lon", "80", Kind::integer},
      {"synth.n_dates", "160", Kind::integer},
      {"synth.year_length", "40", Kind::integer},
      {"synth.source_depths", "1,20,100", Kind::reals},
      {"synth.target_depths", "5,50", Kind::reals},

      {"model.embed_dim", "128", Kind::integer},
      {"model.layers_per_block", "4", Kind::integer},
      {"model.blocks_per_stage", "2", Kind::integer},
      {"model.ffn_ratio", "4", Kind::integer},
      {"model.heads", "8", Kind::integer},
      {"model.mtp_k", "2", Kind::integer},
      {"model.aux_weight", "1", Kind::real},
      {"model.modulation", "true", Kind::boolean},
      {"model.modulation_kind", "linear", Kind::choice, {"linear", "sigmoid"}},
      {"model.forced", "false", Kind::boolean},

      {"train.total_steps", "300", Kind::integer},
      {"train.warmup_steps", "32", Kind::integer},
      {"train.lr_init", "1.25e-4", Kind::real},
      {"train.lr_min", "1e-4", Kind::real},
      {"train.batch_size", "2", Kind::integer},
      {"train.epochs", "1000000", Kind::integer},
      {"train.checkpoint_every", "0", Kind::integer},
      {"optim.weight_decay", "1e-4", Kind::real},
      {"optim.beta1", "0.9", Kind::real},
      {"optim.beta2", "0.999", Kind::real},
      {"optim.eps", "1e-8", Kind::real},
      {"cache.capacity", "64", Kind::integer},
      {"cache.mode", "aging", Kind::choice, {"aging", "literal"}},

      {"predict.init_date", "0", Kind::integer},
      {"predict.steps", "15", Kind::integer},

      {"eval.leads", "15", Kind::integer},
      {"eval.init_dates", "", Kind::integers},
      {"eval.forecaster", "model", Kind::choice, {"model", "persistence", "oracle"}},

      {"diag.kind", "eddy-ssh", Kind::choice, {"eddy-ssh", "eddy-uv", "front", "cpue"}},
      {"diag.field", "", Kind::str},
      {"diag.events", "", Kind::str},
      {"diag.compare", "", Kind::str},
      {"diag.ssh_var", "ssh", Kind::str},
      {"diag.u_var", "u", Kind::str},
      {"diag.v_var", "v", Kind::str},
      {"diag.sst_var", "t", Kind::str},
      {"diag.window", "5", Kind::integer},
      {"diag.step_m", "0.01", Kind::real},
      {"diag.min_cells", "4", Kind::integer},
      {"diag.max_cells", "2000", Kind::integer},
      {"diag.a", "4", Kind::integer},
      {"diag.b", "3", Kind::integer},
      {"diag.max_radius", "15", Kind::integer},
      {"diag.percentile", "95", Kind::real},
      {"diag.cpue_threshold", "3.0", Kind::real},
      {"diag.n_lat", "40", Kind::integer},
      {"diag.n_lon", "80", Kind::integer},

      {"bench.n_dates", "200", Kind::integer},
      {"bench.window", "4", Kind::integer},
      {"bench.epochs", "3", Kind::integer},
      {"bench.capacity", "64", Kind::integer},
      {"bench.order", "shuffled", Kind::choice, {"shuffled", "cycle"}},
      {"bench.load_ms", "50", Kind::real},
      {"bench.hit_ms", "1", Kind::real},
  };
  return s;
}

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : schema()) {
    if (key == k.name) return &k;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ValidationError(key + ": expected " + expected + ", got '" + value + "'");
}

long long parse_ll(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno != 0) bad_value(key, v, "an integer");
  return x;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno != 0 || !std::isfinite(x)) bad_value(key, v, "a finite number");
  return x;
}

// Section validators report invalid_argument; the CLI reports ValidationError.
template <typename F>
void checked(const std::string& what, F&& f) {
  try {
    f();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    throw ValidationError(msg.rfind(what, 0) == 0 ? msg : what + ": " + msg);
  }
}

void require_positive(const RunConfig& c, std::initializer_list<const char*> keys, Index min = 1) {
  for (const char* k : keys) {
    if (c.integer(k) < min) throw ValidationError(std::string(k) + " must be >= " + std::to_string(min));
  }
}

const std::string& require_path(const RunConfig& c, const char* key, const char* cmd) {
  const auto& v = c.str(key);
  if (v.empty()) throw ValidationError(std::string(cmd) + " needs " + key);
  return v;
}

void require_exists(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

PreparedInfo dataset_info(const std::string& dir) {
  require_exists(dir, "dataset directory");
  try {
    return read_prepared_info(dir);
  } catch (const std::exception& e) {
    throw ValidationError("cannot read dataset in " + dir + ": " + e.what());
  }
}

std::string fmt(double x, const char* spec = "%.6g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

}  // namespace

// -- RunConfig ----------------------------------------------------------------

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.name] = k.def;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : schema()) out.emplace_back(k.name);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw ValidationError("unknown config key '" + key + "'");
  values_[key] = trim(value);
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config file " + path);
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(path + ":" + std::to_string(n) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (!find_key(key)) throw ValidationError(path + ":" + std::to_string(n) + ": unknown config key '" + key + "'");
    values_[key] = trim(line.substr(eq + 1));
  }
}

void RunConfig::load_env() {
  for (const auto& k : schema()) {
    std::string env = "KP_";
    for (const char* p = k.name; *p; ++p) env += *p == '.' ? '_' : static_cast<char>(std::toupper(*p));
    if (const char* v = std::getenv(env.c_str())) values_[k.name] = trim(v);
  }
}

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second;
}

Index RunConfig::integer(const std::string& key) const { return static_cast<Index>(parse_ll(key, str(key))); }

std::uint64_t RunConfig::u64(const std::string& key) const {
  const auto& v = str(key);
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno != 0) bad_value(key, v, "an unsigned 64-bit integer");
  return x;
}

double RunConfig::real(const std::string& key) const { return parse_real(key, str(key)); }

bool RunConfig::boolean(const std::string& key) const {
  const auto& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<double> RunConfig::reals(const std::string& key) const {
  std::vector<double> out;
  if (str(key).empty()) return out;
  for (const auto& s : split(str(key), ',')) out.push_back(parse_real(key, s));
  return out;
}

std::vector<Index> RunConfig::integers(const std::string& key) const {
  std::vector<Index> out;
  if (str(key).empty()) return out;
  for (const auto& s : split(str(key), ',')) out.push_back(static_cast<Index>(parse_ll(key, s)));
  return out;
}

void RunConfig::validate() const {
  for (const auto& k : schema()) {
    switch (k.kind) {
      case Kind::str: break;
      case Kind::integer: integer(k.name); break;
      case Kind::u64: u64(k.name); break;
      case Kind::real: real(k.name); break;
      case Kind::boolean: boolean(k.name); break;
      case Kind::reals: reals(k.name); break;
      case Kind::integers: integers(k.name); break;
      case Kind::choice:
        if (std::find(k.choices.begin(), k.choices.end(), str(k.name)) == k.choices.end()) {
          std::string all;
          for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
          bad_value(k.name, str(k.name), all.c_str());
        }
        break;
    }
  }
  synth();
  require_positive(*this, {"model.embed_dim", "model.layers_per_block", "model.blocks_per_stage", "model.ffn_ratio",
                           "model.heads", "train.batch_size", "train.epochs", "cache.capacity", "predict.steps",
                           "eval.leads", "diag.n_lat", "diag.n_lon", "bench.n_dates", "bench.window", "bench.epochs",
                           "bench.capacity"});
  require_positive(*this, {"model.mtp_k", "train.checkpoint_every", "predict.init_date"}, 0);
  if (!(real("model.aux_weight") >= 0)) throw ValidationError("model.aux_weight must be >= 0");
  PreparedInfo nominal{GeoGrid::global(8, 16, {0}), std::vector<ChannelMeta>(1)};
  nominal.out_chan = 1;
  const auto t = train(nominal);
  checked("schedule", [&] { t.sched.validate(); });
  checked("optimizer", [&] { t.optim.validate(); });
  for (Index d : integers("eval.init_dates")) {
    if (d < 0) throw ValidationError("eval.init_dates must be >= 0");
  }
  eddy_ssh();
  eddy_uv();
  front();
  if (!(real("diag.cpue_threshold") > 0)) throw ValidationError("diag.cpue_threshold must be positive");
  if (integer("bench.window") > integer("bench.n_dates")) throw ValidationError("bench.window exceeds bench.n_dates");
  if (!(real("bench.load_ms") >= 0) || !(real("bench.hit_ms") >= 0)) throw ValidationError("bench times must be >= 0");
}

SynthRawOptions RunConfig::synth() const {
  SynthRawOptions o;
  o.n_lat = integer("synth.n_lat");
  o.n_lon = integer("synth.n_lon");
  o.n_dates = integer("synth.n_dates");
  o.year_length = integer("synth.year_length");
  o.source_depths = reals("synth.source_depths");
  o.target_depths = reals("synth.target_depths");
  o.seed = u64("seed");
  if (o.n_lat < 2 || o.n_lon < 2) throw ValidationError("synth grid must be at least 2x2");
  if (o.n_dates < 1 || o.year_length < 1) throw ValidationError("synth.n_dates and synth.year_length must be >= 1");
  for (const auto* d : {&o.source_depths, &o.target_depths}) {
    if (d->empty() || !std::is_sorted(d->begin(), d->end()) ||
        std::adjacent_find(d->begin(), d->end()) != d->end()) {
      throw ValidationError("synth depths must be non-empty and strictly increasing");
    }
  }
  return o;
}

ModelConfig RunConfig::model(const PreparedInfo& data) const {
  ModelConfig m;
  m.in_chan = static_cast<Index>(data.meta.size());
  m.out_chan = data.out_chan;
  m.n_lat = data.grid.n_lat();
  m.n_lon = data.grid.n_lon();
  m.embed_dim = integer("model.embed_dim");
  m.layers_per_block = integer("model.layers_per_block");
  m.blocks_per_stage = integer("model.blocks_per_stage");
  m.ffn_ratio = integer("model.ffn_ratio");
  m.heads = integer("model.heads");
  m.mtp_k = integer("model.mtp_k");
  m.aux_weight = real("model.aux_weight");
  m.modulation = boolean("model.modulation");
  m.modulation_kind = str("model.modulation_kind") == "sigmoid" ? ad::Modulation::sigmoid : ad::Modulation::linear;
  m.forced = boolean("model.forced");
  return m;
}

TrainConfig RunConfig::train(const PreparedInfo& data) const {
  TrainConfig t;
  t.model = model(data);
  t.sched.total_steps = integer("train.total_steps");
  t.sched.warmup_steps = integer("train.warmup_steps");
  t.sched.lr_init = real("train.lr_init");
  t.sched.lr_min = real("train.lr_min");
  t.optim.lr = t.sched.lr_init;
  t.optim.weight_decay = real("optim.weight_decay");
  t.optim.beta1 = real("optim.beta1");
  t.optim.beta2 = real("optim.beta2");
  t.optim.eps = real("optim.eps");
  t.batch_size = integer("train.batch_size");
  t.epochs = integer("train.epochs");
  t.seed = u64("seed");
  t.out_dir = str("run_dir");
  t.checkpoint_every = integer("train.checkpoint_every");
  return t;
}

CacheMode RunConfig::cache_mode() const { return str("cache.mode") == "literal" ? CacheMode::literal : CacheMode::aging; }

SshEddyParams RunConfig::eddy_ssh() const {
  SshEddyParams p{integer("diag.window"), real("diag.step_m"), integer("diag.max_cells"), integer("diag.min_cells")};
  checked("eddy-ssh", [&] { p.validate(); });
  return p;
}

UvEddyParams RunConfig::eddy_uv() const {
  UvEddyParams p{integer("diag.a"), integer("diag.b"), integer("diag.max_radius")};
  checked("eddy-uv", [&] { p.validate(); });
  return p;
}

FrontParams RunConfig::front() const {
  FrontParams p{real("diag.percentile")};
  checked("front", [&] { p.validate(); });
  return p;
}

// -- checkpoints --------------------------------------------------------------

ModelConfig checkpoint_model_config(const std::string& checkpoint) {
  require_exists(checkpoint, "checkpoint");
  const auto manifest = fs::path(checkpoint).parent_path() / "manifest.json";
  require_exists(manifest.string(), "checkpoint manifest");
  try {
    std::ifstream is(manifest);
    return ModelConfig::from_json(json::parse(is).at("model"));
  } catch (const std::exception& e) {
    throw ValidationError("bad manifest " + manifest.string() + ": " + e.what());
  }
}

ad::ParamStore<float> load_inference_params(const std::string& checkpoint, const ModelConfig& cfg) {
  auto params = model_init<float>(cfg, 0);
  params.erase_prefix(kAuxPrefix);
  ad::TensorMap saved;
  try {
    saved = ad::load_checkpoint(checkpoint);
  } catch (const std::exception& e) {
    throw ValidationError("cannot read checkpoint " + checkpoint + ": " + e.what());
  }
  try {
    ad::assign(params, saved, true);
  } catch (const std::exception& e) {
    throw ValidationError("checkpoint/config mismatch: " + std::string(e.what()));
  }
  return params;
}

// -- commands -----------------------------------------------------------------

void cmd_synth(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& dir = require_path(cfg, "raw_dir", "synth");
  const auto opts = cfg.synth();
  write_raw(synth_raw(opts), dir);
  log << "synth: " << opts.n_dates << " days on " << opts.n_lat << "x" << opts.n_lon << " written to " << dir << "\n";
}

void cmd_preprocess(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& raw = require_path(cfg, "raw_dir", "preprocess");
  const auto& out = require_path(cfg, "data_dir", "preprocess");
  const auto missing = missing_raw_inputs(raw);
  if (!missing.empty()) {
    std::string msg = "missing raw inputs (" + std::to_string(missing.size()) + "):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ValidationError(msg);
  }
  const auto p = preprocess(read_raw(raw));
  write_prepared(p, out);
  log << "preprocess: " << p.samples.size() << " samples, " << p.meta.size() << " channels written to " << out << "\n";
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& data_dir = require_path(cfg, "data_dir", "train");
  require_path(cfg, "run_dir", "train");
  const auto info = dataset_info(data_dir);
  const auto tc = cfg.train(info);
  checked("train", [&] { tc.validate(); });
  if (info.n_dates < tc.model.mtp_k + 2) {
    throw ValidationError("dataset has " + std::to_string(info.n_dates) + " dates, mtp_k " +
                          std::to_string(tc.model.mtp_k) + " needs at least " + std::to_string(tc.model.mtp_k + 2));
  }
  auto ds = open_dataset(data_dir, static_cast<std::size_t>(cfg.integer("cache.capacity")), cfg.cache_mode());
  const auto r = train(ds, tc);
  log << "train: " << r.trace.size() << " steps, loss_main " << fmt(r.trace.front().loss_main) << " -> "
      << fmt(r.trace.back().loss_main) << ", cache hits " << ds.cache_hits() << " misses " << ds.cache_misses()
      << ", checkpoint " << r.checkpoints.back() << "\n";
}

namespace {

void check_model_matches(const ModelConfig& m, const PreparedInfo& info) {
  if (m.in_chan != static_cast<Index>(info.meta.size()) || m.out_chan != info.out_chan ||
      m.n_lat != info.grid.n_lat() || m.n_lon != info.grid.n_lon()) {
    throw ValidationError("checkpoint/config mismatch: model is " + std::to_string(m.in_chan) + "->" +
                          std::to_string(m.out_chan) + " channels on " + std::to_string(m.n_lat) + "x" +
                          std::to_string(m.n_lon) + ", dataset has " + std::to_string(info.meta.size()) + "->" +
                          std::to_string(info.out_chan) + " on " + std::to_string(info.grid.n_lat()) + "x" +
                          std::to_string(info.grid.n_lon()));
  }
}

struct Persistence : Forecaster {
  Index out_chan;
  explicit Persistence(Index out) : out_chan(out) {}
  std::vector<Tensor<float>> forecast(const Tensor<float>& x0, Index, Index steps) override {
    const Index plane = x0.dim(1) * x0.dim(2);
    const Tensor<float> y({out_chan, x0.dim(1), x0.dim(2)}, x0.array().head(out_chan * plane));
    return std::vector<Tensor<float>>(static_cast<std::size_t>(steps), y);
  }
};

struct Oracle : Forecaster {
  Dataset* data;
  Index out_chan;
  Oracle(Dataset* d, Index out) : data(d), out_chan(out) {}
  std::vector<Tensor<float>> forecast(const Tensor<float>&, Index init, Index steps) override {
    std::vector<Tensor<float>> out;
    for (Index s = 1; s <= steps; ++s) out.push_back(data->target(init + s, out_chan));
    return out;
  }
};

}  // namespace

void cmd_predict(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& ckpt = require_path(cfg, "checkpoint", "predict");
  const auto& data_dir = require_path(cfg, "data_dir", "predict");
  const auto& out = require_path(cfg, "out_dir", "predict");
  const auto info = dataset_info(data_dir);
  const auto m = checkpoint_model_config(ckpt);
  check_model_matches(m, info);
  const Index init = cfg.integer("predict.init_date"), steps = cfg.integer("predict.steps");
  const Index last_needed = m.forced ? init + steps - 1 : init;
  if (last_needed >= info.n_dates) {
    throw ValidationError("predict.init_date " + std::to_string(init) + " needs date " + std::to_string(last_needed) +
                          ", dataset has " + std::to_string(info.n_dates));
  }
  const auto params = load_inference_params(ckpt, m);

  auto ds = open_dataset(data_dir, 4);
  const auto stats = read_stats(data_dir);
  const auto mask = read_mask(data_dir);
  const std::vector<ChannelMeta> out_meta(info.meta.begin(), info.meta.begin() + info.out_chan);
  NormStats out_stats{FieldTensor(stats.mean, info.meta).slice(0, info.out_chan).values(),
                      FieldTensor(stats.var, info.meta).slice(0, info.out_chan).values()};
  ModelForecaster model(params, m, ds.channel_mask(), m.forced ? &ds : nullptr);
  const auto preds = model.forecast(*ds.input(init), init, steps);
  fs::create_directories(out);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "pred.%03zu.ofb", s + 1);
    write_field((fs::path(out) / name).string(), denormalize(FieldTensor(preds[s], out_meta), out_stats, mask));
  }
  log << "predict: " << preds.size() << " steps from date " << init << " written to " << out << "\n";
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& data_dir = require_path(cfg, "data_dir", "evaluate");
  const auto& out = require_path(cfg, "out_dir", "evaluate");
  const auto info = dataset_info(data_dir);
  const auto kind = cfg.str("eval.forecaster");
  const Index leads = cfg.integer("eval.leads");

  ModelConfig m;
  if (kind == "model") {
    m = checkpoint_model_config(require_path(cfg, "checkpoint", "evaluate with eval.forecaster=model"));
    check_model_matches(m, info);
  }
  auto dates = cfg.integers("eval.init_dates");
  if (dates.empty()) {
    for (Index d = 0; d + leads < info.n_dates; ++d) dates.push_back(d);
  }
  if (dates.empty()) throw ValidationError("dataset too short for " + std::to_string(leads) + " leads");
  for (Index d : dates) {
    if (d + leads >= info.n_dates) {
      throw ValidationError("init date " + std::to_string(d) + " + " + std::to_string(leads) +
                            " leads runs past the dataset (" + std::to_string(info.n_dates) + " dates)");
    }
  }
  std::unique_ptr<Forecaster> forecaster;
  auto ds = open_dataset(data_dir, static_cast<std::size_t>(cfg.integer("cache.capacity")), cfg.cache_mode());
  if (kind == "model") {
    forecaster = std::make_unique<ModelForecaster>(load_inference_params(cfg.str("checkpoint"), m), m,
                                                   ds.channel_mask(), m.forced ? &ds : nullptr);
  } else if (kind == "persistence") {
    forecaster = std::make_unique<Persistence>(info.out_chan);
  } else {
    forecaster = std::make_unique<Oracle>(&ds, info.out_chan);
  }
  const auto clim = read_climatology(data_dir);

  EvalConfig ec;
  ec.leads = leads;
  ec.out_chan = info.out_chan;
  ec.init_dates = dates;
  ec.depths_m = info.grid.depths_m();
  ec.date_offset = info.first_date;
  const auto report = evaluate(*forecaster, ds, clim, ec);

  fs::create_directories(out);
  write_text(fs::path(out) / "metrics.csv", report.to_csv());
  write_text(fs::path(out) / "summary.csv", report.summary_csv());
  write_text(fs::path(out) / "metrics.json", report.to_json().dump(2) + "\n");

  log << "evaluate (" << kind << ", " << dates.size() << " init dates)\n";
  log << "lead_days        MAE        MSE        ACC\n";
  double mae = 0, mse = 0, acc = 0;
  const auto summary = report.lead_summary();
  for (const auto& s : summary) {
    log << fmt(static_cast<double>(s.lead_days), "%9.0f") << fmt(s.mae, " %10.4f") << fmt(s.mse, " %10.4f")
        << fmt(s.acc, " %10.4f") << "\n";
    mae += s.mae;
    mse += s.mse;
    acc += s.acc;
  }
  const auto n = static_cast<double>(summary.size());
  log << "     mean" << fmt(mae / n, " %10.4f") << fmt(mse / n, " %10.4f") << fmt(acc / n, " %10.4f") << "\n";
}

namespace {

Index find_channel(const FieldTensor& f, const std::string& var, const std::string& path) {
  for (Index c = 0; c < f.n_chan(); ++c) {
    const auto& m = f.meta()[static_cast<std::size_t>(c)];
    if (m.variable == var && m.depth_index == 0) return c;
  }
  throw ValidationError(path + " has no surface channel '" + var + "'");
}

FieldTensor read_input_field(const std::string& path) {
  require_exists(path, "field file");
  try {
    return read_field(path);
  } catch (const std::exception& e) {
    throw ValidationError("cannot read " + path + ": " + e.what());
  }
}

MaskPlane read_compare_mask(const std::string& path, Index H, Index W) {
  const auto f = read_input_field(path);
  if (f.n_lat() != H || f.n_lon() != W) throw ValidationError(path + ": mask grid does not match");
  return plane_of(f.values(), 0) != 0.0;
}

std::vector<CatchEvent> read_events(const std::string& path) {
  require_exists(path, "events file");
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  if (trim(line) != "lat,lon,catch_tons,hauls") {
    throw ValidationError(path + ": expected header lat,lon,catch_tons,hauls");
  }
  std::vector<CatchEvent> ev;
  for (int n = 2; std::getline(is, line); ++n) {
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    const auto where = path + ":" + std::to_string(n);
    if (f.size() != 4) throw ValidationError(where + ": expected 4 fields");
    ev.push_back({parse_real(where, f[0]), parse_real(where, f[1]), parse_real(where, f[2]), parse_real(where, f[3])});
    if (ev.back().catch_tons < 0 || ev.back().hauls < 0) throw ValidationError(where + ": negative catch or hauls");
  }
  return ev;
}

}  // namespace

void cmd_diagnose(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto& out = require_path(cfg, "out_dir", "diagnose");
  const auto kind = cfg.str("diag.kind");
  const auto& data_dir = cfg.str("data_dir");
  std::optional<PreparedInfo> info;
  if (!data_dir.empty()) info = dataset_info(data_dir);
  const auto& compare = cfg.str("diag.compare");
  if (!compare.empty()) require_exists(compare, "comparison mask");

  if (kind == "cpue") {
    const auto events = read_events(require_path(cfg, "diag.events", "diagnose cpue"));
    const GeoGrid grid = info ? info->grid : GeoGrid::global(cfg.integer("diag.n_lat"), cfg.integer("diag.n_lon"), {0});
    std::optional<MaskPlane> truth;
    if (!compare.empty()) truth = read_compare_mask(compare, grid.n_lat(), grid.n_lon());
    const auto g = cpue_grid(events, grid, cfg.real("diag.cpue_threshold"));
    fs::create_directories(out);
    write_text(fs::path(out) / "cpue.csv", cpue_csv(g));
    write_field((fs::path(out) / "cpue.ofb").string(), plane_field(g.fishing.cast<double>(), "fishing"));
    log << "cpue: " << events.size() - static_cast<std::size_t>(g.rejected) << " events gridded, " << g.rejected
        << " rejected, " << g.fishing.count() << " fishing cells\n";
    if (truth) {
      const auto m = classification_metrics(g.fishing, *truth, g.effort > 0.0);
      const json j = {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}, {"accuracy", m.accuracy},
                      {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
      write_text(fs::path(out) / "classification.json", j.dump(2) + "\n");
      log << "classification: accuracy " << fmt(m.accuracy) << " precision " << fmt(m.precision) << " recall "
          << fmt(m.recall) << " f1 " << fmt(m.f1) << "\n";
    }
    return;
  }

  const auto& path = require_path(cfg, "diag.field", "diagnose");
  const auto field = read_input_field(path);
  const Index H = field.n_lat(), W = field.n_lon();
  MaskPlane ocean = MaskPlane::Constant(H, W, true);
  GeoGrid grid = GeoGrid::global(H, W, {0});
  if (info) {
    if (info->grid.n_lat() != H || info->grid.n_lon() != W) throw ValidationError(path + ": grid does not match dataset");
    ocean = surface_ocean(read_mask(data_dir));
    grid = info->grid;
  }
  std::optional<MaskPlane> truth;
  if (!compare.empty()) truth = read_compare_mask(compare, H, W);

  if (kind == "eddy-ssh" || kind == "eddy-uv") {
    std::vector<EddyRecord> eddies;
    if (kind == "eddy-ssh") {
      const auto ssh = plane_of(field.values(), find_channel(field, cfg.str("diag.ssh_var"), path));
      eddies = detect_eddies_ssh(ssh, ocean, cfg.eddy_ssh());
    } else {
      const auto u = plane_of(field.values(), find_channel(field, cfg.str("diag.u_var"), path));
      const auto v = plane_of(field.values(), find_channel(field, cfg.str("diag.v_var"), path));
      eddies = detect_eddies_uv(u, v, ocean, cfg.eddy_uv());
    }
    const auto labels = eddy_labels(eddies, H, W);
    fs::create_directories(out);
    write_text(fs::path(out) / "eddies.csv", eddy_csv(eddies));
    write_field((fs::path(out) / "eddies.ofb").string(), plane_field(labels, "eddy"));
    log << kind << ": " << eddies.size() << " eddies\n";
    if (truth) {
      const MaskPlane pred = labels != 0.0;
      log << "overlap: iou " << fmt(iou(pred, *truth)) << " f1 " << fmt(f1(pred, *truth)) << "\n";
    }
    return;
  }

  const auto sst = plane_of(field.values(), find_channel(field, cfg.str("diag.sst_var"), path));
  const auto fronts = detect_fronts(sst, grid, ocean, cfg.front());
  fs::create_directories(out);
  write_text(fs::path(out) / "fronts.csv", front_csv(fronts));
  write_field((fs::path(out) / "fronts.ofb").string(), plane_field(fronts.values.cast<double>(), "front"));
  log << "front: " << fronts.values.count() << " cells above " << fmt(fronts.threshold_used) << " degC/km\n";
  if (truth) {
    const double j = iou(fronts.values, *truth), f = f1(fronts.values, *truth);
    write_text(fs::path(out) / "overlap.json", json{{"iou", j}, {"f1", f}}.dump(2) + "\n");
    log << "overlap: iou " << fmt(j) << " f1 " << fmt(f) << "\n";
  }
}

// -- cache benchmark ----------------------------------------------------------

std::vector<std::int64_t> cache_trace(Index n_dates, Index window, Index epochs, const std::string& order,
                                      std::uint64_t seed) {
  if (window < 1 || window > n_dates || epochs < 1) throw std::invalid_argument("cache_trace: bad sizes");
  std::vector<Index> starts(static_cast<std::size_t>(n_dates - window + 1));
  Rng rng(seed);
  std::vector<std::int64_t> trace;
  for (Index e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < starts.size(); ++i) starts[i] = static_cast<Index>(i);
    if (order == "shuffled") {
      for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng.below(i)]);
    }
    for (Index s : starts) {
      for (Index j = 0; j < window; ++j) trace.push_back(s + j);
    }
  }
  return trace;
}

CacheBenchResult bench_cache(std::span<const std::int64_t> trace, std::size_t capacity, CacheMode mode, Index epochs,
                             double load_ms, double hit_ms) {
  const auto events = simulate_cache(capacity, mode, trace);
  CacheBenchResult r;
  r.mode = mode == CacheMode::aging ? "aging" : "literal";
  r.requests = static_cast<Index>(events.size());
  const std::size_t per_epoch = events.size() / static_cast<std::size_t>(epochs);
  Index later = 0, later_hits = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    r.hits += events[i].hit;
    if (i >= per_epoch) {
      ++later;
      later_hits += events[i].hit;
    }
  }
  r.hit_rate = r.requests ? static_cast<double>(r.hits) / static_cast<double>(r.requests) : 0.0;
  r.later_epoch_hit_rate = later ? static_cast<double>(later_hits) / static_cast<double>(later) : 0.0;
  r.time_ms = static_cast<double>(r.requests - r.hits) * load_ms + static_cast<double>(r.hits) * hit_ms;
  r.uncached_ms = static_cast<double>(r.requests) * load_ms;
  r.savings = r.uncached_ms > 0 ? 1.0 - r.time_ms / r.uncached_ms : 0.0;
  return r;
}

void cmd_bench_cache(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Index epochs = cfg.integer("bench.epochs");
  const auto trace = cache_trace(cfg.integer("bench.n_dates"), cfg.integer("bench.window"), epochs,
                                 cfg.str("bench.order"), cfg.u64("seed"));
  const auto capacity = static_cast<std::size_t>(cfg.integer("bench.capacity"));
  json j = json::array();
  log << "mode     requests     hits  hit_rate  later_epochs  savings\n";
  for (CacheMode mode : {CacheMode::aging, CacheMode::literal}) {
    const auto r = bench_cache(trace, capacity, mode, epochs, cfg.real("bench.load_ms"), cfg.real("bench.hit_ms"));
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %8lld %8lld  %8.4f  %12.4f  %7.4f\n", r.mode.c_str(),
                  static_cast<long long>(r.requests), static_cast<long long>(r.hits), r.hit_rate,
                  r.later_epoch_hit_rate, r.savings);
    log << line;
    j.push_back({{"mode", r.mode}, {"requests", r.requests}, {"hits", r.hits}, {"hit_rate", r.hit_rate},
                 {"later_epoch_hit_rate", r.later_epoch_hit_rate}, {"time_ms", r.time_ms},
                 {"uncached_ms", r.uncached_ms}, {"savings", r.savings}});
  }
  if (const auto& out = cfg.str("out_dir"); !out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "bench_cache.json", j.dump(2) + "\n");
  }
}

}  // namespace kp
