// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "kunpeng/cli.hpp"
#include "kunpeng/lcdcn.hpp"
#include "support/primitive_checks.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <list>
#include <numeric>
#include <sstream>

using namespace kp;
using ad::Var;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int n, const std::string& title, const std::function<Outcome()>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d: %s | %s | %.1f s\n", o.pass ? "PASS" : "FAIL", n, title.c_str(), o.detail.c_str(),
              seconds_since(t0));
  std::fflush(stdout);
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <typename S>
Tensor<S> roll_lon(const Tensor<S>& x, Index k) {
  Tensor<S> out(x.shape());
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  for (Index c = 0; c < C; ++c)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) out(c, h, (w + k) % W) = x(c, h, w);
  return out;
}

bool same_trace(const std::vector<LossRecord>& a, const std::vector<LossRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].step != b[i].step || a[i].lr != b[i].lr || a[i].loss_main != b[i].loss_main ||
        a[i].loss_aux != b[i].loss_aux)
      return false;
  }
  return true;
}

bool same_params(const ad::ParamStore<float>& a, const ad::ParamStore<float>& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
    const auto& [la, va] = *ia;
    const auto& [lb, vb] = *ib;
    if (la != lb || va.shape() != vb.shape()) return false;
    if (std::memcmp(va.value().data(), vb.value().data(), sizeof(float) * va.value().size()) != 0) return false;
  }
  return ia == a.end() && ib == b.end();
}

// -- 1 ------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto checks = testing::run_primitive_gradchecks(20);
  const double elapsed = seconds_since(t0);
  bool ok = elapsed <= 300.0;
  double worst = 0;
  int fewest = 1 << 30;
  std::string bad;
  bool layer = false;
  for (const auto& c : checks) {
    worst = std::max(worst, c.worst);
    fewest = std::min(fewest, c.shapes);
    if (c.name.find("lcdcn") != std::string::npos) layer = true;
    if (!(c.worst <= 1e-4) || c.shapes < 20) {
      ok = false;
      bad += " " + c.name + "=" + num(c.worst);
    }
  }
  ok = ok && layer && !checks.empty();
  return {ok, std::to_string(checks.size()) + " ops incl. LC-DCN layer, >= " + std::to_string(fewest) +
                  " shapes each, worst rel err " + num(worst) + ", suite " + num(elapsed) + " s" +
                  (bad.empty() ? "" : ", failing:" + bad)};
}

// -- 2 ------------------------------------------------------------------------

Outcome zero_offset() {
  Rng rng(99);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    LcdcnConfig cfg;
    cfg.channels = 16;
    cfg.heads = trial % 2 ? 8 : 4;
    const auto p = lcdcn_init<double>(cfg, 100 + static_cast<std::uint64_t>(trial));
    Var<double> x(random_uniform<double>({16, 6 + trial % 3, 12 + 2 * trial}, rng, -3, 3));
    const auto y = lcdcn_forward(x, p, cfg).value();
    const auto ref = lcdcn_base_conv(x, p, cfg).value();
    worst = std::max(worst, (y.array() - ref.array()).abs().maxCoeff());
  }
  return {worst <= 1e-10, "10 inputs, max |deformable - cyclic conv| = " + num(worst)};
}

// -- 3 ------------------------------------------------------------------------

Outcome shift_equivariance() {
  const ModelConfig c;
  auto p = model_init<float>(c, 7);
  Rng rng(70);
  for (const auto& [label, var] : p) {
    if (label.find("offset_") != std::string::npos) {
      Var<float> handle = var;
      auto& v = handle.mutable_value();
      v = random_uniform<float>(v.shape(), rng, -0.02, 0.02);
    }
  }
  const auto x = random_uniform<float>({c.in_chan, c.n_lat, c.n_lon}, rng, -1, 1);
  const auto y = forward(p, c, Var<float>(x)).value();
  const auto ys = forward(p, c, Var<float>(roll_lon(x, c.n_lon / 2))).value();
  const double d = (ys.array() - roll_lon(y, c.n_lon / 2).array()).abs().maxCoeff();
  return {d <= 1e-5, "desk model 8x40x80, C1=128, offset heads active, max diff after W/2 shift " + num(d)};
}

// -- 4 ------------------------------------------------------------------------

Outcome metric_algebra() {
  std::vector<std::string> bad;
  double worst_mean = 0;
  for (Index n : {8, 40, 180, 720}) {
    const auto w = latitude_weights(GeoGrid::global(n, 2 * n, {}));
    worst_mean = std::max(worst_mean, std::abs(w.weights.mean() - 1.0));
  }
  if (!(worst_mean <= 1e-12)) bad.push_back("lat mean");

  const auto grid = GeoGrid::global(8, 16, {5, 50});
  const auto lw = latitude_weights(grid);
  Rng rng(3);
  Tensor<double> mask({2, 8, 16}, 1.0);
  for (Index i = 0; i < mask.size(); ++i)
    if (rng.uniform() < 0.3) mask[i] = 0.0;
  const auto pred = random_uniform<double>(mask.shape(), rng, -2, 2);
  const auto truth = random_uniform<double>(mask.shape(), rng, -2, 2);
  const auto clim = random_uniform<double>(mask.shape(), rng, -0.5, 0.5);
  auto p2 = pred, t2 = truth;
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) {
      p2[i] = rng.uniform(-1e6, 1e6);
      t2[i] = rng.uniform(-1e6, 1e6);
    }
  }
  const bool land = mll1(p2, t2, mask, lw) == mll1(pred, truth, mask, lw) &&
                    masked_mse(p2, t2, mask, lw) == masked_mse(pred, truth, mask, lw) &&
                    masked_mae(p2, t2, mask, lw) == masked_mae(pred, truth, mask, lw) &&
                    masked_acc(p2, t2, clim, mask, lw) == masked_acc(pred, truth, clim, mask, lw);
  if (!land) bad.push_back("land invariance");

  const double self = masked_acc(truth, truth, clim, mask, lw);
  Tensor<double> anti(truth.shape());
  anti.array() = 2.0 * clim.array() - truth.array();
  const double antipodal = masked_acc(anti, truth, clim, mask, lw);
  if (!(std::abs(self - 1.0) <= 1e-12) || !(std::abs(antipodal + 1.0) <= 1e-12)) bad.push_back("acc");

  // Three latitude rows, a single ocean cell off by 2 in the first row.
  LatWeights three;
  three.weights = Eigen::ArrayXd(3);
  three.weights << 1.2426, 0.9, 0.8574;
  Tensor<double> one({1, 3, 1}), zero({1, 3, 1}), m1({1, 3, 1});
  one[0] = 2.0;
  m1[0] = 1.0;
  const double worked = mll1(one, zero, m1, three);
  if (!(std::abs(worked - 2 * 1.2426 / 3) <= 1e-6)) bad.push_back("worked example");

  std::string detail = "lat-weight |mean-1| " + num(worst_mean) + ", land invariance " + (land ? "exact" : "broken") +
                       ", ACC self " + num(self) + " antipodal " + num(antipodal) + ", worked example " +
                       num(worked);
  for (const auto& b : bad) detail += ", failing: " + b;
  return {bad.empty(), detail};
}

// -- 5 ------------------------------------------------------------------------

Outcome mtp_degeneracy(Dataset& ds) {
  TrainConfig cfg;
  cfg.model.mtp_k = 0;
  cfg.sched.total_steps = 50;
  cfg.seed = 5;
  const auto r = train(ds, cfg);

  auto params = model_init<float>(cfg.model, cfg.seed);
  OptimState<float> st;
  st.hp = cfg.optim;
  const auto cw = ds.target_weights(cfg.model.out_chan);
  std::vector<LossRecord> plain;
  Index step = 0;
  for (const auto& batch : batch_schedule(ds, cfg)) {
    params.zero_grad();
    LossRecord rec;
    rec.step = ++step;
    const float inv = 1.0f / static_cast<float>(batch.size());
    for (Index t : batch) {
      const auto loss = mll1_loss(forward(params, cfg.model, Var<float>(*ds.input(t))),
                                  ds.target(t + 1, cfg.model.out_chan), cw);
      rec.loss_main += static_cast<double>(loss.value()[0]) * inv;
      ad::backward(ad::scale(loss, inv));
    }
    rec.lr = lr_at(step, cfg.sched);
    adamw_step(params, st, rec.lr);
    plain.push_back(rec);
  }
  const bool trace = same_trace(r.trace, plain);
  const bool weights = same_params(r.params, params);
  return {trace && weights && plain.size() == 50,
          std::to_string(plain.size()) + " steps, loss trace " + (trace ? "identical" : "differs") +
              ", final parameters " + (weights ? "identical" : "differ")};
}

// -- 6 and 7 ------------------------------------------------------------------

struct DeskRun {
  TrainConfig cfg;
  TrainResult result;
  double seconds = 0;
  bool ok = false;
};

Outcome desk_learning(Dataset& ds, DeskRun& run, const fs::path& dir) {
  run.cfg.sched.total_steps = 300;
  run.cfg.seed = 1;
  run.cfg.out_dir = dir.string();
  const auto& m = run.cfg.model;

  auto t0 = Clock::now();
  run.result = train(ds, run.cfg);
  run.seconds = seconds_since(t0);

  auto again_cfg = run.cfg;
  again_cfg.out_dir.clear();
  t0 = Clock::now();
  const auto again = train(ds, again_cfg);
  const double rerun_s = seconds_since(t0);

  std::vector<Index> dates;
  const auto starts = ds.window_starts(m.mtp_k);
  for (std::size_t i = 0; i < starts.size(); i += 4) dates.push_back(starts[i]);
  const double before = mean_mll1(model_init<float>(m, run.cfg.seed), m, ds, dates);
  const double after = mean_mll1(run.result.params, m, ds, dates);
  const double ratio = after / before;

  const bool trace = same_trace(run.result.trace, again.trace) && same_params(run.result.params, again.params);
  const bool steps = run.result.trace.size() == 300;
  run.ok = steps;
  const bool ok = steps && ratio <= 0.5 && trace && run.seconds <= 1800.0;
  return {ok, "C=" + std::to_string(m.in_chan) + " " + std::to_string(m.n_lat) + "x" + std::to_string(m.n_lon) +
                  " C1=" + std::to_string(m.embed_dim) + " k=" + std::to_string(m.mtp_k) + ", " +
                  std::to_string(run.result.trace.size()) + " steps, MLL1 over " + std::to_string(dates.size()) +
                  " windows " + num(before) + " -> " + num(after) + " (ratio " + num(ratio) + "), train " +
                  num(run.seconds) + " s on 1 core, rerun " + num(rerun_s) + " s " +
                  (trace ? "bit-identical" : "NOT identical")};
}

Outcome rollout(Dataset& ds, const Prepared& prep, const DeskRun& run) {
  if (!run.ok || run.result.checkpoints.empty()) return {false, "no trained checkpoint"};
  const auto& ckpt = run.result.checkpoints.back();
  const auto mcfg = checkpoint_model_config(ckpt);
  ModelForecaster model(load_inference_params(ckpt, mcfg), mcfg, ds.channel_mask());

  const Index leads = 15, out = mcfg.out_chan;
  const auto tmask = ds.target_mask(out);
  std::vector<Index> inits;
  for (Index t = 100; t + leads < ds.n_dates(); t += 10) inits.push_back(t);
  bool finite = true, land = true;
  for (Index t0 : inits) {
    const auto steps = model.forecast(*ds.input(t0), t0, leads);
    if (static_cast<Index>(steps.size()) != leads) finite = false;
    for (const auto& y : steps) {
      finite = finite && y.array().isFinite().all();
      for (Index i = 0; i < y.size(); ++i)
        if (tmask[i] == 0.0f && y[i] != 0.0f) land = false;
    }
  }
  EvalConfig ec;
  ec.leads = leads;
  ec.out_chan = out;
  ec.init_dates = inits;
  const auto summary = evaluate(model, ds, prep.clim, ec).lead_summary();
  const double m1 = summary.front().mse, m15 = summary.back().mse;
  return {finite && land && m15 >= m1,
          std::to_string(inits.size()) + " rollouts of 15 steps from " + fs::path(ckpt).filename().string() +
              ", outputs " + (finite ? "finite" : "NON-FINITE") + ", land " + (land ? "exactly 0" : "nonzero") +
              ", masked MSE lead 1 " + num(m1) + " lead 15 " + num(m15)};
}

// -- 8 ------------------------------------------------------------------------

class QueueLru {
 public:
  explicit QueueLru(std::size_t cap) : cap_(cap) {}
  std::optional<std::int64_t> access(std::int64_t key) {
    auto it = std::find(order_.begin(), order_.end(), key);
    if (it != order_.end()) {
      order_.erase(it);
      order_.push_front(key);
      return std::nullopt;
    }
    std::optional<std::int64_t> ev;
    if (order_.size() == cap_) {
      ev = order_.back();
      order_.pop_back();
    }
    order_.push_front(key);
    return ev;
  }

 private:
  std::size_t cap_;
  std::list<std::int64_t> order_;
};

Outcome cache() {
  Rng rng(2024);
  Index mismatches = 0, evictions = 0;
  for (std::size_t cap : {1u, 3u, 16u, 64u, 200u}) {
    CounterLru lru(cap, CacheMode::aging);
    QueueLru ref(cap);
    for (int i = 0; i < 10000; ++i) {
      const auto key = static_cast<std::int64_t>(rng.below(4 * cap + 3) / (1 + rng.below(2)));
      const auto got = lru.access(key).evicted;
      if (got != ref.access(key)) ++mismatches;
      if (got) ++evictions;
    }
  }

  const std::vector<std::int64_t> abac{1, 2, 1, 3};
  const auto ev = simulate_cache(2, CacheMode::aging, abac);
  std::vector<std::int64_t> h;
  for (const auto& e : ev) h.push_back(e.h_value);
  const bool fixture = h == std::vector<std::int64_t>{0, 0, 1, 1} && !ev[0].hit && !ev[1].hit && ev[2].hit &&
                       !ev[3].hit && ev[3].evicted == std::optional<std::int64_t>(2);

  const Index n = 160;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n)), trace;
  std::iota(order.begin(), order.end(), 0);
  Rng shuf(8);
  for (int epoch = 0; epoch < 2; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuf.below(i + 1)]);
    trace.insert(trace.end(), order.begin(), order.end());
  }
  const auto two = simulate_cache(static_cast<std::size_t>(n), CacheMode::aging, trace);
  Index second = 0;
  for (std::size_t i = static_cast<std::size_t>(n); i < two.size(); ++i) second += two[i].hit;
  const double rate = static_cast<double>(second) / static_cast<double>(n);

  return {mismatches == 0 && fixture && rate == 1.0,
          "5 traces x 10^4 requests, " + std::to_string(evictions) + " evictions, " + std::to_string(mismatches) +
              " mismatches vs queue LRU; [A,B,A,C] h = " + std::to_string(h[0]) + "," + std::to_string(h[1]) + "," +
              std::to_string(h[2]) + "," + std::to_string(h[3]) + " evicts B " + (fixture ? "ok" : "WRONG") +
              "; second-epoch hit rate " + num(rate)};
}

// -- 9 ------------------------------------------------------------------------

Outcome diagnostics() {
  constexpr Index H = 40, W = 80;
  std::vector<std::string> bad;
  const MaskPlane ocean = MaskPlane::Constant(H, W, true);

  Plane<double> ssh(H, W);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) ssh(i, j) = 0.2 * std::exp(-((i - 20.0) * (i - 20.0) + (j - 30.0) * (j - 30.0)) / 18.0);
  const auto se = detect_eddies_ssh(ssh, ocean);
  const bool ssh_ok = se.size() == 1 && se[0].polarity == Polarity::anticyclonic &&
                      std::abs(se[0].center.h - 20) <= 1 && std::abs(se[0].center.w - 30) <= 1;
  if (!ssh_ok) bad.push_back("ssh bump");

  // Clockwise Rankine vortex centered between cells.
  Plane<double> u(H, W), v(H, W);
  const double ch = 19.5, cw = 40.5, core = 5, omega = -0.02;
  for (Index i = 0; i < H; ++i) {
    for (Index j = 0; j < W; ++j) {
      const double x = j - cw, y = i - ch, r = std::hypot(x, y);
      const double vt = r <= core ? omega * r : omega * core * core / r;
      u(i, j) = -vt * y / r;
      v(i, j) = vt * x / r;
    }
  }
  const auto ue = detect_eddies_uv(u, v, ocean);
  const bool uv_ok = ue.size() == 1 && ue[0].polarity == Polarity::clockwise &&
                     std::abs(ue[0].center.h - ch) <= 1 && std::abs(ue[0].center.w - cw) <= 1;
  if (!uv_ok) bad.push_back("rankine");

  std::vector<double> lat, lon;
  for (Index i = 0; i < 24; ++i) lat.push_back(-5.0 + 0.25 * static_cast<double>(i));
  for (Index j = 0; j < 48; ++j) lon.push_back(-180.0 + 7.5 * static_cast<double>(j));
  const GeoGrid g(lat, lon, {5});
  const MaskPlane sea = MaskPlane::Constant(24, 48, true);
  const double s = 0.07, dy = front_dy_km(g);
  Plane<double> lin(24, 48);
  for (Index h = 0; h < 24; ++h) lin.row(h).setConstant(12.0 + s * static_cast<double>(h));
  const double lin_err = (sst_gradient(lin, g, sea) - s / dy).abs().maxCoeff();
  if (!(lin_err <= 1e-6)) bad.push_back("linear sst");
  Plane<double> jump = Plane<double>::Constant(24, 48, 15.0);
  jump.bottomRows(12).setConstant(16.0);
  const auto fronts = detect_fronts(jump, g, sea);
  const double jg = fronts.gradient(11, 0);
  if (!(std::abs(jg - 0.018) <= 0.0005 && jg > 0.014 && fronts.values(11, 0) && fronts.values(12, 0)))
    bad.push_back("step jump");

  MaskPlane truth = MaskPlane::Constant(4, 5, false), pred = truth;
  truth.row(1).setConstant(true);
  truth.row(2).setConstant(true);
  pred.row(1).setConstant(true);
  if (!(iou(pred, truth) == 0.5 && f1(pred, truth) == 2.0 / 3.0)) bad.push_back("iou/f1");

  const auto cp = cpue_grid({{5, 2, 6, 2}, {15, 12, 2, 1}, {95, 0, 1, 1}}, GeoGrid::global(18, 36, {5}));
  const bool cpue_ok = cp.rejected == 1 && cp.cpue(9, 18) == 3.0 && cp.fishing(9, 18) && cp.cpue(10, 19) == 2.0 &&
                       !cp.fishing(10, 19) &&
                       cpue_csv(cp) == "lat_idx,lon_idx,catch_tons,effort,cpue,fishing\n9,18,6,2,3,1\n10,19,2,1,2,0\n";
  if (!cpue_ok) bad.push_back("cpue");

  std::string detail = "ssh eddies " + std::to_string(se.size()) +
                       (se.empty() ? "" : " " + to_string(se[0].polarity) + " at (" + std::to_string(se[0].center.h) +
                                              "," + std::to_string(se[0].center.w) + ")") +
                       "; uv eddies " + std::to_string(ue.size()) +
                       (ue.empty() ? "" : " " + to_string(ue[0].polarity) + " at (" + std::to_string(ue[0].center.h) +
                                              "," + std::to_string(ue[0].center.w) + ")") +
                       "; linear-sst err " + num(lin_err) + "; jump gradient " + num(jg) + " C/km; IoU/F1/CPUE " +
                       (cpue_ok && iou(pred, truth) == 0.5 ? "exact" : "off");
  for (const auto& b : bad) detail += ", failing: " + b;
  return {bad.empty(), detail};
}

// -- 10 -----------------------------------------------------------------------

Outcome schedule_optimizer() {
  ScheduleConfig sc;
  sc.total_steps = 300;
  const bool ends = lr_at(sc.warmup_steps, sc) == sc.lr_init && lr_at(sc.total_steps, sc) == sc.lr_min;

  Rng rng(4);
  auto p = random_uniform<double>({3, 4, 5}, rng, -2, 2);
  const auto p0 = p;
  const Tensor<double> g(p.shape());
  std::map<std::string, Tensor<double>*> params{{"w", &p}};
  const std::map<std::string, const Tensor<double>*> grads{{"w", &g}};
  OptimState<double> st;
  st.hp.weight_decay = 0.1;
  const double lr = 1e-3;
  adamw_step(params, grads, st, lr);
  const double err1 = (p.array() - (1 - lr * 0.1) * p0.array()).abs().maxCoeff();
  adamw_step(params, grads, st, lr);
  const double err2 = (p.array() - (1 - lr * 0.1) * (1 - lr * 0.1) * p0.array()).abs().maxCoeff();
  const double err = std::max(err1, err2);
  return {ends && err <= 1e-12, std::string("lr_at endpoints ") + (ends ? "exact" : "off") +
                                    ", zero-grad decay max error over 2 steps " + num(err)};
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  std::printf("desk acceptance run\n");
  std::fflush(stdout);

  report(1, "gradient checks", gradients);
  report(2, "LC-DCN zero-offset equivalence", zero_offset);
  report(3, "longitude shift-equivariance", shift_equivariance);
  report(4, "loss and metric algebra", metric_algebra);

  const Prepared prep = preprocess(synth_raw(SynthRawOptions{}));
  auto ds = make_dataset(prep, 64);
  report(5, "mtp_k = 0 equals plain training", [&] { return mtp_degeneracy(ds); });

  const auto dir = fs::temp_directory_path() / "kp_acceptance";
  fs::remove_all(dir);
  DeskRun run;
  report(6, "desk-scale learning", [&] { return desk_learning(ds, run, dir); });
  report(7, "rollout stability", [&] { return rollout(ds, prep, run); });

  report(8, "LRU cache", cache);
  report(9, "diagnostics oracles", diagnostics);
  report(10, "schedule and optimizer", schedule_optimizer);

  std::printf("%s: %d of 10 criteria failed, %.1f s total\n", failures ? "FAIL" : "PASS", failures, seconds_since(t0));
  return failures ? 1 : 0;
}
