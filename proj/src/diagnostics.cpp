#include "kunpeng/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace kp {

namespace {

Index wrap(Index w, Index n) { return ((w % n) + n) % n; }

void require_plane_shape(const MaskPlane& ocean, Index h, Index w, const char* what) {
  if (ocean.rows() != h || ocean.cols() != w) {
    throw ShapeError(std::string(what) + ": mask is " + std::to_string(ocean.rows()) + "x" +
                     std::to_string(ocean.cols()) + ", field is " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double lon_spacing_deg(const GeoGrid& grid) {
  const auto& lon = grid.lon_deg();
  return lon.size() > 1 ? std::abs(lon[1] - lon[0]) : grid.lat_spacing_deg();
}

}  // namespace

Plane<double> plane_of(const Tensor<float>& t, Index c) {
  if (t.rank() != 3 || c < 0 || c >= t.dim(0)) {
    throw ShapeError("plane_of: channel " + std::to_string(c) + " of " + shape_string(t.shape()));
  }
  const Index H = t.dim(1), W = t.dim(2);
  return Eigen::Map<const Plane<float>>(t.data() + c * H * W, H, W).cast<double>();
}

MaskPlane surface_ocean(const OceanMask& mask) { return plane_of(mask.values(), 0) != 0.0; }

FieldTensor plane_field(const Plane<double>& p, const std::string& variable) {
  Tensor<float> t({1, p.rows(), p.cols()});
  Eigen::Map<Plane<float>>(t.data(), p.rows(), p.cols()) = p.cast<float>();
  return FieldTensor(std::move(t), {{variable, 0}});
}

std::string to_string(Polarity p) {
  switch (p) {
    case Polarity::cyclonic: return "cyclonic";
    case Polarity::anticyclonic: return "anticyclonic";
    case Polarity::clockwise: return "clockwise";
    case Polarity::counterclockwise: return "counterclockwise";
  }
  return "?";
}

// -- SSH eddies ---------------------------------------------------------------

void SshEddyParams::validate() const {
  if (window < 3 || window % 2 == 0) throw std::invalid_argument("eddy window must be odd and >= 3");
  if (!(step_m > 0) || !std::isfinite(step_m)) throw std::invalid_argument("eddy step_m must be positive");
  if (min_cells < 1 || max_cells < min_cells) throw std::invalid_argument("eddy cell bounds need 1 <= min_cells <= max_cells");
}

namespace {

struct Grown {
  std::vector<Cell> cells;
  bool other_extremum = false;
  bool closed = false;  // some ocean cell outside the region borders it
};

// Region of ocean cells 4-connected to c with sign * (ssh - ssh[c]) >= -level.
Grown grow_region(const Plane<double>& ssh, const MaskPlane& ocean, const Plane<int>& extremum, Cell c,
                  int sign, double level, Index max_cells, Plane<int>& seen, int stamp) {
  const Index H = ssh.rows(), W = ssh.cols();
  const double center = ssh(c.h, c.w);
  Grown g;
  std::vector<Cell> stack{c};
  seen(c.h, c.w) = stamp;
  while (!stack.empty()) {
    const Cell x = stack.back();
    stack.pop_back();
    g.cells.push_back(x);
    if (extremum(x.h, x.w) != 0 && !(x == c)) g.other_extremum = true;
    if (static_cast<Index>(g.cells.size()) > max_cells || g.other_extremum) return g;
    const Cell nbr[4] = {{x.h - 1, x.w}, {x.h + 1, x.w}, {x.h, wrap(x.w - 1, W)}, {x.h, wrap(x.w + 1, W)}};
    for (const Cell& n : nbr) {
      if (n.h < 0 || n.h >= H || !ocean(n.h, n.w) || seen(n.h, n.w) == stamp) continue;
      if (sign * (ssh(n.h, n.w) - center) >= -level) {
        seen(n.h, n.w) = stamp;
        stack.push_back(n);
      } else {
        g.closed = true;
      }
    }
  }
  return g;
}

}  // namespace

std::vector<EddyRecord> detect_eddies_ssh(const Plane<double>& ssh, const MaskPlane& ocean,
                                          const SshEddyParams& params) {
  params.validate();
  const Index H = ssh.rows(), W = ssh.cols();
  require_plane_shape(ocean, H, W, "detect_eddies_ssh");
  const Index half = params.window / 2;

  Plane<int> extremum = Plane<int>::Zero(H, W);
  for (Index h = 0; h < H; ++h) {
    for (Index w = 0; w < W; ++w) {
      if (!ocean(h, w) || !std::isfinite(ssh(h, w))) continue;
      bool is_max = true, is_min = true, any = false;
      for (Index dh = -half; dh <= half && (is_max || is_min); ++dh) {
        const Index hh = h + dh;
        if (hh < 0 || hh >= H) continue;
        for (Index dw = -half; dw <= half; ++dw) {
          const Index ww = wrap(w + dw, W);
          if ((dh == 0 && ww == w) || !ocean(hh, ww)) continue;
          any = true;
          if (ssh(hh, ww) >= ssh(h, w)) is_max = false;
          if (ssh(hh, ww) <= ssh(h, w)) is_min = false;
        }
      }
      if (any) extremum(h, w) = is_max ? 1 : is_min ? -1 : 0;
    }
  }

  std::vector<EddyRecord> out;
  Plane<int> seen = Plane<int>::Zero(H, W);
  int stamp = 0;
  for (Index h = 0; h < H; ++h) {
    for (Index w = 0; w < W; ++w) {
      const int sign = extremum(h, w);
      if (sign == 0) continue;
      std::vector<Cell> best;
      Index best_k = 0;
      for (Index k = 1;; ++k) {
        auto g = grow_region(ssh, ocean, extremum, {h, w}, sign, static_cast<double>(k) * params.step_m,
                             params.max_cells, seen, ++stamp);
        if (g.other_extremum || static_cast<Index>(g.cells.size()) > params.max_cells || !g.closed) break;
        best = std::move(g.cells);
        best_k = k;
      }
      if (static_cast<Index>(best.size()) < params.min_cells) continue;
      std::sort(best.begin(), best.end());
      out.push_back({{h, w},
                     sign > 0 ? Polarity::anticyclonic : Polarity::cyclonic,
                     std::move(best),
                     static_cast<double>(best_k) * params.step_m});
    }
  }
  return out;
}

// -- UV eddies ----------------------------------------------------------------

void UvEddyParams::validate() const {
  if (a < 1) throw std::invalid_argument("eddy parameter a must be >= 1");
  if (b < 1) throw std::invalid_argument("eddy parameter b must be >= 1");
  if (max_radius < 1) throw std::invalid_argument("eddy max_radius must be >= 1");
}

namespace {

int sgn(double x) { return (x > 0) - (x < 0); }

// Square ring at Chebyshev radius r, walked counterclockwise from the
// south-west corner (east is +w, north is +h).
std::vector<std::pair<Index, Index>> ring_offsets(Index r) {
  std::vector<std::pair<Index, Index>> o;
  for (Index dw = -r; dw < r; ++dw) o.emplace_back(-r, dw);
  for (Index dh = -r; dh < r; ++dh) o.emplace_back(dh, r);
  for (Index dw = r; dw > -r; --dw) o.emplace_back(r, dw);
  for (Index dh = r; dh > -r; --dh) o.emplace_back(dh, -r);
  return o;
}

}  // namespace

std::vector<EddyRecord> detect_eddies_uv(const Plane<double>& u, const Plane<double>& v,
                                         const MaskPlane& ocean, const UvEddyParams& params) {
  params.validate();
  const Index H = u.rows(), W = u.cols();
  if (v.rows() != H || v.cols() != W) throw ShapeError("detect_eddies_uv: u and v shapes differ");
  require_plane_shape(ocean, H, W, "detect_eddies_uv");

  const auto valid = [&](Index h, Index w) {
    return h >= 0 && h < H && ocean(h, wrap(w, W)) && std::isfinite(u(h, wrap(w, W))) &&
           std::isfinite(v(h, wrap(w, W)));
  };
  const auto U = [&](Index h, Index w) { return u(h, wrap(w, W)); };
  const auto V = [&](Index h, Index w) { return v(h, wrap(w, W)); };
  const auto speed = [&](Index h, Index w) { return std::hypot(U(h, w), V(h, w)); };

  // Signed rotation sense at the center, or 0 when a constraint fails.
  const auto center_sense = [&](Index h, Index w) -> int {
    for (Index j = -params.a; j <= params.a; ++j) {
      if (!valid(h, w + j) || !valid(h + j, w)) return 0;
    }
    const int sx = sgn(V(h, w + 1));
    if (sx == 0 || sgn(V(h, w - 1)) != -sx) return 0;
    const int sy = -sgn(U(h + 1, w));
    if (sy == 0 || sgn(U(h - 1, w)) != -sgn(U(h + 1, w)) || sy != sx) return 0;
    for (Index j = 1; j < params.a; ++j) {
      if (!(std::abs(V(h, w + j + 1)) > std::abs(V(h, w + j))) ||
          !(std::abs(V(h, w - j - 1)) > std::abs(V(h, w - j))) ||
          !(std::abs(U(h + j + 1, w)) > std::abs(U(h + j, w))) ||
          !(std::abs(U(h - j - 1, w)) > std::abs(U(h - j, w))))
        return 0;
    }
    // Speed minimum within radius b; ties go to the first cell in row-major order.
    const double s0 = speed(h, w);
    for (Index dh = -params.b; dh <= params.b; ++dh) {
      for (Index dw = -params.b; dw <= params.b; ++dw) {
        if ((dh == 0 && dw == 0) || !valid(h + dh, w + dw)) continue;
        const double s = speed(h + dh, w + dw);
        const bool earlier = (h + dh) * W + wrap(w + dw, W) < h * W + w;
        if (s < s0 || (s == s0 && earlier)) return 0;
      }
    }
    return sx;
  };

  // A ring passes when every cell turns in the center's sense and the flow
  // direction winds exactly once around it.
  const auto ring_coherent = [&](Index h, Index w, Index r, int sense) {
    const auto ring = ring_offsets(r);
    double winding = 0, prev = 0;
    for (std::size_t i = 0; i <= ring.size(); ++i) {
      const auto [dh, dw] = ring[i % ring.size()];
      if (!valid(h + dh, w + dw)) return false;
      const double uu = U(h + dh, w + dw), vv = V(h + dh, w + dw);
      if (sgn(static_cast<double>(dw) * vv - static_cast<double>(dh) * uu) != sense) return false;
      const double ang = std::atan2(vv, uu);
      if (i > 0) winding += std::remainder(ang - prev, 2 * std::numbers::pi);
      prev = ang;
    }
    return std::abs(winding - 2 * std::numbers::pi) < std::numbers::pi;
  };

  std::vector<EddyRecord> out;
  for (Index h = 0; h < H; ++h) {
    for (Index w = 0; w < W; ++w) {
      if (!valid(h, w)) continue;
      const bool claimed = std::any_of(out.begin(), out.end(), [&](const EddyRecord& e) {
        return std::binary_search(e.cells.begin(), e.cells.end(), Cell{h, w});
      });
      if (claimed) continue;
      const int sense = center_sense(h, w);
      if (sense == 0) continue;
      Index R = 0;
      while (R < params.max_radius && ring_coherent(h, w, R + 1, sense)) ++R;
      if (R == 0) continue;
      EddyRecord e;
      e.center = {h, w};
      e.polarity = sense > 0 ? Polarity::counterclockwise : Polarity::clockwise;
      for (Index dh = -R; dh <= R; ++dh) {
        for (Index dw = -R; dw <= R; ++dw) {
          e.cells.push_back({h + dh, wrap(w + dw, W)});
          e.amplitude = std::max(e.amplitude, speed(h + dh, w + dw));
        }
      }
      std::sort(e.cells.begin(), e.cells.end());
      e.cells.erase(std::unique(e.cells.begin(), e.cells.end()), e.cells.end());
      out.push_back(std::move(e));
    }
  }
  return out;
}

Plane<double> eddy_labels(const std::vector<EddyRecord>& eddies, Index n_lat, Index n_lon) {
  Plane<double> lab = Plane<double>::Zero(n_lat, n_lon);
  for (const auto& e : eddies) {
    const double s =
        e.polarity == Polarity::anticyclonic || e.polarity == Polarity::counterclockwise ? 1.0 : -1.0;
    for (const auto& c : e.cells) lab(c.h, c.w) = s;
  }
  return lab;
}

std::string eddy_csv(const std::vector<EddyRecord>& eddies) {
  std::string s = "center_lat_idx,center_lon_idx,polarity,n_cells,amplitude\n";
  for (const auto& e : eddies) {
    s += std::to_string(e.center.h) + "," + std::to_string(e.center.w) + "," + to_string(e.polarity) + "," +
         std::to_string(e.cells.size()) + "," + fmt(e.amplitude) + "\n";
  }
  return s;
}

// -- fronts -------------------------------------------------------------------

void FrontParams::validate() const {
  if (!(percentile > 0 && percentile < 100)) throw std::invalid_argument("front percentile must be in (0, 100)");
}

double front_dy_km(const GeoGrid& grid) { return 27.8 * grid.lat_spacing_deg() / 0.25; }

double front_dx_km(const GeoGrid& grid, Index h) {
  return 27.8 * lon_spacing_deg(grid) / 0.25 * std::cos(grid.lat_deg().at(h) * std::numbers::pi / 180.0);
}

Plane<double> sst_gradient(const Plane<double>& sst, const GeoGrid& grid, const MaskPlane& ocean) {
  const Index H = sst.rows(), W = sst.cols();
  if (grid.n_lat() != H || grid.n_lon() != W) throw ShapeError("sst_gradient: grid does not match field");
  require_plane_shape(ocean, H, W, "sst_gradient");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double dy = front_dy_km(grid);

  // One axis: centered, one-sided, or NaN when neither neighbor is usable.
  const auto diff = [](bool lo, bool hi, double xl, double x0, double xh, double d) {
    if (lo && hi) return (xh - xl) / (2 * d);
    if (hi) return (xh - x0) / d;
    if (lo) return (x0 - xl) / d;
    return std::numeric_limits<double>::quiet_NaN();
  };

  Plane<double> g = Plane<double>::Constant(H, W, nan);
  for (Index h = 0; h < H; ++h) {
    const double dx = front_dx_km(grid, h);
    for (Index w = 0; w < W; ++w) {
      if (!ocean(h, w)) continue;
      const bool s = h > 0 && ocean(h - 1, w), n = h + 1 < H && ocean(h + 1, w);
      const Index we = wrap(w - 1, W), ea = wrap(w + 1, W);
      const bool west = W > 1 && ocean(h, we), east = W > 1 && ocean(h, ea);
      const double gy = diff(s, n, s ? sst(h - 1, w) : 0, sst(h, w), n ? sst(h + 1, w) : 0, dy);
      const double gx = diff(west, east, sst(h, we), sst(h, w), sst(h, ea), dx);
      g(h, w) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return g;
}

FrontMask detect_fronts(const Plane<double>& sst, const GeoGrid& grid, const MaskPlane& ocean,
                        const FrontParams& params) {
  params.validate();
  FrontMask f;
  f.gradient = sst_gradient(sst, grid, ocean);
  f.values = MaskPlane::Constant(sst.rows(), sst.cols(), false);
  std::vector<double> vals;
  for (Index i = 0; i < f.gradient.size(); ++i) {
    if (std::isfinite(f.gradient(i))) vals.push_back(f.gradient(i));
  }
  if (vals.empty()) return f;
  std::sort(vals.begin(), vals.end());
  const double pos = params.percentile / 100.0 * static_cast<double>(vals.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, vals.size() - 1);
  f.threshold_used = vals[lo] + (pos - static_cast<double>(lo)) * (vals[hi] - vals[lo]);
  // All-equal gradients carry no front; NaN compares false.
  f.values = f.gradient >= f.threshold_used && f.gradient > vals.front();
  return f;
}

std::string front_csv(const FrontMask& fronts) {
  std::string s = "lat_idx,lon_idx,gradient_c_per_km\n";
  for (Index h = 0; h < fronts.values.rows(); ++h) {
    for (Index w = 0; w < fronts.values.cols(); ++w) {
      if (fronts.values(h, w)) s += std::to_string(h) + "," + std::to_string(w) + "," + fmt(fronts.gradient(h, w)) + "\n";
    }
  }
  return s;
}

// -- overlap scores -----------------------------------------------------------

namespace {

std::pair<double, double> overlap(const MaskPlane& pred, const MaskPlane& truth, const char* what) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw ShapeError(std::string(what) + ": mask shapes differ");
  }
  const auto inter = static_cast<double>((pred && truth).count());
  const auto uni = static_cast<double>((pred || truth).count());
  if (uni == 0) throw UndefinedMetricError(std::string(what) + ": both masks are empty");
  return {inter, uni};
}

}  // namespace

double iou(const MaskPlane& pred, const MaskPlane& truth) {
  const auto [inter, uni] = overlap(pred, truth, "iou");
  return inter / uni;
}

double f1(const MaskPlane& pred, const MaskPlane& truth) {
  const auto [inter, uni] = overlap(pred, truth, "f1");
  return 2 * inter / (static_cast<double>(pred.count()) + static_cast<double>(truth.count()));
}

// -- fishing grounds ----------------------------------------------------------

namespace {

// Nearest index on a uniform axis, or -1 when x lies beyond the outer half cells.
Index nearest(const std::vector<double>& axis, double x) {
  if (axis.size() == 1) return 0;
  const double step = axis[1] - axis[0];
  const double k = std::round((x - axis[0]) / step);
  if (k < 0 || k >= static_cast<double>(axis.size())) return -1;
  const auto i = static_cast<Index>(k);
  return std::abs(x - axis[static_cast<std::size_t>(i)]) <= std::abs(step) / 2 ? i : -1;
}

}  // namespace

CpueGrid cpue_grid(const std::vector<CatchEvent>& events, const GeoGrid& grid, double threshold) {
  if (!(threshold > 0) || !std::isfinite(threshold)) throw std::invalid_argument("cpue threshold must be positive");
  const Index H = grid.n_lat(), W = grid.n_lon();
  const auto& lon = grid.lon_deg();
  const double lon_step = lon_spacing_deg(grid);
  const bool global = std::abs(lon_step * static_cast<double>(W) - 360.0) < 1e-9;

  CpueGrid g;
  g.threshold = threshold;
  g.catch_tons = Plane<double>::Zero(H, W);
  g.effort = Plane<double>::Zero(H, W);
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (!(e.catch_tons >= 0) || !(e.hauls >= 0) || !std::isfinite(e.catch_tons) || !std::isfinite(e.hauls)) {
      throw std::invalid_argument("catch event " + std::to_string(i) + ": catch and hauls must be finite and >= 0");
    }
    Index h = std::isfinite(e.lat_deg) ? nearest(grid.lat_deg(), e.lat_deg) : -1;
    Index w = -1;
    if (std::isfinite(e.lon_deg)) {
      if (global) {
        const double x = std::fmod(std::fmod(e.lon_deg - lon[0], 360.0) + 360.0, 360.0);
        w = wrap(static_cast<Index>(std::llround(x / lon_step)), W);
      } else {
        for (double shift : {0.0, 360.0, -360.0}) {
          if (w < 0) w = nearest(lon, e.lon_deg + shift);
        }
      }
    }
    if (h < 0 || w < 0) {
      ++g.rejected;
      continue;
    }
    g.catch_tons(h, w) += e.catch_tons;
    g.effort(h, w) += e.hauls;
  }
  g.cpue = (g.effort > 0).select(g.catch_tons / g.effort, std::numeric_limits<double>::quiet_NaN());
  g.fishing = g.cpue >= threshold;
  return g;
}

std::string cpue_csv(const CpueGrid& g) {
  std::string s = "lat_idx,lon_idx,catch_tons,effort,cpue,fishing\n";
  for (Index h = 0; h < g.effort.rows(); ++h) {
    for (Index w = 0; w < g.effort.cols(); ++w) {
      if (!(g.effort(h, w) > 0)) continue;
      s += std::to_string(h) + "," + std::to_string(w) + "," + fmt(g.catch_tons(h, w)) + "," + fmt(g.effort(h, w)) +
           "," + fmt(g.cpue(h, w)) + "," + (g.fishing(h, w) ? "1" : "0") + "\n";
    }
  }
  return s;
}

ClassificationMetrics classification_metrics(const MaskPlane& pred, const MaskPlane& truth,
                                             const MaskPlane& defined) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw ShapeError("classification_metrics: label shapes differ");
  }
  const bool all = defined.size() == 0;
  if (!all && (defined.rows() != pred.rows() || defined.cols() != pred.cols())) {
    throw ShapeError("classification_metrics: defined mask shape differs");
  }
  ClassificationMetrics m;
  for (Index i = 0; i < pred.size(); ++i) {
    if (!all && !defined(i)) continue;
    const bool p = pred(i), t = truth(i);
    (p ? (t ? m.tp : m.fp) : (t ? m.fn : m.tn)) += 1;
  }
  if (m.tp + m.fn == 0) throw UndefinedMetricError("classification_metrics: no positive truth cells, recall undefined");
  const auto d = [](Index x) { return static_cast<double>(x); };
  m.accuracy = d(m.tp + m.tn) / d(m.tp + m.fp + m.fn + m.tn);
  m.precision = m.tp + m.fp > 0 ? d(m.tp) / d(m.tp + m.fp) : 0.0;
  m.recall = d(m.tp) / d(m.tp + m.fn);
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

}  // namespace kp
