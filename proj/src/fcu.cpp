#include "rap/fcu.hpp"

#include <algorithm>
#include <cmath>

namespace rap {

const char* label_name(Label l) {
  switch (l) {
    case Label::env: return "env";
    case Label::rpl: return "rpl";
    case Label::pl: return "pl";
    case Label::fcu_check: return "fcu-check";
    case Label::safety_violation: return "safety-violation";
  }
  return "?";
}

RiskSet::RiskSet(const GridGeometry& g, int steps)
    : rows_(g.rows), cols_(g.cols), steps_(steps) {
  if (steps <= 0) throw std::invalid_argument("risk set needs at least one step");
  mask_.assign(static_cast<std::size_t>(steps) * g.n_cells(), 0);
}

void RiskSet::insert(int step, CellId c) {
  if (step < 0 || step >= steps_) throw std::out_of_range("risk set step out of range");
  if (c.row < 0 || c.row >= rows_ || c.col < 0 || c.col >= cols_) {
    throw std::out_of_range("risk set cell outside grid");
  }
  mask_[static_cast<std::size_t>(step) * rows_ * cols_ + c.row * cols_ + c.col] = 1;
}

bool RiskSet::contains(int step, CellId c) const {
  if (step < 0 || step >= steps_) throw std::out_of_range("risk set step out of range");
  if (c.row < 0 || c.row >= rows_ || c.col < 0 || c.col >= cols_) {
    throw std::out_of_range("risk set cell outside grid");
  }
  return mask_[static_cast<std::size_t>(step) * rows_ * cols_ + c.row * cols_ + c.col] != 0;
}

bool RiskSet::empty() const {
  return std::all_of(mask_.begin(), mask_.end(), [](char m) { return m == 0; });
}

RiskSet build_risk_set(const OccupancyForecast& forecast, const GridGeometry& g,
                       const RiskThresholds& th, int lookahead_steps) {
  if (!(th.p_un > th.p_hr && th.p_hr > th.p_lr && th.p_lr > 0.0)) {
    throw std::invalid_argument("risk set needs p_un > p_hr > p_lr > 0");
  }
  if (forecast.grids.empty()) throw std::invalid_argument("risk set needs a forecast");
  if (lookahead_steps < 0) throw std::invalid_argument("negative risk lookahead");

  RiskSet risk(g, lookahead_steps + 1);
  for (int k = 0; k <= lookahead_steps; ++k) {
    const auto& grid = forecast.grids[std::min<std::size_t>(
        static_cast<std::size_t>(k), forecast.grids.size() - 1)];
    for (int r = 0; r < g.rows; ++r) {
      for (int c = 0; c < g.cols; ++c) {
        const double p = grid[static_cast<std::size_t>(r) * g.cols + c];
        if (g.is_edge_row(r) || p >= th.p_hr) risk.insert(k, {r, c});
        if (p >= th.p_un) {
          if (r > 0) risk.insert(k, {r - 1, c});
          if (r + 1 < g.rows) risk.insert(k, {r + 1, c});
        }
      }
    }
  }
  return risk;
}

ReachTube reach_tube(const ReferenceTrajectory& ref, double tube_radius,
                     const GridGeometry& g, int horizon_steps, double t_start,
                     double step_dt, double window_x0) {
  if (tube_radius < 0.0) throw std::invalid_argument("tube radius must be >= 0");
  if (horizon_steps < 0) throw std::invalid_argument("negative tube horizon");
  if (!(step_dt > 0.0)) throw std::invalid_argument("tube step must be positive");

  ReachTube tube;
  tube.cells.resize(static_cast<std::size_t>(horizon_steps) + 1);
  for (int k = 0; k <= horizon_steps; ++k) {
    const double t = t_start + k * step_dt;
    const double x = ref.x_at(t) - window_x0;
    const double y = ref.y_at(t);
    auto& cells = tube.cells[static_cast<std::size_t>(k)];
    if (tube_radius == 0.0) {
      CellId c;
      if (g.cell_at(x, y, c)) cells.push_back(c);
      continue;
    }
    const int r_lo = std::max(
        0, static_cast<int>(std::floor((y - tube_radius - g.y_min()) / g.cell_width)));
    const int r_hi = std::min(
        g.rows - 1,
        static_cast<int>(std::floor((y + tube_radius - g.y_min()) / g.cell_width)));
    const int c_lo =
        std::max(0, static_cast<int>(std::floor((x - tube_radius) / g.cell_length)));
    const int c_hi = std::min(
        g.cols - 1, static_cast<int>(std::floor((x + tube_radius) / g.cell_length)));
    for (int r = r_lo; r <= r_hi; ++r) {
      const double y0 = g.y_min() + r * g.cell_width;
      const double dy = std::max({y0 - y, 0.0, y - (y0 + g.cell_width)});
      for (int c = c_lo; c <= c_hi; ++c) {
        const double x0 = c * g.cell_length;
        const double dx = std::max({x0 - x, 0.0, x - (x0 + g.cell_length)});
        if (dx * dx + dy * dy < tube_radius * tube_radius) cells.push_back({r, c});
      }
    }
  }
  return tube;
}

FeasibilityResult check_feasible(const ReachTube& tube, const RiskSet& risk) {
  if (static_cast<int>(tube.cells.size()) > risk.steps()) {
    throw std::invalid_argument("tube horizon exceeds risk horizon");
  }
  for (std::size_t k = 0; k < tube.cells.size(); ++k) {
    for (const CellId& c : tube.cells[k]) {
      if (risk.contains(static_cast<int>(k), c)) {
        return {false, c, static_cast<int>(k)};
      }
    }
  }
  return {};
}

ExecutionFragment make_fragment(const std::vector<Event>& events, double t0, double t1) {
  if (!(t1 >= t0)) throw std::invalid_argument("fragment span is reversed");
  ExecutionFragment f;
  f.boundaries.push_back(t0);
  for (const Event& e : events) {
    if (e.t > t0 && e.t < t1) {
      f.boundaries.push_back(e.t);
      f.labels.push_back(e.label);
    }
  }
  f.boundaries.push_back(t1);
  return f;
}

namespace {

long long ticks_of(double tau, double dt, const char* what) {
  const long long ticks = std::llround(tau / dt);
  if (ticks < 1 || std::abs(static_cast<double>(ticks) * dt - tau) > 1e-9 * tau) {
    throw std::invalid_argument(std::string(what) + " must be a whole number of ticks");
  }
  return ticks;
}

}  // namespace

Automaton::Automaton(const Clocks& clocks, double dt) : clocks_(clocks), dt_(dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("tick width must be positive");
  if (!(clocks.tau_fcu > 0.0) || !(clocks.tau_fcu < clocks.tau_env)) {
    throw std::invalid_argument("need 0 < tau_fcu < tau_env");
  }
  if (!(clocks.tau_env <= clocks.tau_safe)) {
    throw std::invalid_argument("need tau_env <= tau_safe");
  }
  if (!(dt <= clocks.tau_fcu)) throw std::invalid_argument("need dt <= tau_fcu");
  env_ticks_ = ticks_of(clocks.tau_env, dt, "tau_env");
  pl_ticks_ = ticks_of(clocks.tau_pl, dt, "tau_pl");
  check_ticks_ = ticks_of(clocks.tau_fcu, dt, "tau_fcu");
  safe_ticks_ = ticks_of(clocks.tau_safe, dt, "tau_safe");
  if (pl_ticks_ % env_ticks_ != 0) {
    throw std::invalid_argument("tau_pl must be a multiple of tau_env");
  }
}

std::vector<Label> Automaton::initial_labels() const {
  return {Label::env, Label::pl, Label::fcu_check};
}

std::vector<Label> Automaton::step() {
  ++tick_;
  std::vector<Label> fired;
  if (tick_ % env_ticks_ == 0) fired.push_back(Label::env);
  if (pending_rpl_) {
    fired.push_back(Label::rpl);
    pending_rpl_ = false;
    in_safety_ = true;
    safety_until_ = tick_ + safe_ticks_;
  }
  if (in_safety_) {
    if (tick_ >= safety_until_) {
      in_safety_ = false;
      fired.push_back(Label::pl);  // recovery plan at safety-mode end
    }
  } else if (tick_ % pl_ticks_ == 0) {
    fired.push_back(Label::pl);
  }
  if (!in_safety_ && tick_ % check_ticks_ == 0) fired.push_back(Label::fcu_check);
  return fired;
}

void Automaton::set_infeasible() {
  if (!in_safety_) pending_rpl_ = true;
}

ReferenceTrajectory safety_mode(const EgoState& ego, const RiskSet& risk,
                                const GridGeometry& g, const Clocks& clocks,
                                double speed, double t0, double window_x0) {
  CellId cur;
  if (!g.cell_at(ego.X - window_x0, ego.Y, cur)) {
    throw std::invalid_argument("safety mode: ego outside the window");
  }
  const int step = std::min(1, risk.steps() - 1);
  const int ahead = std::min(cur.col + 1, g.cols - 1);
  const auto blocked = [&](int row) {
    return g.is_edge_row(row) || risk.contains(step, {row, ahead});
  };

  if (!blocked(cur.row)) {
    return ReferenceTrajectory(t0, clocks.tau_safe, ego.X, speed, {ego.Y, ego.Y});
  }
  const double mid = 0.5 * (g.rows - 1);
  int target = -1;
  for (int cand : {cur.row + 1, cur.row - 1}) {
    if (cand < 0 || cand >= g.rows || blocked(cand)) continue;
    if (target < 0 || std::abs(cand - mid) < std::abs(target - mid)) target = cand;
  }
  if (target < 0) {
    throw NoSafeOverride("straight and both adjacent rows blocked ahead");
  }
  const double target_y = g.y_min() + (target + 0.5) * g.cell_width;
  return ReferenceTrajectory(t0, clocks.tau_safe, ego.X, speed, {ego.Y, target_y});
}

}  // namespace rap
