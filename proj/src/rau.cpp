#include "rap/rau.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rap {

namespace {

double rect_overlap_1d(double a_lo, double a_hi, double b_lo, double b_hi) {
  return std::max(0.0, std::min(a_hi, b_hi) - std::max(a_lo, b_lo));
}

void validate_truncexp(const TruncExpParams& p) {
  if (!(p.tau_h <= 0.0))
    throw std::invalid_argument("truncexp: tau_h must be <= 0");
  if (!(p.tau_l > 0.0) || !(p.tau_l > std::abs(p.tau_h)))
    throw std::invalid_argument("truncexp: need tau_l > |tau_h| and tau_l > 0");
  if (!(p.sigma > 0.0))
    throw std::invalid_argument("truncexp: sigma must be positive");
}

int risk_rank(SafetyState s) {
  switch (s) {
    case SafetyState::sa: return 0;
    case SafetyState::lr: return 1;
    case SafetyState::hr: return 2;
    case SafetyState::un: return 3;
    default: return -1;
  }
}

}  // namespace

OccupancyForecast predict_occupancy(const std::vector<ParticipantState>& participants,
                                    const GridGeometry& g, int horizon_steps,
                                    double step_dt, double sigma_growth) {
  if (horizon_steps < 1)
    throw std::invalid_argument("predict_occupancy: horizon must be positive");
  if (!(step_dt > 0.0))
    throw std::invalid_argument("predict_occupancy: step_dt must be positive");
  if (sigma_growth < 0.0)
    throw std::invalid_argument("predict_occupancy: sigma_growth must be >= 0");
  for (const auto& p : participants)
    if (!(p.length > 0.0) || !(p.width > 0.0))
      throw std::invalid_argument("predict_occupancy: non-positive footprint");

  OccupancyForecast f;
  f.horizon_steps = horizon_steps;
  f.step_dt = step_dt;
  f.grids.assign(horizon_steps, std::vector<double>(g.n_cells(), 0.0));

  const double cell_area = g.cell_width * g.cell_length;
  for (int t = 0; t < horizon_steps; ++t) {
    auto& grid = f.grids[t];
    const double dilation = t * step_dt * sigma_growth;
    for (const auto& p : participants) {
      const double cx = p.x + t * step_dt * p.vx;
      const double cy = p.y + t * step_dt * p.vy;
      const double hx = 0.5 * p.length + dilation;
      const double hy = 0.5 * p.width + dilation;
      // Cells that can intersect the dilated footprint.
      const int c_lo = std::max(0, static_cast<int>(std::floor((cx - hx) / g.cell_length)));
      const int c_hi = std::min(g.cols - 1, static_cast<int>(std::floor((cx + hx) / g.cell_length)));
      const int r_lo = std::max(0, static_cast<int>(std::floor((cy - hy - g.y_min()) / g.cell_width)));
      const int r_hi = std::min(g.rows - 1, static_cast<int>(std::floor((cy + hy - g.y_min()) / g.cell_width)));
      for (int r = r_lo; r <= r_hi; ++r) {
        const double y0 = g.y_min() + r * g.cell_width;
        const double oy = rect_overlap_1d(cy - hy, cy + hy, y0, y0 + g.cell_width);
        if (oy <= 0.0) continue;
        for (int c = c_lo; c <= c_hi; ++c) {
          const double x0 = c * g.cell_length;
          const double ox = rect_overlap_1d(cx - hx, cx + hx, x0, x0 + g.cell_length);
          if (ox <= 0.0) continue;
          const double prob = std::min(1.0, ox * oy / cell_area);
          double& cell = grid[r * g.cols + c];
          cell = std::max(cell, prob);
        }
      }
    }
  }
  return f;
}

Classification classify(const OccupancyForecast& forecast, const GridGeometry& g,
                        CellId ego, const std::vector<CellId>& goals,
                        const RiskThresholds& th, int lookahead) {
  if (!(th.p_un > th.p_hr && th.p_hr > th.p_lr && th.p_lr > 0.0))
    throw std::invalid_argument("classify: need p_un > p_hr > p_lr > 0");
  if (forecast.grids.empty())
    throw std::invalid_argument("classify: empty forecast");
  if (lookahead < 0) throw std::invalid_argument("classify: negative lookahead");
  if (!g.contains(ego)) throw std::invalid_argument("classify: ego outside grid");
  for (const auto& c : goals)
    if (!g.contains(c)) throw std::invalid_argument("classify: goal outside grid");

  Classification out;
  out.field.geometry = g;
  out.field.thresholds = th;
  out.field.states.assign(g.n_cells(), SafetyState::sa);

  const int last = std::min<int>(lookahead, forecast.horizon_steps - 1);
  for (int s = 0; s < g.n_cells(); ++s) {
    double p = 0.0;
    for (int t = 0; t <= last; ++t) p = std::max(p, forecast.grids[t][s]);
    SafetyState cls = SafetyState::sa;
    if (p >= th.p_un)
      cls = SafetyState::un;
    else if (p >= th.p_hr)
      cls = SafetyState::hr;
    else if (p >= th.p_lr)
      cls = SafetyState::lr;
    out.field.states[s] = cls;
  }

  for (int c = 0; c < g.cols; ++c) {
    out.field.states[g.state_index({0, c})] = SafetyState::un;
    out.field.states[g.state_index({g.rows - 1, c})] = SafetyState::un;
  }

  // Lateral escalation: neighbors (same column, +-1 row) of un cells are at
  // least hr.
  std::vector<SafetyState> escalated = out.field.states;
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      if (out.field.states[r * g.cols + c] != SafetyState::un) continue;
      for (int dr : {-1, 1}) {
        const int rn = r + dr;
        if (rn < 0 || rn >= g.rows) continue;
        SafetyState& nb = escalated[rn * g.cols + c];
        if (risk_rank(nb) >= 0 && risk_rank(nb) < risk_rank(SafetyState::hr))
          nb = SafetyState::hr;
      }
    }
  }
  out.field.states = std::move(escalated);

  for (const auto& goal : goals) {
    SafetyState& s = out.field.states[g.state_index(goal)];
    if (s == SafetyState::un) continue;  // dropped
    s = SafetyState::tg;
    out.goals.push_back(goal);
  }

  out.field.states[g.state_index(ego)] = SafetyState::cp;
  return out;
}

double truncexp_pdf(double x, const TruncExpParams& p) {
  validate_truncexp(p);
  if (!std::isfinite(x)) throw std::invalid_argument("truncexp_pdf: non-finite x");
  if (x <= -p.tau_l || x > p.tau_h) return 0.0;
  const double z = 1.0 - std::exp(-(p.tau_l - std::abs(p.tau_h)) / p.sigma);
  return std::exp(-(std::abs(x) - std::abs(p.tau_h)) / p.sigma) / (p.sigma * z);
}

double truncexp_cdf(double x, const TruncExpParams& p) {
  validate_truncexp(p);
  if (!std::isfinite(x)) throw std::invalid_argument("truncexp_cdf: non-finite x");
  if (x <= -p.tau_l) return 0.0;
  if (x > p.tau_h) return 1.0;
  const double L = p.tau_l - std::abs(p.tau_h);  // support length
  const double z = 1.0 - std::exp(-L / p.sigma);
  return (std::exp((x - p.tau_h) / p.sigma) - std::exp(-L / p.sigma)) / z;
}

double truncexp_mean(const TruncExpParams& p) {
  validate_truncexp(p);
  const double L = p.tau_l - std::abs(p.tau_h);
  const double e = std::exp(-L / p.sigma);
  // tau_h minus the mean of an exponential truncated to [0, L].
  return p.tau_h - (p.sigma - L * e / (1.0 - e));
}

double truncexp_sample(const TruncExpParams& p, Rng& rng) {
  validate_truncexp(p);
  const double L = p.tau_l - std::abs(p.tau_h);
  const double e = std::exp(-L / p.sigma);
  const double z = 1.0 - e;
  const double u = rng.uniform();
  // Inverse CDF; u in [0, 1) maps into (-tau_l, tau_h].
  const double x = p.tau_h + p.sigma * std::log(e + (1.0 - u) * z);
  return std::min(std::max(x, std::nextafter(-p.tau_l, p.tau_h)), p.tau_h);
}

double reward_mean(const RewardDist& d) {
  return d.kind == RewardKind::PointMass ? d.value : truncexp_mean(d.truncexp);
}

double reward_sample(const RewardDist& d, Rng& rng) {
  return d.kind == RewardKind::PointMass ? d.value : truncexp_sample(d.truncexp, rng);
}

RewardDist RewardModel::dist_at(CellId c) const {
  RewardDist d;
  switch (field.at(c)) {
    case SafetyState::un:
      d.value = params.unsafe_penalty;
      break;
    case SafetyState::tg:
      d.value = params.goal_reward;
      break;
    case SafetyState::hr:
      d.kind = RewardKind::TruncExp;
      d.truncexp = params.hr;
      break;
    case SafetyState::lr:
      d.kind = RewardKind::TruncExp;
      d.truncexp = params.lr;
      break;
    default:  // sa, cp
      d.value = 0.0;
      break;
  }
  return d;
}

double RewardModel::mean_at(CellId c) const { return reward_mean(dist_at(c)); }

double RewardModel::mean_reward(const GridGeometry& g, const TransitionModel& t,
                                int state, Action a) const {
  const auto& sup = t.support(state, a);
  double m = 0.0;
  for (int k = 0; k < sup.count; ++k)
    m += sup.entries[k].p * mean_at(g.cell_of(sup.entries[k].state));
  return m;
}

double RewardModel::sample_reward(const GridGeometry& g, const TransitionModel& t,
                                  int state, Action a, Rng& rng) const {
  const auto& sup = t.support(state, a);
  double u = rng.uniform();
  int pick = sup.count - 1;
  for (int k = 0; k < sup.count; ++k) {
    if (u < sup.entries[k].p) {
      pick = k;
      break;
    }
    u -= sup.entries[k].p;
  }
  return reward_sample(dist_at(g.cell_of(sup.entries[pick].state)), rng);
}

RewardModel build_reward_model(const RiskField& field, const RewardParams& params) {
  if (!(params.goal_reward >= 0.0))
    throw std::invalid_argument("build_reward_model: goal reward must be >= 0");
  if (!(params.unsafe_penalty <= 0.0))
    throw std::invalid_argument("build_reward_model: unsafe penalty must be <= 0");
  validate_truncexp(params.hr);
  validate_truncexp(params.lr);
  return RewardModel{field, params};
}

}  // namespace rap
