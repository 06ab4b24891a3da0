#pragma once

#include <vector>

#include "rap/grid.hpp"
#include "rap/rng.hpp"

namespace rap {

// Traffic participant in window-local coordinates. `length` is the
// longitudinal footprint extent (along x), `width` the lateral one.
struct ParticipantState {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  double length = 7.0;
  double width = 4.0;
};

// Per-step cell occupancy probabilities over the preview horizon.
// grids[t][state] is the probability that the cell is occupied t
// environment steps from now.
struct OccupancyForecast {
  int horizon_steps = 0;
  double step_dt = 0.0;
  std::vector<std::vector<double>> grids;

  double at(int step, int state) const { return grids[step][state]; }
};

// Constant-velocity forecast with growing positional uncertainty: at step t
// each footprint is advanced by t*dt*(vx, vy) and dilated by
// t*dt*sigma_growth on every side. A cell's probability is the fraction of
// its area covered by a dilated footprint, maximized over participants.
// Step 0 is the plain rasterization of the current footprints.
OccupancyForecast predict_occupancy(const std::vector<ParticipantState>& participants,
                                    const GridGeometry& g, int horizon_steps,
                                    double step_dt, double sigma_growth);

struct RiskThresholds {
  double p_un = 0.8;
  double p_hr = 0.4;
  double p_lr = 0.1;
};

// Safety classification of every cell in the window.
struct RiskField {
  GridGeometry geometry;
  RiskThresholds thresholds;
  std::vector<SafetyState> states;  // indexed by state

  SafetyState at(CellId c) const { return states[geometry.state_index(c)]; }
};

struct Classification {
  RiskField field;
  std::vector<CellId> goals;  // goals that survived (empty means no-goal)
};

// Bands each cell by its maximum occupancy over steps 0..lookahead, then
// overwrites: edge rows are un; lateral neighbors of un cells escalate to
// at least hr; surviving goals become tg (goals on un cells are dropped);
// the ego cell becomes cp. Thresholds must satisfy p_un > p_hr > p_lr > 0.
Classification classify(const OccupancyForecast& forecast, const GridGeometry& g,
                        CellId ego, const std::vector<CellId>& goals,
                        const RiskThresholds& thresholds, int lookahead);

// Reward magnitude drawn when entering a cell, truncated-exponential shaped:
//   f(x) = exp(-(|x| - |tau_h|) / sigma) / (sigma * (1 - exp(-(tau_l - |tau_h|) / sigma)))
// supported on (-tau_l, tau_h] with tau_h <= 0 < tau_l and tau_l > |tau_h|.
struct TruncExpParams {
  double tau_l = 10.0;
  double tau_h = 0.0;
  double sigma = 1.0;
};

double truncexp_pdf(double x, const TruncExpParams& p);
double truncexp_cdf(double x, const TruncExpParams& p);
double truncexp_mean(const TruncExpParams& p);

// Inverse-CDF draw; the result always lies in (-tau_l, tau_h].
double truncexp_sample(const TruncExpParams& p, Rng& rng);

enum class RewardKind : std::uint8_t { PointMass, TruncExp };

struct RewardDist {
  RewardKind kind = RewardKind::PointMass;
  double value = 0.0;       // PointMass
  TruncExpParams truncexp;  // TruncExp
};

double reward_mean(const RewardDist& d);
double reward_sample(const RewardDist& d, Rng& rng);

struct RewardParams {
  double unsafe_penalty = -10000.0;  // entering an un cell
  double goal_reward = 10000.0;      // entering a tg cell
  TruncExpParams hr{10000.0, 0.0, 1.0};
  TruncExpParams lr{10.0, 0.0, 1.0};
};

// Rewards are a pure function of the safety state of the cell being
// entered: sa and cp pay 0, un pays unsafe_penalty, tg pays goal_reward,
// hr and lr draw from their truncated-exponential shapes.
struct RewardModel {
  RiskField field;
  RewardParams params;

  RewardDist dist_at(CellId c) const;
  double mean_at(CellId c) const;

  // Expected reward of (state, action): successor-distribution average of
  // the per-cell means.
  double mean_reward(const GridGeometry& g, const TransitionModel& t,
                     int state, Action a) const;

  // One realized reward for taking (state, action): draws the successor
  // from the slip model, then the reward of the entered cell.
  double sample_reward(const GridGeometry& g, const TransitionModel& t,
                       int state, Action a, Rng& rng) const;
};

RewardModel build_reward_model(const RiskField& field, const RewardParams& params);

}  // namespace rap
