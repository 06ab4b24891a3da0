#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rap/fcu.hpp"
#include "rap/risk_q.hpp"

namespace rap {

// Configuration problems: parse failures, unknown or missing fields, values
// violating module preconditions. The message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One scenario: road window layout, ego and participant initial states,
// risk and reward parameters, clock periods and sampling budgets.
// Participants are given in world coordinates and move at constant
// velocity; the grid window re-anchors to the ego at every env step.
struct ScenarioConfig {
  int version = 1;

  int grid_rows = 11;
  int grid_cols = 39;
  double cell_width = 2.0;
  double cell_length = 3.5;
  std::vector<int> lane_sizes{3, 3, 3};

  double ego_x = 0.0;
  double ego_y = 0.0;
  VehicleParams vehicle;

  std::vector<ParticipantState> participants;

  RiskThresholds thresholds;
  RewardParams rewards;
  EntropicParams entropic{0.2, 0.3};
  Clocks clocks;  // tau_pl is derived: grid_cols * tau_env
  double p_success = 0.9;

  int sample_policies = 10;
  int tuples_per_policy = 1000;
  int cost_draws = 1;

  double sigma_growth = 0.25;
  int lookahead_steps = 10;      // classification banding horizon
  int fcu_lookahead_steps = 10;  // feasibility check horizon
  double tube_radius = 1.0;

  double duration = 12.0;
  double dt = 1e-3;
  std::uint64_t seed = 1;

  std::array<double, 4> lqr_q{3.0, 1.0, 1.0, 1.0};
  double lqr_r = 1.0;

  GridGeometry geometry() const;
  double tau_pl() const { return grid_cols * clocks.tau_env; }
};

// Parses and validates a scenario JSON document. Unknown keys anywhere in
// the document are rejected; missing required fields are listed.
ScenarioConfig load_config(const std::string& path);
ScenarioConfig parse_config(const std::string& text);

struct TraceRecord {
  double t = 0.0;
  EgoState ego;
  double delta = 0.0;  // applied steering command
  int plan_id = 0;
  bool infeasible = false;
  std::vector<Label> labels;  // fired at this tick
};

struct PlanArtifact {
  int id = 0;
  double t = 0.0;
  QTable q;
  std::vector<CellId> cells;
};

struct EpisodeResult {
  std::vector<TraceRecord> trace;
  std::vector<Event> events;
  std::vector<PlanArtifact> plans;
  bool collision = false;
  bool no_safe_override = false;
  int replans = 0;
  int saturation_events = 0;
  double wall_seconds = 0.0;

  bool safety_violation() const { return collision || no_safe_override; }
};

// One closed-loop episode: env steps re-anchor the window and refresh the
// risk assessment, pl steps sample and solve the local program, fcu checks
// intersect the reach tube with the risk set, rpl engages the safety mode.
// Terminates early on collision or when no safe override exists.
EpisodeResult run_episode(const ScenarioConfig& cfg, Rng& rng);

// Pipeline of a single planning step on a fixed window; also the `plan`
// CLI entry. `window_x0` anchors world x to window column 0.
struct PlanOutcome {
  SampledProgramResult solved;
  std::vector<CellId> cells;  // nominal path, one cell per env step
  ReferenceTrajectory reference;
  Classification classification;
};
PlanOutcome plan_window(const ScenarioConfig& cfg,
                        const std::vector<ParticipantState>& window_participants,
                        const EgoState& ego, double window_x0, double t0, Rng& rng);

struct RunSummary {
  double alpha = 0.0;
  int runs = 0;
  std::vector<double> t;       // common time base
  std::vector<double> y_mean;  // across-run mean of Y per tick
  std::vector<double> y_q10;   // 10% quantile
  std::vector<double> y_q90;   // 90% quantile
  int collisions = 0;
  int no_safe_overrides = 0;
  int replans = 0;
  double aggregate_y_variance = 0.0;  // mean over ticks of across-run variance
  double wall_seconds = 0.0;
};

// Independent episodes per alpha with matched seeds (seed + run index), so
// alphas face identical random streams.
std::vector<RunSummary> monte_carlo(const ScenarioConfig& cfg, int runs,
                                    const std::vector<double>& alphas);

// Artifact writers; floats carry 17 significant digits.
void write_trace_csv(const std::vector<TraceRecord>& trace, const std::string& path);
void write_events_csv(const std::vector<Event>& events, const std::string& path);
void write_episode_summary(const EpisodeResult& r, const ScenarioConfig& cfg,
                           const std::string& path);
void write_run_summaries(const std::vector<RunSummary>& summaries,
                         const std::string& path);

// trace.csv, events.csv, summary.json and qtable_<plan>.json under dir.
void emit_episode(const EpisodeResult& r, const ScenarioConfig& cfg,
                  const std::string& dir);

}  // namespace rap
