#pragma once

#include <stdexcept>
#include <vector>

#include "rap/rau.hpp"
#include "rap/vehicle.hpp"

namespace rap {

// Transition and monitor labels, in the order they can fire within one tick.
enum class Label : std::uint8_t { env, rpl, pl, fcu_check, safety_violation };

const char* label_name(Label l);

// Thrown when the safety mode finds the straight cell and both adjacent rows
// blocked; the caller records it as a terminal safety violation.
class NoSafeOverride : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Time-stamped cells that are too risky to traverse: per step, the hr and un
// band plus the edge rows, with the same one-row escalation around un cells
// that classification applies.
class RiskSet {
 public:
  RiskSet() = default;
  RiskSet(const GridGeometry& g, int steps);

  void insert(int step, CellId c);
  bool contains(int step, CellId c) const;
  int steps() const { return steps_; }
  bool empty() const;

 private:
  int rows_ = 0, cols_ = 0, steps_ = 0;
  std::vector<char> mask_;  // step-major, then state index
};

// Risk set over steps 0..lookahead_steps. Steps past the forecast horizon
// hold its last grid.
RiskSet build_risk_set(const OccupancyForecast& forecast, const GridGeometry& g,
                       const RiskThresholds& thresholds, int lookahead_steps);

// Cells the tracked vehicle may occupy, step by step along the reference.
struct ReachTube {
  std::vector<std::vector<CellId>> cells;  // per step, row-major order
};

// Cells within `tube_radius` (open disc) of the reference position at
// t_start + k*step_dt, for k = 0..horizon_steps; radius 0 keeps exactly the
// cell containing the reference point. Reference positions outside the
// window contribute no cells.
ReachTube reach_tube(const ReferenceTrajectory& ref, double tube_radius,
                     const GridGeometry& g, int horizon_steps, double t_start,
                     double step_dt, double window_x0);

struct FeasibilityResult {
  bool feasible = true;
  CellId witness;     // earliest conflicting cell when infeasible
  int witness_step = 0;
};

// Feasible iff tube and risk are disjoint step-wise. The tube horizon must
// not exceed the risk horizon.
FeasibilityResult check_feasible(const ReachTube& tube, const RiskSet& risk);

struct Clocks {
  double tau_env = 0.2;
  double tau_pl = 7.8;  // must be a multiple of tau_env
  double tau_fcu = 0.05;
  double tau_safe = 0.2;
};

// Monitor event consumed by the trace writer.
struct Event {
  double t = 0.0;
  Label label = Label::env;
  bool has_witness = false;
  CellId cell;
  int step = 0;
};

// Alternating run: boundaries[i], boundaries[i+1] span the i-th trajectory
// segment and labels[i] fires at boundaries[i+1].
struct ExecutionFragment {
  std::vector<double> boundaries;
  std::vector<Label> labels;

  double duration() const {
    return boundaries.empty() ? 0.0 : boundaries.back() - boundaries.front();
  }
};

// Fragment over [t0, t1] from the events inside that span.
ExecutionFragment make_fragment(const std::vector<Event>& events, double t0, double t1);

// Label scheduler on an integer tick grid of width dt. Per tick the firing
// order is env, rpl, pl, fcu_check. env fires every tau_env (including
// t = 0), pl at every tau_pl multiple while feasible, fcu_check every
// tau_fcu outside safety mode. set_infeasible() arms an rpl on the next
// tick, which starts safety mode for tau_safe; its end fires the recovery
// pl and periodic pl/fcu_check stay suppressed until then.
class Automaton {
 public:
  Automaton(const Clocks& clocks, double dt);

  // Labels fired at t = 0, before any step.
  std::vector<Label> initial_labels() const;

  // Advances one tick and reports the labels fired at the new time.
  std::vector<Label> step();

  void set_infeasible();
  bool infeasible() const { return pending_rpl_; }
  bool in_safety_mode() const { return in_safety_; }
  long long tick() const { return tick_; }
  double now() const { return static_cast<double>(tick_) * dt_; }
  double dt() const { return dt_; }
  const Clocks& clocks() const { return clocks_; }
  long long env_period() const { return env_ticks_; }

 private:
  Clocks clocks_;
  double dt_ = 0.0;
  long long env_ticks_ = 0, pl_ticks_ = 0, check_ticks_ = 0, safe_ticks_ = 0;
  long long tick_ = 0;
  long long safety_until_ = -1;
  bool pending_rpl_ = false;
  bool in_safety_ = false;
};

// Continuous pose, latest risk assessment, participant snapshot and the
// feasibility flag, advanced jointly by the simulation loop.
struct HybridState {
  EgoState ego;
  Classification risk;
  std::vector<ParticipantState> participants;
  bool infeasible = false;
  double since_env = 0.0;
  double since_pl = 0.0;
  double since_check = 0.0;
};

// Fallback reference for one tau_safe: keeps the current Y when the cell
// ahead is clear at the next step, otherwise shifts a single row toward the
// clear side (rows nearer the middle win ties). Throws NoSafeOverride when
// straight and both adjacent rows are all blocked.
ReferenceTrajectory safety_mode(const EgoState& ego, const RiskSet& risk,
                                const GridGeometry& g, const Clocks& clocks,
                                double speed, double t0, double window_x0);

}  // namespace rap
