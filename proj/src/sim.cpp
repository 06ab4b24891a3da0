#include "rap/sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <unordered_set>

namespace rap {

namespace {

using nlohmann::json;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown field: " + ctx + "." + item.key());
  }
}

const json* find(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_num(const json& j, const std::string& ctx, const char* key, double def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_number()) throw ConfigError("field must be a number: " + ctx + "." + key);
  return v->get<double>();
}

int get_int(const json& j, const std::string& ctx, const char* key, int def) {
  const json* v = find(j, key);
  if (!v) return def;
  if (!v->is_number_integer()) {
    throw ConfigError("field must be an integer: " + ctx + "." + key);
  }
  return v->get<int>();
}

const json& need(const json& j, const std::string& ctx, const char* key,
                 const char* kind) {
  const json* v = find(j, key);
  if (!v) throw ConfigError("missing field: " + ctx + "." + key);
  if ((kind == std::string("object") && !v->is_object()) ||
      (kind == std::string("array") && !v->is_array()) ||
      (kind == std::string("number") && !v->is_number())) {
    throw ConfigError("field must be " + std::string(kind == std::string("object")
                                                         ? "an object"
                                                         : kind == std::string("array")
                                                               ? "an array"
                                                               : "a number") +
                      ": " + ctx + "." + key);
  }
  return *v;
}

TruncExpParams parse_truncexp(const json& j, const std::string& ctx) {
  check_keys(j, ctx, {"tau_l", "tau_h", "sigma"});
  TruncExpParams p;
  p.tau_l = get_num(j, ctx, "tau_l", p.tau_l);
  p.tau_h = get_num(j, ctx, "tau_h", p.tau_h);
  p.sigma = get_num(j, ctx, "sigma", p.sigma);
  try {
    truncexp_mean(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
  return p;
}

// Module preconditions re-checked here so errors carry the field name.
void validate_config(const ScenarioConfig& cfg) {
  GridGeometry g;
  try {
    g = cfg.geometry();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  if (!std::isfinite(cfg.entropic.alpha) || cfg.entropic.alpha < 0.0) {
    throw ConfigError("entropic.alpha: must be >= 0");
  }
  if (!(cfg.entropic.gamma >= 0.0 && cfg.entropic.gamma < 1.0)) {
    throw ConfigError("entropic.gamma: must lie in [0, 1)");
  }
  if (!(cfg.thresholds.p_un > cfg.thresholds.p_hr &&
        cfg.thresholds.p_hr > cfg.thresholds.p_lr && cfg.thresholds.p_lr > 0.0 &&
        cfg.thresholds.p_un <= 1.0)) {
    throw ConfigError("thresholds: need 1 >= p_un > p_hr > p_lr > 0");
  }
  if (cfg.rewards.unsafe_penalty > 0.0) {
    throw ConfigError("rewards.unsafe_penalty: must be <= 0");
  }
  if (cfg.rewards.goal_reward < 0.0) {
    throw ConfigError("rewards.goal_reward: must be >= 0");
  }
  if (!(cfg.p_success > 0.0 && cfg.p_success <= 1.0)) {
    throw ConfigError("p_success: must lie in (0, 1]");
  }
  if (cfg.sample_policies < 1) throw ConfigError("sampling.policies: must be >= 1");
  if (cfg.tuples_per_policy < 1) {
    throw ConfigError("sampling.tuples_per_policy: must be >= 1");
  }
  if (cfg.cost_draws < 1) throw ConfigError("sampling.cost_draws: must be >= 1");
  if (cfg.sigma_growth < 0.0) throw ConfigError("sigma_growth: must be >= 0");
  if (cfg.lookahead_steps < 0) throw ConfigError("lookahead_steps: must be >= 0");
  if (cfg.fcu_lookahead_steps < 0) {
    throw ConfigError("fcu_lookahead_steps: must be >= 0");
  }
  if (cfg.tube_radius < 0.0) throw ConfigError("tube_radius: must be >= 0");
  if (!(cfg.duration > 0.0)) throw ConfigError("duration: must be positive");
  if (!(cfg.dt > 0.0)) throw ConfigError("dt: must be positive");
  const long long steps = std::llround(cfg.duration / cfg.dt);
  if (steps < 1 ||
      std::abs(static_cast<double>(steps) * cfg.dt - cfg.duration) > 1e-9 * cfg.duration) {
    throw ConfigError("duration: must be a whole number of dt ticks");
  }
  try {
    Clocks clocks = cfg.clocks;
    clocks.tau_pl = cfg.tau_pl();
    Automaton probe(clocks, cfg.dt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("clocks: ") + e.what());
  }
  if (!(cfg.vehicle.mass > 0.0) || !(cfg.vehicle.yaw_inertia > 0.0) ||
      !(cfg.vehicle.cornering_stiffness > 0.0) || !(cfg.vehicle.speed > 0.0) ||
      !(cfg.vehicle.lever_front > 0.0) || !(cfg.vehicle.lever_rear > 0.0)) {
    throw ConfigError("vehicle: parameters must be positive");
  }
  if (!(cfg.lqr_r > 0.0)) throw ConfigError("lqr.r: must be positive");
  for (double q : cfg.lqr_q) {
    if (q < 0.0) throw ConfigError("lqr.q: entries must be >= 0");
  }
  for (std::size_t i = 0; i < cfg.participants.size(); ++i) {
    const auto& p = cfg.participants[i];
    if (!(p.length > 0.0) || !(p.width > 0.0)) {
      throw ConfigError("participants[" + std::to_string(i) +
                        "]: footprint must be positive");
    }
  }
  const double window_x0 = std::floor(cfg.ego_x / g.cell_length) * g.cell_length;
  CellId ego_cell;
  if (!g.cell_at(cfg.ego_x - window_x0, cfg.ego_y, ego_cell)) {
    throw ConfigError("ego.y: outside the grid window");
  }
}

}  // namespace

GridGeometry ScenarioConfig::geometry() const {
  return build_grid(grid_rows, grid_cols, cell_width, cell_length, lane_sizes);
}

ScenarioConfig parse_config(const std::string& text) {
  std::string body = text;
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) body = "{}";
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, last_nl = 0;
    for (std::size_t i = 0; i < e.byte && i < body.size(); ++i) {
      if (body[i] == '\n') {
        ++line;
        last_nl = i + 1;
      }
    }
    throw ConfigError("parse error at line " + std::to_string(line) + " column " +
                      std::to_string(std::max<std::size_t>(e.byte, last_nl) - last_nl + 1) +
                      ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be an object");

  std::string missing;
  for (const char* req : {"version", "grid", "ego", "participants", "entropic",
                          "clocks", "duration", "dt", "seed"}) {
    if (!find(j, req)) missing += missing.empty() ? req : std::string(", ") + req;
  }
  if (!missing.empty()) throw ConfigError("missing required fields: " + missing);

  check_keys(j, "config",
             {"version", "grid", "ego", "vehicle", "participants", "thresholds",
              "rewards", "entropic", "clocks", "p_success", "sampling", "sigma_growth",
              "lookahead_steps", "fcu_lookahead_steps", "tube_radius", "duration", "dt",
              "seed", "lqr"});

  ScenarioConfig cfg;
  cfg.version = get_int(j, "config", "version", 0);
  if (cfg.version != 1) throw ConfigError("version: only version 1 is supported");

  const json& grid = need(j, "config", "grid", "object");
  check_keys(grid, "grid", {"rows", "cols", "cell_width", "cell_length", "lane_sizes"});
  cfg.grid_rows = get_int(grid, "grid", "rows", cfg.grid_rows);
  cfg.grid_cols = get_int(grid, "grid", "cols", cfg.grid_cols);
  cfg.cell_width = get_num(grid, "grid", "cell_width", cfg.cell_width);
  cfg.cell_length = get_num(grid, "grid", "cell_length", cfg.cell_length);
  if (const json* lanes = find(grid, "lane_sizes")) {
    if (!lanes->is_array()) throw ConfigError("field must be an array: grid.lane_sizes");
    cfg.lane_sizes.clear();
    for (const auto& v : *lanes) {
      if (!v.is_number_integer()) {
        throw ConfigError("grid.lane_sizes: entries must be integers");
      }
      cfg.lane_sizes.push_back(v.get<int>());
    }
  }

  const json& ego = need(j, "config", "ego", "object");
  check_keys(ego, "ego", {"x", "y", "speed"});
  cfg.ego_x = get_num(ego, "ego", "x", cfg.ego_x);
  cfg.ego_y = get_num(ego, "ego", "y", cfg.ego_y);
  cfg.vehicle.speed = get_num(ego, "ego", "speed", cfg.vehicle.speed);

  if (const json* veh = find(j, "vehicle")) {
    check_keys(*veh, "vehicle",
               {"mass", "yaw_inertia", "cornering_stiffness", "friction", "lever_front",
                "lever_rear"});
    cfg.vehicle.mass = get_num(*veh, "vehicle", "mass", cfg.vehicle.mass);
    cfg.vehicle.yaw_inertia = get_num(*veh, "vehicle", "yaw_inertia", cfg.vehicle.yaw_inertia);
    cfg.vehicle.cornering_stiffness =
        get_num(*veh, "vehicle", "cornering_stiffness", cfg.vehicle.cornering_stiffness);
    cfg.vehicle.friction = get_num(*veh, "vehicle", "friction", cfg.vehicle.friction);
    cfg.vehicle.lever_front = get_num(*veh, "vehicle", "lever_front", cfg.vehicle.lever_front);
    cfg.vehicle.lever_rear = get_num(*veh, "vehicle", "lever_rear", cfg.vehicle.lever_rear);
  }

  const json& parts = need(j, "config", "participants", "array");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string ctx = "participants[" + std::to_string(i) + "]";
    const json& p = parts[i];
    if (!p.is_object()) throw ConfigError(ctx + ": must be an object");
    check_keys(p, ctx, {"x", "y", "vx", "vy", "length", "width"});
    ParticipantState s;
    if (!find(p, "x") || !find(p, "y")) throw ConfigError(ctx + ": needs x and y");
    s.x = get_num(p, ctx, "x", 0.0);
    s.y = get_num(p, ctx, "y", 0.0);
    s.vx = get_num(p, ctx, "vx", 0.0);
    s.vy = get_num(p, ctx, "vy", 0.0);
    s.length = get_num(p, ctx, "length", s.length);
    s.width = get_num(p, ctx, "width", s.width);
    cfg.participants.push_back(s);
  }

  if (const json* th = find(j, "thresholds")) {
    check_keys(*th, "thresholds", {"p_un", "p_hr", "p_lr"});
    cfg.thresholds.p_un = get_num(*th, "thresholds", "p_un", cfg.thresholds.p_un);
    cfg.thresholds.p_hr = get_num(*th, "thresholds", "p_hr", cfg.thresholds.p_hr);
    cfg.thresholds.p_lr = get_num(*th, "thresholds", "p_lr", cfg.thresholds.p_lr);
  }

  if (const json* rw = find(j, "rewards")) {
    check_keys(*rw, "rewards", {"unsafe_penalty", "goal_reward", "hr", "lr"});
    cfg.rewards.unsafe_penalty =
        get_num(*rw, "rewards", "unsafe_penalty", cfg.rewards.unsafe_penalty);
    cfg.rewards.goal_reward = get_num(*rw, "rewards", "goal_reward", cfg.rewards.goal_reward);
    if (const json* hr = find(*rw, "hr")) cfg.rewards.hr = parse_truncexp(*hr, "rewards.hr");
    if (const json* lr = find(*rw, "lr")) cfg.rewards.lr = parse_truncexp(*lr, "rewards.lr");
  }

  const json& ent = need(j, "config", "entropic", "object");
  check_keys(ent, "entropic", {"alpha", "gamma"});
  cfg.entropic.alpha = get_num(ent, "entropic", "alpha", cfg.entropic.alpha);
  cfg.entropic.gamma = get_num(ent, "entropic", "gamma", cfg.entropic.gamma);

  const json& clk = need(j, "config", "clocks", "object");
  check_keys(clk, "clocks", {"tau_env", "tau_fcu", "tau_safe"});
  cfg.clocks.tau_env = get_num(clk, "clocks", "tau_env", cfg.clocks.tau_env);
  cfg.clocks.tau_fcu = get_num(clk, "clocks", "tau_fcu", cfg.clocks.tau_fcu);
  cfg.clocks.tau_safe = get_num(clk, "clocks", "tau_safe", cfg.clocks.tau_safe);
  cfg.clocks.tau_pl = cfg.tau_pl();

  cfg.p_success = get_num(j, "config", "p_success", cfg.p_success);

  if (const json* sam = find(j, "sampling")) {
    check_keys(*sam, "sampling", {"policies", "tuples_per_policy", "cost_draws"});
    cfg.sample_policies = get_int(*sam, "sampling", "policies", cfg.sample_policies);
    cfg.tuples_per_policy =
        get_int(*sam, "sampling", "tuples_per_policy", cfg.tuples_per_policy);
    cfg.cost_draws = get_int(*sam, "sampling", "cost_draws", cfg.cost_draws);
  }

  cfg.sigma_growth = get_num(j, "config", "sigma_growth", cfg.sigma_growth);
  cfg.lookahead_steps = get_int(j, "config", "lookahead_steps", cfg.lookahead_steps);
  cfg.fcu_lookahead_steps =
      get_int(j, "config", "fcu_lookahead_steps", cfg.fcu_lookahead_steps);
  cfg.tube_radius = get_num(j, "config", "tube_radius", cfg.tube_radius);
  cfg.duration = get_num(j, "config", "duration", cfg.duration);
  cfg.dt = get_num(j, "config", "dt", cfg.dt);

  const json& seed = need(j, "config", "seed", "number");
  if (!seed.is_number_integer() || seed.get<long long>() < 0) {
    throw ConfigError("seed: must be a nonnegative integer");
  }
  cfg.seed = seed.get<std::uint64_t>();

  if (const json* lqr = find(j, "lqr")) {
    check_keys(*lqr, "lqr", {"q", "r"});
    if (const json* q = find(*lqr, "q")) {
      if (!q->is_array() || q->size() != 4) {
        throw ConfigError("lqr.q: need exactly 4 entries");
      }
      for (int i = 0; i < 4; ++i) {
        if (!(*q)[i].is_number()) throw ConfigError("lqr.q: entries must be numbers");
        cfg.lqr_q[static_cast<std::size_t>(i)] = (*q)[i].get<double>();
      }
    }
    cfg.lqr_r = get_num(*lqr, "lqr", "r", cfg.lqr_r);
  }

  validate_config(cfg);
  return cfg;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

namespace {

std::vector<CellId> last_column_goals(const GridGeometry& g, int lane) {
  std::vector<CellId> goals;
  for (int r = 1; r + 1 < g.rows; ++r) {
    if (lane < 0 || g.lane_of_row(r) == lane) goals.push_back({r, g.cols - 1});
  }
  return goals;
}

}  // namespace

PlanOutcome plan_window(const ScenarioConfig& cfg,
                        const std::vector<ParticipantState>& window_participants,
                        const EgoState& ego, double window_x0, double t0, Rng& rng) {
  const GridGeometry g = cfg.geometry();
  CellId ego_cell;
  if (!g.cell_at(ego.X - window_x0, ego.Y, ego_cell)) {
    throw std::runtime_error("planning with the ego outside the window");
  }
  const int horizon = std::max(cfg.lookahead_steps, cfg.fcu_lookahead_steps) + 1;
  const OccupancyForecast forecast = predict_occupancy(
      window_participants, g, horizon, cfg.clocks.tau_env, cfg.sigma_growth);

  // Prefer goals in the current lane; widen to any lane if they all drop.
  int lane = g.lane_of_row(ego_cell.row);
  Classification cls = classify(forecast, g, ego_cell, last_column_goals(g, lane),
                                cfg.thresholds, cfg.lookahead_steps);
  if (cls.goals.empty() && lane >= 0) {
    cls = classify(forecast, g, ego_cell, last_column_goals(g, -1), cfg.thresholds,
                   cfg.lookahead_steps);
  }

  LocalMdp mdp;
  mdp.geometry = g;
  mdp.transitions = make_transitions(g, cfg.p_success);
  mdp.gamma = cfg.entropic.gamma;
  mdp.ego_cell = ego_cell;
  mdp.goal_cells = cls.goals;
  mdp.rewards = std::make_shared<RewardModel>(build_reward_model(cls.field, cfg.rewards));

  const auto policies = random_policies(mdp, cfg.sample_policies, rng);
  const SampleSet samples = collect_samples(mdp, *mdp.rewards, policies,
                                            cfg.tuples_per_policy, cfg.cost_draws, rng);
  PlanOutcome out;
  out.solved = solve_sampled_program(samples, mdp, cfg.entropic, 1e-9, 500);

  std::unordered_set<int> uncovered;
  for (const auto& [s, a] : out.solved.uncovered) {
    uncovered.insert(s * kNumActions + static_cast<int>(a));
  }

  // Nominal rollout: greedy in the solved table, intended successors only.
  // Actions from one row share their successor support, so once the entropic
  // exponent saturates their values tie to machine precision; break such ties
  // toward the cheapest intended continuation, then by fixed action order.
  constexpr double kTieTol = 1e-2;
  const auto state_value = [&](CellId c) {
    const int s = g.state_index(c);
    return std::min({out.solved.q.at(s, Action::Straight),
                     out.solved.q.at(s, Action::Left),
                     out.solved.q.at(s, Action::Right)});
  };
  std::vector<double> ordinates{ego.Y};  // start at the true pose, not the cell center
  out.cells.push_back(ego_cell);
  CellId cur = ego_cell;
  for (int k = 0; k < g.cols; ++k) {
    const int s = g.state_index(cur);
    Action best = kActionPreference[0];
    double best_q = out.solved.q.at(s, best);
    double best_v = state_value(next_cell(g, cur, best));
    for (Action a : {Action::Left, Action::Right}) {
      const double qa = out.solved.q.at(s, a);
      const double va = state_value(next_cell(g, cur, a));
      if (qa < best_q - kTieTol || (qa < best_q + kTieTol && va < best_v - kTieTol)) {
        best = a;
        best_q = qa;
        best_v = va;
      }
    }
    if (uncovered.count(s * kNumActions + static_cast<int>(best)) != 0) {
      throw SolverError("plan visits a state-action pair with no samples");
    }
    cur = next_cell(g, cur, best);
    out.cells.push_back(cur);
    ordinates.push_back(g.cell_center(cur).second);
  }
  out.reference = ReferenceTrajectory(t0, cfg.clocks.tau_env, ego.X, cfg.vehicle.speed,
                                      std::move(ordinates));
  out.classification = std::move(cls);
  return out;
}

EpisodeResult run_episode(const ScenarioConfig& cfg, Rng& rng) {
  const auto wall_start = std::chrono::steady_clock::now();
  const GridGeometry g = cfg.geometry();
  Clocks clocks = cfg.clocks;
  clocks.tau_pl = cfg.tau_pl();
  Automaton automaton(clocks, cfg.dt);
  Eigen::Vector4d q_diag;
  q_diag << cfg.lqr_q[0], cfg.lqr_q[1], cfg.lqr_q[2], cfg.lqr_q[3];
  const Eigen::RowVector4d gain = lqr_gain(cfg.vehicle, q_diag, cfg.lqr_r);

  EpisodeResult out;
  EgoState ego;
  ego.X = cfg.ego_x;
  ego.Y = cfg.ego_y;
  const long long steps = std::llround(cfg.duration / cfg.dt);

  double window_x0 = 0.0;
  std::vector<ParticipantState> window_parts;
  RiskSet risk;
  ReferenceTrajectory ref;
  int plan_id = -1;
  bool terminated = false;

  const auto world_participants = [&](double t) {
    std::vector<ParticipantState> ps = cfg.participants;
    for (auto& p : ps) {
      p.x += p.vx * t;
      p.y += p.vy * t;
    }
    return ps;
  };

  const auto controller = [&](const EgoState& s, double tt) {
    return std::clamp(track(s, ref, tt, gain), -0.5, 0.5);
  };

  for (long long k = 0; k <= steps && !terminated; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    const std::vector<Label> labels = k == 0 ? automaton.initial_labels() : automaton.step();

    for (Label l : labels) {
      if (terminated) break;
      switch (l) {
        case Label::env: {
          window_x0 = std::floor(ego.X / g.cell_length) * g.cell_length;
          window_parts = world_participants(t);
          for (auto& p : window_parts) p.x -= window_x0;
          const int horizon = std::max(cfg.lookahead_steps, cfg.fcu_lookahead_steps) + 1;
          const OccupancyForecast forecast = predict_occupancy(
              window_parts, g, horizon, clocks.tau_env, cfg.sigma_growth);
          risk = build_risk_set(forecast, g, cfg.thresholds, cfg.fcu_lookahead_steps);
          out.events.push_back({t, Label::env, false, {}, 0});
          break;
        }
        case Label::pl: {
          PlanOutcome po = plan_window(cfg, window_parts, ego, window_x0, t, rng);
          ref = po.reference;
          ++plan_id;
          out.plans.push_back({plan_id, t, std::move(po.solved.q), std::move(po.cells)});
          out.events.push_back({t, Label::pl, false, {}, 0});
          break;
        }
        case Label::rpl: {
          ++out.replans;
          out.events.push_back({t, Label::rpl, false, {}, 0});
          try {
            ref = safety_mode(ego, risk, g, clocks, cfg.vehicle.speed, t, window_x0);
            ++plan_id;
          } catch (const NoSafeOverride&) {
            out.no_safe_override = true;
            out.events.push_back({t, Label::safety_violation, false, {}, 0});
            terminated = true;
          }
          break;
        }
        case Label::fcu_check: {
          if (ref.empty()) break;
          const ReachTube tube = reach_tube(ref, cfg.tube_radius, g,
                                            cfg.fcu_lookahead_steps, t, clocks.tau_env,
                                            window_x0);
          const FeasibilityResult fr = check_feasible(tube, risk);
          if (!fr.feasible) automaton.set_infeasible();
          out.events.push_back(
              {t, Label::fcu_check, !fr.feasible, fr.witness, fr.witness_step});
          break;
        }
        case Label::safety_violation:
          break;  // never scheduled by the automaton
      }
    }

    double delta = 0.0;
    if (!ref.empty()) {
      const double raw = track(ego, ref, t, gain);
      delta = std::clamp(raw, -0.5, 0.5);
      if (delta != raw) ++out.saturation_events;
    }
    out.trace.push_back({t, ego, delta, plan_id, automaton.infeasible(), labels});

    for (const auto& p : world_participants(t)) {
      if (std::abs(ego.X - p.x) < 0.5 * (g.cell_length + p.length) &&
          std::abs(ego.Y - p.y) < 0.5 * (g.cell_width + p.width)) {
        out.collision = true;
        out.events.push_back({t, Label::safety_violation, false, {}, 0});
        terminated = true;
        break;
      }
    }
    if (terminated || k == steps) break;

    ego = rk4_step(ego, controller, cfg.vehicle, t, cfg.dt);
  }

  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return out;
}

namespace {

// Linear-interpolation quantile on sorted values (R type 7).
double quantile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = p * (static_cast<double>(n) - 1.0);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= n) return sorted[n - 1];
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

std::vector<RunSummary> monte_carlo(const ScenarioConfig& cfg, int runs,
                                    const std::vector<double>& alphas) {
  if (runs < 2) throw std::invalid_argument("monte_carlo needs at least 2 runs");
  if (alphas.empty()) throw std::invalid_argument("monte_carlo needs at least one alpha");

  std::vector<RunSummary> summaries;
  for (double alpha : alphas) {
    ScenarioConfig c = cfg;
    c.entropic.alpha = alpha;
    validate_config(c);

    const auto wall_start = std::chrono::steady_clock::now();
    RunSummary s;
    s.alpha = alpha;
    s.runs = runs;

    std::vector<std::vector<double>> ys(static_cast<std::size_t>(runs));
    std::vector<double> ts;
    std::size_t common = std::string::npos;
    for (int i = 0; i < runs; ++i) {
      Rng run_rng(cfg.seed + static_cast<std::uint64_t>(i));  // matched across alphas
      const EpisodeResult r = run_episode(c, run_rng);
      s.collisions += r.collision ? 1 : 0;
      s.no_safe_overrides += r.no_safe_override ? 1 : 0;
      s.replans += r.replans;
      auto& y = ys[static_cast<std::size_t>(i)];
      y.reserve(r.trace.size());
      for (const auto& row : r.trace) y.push_back(row.ego.Y);
      if (i == 0) {
        ts.reserve(r.trace.size());
        for (const auto& row : r.trace) ts.push_back(row.t);
      }
      common = std::min(common, y.size());
    }

    double var_sum = 0.0;
    std::vector<double> column(static_cast<std::size_t>(runs));
    for (std::size_t k = 0; k < common; ++k) {
      for (int i = 0; i < runs; ++i) column[static_cast<std::size_t>(i)] = ys[i][k];
      double mean = 0.0;
      for (double v : column) mean += v;
      mean /= static_cast<double>(runs);
      double var = 0.0;
      for (double v : column) var += (v - mean) * (v - mean);
      var /= static_cast<double>(runs - 1);
      var_sum += var;
      std::sort(column.begin(), column.end());
      s.t.push_back(ts[k]);
      s.y_mean.push_back(mean);
      s.y_q10.push_back(quantile_sorted(column, 0.1));
      s.y_q90.push_back(quantile_sorted(column, 0.9));
    }
    s.aggregate_y_variance = common > 0 ? var_sum / static_cast<double>(common) : 0.0;
    s.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start)
            .count();
    summaries.push_back(std::move(s));
  }
  return summaries;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  return out;
}

std::string join_labels(const std::vector<Label>& labels) {
  std::string s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i > 0) s += ';';
    s += label_name(labels[i]);
  }
  return s;
}

void write_double_array(std::ofstream& out, const std::vector<double>& v) {
  out << '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out << ',';
    out << fmt17(v[i]);
  }
  out << ']';
}

}  // namespace

void write_trace_csv(const std::vector<TraceRecord>& trace, const std::string& path) {
  auto out = open_out(path);
  out << "t,X,Y,Psi,alpha_T,Psi_dot,delta,plan_id,delta_flag,labels\n";
  for (const auto& r : trace) {
    out << fmt17(r.t) << ',' << fmt17(r.ego.X) << ',' << fmt17(r.ego.Y) << ','
        << fmt17(r.ego.Psi) << ',' << fmt17(r.ego.alpha) << ',' << fmt17(r.ego.Psi_dot)
        << ',' << fmt17(r.delta) << ',' << r.plan_id << ',' << (r.infeasible ? 1 : 0)
        << ',' << join_labels(r.labels) << '\n';
  }
  if (!out) throw std::runtime_error("cannot write: " + path);
}

void write_events_csv(const std::vector<Event>& events, const std::string& path) {
  auto out = open_out(path);
  out << "t,label,cell_row,cell_col,step\n";
  for (const auto& e : events) {
    out << fmt17(e.t) << ',' << label_name(e.label) << ',';
    if (e.has_witness) {
      out << e.cell.row << ',' << e.cell.col << ',' << e.step;
    } else {
      out << ",,";
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("cannot write: " + path);
}

void write_episode_summary(const EpisodeResult& r, const ScenarioConfig& cfg,
                           const std::string& path) {
  auto out = open_out(path);
  out << "{\n"
      << "  \"version\": 1,\n"
      << "  \"alpha\": " << fmt17(cfg.entropic.alpha) << ",\n"
      << "  \"seed\": " << cfg.seed << ",\n"
      << "  \"rows\": " << r.trace.size() << ",\n"
      << "  \"plans\": " << r.plans.size() << ",\n"
      << "  \"replans\": " << r.replans << ",\n"
      << "  \"collision\": " << (r.collision ? "true" : "false") << ",\n"
      << "  \"no_safe_override\": " << (r.no_safe_override ? "true" : "false") << ",\n"
      << "  \"saturation_events\": " << r.saturation_events << ",\n"
      << "  \"wall_seconds\": " << fmt17(r.wall_seconds) << "\n"
      << "}\n";
  if (!out) throw std::runtime_error("cannot write: " + path);
}

void write_run_summaries(const std::vector<RunSummary>& summaries,
                         const std::string& path) {
  auto out = open_out(path);
  out << "{\n  \"version\": 1,\n  \"summaries\": [";
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const RunSummary& s = summaries[i];
    out << (i > 0 ? "," : "") << "\n    {\n"
        << "      \"alpha\": " << fmt17(s.alpha) << ",\n"
        << "      \"runs\": " << s.runs << ",\n"
        << "      \"collisions\": " << s.collisions << ",\n"
        << "      \"no_safe_overrides\": " << s.no_safe_overrides << ",\n"
        << "      \"replans\": " << s.replans << ",\n"
        << "      \"aggregate_y_variance\": " << fmt17(s.aggregate_y_variance) << ",\n"
        << "      \"wall_seconds\": " << fmt17(s.wall_seconds) << ",\n"
        << "      \"t\": ";
    write_double_array(out, s.t);
    out << ",\n      \"y_mean\": ";
    write_double_array(out, s.y_mean);
    out << ",\n      \"y_q10\": ";
    write_double_array(out, s.y_q10);
    out << ",\n      \"y_q90\": ";
    write_double_array(out, s.y_q90);
    out << "\n    }";
  }
  out << "\n  ]\n}\n";
  if (!out) throw std::runtime_error("cannot write: " + path);
}

void emit_episode(const EpisodeResult& r, const ScenarioConfig& cfg,
                  const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  write_trace_csv(r.trace, (base / "trace.csv").string());
  write_events_csv(r.events, (base / "events.csv").string());
  write_episode_summary(r, cfg, (base / "summary.json").string());
  for (const auto& plan : r.plans) {
    auto out = open_out((base / ("qtable_" + std::to_string(plan.id) + ".json")).string());
    out << save_qtable(plan.q, cfg.entropic);
    if (!out) throw std::runtime_error("cannot write qtable under: " + dir);
  }
}

}  // namespace rap
