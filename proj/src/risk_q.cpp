#include "rap/risk_q.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>

#include <json.hpp>

namespace rap {

namespace {

void validate_params(const EntropicParams& p) {
  if (!(p.alpha >= 0.0) || !std::isfinite(p.alpha))
    throw std::invalid_argument("entropic params: alpha must be finite and >= 0");
  if (!(p.gamma >= 0.0 && p.gamma < 1.0))
    throw std::invalid_argument("entropic params: gamma must be in [0, 1)");
}

// Certainty equivalent (1/a) * log sum_k w_k exp(a * v_k) over the support,
// with sum_k w_k == 1; the risk-neutral a == 0 branch is the plain mean.
// Shifted by the max so exp never overflows even for |v| ~ 1e4 / (1 - gamma).
template <typename Weight, typename Value>
double certainty_equivalent(int count, Weight w, Value v, double a) {
  if (a == 0.0) {
    double m = 0.0;
    for (int k = 0; k < count; ++k) m += w(k) * v(k);
    return m;
  }
  double hi = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < count; ++k) hi = std::max(hi, v(k));
  double acc = 0.0;
  for (int k = 0; k < count; ++k) acc += w(k) * std::exp(a * (v(k) - hi));
  return hi + std::log(acc) / a;
}

double successor_value(const QTable& q, int state, const PlanPolicy& policy) {
  return q.at(state, policy.actions[state]);
}

double successor_min(const QTable& q, int state) {
  double best = q.at(state, Action::Left);
  best = std::min(best, q.at(state, Action::Straight));
  best = std::min(best, q.at(state, Action::Right));
  return best;
}

// One operator evaluation at (s, a) given per-successor values.
template <typename SuccessorValue>
double apply_at(const LocalMdp& mdp, const CostTable& costs, const EntropicParams& p,
                int state, Action a, SuccessorValue sv) {
  const auto& sup = mdp.transitions.support(state, a);
  const double ce = certainty_equivalent(
      sup.count, [&](int k) { return sup.entries[k].p; },
      [&](int k) { return sv(sup.entries[k].state); }, p.alpha * p.gamma);
  return cost_at(costs, state, a) + p.gamma * ce;
}

std::uint64_t tuple_key(const SampleTuple& t) {
  return (static_cast<std::uint64_t>(t.state) << 34) |
         (static_cast<std::uint64_t>(t.next_state) << 4) |
         (static_cast<std::uint64_t>(t.action) << 2) |
         static_cast<std::uint64_t>(t.next_action);
}

}  // namespace

bool WeightFn::valid_for(const LocalMdp& mdp) const {
  if (static_cast<int>(w.size()) != mdp.n_states()) return false;
  for (double x : w)
    if (!(x >= 1.0)) return false;
  for (int s = 0; s < mdp.n_states(); ++s) {
    for (int ai = 0; ai < kNumActions; ++ai) {
      const auto& sup = mdp.transitions.support(s, static_cast<Action>(ai));
      double ew = 0.0;
      for (int k = 0; k < sup.count; ++k) ew += sup.entries[k].p * w[sup.entries[k].state];
      if (ew > upsilon * w[s] + 1e-12) return false;
    }
  }
  return true;
}

CostTable cost_table(const LocalMdp& mdp, const RewardModel& rewards) {
  CostTable c(static_cast<std::size_t>(mdp.n_states()) * kNumActions);
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int ai = 0; ai < kNumActions; ++ai)
      c[s * kNumActions + ai] =
          -rewards.mean_reward(mdp.geometry, mdp.transitions, s, static_cast<Action>(ai));
  return c;
}

double entropic_value(std::span<const double> samples, double alpha) {
  if (samples.empty()) throw std::invalid_argument("entropic_value: empty sample set");
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("entropic_value: alpha must be finite and >= 0");
  for (double x : samples)
    if (!std::isfinite(x))
      throw std::invalid_argument("entropic_value: non-finite sample");
  const double w = 1.0 / static_cast<double>(samples.size());
  return certainty_equivalent(
      static_cast<int>(samples.size()), [&](int) { return w; },
      [&](int k) { return samples[k]; }, alpha);
}

double discounted_cost(std::span<const double> costs, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw std::invalid_argument("discounted_cost: gamma must be in [0, 1)");
  double acc = 0.0;
  double scale = 1.0;
  for (double c : costs) {
    acc += scale * c;
    scale *= gamma;
  }
  return acc;
}

QTable bellman_apply(const QTable& q, const PlanPolicy& policy, const LocalMdp& mdp,
                     const CostTable& costs, const EntropicParams& p) {
  validate_params(p);
  if (static_cast<int>(policy.actions.size()) != mdp.n_states())
    throw std::invalid_argument("bellman_apply: policy size mismatch");
  QTable out(q.m, q.n);
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int ai = 0; ai < kNumActions; ++ai)
      out.at(s, static_cast<Action>(ai)) =
          apply_at(mdp, costs, p, s, static_cast<Action>(ai),
                   [&](int sn) { return successor_value(q, sn, policy); });
  return out;
}

QTable optimal_bellman(const QTable& q, const LocalMdp& mdp, const CostTable& costs,
                       const EntropicParams& p) {
  validate_params(p);
  QTable out(q.m, q.n);
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int ai = 0; ai < kNumActions; ++ai)
      out.at(s, static_cast<Action>(ai)) =
          apply_at(mdp, costs, p, s, static_cast<Action>(ai),
                   [&](int sn) { return successor_min(q, sn); });
  return out;
}

ValueIterationResult value_iterate(const QTable& q0, const LocalMdp& mdp,
                                   const CostTable& costs, const EntropicParams& p,
                                   double tol, int max_iters, const WeightFn& weight) {
  validate_params(p);
  if (!(weight.upsilon * p.gamma < 1.0))
    throw SolverError("value_iterate: upsilon * gamma must be < 1 for contraction");
  if (static_cast<int>(weight.w.size()) != mdp.n_states())
    throw std::invalid_argument("value_iterate: weight size mismatch");

  ValueIterationResult r;
  r.q = q0;
  for (int it = 1; it <= max_iters; ++it) {
    QTable next = optimal_bellman(r.q, mdp, costs, p);
    double change = 0.0;
    for (int s = 0; s < mdp.n_states(); ++s)
      for (int ai = 0; ai < kNumActions; ++ai) {
        const Action a = static_cast<Action>(ai);
        change = std::max(change, std::abs(next.at(s, a) - r.q.at(s, a)) / weight.w[s]);
      }
    r.q = std::move(next);
    r.iterations = it;
    r.final_change = change;
    if (change <= tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

PlanPolicy greedy_policy(const QTable& q, const LocalMdp& mdp, const CostTable& costs,
                         const EntropicParams& p) {
  validate_params(p);
  PlanPolicy policy;
  policy.actions.resize(mdp.n_states());
  policy.horizon = mdp.geometry.cols;
  for (int s = 0; s < mdp.n_states(); ++s) {
    double best = std::numeric_limits<double>::infinity();
    Action pick = Action::Straight;
    for (Action a : kActionPreference) {
      const double val = apply_at(mdp, costs, p, s, a,
                                  [&](int sn) { return successor_min(q, sn); });
      if (val < best) {
        best = val;
        pick = a;
      }
    }
    policy.actions[s] = pick;
  }
  return policy;
}

std::vector<PlanPolicy> random_policies(const LocalMdp& mdp, int count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("random_policies: count must be positive");
  std::vector<PlanPolicy> out(count);
  for (auto& p : out) {
    p.horizon = mdp.geometry.cols;
    p.actions.resize(mdp.n_states());
    for (auto& a : p.actions) a = static_cast<Action>(rng.uniform_int(kNumActions));
  }
  return out;
}

SampleSet collect_samples(const LocalMdp& mdp, const RewardModel& rewards,
                          const std::vector<PlanPolicy>& exploration_policies,
                          int n_per_policy, int inner, Rng& rng, bool deduplicate) {
  if (exploration_policies.empty())
    throw std::invalid_argument("collect_samples: need at least one policy");
  if (n_per_policy < 1 || inner < 1)
    throw std::invalid_argument("collect_samples: counts must be positive");
  for (const auto& p : exploration_policies)
    if (static_cast<int>(p.actions.size()) != mdp.n_states())
      throw std::invalid_argument("collect_samples: policy size mismatch");

  const int n_pairs = mdp.n_states() * kNumActions;
  SampleSet d;
  d.tuples.reserve(static_cast<std::size_t>(exploration_policies.size()) * n_per_policy);
  std::unordered_set<std::uint64_t> seen;
  for (const auto& policy : exploration_policies) {
    for (int i = 0; i < n_per_policy; ++i) {
      SampleTuple t;
      const auto pair = rng.uniform_int(n_pairs);
      t.state = static_cast<int>(pair) / kNumActions;
      t.action = static_cast<Action>(pair % kNumActions);

      const auto& sup = mdp.transitions.support(t.state, t.action);
      double u = rng.uniform();
      t.next_state = sup.entries[sup.count - 1].state;
      for (int k = 0; k < sup.count; ++k) {
        if (u < sup.entries[k].p) {
          t.next_state = sup.entries[k].state;
          break;
        }
        u -= sup.entries[k].p;
      }
      t.next_action = policy.actions[t.next_state];

      t.cost_draws.resize(inner);
      for (auto& c : t.cost_draws)
        c = -rewards.sample_reward(mdp.geometry, mdp.transitions, t.state, t.action, rng);

      if (deduplicate && !seen.insert(tuple_key(t)).second) continue;
      d.tuples.push_back(std::move(t));
    }
  }
  return d;
}

SampledProgramResult solve_sampled_program(const SampleSet& samples, const LocalMdp& mdp,
                                           const EntropicParams& p, double tol,
                                           int max_iters,
                                           const std::vector<double>& objective_weights) {
  validate_params(p);
  if (samples.tuples.empty()) throw SolverError("sampled program: empty sample set");
  const int n_states = mdp.n_states();
  const int n_pairs = n_states * kNumActions;
  if (!objective_weights.empty()) {
    if (static_cast<int>(objective_weights.size()) != n_pairs)
      throw std::invalid_argument("sampled program: objective weight size mismatch");
    for (double w : objective_weights)
      if (!(w > 0.0))
        throw SolverError("sampled program: objective weights must be positive");
  }

  // Pool the empirical mean cost per (state, action).
  std::vector<double> c_hat(n_pairs, 0.0);
  std::vector<long long> n_draws(n_pairs, 0);
  for (const auto& t : samples.tuples) {
    if (t.state < 0 || t.state >= n_states)
      throw std::invalid_argument("sampled program: tuple state out of range");
    const int idx = t.state * kNumActions + static_cast<int>(t.action);
    for (double c : t.cost_draws) {
      c_hat[idx] += c;
      ++n_draws[idx];
    }
  }
  double c_lo = std::numeric_limits<double>::infinity();
  double c_hi = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_pairs; ++i) {
    if (n_draws[i] == 0) continue;
    c_hat[i] /= static_cast<double>(n_draws[i]);
    c_lo = std::min(c_lo, c_hat[i]);
    c_hi = std::max(c_hi, c_hat[i]);
  }

  SampledProgramResult r;
  for (int i = 0; i < n_pairs; ++i)
    if (n_draws[i] == 0)
      r.uncovered.emplace_back(i / kNumActions, static_cast<Action>(i % kNumActions));

  // Covered entries start at a uniform lower bound of the feasible set and
  // tighten monotonically; uncovered entries are pinned to the upper bound,
  // which keeps them unattractive inside successor minima.
  const double lower = c_lo / (1.0 - p.gamma);
  const double upper = c_hi / (1.0 - p.gamma);
  r.q = QTable(mdp.geometry.rows, mdp.geometry.cols);
  for (int i = 0; i < n_pairs; ++i) r.q.v[i] = n_draws[i] > 0 ? lower : upper;

  QTable next = r.q;
  for (int it = 1; it <= max_iters; ++it) {
    double change = 0.0;
    for (int s = 0; s < n_states; ++s) {
      for (int ai = 0; ai < kNumActions; ++ai) {
        const int idx = s * kNumActions + ai;
        if (n_draws[idx] == 0) continue;
        const auto& sup = mdp.transitions.support(s, static_cast<Action>(ai));
        const double ce = certainty_equivalent(
            sup.count, [&](int k) { return sup.entries[k].p; },
            [&](int k) { return successor_min(r.q, sup.entries[k].state); },
            p.alpha * p.gamma);
        next.v[idx] = c_hat[idx] + p.gamma * ce;
        change = std::max(change, std::abs(next.v[idx] - r.q.v[idx]));
      }
    }
    std::swap(r.q.v, next.v);
    r.iterations = it;
    if (change <= tol) {
      r.converged = true;
      break;
    }
  }
  if (!r.converged)
    throw SolverError("sampled program: constraint tightening did not converge");

  // Certificate that the result satisfies every sampled constraint.
  for (int s = 0; s < n_states; ++s) {
    for (int ai = 0; ai < kNumActions; ++ai) {
      const int idx = s * kNumActions + ai;
      if (n_draws[idx] == 0) continue;
      const auto& sup = mdp.transitions.support(s, static_cast<Action>(ai));
      const double ce = certainty_equivalent(
          sup.count, [&](int k) { return sup.entries[k].p; },
          [&](int k) { return successor_min(r.q, sup.entries[k].state); },
          p.alpha * p.gamma);
      r.max_constraint_violation =
          std::max(r.max_constraint_violation, r.q.v[idx] - (c_hat[idx] + p.gamma * ce));
    }
  }
  if (r.max_constraint_violation > 10.0 * tol)
    throw SolverError("sampled program: constraint certificate failed");
  return r;
}

long long sample_bound(double epsilon, double beta, long long n_q) {
  if (!(epsilon > 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("sample_bound: epsilon must be in (0, 1]");
  if (!(beta > 0.0 && beta <= 1.0))
    throw std::invalid_argument("sample_bound: beta must be in (0, 1]");
  if (n_q < 1) throw std::invalid_argument("sample_bound: n_q must be positive");
  return static_cast<long long>(
      std::ceil((static_cast<double>(n_q) + std::log(1.0 / beta)) / epsilon));
}

std::string save_qtable(const QTable& q, const EntropicParams& p) {
  auto fmt = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  std::string out = "{\n";
  out += "  \"m\": " + std::to_string(q.m) + ",\n";
  out += "  \"n\": " + std::to_string(q.n) + ",\n";
  out += "  \"alpha\": " + fmt(p.alpha) + ",\n";
  out += "  \"gamma\": " + fmt(p.gamma) + ",\n";
  out += "  \"values\": [";
  for (std::size_t i = 0; i < q.v.size(); ++i) {
    if (i) out += ", ";
    out += fmt(q.v[i]);
  }
  out += "]\n}\n";
  return out;
}

QTable load_qtable(const std::string& text, EntropicParams& p_out) {
  nlohmann::json j = nlohmann::json::parse(text);
  QTable q(j.at("m").get<int>(), j.at("n").get<int>());
  p_out.alpha = j.at("alpha").get<double>();
  p_out.gamma = j.at("gamma").get<double>();
  const auto& vals = j.at("values");
  if (static_cast<int>(vals.size()) != q.n_states() * kNumActions)
    throw std::invalid_argument("load_qtable: value count does not match header");
  for (std::size_t i = 0; i < q.v.size(); ++i) q.v[i] = vals[i].get<double>();
  return q;
}

}  // namespace rap
