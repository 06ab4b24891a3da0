#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rap/grid.hpp"
#include "rap/rau.hpp"
#include "rap/rng.hpp"

namespace rap {

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Risk preferences of the planner. alpha = 0 selects the risk-neutral
// (plain expectation) limit; alpha > 0 is risk-averse over costs.
struct EntropicParams {
  double alpha = 0.0;
  double gamma = 0.0;
};

// State-action value table over an m x n cell window. Values are costs
// to go (negated rewards); lower is better.
struct QTable {
  int m = 0;
  int n = 0;
  std::vector<double> v;  // indexed by (row * n + col) * kNumActions + action

  QTable() = default;
  QTable(int m_, int n_, double fill = 0.0)
      : m(m_), n(n_), v(static_cast<std::size_t>(m_) * n_ * kNumActions, fill) {}

  int n_states() const { return m * n; }
  double& at(int state, Action a) { return v[state * kNumActions + static_cast<int>(a)]; }
  double at(int state, Action a) const { return v[state * kNumActions + static_cast<int>(a)]; }
};

// Immediate cost of every (state, action): the negated expected reward.
using CostTable = std::vector<double>;

CostTable cost_table(const LocalMdp& mdp, const RewardModel& rewards);

inline double cost_at(const CostTable& c, int state, Action a) {
  return c[state * kNumActions + static_cast<int>(a)];
}

// Stationary deterministic policy with the plan horizon it was built for.
struct PlanPolicy {
  std::vector<Action> actions;  // per state
  int horizon = 0;
};

// Weighted sup-norm certificate: w(s) >= 1 everywhere and
// sup_a E[w(s')] <= upsilon * w(s). The default (w == 1, upsilon == 1)
// always qualifies because transition rows sum to one.
struct WeightFn {
  std::vector<double> w;
  double upsilon = 1.0;

  static WeightFn uniform(int n_states) { return {std::vector<double>(n_states, 1.0), 1.0}; }
  bool valid_for(const LocalMdp& mdp) const;
};

// Entropic risk value of sampled costs: (1/alpha) * log mean(exp(alpha * x)),
// computed with a log-sum-exp shift. alpha = 0 returns the sample mean.
double entropic_value(std::span<const double> samples, double alpha);

// Plain discounted accumulation sum_l gamma^l * costs[l].
double discounted_cost(std::span<const double> costs, double gamma);

// Policy-evaluation operator:
//   (TQ)(s,a) = c(s,a) + gamma * (1/(alpha*gamma)) * log sum_s' P(s'|s,a) exp(alpha*gamma * Q(s', pi(s')))
// collapsing to c + gamma * E[Q(s', pi(s'))] at alpha = 0.
QTable bellman_apply(const QTable& q, const PlanPolicy& policy, const LocalMdp& mdp,
                     const CostTable& costs, const EntropicParams& p);

// Optimality operator: as bellman_apply with the successor value
// min_a' Q(s', a') inside the exponent aggregation.
QTable optimal_bellman(const QTable& q, const LocalMdp& mdp, const CostTable& costs,
                       const EntropicParams& p);

struct ValueIterationResult {
  QTable q;
  int iterations = 0;
  bool converged = false;
  double final_change = 0.0;  // weighted sup-norm of the last sweep
};

// Iterates optimal_bellman to the fixed point. Requires
// weight.upsilon * p.gamma < 1 so the a-posteriori contraction bound applies.
ValueIterationResult value_iterate(const QTable& q0, const LocalMdp& mdp,
                                   const CostTable& costs, const EntropicParams& p,
                                   double tol, int max_iters,
                                   const WeightFn& weight);

// Greedy (cost-minimizing) action per state from the one-step entropic
// lookahead; exact ties resolve Straight, then Left, then Right.
PlanPolicy greedy_policy(const QTable& q, const LocalMdp& mdp, const CostTable& costs,
                         const EntropicParams& p);

// Preview tuple (s, a, s', a') with attached sampled cost realizations.
struct SampleTuple {
  int state = 0;
  Action action = Action::Straight;
  int next_state = 0;
  Action next_action = Action::Straight;
  std::vector<double> cost_draws;
};

struct SampleSet {
  std::vector<SampleTuple> tuples;
};

// Uniformly random stationary policies for exploration.
std::vector<PlanPolicy> random_policies(const LocalMdp& mdp, int count, Rng& rng);

// Draws n_per_policy tuples per exploration policy: (s, a) uniform over
// pairs, s' from the slip model, a' the policy's action at s'. Each tuple
// carries `inner` independent cost realizations (successor re-drawn from
// the slip model, reward drawn at the entered cell, negated). Everything
// comes from previewed quantities; no environment interaction.
SampleSet collect_samples(const LocalMdp& mdp, const RewardModel& rewards,
                          const std::vector<PlanPolicy>& exploration_policies,
                          int n_per_policy, int inner, Rng& rng,
                          bool deduplicate = false);

struct SampledProgramResult {
  QTable q;
  int iterations = 0;
  bool converged = false;
  // (state, action) pairs with no samples; their Q is pinned to a
  // pessimistic upper bound so greedy extraction avoids them.
  std::vector<std::pair<int, Action>> uncovered;
  // Post-hoc certificate: max over sampled constraints of Q - rhs(Q).
  double max_constraint_violation = 0.0;
};

// Largest Q satisfying every sampled constraint
//   Q(s,a) <= c_hat(s,a) + gamma * (1/(alpha*gamma)) * log sum_s' P(s'|s,a) exp(alpha*gamma * min_a' Q(s',a'))
// where c_hat is the empirical mean of the sampled cost realizations of
// (s,a). Solved by monotone tightening from a uniform lower bound; the
// maximizer does not depend on the (positive) objective weights, which are
// validated and otherwise unused. Throws SolverError when the iteration
// fails to converge or when objective weights are not positive.
SampledProgramResult solve_sampled_program(const SampleSet& samples, const LocalMdp& mdp,
                                           const EntropicParams& p, double tol,
                                           int max_iters,
                                           const std::vector<double>& objective_weights = {});

// Scenario sample-complexity bound: ceil((1/epsilon) * (n_q + ln(1/beta))).
// epsilon and beta must lie in (0, 1]; n_q is the number of Q entries.
long long sample_bound(double epsilon, double beta, long long n_q);

// Round-trippable serialization: header (m, n, alpha, gamma) plus the
// values flattened row-major by (row, col, action).
std::string save_qtable(const QTable& q, const EntropicParams& p);
QTable load_qtable(const std::string& text, EntropicParams& p_out);

}  // namespace rap
