#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "rap/sim.hpp"

namespace {

int cmd_plan(const std::string& config_path) {
  const rap::ScenarioConfig cfg = rap::load_config(config_path);
  const rap::GridGeometry g = cfg.geometry();
  rap::EgoState ego;
  ego.X = cfg.ego_x;
  ego.Y = cfg.ego_y;
  const double window_x0 = std::floor(ego.X / g.cell_length) * g.cell_length;
  std::vector<rap::ParticipantState> parts = cfg.participants;
  for (auto& p : parts) p.x -= window_x0;

  rap::Rng rng(cfg.seed);
  const rap::PlanOutcome po = rap::plan_window(cfg, parts, ego, window_x0, 0.0, rng);

  const auto& v = po.solved.q.v;
  const double q_min = *std::min_element(v.begin(), v.end());
  const double q_max = *std::max_element(v.begin(), v.end());
  double q_mean = 0.0;
  for (double x : v) q_mean += x;
  q_mean /= static_cast<double>(v.size());

  std::printf("entries: %zu  alpha: %g  gamma: %g\n", v.size(), cfg.entropic.alpha,
              cfg.entropic.gamma);
  std::printf("q min: %.6g  q max: %.6g  q mean: %.6g\n", q_min, q_max, q_mean);
  std::printf("iterations: %d  converged: %s  max constraint violation: %.3g\n",
              po.solved.iterations, po.solved.converged ? "yes" : "no",
              po.solved.max_constraint_violation);
  std::printf("uncovered pairs: %zu\n", po.solved.uncovered.size());
  std::printf("goals:");
  for (const auto& c : po.classification.goals) std::printf(" (%d,%d)", c.row, c.col);
  std::printf("\nplan:");
  for (const auto& c : po.cells) std::printf(" (%d,%d)", c.row, c.col);
  std::printf("\n");
  return 0;
}

int cmd_simulate(const std::string& config_path, const std::uint64_t* seed,
                 const std::string& out_dir) {
  rap::ScenarioConfig cfg = rap::load_config(config_path);
  if (seed != nullptr) cfg.seed = *seed;
  rap::Rng rng(cfg.seed);
  const rap::EpisodeResult r = rap::run_episode(cfg, rng);
  rap::emit_episode(r, cfg, out_dir);
  std::printf("rows: %zu  plans: %zu  replans: %d  collision: %s  "
              "no_safe_override: %s  saturation: %d\n",
              r.trace.size(), r.plans.size(), r.replans, r.collision ? "yes" : "no",
              r.no_safe_override ? "yes" : "no", r.saturation_events);
  return r.safety_violation() ? 3 : 0;
}

int cmd_montecarlo(const std::string& config_path, int runs,
                   const std::vector<double>& alphas, const std::string& out_dir) {
  const rap::ScenarioConfig cfg = rap::load_config(config_path);
  const std::vector<rap::RunSummary> summaries = rap::monte_carlo(cfg, runs, alphas);
  std::filesystem::create_directories(out_dir);
  rap::write_run_summaries(summaries,
                           (std::filesystem::path(out_dir) / "summary.json").string());
  bool violated = false;
  for (const auto& s : summaries) {
    std::printf("alpha %-6g runs %d  collisions %d  no_safe_overrides %d  replans %d  "
                "y variance %.6g  wall %.2fs\n",
                s.alpha, s.runs, s.collisions, s.no_safe_overrides, s.replans,
                s.aggregate_y_variance, s.wall_seconds);
    violated = violated || s.collisions > 0 || s.no_safe_overrides > 0;
  }
  return violated ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"risk-averse grid planner with closed-loop highway simulation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int runs = 10;
  std::vector<double> alphas{0.0, 0.2};
  double epsilon = 0.0, beta = 0.0;
  long long n_q = 0;

  CLI::App* plan = app.add_subcommand("plan", "solve one planning window");
  plan->add_option("config", config_path, "scenario JSON file")->required();

  CLI::App* simulate = app.add_subcommand("simulate", "run one closed-loop episode");
  simulate->add_option("config", config_path, "scenario JSON file")->required();
  simulate->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_given = true; });
  simulate->add_option("--out", out_dir, "output directory");

  CLI::App* mc = app.add_subcommand("montecarlo", "run a seeded episode batch per alpha");
  mc->add_option("config", config_path, "scenario JSON file")->required();
  mc->add_option("--runs", runs, "episodes per alpha");
  mc->add_option("--alphas", alphas, "risk-aversion levels")->delimiter(',');
  mc->add_option("--out", out_dir, "output directory");

  CLI::App* bound = app.add_subcommand("bound", "print the sample-complexity bound");
  bound->add_option("--epsilon", epsilon, "constraint violation level")->required();
  bound->add_option("--beta", beta, "confidence level")->required();
  bound->add_option("--nq", n_q, "number of Q entries")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (plan->parsed()) return cmd_plan(config_path);
    if (simulate->parsed()) {
      return cmd_simulate(config_path, seed_given ? &seed : nullptr, out_dir);
    }
    if (mc->parsed()) return cmd_montecarlo(config_path, runs, alphas, out_dir);
    if (bound->parsed()) {
      std::printf("%lld\n", rap::sample_bound(epsilon, beta, n_q));
      return 0;
    }
  } catch (const rap::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const rap::SolverError& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
