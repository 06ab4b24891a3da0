#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "rap/grid.hpp"

namespace rap {

// Linear single-track parameters at constant longitudinal speed.
struct VehicleParams {
  double mass = 1300.0;             // kg
  double yaw_inertia = 1.0e4;       // kg m^2
  double cornering_stiffness = 91090.0;
  double speed = 16.75;             // m/s, constant
  double friction = 0.8;            // recorded, unused by the linear model
  double lever_front = 1.6154;      // m
  double lever_rear = 1.3462;       // m
};

// Pose and lateral states: X, Y position, yaw Psi, slip angle alpha,
// yaw rate Psi_dot.
struct EgoState {
  double X = 0.0;
  double Y = 0.0;
  double Psi = 0.0;
  double alpha = 0.0;
  double Psi_dot = 0.0;
};

// Lateral error dynamics d/dt [Y, Psi, alpha, Psi_dot] = A x + B delta.
void make_lateral_matrices(const VehicleParams& p, Eigen::Matrix4d& A,
                           Eigen::Vector4d& B);

// Full state derivative at steering angle delta; Xdot is the constant speed.
EgoState dynamics(const EgoState& s, double delta, const VehicleParams& p);

struct TimedState {
  double t = 0.0;
  EgoState state;
  double delta = 0.0;
};

using Controller = std::function<double(const EgoState&, double)>;

// Classic RK4 at fixed dt over [0, duration]; the controller is re-evaluated
// at every stage. X is advanced analytically (X0 + speed * t), so the
// longitudinal kinematics carry no integration error. Rejects dt <= 0 and
// dt >= duration. The trace holds duration/dt + 1 rows.
std::vector<TimedState> integrate(const EgoState& initial, const Controller& controller,
                                  const VehicleParams& p, double dt, double duration);

// One RK4 step, same stage layout as integrate().
EgoState rk4_step(const EgoState& s, const Controller& controller,
                  const VehicleParams& p, double t, double dt);

struct CareSolution {
  Eigen::MatrixXd P;  // stabilizing solution, symmetric positive definite
  Eigen::MatrixXd K;  // R^{-1} B^T P
  double residual = 0.0;
  int iterations = 0;
};

// Continuous-time algebraic Riccati equation A'P + PA - PBR^{-1}B'P + Q = 0.
// Initialized from the stable invariant subspace of the Hamiltonian matrix
// and polished by Newton (Kleinman) iterations until the residual norm is
// below `tol`. Throws std::runtime_error("unstabilizable ...") when no
// stabilizing solution exists and ("no convergence ...") when polishing
// stalls above tol.
CareSolution solve_care(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                        const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                        double tol = 1e-10, int max_iters = 60);

// Feedback gain for the lateral model under diag(q_diag), scalar r.
Eigen::RowVector4d lqr_gain(const VehicleParams& p,
                            const Eigen::Vector4d& q_diag, double r);

// Time-parameterized lateral reference. X_p(t) = x0 + speed * (t - t0);
// Y_p interpolates the waypoint ordinates with a monotone cubic Hermite
// (zero end slopes), so a one-way lane change never overshoots its target
// ordinate. Evaluation outside [t0, t_end] holds the end values.
class ReferenceTrajectory {
 public:
  ReferenceTrajectory() = default;
  // Ordinates spaced `spacing` seconds apart starting at t0.
  ReferenceTrajectory(double t0, double spacing, double x0, double speed,
                      std::vector<double> ordinates);

  double t0() const { return t0_; }
  double t_end() const { return t0_ + spacing_ * (static_cast<double>(y_.size()) - 1.0); }
  double x_at(double t) const { return x0_ + speed_ * (t - t0_); }
  double y_at(double t) const;
  double end_ordinate() const { return y_.back(); }
  bool empty() const { return y_.empty(); }

 private:
  double t0_ = 0.0, spacing_ = 0.0, x0_ = 0.0, speed_ = 0.0;
  std::vector<double> y_;
  std::vector<double> m_;  // knot slopes
};

// Reference through the row centers of a cell plan, one waypoint every
// `spacing` seconds. Rejects plans that jump more than one row per step.
ReferenceTrajectory waypoints_to_reference(const std::vector<CellId>& plan,
                                           const GridGeometry& g, double t0,
                                           double spacing, double x0, double speed);

// Full-state feedback on the tracking error [Y - Y_p, Psi, alpha, Psi_dot].
double track(const EgoState& s, const ReferenceTrajectory& ref, double t,
             const Eigen::RowVector4d& gain);

}  // namespace rap
