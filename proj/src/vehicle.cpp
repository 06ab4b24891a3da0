#include "rap/vehicle.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace rap {

namespace {

void validate_params(const VehicleParams& p) {
  if (!(p.mass > 0.0) || !(p.yaw_inertia > 0.0) || !(p.cornering_stiffness > 0.0) ||
      !(p.speed > 0.0) || !(p.lever_front > 0.0) || !(p.lever_rear > 0.0)) {
    throw std::invalid_argument("vehicle parameters must be positive");
  }
}

struct LateralCoeffs {
  double a_aa, a_ar, b_a;  // slip-angle row
  double a_ra, a_rr, b_r;  // yaw-rate row
};

LateralCoeffs coeffs(const VehicleParams& p) {
  const double mv = p.mass * p.speed;
  const double K = p.cornering_stiffness;
  const double lever_diff = p.lever_front - p.lever_rear;
  const double lever_sq = p.lever_front * p.lever_front + p.lever_rear * p.lever_rear;
  LateralCoeffs c;
  c.a_aa = -2.0 * K / mv;
  c.a_ar = -(mv - lever_diff * K / p.speed) / mv;
  c.b_a = K / mv;
  c.a_ra = lever_diff * K / p.yaw_inertia;
  c.a_rr = -lever_sq * K / (p.yaw_inertia * p.speed);
  c.b_r = p.lever_front * K / p.yaw_inertia;
  return c;
}

}  // namespace

void make_lateral_matrices(const VehicleParams& p, Eigen::Matrix4d& A,
                           Eigen::Vector4d& B) {
  validate_params(p);
  const LateralCoeffs c = coeffs(p);
  A.setZero();
  A(0, 1) = p.speed;
  A(0, 2) = p.speed;
  A(1, 3) = 1.0;
  A(2, 2) = c.a_aa;
  A(2, 3) = c.a_ar;
  A(3, 2) = c.a_ra;
  A(3, 3) = c.a_rr;
  B << 0.0, 0.0, c.b_a, c.b_r;
}

EgoState dynamics(const EgoState& s, double delta, const VehicleParams& p) {
  const LateralCoeffs c = coeffs(p);
  EgoState d;
  d.X = p.speed;
  d.Y = p.speed * (s.Psi + s.alpha);
  d.Psi = s.Psi_dot;
  d.alpha = c.a_aa * s.alpha + c.a_ar * s.Psi_dot + c.b_a * delta;
  d.Psi_dot = c.a_ra * s.alpha + c.a_rr * s.Psi_dot + c.b_r * delta;
  return d;
}

namespace {

EgoState advance(const EgoState& s, const EgoState& d, double h, double x0,
                 double speed, double t_stage) {
  EgoState n;
  n.X = x0 + speed * t_stage;
  n.Y = s.Y + h * d.Y;
  n.Psi = s.Psi + h * d.Psi;
  n.alpha = s.alpha + h * d.alpha;
  n.Psi_dot = s.Psi_dot + h * d.Psi_dot;
  return n;
}

}  // namespace

EgoState rk4_step(const EgoState& s, const Controller& controller,
                  const VehicleParams& p, double t, double dt) {
  const double x0 = s.X - p.speed * t;  // anchor so stages share one X origin
  const double half = 0.5 * dt;
  const EgoState k1 = dynamics(s, controller(s, t), p);
  const EgoState s2 = advance(s, k1, half, x0, p.speed, t + half);
  const EgoState k2 = dynamics(s2, controller(s2, t + half), p);
  const EgoState s3 = advance(s, k2, half, x0, p.speed, t + half);
  const EgoState k3 = dynamics(s3, controller(s3, t + half), p);
  const EgoState s4 = advance(s, k3, dt, x0, p.speed, t + dt);
  const EgoState k4 = dynamics(s4, controller(s4, t + dt), p);

  EgoState n;
  n.X = x0 + p.speed * (t + dt);
  n.Y = s.Y + dt / 6.0 * (k1.Y + 2.0 * k2.Y + 2.0 * k3.Y + k4.Y);
  n.Psi = s.Psi + dt / 6.0 * (k1.Psi + 2.0 * k2.Psi + 2.0 * k3.Psi + k4.Psi);
  n.alpha = s.alpha + dt / 6.0 * (k1.alpha + 2.0 * k2.alpha + 2.0 * k3.alpha + k4.alpha);
  n.Psi_dot =
      s.Psi_dot + dt / 6.0 * (k1.Psi_dot + 2.0 * k2.Psi_dot + 2.0 * k3.Psi_dot + k4.Psi_dot);
  return n;
}

std::vector<TimedState> integrate(const EgoState& initial, const Controller& controller,
                                  const VehicleParams& p, double dt, double duration) {
  validate_params(p);
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(duration > 0.0)) throw std::invalid_argument("duration must be positive");
  if (dt >= duration) throw std::invalid_argument("dt must be smaller than duration");
  const long long steps = std::llround(duration / dt);
  if (std::abs(static_cast<double>(steps) * dt - duration) > 1e-9 * duration) {
    throw std::invalid_argument("duration must be a whole number of steps");
  }

  std::vector<TimedState> trace;
  trace.reserve(static_cast<std::size_t>(steps) + 1);
  EgoState s = initial;
  const double x0 = initial.X;
  double applied = 0.0;
  for (long long k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    s.X = x0 + p.speed * t;  // exact longitudinal kinematics
    applied = controller(s, t);
    trace.push_back({t, s, applied});
    s = rk4_step(s, controller, p, t, dt);
  }
  const double t_end = static_cast<double>(steps) * dt;
  s.X = x0 + p.speed * t_end;
  trace.push_back({t_end, s, applied});
  return trace;
}

namespace {

// Lyapunov solve Acl' P + P Acl = -S via the Kronecker-vectorized system.
Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& Acl, const Eigen::MatrixXd& S) {
  const Eigen::Index n = Acl.rows();
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n * n, n * n);
  const Eigen::MatrixXd At = Acl.transpose();
  for (Eigen::Index j = 0; j < n; ++j) {
    M.block(j * n, j * n, n, n) += At;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < n; ++k) M(j * n + i, k * n + i) += At(j, k);
    }
  }
  Eigen::VectorXd rhs(n * n);
  for (Eigen::Index j = 0; j < n; ++j) rhs.segment(j * n, n) = -S.col(j);
  const Eigen::VectorXd x = M.fullPivLu().solve(rhs);
  Eigen::MatrixXd P(n, n);
  for (Eigen::Index j = 0; j < n; ++j) P.col(j) = x.segment(j * n, n);
  return 0.5 * (P + P.transpose());
}

double care_residual(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                     const Eigen::MatrixXd& Q, const Eigen::MatrixXd& Rinv,
                     const Eigen::MatrixXd& P) {
  const Eigen::MatrixXd res =
      A.transpose() * P + P * A - P * B * Rinv * B.transpose() * P + Q;
  return res.cwiseAbs().maxCoeff();
}

}  // namespace

CareSolution solve_care(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                        const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                        double tol, int max_iters) {
  const Eigen::Index n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n ||
      R.rows() != B.cols() || R.cols() != B.cols()) {
    throw std::invalid_argument("Riccati dimensions are inconsistent");
  }
  const Eigen::MatrixXd Rinv = R.inverse();
  const Eigen::MatrixXd G = B * Rinv * B.transpose();

  Eigen::MatrixXd H(2 * n, 2 * n);
  H.topLeftCorner(n, n) = A;
  H.topRightCorner(n, n) = -G;
  H.bottomLeftCorner(n, n) = -Q;
  H.bottomRightCorner(n, n) = -A.transpose();

  Eigen::EigenSolver<Eigen::MatrixXd> eig(H);
  if (eig.info() != Eigen::Success) {
    throw std::runtime_error("unstabilizable system: Hamiltonian eigensolve failed");
  }
  Eigen::MatrixXcd basis(2 * n, n);
  Eigen::Index found = 0;
  for (Eigen::Index i = 0; i < 2 * n; ++i) {
    if (eig.eigenvalues()(i).real() < 0.0 && found < n) {
      basis.col(found++) = eig.eigenvectors().col(i);
    }
  }
  if (found != n) {
    throw std::runtime_error("unstabilizable system: Hamiltonian has " +
                             std::to_string(found) + " stable modes, expected " +
                             std::to_string(n));
  }
  const Eigen::MatrixXcd X1 = basis.topRows(n);
  const Eigen::MatrixXcd X2 = basis.bottomRows(n);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(X1);
  if (!lu.isInvertible()) {
    throw std::runtime_error("unstabilizable system: stable subspace is degenerate");
  }
  Eigen::MatrixXd P = (X2 * lu.inverse()).real();
  P = 0.5 * (P + P.transpose());

  CareSolution sol;
  sol.residual = care_residual(A, B, Q, Rinv, P);
  for (int it = 0; it < max_iters && sol.residual > tol; ++it) {
    const Eigen::MatrixXd K = Rinv * B.transpose() * P;
    const Eigen::MatrixXd Acl = A - B * K;
    P = solve_lyapunov(Acl, Q + K.transpose() * R * K);
    sol.residual = care_residual(A, B, Q, Rinv, P);
    sol.iterations = it + 1;
  }
  if (sol.residual > tol) {
    throw std::runtime_error("no convergence: Riccati residual " +
                             std::to_string(sol.residual));
  }
  sol.P = P;
  sol.K = Rinv * B.transpose() * P;

  const Eigen::MatrixXd Acl = A - B * sol.K;
  Eigen::EigenSolver<Eigen::MatrixXd> cl(Acl);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (cl.eigenvalues()(i).real() >= 0.0) {
      throw std::runtime_error("unstabilizable system: closed loop is not stable");
    }
  }
  return sol;
}

Eigen::RowVector4d lqr_gain(const VehicleParams& p, const Eigen::Vector4d& q_diag,
                            double r) {
  validate_params(p);
  if (!(r > 0.0)) throw std::invalid_argument("control weight must be positive");
  if (q_diag.minCoeff() < 0.0) {
    throw std::invalid_argument("state weights must be nonnegative");
  }
  Eigen::Matrix4d A;
  Eigen::Vector4d B;
  make_lateral_matrices(p, A, B);
  Eigen::MatrixXd Q = q_diag.asDiagonal();
  Eigen::MatrixXd R(1, 1);
  R(0, 0) = r;
  const CareSolution sol = solve_care(A, B, Q, R, 1e-10, 60);
  return sol.K.row(0);
}

ReferenceTrajectory::ReferenceTrajectory(double t0, double spacing, double x0,
                                         double speed, std::vector<double> ordinates)
    : t0_(t0), spacing_(spacing), x0_(x0), speed_(speed), y_(std::move(ordinates)) {
  if (y_.empty()) throw std::invalid_argument("reference needs at least one ordinate");
  if (!(spacing_ > 0.0)) throw std::invalid_argument("waypoint spacing must be positive");
  const std::size_t n = y_.size();
  m_.assign(n, 0.0);
  if (n < 3) return;

  // Monotone cubic Hermite (Fritsch-Butland): harmonic-mean knot slopes where
  // adjacent secants agree in sign, zero where they disagree or at the ends.
  // The interpolant never overshoots the ordinate range of its segment, so a
  // lane reference stays between the rows it connects.
  const double h = spacing_;
  for (std::size_t j = 1; j + 1 < n; ++j) {
    const double d0 = (y_[j] - y_[j - 1]) / h;
    const double d1 = (y_[j + 1] - y_[j]) / h;
    if (d0 * d1 > 0.0) m_[j] = 2.0 * d0 * d1 / (d0 + d1);
  }
}

double ReferenceTrajectory::y_at(double t) const {
  const std::size_t n = y_.size();
  if (n == 1 || t <= t0_) return y_.front();
  if (t >= t_end()) return y_.back();
  const double h = spacing_;
  auto j = static_cast<std::size_t>((t - t0_) / h);
  if (j > n - 2) j = n - 2;
  const double u = (t - (t0_ + static_cast<double>(j) * h)) / h;
  const double u2 = u * u;
  const double u3 = u2 * u;
  return y_[j] * (2.0 * u3 - 3.0 * u2 + 1.0) + m_[j] * h * (u3 - 2.0 * u2 + u) +
         y_[j + 1] * (3.0 * u2 - 2.0 * u3) + m_[j + 1] * h * (u3 - u2);
}

ReferenceTrajectory waypoints_to_reference(const std::vector<CellId>& plan,
                                           const GridGeometry& g, double t0,
                                           double spacing, double x0, double speed) {
  if (plan.empty()) throw std::invalid_argument("plan must not be empty");
  std::vector<double> ordinates;
  ordinates.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (!g.contains(plan[i])) throw std::invalid_argument("plan leaves the grid");
    if (i > 0 && std::abs(plan[i].row - plan[i - 1].row) > 1) {
      throw std::invalid_argument("plan jumps more than one row per step");
    }
    ordinates.push_back(g.cell_center(plan[i]).second);
  }
  return ReferenceTrajectory(t0, spacing, x0, speed, std::move(ordinates));
}

double track(const EgoState& s, const ReferenceTrajectory& ref, double t,
             const Eigen::RowVector4d& gain) {
  Eigen::Vector4d e;
  e << s.Y - ref.y_at(t), s.Psi, s.alpha, s.Psi_dot;
  return -gain.dot(e);
}

}  // namespace rap
