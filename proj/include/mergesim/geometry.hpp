#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>

namespace mergesim {

using Vector2d = Eigen::Vector2d;
using Vector4d = Eigen::Vector4d;
using Vector5d = Eigen::Matrix<double, 5, 1>;
using Matrix2d = Eigen::Matrix2d;
using Matrix4d = Eigen::Matrix4d;
using Matrix5d = Eigen::Matrix<double, 5, 5>;

/// 5x5 covariance over (x, y, psi, vx, vy).
using StateCovariance = Matrix5d;

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  double r = std::remainder(a, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  return r;
}

/// Smallest signed difference a - b on the circle.
inline double angle_diff(double a, double b) { return normalize_angle(a - b); }

/// Planar pose of a vehicle frame V in the world frame W.
struct FramePose {
  double x = 0.0;   // m
  double y = 0.0;   // m
  double psi = 0.0; // rad, counterclockwise from world x-axis, in (-pi, pi]

  FramePose() = default;
  FramePose(double x_, double y_, double psi_) : x(x_), y(y_), psi(normalize_angle(psi_)) {}
};

/// World-frame kinematic state (x, y, psi, vx, vy).
struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double psi = 0.0;
  double vx = 0.0;
  double vy = 0.0;

  VehicleState() = default;
  VehicleState(double x_, double y_, double psi_, double vx_, double vy_)
      : x(x_), y(y_), psi(normalize_angle(psi_)), vx(vx_), vy(vy_) {}

  static VehicleState from_vector(const Vector5d& v) {
    return VehicleState(v[0], v[1], v[2], v[3], v[4]);
  }

  Vector5d to_vector() const {
    Vector5d v;
    v << x, y, psi, vx, vy;
    return v;
  }

  Vector2d position() const { return {x, y}; }
  Vector2d velocity() const { return {vx, vy}; }
  double speed() const { return std::hypot(vx, vy); }

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(psi) &&
           std::isfinite(vx) && std::isfinite(vy);
  }

  FramePose pose() const { return {x, y, psi}; }
};

/// Relative measurement of a target in the observer's vehicle frame V.
struct RelativeMeasurement {
  double dx = 0.0;  // m
  double dy = 0.0;  // m
  double dvx = 0.0; // m/s
  double dvy = 0.0; // m/s
  Matrix4d cov = Matrix4d::Zero();
  double timestamp = 0.0; // s
  std::uint32_t observer_id = 0;
  std::optional<std::uint32_t> target_id; // absent for anonymous detections

  Vector4d to_vector() const {
    Vector4d v;
    v << dx, dy, dvx, dvy;
    return v;
  }
};

inline Matrix2d rotation2d(double psi) {
  const double c = std::cos(psi), s = std::sin(psi);
  Matrix2d r;
  r << c, -s, s, c;
  return r;
}

/// Rotates a vehicle-frame 2-vector into the world frame.
inline Vector2d rotate_v_to_w(const FramePose& pose, const Vector2d& vec) {
  return rotation2d(pose.psi) * vec;
}

/// Rotates a world-frame 2-vector into the vehicle frame.
inline Vector2d rotate_w_to_v(const FramePose& pose, const Vector2d& vec) {
  return rotation2d(pose.psi).transpose() * vec;
}

/// Below this speed the composed target heading falls back to the observer's,
/// and the predicted heading in the motion model holds the previous value.
inline constexpr double kHeadingSpeedFloor = 0.1; // m/s

/// Composes the absolute world-frame state of a target from the observer
/// state and a relative measurement taken in the observer's vehicle frame.
/// The target heading is taken from the resulting world velocity direction;
/// relative measurements carry no heading channel.
inline VehicleState compose_measurement(const VehicleState& observer,
                                        const RelativeMeasurement& m) {
  if (!observer.finite() || !std::isfinite(m.dx) || !std::isfinite(m.dy) ||
      !std::isfinite(m.dvx) || !std::isfinite(m.dvy)) {
    throw std::invalid_argument("compose_measurement: non-finite input");
  }
  const Matrix2d r = rotation2d(observer.psi);
  const Vector2d pos = observer.position() + r * Vector2d(m.dx, m.dy);
  const Vector2d vel = observer.velocity() + r * Vector2d(m.dvx, m.dvy);
  const double speed = vel.norm();
  const double psi = speed >= kHeadingSpeedFloor ? std::atan2(vel.y(), vel.x())
                                                 : observer.psi;
  return VehicleState(pos.x(), pos.y(), psi, vel.x(), vel.y());
}

/// Recovers the relative measurement vector (dx, dy, dvx, dvy) that composes
/// to `target` from `observer`. Exact inverse of compose_measurement.
inline Vector4d decompose_measurement(const VehicleState& observer,
                                      const VehicleState& target) {
  const Matrix2d rt = rotation2d(observer.psi).transpose();
  const Vector2d dp = rt * (target.position() - observer.position());
  const Vector2d dv = rt * (target.velocity() - observer.velocity());
  Vector4d out;
  out << dp.x(), dp.y(), dv.x(), dv.y();
  return out;
}

/// Jacobian of compose_measurement with respect to the stacked inputs
/// (observer state, relative measurement), a 5x9 matrix evaluated at the
/// working point. Row order matches VehicleState, column order is
/// (x, y, psi, vx, vy, dx, dy, dvx, dvy).
inline Eigen::Matrix<double, 5, 9> compose_measurement_jacobian(
    const VehicleState& observer, const RelativeMeasurement& m) {
  const double c = std::cos(observer.psi), s = std::sin(observer.psi);
  Eigen::Matrix<double, 5, 9> j = Eigen::Matrix<double, 5, 9>::Zero();

  // X = x + c*dx - s*dy
  j(0, 0) = 1.0;
  j(0, 2) = -s * m.dx - c * m.dy;
  j(0, 5) = c;
  j(0, 6) = -s;
  // Y = y + s*dx + c*dy
  j(1, 1) = 1.0;
  j(1, 2) = c * m.dx - s * m.dy;
  j(1, 5) = s;
  j(1, 6) = c;
  // VX = vx + c*dvx - s*dvy
  j(3, 2) = -s * m.dvx - c * m.dvy;
  j(3, 3) = 1.0;
  j(3, 7) = c;
  j(3, 8) = -s;
  // VY = vy + s*dvx + c*dvy
  j(4, 2) = c * m.dvx - s * m.dvy;
  j(4, 4) = 1.0;
  j(4, 7) = s;
  j(4, 8) = c;

  const double wvx = observer.vx + c * m.dvx - s * m.dvy;
  const double wvy = observer.vy + s * m.dvx + c * m.dvy;
  const double v2 = wvx * wvx + wvy * wvy;
  if (std::sqrt(v2) >= kHeadingSpeedFloor) {
    // PSI = atan2(VY, VX), chained through the velocity rows.
    const double dpsi_dvx = -wvy / v2;
    const double dpsi_dvy = wvx / v2;
    for (int col = 0; col < 9; ++col) {
      j(2, col) = dpsi_dvx * j(3, col) + dpsi_dvy * j(4, col);
    }
  } else {
    j(2, 2) = 1.0; // falls back to the observer heading
  }
  return j;
}

/// Propagates observer and measurement uncertainty through
/// compose_measurement: J * blockdiag(observer_cov, m.cov) * J^T, with J the
/// Jacobian evaluated at the working point (observer, m).
inline StateCovariance propagate_covariance(const VehicleState& observer,
                                            const RelativeMeasurement& m,
                                            const StateCovariance& observer_cov) {
  const Eigen::Matrix<double, 5, 9> j = compose_measurement_jacobian(observer, m);
  Eigen::Matrix<double, 9, 9> aug = Eigen::Matrix<double, 9, 9>::Zero();
  aug.topLeftCorner<5, 5>() = observer_cov;
  aug.bottomRightCorner<4, 4>() = m.cov;
  StateCovariance out = j * aug * j.transpose();
  return 0.5 * (out + out.transpose());
}

/// Componentwise standard-deviation rotation. Kept as an auditable parity
/// mode next to the full-matrix path: rotating std-dev vectors componentwise
/// can produce negative entries (e.g. psi = pi/2 flips the x row), which is
/// why propagate_covariance is the default. The vy row reuses sigma_vx,
/// matching the legacy componentwise formulation verbatim.
inline Vector5d rotate_stddevs_componentwise(double psi, const Vector5d& sigma_v) {
  const double c = std::cos(psi), s = std::sin(psi);
  Vector5d out;
  out[0] = c * sigma_v[0] - s * sigma_v[1];
  out[1] = s * sigma_v[0] + c * sigma_v[1];
  out[2] = sigma_v[2];
  out[3] = c * sigma_v[3] - s * sigma_v[4];
  out[4] = s * sigma_v[3] + c * sigma_v[3];
  return out;
}

inline bool is_symmetric(const Eigen::Ref<const Eigen::MatrixXd>& m, double tol = 1e-9) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline bool is_psd(const Eigen::Ref<const Eigen::MatrixXd>& m, double tol = 1e-9) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -tol;
}

} // namespace mergesim
