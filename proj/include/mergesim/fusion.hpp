#pragma once

#include "mergesim/geometry.hpp"
#include "mergesim/sensors.hpp"
#include "mergesim/v2x.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mergesim {

struct SingularInnovationCovariance : std::runtime_error {
  SingularInnovationCovariance()
      : std::runtime_error("innovation covariance is singular (degenerate R and P)") {}
};

enum class MeasurementSource { kSensor, kCam, kCpm };

using TrackId = std::uint64_t;

/// One fused object estimate inside the extended environment model.
struct Track {
  TrackId track_id = 0;
  std::optional<std::uint32_t> vehicle_id;
  VehicleState state;
  StateCovariance cov = StateCovariance::Identity();
  double state_time = 0.0;  // validity time of `state`
  double last_update = 0.0; // time of the last absorbed measurement
  double first_seen = 0.0;
  bool equipped = false;
  VehicleRole role = VehicleRole::kUnknown;
  double ax_estimate = 0.0; // smoothed longitudinal acceleration, m/s^2

  double age(double clock) const { return clock - first_seen; }
};

struct EkfConfig {
  /// Continuous-time process noise intensity, diag(x, y, psi, vx, vy).
  Vector5d process_noise = (Vector5d() << 0.1, 0.1, 0.01, 0.5, 0.5).finished();
  double gate = 3.0;          // Mahalanobis units for anonymous association
  double stale_timeout = 1.0; // s
  bool compensate_latency = true;
  /// Fallback measurement noise used when a measurement carries no covariance.
  double default_position_var = 0.25;  // m^2
  double default_velocity_var = 0.09;  // (m/s)^2
  double default_heading_var = 0.01;   // rad^2

  Matrix5d process_noise_matrix() const { return process_noise.asDiagonal(); }
};

/// Constant-velocity motion model in world coordinates, heading slaved to the
/// velocity direction above the speed floor.
inline VehicleState motion_model(const VehicleState& s, double dt) {
  if (dt == 0.0) return s;
  VehicleState out = s;
  out.x = s.x + s.vx * dt;
  out.y = s.y + s.vy * dt;
  if (s.speed() >= kHeadingSpeedFloor) out.psi = std::atan2(s.vy, s.vx);
  return out;
}

/// Jacobian of motion_model at the working point.
inline Matrix5d motion_model_jacobian(const VehicleState& s, double dt) {
  Matrix5d f = Matrix5d::Identity();
  if (dt == 0.0) return f;
  f(0, 3) = dt;
  f(1, 4) = dt;
  const double v2 = s.vx * s.vx + s.vy * s.vy;
  if (std::sqrt(v2) >= kHeadingSpeedFloor) {
    f(2, 2) = 0.0;
    f(2, 3) = -s.vy / v2;
    f(2, 4) = s.vx / v2;
  }
  return f;
}

/// Propagates a track by dt, inflating covariance with F P F^T + Q dt.
inline void ekf_predict(Track& track, double dt, const EkfConfig& cfg) {
  if (dt < 0.0) throw std::invalid_argument("ekf_predict: negative dt");
  if (dt == 0.0) return;
  const Matrix5d f = motion_model_jacobian(track.state, dt);
  track.state = motion_model(track.state, dt);
  track.cov = f * track.cov * f.transpose() + cfg.process_noise_matrix() * dt;
  track.cov = 0.5 * (track.cov + track.cov.transpose()).eval();
  track.state_time += dt;
}

namespace detail {

template <int N>
void kalman_correct(Track& track, const Eigen::Matrix<double, N, 1>& innovation,
                    const Eigen::Matrix<double, N, 5>& h,
                    const Eigen::Matrix<double, N, N>& r) {
  const Eigen::Matrix<double, N, N> s = h * track.cov * h.transpose() + r;
  Eigen::LDLT<Eigen::Matrix<double, N, N>> ldlt(s);
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 0.0) {
    throw SingularInnovationCovariance();
  }
  const Eigen::Matrix<double, 5, N> gain = ldlt.solve(h * track.cov).transpose();
  Vector5d dx = gain * innovation;
  track.state.x += dx[0];
  track.state.y += dx[1];
  track.state.psi = normalize_angle(track.state.psi + dx[2]);
  track.state.vx += dx[3];
  track.state.vy += dx[4];
  const Matrix5d ikh = Matrix5d::Identity() - gain * h;
  track.cov = ikh * track.cov * ikh.transpose() + gain * r * gain.transpose();
  track.cov = 0.5 * (track.cov + track.cov.transpose()).eval();
}

} // namespace detail

/// Full-state correction (x, y, psi, vx, vy), used for awareness and
/// perceived-object measurements.
inline void ekf_update_full(Track& track, const VehicleState& z, const Matrix5d& r) {
  Eigen::Matrix<double, 5, 1> innovation;
  innovation << z.x - track.state.x, z.y - track.state.y,
      angle_diff(z.psi, track.state.psi), z.vx - track.state.vx, z.vy - track.state.vy;
  detail::kalman_correct<5>(track, innovation, Eigen::Matrix<double, 5, 5>::Identity(), r);
}

/// Position + velocity correction (4 components), used for local sensor
/// detections, which carry no heading channel.
inline void ekf_update_posvel(Track& track, const Vector4d& z, const Matrix4d& r) {
  Eigen::Matrix<double, 4, 5> h = Eigen::Matrix<double, 4, 5>::Zero();
  h(0, 0) = h(1, 1) = 1.0;
  h(2, 3) = h(3, 4) = 1.0;
  Vector4d innovation;
  innovation << z[0] - track.state.x, z[1] - track.state.y, z[2] - track.state.vx,
      z[3] - track.state.vy;
  detail::kalman_correct<4>(track, innovation, h, r);
}

enum class IngestStatus { kApplied, kStaleDropped };

struct EnvironmentSnapshot {
  double clock = 0.0;
  std::vector<Track> tracks; // predicted to `clock`, sorted by track_id

  const Track* find_vehicle(std::uint32_t vehicle_id) const {
    for (const Track& t : tracks) {
      if (t.vehicle_id && *t.vehicle_id == vehicle_id) return &t;
    }
    return nullptr;
  }
};

/// The extended environment model of one ego vehicle: local detections,
/// received awareness reports and perceived-object lists fused into per-object
/// EKF tracks.
class EnvironmentModel {
 public:
  EnvironmentModel(std::uint32_t ego_id, EkfConfig cfg) : ego_id_(ego_id), cfg_(cfg) {}

  const EkfConfig& config() const { return cfg_; }
  std::uint32_t ego_id() const { return ego_id_; }
  std::uint64_t stale_dropped() const { return stale_dropped_; }

  /// The ego's own state estimate, used to compose local detections into the
  /// world frame and to reject perceived-object echoes of the ego itself.
  void set_ego_state(const VehicleState& state, double clock) {
    ego_state_ = state;
    ego_clock_ = clock;
  }

  const VehicleState& ego_state() const { return ego_state_; }

  /// Gated nearest-neighbor association. Measurements carrying a vehicle id
  /// match by id (miss = new track); anonymous ones match the nearest track
  /// by Mahalanobis position distance inside the gate.
  std::optional<TrackId> associate(const Vector2d& position, const Matrix2d& pos_cov,
                                   std::optional<std::uint32_t> vehicle_id) const {
    if (vehicle_id) {
      const auto it = by_vehicle_.find(*vehicle_id);
      if (it != by_vehicle_.end()) return it->second;
      return std::nullopt;
    }
    std::optional<TrackId> best;
    double best_dist = cfg_.gate;
    for (const auto& [tid, track] : tracks_) {
      Matrix2d s = track.cov.topLeftCorner<2, 2>() + pos_cov;
      Eigen::LDLT<Matrix2d> ldlt(s);
      if (ldlt.info() != Eigen::Success) continue;
      const Vector2d diff = position - track.state.position();
      const double d2 = diff.dot(ldlt.solve(diff));
      if (d2 < 0.0) continue;
      const double d = std::sqrt(d2);
      if (d <= best_dist) {
        best_dist = d;
        best = tid;
      }
    }
    return best;
  }

  /// Feeds one local sensor detection, composed to the world frame with the
  /// current ego state.
  void ingest_detection(const RelativeMeasurement& m, double clock) {
    const VehicleState composed = compose_measurement(ego_state_, m);
    const StateCovariance world_cov = propagate_covariance(ego_state_, m, ego_own_cov_);
    Vector4d z;
    z << composed.x, composed.y, composed.vx, composed.vy;
    Matrix4d r = Matrix4d::Zero();
    const int map[4] = {0, 1, 3, 4};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) r(i, j) = world_cov(map[i], map[j]);

    const auto tid = associate(composed.position(), r.topLeftCorner<2, 2>(), m.target_id);
    if (!tid) {
      create_track(composed, world_cov, m.target_id, clock, false, VehicleRole::kUnknown);
      return;
    }
    Track& track = tracks_.at(*tid);
    predict_to(track, clock);
    const double prev_vx = track.state.vx;
    const double prev_t = track.last_update;
    ekf_update_posvel(track, z, r);
    finish_update(track, clock, prev_vx, prev_t);
    if (m.target_id && !track.vehicle_id) bind_vehicle(track, *m.target_id);
  }

  void ingest_detections(const std::vector<Detection>& detections, double clock) {
    for (const Detection& d : detections) ingest_detection(d.measurement, clock);
  }

  /// Applies one received message. All tracks are first predicted to the
  /// receive time; each measurement is advanced from its generation time to
  /// the receive time through the motion model, so communication latency is
  /// an explicit prediction step rather than an ignored offset.
  IngestStatus ingest_message(const V2xMessage& msg, double receive_time) {
    if (receive_time < msg.generation_time - 1e-9) {
      throw std::invalid_argument("ingest_message: receive_time before generation_time");
    }
    auto [it, inserted] = last_sequence_.try_emplace(msg.sender_id, msg.sequence);
    if (!inserted) {
      if (msg.sequence <= it->second) {
        ++stale_dropped_;
        return IngestStatus::kStaleDropped;
      }
      it->second = msg.sequence;
    }

    for (auto& [tid, track] : tracks_) predict_to(track, receive_time);

    const double latency = receive_time - msg.generation_time;

    // Awareness part: the sender's own report creates or updates its track.
    {
      VehicleState z = msg.sender_state;
      Matrix5d r = msg.sender_cov;
      advance_measurement(z, r, latency);
      apply_full_measurement(z, r, msg.sender_id, receive_time, true, msg.role);
    }

    // Perceived objects; echoes of the ego itself are not tracked.
    for (const PerceivedObject& obj : msg.perceived) {
      if (obj.target_id && *obj.target_id == ego_id_) continue;
      if (!obj.target_id &&
          (obj.state.position() - ego_state_.position()).norm() < kEgoEchoRadius) {
        continue;
      }
      VehicleState z = obj.state;
      Matrix5d r = obj.cov;
      advance_measurement(z, r, latency);
      apply_full_measurement(z, r, obj.target_id, receive_time, false, VehicleRole::kUnknown);
    }
    return IngestStatus::kApplied;
  }

  /// Removes stale tracks, then returns every remaining track predicted to
  /// `clock`. The snapshot is an immutable value; the model keeps its own
  /// validity times.
  EnvironmentSnapshot prune_and_snapshot(double clock) {
    for (auto it = tracks_.begin(); it != tracks_.end();) {
      if (clock - it->second.last_update > cfg_.stale_timeout) {
        if (it->second.vehicle_id) by_vehicle_.erase(*it->second.vehicle_id);
        it = tracks_.erase(it);
      } else {
        ++it;
      }
    }
    EnvironmentSnapshot snap;
    snap.clock = clock;
    snap.tracks.reserve(tracks_.size());
    for (const auto& [tid, track] : tracks_) {
      Track copy = track;
      if (clock > copy.state_time) {
        ekf_predict(copy, clock - copy.state_time, cfg_);
      }
      snap.tracks.push_back(std::move(copy));
    }
    return snap;
  }

  std::size_t track_count() const { return tracks_.size(); }

 private:
  static constexpr double kEgoEchoRadius = 2.0; // m

  void predict_to(Track& track, double time) {
    if (time > track.state_time) ekf_predict(track, time - track.state_time, cfg_);
  }

  /// Advances a full-state measurement by `latency` through the motion model
  /// and inflates its covariance accordingly. Disabled (an intentional,
  /// measurable bias) when compensate_latency is off.
  void advance_measurement(VehicleState& z, Matrix5d& r, double latency) const {
    if (!cfg_.compensate_latency || latency <= 0.0) return;
    const Matrix5d f = motion_model_jacobian(z, latency);
    z = motion_model(z, latency);
    r = f * r * f.transpose() + cfg_.process_noise_matrix() * latency;
    r = 0.5 * (r + r.transpose()).eval();
  }

  void apply_full_measurement(const VehicleState& z, const Matrix5d& r,
                              std::optional<std::uint32_t> vehicle_id, double time,
                              bool equipped, VehicleRole role) {
    const auto tid = associate(z.position(), r.topLeftCorner<2, 2>(), vehicle_id);
    if (!tid) {
      create_track(z, r, vehicle_id, time, equipped, role);
      return;
    }
    Track& track = tracks_.at(*tid);
    const double prev_vx = track.state.vx;
    const double prev_t = track.last_update;
    ekf_update_full(track, z, r);
    finish_update(track, time, prev_vx, prev_t);
    if (equipped) {
      track.equipped = true;
      track.role = role;
    }
    if (vehicle_id && !track.vehicle_id) bind_vehicle(track, *vehicle_id);
  }

  Track& create_track(const VehicleState& state, const StateCovariance& cov,
                      std::optional<std::uint32_t> vehicle_id, double time, bool equipped,
                      VehicleRole role) {
    Track track;
    track.track_id = next_track_id_++;
    track.vehicle_id = vehicle_id;
    track.state = state;
    track.cov = cov;
    // A fresh track has no velocity history; keep the covariance usable for
    // gating even when the measurement was near-exact.
    for (int i = 0; i < 5; ++i) track.cov(i, i) = std::max(track.cov(i, i), 1e-8);
    track.state_time = time;
    track.last_update = time;
    track.first_seen = time;
    track.equipped = equipped;
    track.role = role;
    auto [it, ok] = tracks_.emplace(track.track_id, std::move(track));
    if (vehicle_id) by_vehicle_[*vehicle_id] = it->first;
    return it->second;
  }

  void bind_vehicle(Track& track, std::uint32_t vehicle_id) {
    track.vehicle_id = vehicle_id;
    by_vehicle_[vehicle_id] = track.track_id;
  }

  void finish_update(Track& track, double time, double prev_vx, double prev_time) {
    const double dt = time - prev_time;
    if (dt > 1e-3 && track.last_update > 0.0) {
      const double raw = (track.state.vx - prev_vx) / dt;
      track.ax_estimate = 0.7 * track.ax_estimate + 0.3 * raw;
    }
    track.last_update = time;
    track.state_time = time;
  }

  std::uint32_t ego_id_;
  EkfConfig cfg_;
  VehicleState ego_state_;
  double ego_clock_ = 0.0;
  StateCovariance ego_own_cov_ = StateCovariance::Zero();
  std::map<TrackId, Track> tracks_;
  std::map<std::uint32_t, TrackId> by_vehicle_;
  std::map<std::uint32_t, std::uint32_t> last_sequence_;
  std::uint64_t stale_dropped_ = 0;
  TrackId next_track_id_ = 1;
};

} // namespace mergesim
