#include "mergesim/fusion.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace mergesim;

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Wilson-Hilferty approximation of the chi-square quantile; accurate to a
/// fraction of a percent at the large degrees of freedom used here.
double chi2_quantile(double z, double dof) {
  const double a = 2.0 / (9.0 * dof);
  const double c = 1.0 - a + z * std::sqrt(a);
  return dof * c * c * c;
}

Track make_track(const VehicleState& state, const StateCovariance& cov, double time = 0.0) {
  Track t;
  t.track_id = 1;
  t.state = state;
  t.cov = cov;
  t.state_time = time;
  t.last_update = time;
  t.first_seen = time;
  return t;
}

V2xMessage cam_only(std::uint32_t sender, std::uint32_t seq, double t,
                    const VehicleState& state, double var = 0.04) {
  V2xMessage msg;
  msg.sender_id = sender;
  msg.sequence = seq;
  msg.generation_time = t;
  msg.role = VehicleRole::kMainLane;
  msg.sender_state = state;
  msg.sender_cov = StateCovariance::Identity() * var;
  return msg;
}

} // namespace

TEST_CASE("ekf_predict with dt zero leaves the track unchanged") {
  EkfConfig cfg;
  Track t = make_track(VehicleState(1, 2, 0.5, 10, 3), StateCovariance::Identity());
  Track before = t;
  ekf_predict(t, 0.0, cfg);
  CHECK(t.state.to_vector() == before.state.to_vector());
  CHECK((t.cov - before.cov).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ekf_predict advances position and inflates covariance") {
  EkfConfig cfg;
  Track t = make_track(VehicleState(0, 0, 0, 10, 0), StateCovariance::Identity());
  const double trace_before = t.cov.trace();
  ekf_predict(t, 1.0, cfg);
  CHECK(t.state.x == Catch::Approx(10.0));
  CHECK(t.cov.trace() > trace_before);
}

TEST_CASE("motion model Jacobian matches central finite differences") {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    VehicleState s(uniform(rng, -100, 100), uniform(rng, -100, 100), uniform(rng, -3, 3),
                   uniform(rng, -25, 25), uniform(rng, -25, 25));
    if (s.speed() < 0.5) continue;
    const double dt = uniform(rng, 0.01, 0.5);
    const Matrix5d analytic = motion_model_jacobian(s, dt);
    Matrix5d numeric;
    const double step = 1e-6;
    for (int col = 0; col < 5; ++col) {
      Vector5d hi = s.to_vector(), lo = s.to_vector();
      hi[col] += step;
      lo[col] -= step;
      const Vector5d fh = motion_model(VehicleState::from_vector(hi), dt).to_vector();
      const Vector5d fl = motion_model(VehicleState::from_vector(lo), dt).to_vector();
      for (int row = 0; row < 5; ++row) {
        const double diff = row == 2 ? angle_diff(fh[row], fl[row]) : fh[row] - fl[row];
        numeric(row, col) = diff / (2 * step);
      }
    }
    REQUIRE((analytic - numeric).norm() / analytic.norm() < 1e-5);
  }
}

TEST_CASE("ekf_update limits: exact and uninformative measurements") {
  Track t = make_track(VehicleState(0, 0, 0, 10, 0), StateCovariance::Identity());
  const VehicleState z(5, 1, 0.1, 12, 0.5);

  Track exact = t;
  ekf_update_full(exact, z, Matrix5d::Identity() * 1e-12);
  CHECK((exact.state.to_vector() - z.to_vector()).cwiseAbs().maxCoeff() < 1e-6);

  Track vague = t;
  ekf_update_full(vague, z, Matrix5d::Identity() * 1e12);
  CHECK((vague.state.to_vector() - t.state.to_vector()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("scalar Kalman hand case: prior 0/1, measurement 1/1 gives 0.5/0.5") {
  Track t = make_track(VehicleState(0, 0, 0, 0, 0), StateCovariance::Identity());
  ekf_update_full(t, VehicleState(1, 0, 0, 0, 0), Matrix5d::Identity());
  CHECK(t.state.x == Catch::Approx(0.5));
  CHECK(t.cov(0, 0) == Catch::Approx(0.5));
}

TEST_CASE("singular innovation covariance is reported") {
  Track t = make_track(VehicleState(0, 0, 0, 0, 0), StateCovariance::Zero());
  CHECK_THROWS_AS(ekf_update_full(t, VehicleState(1, 0, 0, 0, 0), Matrix5d::Zero()),
                  SingularInnovationCovariance);
}

TEST_CASE("association by id, gate accept and gate rejection") {
  EnvironmentModel env(100, EkfConfig{});
  env.ingest_message(cam_only(7, 0, 0.0, VehicleState(50, 0, 0, 20, 0)), 0.0);

  const auto by_id = env.associate({300, 300}, Matrix2d::Identity(), 7u);
  REQUIRE(by_id.has_value());

  // Anonymous detection half a gate-unit away matches the same track.
  const auto near = env.associate({50.2, 0.1}, Matrix2d::Identity() * 0.04, std::nullopt);
  CHECK(near.has_value());
  CHECK(*near == *by_id);

  // Far beyond the gate: new track.
  const auto far = env.associate({80, 5}, Matrix2d::Identity() * 0.04, std::nullopt);
  CHECK_FALSE(far.has_value());

  // Unknown id: new track.
  CHECK_FALSE(env.associate({50, 0}, Matrix2d::Identity(), 8u).has_value());
}

TEST_CASE("first awareness report creates an equipped track at the sender state") {
  EnvironmentModel env(100, EkfConfig{});
  const VehicleState sender(120, 3.5, 0, 24, 0);
  CHECK(env.ingest_message(cam_only(7, 0, 1.0, sender), 1.0) == IngestStatus::kApplied);
  const auto snap = env.prune_and_snapshot(1.0);
  REQUIRE(snap.tracks.size() == 1);
  const Track& t = snap.tracks[0];
  CHECK(t.vehicle_id.value() == 7);
  CHECK(t.equipped);
  CHECK(t.role == VehicleRole::kMainLane);
  CHECK(t.state.x == Catch::Approx(120.0).margin(1e-9));
}

TEST_CASE("perceived object refines an existing sensor track") {
  EkfConfig cfg;
  EnvironmentModel env(100, cfg);
  env.set_ego_state(VehicleState(0, 0, 0, 20, 0), 1.0);

  RelativeMeasurement det;
  det.dx = 60;
  det.dy = 3.5;
  det.cov = Matrix4d::Identity() * 0.5;
  det.target_id = 9;
  det.timestamp = 1.0;
  env.ingest_detection(det, 1.0);
  const double trace_before = env.prune_and_snapshot(1.0).tracks[0].cov.trace();

  V2xMessage msg = cam_only(7, 0, 1.0, VehicleState(-50, 3.5, 0, 25, 0));
  PerceivedObject obj;
  obj.target_id = 9;
  obj.state = VehicleState(60, 3.5, 0, 20, 0);
  obj.cov = StateCovariance::Identity() * 0.2;
  msg.perceived.push_back(obj);
  env.ingest_message(msg, 1.0);

  const auto snap = env.prune_and_snapshot(1.0);
  const Track* track = snap.find_vehicle(9);
  REQUIRE(track != nullptr);
  CHECK(track->cov.trace() < trace_before);
}

TEST_CASE("duplicate or out-of-order sequences are dropped and counted") {
  EnvironmentModel env(100, EkfConfig{});
  CHECK(env.ingest_message(cam_only(7, 3, 1.0, VehicleState(0, 0, 0, 10, 0)), 1.0) ==
        IngestStatus::kApplied);
  const auto before = env.prune_and_snapshot(1.0);
  CHECK(env.ingest_message(cam_only(7, 3, 1.1, VehicleState(99, 0, 0, 10, 0)), 1.1) ==
        IngestStatus::kStaleDropped);
  CHECK(env.ingest_message(cam_only(7, 2, 1.1, VehicleState(99, 0, 0, 10, 0)), 1.1) ==
        IngestStatus::kStaleDropped);
  CHECK(env.stale_dropped() == 2);
  const auto after = env.prune_and_snapshot(1.1);
  REQUIRE(after.tracks.size() == 1);
  // The stale report was not applied: the track still extrapolates the
  // first measurement.
  CHECK(after.tracks[0].state.x == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("perceived echoes of the ego are not tracked") {
  EnvironmentModel env(100, EkfConfig{});
  env.set_ego_state(VehicleState(10, 0, 0, 20, 0), 0.0);
  V2xMessage msg = cam_only(7, 0, 0.0, VehicleState(-40, 0, 0, 22, 0));
  PerceivedObject echo;
  echo.target_id = 100; // the ego's own id
  echo.state = VehicleState(10, 0, 0, 20, 0);
  echo.cov = StateCovariance::Identity() * 0.1;
  msg.perceived.push_back(echo);
  PerceivedObject anon;
  anon.state = VehicleState(10.5, 0.2, 0, 20, 0); // anonymous echo near the ego
  anon.cov = StateCovariance::Identity() * 0.1;
  msg.perceived.push_back(anon);
  env.ingest_message(msg, 0.0);
  const auto snap = env.prune_and_snapshot(0.0);
  CHECK(snap.tracks.size() == 1); // only the sender itself
}

TEST_CASE("prune removes silent tracks and predicts fresh ones to the clock") {
  EkfConfig cfg;
  cfg.stale_timeout = 1.0;
  EnvironmentModel env(100, cfg);
  env.ingest_message(cam_only(7, 0, 0.0, VehicleState(0, 0, 0, 10, 0)), 0.0);
  env.ingest_message(cam_only(8, 0, 1.8, VehicleState(50, 0, 0, 10, 0)), 1.8);

  const auto snap = env.prune_and_snapshot(2.0);
  REQUIRE(snap.tracks.size() == 1);
  CHECK(snap.tracks[0].vehicle_id.value() == 8);
  CHECK(snap.tracks[0].state.x == Catch::Approx(52.0).margin(1e-9));

  EnvironmentModel empty(1, cfg);
  CHECK(empty.prune_and_snapshot(0.0).tracks.empty());
}

TEST_CASE("covariances stay symmetric PSD over random ingest sequences") {
  std::mt19937_64 seeder(12);
  for (int run = 0; run < 20; ++run) {
    EnvironmentModel env(100, EkfConfig{});
    env.set_ego_state(VehicleState(0, 0, 0, 20, 0), 0.0);
    std::mt19937_64 rng(seeder());
    double clock = 0.0;
    std::uint32_t seq = 0;
    for (int step = 0; step < 50; ++step) {
      clock += uniform(rng, 0.01, 0.2);
      if (rng() % 2 == 0) {
        RelativeMeasurement det;
        det.dx = uniform(rng, 10, 120);
        det.dy = uniform(rng, -7, 7);
        det.dvx = uniform(rng, -5, 5);
        det.cov = Matrix4d::Identity() * uniform(rng, 0.05, 1.0);
        if (rng() % 3 != 0) det.target_id = static_cast<std::uint32_t>(rng() % 5 + 2);
        env.ingest_detection(det, clock);
      } else {
        const auto sender = static_cast<std::uint32_t>(rng() % 5 + 2);
        V2xMessage msg = cam_only(sender, seq++, clock - 0.05,
                                  VehicleState(uniform(rng, -100, 100), uniform(rng, -7, 7),
                                               0, uniform(rng, 15, 30), 0),
                                  uniform(rng, 0.01, 0.5));
        env.ingest_message(msg, clock);
      }
      for (const Track& t : env.prune_and_snapshot(clock).tracks) {
        REQUIRE(is_symmetric(t.cov, 1e-9));
        REQUIRE(is_psd(t.cov, 1e-7));
      }
    }
  }
}

TEST_CASE("filter consistency: average NEES inside the 95% chi-square band") {
  const int runs = 100;
  const int steps = 120;
  const double dt = 0.1;
  EkfConfig cfg;
  const Matrix5d q = cfg.process_noise_matrix() * dt;
  Vector5d r_diag;
  r_diag << 0.25, 0.25, 0.01, 0.09, 0.09;
  const Matrix5d r = r_diag.asDiagonal();
  Vector5d p0_diag;
  p0_diag << 1.0, 1.0, 0.05, 0.5, 0.5;

  std::mt19937_64 rng(2025);
  auto draw_noise = [&](const Vector5d& variances) {
    Vector5d n;
    for (int i = 0; i < 5; ++i)
      n[i] = std::normal_distribution<double>(0.0, std::sqrt(variances[i]))(rng);
    return n;
  };

  double nees_sum = 0.0;
  for (int run = 0; run < runs; ++run) {
    VehicleState truth(0, 0, 0, 25, 0);
    const Vector5d e0 = draw_noise(p0_diag);
    Track track = make_track(VehicleState::from_vector(truth.to_vector() + e0),
                             p0_diag.asDiagonal());
    for (int k = 0; k < steps; ++k) {
      // Truth follows the same model with process noise matched to Q dt.
      Vector5d propagated = motion_model(truth, dt).to_vector() + draw_noise(q.diagonal());
      truth = VehicleState::from_vector(propagated);
      ekf_predict(track, dt, cfg);
      const Vector5d z = truth.to_vector() + draw_noise(r_diag);
      ekf_update_full(track, VehicleState::from_vector(z), r);
    }
    Vector5d err = track.state.to_vector() - truth.to_vector();
    err[2] = angle_diff(track.state.psi, truth.psi);
    nees_sum += err.dot(track.cov.ldlt().solve(err));
  }
  const double avg_nees = nees_sum / runs;
  const double lo = chi2_quantile(-1.959963984540054, 5.0 * runs) / runs;
  const double hi = chi2_quantile(+1.959963984540054, 5.0 * runs) / runs;
  INFO("average NEES " << avg_nees << " band [" << lo << ", " << hi << "]");
  CHECK(avg_nees > lo);
  CHECK(avg_nees < hi);
}

TEST_CASE("adding a perceived-object source never hurts localization") {
  // Sensor-only versus sensor + relayed perception of the same target, over
  // 20 seeds; time-averaged position RMSE must not increase.
  double rmse_sensor_total = 0.0, rmse_fused_total = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto gaussian = [&](double sd) {
      return std::normal_distribution<double>(0.0, sd)(rng);
    };
    for (int mode = 0; mode < 2; ++mode) {
      std::mt19937_64 noise_rng(5000 + seed); // same draws in both modes
      auto nd = [&](double sd) {
        return std::normal_distribution<double>(0.0, sd)(noise_rng);
      };
      EnvironmentModel env(100, EkfConfig{});
      double err2_sum = 0.0;
      int samples = 0;
      std::uint32_t seq = 0;
      for (int k = 1; k <= 100; ++k) {
        const double clock = 0.1 * k;
        const VehicleState truth(30.0 + 22.0 * clock, 3.5, 0, 22, 0);
        env.set_ego_state(VehicleState(20.0 * clock, 0, 0, 20, 0), clock);

        RelativeMeasurement det;
        const VehicleState ego = env.ego_state();
        det.dx = truth.x - ego.x + nd(0.8);
        det.dy = truth.y - ego.y + nd(0.8);
        det.dvx = 2.0 + nd(0.3);
        det.dvy = nd(0.3);
        det.cov = Matrix4d::Zero();
        det.cov(0, 0) = det.cov(1, 1) = 0.64;
        det.cov(2, 2) = det.cov(3, 3) = 0.09;
        det.target_id = 9;
        env.ingest_detection(det, clock);

        if (mode == 1) {
          V2xMessage msg;
          msg.sender_id = 7;
          msg.sequence = seq++;
          msg.generation_time = clock - 0.05;
          msg.sender_state = VehicleState(truth.x - 40, 3.5, 0, 22, 0);
          msg.sender_cov = StateCovariance::Identity() * 0.05;
          PerceivedObject obj;
          obj.target_id = 9;
          const VehicleState truth_then(30.0 + 22.0 * (clock - 0.05), 3.5, 0, 22, 0);
          obj.state = VehicleState(truth_then.x + nd(0.3), truth_then.y + nd(0.3), 0,
                                   22 + nd(0.2), nd(0.2));
          obj.cov = StateCovariance::Identity() * 0.09;
          msg.perceived.push_back(obj);
          env.ingest_message(msg, clock);
        } else {
          // Burn the same number of draws to keep the streams aligned.
          for (int burn = 0; burn < 4; ++burn) nd(1.0);
        }

        const auto snap = env.prune_and_snapshot(clock);
        const Track* t = snap.find_vehicle(9);
        REQUIRE(t != nullptr);
        err2_sum += (t->state.position() - truth.position()).squaredNorm();
        ++samples;
      }
      const double rmse = std::sqrt(err2_sum / samples);
      (mode == 0 ? rmse_sensor_total : rmse_fused_total) += rmse;
    }
    (void)gaussian;
  }
  INFO("sensor-only " << rmse_sensor_total / 20 << " fused " << rmse_fused_total / 20);
  CHECK(rmse_fused_total <= rmse_sensor_total);
}
