#include "mergesim/prediction.hpp"
#include "mergesim/synth.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mergesim;

namespace {

SyntheticSpec busy_spec() {
  SyntheticSpec spec;
  spec.vehicle_count = 14;
  spec.duration = 50.0;
  spec.accel_sigma = 0.6;
  spec.rule_based_changes = true;
  spec.speed_min = 20.0;
  spec.speed_max = 29.0;
  spec.with_ramp_vehicle = false;
  return spec;
}

PredictionTrainConfig small_train_config() {
  PredictionTrainConfig cfg;
  cfg.mlp.epochs = 30;
  cfg.gmm.components = 5;
  cfg.gmm.max_iterations = 30;
  cfg.max_expert_samples = 12000;
  cfg.frame_stride = 3;
  return cfg;
}

const PredictionModel& small_model() {
  static const PredictionModel model = [] {
    const auto scenario = generate_synthetic_scenario(busy_spec(), 404);
    return train_prediction_model(scenario.records, scenario.layout, 99,
                                  small_train_config());
  }();
  return model;
}

Track track_at(double x, double y, double vx, double vy, bool equipped = false,
               VehicleRole role = VehicleRole::kUnknown) {
  Track t;
  t.track_id = 1;
  t.vehicle_id = 5;
  t.state = VehicleState(x, y, std::atan2(vy, vx), vx, vy);
  t.cov = StateCovariance::Identity() * 0.1;
  t.equipped = equipped;
  t.role = role;
  return t;
}

} // namespace

TEST_CASE("role override maps a merging role to the one-hot toward the main lane") {
  const RoadLayout layout = default_merge_layout();
  const ManeuverProbabilities mixed{0.2, 0.5, 0.3};

  Track merging = track_at(0, -3.5, 22, 0, true, VehicleRole::kMerging);
  const ManeuverProbabilities p = role_override(merging, mixed, layout);
  CHECK(p.p_lcl == 1.0);
  CHECK(p.p_flw == 0.0);
  CHECK(p.p_lcr == 0.0);
  CHECK(p.simplex());

  Track unequipped = track_at(0, -3.5, 22, 0, false, VehicleRole::kMerging);
  const ManeuverProbabilities q = role_override(unequipped, mixed, layout);
  CHECK(q.p_flw == mixed.p_flw);

  Track unknown_role = track_at(0, 0, 22, 0, true, VehicleRole::kUnknown);
  const ManeuverProbabilities r = role_override(unknown_role, mixed, layout);
  CHECK(r.p_lcl == mixed.p_lcl);
}

TEST_CASE("VLK holds speed and lateral offset") {
  const RoadLayout layout = default_merge_layout();
  const Track t = track_at(100, 1.2, 20, 0.5);
  CHECK(predict_position_vlk(t, layout, 0.0).x() == Catch::Approx(100.0));
  CHECK(predict_position_vlk(t, layout, 0.0).y() == Catch::Approx(1.2));
  const Vector2d p = predict_position_vlk(t, layout, 3.0);
  CHECK(p.x() == Catch::Approx(160.0));
  CHECK(p.y() == Catch::Approx(1.2));
}

TEST_CASE("degenerate maneuver weighting reduces to the single expert") {
  const PredictionModel& model = small_model();
  const RoadLayout layout = default_merge_layout();
  Track t = track_at(50, 0, 24, 0, true, VehicleRole::kMainLane);
  EnvironmentSnapshot snap;
  snap.tracks.push_back(t);

  // Force (0, 1, 0) by overriding the classifier with a biased copy.
  PredictionModel forced = model;
  forced.classifier.w1.setZero();
  forced.classifier.w2.setZero();
  forced.classifier.b2 << -100.0, 100.0, -100.0; // softmax -> FLW one-hot

  const RbbPrediction pred = predict_position_rbb(t, snap, layout, 2.0, forced);
  const FeatureVector feats = extract_features(agent_from_track(t, layout), {}, layout);
  const Mixture1d flw = gmr_condition(forced.lateral_experts[1], feats, 2.0);
  CHECK(pred.lateral.mean() == Catch::Approx(flw.mean()).margin(1e-9));
  CHECK(pred.lateral.weight_sum() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("combined lateral density weights sum to one") {
  const PredictionModel& model = small_model();
  const RoadLayout layout = default_merge_layout();
  Track t = track_at(80, 0.4, 23, 0.3);
  EnvironmentSnapshot snap;
  snap.tracks.push_back(t);
  const RbbPrediction pred = predict_position_rbb(t, snap, layout, 1.5, model);
  CHECK(pred.lateral.weight_sum() == Catch::Approx(1.0).margin(1e-9));
  CHECK(pred.longitudinal.weight_sum() == Catch::Approx(1.0).margin(1e-9));
  CHECK(pred.maneuver.simplex());
}

TEST_CASE("prediction is a pure function of its inputs") {
  const PredictionModel& model = small_model();
  const RoadLayout layout = default_merge_layout();
  Track t = track_at(80, -3.5, 22, 0.0);
  EnvironmentSnapshot snap;
  snap.tracks.push_back(t);
  const RbbPrediction a = predict_position_rbb(t, snap, layout, 2.5, model);
  const RbbPrediction b = predict_position_rbb(t, snap, layout, 2.5, model);
  CHECK(a.point.x() == b.point.x());
  CHECK(a.point.y() == b.point.y());
  CHECK(a.lateral.weights == b.lateral.weights);
}

TEST_CASE("horizon bounds are enforced") {
  const PredictionModel& model = small_model();
  const RoadLayout layout = default_merge_layout();
  Track t = track_at(0, 0, 20, 0);
  EnvironmentSnapshot snap;
  snap.tracks.push_back(t);
  CHECK_THROWS_AS(predict_position_rbb(t, snap, layout, 0.0, model), std::invalid_argument);
  CHECK_THROWS_AS(predict_position_rbb(t, snap, layout, 5.5, model), std::invalid_argument);
}

TEST_CASE("model container round-trips bit-identically") {
  const PredictionModel& model = small_model();
  const auto bytes = serialize_prediction_model(model);
  const PredictionModel loaded = deserialize_prediction_model(bytes);
  CHECK(serialize_prediction_model(loaded) == bytes);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 4);
  CHECK_THROWS_AS(deserialize_prediction_model(truncated), TruncatedPayload);
  auto bad = bytes;
  bad[0] = std::byte{'Z'};
  CHECK_THROWS_AS(deserialize_prediction_model(bad), BadMagic);
}

TEST_CASE("RBB beats the VLK baseline on held-out lane-change data") {
  const PredictionModel& model = small_model();
  const auto scenario = generate_synthetic_scenario(busy_spec(), 505);
  const TrainingData held_out =
      build_training_data(scenario.records, scenario.layout, {1.0, 3.0}, 0.04, 4);

  double rbb_lat = 0.0, vlk_lat = 0.0, rbb_lon = 0.0, vlk_lon = 0.0;
  int n = 0, lc = 0;
  for (const JointSample& s : held_out.regression) {
    if (s.horizon != 3.0) continue;
    const ManeuverProbabilities p = model.classifier.classify(s.features);
    double lat_mean = 0.0;
    for (int m = 0; m < 3; ++m) {
      const double pm = p[static_cast<Maneuver>(m)];
      if (pm < 1e-12) continue;
      lat_mean +=
          pm * gmr_condition(model.lateral_experts[static_cast<std::size_t>(m)],
                             s.features, s.horizon)
                   .mean();
    }
    const double lon_mean =
        gmr_condition(model.longitudinal_expert, s.features, s.horizon).mean();
    rbb_lat += std::abs(lat_mean - s.lateral_offset);
    vlk_lat += std::abs(0.0 - s.lateral_offset);
    rbb_lon += std::abs(lon_mean - s.longitudinal_offset);
    vlk_lon += std::abs(s.features[3] * s.horizon - s.longitudinal_offset);
    ++n;
    if (s.label != Maneuver::kFlw) ++lc;
  }
  REQUIRE(n > 300);
  REQUIRE(lc > 30);
  INFO("lat MAE rbb " << rbb_lat / n << " vlk " << vlk_lat / n);
  INFO("lon MAE rbb " << rbb_lon / n << " vlk " << vlk_lon / n);
  CHECK(rbb_lat / n < vlk_lat / n);
  CHECK(rbb_lon / n <= vlk_lon / n * 1.05);
}
