#pragma once

#include "mergesim/features.hpp"
#include "mergesim/fusion.hpp"
#include "mergesim/gmm.hpp"
#include "mergesim/mlp.hpp"
#include "mergesim/wire.hpp"

#include <array>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergesim {

/// Two-stage predictor: the maneuver classifier gates three lateral position
/// experts; a single expert covers the longitudinal direction. Experts model
/// displacement over the queried horizon in lane coordinates.
struct PredictionModel {
  MlpModel classifier;
  std::array<Gmm, 3> lateral_experts; // indexed by Maneuver
  Gmm longitudinal_expert;
  std::vector<int> lateral_inputs = default_lateral_expert_inputs();
  std::vector<int> longitudinal_inputs = default_longitudinal_expert_inputs();

  Mixture1d condition_lateral(Maneuver m, const FeatureVector& feats, double horizon) const {
    return gmr_condition(lateral_experts[static_cast<std::size_t>(m)],
                         expert_input(feats, lateral_inputs, horizon));
  }

  Mixture1d condition_longitudinal(const FeatureVector& feats, double horizon) const {
    return gmr_condition(longitudinal_expert,
                         expert_input(feats, longitudinal_inputs, horizon));
  }
};

/// Equipped vehicles announce their role; a merging vehicle's next maneuver
/// is the lane change toward the main road, so the classifier stage is
/// bypassed with a one-hot distribution. Everything else passes through.
inline ManeuverProbabilities role_override(const Track& track,
                                           const ManeuverProbabilities& probs,
                                           const RoadLayout& layout) {
  if (!track.equipped) return probs;
  if (track.role == VehicleRole::kMerging) {
    return ManeuverProbabilities::one_hot(layout.merge_direction() > 0 ? Maneuver::kLcl
                                                                       : Maneuver::kLcr);
  }
  return probs;
}

/// Constant-speed, constant-lane-offset baseline.
inline Vector2d predict_position_vlk(const Track& track, const RoadLayout& layout,
                                     double horizon) {
  if (horizon < 0.0) throw std::invalid_argument("horizon must be non-negative");
  (void)layout; // straight road: the lane direction is the world x axis
  return {track.state.x + track.state.vx * horizon, track.state.y};
}

struct RbbPrediction {
  Mixture1d lateral;      // density over the lateral displacement
  Mixture1d longitudinal; // density over the longitudinal displacement
  Vector2d point;         // density means applied to the current position
  ManeuverProbabilities maneuver;
};

inline FeatureAgent agent_from_track(const Track& track, const RoadLayout& layout) {
  FeatureAgent a;
  a.id = track.vehicle_id.value_or(kAnonymousId);
  a.x = track.state.x;
  a.y = track.state.y;
  a.vx = track.state.vx;
  a.vy = track.state.vy;
  a.ax = track.ax_estimate;
  a.lane = layout.lane_of(track.state.y).value_or(-1);
  return a;
}

/// Full role-based prediction of one track at the given horizon. The lateral
/// density is the probability-weighted sum of the per-maneuver experts; the
/// longitudinal density comes from the single longitudinal expert.
inline RbbPrediction predict_position_rbb(const Track& track,
                                          const EnvironmentSnapshot& snapshot,
                                          const RoadLayout& layout, double horizon,
                                          const PredictionModel& model) {
  if (!(horizon > 0.0 && horizon <= 5.0)) {
    throw std::invalid_argument("prediction horizon must lie in (0, 5] s");
  }
  FeatureAgent target = agent_from_track(track, layout);
  if (target.lane < 0) throw TargetOffRoad(track.state.y);
  std::vector<FeatureAgent> others;
  others.reserve(snapshot.tracks.size());
  for (const Track& other : snapshot.tracks) {
    if (other.track_id == track.track_id) continue;
    FeatureAgent a = agent_from_track(other, layout);
    if (a.lane < 0) continue;
    others.push_back(a);
  }
  const FeatureVector feats = extract_features(target, others, layout);

  RbbPrediction out;
  out.maneuver = role_override(track, model.classifier.classify(feats), layout);

  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> vars;
  for (int m = 0; m < 3; ++m) {
    const double p = out.maneuver[static_cast<Maneuver>(m)];
    if (p < 1e-12) continue;
    const Mixture1d expert =
        gmr_condition(model.lateral_experts[static_cast<std::size_t>(m)], feats, horizon);
    for (int k = 0; k < expert.weights.size(); ++k) {
      weights.push_back(p * expert.weights[k]);
      means.push_back(expert.means[k]);
      vars.push_back(expert.variances[k]);
    }
  }
  out.lateral.weights = Eigen::Map<Eigen::VectorXd>(weights.data(), weights.size());
  out.lateral.means = Eigen::Map<Eigen::VectorXd>(means.data(), means.size());
  out.lateral.variances = Eigen::Map<Eigen::VectorXd>(vars.data(), vars.size());

  out.longitudinal = gmr_condition(model.longitudinal_expert, feats, horizon);
  out.point = {track.state.x + out.longitudinal.mean(),
               track.state.y + out.lateral.mean()};
  return out;
}

// --- model container -------------------------------------------------------

inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

inline void write_vector(WireWriter& w, const Eigen::VectorXd& v) {
  for (int i = 0; i < v.size(); ++i) w.f64(v[i]);
}

inline Eigen::VectorXd read_vector(WireReader& r, int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = r.f64();
  return v;
}

template <typename Matrix>
void write_matrix(WireWriter& w, const Matrix& m) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

template <typename Matrix>
void read_matrix(WireReader& r, Matrix& m) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
}

inline void write_gmm(WireWriter& w, const Gmm& g) {
  w.u8(g.output_kind == Gmm::Output::kLateral ? 0 : 1);
  w.u16(static_cast<std::uint16_t>(g.dim()));
  w.u16(static_cast<std::uint16_t>(g.components.size()));
  write_vector(w, g.dim_mean);
  write_vector(w, g.dim_std);
  for (const Gmm::Component& c : g.components) {
    w.f64(c.weight);
    write_vector(w, c.mean);
    for (int i = 0; i < c.cov.rows(); ++i)
      for (int j = i; j < c.cov.cols(); ++j) w.f64(c.cov(i, j));
  }
}

inline Gmm read_gmm(WireReader& r) {
  Gmm g;
  g.output_kind = r.u8() == 0 ? Gmm::Output::kLateral : Gmm::Output::kLongitudinal;
  const int d = r.u16();
  const int k = r.u16();
  g.dim_mean = read_vector(r, d);
  g.dim_std = read_vector(r, d);
  g.components.resize(static_cast<std::size_t>(k));
  for (Gmm::Component& c : g.components) {
    c.weight = r.f64();
    c.mean = read_vector(r, d);
    c.cov.resize(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) {
        const double v = r.f64();
        c.cov(i, j) = v;
        c.cov(j, i) = v;
      }
  }
  g.finalize();
  return g;
}

} // namespace detail

inline std::vector<std::byte> serialize_prediction_model(const PredictionModel& model) {
  WireWriter w;
  w.bytes("RBBM", 4);
  w.u16(kModelVersion);
  detail::write_vector(w, model.classifier.feat_mean);
  detail::write_vector(w, model.classifier.feat_std);
  detail::write_matrix(w, model.classifier.w1);
  detail::write_matrix(w, model.classifier.b1);
  detail::write_matrix(w, model.classifier.w2);
  detail::write_matrix(w, model.classifier.b2);
  w.u8(4);
  for (const Gmm& g : model.lateral_experts) detail::write_gmm(w, g);
  detail::write_gmm(w, model.longitudinal_expert);
  return w.take();
}

inline PredictionModel deserialize_prediction_model(const std::vector<std::byte>& bytes) {
  WireReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string_view(magic, 4) != "RBBM") throw BadMagic();
  const std::uint16_t version = r.u16();
  if (version != kModelVersion) throw UnsupportedVersion(version);
  PredictionModel model;
  model.classifier.feat_mean = detail::read_vector(r, kFeatureCount);
  model.classifier.feat_std = detail::read_vector(r, kFeatureCount);
  detail::read_matrix(r, model.classifier.w1);
  detail::read_matrix(r, model.classifier.b1);
  detail::read_matrix(r, model.classifier.w2);
  detail::read_matrix(r, model.classifier.b2);
  const int experts = r.u8();
  if (experts != 4) throw TruncatedPayload("expected 4 experts");
  for (int i = 0; i < 3; ++i) model.lateral_experts[static_cast<std::size_t>(i)] = detail::read_gmm(r);
  model.longitudinal_expert = detail::read_gmm(r);
  if (r.remaining() != 0) throw TruncatedPayload("trailing bytes after model");
  return model;
}

inline void save_prediction_model(const std::string& path, const PredictionModel& model) {
  const auto bytes = serialize_prediction_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open model file for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline PredictionModel load_prediction_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::byte> bytes(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  return deserialize_prediction_model(bytes);
}

// --- training pipeline ------------------------------------------------------

struct PredictionTrainConfig {
  MlpTrainConfig mlp;
  GmmTrainConfig gmm;
  std::vector<double> horizons = default_horizon_grid();
  int frame_stride = 2;
  std::size_t max_expert_samples = 60000;
  double label_window = 5.0;
  double recording_period = 0.04;
};

struct TrainingReport {
  std::size_t classifier_samples = 0;
  std::size_t regression_samples = 0;
  std::array<std::size_t, 3> class_counts{0, 0, 0};
};

namespace detail {

inline Eigen::MatrixXd joint_matrix(const std::vector<JointSample>& samples,
                                    std::optional<Maneuver> filter, bool lateral,
                                    std::size_t max_rows) {
  std::vector<const JointSample*> selected;
  for (const JointSample& s : samples) {
    if (!filter || s.label == *filter) selected.push_back(&s);
  }
  const std::size_t stride =
      selected.size() > max_rows ? (selected.size() + max_rows - 1) / max_rows : 1;
  std::vector<const JointSample*> rows;
  for (std::size_t i = 0; i < selected.size(); i += stride) rows.push_back(selected[i]);

  Eigen::MatrixXd m(rows.size(), kFeatureCount + 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const JointSample& s = *rows[i];
    for (int f = 0; f < kFeatureCount; ++f) m(static_cast<Eigen::Index>(i), f) = s.features[f];
    m(static_cast<Eigen::Index>(i), kFeatureCount) = s.horizon;
    m(static_cast<Eigen::Index>(i), kFeatureCount + 1) =
        lateral ? s.lateral_offset : s.longitudinal_offset;
  }
  return m;
}

} // namespace detail

/// Trains the classifier and the four position experts from ground-truth
/// records. Deterministic for a fixed seed.
inline PredictionModel train_prediction_model(const std::vector<TrajectoryRecord>& records,
                                              const RoadLayout& layout, std::uint64_t seed,
                                              const PredictionTrainConfig& cfg = {},
                                              TrainingReport* report = nullptr) {
  const TrainingData data = build_training_data(records, layout, cfg.horizons,
                                                cfg.recording_period, cfg.frame_stride,
                                                cfg.label_window);
  if (report) {
    report->classifier_samples = data.classifier.size();
    report->regression_samples = data.regression.size();
    for (const auto& s : data.classifier) {
      report->class_counts[static_cast<std::size_t>(s.label)]++;
    }
  }

  PredictionModel model;
  model.classifier = train_mlp(data.classifier, seed, cfg.mlp);

  for (int m = 0; m < 3; ++m) {
    const Eigen::MatrixXd joint = detail::joint_matrix(
        data.regression, static_cast<Maneuver>(m), true, cfg.max_expert_samples);
    GmmTrainConfig gcfg = cfg.gmm;
    gcfg.components = std::max(
        1, std::min(gcfg.components, static_cast<int>(joint.rows()) / 10));
    model.lateral_experts[static_cast<std::size_t>(m)] =
        train_gmm(joint, gcfg, derive_seed(seed, "lat-expert", static_cast<std::uint64_t>(m)),
                  Gmm::Output::kLateral);
  }
  {
    const Eigen::MatrixXd joint =
        detail::joint_matrix(data.regression, std::nullopt, false, cfg.max_expert_samples);
    GmmTrainConfig gcfg = cfg.gmm;
    gcfg.components = std::max(
        1, std::min(gcfg.components, static_cast<int>(joint.rows()) / 10));
    model.longitudinal_expert =
        train_gmm(joint, gcfg, derive_seed(seed, "lon-expert"), Gmm::Output::kLongitudinal);
  }
  return model;
}

/// Balanced accuracy of the classifier over labeled samples.
inline double balanced_accuracy(const MlpModel& model,
                                const std::vector<LabeledSample>& samples) {
  std::array<std::size_t, 3> correct{0, 0, 0};
  std::array<std::size_t, 3> total{0, 0, 0};
  for (const LabeledSample& s : samples) {
    const Eigen::Vector3d p = model.forward(s.features);
    int arg = 0;
    p.maxCoeff(&arg);
    total[static_cast<std::size_t>(s.label)]++;
    if (arg == static_cast<int>(s.label)) correct[static_cast<std::size_t>(s.label)]++;
  }
  double acc = 0.0;
  int classes = 0;
  for (int c = 0; c < 3; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0) continue;
    acc += static_cast<double>(correct[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
    ++classes;
  }
  return classes > 0 ? acc / classes : 0.0;
}

} // namespace mergesim
