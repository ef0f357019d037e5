#pragma once

#include "mergesim/geometry.hpp"
#include "mergesim/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mergesim {

struct TargetOffRoad : std::runtime_error {
  explicit TargetOffRoad(double y)
      : std::runtime_error("target lateral position outside the road layout: " +
                           std::to_string(y)) {}
};

enum class Maneuver : int { kLcl = 0, kFlw = 1, kLcr = 2 };

inline const char* to_string(Maneuver m) {
  switch (m) {
    case Maneuver::kLcl: return "LCL";
    case Maneuver::kFlw: return "FLW";
    case Maneuver::kLcr: return "LCR";
  }
  return "?";
}

struct ManeuverProbabilities {
  double p_lcl = 1.0 / 3.0;
  double p_flw = 1.0 / 3.0;
  double p_lcr = 1.0 / 3.0;

  double operator[](Maneuver m) const {
    switch (m) {
      case Maneuver::kLcl: return p_lcl;
      case Maneuver::kFlw: return p_flw;
      case Maneuver::kLcr: return p_lcr;
    }
    return 0.0;
  }

  bool simplex(double tol = 1e-9) const {
    auto in01 = [](double p) { return p >= -1e-12 && p <= 1.0 + 1e-12; };
    return in01(p_lcl) && in01(p_flw) && in01(p_lcr) &&
           std::abs(p_lcl + p_flw + p_lcr - 1.0) <= tol;
  }

  static ManeuverProbabilities one_hot(Maneuver m) {
    ManeuverProbabilities p{0, 0, 0};
    switch (m) {
      case Maneuver::kLcl: p.p_lcl = 1; break;
      case Maneuver::kFlw: p.p_flw = 1; break;
      case Maneuver::kLcr: p.p_lcr = 1; break;
    }
    return p;
  }
};

inline constexpr int kFeatureCount = 23;
using FeatureVector = Eigen::Matrix<double, kFeatureCount, 1>;

/// Missing neighbour slots are imputed with these sentinels.
inline constexpr double kNeighborSentinel = 150.0; // m, +lead / -rear

/// The minimal view of one vehicle the feature extractor needs. Built either
/// from ground-truth records (training) or from environment-model tracks
/// (inference).
struct FeatureAgent {
  std::uint32_t id = 0;
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  double ax = 0.0;
  int lane = 0;
};

/// Feature layout (23 entries):
///   0  lateral distance to the left marking of the current lane
///   1  lateral distance to the right marking
///   2  lateral velocity
///   3  longitudinal velocity
///   4  longitudinal acceleration
///   5..6   left marking type one-hot (solid, dashed)
///   7..8   right marking type one-hot (solid, dashed)
///   9..20  six neighbour slots x (distance, relative longitudinal velocity):
///          own lead, own rear, left lead, left rear, right lead, right rear
///   21 lane change legal to the left
///   22 lane change legal to the right
inline FeatureVector extract_features(const FeatureAgent& target,
                                      const std::vector<FeatureAgent>& others,
                                      const RoadLayout& layout) {
  const auto lane_opt = layout.lane_of(target.y);
  if (!lane_opt) throw TargetOffRoad(target.y);
  const int lane = *lane_opt;

  FeatureVector f = FeatureVector::Zero();
  f[0] = layout.boundary_y(lane + 1) - target.y;
  f[1] = target.y - layout.boundary_y(lane);
  f[2] = target.vy;
  f[3] = target.vx;
  f[4] = target.ax;
  const Marking left = layout.marking_types[lane + 1];
  const Marking right = layout.marking_types[lane];
  f[5] = left == Marking::kSolid ? 1.0 : 0.0;
  f[6] = left == Marking::kDashed ? 1.0 : 0.0;
  f[7] = right == Marking::kSolid ? 1.0 : 0.0;
  f[8] = right == Marking::kDashed ? 1.0 : 0.0;

  // Slots: (lane offset, lead?) pairs in fixed order.
  const std::array<std::pair<int, bool>, 6> slots = {{{0, true},
                                                      {0, false},
                                                      {+1, true},
                                                      {+1, false},
                                                      {-1, true},
                                                      {-1, false}}};
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto [offset, lead] = slots[s];
    const int slot_lane = lane + offset;
    double best_dx = lead ? kNeighborSentinel : -kNeighborSentinel;
    double rel_v = 0.0;
    if (slot_lane >= 0 && slot_lane < layout.lane_count) {
      for (const FeatureAgent& o : others) {
        if (o.id == target.id || o.lane != slot_lane) continue;
        const double dx = o.x - target.x;
        if (lead ? (dx > 0.0 && dx < best_dx) : (dx <= 0.0 && dx > best_dx)) {
          best_dx = dx;
          rel_v = o.vx - target.vx;
        }
      }
    }
    f[9 + 2 * s] = best_dx;
    f[10 + 2 * s] = rel_v;
  }

  f[21] = layout.change_legal(lane, +1) ? 1.0 : 0.0;
  f[22] = layout.change_legal(lane, -1) ? 1.0 : 0.0;
  return f;
}

/// Labels each record with the upcoming maneuver: LCL/LCR when the vehicle
/// center crosses a lane boundary in that direction within `window` seconds
/// (nearest crossing wins), FLW otherwise. A lane-id change only counts as a
/// crossing when the lateral motion agrees with its direction.
inline std::vector<Maneuver> label_maneuvers(const std::vector<TrajectoryRecord>& records,
                                             const RoadLayout& layout, double window = 5.0,
                                             double recording_period = 0.04) {
  std::vector<Maneuver> labels(records.size(), Maneuver::kFlw);
  std::map<std::uint32_t, std::vector<std::size_t>> by_vehicle;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_vehicle[records[i].vehicle_id].push_back(i);
  }

  for (auto& [vehicle, idx] : by_vehicle) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].frame < records[b].frame;
    });
    if (idx.size() < 2) continue;

    struct Crossing {
      double time;
      int direction;
    };
    std::vector<Crossing> crossings;
    for (std::size_t k = 1; k < idx.size(); ++k) {
      const TrajectoryRecord& prev = records[idx[k - 1]];
      const TrajectoryRecord& cur = records[idx[k]];
      if (cur.lane_id == prev.lane_id) continue;
      const double dy = cur.y - prev.y;
      const int direction = cur.lane_id > prev.lane_id ? +1 : -1;
      // Lane ids are ordered by lateral offset, so the y motion must agree.
      if ((direction > 0 && dy <= 0.0) || (direction < 0 && dy >= 0.0)) continue;
      crossings.push_back({static_cast<double>(cur.frame) * recording_period, direction});
    }
    if (crossings.empty()) continue;

    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double t = static_cast<double>(records[idx[k]].frame) * recording_period;
      const Crossing* next = nullptr;
      for (const Crossing& c : crossings) {
        if (c.time > t && c.time - t <= window) {
          next = &c;
          break;
        }
      }
      if (next) {
        labels[idx[k]] = next->direction > 0 ? Maneuver::kLcl : Maneuver::kLcr;
      }
    }
  }
  (void)layout;
  return labels;
}

/// Position experts condition on compact kinematic subsets of the feature
/// vector; full 23-feature joints would need far more data per mixture
/// component than a lane-change set provides.
inline const std::vector<int>& default_lateral_expert_inputs() {
  static const std::vector<int> idx = {0, 1, 2, 3}; // marking distances, vy, vx
  return idx;
}

inline const std::vector<int>& default_longitudinal_expert_inputs() {
  static const std::vector<int> idx = {3, 4, 9, 10}; // vx, ax, lead distance/relvel
  return idx;
}

/// Stacks the selected features and the horizon into one expert input.
inline Eigen::VectorXd expert_input(const FeatureVector& features,
                                    const std::vector<int>& indices, double horizon) {
  Eigen::VectorXd in(static_cast<Eigen::Index>(indices.size()) + 1);
  for (std::size_t i = 0; i < indices.size(); ++i) in[static_cast<Eigen::Index>(i)] =
      features[indices[i]];
  in[static_cast<Eigen::Index>(indices.size())] = horizon;
  return in;
}

struct LabeledSample {
  FeatureVector features;
  Maneuver label = Maneuver::kFlw;
};

struct JointSample {
  FeatureVector features;
  double horizon = 1.0;
  double lateral_offset = 0.0;      // y(t+h) - y(t)
  double longitudinal_offset = 0.0; // x(t+h) - x(t)
  Maneuver label = Maneuver::kFlw;
};

struct TrainingData {
  std::vector<LabeledSample> classifier;
  std::vector<JointSample> regression;
};

/// Default horizon grid for regression training samples.
inline std::vector<double> default_horizon_grid() {
  return {0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0};
}

/// Turns ground-truth records into classifier and regression samples.
/// Acceleration comes from central velocity differences; future offsets from
/// linear interpolation of the vehicle's own series.
inline TrainingData build_training_data(const std::vector<TrajectoryRecord>& records,
                                        const RoadLayout& layout,
                                        const std::vector<double>& horizons = default_horizon_grid(),
                                        double recording_period = 0.04,
                                        int frame_stride = 2, double label_window = 5.0) {
  const std::vector<Maneuver> labels =
      label_maneuvers(records, layout, label_window, recording_period);

  std::map<std::int64_t, std::vector<std::size_t>> by_frame;
  std::map<std::uint32_t, std::vector<std::size_t>> by_vehicle;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_frame[records[i].frame].push_back(i);
    by_vehicle[records[i].vehicle_id].push_back(i);
  }
  for (auto& [vehicle, idx] : by_vehicle) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].frame < records[b].frame;
    });
  }

  // Per-record longitudinal acceleration, central differences.
  std::vector<double> accel(records.size(), 0.0);
  for (const auto& [vehicle, idx] : by_vehicle) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t lo = k > 0 ? idx[k - 1] : idx[k];
      const std::size_t hi = k + 1 < idx.size() ? idx[k + 1] : idx[k];
      const double dt =
          static_cast<double>(records[hi].frame - records[lo].frame) * recording_period;
      if (dt > 0.0) {
        accel[idx[k]] = (records[hi].x_velocity - records[lo].x_velocity) / dt;
      }
    }
  }

  auto agent_of = [&](std::size_t i) {
    const TrajectoryRecord& r = records[i];
    FeatureAgent a;
    a.id = r.vehicle_id;
    a.x = r.x;
    a.y = r.y;
    a.vx = r.x_velocity;
    a.vy = r.y_velocity;
    a.ax = accel[i];
    a.lane = r.lane_id;
    return a;
  };

  // Future (x, y) at t + h via linear interpolation of the vehicle series.
  auto future_offset = [&](const std::vector<std::size_t>& idx, std::size_t k,
                           double h) -> std::optional<std::pair<double, double>> {
    const double target_frame =
        static_cast<double>(records[idx[k]].frame) + h / recording_period;
    std::size_t j = k;
    while (j + 1 < idx.size() &&
           static_cast<double>(records[idx[j + 1]].frame) <= target_frame) {
      ++j;
    }
    if (j + 1 >= idx.size()) {
      if (static_cast<double>(records[idx[j]].frame) >= target_frame - 1e-9 && j > k) {
        const TrajectoryRecord& r = records[idx[j]];
        return std::make_pair(r.x - records[idx[k]].x, r.y - records[idx[k]].y);
      }
      return std::nullopt;
    }
    const TrajectoryRecord& a = records[idx[j]];
    const TrajectoryRecord& b = records[idx[j + 1]];
    const double alpha = (target_frame - static_cast<double>(a.frame)) /
                         static_cast<double>(b.frame - a.frame);
    const double x = a.x + (b.x - a.x) * alpha;
    const double y = a.y + (b.y - a.y) * alpha;
    return std::make_pair(x - records[idx[k]].x, y - records[idx[k]].y);
  };

  TrainingData data;
  for (const auto& [vehicle, idx] : by_vehicle) {
    if (idx.size() < 2) continue;
    for (std::size_t k = 0; k < idx.size(); k += frame_stride) {
      const std::size_t i = idx[k];
      FeatureVector feats;
      try {
        std::vector<FeatureAgent> others;
        for (std::size_t o : by_frame[records[i].frame]) {
          if (o != i) others.push_back(agent_of(o));
        }
        feats = extract_features(agent_of(i), others, layout);
      } catch (const TargetOffRoad&) {
        continue;
      }
      data.classifier.push_back({feats, labels[i]});
      for (double h : horizons) {
        const auto offset = future_offset(idx, k, h);
        if (!offset) continue;
        JointSample s;
        s.features = feats;
        s.horizon = h;
        s.longitudinal_offset = offset->first;
        s.lateral_offset = offset->second;
        s.label = labels[i];
        data.regression.push_back(std::move(s));
      }
    }
  }
  return data;
}

} // namespace mergesim
