#pragma once

#include "mergesim/random.hpp"
#include "mergesim/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

namespace mergesim {

struct InfeasibleSpec : std::runtime_error {
  explicit InfeasibleSpec(const std::string& what) : std::runtime_error(what) {}
};

struct LaneChangeScript {
  std::uint32_t vehicle_id = 0;
  double t_start = 0.0;
  int direction = +1; // +1 left (toward higher lateral offset), -1 right
  double duration = 4.0;
};

/// Ramp on the right of two main lanes; the merge goes left.
inline RoadLayout default_merge_layout() {
  RoadLayout layout;
  layout.lane_count = 3;
  layout.lane_width = 3.5;
  layout.lane_center_offsets = {-3.5, 0.0, 3.5};
  layout.marking_types = {Marking::kSolid, Marking::kDashed, Marking::kDashed,
                          Marking::kSolid};
  layout.ramp_lane_id = 0;
  layout.ramp_start_x = 100.0;
  layout.ramp_end_x = 420.0;
  return layout;
}

struct SyntheticSpec {
  int vehicle_count = 12; // main-lane vehicles
  double speed_min = 22.0;
  double speed_max = 28.0;
  /// Per-vehicle main lane; empty = round-robin over the main lanes.
  std::vector<int> lane_assignments;
  /// Explicit spawn x per main vehicle; empty = gap-structured placement.
  std::vector<double> spawn_positions;
  double duration = 40.0;  // s
  double timestep = 0.04;  // s, recording period
  double mean_gap = 45.0;  // m bumper-to-bumper within a lane
  double gap_jitter = 12.0;
  double spawn_front = 250.0; // max spawn x at t = 0
  double accel_sigma = 0.0;   // OU longitudinal acceleration stddev, m/s^2
  double accel_tau = 3.0;     // OU correlation time, s
  bool rule_based_changes = false;
  double rule_headway = 1.8;        // s, slow-lead threshold for overtaking
  double keep_right_clear_time = 3.0; // s the right lane must stay free
  double change_cooldown = 9.0;     // s between changes of one vehicle
  double lane_change_duration = 4.0;
  std::vector<LaneChangeScript> scripted_changes;
  bool with_ramp_vehicle = true;
  std::uint32_t ramp_vehicle_id = 1;
  double ramp_speed = 22.0;
  double ramp_spawn_x = -60.0;
  RoadLayout layout = default_merge_layout();
};

struct SyntheticScenario {
  std::vector<TrajectoryRecord> records;
  RoadLayout layout;
};

namespace detail {

struct SimVehicle {
  std::uint32_t id;
  double x, y, vx, vy;
  double accel = 0.0; // OU state
  double length, width;
  double desired_speed;
  int lane;
  // lane-change bookkeeping
  bool changing = false;
  double change_t0 = 0.0;
  double change_duration = 4.0;
  double change_y0 = 0.0;
  double change_y1 = 0.0;
  double last_change_end = -1e9;
  double right_clear_since = -1.0;
};

inline double quintic_blend(double s) {
  // 0 -> 0, 1 -> 1, zero first and second derivative at both ends.
  return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
}

} // namespace detail

/// Generates a kinematically consistent trajectory set: positions are exact
/// forward-Euler integrals of the stored velocities, so
/// x(t+dt) = x(t) + vx(t) dt holds to machine precision. Includes one ramp
/// vehicle and main-lane traffic with a configurable gap structure, optional
/// smooth stochastic longitudinal acceleration, and lane changes either
/// scripted or triggered by traffic context (slow lead ahead -> overtake
/// left; right lane free for a while -> return right).
inline SyntheticScenario generate_synthetic_scenario(const SyntheticSpec& spec,
                                                     std::uint64_t seed) {
  if (spec.vehicle_count < 1) throw InfeasibleSpec("vehicle_count must be >= 1");
  spec.layout.validate();
  const RoadLayout& layout = spec.layout;

  RandomEngine rng(derive_seed(seed, "synth-scenario"));
  std::vector<int> main_lanes;
  for (int l = 0; l < layout.lane_count; ++l) {
    if (l != layout.ramp_lane_id) main_lanes.push_back(l);
  }

  std::vector<detail::SimVehicle> vehicles;
  std::map<int, double> next_rear; // per-lane rear bumper of the last spawn
  std::uint32_t next_id = 1;
  if (spec.with_ramp_vehicle && spec.ramp_vehicle_id >= next_id) {
    next_id = spec.ramp_vehicle_id + 1;
  }

  for (int i = 0; i < spec.vehicle_count; ++i) {
    detail::SimVehicle v;
    v.id = next_id++;
    const int lane = spec.lane_assignments.empty()
                         ? main_lanes[i % main_lanes.size()]
                         : spec.lane_assignments[i % spec.lane_assignments.size()];
    if (lane < 0 || lane >= layout.lane_count || lane == layout.ramp_lane_id) {
      throw InfeasibleSpec("lane assignment outside the main lanes");
    }
    v.lane = lane;
    v.length = 4.2 + draw_uniform(rng, 0.0, 1.0);
    v.width = 1.8 + draw_uniform(rng, 0.0, 0.3);
    v.desired_speed = draw_uniform(rng, spec.speed_min, spec.speed_max);
    v.vx = v.desired_speed;
    v.vy = 0.0;
    v.y = layout.lane_center(lane);
    if (!spec.spawn_positions.empty()) {
      v.x = spec.spawn_positions[i % spec.spawn_positions.size()];
    } else if (!next_rear.count(lane)) {
      v.x = spec.spawn_front - draw_uniform(rng, 0.0, spec.mean_gap);
    } else {
      const double gap =
          std::max(8.0, spec.mean_gap + draw_uniform(rng, -spec.gap_jitter, spec.gap_jitter));
      v.x = next_rear[lane] - gap - v.length;
    }
    next_rear[lane] = v.x - 0.5 * v.length;
    vehicles.push_back(v);
  }

  if (spec.with_ramp_vehicle) {
    detail::SimVehicle v;
    v.id = spec.ramp_vehicle_id;
    v.lane = layout.ramp_lane_id;
    v.length = 4.6;
    v.width = 1.9;
    v.desired_speed = spec.ramp_speed;
    v.vx = spec.ramp_speed;
    v.vy = 0.0;
    v.x = spec.ramp_spawn_x;
    v.y = layout.lane_center(v.lane);
    vehicles.push_back(v);
  }

  // Overlapping spawns make the spec infeasible.
  for (std::size_t a = 0; a < vehicles.size(); ++a) {
    for (std::size_t b = a + 1; b < vehicles.size(); ++b) {
      if (vehicles[a].lane != vehicles[b].lane) continue;
      const double gap = std::abs(vehicles[a].x - vehicles[b].x) -
                         0.5 * (vehicles[a].length + vehicles[b].length);
      if (gap < 1.0) {
        throw InfeasibleSpec("overlapping spawn positions in lane " +
                             std::to_string(vehicles[a].lane));
      }
    }
  }

  std::sort(vehicles.begin(), vehicles.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });

  std::map<std::uint32_t, std::vector<LaneChangeScript>> scripts;
  for (const LaneChangeScript& s : spec.scripted_changes) {
    scripts[s.vehicle_id].push_back(s);
  }

  const double dt = spec.timestep;
  const std::int64_t frames = static_cast<std::int64_t>(std::llround(spec.duration / dt));
  const double ou_decay = std::exp(-dt / std::max(0.05, spec.accel_tau));
  const double ou_kick = spec.accel_sigma * std::sqrt(1.0 - ou_decay * ou_decay);

  auto begin_change = [&](detail::SimVehicle& v, int direction, double t, double duration) {
    const int target = v.lane + direction;
    v.changing = true;
    v.change_t0 = t;
    v.change_duration = duration;
    v.change_y0 = v.y;
    v.change_y1 = layout.lane_center(target);
  };

  std::vector<TrajectoryRecord> records;
  records.reserve(static_cast<std::size_t>(frames + 1) * vehicles.size());

  for (std::int64_t frame = 0; frame <= frames; ++frame) {
    const double t = static_cast<double>(frame) * dt;

    // Emit records for the current state before stepping.
    for (const detail::SimVehicle& v : vehicles) {
      TrajectoryRecord r;
      r.frame = frame;
      r.vehicle_id = v.id;
      r.x = v.x;
      r.y = v.y;
      r.width = v.length;
      r.height = v.width;
      r.x_velocity = v.vx;
      r.y_velocity = v.vy;
      r.lane_id = layout.lane_of(v.y).value_or(v.lane);
      records.push_back(r);
    }
    if (frame == frames) break;

    // Decide maneuvers, then integrate.
    for (detail::SimVehicle& v : vehicles) {
      // Scripted changes have priority.
      if (!v.changing) {
        auto it = scripts.find(v.id);
        if (it != scripts.end()) {
          for (const LaneChangeScript& s : it->second) {
            if (t >= s.t_start && t < s.t_start + dt &&
                layout.has_neighbor(v.lane, s.direction)) {
              begin_change(v, s.direction, t, s.duration);
            }
          }
        }
      }

      if (spec.rule_based_changes && !v.changing &&
          t - v.last_change_end > spec.change_cooldown && v.id != spec.ramp_vehicle_id) {
        // Find the lead in the own lane and occupancy of the neighbours.
        const detail::SimVehicle* lead = nullptr;
        bool left_free = true, right_free = true, right_lead_slow = false;
        for (const detail::SimVehicle& o : vehicles) {
          if (o.id == v.id) continue;
          const double dx = o.x - v.x;
          if (o.lane == v.lane && dx > 0 && (!lead || o.x < lead->x)) lead = &o;
          if (o.lane == v.lane + 1 && dx > -20.0 && dx < 35.0) left_free = false;
          if (o.lane == v.lane - 1) {
            if (dx > -20.0 && dx < 35.0) right_free = false;
            if (dx >= 35.0 && dx < 90.0 && o.vx < v.desired_speed - 1.0)
              right_lead_slow = true;
          }
        }
        const bool left_legal = layout.change_legal(v.lane, +1) &&
                                v.lane + 1 != layout.ramp_lane_id;
        const bool right_legal = layout.change_legal(v.lane, -1) &&
                                 v.lane - 1 != layout.ramp_lane_id;
        const double headway =
            lead ? (lead->x - v.x - 0.5 * (lead->length + v.length)) / std::max(1.0, v.vx)
                 : 1e9;
        if (left_legal && left_free && lead && headway < spec.rule_headway &&
            lead->vx < v.desired_speed - 1.0) {
          begin_change(v, +1, t, spec.lane_change_duration);
          v.right_clear_since = -1.0;
        } else if (right_legal && !right_lead_slow) {
          if (right_free) {
            if (v.right_clear_since < 0.0) v.right_clear_since = t;
            if (t - v.right_clear_since >= spec.keep_right_clear_time) {
              begin_change(v, -1, t, spec.lane_change_duration);
              v.right_clear_since = -1.0;
            }
          } else {
            v.right_clear_since = -1.0;
          }
        } else {
          v.right_clear_since = -1.0;
        }
      }

      // Longitudinal acceleration: OU noise plus a simple gap guard.
      double accel = 0.0;
      if (spec.accel_sigma > 0.0) {
        v.accel = v.accel * ou_decay + ou_kick * draw_gaussian(rng);
        accel = v.accel;
      }
      accel += 0.3 * (v.desired_speed - v.vx);
      const detail::SimVehicle* lead = nullptr;
      for (const detail::SimVehicle& o : vehicles) {
        if (o.id == v.id || o.lane != v.lane) continue;
        if (o.x > v.x && (!lead || o.x < lead->x)) lead = &o;
      }
      if (lead) {
        const double gap = lead->x - v.x - 0.5 * (lead->length + v.length);
        const double desired = 2.0 + 1.0 * v.vx;
        if (gap < desired) {
          accel = std::min(accel, 1.5 * (gap - desired) / std::max(5.0, desired) +
                                      0.8 * (lead->vx - v.vx));
        }
      }
      accel = std::clamp(accel, -3.5, 2.5);

      // Lateral velocity from the quintic profile, as a discrete derivative
      // so the emitted positions integrate the emitted velocities exactly.
      double vy_next = 0.0;
      if (v.changing) {
        const double s0 = std::clamp((t - v.change_t0) / v.change_duration, 0.0, 1.0);
        const double s1 = std::clamp((t + dt - v.change_t0) / v.change_duration, 0.0, 1.0);
        const double y0 = v.change_y0 + (v.change_y1 - v.change_y0) * detail::quintic_blend(s0);
        const double y1 = v.change_y0 + (v.change_y1 - v.change_y0) * detail::quintic_blend(s1);
        vy_next = (y1 - y0) / dt;
        if (s1 >= 1.0) {
          v.changing = false;
          v.last_change_end = t + dt;
          v.lane = *layout.lane_of(v.change_y1);
        }
      }

      v.x += v.vx * dt;
      v.y += v.vy * dt;
      v.vx = std::max(0.0, v.vx + accel * dt);
      v.vy = vy_next;
      if (!v.changing) {
        const auto lane_now = layout.lane_of(v.y);
        if (lane_now) v.lane = *lane_now;
      }
    }
  }

  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::make_pair(a.frame, a.vehicle_id) < std::make_pair(b.frame, b.vehicle_id);
  });
  return {std::move(records), layout};
}

} // namespace mergesim
