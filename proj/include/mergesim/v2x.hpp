#pragma once

#include "mergesim/geometry.hpp"
#include "mergesim/random.hpp"
#include "mergesim/wire.hpp"

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergesim {

enum class VehicleRole : std::uint8_t {
  kMainLane = 0,
  kMerging = 1,
  kCooperative = 2,
  kUnknown = 3,
};

inline const char* to_string(VehicleRole r) {
  switch (r) {
    case VehicleRole::kMainLane: return "main_lane";
    case VehicleRole::kMerging: return "merging";
    case VehicleRole::kCooperative: return "cooperative";
    case VehicleRole::kUnknown: return "unknown";
  }
  return "unknown";
}

inline constexpr std::uint32_t kAnonymousId = 0xFFFFFFFFu;
inline constexpr std::uint16_t kWireVersion = 1;

/// One object of the perceived-object list: a detection already composed to
/// an absolute world-frame state with propagated covariance, so receivers can
/// fuse it without knowing the sender's pose.
struct PerceivedObject {
  std::optional<std::uint32_t> target_id;
  VehicleState state;
  StateCovariance cov = StateCovariance::Zero();
};

/// Combined awareness + perception payload: the sender's own state plus the
/// list of objects it currently perceives.
struct V2xMessage {
  std::uint32_t sender_id = 0;
  std::uint32_t sequence = 0;
  double generation_time = 0.0;
  VehicleRole role = VehicleRole::kUnknown;
  VehicleState sender_state;
  StateCovariance sender_cov = StateCovariance::Zero();
  std::vector<PerceivedObject> perceived;
};

struct ChannelConfig {
  double delay = 0.05;           // s
  double period = 0.1;           // s
  double comms_range = 400.0;    // m
  double drop_probability = 0.0; // fraction
};

namespace detail {

inline void write_symmetric5(WireWriter& w, const StateCovariance& m) {
  for (int r = 0; r < 5; ++r)
    for (int c = r; c < 5; ++c) w.f64(m(r, c));
}

inline StateCovariance read_symmetric5(WireReader& r) {
  StateCovariance m;
  for (int i = 0; i < 5; ++i)
    for (int j = i; j < 5; ++j) {
      const double v = r.f64();
      m(i, j) = v;
      m(j, i) = v;
    }
  return m;
}

inline void write_state(WireWriter& w, const VehicleState& s) {
  w.f64(s.x);
  w.f64(s.y);
  w.f64(s.psi);
  w.f64(s.vx);
  w.f64(s.vy);
}

inline VehicleState read_state(WireReader& r) {
  VehicleState s;
  s.x = r.f64();
  s.y = r.f64();
  s.psi = r.f64();
  s.vx = r.f64();
  s.vy = r.f64();
  return s;
}

} // namespace detail

/// Wire layout (little-endian, fixed width): magic "V2XM", version u16,
/// sender_id u32, sequence u32, generation_time f64, role u8, sender state
/// 5xf64, sender covariance upper triangle 15xf64, perceived count u16, then
/// per object: id u32 (0xFFFFFFFF = anonymous), state 5xf64, covariance upper
/// triangle 15xf64. An empty perceived list gives exactly 185 bytes.
inline std::vector<std::byte> serialize(const V2xMessage& msg) {
  WireWriter w;
  w.bytes("V2XM", 4);
  w.u16(kWireVersion);
  w.u32(msg.sender_id);
  w.u32(msg.sequence);
  w.f64(msg.generation_time);
  w.u8(static_cast<std::uint8_t>(msg.role));
  detail::write_state(w, msg.sender_state);
  detail::write_symmetric5(w, msg.sender_cov);
  w.u16(static_cast<std::uint16_t>(msg.perceived.size()));
  for (const PerceivedObject& obj : msg.perceived) {
    w.u32(obj.target_id.value_or(kAnonymousId));
    detail::write_state(w, obj.state);
    detail::write_symmetric5(w, obj.cov);
  }
  return w.take();
}

inline V2xMessage deserialize(const std::vector<std::byte>& bytes) {
  WireReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string_view(magic, 4) != "V2XM") throw BadMagic();
  const std::uint16_t version = r.u16();
  if (version != kWireVersion) throw UnsupportedVersion(version);

  V2xMessage msg;
  msg.sender_id = r.u32();
  msg.sequence = r.u32();
  msg.generation_time = r.f64();
  const std::uint8_t role = r.u8();
  if (role > static_cast<std::uint8_t>(VehicleRole::kUnknown)) {
    throw TruncatedPayload("invalid role byte " + std::to_string(role));
  }
  msg.role = static_cast<VehicleRole>(role);
  msg.sender_state = detail::read_state(r);
  msg.sender_cov = detail::read_symmetric5(r);
  const std::uint16_t count = r.u16();
  msg.perceived.reserve(count);
  for (std::uint16_t i = 0; i < count; ++i) {
    PerceivedObject obj;
    const std::uint32_t id = r.u32();
    if (id != kAnonymousId) obj.target_id = id;
    obj.state = detail::read_state(r);
    obj.cov = detail::read_symmetric5(r);
    msg.perceived.push_back(std::move(obj));
  }
  if (r.remaining() != 0) throw TruncatedPayload("trailing bytes after message");
  return msg;
}

/// Noise applied to the sender's own state report (GNSS/IMU grade).
struct EgoReportNoise {
  double sigma_pos = 0.2;                 // m per axis
  double sigma_psi = 0.5 * M_PI / 180.0;  // rad
  double sigma_vel = 0.1;                 // m/s per axis
};

/// Builds the combined message: own noisy state report plus the perceived
/// objects composed to world frame with propagated covariance.
inline V2xMessage build_message(std::uint32_t sender_id, std::uint32_t sequence,
                                const VehicleState& true_state, VehicleRole role,
                                double clock, const EgoReportNoise& noise,
                                const std::vector<RelativeMeasurement>& detections,
                                RandomEngine& rng) {
  V2xMessage msg;
  msg.sender_id = sender_id;
  msg.sequence = sequence;
  msg.generation_time = clock;
  msg.role = role;

  VehicleState reported = true_state;
  reported.x += draw_gaussian(rng, 0.0, noise.sigma_pos);
  reported.y += draw_gaussian(rng, 0.0, noise.sigma_pos);
  reported.psi = normalize_angle(reported.psi + draw_gaussian(rng, 0.0, noise.sigma_psi));
  reported.vx += draw_gaussian(rng, 0.0, noise.sigma_vel);
  reported.vy += draw_gaussian(rng, 0.0, noise.sigma_vel);
  msg.sender_state = reported;

  StateCovariance own = StateCovariance::Zero();
  const double floor2 = 1e-6;
  own(0, 0) = own(1, 1) = std::max(noise.sigma_pos * noise.sigma_pos, floor2);
  own(2, 2) = std::max(noise.sigma_psi * noise.sigma_psi, floor2);
  own(3, 3) = own(4, 4) = std::max(noise.sigma_vel * noise.sigma_vel, floor2);
  msg.sender_cov = own;

  msg.perceived.reserve(detections.size());
  for (const RelativeMeasurement& det : detections) {
    if (det.target_id && *det.target_id == sender_id) continue;
    PerceivedObject obj;
    obj.target_id = det.target_id;
    obj.state = compose_measurement(reported, det);
    obj.cov = propagate_covariance(reported, det, own);
    msg.perceived.push_back(std::move(obj));
  }
  return msg;
}

/// One scheduled message delivery.
struct Delivery {
  double deliver_time = 0.0;
  std::uint32_t receiver_id = 0;
  V2xMessage message;
};

/// Simulated broadcast channel: fixed delay, optional Bernoulli drops, range
/// cutoff evaluated at send time. Single-owner event queue advanced by the
/// simulation clock.
class BroadcastChannel {
 public:
  explicit BroadcastChannel(const ChannelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), rng_(seed) {}

  const ChannelConfig& config() const { return cfg_; }

  /// Schedules deliveries of msg to every listed receiver in comms range of
  /// the sender position at send time. Sender never self-delivers.
  void broadcast(const V2xMessage& msg, const Vector2d& sender_pos,
                 const std::vector<std::pair<std::uint32_t, Vector2d>>& receivers) {
    for (const auto& [receiver_id, pos] : receivers) {
      if (receiver_id == msg.sender_id) continue;
      if ((pos - sender_pos).norm() > cfg_.comms_range) continue;
      if (cfg_.drop_probability > 0.0 &&
          draw_uniform(rng_) < cfg_.drop_probability) {
        continue;
      }
      queue_.push_back({msg.generation_time + cfg_.delay, receiver_id, msg});
    }
  }

  /// Pops all deliveries due at or before `clock`, ordered by
  /// (deliver_time, sender, sequence, receiver) for determinism.
  std::vector<Delivery> collect_due(double clock) {
    std::vector<Delivery> due;
    auto it = queue_.begin();
    while (it != queue_.end()) {
      if (it->deliver_time <= clock + 1e-12) {
        due.push_back(std::move(*it));
        it = queue_.erase(it);
      } else {
        ++it;
      }
    }
    std::stable_sort(due.begin(), due.end(), [](const Delivery& a, const Delivery& b) {
      if (a.deliver_time != b.deliver_time) return a.deliver_time < b.deliver_time;
      if (a.message.sender_id != b.message.sender_id)
        return a.message.sender_id < b.message.sender_id;
      if (a.message.sequence != b.message.sequence)
        return a.message.sequence < b.message.sequence;
      return a.receiver_id < b.receiver_id;
    });
    return due;
  }

  std::size_t pending() const { return queue_.size(); }

 private:
  ChannelConfig cfg_;
  RandomEngine rng_;
  std::deque<Delivery> queue_;
};

} // namespace mergesim
