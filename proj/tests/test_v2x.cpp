#include "mergesim/v2x.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace mergesim;

namespace {

V2xMessage sample_message(std::mt19937_64& rng, int objects) {
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  auto random_state = [&] {
    return VehicleState(u(rng), u(rng), u(rng) / 50.0, u(rng) / 5.0, u(rng) / 5.0);
  };
  auto random_cov = [&] {
    Matrix5d a;
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) a(i, j) = u(rng) / 100.0;
    const Matrix5d psd = a * a.transpose();
    return StateCovariance(0.5 * (psd + psd.transpose()));
  };
  V2xMessage msg;
  msg.sender_id = static_cast<std::uint32_t>(rng() % 1000);
  msg.sequence = static_cast<std::uint32_t>(rng() % 100000);
  msg.generation_time = std::abs(u(rng));
  msg.role = static_cast<VehicleRole>(rng() % 4);
  msg.sender_state = random_state();
  msg.sender_cov = random_cov();
  for (int i = 0; i < objects; ++i) {
    PerceivedObject obj;
    if (rng() % 4 != 0) obj.target_id = static_cast<std::uint32_t>(rng() % 1000);
    obj.state = random_state();
    obj.cov = random_cov();
    msg.perceived.push_back(obj);
  }
  return msg;
}

bool same_message(const V2xMessage& a, const V2xMessage& b) {
  if (a.sender_id != b.sender_id || a.sequence != b.sequence ||
      a.generation_time != b.generation_time || a.role != b.role) {
    return false;
  }
  if ((a.sender_state.to_vector() - b.sender_state.to_vector()).cwiseAbs().maxCoeff() != 0.0)
    return false;
  if ((a.sender_cov - b.sender_cov).cwiseAbs().maxCoeff() != 0.0) return false;
  if (a.perceived.size() != b.perceived.size()) return false;
  for (std::size_t i = 0; i < a.perceived.size(); ++i) {
    if (a.perceived[i].target_id != b.perceived[i].target_id) return false;
    if ((a.perceived[i].state.to_vector() - b.perceived[i].state.to_vector())
            .cwiseAbs()
            .maxCoeff() != 0.0)
      return false;
    if ((a.perceived[i].cov - b.perceived[i].cov).cwiseAbs().maxCoeff() != 0.0) return false;
  }
  return true;
}

} // namespace

TEST_CASE("empty perceived list serializes to exactly 185 bytes") {
  V2xMessage msg;
  msg.sender_id = 42;
  msg.sequence = 7;
  msg.generation_time = 1.5;
  msg.role = VehicleRole::kMerging;
  CHECK(serialize(msg).size() == 185);
}

TEST_CASE("two-object message re-serializes bit-identically") {
  std::mt19937_64 rng(1);
  const V2xMessage msg = sample_message(rng, 2);
  const auto bytes = serialize(msg);
  const V2xMessage decoded = deserialize(bytes);
  CHECK(same_message(msg, decoded));
  CHECK(serialize(decoded) == bytes);
}

TEST_CASE("wire round-trip property over randomized messages") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 500; ++i) {
    const V2xMessage msg = sample_message(rng, static_cast<int>(rng() % 6));
    const auto bytes = serialize(msg);
    const V2xMessage decoded = deserialize(bytes);
    REQUIRE(same_message(msg, decoded));
    REQUIRE(serialize(decoded) == bytes);
  }
}

TEST_CASE("deserialize rejects malformed payloads") {
  std::mt19937_64 rng(5);
  auto bytes = serialize(sample_message(rng, 1));

  auto truncated = bytes;
  truncated.resize(truncated.size() - 8);
  CHECK_THROWS_AS(deserialize(truncated), TruncatedPayload);

  auto bad_magic = bytes;
  bad_magic[0] = std::byte{'X'};
  CHECK_THROWS_AS(deserialize(bad_magic), BadMagic);

  auto bad_version = bytes;
  bad_version[4] = std::byte{9};
  CHECK_THROWS_AS(deserialize(bad_version), UnsupportedVersion);

  auto trailing = bytes;
  trailing.push_back(std::byte{0});
  CHECK_THROWS_AS(deserialize(trailing), TruncatedPayload);
}

TEST_CASE("build_message composes detections and excludes the sender") {
  RandomEngine rng(3);
  EgoReportNoise noise;
  noise.sigma_pos = 0.0;
  noise.sigma_psi = 0.0;
  noise.sigma_vel = 0.0;
  const VehicleState sender(10, 0, 0, 20, 0);

  RelativeMeasurement det;
  det.dx = 30;
  det.dy = 3.5;
  det.dvx = 2.0;
  det.cov = Matrix4d::Identity() * 0.1;
  det.target_id = 9;

  RelativeMeasurement self_echo = det;
  self_echo.target_id = 5;

  const V2xMessage msg =
      build_message(5, 0, sender, VehicleRole::kMainLane, 2.0, noise, {det, self_echo}, rng);
  REQUIRE(msg.perceived.size() == 1);
  CHECK(msg.perceived[0].target_id.value() == 9);
  CHECK(msg.perceived[0].state.x == Catch::Approx(40.0));
  CHECK(msg.perceived[0].state.y == Catch::Approx(3.5));
  CHECK(msg.perceived[0].state.vx == Catch::Approx(22.0));
  CHECK(is_psd(msg.perceived[0].cov, 1e-9));
  CHECK(msg.generation_time == 2.0);
}

TEST_CASE("build_message with no detections carries only the sender report") {
  RandomEngine rng(4);
  const V2xMessage msg = build_message(1, 0, VehicleState(0, 0, 0, 20, 0),
                                       VehicleRole::kMainLane, 0.0, {}, {}, rng);
  CHECK(msg.perceived.empty());
}

TEST_CASE("broadcast respects range, drops, and self-delivery") {
  ChannelConfig cfg;
  cfg.delay = 0.05;
  cfg.comms_range = 100.0;
  BroadcastChannel channel(cfg, 1);

  V2xMessage msg;
  msg.sender_id = 1;
  msg.generation_time = 1.0;
  const std::vector<std::pair<std::uint32_t, Vector2d>> receivers = {
      {1, {0, 0}}, {2, {50, 0}}, {3, {101, 0}}};
  channel.broadcast(msg, {0, 0}, receivers);
  auto due = channel.collect_due(2.0);
  REQUIRE(due.size() == 1);
  CHECK(due[0].receiver_id == 2);
  CHECK(due[0].deliver_time == Catch::Approx(1.05));

  ChannelConfig all_drop = cfg;
  all_drop.drop_probability = 1.0;
  BroadcastChannel lossy(all_drop, 1);
  lossy.broadcast(msg, {0, 0}, receivers);
  CHECK(lossy.collect_due(10.0).empty());
}

TEST_CASE("deliveries keep per-sender FIFO order") {
  ChannelConfig cfg;
  cfg.delay = 0.05;
  BroadcastChannel channel(cfg, 1);
  const std::vector<std::pair<std::uint32_t, Vector2d>> receivers = {{2, {10, 0}}};
  for (std::uint32_t seq = 0; seq < 5; ++seq) {
    V2xMessage msg;
    msg.sender_id = 1;
    msg.sequence = seq;
    msg.generation_time = 0.1 * seq;
    channel.broadcast(msg, {0, 0}, receivers);
  }
  const auto due = channel.collect_due(10.0);
  REQUIRE(due.size() == 5);
  for (std::uint32_t i = 0; i < 5; ++i) CHECK(due[i].message.sequence == i);
}

TEST_CASE("messages not yet due stay queued") {
  ChannelConfig cfg;
  cfg.delay = 0.5;
  BroadcastChannel channel(cfg, 1);
  V2xMessage msg;
  msg.sender_id = 1;
  msg.generation_time = 0.0;
  channel.broadcast(msg, {0, 0}, {{2, {1, 0}}});
  CHECK(channel.collect_due(0.4).empty());
  CHECK(channel.pending() == 1);
  CHECK(channel.collect_due(0.5).size() == 1);
}
