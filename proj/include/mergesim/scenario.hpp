#pragma once

#include "mergesim/geometry.hpp"
#include "mergesim/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergesim {

struct MalformedRow : std::runtime_error {
  explicit MalformedRow(std::size_t line, const std::string& detail)
      : std::runtime_error("malformed row at line " + std::to_string(line) + ": " + detail),
        line_number(line) {}
  std::size_t line_number;
};

struct DuplicateRecord : std::runtime_error {
  DuplicateRecord(std::int64_t frame, std::uint32_t id)
      : std::runtime_error("duplicate record for frame " + std::to_string(frame) +
                           ", vehicle " + std::to_string(id)) {}
};

struct MissingColumn : std::runtime_error {
  explicit MissingColumn(const std::string& name)
      : std::runtime_error("missing column: " + name) {}
};

struct ClockOutOfRange : std::runtime_error {
  explicit ClockOutOfRange(double clock)
      : std::runtime_error("replay clock out of recorded range: " + std::to_string(clock)) {}
};

/// One row of a trajectory recording. `width` is the bounding-box extent in
/// driving direction (vehicle length), `height` the lateral extent.
struct TrajectoryRecord {
  std::int64_t frame = 0;
  std::uint32_t vehicle_id = 0;
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;
  double x_velocity = 0.0;
  double y_velocity = 0.0;
  int lane_id = 0;

  bool operator==(const TrajectoryRecord&) const = default;
};

enum class Marking { kSolid, kDashed };

inline Marking marking_from_string(const std::string& s) {
  if (s == "solid") return Marking::kSolid;
  if (s == "dashed") return Marking::kDashed;
  throw std::invalid_argument("unknown marking type: " + s);
}

inline const char* to_string(Marking m) {
  return m == Marking::kSolid ? "solid" : "dashed";
}

/// Straight road along +x. Lane ids are indices into the center-offset list,
/// ordered right to left (ascending lateral offset). Boundary j separates
/// lane j-1 from lane j; boundaries 0 and lane_count are the road edges.
struct RoadLayout {
  int lane_count = 0;
  double lane_width = 3.5;                 // m
  std::vector<double> lane_center_offsets; // m, ascending
  std::vector<Marking> marking_types;      // lane_count + 1 boundaries
  int ramp_lane_id = 0;
  double ramp_start_x = 0.0;
  double ramp_end_x = 0.0;

  void validate() const {
    if (lane_count < 2) throw std::invalid_argument("road layout needs at least two lanes");
    if (lane_width <= 2.5) throw std::invalid_argument("lane_width must exceed 2.5 m");
    if (static_cast<int>(lane_center_offsets.size()) != lane_count)
      throw std::invalid_argument("lane_center_offsets size must equal lane_count");
    if (static_cast<int>(marking_types.size()) != lane_count + 1)
      throw std::invalid_argument("marking_types must have lane_count + 1 entries");
    if (!std::is_sorted(lane_center_offsets.begin(), lane_center_offsets.end()))
      throw std::invalid_argument("lane_center_offsets must be ascending");
    if (ramp_lane_id < 0 || ramp_lane_id >= lane_count)
      throw std::invalid_argument("ramp_lane_id out of range");
    if (!(ramp_start_x < ramp_end_x))
      throw std::invalid_argument("ramp_start_x must be less than ramp_end_x");
  }

  double lane_center(int lane) const { return lane_center_offsets.at(lane); }

  double boundary_y(int j) const {
    if (j <= 0) return lane_center_offsets.front() - 0.5 * lane_width;
    if (j >= lane_count) return lane_center_offsets.back() + 0.5 * lane_width;
    return 0.5 * (lane_center_offsets[j - 1] + lane_center_offsets[j]);
  }

  std::optional<int> lane_of(double y) const {
    if (y < boundary_y(0) || y > boundary_y(lane_count)) return std::nullopt;
    for (int lane = 0; lane < lane_count; ++lane) {
      if (y <= boundary_y(lane + 1)) return lane;
    }
    return lane_count - 1;
  }

  /// direction +1 = toward higher offsets (left), -1 = right.
  bool has_neighbor(int lane, int direction) const {
    const int n = lane + direction;
    return n >= 0 && n < lane_count;
  }

  bool change_legal(int lane, int direction) const {
    if (!has_neighbor(lane, direction)) return false;
    const int boundary = direction > 0 ? lane + 1 : lane;
    return marking_types[boundary] == Marking::kDashed;
  }

  /// +1 when the ramp is the rightmost lane (merge goes left).
  int merge_direction() const { return ramp_lane_id == 0 ? +1 : -1; }

  int merge_target_lane() const { return ramp_lane_id + merge_direction(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

template <typename T>
T parse_number(const std::string& s, std::size_t line, const std::string& col) {
  T value{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first != last && (*first == ' ' || *first == '\t')) ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  while (ptr != last && (*ptr == ' ' || *ptr == '\t' || *ptr == '\r')) ++ptr;
  if (ec != std::errc{} || ptr != last) {
    throw MalformedRow(line, "cannot parse '" + s + "' in column " + col);
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw MalformedRow(line, "non-finite value in column " + col);
  }
  return value;
}

/// Shortest round-trip formatting, padded to at least two decimal places.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (s.find('e') == std::string::npos && s.find('E') == std::string::npos &&
      s.find("inf") == std::string::npos && s.find("nan") == std::string::npos) {
    const auto dot = s.find('.');
    if (dot == std::string::npos) {
      s += ".00";
    } else if (s.size() - dot - 1 < 2) {
      s.append(2 - (s.size() - dot - 1), '0');
    }
  }
  return s;
}

} // namespace detail

inline const std::vector<std::string>& trajectory_csv_columns() {
  static const std::vector<std::string> cols = {
      "frame", "id", "x", "y", "width", "height", "xVelocity", "yVelocity", "laneId"};
  return cols;
}

/// Parses a trajectory CSV. Required columns may appear in any order and
/// unrecognized columns are ignored, so recordings with extra channels load
/// unchanged. Records come back sorted by (frame, vehicle_id).
inline std::vector<TrajectoryRecord> parse_trajectory_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw MissingColumn("frame (empty file)");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col_index;
  for (std::size_t i = 0; i < header.size(); ++i) col_index[header[i]] = i;
  for (const std::string& col : trajectory_csv_columns()) {
    if (!col_index.count(col)) throw MissingColumn(col);
  }

  std::vector<TrajectoryRecord> records;
  std::map<std::pair<std::int64_t, std::uint32_t>, bool> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() < header.size()) {
      throw MalformedRow(line_no, "expected " + std::to_string(header.size()) + " fields, got " +
                                      std::to_string(fields.size()));
    }
    auto field = [&](const char* name) -> const std::string& {
      return fields[col_index.at(name)];
    };
    TrajectoryRecord rec;
    rec.frame = detail::parse_number<std::int64_t>(field("frame"), line_no, "frame");
    rec.vehicle_id = detail::parse_number<std::uint32_t>(field("id"), line_no, "id");
    rec.x = detail::parse_number<double>(field("x"), line_no, "x");
    rec.y = detail::parse_number<double>(field("y"), line_no, "y");
    rec.width = detail::parse_number<double>(field("width"), line_no, "width");
    rec.height = detail::parse_number<double>(field("height"), line_no, "height");
    rec.x_velocity = detail::parse_number<double>(field("xVelocity"), line_no, "xVelocity");
    rec.y_velocity = detail::parse_number<double>(field("yVelocity"), line_no, "yVelocity");
    rec.lane_id = detail::parse_number<int>(field("laneId"), line_no, "laneId");
    if (rec.frame < 0) throw MalformedRow(line_no, "negative frame");
    if (rec.width <= 0.0 || rec.height <= 0.0)
      throw MalformedRow(line_no, "non-positive vehicle dimensions");
    if (!seen.emplace(std::make_pair(rec.frame, rec.vehicle_id), true).second) {
      throw DuplicateRecord(rec.frame, rec.vehicle_id);
    }
    records.push_back(rec);
  }
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::make_pair(a.frame, a.vehicle_id) < std::make_pair(b.frame, b.vehicle_id);
  });
  return records;
}

inline std::vector<TrajectoryRecord> parse_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory file: " + path);
  return parse_trajectory_csv(in);
}

inline void write_trajectory_csv(std::ostream& out,
                                 const std::vector<TrajectoryRecord>& records) {
  out << "frame,id,x,y,width,height,xVelocity,yVelocity,laneId\n";
  for (const TrajectoryRecord& r : records) {
    out << r.frame << ',' << r.vehicle_id << ',' << detail::format_double(r.x) << ','
        << detail::format_double(r.y) << ',' << detail::format_double(r.width) << ','
        << detail::format_double(r.height) << ',' << detail::format_double(r.x_velocity)
        << ',' << detail::format_double(r.y_velocity) << ',' << r.lane_id << '\n';
  }
}

inline void write_trajectory_csv(const std::string& path,
                                 const std::vector<TrajectoryRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  write_trajectory_csv(out, records);
}

/// Deterministically selects round(rate * N) vehicles (half-up) from `ids`.
/// The caller passes candidate ids with the ego excluded; ego equipment is a
/// separate flag in the scenario config.
inline std::vector<std::uint32_t> assign_v2x_equipment(std::vector<std::uint32_t> ids,
                                                       double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("penetration rate outside [0, 1]");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const std::size_t k =
      static_cast<std::size_t>(std::floor(rate * static_cast<double>(ids.size()) + 0.5));
  RandomEngine rng(derive_seed(seed, "v2x-equipment"));
  shuffle_in_place(ids, rng);
  ids.resize(std::min(k, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Ground-truth state of one vehicle at a replay instant.
struct GroundTruthState {
  std::uint32_t vehicle_id = 0;
  VehicleState state;
  double length = 4.5; // m, along heading
  double width = 2.0;  // m, lateral
  int lane_id = 0;
};

/// Replays a recorded trajectory set with linear interpolation between
/// frames. Read-only after construction.
class Replay {
 public:
  Replay(std::vector<TrajectoryRecord> records, double recording_period = 0.04)
      : period_(recording_period) {
    if (recording_period <= 0.0) throw std::invalid_argument("recording period must be positive");
    for (TrajectoryRecord& r : records) {
      frames_[r.frame].push_back(std::move(r));
    }
    for (auto& [frame, rows] : frames_) {
      std::sort(rows.begin(), rows.end(),
                [](const auto& a, const auto& b) { return a.vehicle_id < b.vehicle_id; });
    }
    if (frames_.empty()) throw std::invalid_argument("replay needs at least one record");
  }

  double start_time() const { return static_cast<double>(frames_.begin()->first) * period_; }
  double end_time() const { return static_cast<double>(frames_.rbegin()->first) * period_; }
  double recording_period() const { return period_; }

  std::vector<std::uint32_t> vehicle_ids() const {
    std::vector<std::uint32_t> ids;
    for (const auto& [frame, rows] : frames_)
      for (const auto& r : rows) ids.push_back(r.vehicle_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  /// Ground truth at `clock`, linear interpolation between flanking frames.
  /// Vehicles absent from either flanking frame are omitted.
  std::vector<GroundTruthState> replay_step(double clock) const {
    constexpr double kTol = 1e-9;
    if (clock < start_time() - kTol || clock > end_time() + kTol) throw ClockOutOfRange(clock);
    const double f = clock / period_;
    const std::int64_t lo = static_cast<std::int64_t>(std::floor(f + kTol));
    double alpha = f - static_cast<double>(lo);
    if (alpha < kTol) alpha = 0.0;

    std::vector<GroundTruthState> out;
    const auto lo_it = frames_.find(lo);
    if (lo_it == frames_.end()) return out;
    if (alpha == 0.0) {
      for (const TrajectoryRecord& r : lo_it->second) out.push_back(to_state(r, r, 0.0));
      return out;
    }
    const auto hi_it = frames_.find(lo + 1);
    if (hi_it == frames_.end()) return out;
    auto a = lo_it->second.begin();
    auto b = hi_it->second.begin();
    while (a != lo_it->second.end() && b != hi_it->second.end()) {
      if (a->vehicle_id < b->vehicle_id) {
        ++a;
      } else if (b->vehicle_id < a->vehicle_id) {
        ++b;
      } else {
        out.push_back(to_state(*a, *b, alpha));
        ++a;
        ++b;
      }
    }
    return out;
  }

 private:
  static GroundTruthState to_state(const TrajectoryRecord& a, const TrajectoryRecord& b,
                                   double alpha) {
    GroundTruthState g;
    g.vehicle_id = a.vehicle_id;
    const double x = a.x + (b.x - a.x) * alpha;
    const double y = a.y + (b.y - a.y) * alpha;
    const double vx = a.x_velocity + (b.x_velocity - a.x_velocity) * alpha;
    const double vy = a.y_velocity + (b.y_velocity - a.y_velocity) * alpha;
    const double speed = std::hypot(vx, vy);
    const double psi = speed >= kHeadingSpeedFloor ? std::atan2(vy, vx) : 0.0;
    g.state = VehicleState(x, y, psi, vx, vy);
    g.length = a.width;
    g.width = a.height;
    g.lane_id = alpha < 0.5 ? a.lane_id : b.lane_id;
    return g;
  }

  std::map<std::int64_t, std::vector<TrajectoryRecord>> frames_;
  double period_;
};

} // namespace mergesim
