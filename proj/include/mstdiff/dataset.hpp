#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff {

/// Users on a fixed time grid. Traffic is min-max normalised per user; the
/// pairs (norm_min, norm_max) invert it.
struct Dataset {
  Tensor<double> traffic;               // [U x T] in [0, 1]
  std::vector<std::size_t> trajectory;  // U*T location indices, row-major
  Tensor<double> coords;                // [N x 2] lon, lat
  std::vector<std::string> station_ids; // N
  std::vector<std::string> user_ids;    // U; empty means "u<index>"
  std::vector<double> norm_min;         // U
  std::vector<double> norm_max;         // U
  std::vector<int> archetype;           // U, synthetic data only (-1 = unknown)
  std::vector<int> station_group;       // N, synthetic data only; empty when unknown

  std::size_t users() const noexcept { return traffic.empty() ? 0 : traffic.rows(); }
  std::size_t length() const noexcept { return traffic.empty() ? 0 : traffic.cols(); }
  std::size_t locations() const noexcept { return station_ids.size(); }

  std::string user_id(std::size_t u) const { return user_ids.empty() ? "u" + std::to_string(u) : user_ids.at(u); }

  std::span<const std::size_t> user_trajectory(std::size_t u) const {
    return std::span<const std::size_t>(trajectory).subspan(u * length(), length());
  }

  void validate() const {
    const std::size_t u = users(), t = length(), n = locations();
    if (u < 1) throw DataError("dataset has no users");
    if (n < 2) throw DataError("dataset needs at least two locations");
    if (trajectory.size() != u * t) throw DataError("trajectory size does not match traffic shape");
    if (coords.rows() != n || coords.cols() != 2) throw DataError("coordinate table must be [N x 2]");
    if (norm_min.size() != u || norm_max.size() != u) throw DataError("normalisation pairs missing");
    if (!user_ids.empty() && user_ids.size() != u) throw DataError("user ids do not match users");
    if (!archetype.empty() && archetype.size() != u) throw DataError("archetype labels do not match users");
    if (!station_group.empty() && station_group.size() != n) throw DataError("station groups do not match locations");
    for (auto l : trajectory)
      if (l >= n) throw DataError("trajectory location " + std::to_string(l) + " outside [0, N)");
    for (auto v : traffic.data())
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("normalised traffic outside [0, 1]");
  }
};

}  // namespace mstdiff
