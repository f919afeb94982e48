#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hicap {

enum class Split { train, val, test, external };

std::string_view split_name(Split s) noexcept;
std::optional<Split> parse_split(std::string_view name) noexcept;

// time x joint-state array, row-major (frames rows of `channels` values).
struct MotionTensor {
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t j) const { return values[t * channels + j]; }
  double& at(std::size_t t, std::size_t j) { return values[t * channels + j]; }
  // Throws UsageError when empty, mis-sized or non-finite.
  void validate() const;

  friend bool operator==(const MotionTensor&, const MotionTensor&) = default;
};

}  // namespace hicap
