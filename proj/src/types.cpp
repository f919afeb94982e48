#include "hicap/types.hpp"

#include <cmath>

#include "hicap/error.hpp"

namespace hicap {

std::string_view split_name(Split s) noexcept {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
    case Split::external:
      return "external";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view name) noexcept {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "external") return Split::external;
  return std::nullopt;
}

void MotionTensor::validate() const {
  if (frames == 0 || channels == 0) throw UsageError("motion tensor is empty");
  if (values.size() != frames * channels) {
    throw UsageError("motion tensor has " + std::to_string(values.size()) + " values, expected " +
                     std::to_string(frames) + "x" + std::to_string(channels));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw UsageError("motion tensor contains non-finite values");
  }
}

}  // namespace hicap
