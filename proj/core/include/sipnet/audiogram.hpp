#pragma once

#include <array>
#include <string>

#include "sipnet/errors.hpp"

namespace sipnet {

// Pure-tone hearing thresholds in dB HL at 8 standard frequencies.
// Higher values mean worse hearing; entries must be non-negative.
struct Audiogram {
  static constexpr std::array<int, 8> kFrequenciesHz = {250,  500,  1000, 2000,
                                                        3000, 4000, 6000, 8000};

  std::array<double, 8> thresholds{};

  void validate() const {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] >= 0.0)) {
        throw DataError("audiogram threshold at " + std::to_string(kFrequenciesHz[i]) +
                        " Hz must be non-negative, got " + std::to_string(thresholds[i]));
      }
    }
  }

  double mean() const {
    double acc = 0.0;
    for (const auto v : thresholds) acc += v;
    return acc / static_cast<double>(thresholds.size());
  }
};

}  // namespace sipnet
