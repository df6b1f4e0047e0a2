#pragma once

#include <cstddef>
#include <vector>

#include "vdial/tensor.hpp"

namespace vdial {

/// Raw frames, channels-last [frames × height × width × 3], values in [0, 1].
struct VideoClip {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  double fps = 16.0;
  std::vector<float> pixels;

  Tensor to_tensor() const {
    return Tensor::from({frames, height, width, 3}, std::vector<double>(pixels.begin(), pixels.end()));
  }

  friend bool operator==(const VideoClip&, const VideoClip&) = default;
};

/// Output of the frozen audio featurizer: [steps × dim].
struct AudioFeatures {
  std::size_t steps = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  Tensor to_tensor() const {
    return Tensor::from({steps, dim}, std::vector<double>(values.begin(), values.end()));
  }

  double energy() const {
    double e = 0.0;
    for (float v : values) e += static_cast<double>(v) * v;
    return e;
  }

  friend bool operator==(const AudioFeatures&, const AudioFeatures&) = default;
};

}  // namespace vdial
