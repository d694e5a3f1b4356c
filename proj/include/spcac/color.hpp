// Copyright (c) the spcac project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// BT.709 full-range RGB <-> YUV. The one and only color conversion in the
// tree: the training distortion and the evaluation metrics both call these,
// so the loss optimizes exactly what the metrics measure.

#include <array>

namespace spcac {

// Y = 0.2126 R + 0.7152 G + 0.0722 B
// U = (B - Y) / 1.8556 + offset
// V = (R - Y) / 1.5748 + offset
// Row-major 3x3 matrix applied to (R, G, B); offsets (0, 128, 128) in the
// 8-bit domain cancel in any difference, so the matrix alone defines the
// distortion geometry.
constexpr std::array<double, 9> kRgbToYuv = {
    0.2126, 0.7152, 0.0722,
    -0.2126 / 1.8556, -0.7152 / 1.8556, (1.0 - 0.0722) / 1.8556,
    (1.0 - 0.2126) / 1.5748, -0.7152 / 1.5748, -0.0722 / 1.5748,
};

// 8-bit domain, offsets included (identity on white: 255 -> Y 255, U/V 128).
inline std::array<double, 3> rgb_to_yuv_8bit(double r, double g, double b) {
  const double y = kRgbToYuv[0] * r + kRgbToYuv[1] * g + kRgbToYuv[2] * b;
  const double u = kRgbToYuv[3] * r + kRgbToYuv[4] * g + kRgbToYuv[5] * b + 128.0;
  const double v = kRgbToYuv[6] * r + kRgbToYuv[7] * g + kRgbToYuv[8] * b + 128.0;
  return {y, u, v};
}

// Offset-free transform for difference vectors (any range).
inline std::array<double, 3> rgb_to_yuv_linear(double r, double g, double b) {
  return {kRgbToYuv[0] * r + kRgbToYuv[1] * g + kRgbToYuv[2] * b,
          kRgbToYuv[3] * r + kRgbToYuv[4] * g + kRgbToYuv[5] * b,
          kRgbToYuv[6] * r + kRgbToYuv[7] * g + kRgbToYuv[8] * b};
}

}  // namespace spcac
