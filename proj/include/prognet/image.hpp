#pragma once

#include <cstdint>
#include <vector>

#include "prognet/rng.hpp"

namespace prognet {

struct ImageU8 {
  int h = 0, w = 0;
  std::vector<uint8_t> px;
  uint8_t at(int r, int c) const { return px[static_cast<size_t>(r * w + c)]; }
  uint8_t& at(int r, int c) { return px[static_cast<size_t>(r * w + c)]; }
};

// Working representation for geometry/intensity transforms, values in [0,1].
struct ImageF {
  int h = 0, w = 0;
  std::vector<double> px;
  double at(int r, int c) const { return px[static_cast<size_t>(r * w + c)]; }
  double& at(int r, int c) { return px[static_cast<size_t>(r * w + c)]; }
};

ImageF to_float(const ImageU8& img);
ImageU8 to_u8(const ImageF& img);  // clamps to [0,1] and rounds

// Exact 90-degree steps (q quarter turns counterclockwise), pure index moves.
ImageU8 rotate_quarters(const ImageU8& img, int q);
ImageF rotate_quarters(const ImageF& img, int q);

// Rotation about the image center by `radians` (counterclockwise), bilinear
// resampling, zero fill outside the source.
ImageF rotate_bilinear(const ImageF& img, double radians);

ImageF center_crop(const ImageF& img, int size);
ImageF crop(const ImageF& img, int top, int left, int size);
ImageF resize_bilinear(const ImageF& img, int out_h, int out_w);
ImageF gamma_correct(const ImageF& img, double gamma);
ImageF add_gaussian_noise(const ImageF& img, double sigma, Rng& rng);

}  // namespace prognet
