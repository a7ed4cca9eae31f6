#include "prognet/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace prognet {

ImageF to_float(const ImageU8& img) {
  ImageF out{img.h, img.w, std::vector<double>(img.px.size())};
  for (size_t i = 0; i < img.px.size(); ++i) out.px[i] = img.px[i] / 255.0;
  return out;
}

ImageU8 to_u8(const ImageF& img) {
  ImageU8 out{img.h, img.w, std::vector<uint8_t>(img.px.size())};
  for (size_t i = 0; i < img.px.size(); ++i) {
    const double v = std::clamp(img.px[i], 0.0, 1.0);
    out.px[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

namespace {

template <typename Img>
Img rotate_quarters_impl(const Img& img, int q) {
  q = ((q % 4) + 4) % 4;
  if (q == 0) return img;
  if (img.h != img.w) throw std::invalid_argument("rotate_quarters: image must be square");
  const int n = img.h;
  Img out = img;
  // one counterclockwise quarter: out(r,c) = in(n-1-c, r)
  for (int step = 0; step < q; ++step) {
    Img tmp = out;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) out.at(r, c) = tmp.at(n - 1 - c, r);
  }
  return out;
}

}  // namespace

ImageU8 rotate_quarters(const ImageU8& img, int q) { return rotate_quarters_impl(img, q); }
ImageF rotate_quarters(const ImageF& img, int q) { return rotate_quarters_impl(img, q); }

ImageF rotate_bilinear(const ImageF& img, double radians) {
  const int h = img.h, w = img.w;
  ImageF out{h, w, std::vector<double>(img.px.size(), 0.0)};
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double cs = std::cos(radians), sn = std::sin(radians);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double uy = r - cy, ux = c - cx;
      // inverse map: rotate the output coordinate by -radians
      const double sx = cx + cs * ux + sn * uy;
      const double sy = cy - sn * ux + cs * uy;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      double acc = 0.0;
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const int yy = y0 + dy, xx = x0 + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          acc += wgt * img.at(yy, xx);
        }
      out.at(r, c) = acc;
    }
  return out;
}

ImageF crop(const ImageF& img, int top, int left, int size) {
  if (size > img.h || size > img.w || top < 0 || left < 0 || top + size > img.h ||
      left + size > img.w)
    throw std::invalid_argument("crop: " + std::to_string(size) + "px box at (" +
                                std::to_string(top) + "," + std::to_string(left) +
                                ") does not fit a " + std::to_string(img.h) + "x" +
                                std::to_string(img.w) + " image");
  ImageF out{size, size, std::vector<double>(static_cast<size_t>(size) * size)};
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) out.at(r, c) = img.at(top + r, left + c);
  return out;
}

ImageF center_crop(const ImageF& img, int size) {
  return crop(img, (img.h - size) / 2, (img.w - size) / 2, size);
}

ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
  ImageF out{out_h, out_w, std::vector<double>(static_cast<size_t>(out_h) * out_w)};
  const double sy = static_cast<double>(img.h) / out_h, sx = static_cast<double>(img.w) / out_w;
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c) {
      // half-pixel centers
      const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, img.h - 1.0);
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, img.w - 1.0);
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
      const double wy = fy - y0, wx = fx - x0;
      out.at(r, c) = (1 - wy) * ((1 - wx) * img.at(y0, x0) + wx * img.at(y0, x1)) +
                     wy * ((1 - wx) * img.at(y1, x0) + wx * img.at(y1, x1));
    }
  return out;
}

ImageF gamma_correct(const ImageF& img, double gamma) {
  ImageF out = img;
  for (auto& v : out.px) v = std::pow(std::clamp(v, 0.0, 1.0), gamma);
  return out;
}

ImageF add_gaussian_noise(const ImageF& img, double sigma, Rng& rng) {
  ImageF out = img;
  for (auto& v : out.px) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

}  // namespace prognet
