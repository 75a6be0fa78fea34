#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvf/tensor.hpp"

namespace lvf {

// RGB image: channel-major planes (c×H×W) of doubles in [0,1].
struct Image {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> pix;

  Image() = default;
  Image(int64_t c, int64_t h, int64_t w, double fill = 0.0)
      : channels(c), height(h), width(w), pix(c * h * w, fill) {}

  double& at(int64_t c, int64_t y, int64_t x) {
    return pix[(c * height + y) * width + x];
  }
  double at(int64_t c, int64_t y, int64_t x) const {
    return pix[(c * height + y) * width + x];
  }
  int64_t size() const { return channels * height * width; }
  bool same_geometry(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

Image clamp01(Image img);

Tensor tensor_from_image(const Image& img);       // [c,H,W] in [0,1]
Image image_from_tensor(const Tensor& t);
Tensor signed_from_image(const Image& img);       // [0,1] -> [-1,1]
Image image_from_signed(const Tensor& t);         // clamps into [0,1]

// Binary PPM (P6, 8-bit). Comment lines after the magic carry metadata and
// are returned by the loader.
void save_ppm(const std::string& path, const Image& img,
              const std::vector<std::string>& comments = {});
Image load_ppm(const std::string& path,
               std::vector<std::string>* comments = nullptr);

// Catmull-Rom bicubic with replicated borders; output clamped to [0,1].
Image resize_bicubic(const Image& img, int64_t out_h, int64_t out_w);

// Mean |4-neighbour Laplacian| over interior pixels and channels; a flatness
// probe for generated images.
double mean_abs_laplacian(const Image& img);

}  // namespace lvf
