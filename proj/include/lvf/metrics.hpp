#pragma once

#include "lvf/image.hpp"

namespace lvf {

double mse(const Image& a, const Image& b);

// 10*log10(1/MSE) over all RGB channels, capped at 99 dB.
double psnr(const Image& a, const Image& b);

// SSIM with an 8x8 uniform window (stride 1), k1=0.01, k2=0.03, L=1,
// averaged over channels and window positions.
double ssim(const Image& a, const Image& b);

// Metrics compare like against like: if geometries differ, the output is
// bicubic-resized to the reference before scoring.
Image align_to_reference(const Image& out, const Image& ref);

}  // namespace lvf
