#include "lvf/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "lvf/error.hpp"
#include "lvf/hash.hpp"
#include "lvf/version.hpp"

namespace lvf {

namespace {

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

double need(const DegradationSpec& s, const char* op, const char* key,
            double lo, double hi) {
  auto it = s.params.find(key);
  if (it == s.params.end())
    throw ParamError(std::string(op) + ": missing param " + key);
  double v = it->second;
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << op << ": " << key << "=" << v << " outside [" << lo << "," << hi
       << "]";
    throw ParamError(os.str());
  }
  return v;
}

int64_t need_int(const DegradationSpec& s, const char* op, const char* key,
                 int64_t lo, int64_t hi) {
  return static_cast<int64_t>(
      std::llround(need(s, op, key, static_cast<double>(lo),
                        static_cast<double>(hi))));
}

int64_t reflect_idx(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

std::vector<double> gaussian_kernel(double sigma) {
  int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    double w = std::exp(-(double)(i * i) / (2.0 * sigma * sigma));
    k[i + radius] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

Image blur_gaussian(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  std::vector<double> k = gaussian_kernel(sigma);
  int64_t radius = (static_cast<int64_t>(k.size()) - 1) / 2;
  Image tmp(img.channels, img.height, img.width);
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t y = 0; y < img.height; ++y)
      for (int64_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int64_t d = -radius; d <= radius; ++d)
          acc += k[d + radius] * img.at(c, y, reflect_idx(x + d, img.width));
        tmp.at(c, y, x) = acc;
      }
  Image out(img.channels, img.height, img.width);
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t y = 0; y < img.height; ++y)
      for (int64_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int64_t d = -radius; d <= radius; ++d)
          acc += k[d + radius] * tmp.at(c, reflect_idx(y + d, img.height), x);
        out.at(c, y, x) = acc;
      }
  return out;
}

Image conv2d_reflect(const Image& img, const std::vector<double>& kernel,
                     int64_t kh, int64_t kw) {
  Image out(img.channels, img.height, img.width);
  int64_t ry = kh / 2, rx = kw / 2;
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t y = 0; y < img.height; ++y)
      for (int64_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int64_t dy = 0; dy < kh; ++dy)
          for (int64_t dx = 0; dx < kw; ++dx)
            acc += kernel[dy * kw + dx] *
                   img.at(c, reflect_idx(y + dy - ry, img.height),
                          reflect_idx(x + dx - rx, img.width));
        out.at(c, y, x) = acc;
      }
  return out;
}

Image op_motion_blur(const Image& img, double len, double angle_deg) {
  int64_t radius = static_cast<int64_t>(std::ceil(len / 2.0));
  int64_t k = 2 * radius + 1;
  std::vector<double> kernel(k * k, 0.0);
  double rad = angle_deg * M_PI / 180.0;
  double dx = std::cos(rad), dy = std::sin(rad);
  double half = (len - 1.0) / 2.0;
  // bilinear splat along the line; fine sub-steps approximate coverage
  for (double t = -half; t <= half + 1e-9; t += 0.1) {
    double px = radius + t * dx, py = radius + t * dy;
    int64_t x0 = static_cast<int64_t>(std::floor(px));
    int64_t y0 = static_cast<int64_t>(std::floor(py));
    double fx = px - x0, fy = py - y0;
    for (int oy = 0; oy <= 1; ++oy)
      for (int ox = 0; ox <= 1; ++ox) {
        int64_t xx = x0 + ox, yy = y0 + oy;
        if (xx < 0 || xx >= k || yy < 0 || yy >= k) continue;
        double w = (ox ? fx : 1.0 - fx) * (oy ? fy : 1.0 - fy);
        kernel[yy * k + xx] += w;
      }
  }
  double sum = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (double& w : kernel) w /= sum;
  return conv2d_reflect(img, kernel, k, k);
}

int64_t poisson_draw(Rng& rng, double lambda) {
  if (lambda <= 0.0) return 0;
  if (lambda > 60.0) {
    double v = lambda + std::sqrt(lambda) * rng.normal();
    return std::max<int64_t>(0, static_cast<int64_t>(std::llround(v)));
  }
  double limit = std::exp(-lambda);
  int64_t count = 0;
  double p = 1.0;
  do {
    ++count;
    p *= rng.uniform();
  } while (p > limit);
  return count - 1;
}

Image op_pixelate(const Image& img, int64_t block) {
  if (block <= 1) return img;
  Image out(img.channels, img.height, img.width);
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t by = 0; by < img.height; by += block)
      for (int64_t bx = 0; bx < img.width; bx += block) {
        int64_t y1 = std::min(by + block, img.height);
        int64_t x1 = std::min(bx + block, img.width);
        double acc = 0.0;
        for (int64_t y = by; y < y1; ++y)
          for (int64_t x = bx; x < x1; ++x) acc += img.at(c, y, x);
        double avg = acc / ((y1 - by) * (x1 - bx));
        for (int64_t y = by; y < y1; ++y)
          for (int64_t x = bx; x < x1; ++x) out.at(c, y, x) = avg;
      }
  return out;
}

Image op_quantize_hist(const Image& img, int64_t levels) {
  Image out = img;
  int64_t plane = img.height * img.width;
  std::vector<int64_t> order(plane);
  for (int64_t c = 0; c < img.channels; ++c) {
    const double* src = img.pix.data() + c * plane;
    double* dst = out.pix.data() + c * plane;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      if (src[a] != src[b]) return src[a] < src[b];
      return a < b;
    });
    int64_t base = plane / levels, rem = plane % levels;
    int64_t at = 0;
    for (int64_t l = 0; l < levels; ++l) {
      int64_t count = base + (l < rem ? 1 : 0);
      double mean = 0.0;
      for (int64_t i = 0; i < count; ++i) mean += src[order[at + i]];
      mean /= count;
      for (int64_t i = 0; i < count; ++i) dst[order[at + i]] = mean;
      at += count;
    }
  }
  return out;
}

Image op_quantize_median(const Image& img, int64_t levels) {
  Image out = img;
  int64_t plane = img.height * img.width;
  for (int64_t c = 0; c < img.channels; ++c) {
    const double* src = img.pix.data() + c * plane;
    double* dst = out.pix.data() + c * plane;
    std::vector<std::vector<double>> bins(levels);
    for (int64_t i = 0; i < plane; ++i) {
      int64_t b = std::min<int64_t>(levels - 1,
                                    static_cast<int64_t>(src[i] * levels));
      bins[b].push_back(src[i]);
    }
    std::vector<double> rep(levels);
    for (int64_t b = 0; b < levels; ++b) {
      if (bins[b].empty()) {
        rep[b] = (b + 0.5) / levels;  // empty bin falls back to its center
      } else {
        std::sort(bins[b].begin(), bins[b].end());
        rep[b] = bins[b][(bins[b].size() - 1) / 2];
      }
    }
    for (int64_t i = 0; i < plane; ++i) {
      int64_t b = std::min<int64_t>(levels - 1,
                                    static_cast<int64_t>(src[i] * levels));
      dst[i] = rep[b];
    }
  }
  return out;
}

Image op_quantize_otsu(const Image& img) {
  Image out = img;
  int64_t plane = img.height * img.width;
  for (int64_t c = 0; c < img.channels; ++c) {
    const double* src = img.pix.data() + c * plane;
    double* dst = out.pix.data() + c * plane;
    int64_t hist[256] = {0};
    for (int64_t i = 0; i < plane; ++i)
      ++hist[std::min<int64_t>(255, static_cast<int64_t>(src[i] * 256.0))];
    double total_sum = 0.0;
    for (int b = 0; b < 256; ++b) total_sum += b * static_cast<double>(hist[b]);
    double best = -1.0;
    int best_t = 0;
    int64_t w0 = 0;
    double sum0 = 0.0;
    for (int t = 0; t < 256; ++t) {
      w0 += hist[t];
      sum0 += t * static_cast<double>(hist[t]);
      int64_t w1 = plane - w0;
      if (w0 == 0 || w1 == 0) continue;
      double mu0 = sum0 / w0, mu1 = (total_sum - sum0) / w1;
      double between = static_cast<double>(w0) * w1 * (mu0 - mu1) * (mu0 - mu1);
      if (between > best) {
        best = between;
        best_t = t;
      }
    }
    for (int64_t i = 0; i < plane; ++i) {
      int64_t bin = std::min<int64_t>(255, static_cast<int64_t>(src[i] * 256.0));
      dst[i] = bin <= best_t ? 0.0 : 1.0;
    }
  }
  return out;
}

void dft1d(std::vector<std::complex<double>>& v, bool inverse) {
  int64_t n = static_cast<int64_t>(v.size());
  std::vector<std::complex<double>> out(n);
  double sign = inverse ? 1.0 : -1.0;
  for (int64_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int64_t j = 0; j < n; ++j) {
      double ang = sign * 2.0 * M_PI * k * j / n;
      acc += v[j] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = inverse ? acc / static_cast<double>(n) : acc;
  }
  v = std::move(out);
}

Image op_ringing(const Image& img, double cutoff) {
  int64_t h = img.height, w = img.width;
  Image out(img.channels, h, w);
  for (int64_t c = 0; c < img.channels; ++c) {
    std::vector<std::complex<double>> freq(h * w);
    for (int64_t i = 0; i < h * w; ++i)
      freq[i] = img.pix[c * h * w + i];
    std::vector<std::complex<double>> line;
    for (int64_t y = 0; y < h; ++y) {
      line.assign(freq.begin() + y * w, freq.begin() + (y + 1) * w);
      dft1d(line, false);
      std::copy(line.begin(), line.end(), freq.begin() + y * w);
    }
    for (int64_t x = 0; x < w; ++x) {
      line.resize(h);
      for (int64_t y = 0; y < h; ++y) line[y] = freq[y * w + x];
      dft1d(line, false);
      for (int64_t y = 0; y < h; ++y) freq[y * w + x] = line[y];
    }
    for (int64_t ky = 0; ky < h; ++ky)
      for (int64_t kx = 0; kx < w; ++kx) {
        double fy = static_cast<double>(std::min(ky, h - ky)) / (h / 2.0);
        double fx = static_cast<double>(std::min(kx, w - kx)) / (w / 2.0);
        if (std::sqrt(fy * fy + fx * fx) > cutoff) freq[ky * w + kx] = 0.0;
      }
    for (int64_t x = 0; x < w; ++x) {
      line.resize(h);
      for (int64_t y = 0; y < h; ++y) line[y] = freq[y * w + x];
      dft1d(line, true);
      for (int64_t y = 0; y < h; ++y) freq[y * w + x] = line[y];
    }
    for (int64_t y = 0; y < h; ++y) {
      line.assign(freq.begin() + y * w, freq.begin() + (y + 1) * w);
      dft1d(line, true);
      for (int64_t x = 0; x < w; ++x)
        out.pix[c * h * w + y * w + x] = line[x].real();
    }
  }
  return clamp01(std::move(out));
}

Image op_compress_dct(const Image& img, int64_t quality) {
  double scale =
      (quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality) / 100.0;
  double step = std::max(0.04 * scale, 1e-6);
  // orthonormal 8x8 DCT-II basis
  double C[8][8];
  for (int u = 0; u < 8; ++u) {
    double alpha = (u == 0) ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int x = 0; x < 8; ++x)
      C[u][x] = alpha * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
  }
  int64_t ph = (img.height + 7) / 8 * 8, pw = (img.width + 7) / 8 * 8;
  Image out(img.channels, img.height, img.width);
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t by = 0; by < ph; by += 8)
      for (int64_t bx = 0; bx < pw; bx += 8) {
        double blockv[8][8], coef[8][8];
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            blockv[y][x] = img.at(c, std::min(by + y, img.height - 1),
                                  std::min(bx + x, img.width - 1)) -
                           0.5;
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y)
              for (int x = 0; x < 8; ++x)
                acc += C[u][y] * C[v][x] * blockv[y][x];
            coef[u][v] = std::round(acc / step) * step;
          }
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u)
              for (int v = 0; v < 8; ++v)
                acc += C[u][y] * C[v][x] * coef[u][v];
            int64_t yy = by + y, xx = bx + x;
            if (yy < img.height && xx < img.width)
              out.at(c, yy, xx) = acc + 0.5;
          }
      }
  return clamp01(std::move(out));
}

Image to_luma(const Image& img) {
  Image g(1, img.height, img.width);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      g.at(0, y, x) = kLumaR * img.at(0, y, x) + kLumaG * img.at(1, y, x) +
                      kLumaB * img.at(2, y, x);
  return g;
}

Image op_canny(const Image& img, double lo, double hi) {
  int64_t h = img.height, w = img.width;
  Image gray = img.channels == 3 ? to_luma(img) : img;
  Image smooth = blur_gaussian(gray, 1.0);
  std::vector<double> gx(h * w), gy(h * w), mag(h * w);
  double max_mag = 0.0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      auto px = [&](int64_t yy, int64_t xx) {
        return smooth.at(0, reflect_idx(yy, h), reflect_idx(xx, w));
      };
      double sx = -px(y - 1, x - 1) + px(y - 1, x + 1) - 2 * px(y, x - 1) +
                  2 * px(y, x + 1) - px(y + 1, x - 1) + px(y + 1, x + 1);
      double sy = -px(y - 1, x - 1) - 2 * px(y - 1, x) - px(y - 1, x + 1) +
                  px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1);
      gx[y * w + x] = sx;
      gy[y * w + x] = sy;
      mag[y * w + x] = std::hypot(sx, sy);
      max_mag = std::max(max_mag, mag[y * w + x]);
    }
  Image out(3, h, w, 0.0);
  // noise floor: constant regions leave ~1e-16 rounding residue in the sums
  if (max_mag <= 1e-9) return out;
  // non-maximum suppression along the quantized gradient direction
  std::vector<double> nms(h * w, 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double m = mag[y * w + x];
      if (m == 0.0) continue;
      double ang = std::atan2(gy[y * w + x], gx[y * w + x]) * 180.0 / M_PI;
      if (ang < 0) ang += 180.0;
      int64_t dy = 0, dx = 0;
      if (ang < 22.5 || ang >= 157.5) {
        dx = 1;
      } else if (ang < 67.5) {
        dy = 1;
        dx = 1;
      } else if (ang < 112.5) {
        dy = 1;
      } else {
        dy = 1;
        dx = -1;
      }
      auto m_at = [&](int64_t yy, int64_t xx) {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return mag[yy * w + xx];
      };
      if (m >= m_at(y + dy, x + dx) && m >= m_at(y - dy, x - dx))
        nms[y * w + x] = m;
    }
  double hi_t = hi * max_mag, lo_t = lo * max_mag;
  std::vector<uint8_t> state(h * w, 0);  // 0 none, 1 weak, 2 strong
  std::vector<int64_t> stack;
  for (int64_t i = 0; i < h * w; ++i) {
    if (nms[i] >= hi_t) {
      state[i] = 2;
      stack.push_back(i);
    } else if (nms[i] >= lo_t) {
      state[i] = 1;
    }
  }
  while (!stack.empty()) {
    int64_t i = stack.back();
    stack.pop_back();
    int64_t y = i / w, x = i % w;
    for (int64_t dy = -1; dy <= 1; ++dy)
      for (int64_t dx = -1; dx <= 1; ++dx) {
        int64_t yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        int64_t j = yy * w + xx;
        if (state[j] == 1) {
          state[j] = 2;
          stack.push_back(j);
        }
      }
  }
  for (int64_t i = 0; i < h * w; ++i)
    if (state[i] == 2)
      for (int64_t c = 0; c < 3; ++c) out.pix[c * h * w + i] = 1.0;
  return out;
}

Image op_saturation(const Image& img, double s) {
  if (img.channels != 3)
    throw ContractError("saturation needs 3 channels");
  Image out = img;
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x) {
      double l = kLumaR * img.at(0, y, x) + kLumaG * img.at(1, y, x) +
                 kLumaB * img.at(2, y, x);
      for (int64_t c = 0; c < 3; ++c)
        out.at(c, y, x) = l + s * (img.at(c, y, x) - l);
    }
  return clamp01(std::move(out));
}

Image op_mask_inpaint(const Image& img, int64_t n_rects, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d61736b, 0));
  Image out = img;
  int64_t budget = img.height * img.width / 4;
  int64_t used = 0;
  for (int64_t r = 0; r < n_rects; ++r) {
    int64_t rw = rng.uniform_int(std::max<int64_t>(2, img.width / 8),
                                 std::max<int64_t>(3, img.width / 3));
    int64_t rh = rng.uniform_int(std::max<int64_t>(2, img.height / 8),
                                 std::max<int64_t>(3, img.height / 3));
    int64_t x0 = rng.uniform_int(0, img.width - rw);
    int64_t y0 = rng.uniform_int(0, img.height - rh);
    if (used + rw * rh > budget) continue;
    used += rw * rh;
    for (int64_t c = 0; c < img.channels; ++c)
      for (int64_t y = y0; y < y0 + rh; ++y)
        for (int64_t x = x0; x < x0 + rw; ++x) out.at(c, y, x) = 0.0;
  }
  return out;
}

}  // namespace

const char* deg_kind_name(DegKind kind) {
  switch (kind) {
    case DegKind::GaussianBlur: return "gaussian_blur";
    case DegKind::MotionBlur: return "motion_blur";
    case DegKind::GaussianNoise: return "gaussian_noise";
    case DegKind::PoissonNoise: return "poisson_noise";
    case DegKind::Pixelate: return "pixelate";
    case DegKind::QuantizeHist: return "quantize_hist";
    case DegKind::QuantizeMedian: return "quantize_median";
    case DegKind::QuantizeOtsu: return "quantize_otsu";
    case DegKind::Ringing: return "ringing";
    case DegKind::CompressDct: return "compress_dct";
    case DegKind::BrightenGamma: return "brighten_gamma";
    case DegKind::DarkenGamma: return "darken_gamma";
    case DegKind::BrightenShift: return "brighten_shift";
    case DegKind::DarkenShift: return "darken_shift";
    case DegKind::ContrastScale: return "contrast_scale";
    case DegKind::SaturationScale: return "saturation_scale";
    case DegKind::Oversharpen: return "oversharpen";
    case DegKind::Mosaic: return "mosaic";
    case DegKind::MaskInpaint: return "mask_inpaint";
    case DegKind::Grayscale: return "grayscale";
    case DegKind::Canny: return "canny";
  }
  return "?";
}

Image apply(const DegradationSpec& spec, const Image& img) {
  switch (spec.kind) {
    case DegKind::GaussianBlur: {
      double sigma = need(spec, "gaussian_blur", "sigma", 0.0, 6.0);
      if (sigma == 0.0) return img;
      return clamp01(blur_gaussian(img, sigma));
    }
    case DegKind::MotionBlur: {
      double len = need(spec, "motion_blur", "len", 1.0, 15.0);
      double angle = need(spec, "motion_blur", "angle", 0.0, 360.0);
      return clamp01(op_motion_blur(img, len, angle));
    }
    case DegKind::GaussianNoise: {
      double sigma = need(spec, "gaussian_noise", "sigma", 0.0, 1.0);
      if (sigma == 0.0) return img;
      Rng rng(mix_seed(spec.seed, 0x6e6f6973, 0));
      Image out = img;
      for (double& v : out.pix) v += sigma * rng.normal();
      return clamp01(std::move(out));
    }
    case DegKind::PoissonNoise: {
      double peak = need(spec, "poisson_noise", "peak", 1.0, 500.0);
      Rng rng(mix_seed(spec.seed, 0x706f6973, 0));
      Image out = img;
      for (double& v : out.pix)
        v = static_cast<double>(poisson_draw(rng, v * peak)) / peak;
      return clamp01(std::move(out));
    }
    case DegKind::Pixelate: {
      int64_t block = need_int(spec, "pixelate", "block", 1, 16);
      return op_pixelate(img, block);
    }
    case DegKind::QuantizeHist: {
      int64_t levels = need_int(spec, "quantize_hist", "levels", 2, 32);
      return op_quantize_hist(img, levels);
    }
    case DegKind::QuantizeMedian: {
      int64_t levels = need_int(spec, "quantize_median", "levels", 2, 32);
      return op_quantize_median(img, levels);
    }
    case DegKind::QuantizeOtsu:
      return op_quantize_otsu(img);
    case DegKind::Ringing: {
      double cutoff = need(spec, "ringing", "cutoff", 0.05, 1.0);
      return op_ringing(img, cutoff);
    }
    case DegKind::CompressDct: {
      int64_t quality = need_int(spec, "compress_dct", "quality", 1, 95);
      return op_compress_dct(img, quality);
    }
    case DegKind::BrightenGamma: {
      double g = need(spec, "brighten_gamma", "gamma", 0.1, 1.0);
      if (g == 1.0) return img;
      Image out = img;
      for (double& v : out.pix) v = std::pow(v, g);
      return clamp01(std::move(out));
    }
    case DegKind::DarkenGamma: {
      double g = need(spec, "darken_gamma", "gamma", 1.0, 6.0);
      if (g == 1.0) return img;
      Image out = img;
      for (double& v : out.pix) v = std::pow(v, g);
      return clamp01(std::move(out));
    }
    case DegKind::BrightenShift: {
      double b = need(spec, "brighten_shift", "shift", 0.0, 0.6);
      if (b == 0.0) return img;
      Image out = img;
      for (double& v : out.pix) v += b;
      return clamp01(std::move(out));
    }
    case DegKind::DarkenShift: {
      double b = need(spec, "darken_shift", "shift", 0.0, 0.6);
      if (b == 0.0) return img;
      Image out = img;
      for (double& v : out.pix) v -= b;
      return clamp01(std::move(out));
    }
    case DegKind::ContrastScale: {
      double c = need(spec, "contrast_scale", "scale", 0.0, 4.0);
      if (c == 1.0) return img;
      Image out = img;
      for (double& v : out.pix) v = 0.5 + c * (v - 0.5);
      return clamp01(std::move(out));
    }
    case DegKind::SaturationScale: {
      double s = need(spec, "saturation_scale", "scale", 0.0, 4.0);
      if (s == 1.0) return img;
      return op_saturation(img, s);
    }
    case DegKind::Oversharpen: {
      double amount = need(spec, "oversharpen", "amount", 0.0, 4.0);
      double sigma = need(spec, "oversharpen", "sigma", 0.3, 5.0);
      if (amount == 0.0) return img;
      Image blurred = blur_gaussian(img, sigma);
      Image out = img;
      for (size_t i = 0; i < out.pix.size(); ++i)
        out.pix[i] = img.pix[i] + amount * (img.pix[i] - blurred.pix[i]);
      return clamp01(std::move(out));
    }
    case DegKind::Mosaic: {
      int64_t block = need_int(spec, "mosaic", "block", 1, 16);
      return op_pixelate(img, block);
    }
    case DegKind::MaskInpaint: {
      int64_t rects = need_int(spec, "mask_inpaint", "rects", 1, 5);
      return op_mask_inpaint(img, rects, spec.seed);
    }
    case DegKind::Grayscale: {
      Image g = to_luma(img);
      Image out(3, img.height, img.width);
      for (int64_t c = 0; c < 3; ++c)
        std::copy(g.pix.begin(), g.pix.end(),
                  out.pix.begin() + c * img.height * img.width);
      return out;
    }
    case DegKind::Canny: {
      double lo = need(spec, "canny", "lo", 0.02, 0.9);
      double hi = need(spec, "canny", "hi", 0.05, 0.95);
      if (lo >= hi)
        throw ParamError("canny: lo=" + std::to_string(lo) +
                         " must be below hi=" + std::to_string(hi));
      return op_canny(img, lo, hi);
    }
  }
  throw ParamError("unknown degradation kind");
}

// ---- procedural clean images -----------------------------------------------

namespace {

void blend_px(Image& img, int64_t y, int64_t x, const double rgb[3],
              double alpha) {
  for (int64_t c = 0; c < 3; ++c)
    img.at(c, y, x) = (1.0 - alpha) * img.at(c, y, x) + alpha * rgb[c];
}

}  // namespace

Image gen_clean(uint64_t seed, int64_t size) {
  if (size < 8) throw ParamError("gen_clean: size must be at least 8");
  Rng rng(mix_seed(seed, 0x636c6561, 0));
  Image img(3, size, size);
  double corner[4][3];
  for (auto& cc : corner)
    for (double& v : cc) v = rng.uniform();
  for (int64_t y = 0; y < size; ++y) {
    double fy = static_cast<double>(y) / (size - 1);
    for (int64_t x = 0; x < size; ++x) {
      double fx = static_cast<double>(x) / (size - 1);
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) = (1 - fy) * ((1 - fx) * corner[0][c] + fx * corner[1][c]) +
                          fy * ((1 - fx) * corner[2][c] + fx * corner[3][c]);
    }
  }
  int64_t n_rect = rng.uniform_int(2, 4);
  for (int64_t r = 0; r < n_rect; ++r) {
    int64_t x0 = rng.uniform_int(0, size - 4), y0 = rng.uniform_int(0, size - 4);
    int64_t x1 = rng.uniform_int(x0 + 2, std::min(size - 1, x0 + size / 2));
    int64_t y1 = rng.uniform_int(y0 + 2, std::min(size - 1, y0 + size / 2));
    double rgb[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    double alpha = rng.uniform(0.6, 1.0);
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) blend_px(img, y, x, rgb, alpha);
  }
  int64_t n_disc = rng.uniform_int(2, 4);
  for (int64_t d = 0; d < n_disc; ++d) {
    double cx = rng.uniform(0, size - 1), cy = rng.uniform(0, size - 1);
    double radius = rng.uniform(size / 8.0, size / 3.0);
    double rgb[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    double alpha = rng.uniform(0.6, 1.0);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double dist = std::hypot(x - cx, y - cy);
        double cov = std::min(1.0, std::max(0.0, radius + 0.5 - dist));
        if (cov > 0.0) blend_px(img, y, x, rgb, alpha * cov);
      }
  }
  int64_t n_sin = rng.uniform_int(1, 2);
  for (int64_t s = 0; s < n_sin; ++s) {
    double amp = rng.uniform(0.05, 0.15);
    double fx = rng.uniform(0.05, 0.25), fy = rng.uniform(0.05, 0.25);
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double w[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double v = amp * std::sin(2.0 * M_PI * (fx * x + fy * y) + phase);
        for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) += w[c] * v;
      }
  }
  int64_t n_stroke = rng.uniform_int(2, 3);
  for (int64_t s = 0; s < n_stroke; ++s) {
    double ax = rng.uniform(0, size - 1), ay = rng.uniform(0, size - 1);
    double bx = rng.uniform(0, size - 1), by = rng.uniform(0, size - 1);
    double thick = rng.uniform(0.7, 1.8);
    double rgb[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    double alpha = rng.uniform(0.8, 1.0);
    double vx = bx - ax, vy = by - ay;
    double len2 = vx * vx + vy * vy + 1e-12;
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double t = std::min(1.0, std::max(0.0, ((x - ax) * vx + (y - ay) * vy) / len2));
        double dist = std::hypot(x - (ax + t * vx), y - (ay + t * vy));
        double cov = std::min(1.0, std::max(0.0, thick / 2.0 + 0.5 - dist));
        if (cov > 0.0) blend_px(img, y, x, rgb, alpha * cov);
      }
  }
  return clamp01(std::move(img));
}

// ---- task catalog ----------------------------------------------------------

namespace {

std::map<std::string, double> no_params(Rng&) { return {}; }

}  // namespace

TaskCatalog TaskCatalog::standard() {
  TaskCatalog cat;
  auto add = [&cat](std::string id, DegKind kind, TaskDirection dir,
                    std::string instr,
                    std::function<std::map<std::string, double>(Rng&)> sam) {
    cat.index_[id] = cat.defs_.size();
    cat.defs_.push_back(
        {std::move(id), kind, dir, std::move(instr), std::move(sam)});
  };
  add("denoise_gaussian", DegKind::GaussianNoise, TaskDirection::Restore,
      "remove the gaussian noise", [](Rng& r) {
        return std::map<std::string, double>{{"sigma", r.uniform(0.05, 0.2)}};
      });
  add("denoise_poisson", DegKind::PoissonNoise, TaskDirection::Restore,
      "remove the poisson noise", [](Rng& r) {
        return std::map<std::string, double>{
            {"peak", static_cast<double>(r.uniform_int(20, 100))}};
      });
  add("deblur_gaussian", DegKind::GaussianBlur, TaskDirection::Restore,
      "remove the gaussian blur", [](Rng& r) {
        return std::map<std::string, double>{{"sigma", r.uniform(0.8, 2.0)}};
      });
  add("deblur_motion", DegKind::MotionBlur, TaskDirection::Restore,
      "remove the motion blur", [](Rng& r) {
        return std::map<std::string, double>{{"len", r.uniform(3.0, 7.0)},
                                             {"angle", r.uniform(0.0, 180.0)}};
      });
  add("depixelate", DegKind::Pixelate, TaskDirection::Restore,
      "remove the pixelation blocks", [](Rng& r) {
        return std::map<std::string, double>{
            {"block", static_cast<double>(r.uniform_int(2, 4))}};
      });
  add("dequantize_hist", DegKind::QuantizeHist, TaskDirection::Restore,
      "smooth the histogram quantization bands", [](Rng& r) {
        return std::map<std::string, double>{
            {"levels", static_cast<double>(r.uniform_int(3, 6))}};
      });
  add("dequantize_median", DegKind::QuantizeMedian, TaskDirection::Restore,
      "smooth the median quantization bands", [](Rng& r) {
        return std::map<std::string, double>{
            {"levels", static_cast<double>(r.uniform_int(3, 6))}};
      });
  add("dequantize_otsu", DegKind::QuantizeOtsu, TaskDirection::Restore,
      "restore tones from the binary image", no_params);
  add("deringing", DegKind::Ringing, TaskDirection::Restore,
      "remove the ringing artifacts", [](Rng& r) {
        return std::map<std::string, double>{{"cutoff", r.uniform(0.15, 0.4)}};
      });
  add("decompress", DegKind::CompressDct, TaskDirection::Restore,
      "remove the compression artifacts", [](Rng& r) {
        return std::map<std::string, double>{
            {"quality", static_cast<double>(r.uniform_int(5, 20))}};
      });
  add("brighten_gamma", DegKind::DarkenGamma, TaskDirection::Enhance,
      "brighten the dark image with gamma", [](Rng& r) {
        return std::map<std::string, double>{{"gamma", r.uniform(1.8, 3.0)}};
      });
  add("darken_gamma", DegKind::BrightenGamma, TaskDirection::Enhance,
      "darken the bright image with gamma", [](Rng& r) {
        return std::map<std::string, double>{{"gamma", r.uniform(0.35, 0.55)}};
      });
  add("brighten_shift", DegKind::DarkenShift, TaskDirection::Enhance,
      "brighten the dark image with shift", [](Rng& r) {
        return std::map<std::string, double>{{"shift", r.uniform(0.15, 0.35)}};
      });
  add("darken_shift", DegKind::BrightenShift, TaskDirection::Enhance,
      "darken the bright image with shift", [](Rng& r) {
        return std::map<std::string, double>{{"shift", r.uniform(0.15, 0.35)}};
      });
  add("enhance_contrast", DegKind::ContrastScale, TaskDirection::Enhance,
      "increase the contrast", [](Rng& r) {
        return std::map<std::string, double>{{"scale", r.uniform(0.3, 0.6)}};
      });
  add("enhance_saturation", DegKind::SaturationScale, TaskDirection::Enhance,
      "increase the saturation", [](Rng& r) {
        return std::map<std::string, double>{{"scale", r.uniform(0.2, 0.5)}};
      });
  add("fix_oversharpen", DegKind::Oversharpen, TaskDirection::Enhance,
      "remove the oversharpen halos", [](Rng& r) {
        return std::map<std::string, double>{{"amount", r.uniform(1.0, 2.5)},
                                             {"sigma", 1.0}};
      });
  add("demosaic", DegKind::Mosaic, TaskDirection::Enhance,
      "remove the mosaic blocks", [](Rng& r) {
        return std::map<std::string, double>{
            {"block", static_cast<double>(r.uniform_int(2, 4))}};
      });
  add("inpaint", DegKind::MaskInpaint, TaskDirection::Restore,
      "fill the masked holes", [](Rng& r) {
        return std::map<std::string, double>{
            {"rects", static_cast<double>(r.uniform_int(1, 3))}};
      });
  add("colorize", DegKind::Grayscale, TaskDirection::Enhance,
      "colorize the grayscale image", no_params);
  add("canny_edges", DegKind::Canny, TaskDirection::Annotate,
      "detect the canny edges", [](Rng&) {
        return std::map<std::string, double>{{"lo", 0.1}, {"hi", 0.25}};
      });
  return cat;
}

bool TaskCatalog::has(const std::string& id) const {
  return index_.count(id) > 0;
}

const TaskDef& TaskCatalog::get(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ParamError("unknown task id: " + id);
  return defs_[it->second];
}

std::vector<std::string> TaskCatalog::ids() const {
  std::vector<std::string> out;
  for (const auto& d : defs_) out.push_back(d.id);
  return out;
}

// ---- instruction vocabulary ------------------------------------------------

namespace {

std::vector<std::string> split_lower(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

InstructionVocab InstructionVocab::from_words(
    const std::vector<std::string>& words) {
  InstructionVocab v;
  v.words.push_back("<unk>");
  v.index["<unk>"] = 0;
  for (const std::string& w : words)
    if (!v.index.count(w)) {
      v.index[w] = static_cast<int64_t>(v.words.size());
      v.words.push_back(w);
    }
  return v;
}

InstructionVocab InstructionVocab::standard(const TaskCatalog& catalog) {
  std::vector<std::string> words;
  for (const auto& def : catalog.defs())
    for (const std::string& w : split_lower(def.instruction))
      words.push_back(w);
  // severity buckets available for future prompt variants
  words.push_back("mild");
  words.push_back("moderate");
  words.push_back("strong");
  return from_words(words);
}

int64_t InstructionVocab::id(const std::string& word) const {
  auto it = index.find(word);
  return it == index.end() ? 0 : it->second;
}

std::vector<int64_t> encode_instruction(const std::string& text,
                                        const InstructionVocab& vocab) {
  std::vector<int64_t> ids;
  for (const std::string& w : split_lower(text)) ids.push_back(vocab.id(w));
  return ids;
}

// ---- pair synthesis --------------------------------------------------------

TrainingPair make_pair_from_clean(const TaskDef& def,
                                  const std::map<std::string, double>& params,
                                  const Image& clean, uint64_t spec_seed) {
  DegradationSpec spec{def.kind, params, spec_seed};
  TrainingPair out;
  out.task_id = def.id;
  out.instruction = def.instruction;
  out.spec = spec;
  Image degraded = apply(spec, clean);
  if (def.direction == TaskDirection::Annotate) {
    out.lq = clean;
    out.hq = std::move(degraded);
  } else {
    out.lq = std::move(degraded);
    out.hq = clean;
  }
  return out;
}

TrainingPair make_pair(const std::string& task_id, const TaskCatalog& catalog,
                       uint64_t seed, int64_t size) {
  const TaskDef& def = catalog.get(task_id);
  Rng param_rng(mix_seed(seed, 1, 0));
  std::map<std::string, double> params = def.sample_params(param_rng);
  Image clean = gen_clean(mix_seed(seed, 2, 0), size);
  return make_pair_from_clean(def, params, clean, mix_seed(seed, 3, 0));
}

// ---- pair corpora ----------------------------------------------------------

namespace {

// Shared writer: the held-out testset and ad-hoc corpora differ only in the
// seed base and the recorded policy.
TestsetResult write_pair_corpus(const TaskCatalog& catalog,
                                const std::vector<std::string>& tasks,
                                int64_t n_per_task, uint64_t seed, int64_t size,
                                const std::string& out_dir,
                                const std::map<std::string, double>& param_overrides,
                                uint64_t pair_base, nlohmann::json seed_policy) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  nlohmann::json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["seed"] = seed;
  manifest["size"] = size;
  manifest["n_per_task"] = n_per_task;
  manifest["seed_policy"] = std::move(seed_policy);
  if (!param_overrides.empty()) manifest["param_overrides"] = param_overrides;
  nlohmann::json entries = nlohmann::json::array();
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const TaskDef& def = catalog.get(tasks[ti]);
    fs::create_directories(fs::path(out_dir) / def.id);
    for (int64_t i = 0; i < n_per_task; ++i) {
      uint64_t pair_seed = mix_seed(pair_base, ti, static_cast<uint64_t>(i));
      TrainingPair pair;
      if (param_overrides.empty()) {
        pair = make_pair(def.id, catalog, pair_seed, size);
      } else {
        Rng prng(mix_seed(pair_seed, 1, 0));
        auto params = def.sample_params(prng);
        for (const auto& [k, v] : param_overrides) params[k] = v;
        pair = make_pair_from_clean(def, params,
                                    gen_clean(mix_seed(pair_seed, 2, 0), size),
                                    mix_seed(pair_seed, 3, 0));
      }
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%03lld", static_cast<long long>(i));
      fs::path base = fs::path(out_dir) / def.id / stem;
      save_ppm(base.string() + "_lq.ppm", pair.lq);
      save_ppm(base.string() + "_hq.ppm", pair.hq);
      save_tensor(base.string() + "_lq.olvt", tensor_from_image(pair.lq));
      save_tensor(base.string() + "_hq.olvt", tensor_from_image(pair.hq));
      nlohmann::json e;
      e["task"] = def.id;
      e["index"] = i;
      e["seed"] = pair_seed;
      e["instruction"] = pair.instruction;
      e["params"] = pair.spec.params;
      e["lq_ppm"] = (fs::path(def.id) / (std::string(stem) + "_lq.ppm")).string();
      e["hq_ppm"] = (fs::path(def.id) / (std::string(stem) + "_hq.ppm")).string();
      e["lq_olvt"] = (fs::path(def.id) / (std::string(stem) + "_lq.olvt")).string();
      e["hq_olvt"] = (fs::path(def.id) / (std::string(stem) + "_hq.olvt")).string();
      entries.push_back(std::move(e));
    }
  }
  manifest["entries"] = std::move(entries);
  std::string payload = manifest.dump();
  std::string hash = hex64(fnv1a64(payload));
  manifest["manifest_hash"] = hash;
  fs::path mpath = fs::path(out_dir) / "manifest.json";
  std::ofstream out(mpath);
  if (!out) throw IoError("cannot write manifest: " + mpath.string());
  out << manifest.dump(2) << "\n";
  return {mpath.string(), hash};
}

}  // namespace

TestsetResult build_testset(const TaskCatalog& catalog,
                            const std::vector<std::string>& tasks,
                            int64_t n_per_task, uint64_t seed, int64_t size,
                            const std::string& out_dir,
                            const std::map<std::string, double>& param_overrides) {
  nlohmann::json policy = {{"train_base", seed},
                           {"test_base", seed + kTestSeedOffset},
                           {"offset", kTestSeedOffset},
                           {"disjoint", true}};
  return write_pair_corpus(catalog, tasks, n_per_task, seed, size, out_dir,
                           param_overrides, seed + kTestSeedOffset,
                           std::move(policy));
}

TestsetResult build_corpus(const TaskCatalog& catalog,
                           const std::vector<std::string>& tasks,
                           int64_t n_per_task, uint64_t seed, int64_t size,
                           const std::string& out_dir,
                           const std::map<std::string, double>& param_overrides) {
  nlohmann::json policy = {{"base", seed}, {"disjoint", false}};
  return write_pair_corpus(catalog, tasks, n_per_task, seed, size, out_dir,
                           param_overrides, seed, std::move(policy));
}

}  // namespace lvf
