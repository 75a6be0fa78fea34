#include "lvf/metrics.hpp"

#include <cmath>
#include <string>

#include "lvf/error.hpp"

namespace lvf {

namespace {

std::string geom_str(const Image& i) {
  return std::to_string(i.channels) + "x" + std::to_string(i.height) + "x" +
         std::to_string(i.width);
}

void require_same(const char* op, const Image& a, const Image& b) {
  if (!a.same_geometry(b))
    throw ShapeError(std::string(op) + ": image geometries differ: " +
                     geom_str(a) + " vs " + geom_str(b));
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same("mse", a, b);
  double acc = 0.0;
  for (size_t i = 0; i < a.pix.size(); ++i) {
    double d = a.pix[i] - b.pix[i];
    acc += d * d;
  }
  return acc / a.pix.size();
}

double psnr(const Image& a, const Image& b) {
  double m = mse(a, b);
  if (m <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

double ssim(const Image& a, const Image& b) {
  require_same("ssim", a, b);
  const int64_t win = 8;
  if (a.height < win || a.width < win)
    throw ShapeError("ssim needs at least 8x8 images, got " + geom_str(a));
  const double c1 = 0.01 * 0.01;  // (k1*L)^2
  const double c2 = 0.03 * 0.03;  // (k2*L)^2
  const double inv_n = 1.0 / (win * win);
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t c = 0; c < a.channels; ++c)
    for (int64_t y = 0; y + win <= a.height; ++y)
      for (int64_t x = 0; x + win <= a.width; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int64_t dy = 0; dy < win; ++dy)
          for (int64_t dx = 0; dx < win; ++dx) {
            double va = a.at(c, y + dy, x + dx);
            double vb = b.at(c, y + dy, x + dx);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        double mu_a = sa * inv_n, mu_b = sb * inv_n;
        double var_a = saa * inv_n - mu_a * mu_a;
        double var_b = sbb * inv_n - mu_b * mu_b;
        double cov = sab * inv_n - mu_a * mu_b;
        double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        acc += s;
        ++count;
      }
  return acc / count;
}

Image align_to_reference(const Image& out, const Image& ref) {
  if (out.same_geometry(ref)) return out;
  if (out.channels != ref.channels)
    throw ShapeError("align_to_reference: channel mismatch: " + geom_str(out) +
                     " vs " + geom_str(ref));
  return resize_bicubic(out, ref.height, ref.width);
}

}  // namespace lvf
