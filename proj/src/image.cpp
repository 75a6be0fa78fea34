#include "lvf/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lvf/error.hpp"

namespace lvf {

Image clamp01(Image img) {
  for (double& v : img.pix) v = std::min(1.0, std::max(0.0, v));
  return img;
}

Tensor tensor_from_image(const Image& img) {
  return Tensor::from_data({img.channels, img.height, img.width}, img.pix);
}

Image image_from_tensor(const Tensor& t) {
  if (t.rank() != 3)
    throw ShapeError("image tensor must be rank 3, got " +
                     shape_str(t.shape()));
  Image img(t.dim(0), t.dim(1), t.dim(2));
  img.pix = t.data();
  return img;
}

Tensor signed_from_image(const Image& img) {
  std::vector<double> d(img.pix.size());
  for (size_t i = 0; i < d.size(); ++i) d[i] = img.pix[i] * 2.0 - 1.0;
  return Tensor::from_data({img.channels, img.height, img.width},
                           std::move(d));
}

Image image_from_signed(const Tensor& t) {
  if (t.rank() != 3)
    throw ShapeError("image tensor must be rank 3, got " +
                     shape_str(t.shape()));
  Image img(t.dim(0), t.dim(1), t.dim(2));
  for (int64_t i = 0; i < t.size(); ++i)
    img.pix[i] = std::min(1.0, std::max(0.0, (t.data()[i] + 1.0) * 0.5));
  return img;
}

void save_ppm(const std::string& path, const Image& img,
              const std::vector<std::string>& comments) {
  if (img.channels != 3)
    throw ContractError("ppm output needs 3 channels, image has " +
                        std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P6\n";
  for (const std::string& c : comments) out << "# " << c << "\n";
  out << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(img.width * 3);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double v = std::min(1.0, std::max(0.0, img.at(c, y, x)));
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) throw IoError("write failed: " + path);
}

namespace {

// Reads one whitespace-separated header token, collecting '#' comment lines.
std::string ppm_token(std::istream& in, std::vector<std::string>* comments) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
      if (!line.empty() && line.front() == ' ') line.erase(0, 1);
      if (comments) comments->push_back(line);
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Image load_ppm(const std::string& path, std::vector<std::string>* comments) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  if (ppm_token(in, comments) != "P6")
    throw IoError("not a P6 ppm: " + path);
  int64_t w, h, maxval;
  try {
    w = std::stoll(ppm_token(in, comments));
    h = std::stoll(ppm_token(in, comments));
    maxval = std::stoll(ppm_token(in, comments));
  } catch (const std::exception&) {
    throw IoError("bad ppm header in " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    throw IoError("unsupported ppm header in " + path);
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError("truncated ppm payload in " + path);
  Image img(3, h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, y, x) = raw[(y * w + x) * 3 + c] / 255.0;
  return img;
}

namespace {

double cubic_kernel(double x) {  // Catmull-Rom, a = -0.5
  const double a = -0.5;
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

int64_t clamp_idx(int64_t i, int64_t n) {
  return std::min(n - 1, std::max<int64_t>(0, i));
}

}  // namespace

Image resize_bicubic(const Image& img, int64_t out_h, int64_t out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw ParamError("resize target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out(img.channels, out_h, out_w);
  double sy = static_cast<double>(img.height) / out_h;
  double sx = static_cast<double>(img.width) / out_w;
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t oy = 0; oy < out_h; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(fy));
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        int64_t x0 = static_cast<int64_t>(std::floor(fx));
        double acc = 0.0;
        for (int64_t dy = -1; dy <= 2; ++dy) {
          double wy = cubic_kernel(fy - (y0 + dy));
          if (wy == 0.0) continue;
          int64_t yy = clamp_idx(y0 + dy, img.height);
          for (int64_t dx = -1; dx <= 2; ++dx) {
            double wx = cubic_kernel(fx - (x0 + dx));
            if (wx == 0.0) continue;
            acc += wy * wx * img.at(c, yy, clamp_idx(x0 + dx, img.width));
          }
        }
        out.at(c, oy, ox) = std::min(1.0, std::max(0.0, acc));
      }
    }
  return out;
}

double mean_abs_laplacian(const Image& img) {
  if (img.height < 3 || img.width < 3) return 0.0;
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t y = 1; y + 1 < img.height; ++y)
      for (int64_t x = 1; x + 1 < img.width; ++x) {
        double lap = img.at(c, y - 1, x) + img.at(c, y + 1, x) +
                     img.at(c, y, x - 1) + img.at(c, y, x + 1) -
                     4.0 * img.at(c, y, x);
        acc += std::fabs(lap);
        ++count;
      }
  return acc / count;
}

}  // namespace lvf
