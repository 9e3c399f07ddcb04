#include "bootleg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <fstream>
#include <numbers>

#include "bootleg/error.hpp"

namespace bootleg {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void unreadable(const fs::path& p, const std::string& why) {
  fail(ErrorCode::UnreadableImage, "cannot read image " + p.string() + ": " + why);
}

struct PngError {
  char message[256] = "corrupt PNG";
};

void png_on_error(png_structp png, png_const_charp msg) {
  auto* e = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(e->message, sizeof e->message, "%s", msg);
  png_longjmp(png, 1);
}

void png_on_warning(png_structp, png_const_charp) {}

// Everything with a destructor lives in the caller so the longjmp on error
// skips nothing. Alpha is dropped rather than composited and 16-bit samples
// keep their high byte.
bool decode_png(png_structp png, png_infop info, std::FILE* f, Image& out,
                std::vector<png_bytep>& rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(out.width) * 3) return false;
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  rows.resize(static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y)
    rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * out.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return true;
}

Image read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) unreadable(path, "cannot open");
  PngError err;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_on_error, png_on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    unreadable(path, "out of memory");
  }
  Image out;
  std::vector<png_bytep> rows;
  const bool ok = decode_png(png, info, f.get(), out, rows);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) unreadable(path, err.message);
  return out;
}

// Skips whitespace and # comments in a PNM header.
bool pnm_int(std::istream& in, int& v) {
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  return static_cast<bool>(in >> v);
}

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) unreadable(path, "cannot open");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    unreadable(path, "not a binary PGM/PPM");
  int w = 0, h = 0, maxval = 0;
  if (!pnm_int(in, w) || !pnm_int(in, h) || !pnm_int(in, maxval) || w < 1 || h < 1 ||
      maxval < 1 || maxval > 255)
    unreadable(path, "bad PNM header");
  in.get();
  const int ch = magic[1] == '6' ? 3 : 1;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * ch);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    unreadable(path, "truncated pixel data");
  Image out{h, w, {}};
  out.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i)
    for (int c = 0; c < 3; ++c) {
      const int v = raw[i * ch + (ch == 3 ? c : 0)];
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(v * 255 / maxval);
    }
  return out;
}

}  // namespace

Image read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) unreadable(path, "cannot open");
  unsigned char sig[8] = {0};
  in.read(reinterpret_cast<char*>(sig), 8);
  if (in.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (in.gcount() >= 2 && sig[0] == 'P') return read_pnm(path);
  unreadable(path, "unrecognised format");
}

void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

Dataset load_image_folder(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::EmptyDataset,
          "dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  Dataset ds;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    ds.class_names.push_back(classes[c].filename().string());
    for (const auto& f : files) {
      ds.images.push_back(read_image(f));
      ds.labels.push_back(static_cast<int>(c));
      ds.paths.push_back(f.string());
    }
  }
  require(!ds.images.empty(), ErrorCode::EmptyDataset,
          "no images found under " + root.string());
  return ds;
}

namespace {

// Distinct hues so classes differ in colour direction, not just intensity.
constexpr std::array<std::array<float, 3>, 16> kPalette{{
    {0.95f, 0.15f, 0.15f}, {0.15f, 0.90f, 0.20f}, {0.20f, 0.35f, 0.95f},
    {0.95f, 0.90f, 0.15f}, {0.90f, 0.20f, 0.90f}, {0.15f, 0.90f, 0.90f},
    {0.95f, 0.55f, 0.10f}, {0.55f, 0.20f, 0.95f}, {0.95f, 0.95f, 0.95f},
    {0.55f, 0.95f, 0.25f}, {0.95f, 0.50f, 0.65f}, {0.25f, 0.60f, 0.55f},
    {0.70f, 0.55f, 0.30f}, {0.40f, 0.75f, 0.95f}, {0.75f, 0.95f, 0.70f},
    {0.60f, 0.25f, 0.35f},
}};

bool inside_shape(int type, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (type) {
    case 0: return dx * dx + dy * dy <= r * r;                         // disc
    case 1: return ax <= 0.8 * r && ay <= 0.8 * r;                     // square
    case 2: return dy <= 0.8 * r && dy >= -r + 2 * ax;                 // triangle
    case 3: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);  // cross
    case 4: return ax <= r && ay <= 0.35 * r;                          // horizontal bar
    case 5: return ay <= r && ax <= 0.35 * r;                          // vertical bar
    case 6: {                                                          // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * r * r;
    }
    default: return ax + ay <= r;                                      // diamond
  }
}

}  // namespace

Dataset synthetic_shapes(std::size_t n, int classes, int side, std::uint64_t seed) {
  require(classes >= 1 && classes <= 16, ErrorCode::InvalidConfig,
          "synthetic classes must be in [1, 16]");
  require(side >= 4, ErrorCode::InvalidConfig, "synthetic side must be >= 4");
  Dataset ds;
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.images.resize(n);
  ds.labels.resize(n);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0, i));
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    const auto& col = kPalette[label];
    const double base = rng.uniform(0.0, 0.2);
    const double r = side * rng.uniform(0.2, 0.32);
    const double cx = rng.uniform(r, side - r), cy = rng.uniform(r, side - r);
    const double shade = rng.uniform(0.8, 1.0);
    Image img{side, side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side * 3)};
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const bool on = inside_shape(label % 8, x + 0.5 - cx, y + 0.5 - cy, r);
        for (int c = 0; c < 3; ++c) {
          double v = on ? shade * col[c] : base;
          v += rng.uniform(-0.06, 0.06);
          img.pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c] =
              static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
        }
      }
    ds.images[i] = std::move(img);
    ds.labels[i] = label;
  }
  return ds;
}

CropDraw draw_crop(Rng& rng, int src_h, int src_w, const AugmentConfig& cfg) {
  CropDraw d;
  d.area_fraction = rng.uniform(cfg.area_min, cfg.area_max);
  d.aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max);
  const double area = d.area_fraction * src_h * src_w;
  d.w = std::min<double>(src_w, std::sqrt(area * d.aspect));
  d.h = std::min<double>(src_h, std::sqrt(area / d.aspect));
  d.x0 = rng.uniform() * (src_w - d.w);
  d.y0 = rng.uniform() * (src_h - d.h);
  d.flip = rng.uniform() < cfg.flip_prob;
  return d;
}

namespace {

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1) return ((a + 2) * t - (a + 3)) * t * t + 1;
  if (t < 2) return ((a * t - 5 * a) * t + 8 * a) * t - 4 * a;
  return 0;
}

}  // namespace

Tensor<float> resample_bicubic(const Image& src, double x0, double y0, double w, double h,
                               int out_side) {
  Tensor<float> out(Shape{static_cast<std::size_t>(out_side),
                          static_cast<std::size_t>(out_side), 3});
  const double sx = w / out_side, sy = h / out_side;
  for (int i = 0; i < out_side; ++i) {
    const double fy = y0 + (i + 0.5) * sy - 0.5;
    const int iy = static_cast<int>(std::floor(fy));
    double wy[4];
    for (int k = 0; k < 4; ++k) wy[k] = cubic_weight(fy - (iy - 1 + k));
    for (int j = 0; j < out_side; ++j) {
      const double fx = x0 + (j + 0.5) * sx - 0.5;
      const int ix = static_cast<int>(std::floor(fx));
      double wx[4];
      for (int k = 0; k < 4; ++k) wx[k] = cubic_weight(fx - (ix - 1 + k));
      double acc[3] = {0, 0, 0};
      for (int ky = 0; ky < 4; ++ky) {
        const int yy = std::clamp(iy - 1 + ky, 0, src.height - 1);
        for (int kx = 0; kx < 4; ++kx) {
          const int xx = std::clamp(ix - 1 + kx, 0, src.width - 1);
          const double wgt = wy[ky] * wx[kx];
          for (int c = 0; c < 3; ++c) acc[c] += wgt * src.at(yy, xx, c);
        }
      }
      float* px = out.data() + (static_cast<std::size_t>(i) * out_side + j) * 3;
      for (int c = 0; c < 3; ++c)
        px[c] = static_cast<float>(std::clamp(acc[c] / 255.0, 0.0, 1.0));
    }
  }
  return out;
}

void hflip(Tensor<float>& img) {
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W / 2; ++x)
      for (std::size_t c = 0; c < C; ++c)
        std::swap(img[(y * W + x) * C + c], img[(y * W + W - 1 - x) * C + c]);
}

void color_jitter(Tensor<float>& img, Rng& rng, double s) {
  const float b = static_cast<float>(rng.uniform(1 - s, 1 + s));
  const float k = static_cast<float>(rng.uniform(1 - s, 1 + s));
  const float sat = static_cast<float>(rng.uniform(1 - s, 1 + s));
  const std::size_t n = img.size() / 3;
  auto clamp01 = [](float v) { return std::clamp(v, 0.0f, 1.0f); };
  auto gray = [&](std::size_t i) {
    return 0.299f * img[i * 3] + 0.587f * img[i * 3 + 1] + 0.114f * img[i * 3 + 2];
  };
  for (auto& v : img.vec()) v = clamp01(v * b);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += gray(i);
  const float m = static_cast<float>(mean / static_cast<double>(n));
  for (auto& v : img.vec()) v = clamp01(m + k * (v - m));
  for (std::size_t i = 0; i < n; ++i) {
    const float g = gray(i);
    for (int c = 0; c < 3; ++c) img[i * 3 + c] = clamp01(g + sat * (img[i * 3 + c] - g));
  }
}

Tensor<float> augment(const Image& src, int out_side, std::uint64_t seed,
                      const AugmentConfig& cfg, CropDraw* draw) {
  Rng rng(seed);
  const CropDraw d = draw_crop(rng, src.height, src.width, cfg);
  Tensor<float> out = resample_bicubic(src, d.x0, d.y0, d.w, d.h, out_side);
  if (d.flip) hflip(out);
  if (cfg.color_jitter) color_jitter(out, rng, cfg.jitter_strength);
  if (draw) *draw = d;
  return out;
}

Tensor<float> center_crop(const Image& src, int out_side, double fraction) {
  const double side = fraction * std::min(src.height, src.width);
  return resample_bicubic(src, (src.width - side) / 2, (src.height - side) / 2, side, side,
                          out_side);
}

void normalize(Tensor<float>& img, const Normalization& norm) {
  const std::size_t n = img.size() / 3;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      img[i * 3 + c] = (img[i * 3 + c] - norm.mean[c]) / norm.std[c];
}

}  // namespace bootleg
