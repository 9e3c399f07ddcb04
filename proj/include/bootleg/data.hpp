#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bootleg/rng.hpp"
#include "bootleg/tensor.hpp"

namespace bootleg {

/// 8-bit RGB image, channel-last, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> paths;  // empty for generated sets

  std::size_t size() const { return images.size(); }
  int classes() const { return static_cast<int>(class_names.size()); }
};

/// PNG (8/16-bit, any colour type), binary PPM (P6) or PGM (P5). Grey and
/// alpha inputs are converted to RGB.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

/// root/<class>/<file>; classes and files in lexicographic order.
Dataset load_image_folder(const std::filesystem::path& root);

/// Procedural shapes on a dark noisy background. Class c draws shape type
/// c % 8 in its own colour; position, size and noise vary per sample.
/// Labels are assigned round-robin (index mod classes).
Dataset synthetic_shapes(std::size_t n, int classes, int side, std::uint64_t seed);

struct AugmentConfig {
  double area_min = 0.35;
  double area_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  bool color_jitter = false;
  double jitter_strength = 0.4;
};

/// Crop box in source pixel units (continuous) plus the flip decision.
struct CropDraw {
  double area_fraction = 1;
  double aspect = 1;
  double x0 = 0, y0 = 0, w = 0, h = 0;
  bool flip = false;
};

CropDraw draw_crop(Rng& rng, int src_h, int src_w, const AugmentConfig& cfg);

/// Catmull-Rom (a = -0.5) resample of the box [x0, x0+w) x [y0, y0+h) to
/// out_side^2, coordinates clamped at the image edge. Output in [0, 1].
Tensor<float> resample_bicubic(const Image& src, double x0, double y0, double w, double h,
                               int out_side);

void hflip(Tensor<float>& img);

/// Brightness, contrast and saturation factors each ~ U[1-s, 1+s], applied
/// in that order; values clamped to [0, 1].
void color_jitter(Tensor<float>& img, Rng& rng, double strength);

/// Random resized crop + flip (+ optional jitter), fully determined by seed.
Tensor<float> augment(const Image& src, int out_side, std::uint64_t seed,
                      const AugmentConfig& cfg, CropDraw* draw = nullptr);

/// Centred square crop of `fraction` of the shorter side, resized.
Tensor<float> center_crop(const Image& src, int out_side, double fraction = 0.875);

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

void normalize(Tensor<float>& img, const Normalization& norm);

}  // namespace bootleg
