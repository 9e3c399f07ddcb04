#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bootleg/vit.hpp"

namespace bootleg {

/// Per-layer patch embeddings for a set of images. Every layer holds
/// images * tokens * dim floats, tokens in row-major grid order.
struct EmbeddingDump {
  std::size_t images = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::uint64_t source_hash = 0;
  std::vector<std::string> labels;
  std::vector<std::vector<float>> layers;

  void validate() const;
  std::size_t positions() const { return images * tokens; }
  const float* vec(std::size_t layer, std::size_t position) const {
    return layers[layer].data() + position * dim;
  }
  std::size_t layer_index(const std::string& label) const;  // MissingLayer
};

void write_dump(const std::string& path, const EmbeddingDump& dump);
EmbeddingDump read_dump(const std::string& path);

/// Layers: "tokenizer", "block1".."blockB", "final". Global tokens dropped.
EmbeddingDump dump_embeddings(const EncoderParams<float>& enc, const ViTConfig& cfg,
                              const Tensor<float>& images, std::uint64_t source_hash);

/// Row-major L x L.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> values;
  double operator()(std::size_t a, std::size_t b) const { return values[a * n + b]; }
};

struct PearsonResult {
  SquareMatrix matrix;
  /// (layer, position) vectors with zero variance; they contribute 0 to every
  /// off-diagonal mean they take part in.
  std::uint64_t zero_variance = 0;
};

PearsonResult pearson_matrix(const EmbeddingDump& dump);

/// Linear CKA of X [n, dx] and Y [n, dy] in the biased (Gram) form.
double linear_cka(const double* X, std::size_t dx, const double* Y, std::size_t dy,
                  std::size_t n);
SquareMatrix cka_matrix(const EmbeddingDump& dump);

/// One Pearson row per tap label, over all dump layers.
std::vector<std::pair<std::string, std::vector<double>>> target_layer_profiles(
    const EmbeddingDump& dump, const std::vector<std::string>& taps);

struct AutocorrResult {
  int grid_h = 0, grid_w = 0;
  /// [(2*grid_h-1) x (2*grid_w-1)]; offset (dr, dc) at (dr+grid_h-1, dc+grid_w-1).
  std::vector<double> by_offset;
  /// (distance, mean correlation over offsets at that distance), ascending.
  std::vector<std::pair<double, double>> radial;

  double at(int dr, int dc) const {
    return by_offset[static_cast<std::size_t>(dr + grid_h - 1) * (2 * grid_w - 1) +
                     static_cast<std::size_t>(dc + grid_w - 1)];
  }
};

AutocorrResult spatial_autocorr(const EmbeddingDump& dump, std::size_t layer);

}  // namespace bootleg
