#include "bootleg/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "bootleg/error.hpp"
#include "bootleg/kernels.hpp"

namespace bootleg {

static_assert(std::endian::native == std::endian::little,
              "dump files are written as raw little-endian arrays");

namespace {

constexpr char kMagic[8] = {'B', 'T', 'L', 'G', 'D', 'U', 'M', 'P'};
constexpr std::uint32_t kDumpVersion = 1;

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  require(static_cast<bool>(is), ErrorCode::Io, "truncated dump file " + path);
  return v;
}

// Per-position mean and 1/||x - mean|| (0 for zero variance) of one layer.
struct Moments {
  std::vector<double> mean, inv_norm;
  std::uint64_t zero = 0;
};

Moments moments(const EmbeddingDump& d, std::size_t layer) {
  const std::size_t P = d.positions(), D = d.dim;
  Moments m;
  m.mean.resize(P);
  m.inv_norm.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    const float* x = d.vec(layer, p);
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += x[j];
    const double mu = s / static_cast<double>(D);
    double ss = 0;
    for (std::size_t j = 0; j < D; ++j) ss += (x[j] - mu) * (x[j] - mu);
    m.mean[p] = mu;
    if (ss > 0) {
      m.inv_norm[p] = 1.0 / std::sqrt(ss);
    } else {
      m.inv_norm[p] = 0;
      ++m.zero;
    }
  }
  return m;
}

double correlation(const float* x, double mx, double ix, const float* y, double my,
                   double iy, std::size_t D) {
  if (ix == 0 || iy == 0) return 0;
  double s = 0;
  for (std::size_t j = 0; j < D; ++j) s += (x[j] - mx) * (y[j] - my);
  return s * ix * iy;
}

std::vector<double> centered(const EmbeddingDump& d, std::size_t layer) {
  const std::size_t n = d.positions(), D = d.dim;
  std::vector<double> X(n * D);
  std::vector<double> mean(D, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) mean[j] += d.vec(layer, i)[j];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) X[i * D + j] = d.vec(layer, i)[j] - mean[j];
  return X;
}

double frob_cross(const double* X, std::size_t dx, const double* Y, std::size_t dy,
                  std::size_t n) {
  std::vector<double> C(dx * dy);
  kernels::gemm_tn<double>(dx, dy, n, X, Y, C.data());
  double s = 0;
  for (double c : C) s += c * c;
  return s;
}

}  // namespace

void EmbeddingDump::validate() const {
  require(layers.size() == labels.size(), ErrorCode::ShapeMismatch,
          "dump labels and layers differ in count");
  require(tokens == static_cast<std::size_t>(grid_h) * grid_w, ErrorCode::ShapeMismatch,
          "dump token count does not match its grid");
  for (std::size_t l = 0; l < layers.size(); ++l)
    require(layers[l].size() == images * tokens * dim, ErrorCode::ShapeMismatch,
            "dump layer '" + labels[l] + "' has the wrong size");
}

std::size_t EmbeddingDump::layer_index(const std::string& label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  require(it != labels.end(), ErrorCode::MissingLayer, "no layer '" + label + "' in dump");
  return static_cast<std::size_t>(it - labels.begin());
}

void write_dump(const std::string& path, const EmbeddingDump& dump) {
  dump.validate();
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kDumpVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dump.layers.size()));
  put<std::uint64_t>(os, dump.images);
  put<std::uint64_t>(os, dump.tokens);
  put<std::uint64_t>(os, dump.dim);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dump.grid_h));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dump.grid_w));
  put<std::uint64_t>(os, dump.source_hash);
  for (std::size_t l = 0; l < dump.layers.size(); ++l) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(dump.labels[l].size()));
    os.write(dump.labels[l].data(), static_cast<std::streamsize>(dump.labels[l].size()));
    os.write(reinterpret_cast<const char*>(dump.layers[l].data()),
             static_cast<std::streamsize>(dump.layers[l].size() * sizeof(float)));
  }
  require(static_cast<bool>(os), ErrorCode::Io, "failed writing " + path);
}

EmbeddingDump read_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  require(is && std::memcmp(magic, kMagic, sizeof magic) == 0, ErrorCode::Io,
          path + " is not an embedding dump");
  const auto version = get<std::uint32_t>(is, path);
  require(version == kDumpVersion, ErrorCode::Io,
          "unsupported dump version " + std::to_string(version));
  EmbeddingDump d;
  const auto L = get<std::uint32_t>(is, path);
  d.images = get<std::uint64_t>(is, path);
  d.tokens = get<std::uint64_t>(is, path);
  d.dim = get<std::uint64_t>(is, path);
  d.grid_h = static_cast<int>(get<std::uint32_t>(is, path));
  d.grid_w = static_cast<int>(get<std::uint32_t>(is, path));
  d.source_hash = get<std::uint64_t>(is, path);
  for (std::uint32_t l = 0; l < L; ++l) {
    const auto len = get<std::uint32_t>(is, path);
    std::string label(len, '\0');
    is.read(label.data(), len);
    std::vector<float> data(d.images * d.tokens * d.dim);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    require(static_cast<bool>(is), ErrorCode::Io, "truncated dump file " + path);
    d.labels.push_back(std::move(label));
    d.layers.push_back(std::move(data));
  }
  d.validate();
  return d;
}

EmbeddingDump dump_embeddings(const EncoderParams<float>& enc, const ViTConfig& cfg,
                              const Tensor<float>& images, std::uint64_t source_hash) {
  const std::size_t B = images.dim(0), N = cfg.patches(), D = cfg.width;
  const std::size_t G = cfg.globals(), L = G + N;
  EmbeddingDump d;
  d.images = B;
  d.tokens = N;
  d.dim = D;
  d.grid_h = d.grid_w = cfg.grid();
  d.source_hash = source_hash;
  std::vector<LayerTap> taps{{TapKind::TokenizerOut, 0}};
  d.labels.push_back("tokenizer");
  for (int l = 1; l <= cfg.depth; ++l) {
    taps.push_back(LayerTap::block(l));
    d.labels.push_back("block" + std::to_string(l));
  }
  d.labels.push_back("final");
  d.layers.assign(d.labels.size(), std::vector<float>(B * N * D));

  constexpr std::size_t kChunk = 64;
  const std::size_t per_image = images.size() / std::max<std::size_t>(B, 1);
  for (std::size_t start = 0; start < B; start += kChunk) {
    const std::size_t n = std::min(kChunk, B - start);
    Shape shape = images.shape();
    shape[0] = n;
    Tensor<float> chunk(shape);
    std::copy(images.data() + start * per_image, images.data() + (start + n) * per_image,
              chunk.data());
    const auto out = encode(enc, cfg, patchify_batch(chunk, cfg), n, {}, taps);
    auto strip = [&](const Tensor<float>& rows, std::vector<float>& dst) {
      for (std::size_t i = 0; i < n; ++i)
        std::copy(rows.row(i * L + G), rows.row(i * L + L), dst.data() + (start + i) * N * D);
    };
    for (std::size_t t = 0; t < taps.size(); ++t) strip(out.taps.at(taps[t]), d.layers[t]);
    strip(out.normed, d.layers.back());
  }
  return d;
}

PearsonResult pearson_matrix(const EmbeddingDump& dump) {
  dump.validate();
  const std::size_t L = dump.layers.size(), P = dump.positions(), D = dump.dim;
  require(P >= 2, ErrorCode::ShapeMismatch, "Pearson matrix needs at least two positions");
  std::vector<Moments> m(L);
  PearsonResult res;
  for (std::size_t l = 0; l < L; ++l) {
    m[l] = moments(dump, l);
    res.zero_variance += m[l].zero;
  }
  res.matrix.n = L;
  res.matrix.values.assign(L * L, 0.0);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < L; ++a)
    for (std::size_t b = a + 1; b < L; ++b) pairs.emplace_back(a, b);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [a, b] = pairs[k];
    double s = 0;
    for (std::size_t p = 0; p < P; ++p)
      s += correlation(dump.vec(a, p), m[a].mean[p], m[a].inv_norm[p], dump.vec(b, p),
                       m[b].mean[p], m[b].inv_norm[p], D);
    const double r = s / static_cast<double>(P);
    res.matrix.values[a * L + b] = r;
    res.matrix.values[b * L + a] = r;
  }
  for (std::size_t a = 0; a < L; ++a) res.matrix.values[a * L + a] = 1.0;
  return res;
}

double linear_cka(const double* X, std::size_t dx, const double* Y, std::size_t dy,
                  std::size_t n) {
  require(n >= 2, ErrorCode::ShapeMismatch, "CKA needs at least two samples");
  auto center = [n](const double* A, std::size_t d) {
    std::vector<double> C(A, A + n * d), mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += C[i * d + j];
    for (auto& v : mean) v /= static_cast<double>(n);
    bool nonzero = false;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) nonzero |= (C[i * d + j] -= mean[j]) != 0;
    require(nonzero, ErrorCode::DegenerateLayer, "layer is constant after centering");
    return C;
  };
  const auto Xc = center(X, dx), Yc = center(Y, dy);
  const double xy = frob_cross(Xc.data(), dx, Yc.data(), dy, n);
  const double xx = frob_cross(Xc.data(), dx, Xc.data(), dx, n);
  const double yy = frob_cross(Yc.data(), dy, Yc.data(), dy, n);
  return std::clamp(xy / (std::sqrt(xx) * std::sqrt(yy)), 0.0, 1.0);
}

SquareMatrix cka_matrix(const EmbeddingDump& dump) {
  dump.validate();
  const std::size_t L = dump.layers.size(), n = dump.positions(), D = dump.dim;
  require(n >= 2, ErrorCode::ShapeMismatch, "CKA needs at least two samples");
  std::vector<double> self(L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto X = centered(dump, l);
    require(std::any_of(X.begin(), X.end(), [](double v) { return v != 0; }),
            ErrorCode::DegenerateLayer,
            "layer '" + dump.labels[l] + "' is constant after centering");
    self[l] = std::sqrt(frob_cross(X.data(), D, X.data(), D, n));
  }
  SquareMatrix M{L, std::vector<double>(L * L, 0.0)};
  for (std::size_t a = 0; a < L; ++a) {
    const auto X = centered(dump, a);
    M.values[a * L + a] = 1.0;
    for (std::size_t b = a + 1; b < L; ++b) {
      const auto Y = centered(dump, b);
      const double v =
          std::clamp(frob_cross(X.data(), D, Y.data(), D, n) / (self[a] * self[b]), 0.0, 1.0);
      M.values[a * L + b] = M.values[b * L + a] = v;
    }
  }
  return M;
}

std::vector<std::pair<std::string, std::vector<double>>> target_layer_profiles(
    const EmbeddingDump& dump, const std::vector<std::string>& taps) {
  std::vector<std::size_t> idx;
  for (const auto& t : taps) idx.push_back(dump.layer_index(t));
  const auto P = pearson_matrix(dump).matrix;
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    std::vector<double> row(P.n);
    for (std::size_t l = 0; l < P.n; ++l) row[l] = P(idx[i], l);
    out.emplace_back(taps[i], std::move(row));
  }
  return out;
}

AutocorrResult spatial_autocorr(const EmbeddingDump& dump, std::size_t layer) {
  dump.validate();
  require(layer < dump.layers.size(), ErrorCode::MissingLayer, "layer index out of range");
  const int H = dump.grid_h, W = dump.grid_w;
  const int OW = 2 * W - 1, OH = 2 * H - 1;
  const std::size_t D = dump.dim, N = dump.tokens;
  const Moments m = moments(dump, layer);

  std::vector<double> sum(static_cast<std::size_t>(OH) * OW, 0.0);
  std::vector<std::uint64_t> count(sum.size(), 0);
#pragma omp parallel
  {
    std::vector<double> local(sum.size(), 0.0);
#pragma omp for schedule(static)
    for (std::size_t img = 0; img < dump.images; ++img)
      for (int r0 = 0; r0 < H; ++r0)
        for (int c0 = 0; c0 < W; ++c0) {
          const std::size_t p0 = img * N + static_cast<std::size_t>(r0) * W + c0;
          for (int r1 = 0; r1 < H; ++r1)
            for (int c1 = 0; c1 < W; ++c1) {
              const std::size_t p1 = img * N + static_cast<std::size_t>(r1) * W + c1;
              local[static_cast<std::size_t>(r1 - r0 + H - 1) * OW + (c1 - c0 + W - 1)] +=
                  correlation(dump.vec(layer, p0), m.mean[p0], m.inv_norm[p0],
                              dump.vec(layer, p1), m.mean[p1], m.inv_norm[p1], D);
            }
        }
#pragma omp critical
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += local[i];
  }
  for (int dr = -(H - 1); dr < H; ++dr)
    for (int dc = -(W - 1); dc < W; ++dc)
      count[static_cast<std::size_t>(dr + H - 1) * OW + (dc + W - 1)] =
          static_cast<std::uint64_t>(H - std::abs(dr)) * (W - std::abs(dc)) * dump.images;

  AutocorrResult res;
  res.grid_h = H;
  res.grid_w = W;
  res.by_offset.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i)
    res.by_offset[i] = count[i] ? sum[i] / static_cast<double>(count[i]) : 0.0;
  res.by_offset[static_cast<std::size_t>(H - 1) * OW + (W - 1)] = 1.0;

  std::map<int, std::pair<double, int>> rings;  // squared distance -> (sum, offsets)
  for (int dr = -(H - 1); dr < H; ++dr)
    for (int dc = -(W - 1); dc < W; ++dc) {
      auto& ring = rings[dr * dr + dc * dc];
      ring.first += res.at(dr, dc);
      ring.second += 1;
    }
  for (const auto& [d2, ring] : rings)
    res.radial.emplace_back(std::sqrt(static_cast<double>(d2)), ring.first / ring.second);
  return res;
}

}  // namespace bootleg
