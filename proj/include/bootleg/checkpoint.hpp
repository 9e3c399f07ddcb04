#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bootleg/error.hpp"
#include "bootleg/tensor.hpp"

namespace bootleg {

// On-disk layout of a checkpoint directory:
//   manifest.json  {"format": "bootleg-checkpoint", "version": 1,
//                   "arrays": [{"name", "shape", "offset", "count"}...], ...}
//   params.bin     float32 little-endian arrays back to back; offset and
//                  count are in elements.

struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, Tensor<float>> arrays;

  const Tensor<float>& get(const std::string& name) const;
};

using NamedArrays = std::vector<std::pair<std::string, const Tensor<float>*>>;

/// Writes atomically enough for single-process use: files go to a temporary
/// sibling directory that is renamed over `dir`.
void save_checkpoint(const std::filesystem::path& dir, const NamedArrays& arrays,
                     nlohmann::json manifest);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

template <class P>
void collect_arrays(const P& params, const std::string& prefix, NamedArrays& out) {
  params.for_each(
      [&](const std::string& n, const Tensor<float>& t) { out.emplace_back(prefix + n, &t); });
}

template <class P>
void restore_arrays(P& params, const std::string& prefix, const Checkpoint& ck) {
  params.for_each([&](const std::string& n, Tensor<float>& t) {
    const Tensor<float>& src = ck.get(prefix + n);
    require(src.same_shape(t), ErrorCode::ShapeMismatch,
            "checkpoint array " + prefix + n + " has shape " + shape_string(src.shape()) +
                ", model expects " + shape_string(t.shape()));
    t = src;
  });
}

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& data);

}  // namespace bootleg
