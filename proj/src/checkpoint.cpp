#include "bootleg/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

namespace bootleg {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

const Tensor<float>& Checkpoint::get(const std::string& name) const {
  auto it = arrays.find(name);
  require(it != arrays.end(), ErrorCode::Io, "checkpoint has no array '" + name + "'");
  return it->second;
}

void save_checkpoint(const fs::path& dir, const NamedArrays& arrays, nlohmann::json manifest) {
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  require(!ec, ErrorCode::Io, "cannot create " + tmp.string() + ": " + ec.message());

  manifest["format"] = "bootleg-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float32-le";
  nlohmann::json list = nlohmann::json::array();
  {
    std::ofstream bin(tmp / "params.bin", std::ios::binary);
    require(static_cast<bool>(bin), ErrorCode::Io, "cannot write params.bin");
    std::size_t offset = 0;
    for (const auto& [name, t] : arrays) {
      list.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset},
                      {"count", t->size()}});
      bin.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size() * sizeof(float)));
      offset += t->size();
    }
    require(static_cast<bool>(bin), ErrorCode::Io, "short write to params.bin");
  }
  manifest["arrays"] = std::move(list);
  {
    std::ofstream js(tmp / "manifest.json");
    js << manifest.dump(2) << "\n";
    require(static_cast<bool>(js), ErrorCode::Io, "cannot write manifest.json");
  }
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  require(!ec, ErrorCode::Io, "cannot move checkpoint into " + dir.string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ck;
  std::ifstream js(dir / "manifest.json");
  require(static_cast<bool>(js), ErrorCode::Io,
          "cannot open " + (dir / "manifest.json").string());
  try {
    js >> ck.manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, "bad manifest in " + dir.string() + ": " + e.what());
  }
  require(ck.manifest.value("format", "") == "bootleg-checkpoint", ErrorCode::Io,
          dir.string() + " is not a checkpoint");
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  require(static_cast<bool>(bin), ErrorCode::Io, "cannot open params.bin in " + dir.string());
  for (const auto& a : ck.manifest.at("arrays")) {
    Tensor<float> t(a.at("shape").get<Shape>());
    const auto offset = a.at("offset").get<std::size_t>();
    require(a.at("count").get<std::size_t>() == t.size(), ErrorCode::Io,
            "array count/shape disagree in manifest");
    bin.seekg(static_cast<std::streamoff>(offset * sizeof(float)));
    bin.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
    require(bin.gcount() == static_cast<std::streamsize>(t.size() * sizeof(float)),
            ErrorCode::Io, "params.bin is truncated");
    ck.arrays.emplace(a.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace bootleg
