#include "docdet/hash.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace docdet {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::string& path, std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("fnv1a_file: cannot open " + path);
  std::uint64_t h = seed;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

std::uint64_t corpus_checksum(const std::string& dir) {
  namespace fs = std::filesystem;
  std::uint64_t h = fnv1a_file((fs::path(dir) / "annotations.json").string());

  std::vector<std::string> names;
  const fs::path images = fs::path(dir) / "images";
  if (fs::exists(images))
    for (const auto& entry : fs::directory_iterator(images))
      if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a_file((images / name).string(), h);
  }
  return h;
}

}  // namespace docdet
