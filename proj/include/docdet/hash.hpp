#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace docdet {

// FNV-1a over raw bytes, seedable for chaining
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::string& path, std::uint64_t seed = 0xcbf29ce484222325ULL);

// digest of annotations.json plus every file under images/, in sorted name
// order, so identical corpora hash identically regardless of creation order
std::uint64_t corpus_checksum(const std::string& dir);

}  // namespace docdet
