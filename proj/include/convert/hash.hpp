#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace convert {

// 64-bit FNV-1a. Used for content fingerprints (vocabulary, checkpoint,
// answer index) and duplicate detection; not a cryptographic hash.
class Fnv1a {
 public:
  static constexpr std::uint64_t offset_basis = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t prime = 0x100000001b3ULL;

  Fnv1a& update(const void* bytes, std::size_t count) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < count; ++i) {
      state_ ^= p[i];
      state_ *= prime;
    }
    return *this;
  }
  Fnv1a& update(std::string_view text) { return update(text.data(), text.size()); }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = offset_basis;
};

inline std::uint64_t fnv1a(std::string_view text) { return Fnv1a{}.update(text).digest(); }

}  // namespace convert
