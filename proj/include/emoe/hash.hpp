#pragma once
// SHA-256 digests of parameter groups and configuration text.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "emoe/error.hpp"
#include "emoe/nn.hpp"

namespace emoe {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  Sha256& update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256 update failed");
    return *this;
  }
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }
  std::array<std::uint8_t, 32> digest() {
    std::array<std::uint8_t, 32> out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1 || len != 32) throw Error("sha256 final failed");
    return out;
  }
  std::string hex() { return to_hex(digest()); }

  static std::string to_hex(const std::array<std::uint8_t, 32>& d) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s(64, '0');
    for (std::size_t i = 0; i < 32; ++i) {
      s[2 * i] = kDigits[d[i] >> 4];
      s[2 * i + 1] = kDigits[d[i] & 15];
    }
    return s;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view s) { return Sha256().update(s).hex(); }

/// Hash over names and raw value bytes of one parameter group.
inline std::string group_hash(const ParamStore& ps, ParamGroup g) {
  Sha256 h;
  for (const auto& p : ps.params()) {
    if (p.group != g) continue;
    h.update(p.name).update("\0", 1);
    h.update(p.value.data(), p.value.size() * sizeof(double));
  }
  return h.hex();
}

}  // namespace emoe
