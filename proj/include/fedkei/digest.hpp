#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <openssl/evp.h>
#include <zlib.h>

#include "fedkei/errors.hpp"

namespace fedkei {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = ::crc32(c, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::uint32_t crc32_of(std::string_view s) {
  return crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string hex32(std::uint32_t v) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(8, '0');
  for (int i = 7; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kHex[v & 0xf];
  return out;
}

/// Git-style blob id: SHA-1 over "blob <len>\0" followed by the content.
inline std::string git_blob_hash(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw Error("git_blob_hash: EVP context allocation failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("git_blob_hash: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

}  // namespace fedkei
