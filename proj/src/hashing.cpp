#include "prompthash/hashing.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace prompthash {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> pack_codes(const CodeMatrix& codes) {
  if (codes.k == 0 || codes.k % 8 != 0) {
    throw ConfigError("pack_codes: code length must be a positive multiple of 8");
  }
  const std::size_t rows = codes.count();
  const std::size_t stride = codes.k / 8;
  std::vector<std::uint8_t> out(rows * stride, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int8_t* src = codes.rows.data() + r * codes.k;
    std::uint8_t* dst = out.data() + r * stride;
    for (std::size_t i = 0; i < codes.k; ++i) {
      if (src[i] > 0) dst[i / 8] |= std::uint8_t(0x80u >> (i % 8));
    }
  }
  return out;
}

CodeMatrix unpack_codes(const std::vector<std::uint8_t>& bytes, std::size_t k, std::size_t count) {
  if (k == 0 || k % 8 != 0) {
    throw ConfigError("unpack_codes: code length must be a positive multiple of 8");
  }
  const std::size_t stride = k / 8;
  if (bytes.size() != stride * count) throw ShapeError("unpack_codes: byte count mismatch");
  CodeMatrix c;
  c.k = k;
  c.rows.resize(k * count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* src = bytes.data() + r * stride;
    std::int8_t* dst = c.rows.data() + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      dst[i] = (src[i / 8] & (0x80u >> (i % 8))) ? std::int8_t(1) : std::int8_t(-1);
    }
  }
  return c;
}

void save_codes(const std::string& path, const CodeMatrix& codes) {
  const std::vector<std::uint8_t> packed = pack_codes(codes);
  std::string header = "PHSH";
  header.push_back(char(1));
  put_u16(header, std::uint16_t(codes.k));
  put_u64(header, codes.count());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_codes: cannot open " + path);
  f.write(header.data(), std::streamsize(header.size()));
  f.write(reinterpret_cast<const char*>(packed.data()), std::streamsize(packed.size()));
  if (!f) throw std::runtime_error("save_codes: write failed for " + path);
}

CodeMatrix load_codes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_codes: cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 15 || data.compare(0, 4, "PHSH") != 0) {
    throw std::runtime_error("load_codes: bad magic in " + path);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  if (p[4] != 1) throw std::runtime_error("load_codes: unsupported version");
  const std::size_t k = get_u16(p + 5);
  const std::size_t count = get_u64(p + 7);
  if (k == 0 || k % 8 != 0) throw std::runtime_error("load_codes: bad code length");
  const std::size_t need = 15 + (k / 8) * count;
  if (data.size() != need) throw std::runtime_error("load_codes: truncated file " + path);
  std::vector<std::uint8_t> bytes(p + 15, p + need);
  return unpack_codes(bytes, k, count);
}

std::size_t hamming_packed(const std::uint8_t* a, const std::uint8_t* b, std::size_t nbytes) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < nbytes; ++i) {
    d += std::size_t(std::popcount(std::uint8_t(a[i] ^ b[i])));
  }
  return d;
}

}  // namespace prompthash
