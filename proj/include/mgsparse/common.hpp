#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgsparse {

// Every failure mode gets its own code so callers (and the CLI exit-status
// mapping) can tell them apart.
enum class errc {
  bad_argument,
  dim_mismatch,
  io_failure,
  bad_magic,
  bad_version,
  truncated_file,
  dim_overflow,
  nan_loss,
  accounting_mismatch,
  bad_config,
};

class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

inline void require(bool cond, errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

// ---- little-endian binary i/o ----
// All on-disk formats are byte-explicit so files are identical across
// platforms regardless of host endianness.

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) fail(errc::truncated_file, "truncated file while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is, const std::string& what) {
  std::uint32_t bits = read_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_f32_array(std::ostream& os, const std::vector<float>& v) {
  for (float x : v) write_f32(os, x);
}

inline void read_f32_array(std::istream& is, std::vector<float>& v, const std::string& what) {
  for (float& x : v) x = read_f32(is, what);
}

inline void write_magic(std::ostream& os, const char magic[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[5], const std::string& what) {
  char got[4];
  is.read(got, 4);
  if (is.gcount() != 4) fail(errc::truncated_file, "truncated file while reading magic of " + what);
  if (std::string(got, 4) != std::string(magic, 4))
    fail(errc::bad_magic, "bad magic in " + what + ": expected " + std::string(magic, 4) +
                              ", got " + std::string(got, 4));
}

inline void expect_version(std::istream& is, std::uint32_t expected, const std::string& what) {
  std::uint32_t v = read_u32(is, what + " version");
  if (v != expected)
    fail(errc::bad_version, "unsupported " + what + " version " + std::to_string(v) +
                                " (expected " + std::to_string(expected) + ")");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(errc::io_failure, "cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(errc::io_failure, "cannot open for reading: " + path);
  return is;
}

// Shortest round-trip decimal rendering. Used for every float that lands in
// a CSV so reruns produce byte-identical reports.
inline std::string fmt_f64(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_f32(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace mgsparse
