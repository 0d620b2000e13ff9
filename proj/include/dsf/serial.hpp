#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"

namespace dsf {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(detail::str(path, ": cannot open for reading"));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error(detail::str(path, ": read failed"));
  return bytes;
}

inline void write_file_bytes(const std::string& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(detail::str(path, ": cannot open for writing"));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(detail::str(path, ": write failed"));
}

inline std::string read_file_text(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_file_text(const std::string& path, const std::string& text) {
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file_bytes(path, bytes);
}

// Strict little-endian reader over a whole file. Every accessor checks the
// remaining length and reports the byte offset on failure, so a truncated or
// mutated header is rejected rather than misread.
class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> bytes, std::string name)
      : buf_(std::move(bytes)), name_(std::move(name)) {}

  static ByteReader from_file(const std::string& path) {
    return ByteReader(read_file_bytes(path), path);
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(detail::str(name_, ": ", msg, " (at byte ", pos_, ")"));
  }

  std::size_t remaining() const { return buf_.size() - pos_; }

  void expect_magic(const char (&magic)[5]) {
    if (remaining() < 4) fail(detail::str("truncated before magic '", magic, "'"));
    if (std::memcmp(buf_.data() + pos_, magic, 4) != 0)
      fail(detail::str("bad magic, expected '", magic, "'"));
    pos_ += 4;
  }

  std::uint8_t u8() {
    need(1, "u8");
    return buf_[pos_++];
  }

  std::uint16_t u16() {
    need(2, "u16");
    std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_]) |
                      static_cast<std::uint16_t>(buf_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | buf_[pos_ + i];
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | buf_[pos_ + i];
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n, "raw bytes");
    std::vector<std::uint8_t> out(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

  std::string string(std::size_t n) {
    need(n, "string");
    std::string out(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return out;
  }

  // Remaining bytes interpreted as text (used for trailing config blocks).
  std::string rest_as_text() {
    std::string out(reinterpret_cast<const char*>(buf_.data() + pos_), remaining());
    pos_ = buf_.size();
    return out;
  }

  void require_exhausted() {
    if (pos_ != buf_.size())
      fail(detail::str(buf_.size() - pos_, " trailing bytes after payload"));
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      fail(detail::str("truncated, need ", n, " bytes for ", what, ", have ",
                       remaining()));
  }

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string name_;
};

class ByteWriter {
 public:
  void magic(const char (&m)[5]) { raw(m, 4); }
  void u8(std::uint8_t v) { buf_.push_back(v); }

  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
  }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void raw(const void* p, std::size_t n) {
    const std::uint8_t* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  void text(const std::string& s) { raw(s.data(), s.size()); }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  void save(const std::string& path) const { write_file_bytes(path, buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

namespace detail {

// Strict unsigned decimal: nonempty, digits only, no leading zeros (except
// "0" itself), bounded.
inline bool parse_uint(const std::string& s, std::uint64_t max, std::uint64_t& out) {
  if (s.empty() || s.size() > 20) return false;
  if (s.size() > 1 && s[0] == '0') return false;
  std::uint64_t v = 0;
  for (char ch : s) {
    if (ch < '0' || ch > '9') return false;
    v = v * 10 + static_cast<std::uint64_t>(ch - '0');
    if (v > max) return false;
  }
  out = v;
  return true;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  if (s == "inf") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last;
}

// Splits on '\n'; a single trailing newline does not produce an empty line.
inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) {
      if (start < text.size()) lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

inline std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    std::size_t end = line.find(sep, start);
    if (end == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, end - start));
    start = end + 1;
  }
  return fields;
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// key=value per line, '#' starts a comment line, duplicates rejected.
inline std::map<std::string, std::string> parse_kv_block(const std::string& text,
                                                         const std::string& origin) {
  std::map<std::string, std::string> kv;
  const std::vector<std::string> lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::runtime_error(
          str(origin, ":", i + 1, ": expected key=value, got '", line, "'"));
    const std::string key = line.substr(0, eq);
    if (kv.count(key))
      throw std::runtime_error(str(origin, ":", i + 1, ": duplicate key '", key, "'"));
    kv[key] = line.substr(eq + 1);
  }
  return kv;
}

inline std::uint64_t kv_uint(const std::map<std::string, std::string>& kv,
                             const std::string& key, const std::string& origin,
                             std::uint64_t max) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw std::runtime_error(str(origin, ": missing key '", key, "'"));
  std::uint64_t v = 0;
  if (!parse_uint(it->second, max, v))
    throw std::runtime_error(
        str(origin, ": bad value '", it->second, "' for key '", key, "'"));
  return v;
}

}  // namespace detail
}  // namespace dsf
