#pragma once

// Little-endian binary encoding, atomic file writes and content hashing.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "p3t/diffcore.hpp"

namespace p3t::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view s);
  void update_u64(std::uint64_t v);
  void update_f64(double v) { update_u64(std::bit_cast<std::uint64_t>(v)); }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s);
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::string bytes(std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str();
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const;
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Named tensor records: (name, shape, raw little-endian doubles).
struct Record {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

void write_records(Writer& w, std::span<const Record> records);
std::vector<Record> read_records(Reader& r);

}  // namespace p3t::io
