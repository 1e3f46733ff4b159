#include "p3t/io.hpp"

#include <fstream>
#include <sstream>

namespace p3t::io {

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    h_ ^= static_cast<std::uint64_t>(b);
    h_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view s) { update(std::as_bytes(std::span<const char>(s.data(), s.size()))); }

void Fnv1a::update_u64(std::uint64_t v) {
  std::byte b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
  update(b);
}

void Writer::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void Writer::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void Reader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw FormatError("unexpected end of data");
}

std::string Reader::bytes(std::size_t n) {
  need(n);
  std::string out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return v;
}

std::string Reader::str() { return bytes(u32()); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_records(Writer& w, std::span<const Record> records) {
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : r.values) w.f64(v);
  }
}

std::vector<Record> read_records(Reader& r) {
  const std::uint32_t count = r.u32();
  std::vector<Record> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = r.str();
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.u32());
    rec.values.resize(ad::shape_size(rec.shape));
    for (auto& v : rec.values) v = r.f64();
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace p3t::io
