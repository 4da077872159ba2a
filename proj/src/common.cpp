#include "dfeat/common.hpp"

#include <bit>
#include <cassert>
#include <cstring>
#include <fstream>
#include <numbers>

namespace dfeat {

uint64_t Rng::uniform_int(uint64_t n) {
  assert(n > 0);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t u;
  do {
    u = engine_();
  } while (u >= limit);
  return u % n;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

void ByteWriter::u32(uint32_t v) {
  buf_.push_back(static_cast<char>(v & 0xff));
  buf_.push_back(static_cast<char>((v >> 8) & 0xff));
  buf_.push_back(static_cast<char>((v >> 16) & 0xff));
  buf_.push_back(static_cast<char>((v >> 24) & 0xff));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }

void ByteWriter::raw(const void* p, size_t n) {
  buf_.append(static_cast<const char*>(p), n);
}

void ByteReader::need(size_t n) {
  if (off_ + n > buf_.size()) {
    fail("unexpected end of data (need " + std::to_string(n) + " more bytes)");
  }
}

uint8_t ByteReader::u8() {
  need(1);
  return static_cast<uint8_t>(buf_[off_++]);
}

uint32_t ByteReader::u32() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[off_ + i])) << (8 * i);
  }
  off_ += 4;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

void ByteReader::raw(void* p, size_t n) {
  need(n);
  std::memcpy(p, buf_.data() + off_, n);
  off_ += n;
}

void ByteReader::expect_magic(const char* tag) {
  need(4);
  if (std::memcmp(buf_.data() + off_, tag, 4) != 0) {
    fail(std::string("bad magic, expected \"") + tag + "\"");
  }
  off_ += 4;
}

void ByteReader::expect_end() {
  if (off_ != buf_.size()) fail("trailing bytes after end of payload");
}

void ByteReader::fail(const std::string& what) const {
  throw FormatError(source_ + ": " + what + " at byte offset " +
                    std::to_string(off_));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw FormatError("read error on " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw FormatError("write error on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dfeat
