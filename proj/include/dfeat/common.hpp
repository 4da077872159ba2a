#pragma once

// Shared plumbing: error taxonomy, a deterministic RNG and little-endian
// binary readers/writers used by all the file formats.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfeat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shape does not match what the operation expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Input violates a structural precondition (too few labels, bad threshold...).
class ConstraintError : public Error {
 public:
  using Error::Error;
};

// Requested window falls outside the image.
class BoundaryError : public Error {
 public:
  using Error::Error;
};

// Mathematically degenerate input (zero vector into a normalizer, batch of
// one into the miner). `index` identifies the offending element when known.
class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& msg, long index = -1)
      : Error(msg), index_(index) {}
  long index() const { return index_; }

 private:
  long index_;
};

// Deterministic random source. mt19937_64 gives a bit-exact stream on every
// platform; the derived draws below avoid std::uniform_*_distribution, whose
// output is implementation defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t uniform_int(uint64_t n);

  // Standard normal deviate (Box-Muller, second value cached).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<size_t>(uniform_int(i))]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Accumulates a little-endian byte stream in memory.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(uint32_t v);
  void f32(float v);
  void raw(const void* p, size_t n);
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

// Cursor over a little-endian byte buffer; failures carry the byte offset.
class ByteReader {
 public:
  ByteReader(std::string bytes, std::string source)
      : buf_(std::move(bytes)), source_(std::move(source)) {}

  uint8_t u8();
  uint32_t u32();
  float f32();
  void raw(void* p, size_t n);
  void expect_magic(const char* tag);
  size_t offset() const { return off_; }
  size_t remaining() const { return buf_.size() - off_; }
  void expect_end();

  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(size_t n);

  std::string buf_;
  size_t off_ = 0;
  std::string source_;
};

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace dfeat
