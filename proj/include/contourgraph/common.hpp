// SPDX-License-Identifier: Apache-2.0
//
// Shared plumbing: error types, deterministic RNG streams, binary PGM I/O
// and little-endian binary readers/writers used by the on-disk formats.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cg {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor/matrix dimensions.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad argument values (unknown op kind, invalid enum string, ...).
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Invalid run/network configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File missing, unreadable, or corrupt; message names the artifact.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Mask with no foreground: boundary and distance field are undefined.
class EmptyRegionError : public Error {
 public:
  explicit EmptyRegionError(const std::string& msg) : Error(msg) {}
};

// Polygon with fewer than 3 vertices.
class DegeneratePolygonError : public Error {
 public:
  explicit DegeneratePolygonError(const std::string& msg) : Error(msg) {}
};

// Non-finite value produced by a numeric kernel.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded stream with hand-rolled uniform/normal transforms. The engine state
// sequence is fixed by the standard and the transforms below are ours, so a
// given seed yields the same values on every build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_{splitmix64(seed), splitmix64(seed ^ 0xda3e39cb94b95bdbULL),
                                        splitmix64(seed ^ 0x9e6c63d0876a9a47ULL), splitmix64(seed ^ 0x1bef32e4f195cbe5ULL)} {
    for (int i = 0; i < 8; ++i) next_u64();
  }

  std::uint64_t next_u64() {
    // xoshiro256++
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// ---------------------------------------------------------------------------
// Little-endian binary I/O (assumes LE host)
// ---------------------------------------------------------------------------

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw IoError("corrupt file: truncated while reading " + what);
  return v;
}

inline double read_f64(std::istream& is, const std::string& what) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw IoError("corrupt file: truncated while reading " + what);
  return v;
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)
// ---------------------------------------------------------------------------

struct PgmImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing file: " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5") throw IoError("corrupt PGM (bad magic): " + path.string());
  auto next_token = [&is, &path]() {
    // skip whitespace and '#' comments
    std::string tok;
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
        continue;
      }
      if (!(is >> tok)) throw IoError("corrupt PGM (truncated header): " + path.string());
      return tok;
    }
  };
  PgmImage img;
  try {
    img.width = std::stoll(next_token());
    img.height = std::stoll(next_token());
    const long maxval = std::stol(next_token());
    if (maxval != 255) throw IoError("corrupt PGM (maxval != 255): " + path.string());
  } catch (const std::logic_error&) {
    throw IoError("corrupt PGM (bad header): " + path.string());
  }
  if (img.width <= 0 || img.height <= 0)
    throw IoError("corrupt PGM (bad dimensions): " + path.string());
  is.get();  // single whitespace after maxval
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size())))
    throw IoError("corrupt PGM (truncated pixel data): " + path.string());
  return img;
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

template <typename T>
std::string shape_str(const std::vector<T>& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

}  // namespace cg
