/*
 * Copyright (c) 2026, The gftgcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gftgcn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error hierarchy. Every failure surfaced by the library derives from Error so
// the CLI can map it to a nonzero exit code with one catch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class TopologyError : public Error {
 public:
  using Error::Error;
};
class PreconditionError : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class ConvergenceError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void warn(std::string_view message) {
  std::clog << "[gftgcn warning] " << message << '\n';
}

/// SplitMix64 stream. Used wherever the output must be identical across
/// platforms and standard libraries (the std distributions are not).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    return mix(z);
  }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log argument.
  double uniform_open_low() { return (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open_low();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  std::uint64_t below(std::uint64_t bound) { return bound == 0 ? 0 : next() % bound; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view text, std::uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), h);
}

inline std::uint64_t fnv1a64_u64(std::uint64_t value, std::uint64_t h) {
  std::uint8_t bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(value >> (8 * i));
  return fnv1a64(std::span<const std::uint8_t>(bytes, 8), h);
}

/// Derives an independent stream seed from a master seed and a tuple of tags.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t h = fnv1a64(tag);
  h = fnv1a64_u64(master, h);
  h = fnv1a64_u64(a, h);
  h = fnv1a64_u64(b, h);
  return SplitMix64::mix(h);
}

inline std::string to_hex(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

inline std::uint64_t parse_hex_u64(std::string_view text) {
  if (text.empty() || text.size() > 16) throw ParseError("bad hex id: '" + std::string(text) + "'");
  std::uint64_t value = 0;
  for (char c : text) {
    value <<= 4;
    if (c >= '0' && c <= '9') value |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') value |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') value |= static_cast<std::uint64_t>(c - 'A' + 10);
    else throw ParseError("bad hex id: '" + std::string(text) + "'");
  }
  return value;
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine similarity of a zero-norm vector");
  return a.dot(b) / (na * nb);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace gftgcn
