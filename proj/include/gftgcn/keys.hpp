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

// User keys and the two deterministic streams derived from them: the key
// embedding that conditions phi and the per-step diffusion noise.

#pragma once

#include "gftgcn/common.hpp"

#include <array>
#include <random>

namespace gftgcn {

inline constexpr int kKeyEmbeddingDim = 32;

struct KeyMaterial {
  std::array<std::uint8_t, 16> bytes{};

  bool operator==(const KeyMaterial&) const = default;

  /// Public digest: SplitMix64 finaliser of FNV-1a over the key bytes.
  std::uint64_t key_id() const { return SplitMix64::mix(fnv1a64(std::span<const std::uint8_t>(bytes))); }

  static KeyMaterial from_seed(std::uint64_t seed) {
    SplitMix64 rng(seed);
    KeyMaterial k;
    for (int half = 0; half < 2; ++half) {
      const std::uint64_t v = rng.next();
      for (int i = 0; i < 8; ++i) k.bytes[static_cast<std::size_t>(half * 8 + i)] = static_cast<std::uint8_t>(v >> (8 * i));
    }
    return k;
  }

  /// Fresh key from the operating system's entropy source.
  static KeyMaterial random() {
    std::random_device rd;
    const std::uint64_t seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    return from_seed(seed ^ 0xA5A5A5A55A5A5A5AULL);
  }

  /// Hex form for local key files only; never placed in templates or messages.
  std::string to_hex() const {
    std::string out;
    for (int half = 0; half < 2; ++half) {
      std::uint64_t v = 0;
      for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[static_cast<std::size_t>(half * 8 + i)];
      out += gftgcn::to_hex(v);
    }
    return out;
  }

  static KeyMaterial from_hex(std::string_view text) {
    if (text.size() != 32) throw ParseError("key must be 32 hex digits");
    KeyMaterial k;
    for (int half = 0; half < 2; ++half) {
      const std::uint64_t v = parse_hex_u64(text.substr(static_cast<std::size_t>(half * 16), 16));
      for (int i = 0; i < 8; ++i) k.bytes[static_cast<std::size_t>(half * 8 + i)] = static_cast<std::uint8_t>(v >> (8 * i));
    }
    return k;
  }
};

inline std::uint64_t key_digest(const KeyMaterial& key, std::string_view tag, std::uint64_t step = 0) {
  std::uint64_t h = fnv1a64(std::span<const std::uint8_t>(key.bytes));
  h = fnv1a64_u64(step, h);
  h = fnv1a64(tag, h);
  return SplitMix64::mix(h);
}

/// SplitMix64 stream seeded from the key, mapped to [-1, 1].
inline Vector key_embed(const KeyMaterial& key) {
  SplitMix64 rng(key_digest(key, "embed"));
  Vector e(kKeyEmbeddingDim);
  for (int i = 0; i < kKeyEmbeddingDim; ++i) e(i) = 2.0 * rng.uniform() - 1.0;
  return e;
}

/// Standard-normal vector seeded from digest(key || t || "eps").
inline Vector keyed_noise(const KeyMaterial& key, int t, int d) {
  if (t < 1) throw PreconditionError("keyed noise step must be >= 1");
  SplitMix64 rng(key_digest(key, "eps", static_cast<std::uint64_t>(t)));
  Vector e(d);
  for (int i = 0; i < d; ++i) e(i) = rng.normal();
  return e;
}

}  // namespace gftgcn
