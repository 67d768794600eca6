// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <utility>

#include "mhmoe/errors.hpp"

namespace mhmoe {

// Score/index packing for arg-top-k with plain integer max.
//
// The high half of the key is an order-preserving unsigned encoding of the
// score, the low 32 bits are the complemented expert index. Comparing keys as
// unsigned integers therefore orders by score first and, on equal scores,
// prefers the lower expert index.

template <typename T>
struct PackTraits;

template <>
struct PackTraits<float> {
  using Bits = std::uint32_t;
  using Key = std::uint64_t;
};

template <>
struct PackTraits<double> {
  using Bits = std::uint64_t;
  using Key = unsigned __int128;
};

template <typename T>
using PackedKey = typename PackTraits<T>::Key;

/// Monotone map from finite/infinite floats to unsigned integers:
/// non-negatives get the sign bit set, negatives have every bit flipped.
/// -0.0 is folded onto +0.0 so that equal scores compare equal.
template <typename T>
typename PackTraits<T>::Bits sortable_bits(T x) {
  using Bits = typename PackTraits<T>::Bits;
  constexpr Bits sign = Bits{1} << (sizeof(Bits) * 8 - 1);
  if (x == T(0)) x = T(0);
  const Bits u = std::bit_cast<Bits>(x);
  return (u & sign) ? static_cast<Bits>(~u) : static_cast<Bits>(u | sign);
}

template <typename T>
T from_sortable_bits(typename PackTraits<T>::Bits v) {
  using Bits = typename PackTraits<T>::Bits;
  constexpr Bits sign = Bits{1} << (sizeof(Bits) * 8 - 1);
  const Bits u = (v & sign) ? static_cast<Bits>(v ^ sign) : static_cast<Bits>(~v);
  return std::bit_cast<T>(u);
}

template <typename T>
PackedKey<T> pack_score_index(T score, std::uint32_t index) {
  if (std::isnan(score)) throw NumericError("cannot pack a NaN routing score");
  return (static_cast<PackedKey<T>>(sortable_bits(score)) << 32) |
         static_cast<PackedKey<T>>(static_cast<std::uint32_t>(~index));
}

template <typename T>
std::pair<T, std::uint32_t> unpack_score_index(PackedKey<T> key) {
  using Bits = typename PackTraits<T>::Bits;
  const auto index = static_cast<std::uint32_t>(~static_cast<std::uint32_t>(key));
  return {from_sortable_bits<T>(static_cast<Bits>(key >> 32)), index};
}

}  // namespace mhmoe
