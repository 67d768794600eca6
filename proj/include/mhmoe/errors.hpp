// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mhmoe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters or configuration (k > N_e, P does not divide N_h, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A tile did not fit into the simulated on-chip tier.
class SramOverflow : public Error {
 public:
  SramOverflow(const std::string& kernel, const std::string& tile, std::size_t requested,
               std::size_t occupancy, std::size_t capacity)
      : Error("SRAM overflow in kernel '" + kernel + "' loading tile '" + tile + "': " +
              std::to_string(requested) + " words requested, " + std::to_string(occupancy) +
              " live, capacity " + std::to_string(capacity)),
        kernel_(kernel),
        tile_(tile) {}

  const std::string& kernel() const noexcept { return kernel_; }
  const std::string& tile() const noexcept { return tile_; }

 private:
  std::string kernel_;
  std::string tile_;
};

/// API misuse, e.g. storing through a tile handle that was already freed.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where the algorithm needs a total order.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhmoe
