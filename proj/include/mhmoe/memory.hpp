// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Simulated two-tier memory: a small on-chip tier ("SRAM") and a large
// off-chip tier ("HBM"). Kernels move data between them through an Arena,
// which copies the data and counts every word that crosses the boundary. The
// arena is observational: a kernel computes exactly the same values whether
// its arena is metered or not.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mhmoe/errors.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

struct TierConfig {
  std::size_t sram_capacity_words = 65536;  // 256 KiB of FP32
  std::size_t word_size_bytes = 4;

  void validate() const {
    if (sram_capacity_words == 0) throw ConfigError("sram_capacity_words must be positive");
    if (word_size_bytes == 0) throw ConfigError("word_size_bytes must be positive");
  }
};

struct TrafficLedger {
  std::string kernel_label;
  std::uint64_t hbm_words_read = 0;
  std::uint64_t hbm_words_written = 0;
  std::uint64_t sram_peak_words = 0;
  // Intermediate buffers a kernel materializes in HBM (activations, score
  // matrices). Their traffic is also included in the totals above.
  std::uint64_t hbm_scratch_peak_words = 0;
  std::uint64_t scratch_words_read = 0;
  std::uint64_t scratch_words_written = 0;

  std::uint64_t hbm_words_total() const { return hbm_words_read + hbm_words_written; }
  std::uint64_t scratch_words_total() const { return scratch_words_read + scratch_words_written; }

  /// Sum of two ledgers; peaks combine by max.
  TrafficLedger& operator+=(const TrafficLedger& o) {
    hbm_words_read += o.hbm_words_read;
    hbm_words_written += o.hbm_words_written;
    sram_peak_words = std::max(sram_peak_words, o.sram_peak_words);
    hbm_scratch_peak_words = std::max(hbm_scratch_peak_words, o.hbm_scratch_peak_words);
    scratch_words_read += o.scratch_words_read;
    scratch_words_written += o.scratch_words_written;
    return *this;
  }

  friend bool operator==(const TrafficLedger&, const TrafficLedger&) = default;
};

inline constexpr std::string_view kLedgerCsvHeader =
    "kernel_label,hbm_words_read,hbm_words_written,sram_peak_words,hbm_scratch_peak_words,"
    "scratch_words_read,scratch_words_written";

inline void write_ledger_csv(std::ostream& os, std::span<const TrafficLedger> ledgers,
                             const std::optional<std::string>& config_hash = std::nullopt,
                             bool header = true) {
  if (header) os << (config_hash ? "config_hash," : "") << kLedgerCsvHeader << '\n';
  for (const auto& l : ledgers) {
    if (config_hash) os << *config_hash << ',';
    os << l.kernel_label << ',' << l.hbm_words_read << ',' << l.hbm_words_written << ','
       << l.sram_peak_words << ',' << l.hbm_scratch_peak_words << ',' << l.scratch_words_read
       << ',' << l.scratch_words_written << '\n';
  }
}

/// Which part of HBM a transfer touches. Scratch traffic is additionally
/// tallied in the scratch counters.
enum class HbmClass { persistent, scratch };

/// Strided 2-D window into a buffer: `rows` runs of `cols` elements, `stride`
/// elements apart.
template <typename T>
struct MatrixRef {
  T* base = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  std::size_t size() const noexcept { return rows * cols; }
  T& operator()(std::size_t r, std::size_t c) const noexcept { return base[r * stride + c]; }

  operator MatrixRef<const T>() const noexcept { return {base, rows, cols, stride}; }
};

template <typename T>
using Region = MatrixRef<T>;
template <typename T>
using ConstRegion = MatrixRef<const T>;

template <typename T>
Region<T> region(Tensor<T>& t, std::size_t offset, std::size_t rows, std::size_t cols,
                 std::size_t stride) {
  if (rows > 0 && offset + (rows - 1) * stride + cols > t.size()) {
    throw DimensionError("region exceeds tensor of shape " + shape_str(t.shape()));
  }
  return {t.data() + offset, rows, cols, stride};
}

template <typename T>
ConstRegion<T> region(const Tensor<T>& t, std::size_t offset, std::size_t rows,
                      std::size_t cols, std::size_t stride) {
  if (rows > 0 && offset + (rows - 1) * stride + cols > t.size()) {
    throw DimensionError("region exceeds tensor of shape " + shape_str(t.shape()));
  }
  return {t.data() + offset, rows, cols, stride};
}

/// A contiguous range of a tensor as a single-row region.
template <typename T>
auto flat_region(T& t, std::size_t offset, std::size_t count) {
  return region(t, offset, 1, count, count);
}

class Arena;

/// Handle to an on-chip copy of some data. Move-only; destroying a live tile
/// returns its words to the arena.
template <typename T>
class Tile {
 public:
  Tile() = default;
  Tile(const Tile&) = delete;
  Tile& operator=(const Tile&) = delete;
  Tile(Tile&& o) noexcept { *this = std::move(o); }
  Tile& operator=(Tile&& o) noexcept;
  ~Tile();

  bool live() const noexcept { return arena_ != nullptr; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t words() const noexcept { return words_; }
  const std::string& label() const noexcept { return label_; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

 private:
  friend class Arena;
  Arena* arena_ = nullptr;
  std::uint64_t id_ = 0;
  std::size_t rows_ = 0, cols_ = 0, words_ = 0;
  std::string label_;
  std::vector<T> data_;
};

/// Intermediate buffer living in simulated HBM for the lifetime of the handle.
template <typename T>
class ScratchBuffer {
 public:
  ScratchBuffer(const ScratchBuffer&) = delete;
  ScratchBuffer& operator=(const ScratchBuffer&) = delete;
  ScratchBuffer(ScratchBuffer&& o) noexcept
      : arena_(std::exchange(o.arena_, nullptr)), words_(o.words_), tensor(std::move(o.tensor)) {}
  ~ScratchBuffer();

 private:
  friend class Arena;
  ScratchBuffer(Arena* arena, std::size_t words, Shape shape)
      : arena_(arena), words_(words), tensor(std::move(shape)) {}
  Arena* arena_;
  std::size_t words_;

 public:
  Tensor<T> tensor;
};

/// Per-kernel traffic accountant. One arena per kernel invocation.
class Arena {
 public:
  explicit Arena(std::string kernel_label, TierConfig config = {}) : config_(config) {
    config_.validate();
    ledger_.kernel_label = std::move(kernel_label);
  }

  /// An arena with unlimited SRAM; counters still run.
  static Arena unmetered(std::string kernel_label) {
    return Arena(std::move(kernel_label),
                 TierConfig{std::numeric_limits<std::size_t>::max() / 2, 4});
  }

  Arena(const Arena&) = delete;
  Arena& operator=(const Arena&) = delete;

  const TierConfig& config() const noexcept { return config_; }
  const TrafficLedger& ledger() const noexcept { return ledger_; }
  std::size_t occupancy() const noexcept { return occupancy_; }
  std::size_t live_tiles() const noexcept { return live_.size(); }

  template <typename T>
  std::size_t words_for(std::size_t elements) const noexcept {
    return (elements * sizeof(T) + config_.word_size_bytes - 1) / config_.word_size_bytes;
  }

  /// HBM -> SRAM copy of a region.
  template <typename T>
  Tile<T> load(std::string_view tile, ConstRegion<T> src, HbmClass cls = HbmClass::persistent) {
    Tile<T> t = make_tile<T>(tile, src.rows, src.cols);
    for (std::size_t r = 0; r < src.rows; ++r) {
      std::copy_n(src.base + r * src.stride, src.cols, t.data_.data() + r * src.cols);
    }
    count_read(t.words_, cls);
    return t;
  }

  /// HBM -> SRAM gather: element (r, c) comes from `at(r, c)`.
  template <typename T, typename Fn>
  Tile<T> load_gather(std::string_view tile, std::size_t rows, std::size_t cols, Fn&& at,
                      HbmClass cls = HbmClass::persistent) {
    Tile<T> t = make_tile<T>(tile, rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) t.data_[r * cols + c] = at(r, c);
    count_read(t.words_, cls);
    return t;
  }

  /// On-chip working buffer; no HBM traffic.
  template <typename T>
  Tile<T> alloc(std::string_view tile, std::size_t rows, std::size_t cols, T fill = T{}) {
    Tile<T> t = make_tile<T>(tile, rows, cols);
    std::fill(t.data_.begin(), t.data_.end(), fill);
    return t;
  }

  /// SRAM -> HBM write-through; the tile stays live.
  template <typename T>
  void store(const Tile<T>& t, Region<T> dst, HbmClass cls = HbmClass::persistent) {
    check_live(t, "store");
    if (dst.rows != t.rows_ || dst.cols != t.cols_) {
      throw DimensionError("store: tile '" + t.label_ + "' is " + std::to_string(t.rows_) + "x" +
                           std::to_string(t.cols_) + ", destination is " +
                           std::to_string(dst.rows) + "x" + std::to_string(dst.cols));
    }
    for (std::size_t r = 0; r < dst.rows; ++r) {
      std::copy_n(t.data_.data() + r * t.cols_, dst.cols, dst.base + r * dst.stride);
    }
    count_write(t.words_, cls);
  }

  /// dst += tile contents, charged as a read-modify-write of `dst`. Tile
  /// elements are consumed in order starting at `offset`.
  template <typename T>
  void accumulate(const Tile<T>& t, std::size_t offset, Region<T> dst,
                  HbmClass cls = HbmClass::persistent) {
    check_live(t, "accumulate");
    if (offset + dst.size() > t.size()) {
      throw DimensionError("accumulate: destination of " + std::to_string(dst.size()) +
                           " elements exceeds tile '" + t.label_ + "'");
    }
    std::size_t i = offset;
    for (std::size_t r = 0; r < dst.rows; ++r)
      for (std::size_t c = 0; c < dst.cols; ++c) dst(r, c) += t.data_[i++];
    const std::size_t w = words_for<T>(dst.size());
    count_read(w, cls);
    count_write(w, cls);
  }

  template <typename T>
  void accumulate(const Tile<T>& t, Region<T> dst, HbmClass cls = HbmClass::persistent) {
    if (dst.rows != t.rows_ || dst.cols != t.cols_) {
      throw DimensionError("accumulate: tile '" + t.label_ + "' shape does not match destination");
    }
    accumulate(t, 0, dst, cls);
  }

  template <typename T>
  void free(Tile<T>& t) {
    check_live(t, "free");
    release(t.id_);
    t.arena_ = nullptr;
  }

  /// Reserve an intermediate HBM buffer; released when the handle dies.
  template <typename T>
  ScratchBuffer<T> hbm_scratch(Shape shape) {
    const std::size_t w = words_for<T>(shape_numel(shape));
    scratch_live_ += w;
    ledger_.hbm_scratch_peak_words = std::max<std::uint64_t>(ledger_.hbm_scratch_peak_words, scratch_live_);
    return ScratchBuffer<T>(this, w, std::move(shape));
  }

  /// Charge a plain HBM write that does not pass through a tile (memset).
  void charge_hbm_write(std::size_t words, HbmClass cls = HbmClass::persistent) {
    count_write(words, cls);
  }

 private:
  template <typename T>
  friend class Tile;
  template <typename T>
  friend class ScratchBuffer;

  template <typename T>
  Tile<T> make_tile(std::string_view label, std::size_t rows, std::size_t cols) {
    const std::size_t w = words_for<T>(rows * cols);
    if (occupancy_ + w > config_.sram_capacity_words) {
      throw SramOverflow(ledger_.kernel_label, std::string(label), w, occupancy_,
                         config_.sram_capacity_words);
    }
    Tile<T> t;
    t.arena_ = this;
    t.id_ = next_id_++;
    t.rows_ = rows;
    t.cols_ = cols;
    t.words_ = w;
    t.label_ = std::string(label);
    t.data_.resize(rows * cols);
    live_.emplace(t.id_, w);
    occupancy_ += w;
    ledger_.sram_peak_words = std::max<std::uint64_t>(ledger_.sram_peak_words, occupancy_);
    return t;
  }

  template <typename T>
  void check_live(const Tile<T>& t, const char* op) const {
    if (t.arena_ != this || !live_.contains(t.id_)) {
      throw UsageError(std::string(op) + ": tile '" + t.label_ + "' is not live in kernel '" +
                       ledger_.kernel_label + "'");
    }
  }

  void release(std::uint64_t id) noexcept {
    auto it = live_.find(id);
    if (it == live_.end()) return;
    occupancy_ -= it->second;
    live_.erase(it);
  }

  void release_scratch(std::size_t words) noexcept { scratch_live_ -= words; }

  void count_read(std::size_t words, HbmClass cls) {
    ledger_.hbm_words_read += words;
    if (cls == HbmClass::scratch) ledger_.scratch_words_read += words;
  }
  void count_write(std::size_t words, HbmClass cls) {
    ledger_.hbm_words_written += words;
    if (cls == HbmClass::scratch) ledger_.scratch_words_written += words;
  }

  TierConfig config_;
  TrafficLedger ledger_;
  std::map<std::uint64_t, std::size_t> live_;
  std::size_t occupancy_ = 0;
  std::size_t scratch_live_ = 0;
  std::uint64_t next_id_ = 1;
};

template <typename T>
Tile<T>& Tile<T>::operator=(Tile&& o) noexcept {
  if (this != &o) {
    if (arena_) arena_->release(id_);
    arena_ = std::exchange(o.arena_, nullptr);
    id_ = o.id_;
    rows_ = o.rows_;
    cols_ = o.cols_;
    words_ = o.words_;
    label_ = std::move(o.label_);
    data_ = std::move(o.data_);
  }
  return *this;
}

template <typename T>
Tile<T>::~Tile() {
  if (arena_) arena_->release(id_);
}

template <typename T>
ScratchBuffer<T>::~ScratchBuffer() {
  if (arena_) arena_->release_scratch(words_);
}

/// Collects one ledger per kernel invocation for composite operations.
class LedgerLog {
 public:
  explicit LedgerLog(TierConfig config = {}) : config_(config) { config_.validate(); }

  const TierConfig& config() const noexcept { return config_; }
  const std::vector<TrafficLedger>& ledgers() const noexcept { return ledgers_; }

  void record(const Arena& arena) { ledgers_.push_back(arena.ledger()); }
  void clear() { ledgers_.clear(); }

  /// Sum of all recorded ledgers whose label starts with `prefix`.
  TrafficLedger total(std::string_view prefix = {}) const {
    TrafficLedger sum;
    sum.kernel_label = std::string(prefix.empty() ? "total" : prefix);
    for (const auto& l : ledgers_) {
      if (std::string_view(l.kernel_label).starts_with(prefix)) sum += l;
    }
    return sum;
  }

 private:
  TierConfig config_;
  std::vector<TrafficLedger> ledgers_;
};

}  // namespace mhmoe
