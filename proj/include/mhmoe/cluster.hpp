// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mhmoe/errors.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

/// Token clustering: replicas (token t, slot j) -> replica id t * k + j,
/// stably sorted by their assigned expert.
struct ClusterPlan {
  std::vector<std::uint32_t> permutation;          // clustered position -> replica id
  std::vector<std::uint32_t> inverse_permutation;  // replica id -> clustered position
  std::vector<std::uint32_t> expert_offsets;       // [N_e + 1] prefix sums of counts
  std::size_t k = 1;                               // replicas per token

  std::size_t replicas() const noexcept { return permutation.size(); }
  std::size_t tokens() const noexcept { return k ? replicas() / k : 0; }
  std::size_t experts() const noexcept { return expert_offsets.empty() ? 0 : expert_offsets.size() - 1; }
  std::size_t segment_begin(std::size_t e) const { return expert_offsets[e]; }
  std::size_t segment_end(std::size_t e) const { return expert_offsets[e + 1]; }

  /// Expert owning clustered position `pos`.
  std::size_t expert_at(std::size_t pos) const {
    auto it = std::upper_bound(expert_offsets.begin(), expert_offsets.end(), pos);
    return static_cast<std::size_t>(it - expert_offsets.begin()) - 1;
  }

  /// Expert id for every clustered position.
  std::vector<std::int32_t> position_experts() const {
    std::vector<std::int32_t> out(replicas());
    for (std::size_t e = 0; e < experts(); ++e)
      std::fill(out.begin() + expert_offsets[e], out.begin() + expert_offsets[e + 1], static_cast<std::int32_t>(e));
    return out;
  }

  void validate() const {
    const std::size_t n = replicas();
    if (inverse_permutation.size() != n) throw ConfigError("cluster plan: inverse size mismatch");
    if (expert_offsets.empty() || expert_offsets.front() != 0 || expert_offsets.back() != n) {
      throw ConfigError("cluster plan: offsets must run from 0 to the replica count");
    }
    if (!std::is_sorted(expert_offsets.begin(), expert_offsets.end())) {
      throw ConfigError("cluster plan: offsets must be non-decreasing");
    }
    for (std::size_t p = 0; p < n; ++p) {
      if (permutation[p] >= n || inverse_permutation[permutation[p]] != p) {
        throw ConfigError("cluster plan: permutation is not a bijection");
      }
    }
  }
};

/// Stable counting sort of replicas by expert. `indices` is [n, k] (or
/// [B, T, 1, k]); replica order inside an expert follows token order.
inline ClusterPlan build_cluster_plan(const IndexTensor& indices, std::size_t num_experts) {
  if (indices.rank() == 0) throw DimensionError("build_cluster_plan: empty index tensor");
  if (indices.rank() == 4 && indices.dim(2) != 1) {
    throw DimensionError("build_cluster_plan: expects a single head, got " + shape_str(indices.shape()));
  }
  ClusterPlan plan;
  plan.k = indices.dim(indices.rank() - 1);
  const std::size_t n = indices.size();
  std::vector<std::uint32_t> counts(num_experts, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto e = indices[r];
    if (e < 0 || static_cast<std::size_t>(e) >= num_experts) {
      throw ConfigError("build_cluster_plan: expert index " + std::to_string(e) + " out of range");
    }
    ++counts[static_cast<std::size_t>(e)];
  }
  plan.expert_offsets.assign(num_experts + 1, 0);
  for (std::size_t e = 0; e < num_experts; ++e) plan.expert_offsets[e + 1] = plan.expert_offsets[e] + counts[e];
  std::vector<std::uint32_t> cursor(plan.expert_offsets.begin(), plan.expert_offsets.end() - 1);
  plan.permutation.resize(n);
  plan.inverse_permutation.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint32_t pos = cursor[static_cast<std::size_t>(indices[r])]++;
    plan.permutation[pos] = static_cast<std::uint32_t>(r);
    plan.inverse_permutation[r] = pos;
  }
  return plan;
}

/// dst[p] = src[permutation[p]] for replica-ordered rows.
template <typename T>
Tensor<T> permute_rows(const Tensor<T>& src, const ClusterPlan& plan) {
  if (src.rank() == 0 || src.dim(0) != plan.replicas()) throw DimensionError("permute_rows: row count mismatch");
  const std::size_t w = src.size() / src.dim(0);
  Tensor<T> dst(src.shape());
  for (std::size_t p = 0; p < plan.replicas(); ++p)
    std::copy_n(src.data() + plan.permutation[p] * w, w, dst.data() + p * w);
  return dst;
}

/// Inverse of permute_rows.
template <typename T>
Tensor<T> unpermute_rows(const Tensor<T>& clustered, const ClusterPlan& plan) {
  if (clustered.rank() == 0 || clustered.dim(0) != plan.replicas()) {
    throw DimensionError("unpermute_rows: row count mismatch");
  }
  const std::size_t w = clustered.size() / clustered.dim(0);
  Tensor<T> dst(clustered.shape());
  for (std::size_t r = 0; r < plan.replicas(); ++r)
    std::copy_n(clustered.data() + plan.inverse_permutation[r] * w, w, dst.data() + r * w);
  return dst;
}

/// Duplicate token rows [n, d] into clustered replica order [n * k, d].
template <typename T>
Tensor<T> gather_clustered(const Tensor<T>& tokens, const ClusterPlan& plan) {
  require_rank(tokens, 2, "gather_clustered tokens");
  if (tokens.dim(0) != plan.tokens()) throw DimensionError("gather_clustered: token count mismatch");
  const std::size_t w = tokens.dim(1);
  Tensor<T> dst({plan.replicas(), w});
  for (std::size_t p = 0; p < plan.replicas(); ++p)
    std::copy_n(tokens.data() + (plan.permutation[p] / plan.k) * w, w, dst.data() + p * w);
  return dst;
}

/// Occupancy of (token-block, expert-row-block) tiles of the clustered
/// replica x expert-row score matrix. Expert e owns rows [e*d_e, (e+1)*d_e).
struct BlockMask {
  std::size_t row_block = 0;
  std::size_t key_block = 0;
  std::size_t row_blocks = 0;
  std::size_t key_blocks = 0;
  std::vector<std::uint8_t> occupied;

  bool at(std::size_t rb, std::size_t kb) const { return occupied[rb * key_blocks + kb] != 0; }
  std::size_t occupied_count() const {
    return static_cast<std::size_t>(std::count(occupied.begin(), occupied.end(), std::uint8_t{1}));
  }
};

inline BlockMask build_block_mask(const ClusterPlan& plan, std::size_t expert_hidden,
                                  std::size_t row_block, std::size_t key_block) {
  if (row_block == 0 || key_block == 0 || expert_hidden == 0) {
    throw ConfigError("build_block_mask: block sizes and expert width must be positive");
  }
  BlockMask m;
  m.row_block = row_block;
  m.key_block = key_block;
  m.row_blocks = (plan.replicas() + row_block - 1) / row_block;
  m.key_blocks = (plan.experts() * expert_hidden + key_block - 1) / key_block;
  m.occupied.assign(m.row_blocks * m.key_blocks, 0);
  for (std::size_t e = 0; e < plan.experts(); ++e) {
    const std::size_t p0 = plan.segment_begin(e), p1 = plan.segment_end(e);
    if (p0 == p1) continue;
    const std::size_t k0 = e * expert_hidden / key_block;
    const std::size_t k1 = ((e + 1) * expert_hidden - 1) / key_block;
    for (std::size_t rb = p0 / row_block; rb <= (p1 - 1) / row_block; ++rb)
      for (std::size_t kb = k0; kb <= k1; ++kb) m.occupied[rb * m.key_blocks + kb] = 1;
  }
  return m;
}

namespace detail {
inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}
}  // namespace detail

/// Debug dump, all little-endian u32: replica count, expert count, k,
/// permutation[replicas], expert_offsets[experts + 1].
inline void write_cluster_plan(std::ostream& os, const ClusterPlan& plan) {
  detail::put_u32_le(os, static_cast<std::uint32_t>(plan.replicas()));
  detail::put_u32_le(os, static_cast<std::uint32_t>(plan.experts()));
  detail::put_u32_le(os, static_cast<std::uint32_t>(plan.k));
  for (auto v : plan.permutation) detail::put_u32_le(os, v);
  for (auto v : plan.expert_offsets) detail::put_u32_le(os, v);
}

}  // namespace mhmoe
