#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tracformer/error.hpp"

namespace tracformer {

// Positions are 1-indexed throughout this module, matching the [1..T]
// convention used everywhere masks are visible externally (CSV dumps, tests).

// Sparse realization of an attention mask matrix: one sorted list of
// attended key positions per query position.
struct MaskLayout {
  int T = 0;
  std::vector<std::vector<int>> rows;  // rows[t-1] = attended positions for query t

  const std::vector<int>& row(int t) const { return rows[t - 1]; }

  void validate() const {
    if (static_cast<int>(rows.size()) != T) throw ShapeError("MaskLayout: row count != T");
    for (int t = 1; t <= T; ++t) {
      const auto& r = rows[t - 1];
      for (size_t i = 0; i < r.size(); ++i) {
        if (r[i] < 1 || r[i] > T) throw DomainError("MaskLayout: key position out of [1..T]");
        if (i > 0 && r[i] <= r[i - 1]) throw DomainError("MaskLayout: row not strictly increasing");
      }
    }
  }
};

// Per-position variable scopes; scopes[t-1] is the sorted set of input
// positions that can influence the feature at t.
struct ScopeSet {
  int T = 0;
  std::vector<std::vector<int>> scopes;

  const std::vector<int>& scope(int t) const { return scopes[t - 1]; }
};

namespace detail {
inline int64_t pow2(int e) { return int64_t{1} << e; }
}  // namespace detail

// Scope of the layer-l prefix feature at t: positions within 2^l to the left.
inline std::vector<int> prefix_scope(int t, int l, int T) {
  if (t < 1 || t > T) throw DomainError("prefix_scope: t out of [1..T]");
  if (l < 0) throw DomainError("prefix_scope: negative layer");
  const int64_t width = detail::pow2(l);
  std::vector<int> out;
  for (int64_t tp = std::max<int64_t>(1, t - width + 1); tp <= t; ++tp) out.push_back(static_cast<int>(tp));
  return out;
}

// Mirror image: positions within 2^l to the right.
inline std::vector<int> suffix_scope(int t, int l, int T) {
  if (t < 1 || t > T) throw DomainError("suffix_scope: t out of [1..T]");
  if (l < 0) throw DomainError("suffix_scope: negative layer");
  const int64_t width = detail::pow2(l);
  std::vector<int> out;
  for (int64_t tp = t; tp <= std::min<int64_t>(T, t + width - 1); ++tp) out.push_back(static_cast<int>(tp));
  return out;
}

namespace detail {

// Exactly n_max points linearly spaced over [a, b], rounded half away from
// zero, deduplicated, clipped to [1..T]. Both endpoints are always kept when
// they land in range; that is what preserves the scope-union identity.
inline std::vector<int> sampled_window(int64_t a, int64_t b, int n_max, int T) {
  std::vector<int> out;
  const double step = static_cast<double>(b - a) / (n_max - 1);
  int64_t prev = INT64_MIN;
  for (int k = 0; k < n_max; ++k) {
    const int64_t p = (k == n_max - 1) ? b : std::llround(static_cast<double>(a) + step * k);
    if (p == prev) continue;  // duplicates after rounding are merged
    prev = p;
    if (p >= 1 && p <= T) out.push_back(static_cast<int>(p));
  }
  return out;
}

}  // namespace detail

// Prefix-encoder self-attention mask for layer l >= 1. Narrow windows
// (2^{l-1} < N_max) are kept dense; wider ones are subsampled to N_max
// linearly spaced positions.
inline MaskLayout sparse_prefix_mask(int l, int T, int n_max) {
  if (n_max < 2) throw ConfigError("sparse_prefix_mask: N_max must be >= 2");
  if (l < 1) throw DomainError("sparse_prefix_mask: layer must be >= 1");
  const int64_t half = detail::pow2(l - 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t) {
    const int64_t a = t - half;
    const int64_t b = t;
    if (half < n_max) {
      auto& r = layout.rows[t - 1];
      for (int64_t tp = std::max<int64_t>(1, a); tp <= b; ++tp) r.push_back(static_cast<int>(tp));
    } else {
      layout.rows[t - 1] = detail::sampled_window(a, b, n_max, T);
    }
  }
  return layout;
}

// Mirror of sparse_prefix_mask with the window [t, t + 2^{l-1}].
inline MaskLayout sparse_suffix_mask(int l, int T, int n_max) {
  if (n_max < 2) throw ConfigError("sparse_suffix_mask: N_max must be >= 2");
  if (l < 1) throw DomainError("sparse_suffix_mask: layer must be >= 1");
  const int64_t half = detail::pow2(l - 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t) {
    const int64_t a = t;
    const int64_t b = t + half;
    if (half < n_max) {
      auto& r = layout.rows[t - 1];
      for (int64_t tp = a; tp <= std::min<int64_t>(T, b); ++tp) r.push_back(static_cast<int>(tp));
    } else {
      layout.rows[t - 1] = detail::sampled_window(a, b, n_max, T);
    }
  }
  return layout;
}

// Dense window masks (the un-sparsified pattern); used by tests as the
// reference the sparse masks must match in receptive field.
inline MaskLayout dense_prefix_mask(int l, int T) {
  if (l < 1) throw DomainError("dense_prefix_mask: layer must be >= 1");
  const int64_t half = detail::pow2(l - 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t)
    for (int64_t tp = std::max<int64_t>(1, t - half); tp <= t; ++tp)
      layout.rows[t - 1].push_back(static_cast<int>(tp));
  return layout;
}

inline MaskLayout dense_suffix_mask(int l, int T) {
  if (l < 1) throw DomainError("dense_suffix_mask: layer must be >= 1");
  const int64_t half = detail::pow2(l - 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t)
    for (int64_t tp = t; tp <= std::min<int64_t>(T, t + half); ++tp)
      layout.rows[t - 1].push_back(static_cast<int>(tp));
  return layout;
}

inline MaskLayout causal_mask(int T) {
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t)
    for (int tp = 1; tp <= t; ++tp) layout.rows[t - 1].push_back(tp);
  return layout;
}

// Decoder cross-attention into the prefix encoder: strictly earlier
// positions on a stride-2^{L-l+1} grid anchored at t-1. Row 1 is empty.
inline MaskLayout decoder_prefix_mask(int l, int L, int T) {
  if (l < 1 || l > L) throw DomainError("decoder_prefix_mask: layer out of [1..L]");
  const int64_t stride = detail::pow2(L - l + 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t) {
    const int64_t r = (t - 1) % stride;
    int64_t first = (r == 0) ? stride : r;
    for (int64_t tp = first; tp < t; tp += stride) layout.rows[t - 1].push_back(static_cast<int>(tp));
  }
  return layout;
}

// Mirror: strictly later positions congruent to t+1 modulo the stride.
inline MaskLayout decoder_suffix_mask(int l, int L, int T) {
  if (l < 1 || l > L) throw DomainError("decoder_suffix_mask: layer out of [1..L]");
  const int64_t stride = detail::pow2(L - l + 1);
  MaskLayout layout;
  layout.T = T;
  layout.rows.resize(T);
  for (int t = 1; t <= T; ++t)
    for (int64_t tp = t + 1; tp <= T; tp += stride) layout.rows[t - 1].push_back(static_cast<int>(tp));
  return layout;
}

// Propagates scopes bottom-up through a stack of layouts:
// scope^0_t = {t}, scope^l_t = union of scope^{l-1} over the layer-l row.
// Returns one ScopeSet per level 0..n_layers.
inline std::vector<ScopeSet> receptive_field_oracle(const std::vector<MaskLayout>& layouts) {
  if (layouts.empty()) throw DomainError("receptive_field_oracle: no layouts");
  const int T = layouts.front().T;
  for (const auto& lay : layouts)
    if (lay.T != T) throw ShapeError("receptive_field_oracle: inconsistent T");

  std::vector<ScopeSet> levels;
  ScopeSet base;
  base.T = T;
  base.scopes.resize(T);
  for (int t = 1; t <= T; ++t) base.scopes[t - 1] = {t};
  levels.push_back(std::move(base));

  std::vector<char> member(T + 1);
  for (const auto& lay : layouts) {
    const ScopeSet& below = levels.back();
    ScopeSet next;
    next.T = T;
    next.scopes.resize(T);
    for (int t = 1; t <= T; ++t) {
      std::fill(member.begin(), member.end(), 0);
      for (int tp : lay.row(t))
        for (int p : below.scope(tp)) member[p] = 1;
      auto& sc = next.scopes[t - 1];
      for (int p = 1; p <= T; ++p)
        if (member[p]) sc.push_back(p);
    }
    levels.push_back(std::move(next));
  }
  return levels;
}

// Total number of attended (t, t') pairs.
inline size_t mask_population(const MaskLayout& layout) {
  size_t n = 0;
  for (const auto& r : layout.rows) n += r.size();
  return n;
}

// CSV rows "layer,t,t'" for inspection and golden-file tests.
inline std::string layout_to_csv(const MaskLayout& layout, int layer) {
  std::string out;
  for (int t = 1; t <= layout.T; ++t)
    for (int tp : layout.row(t)) {
      out += std::to_string(layer);
      out += ',';
      out += std::to_string(t);
      out += ',';
      out += std::to_string(tp);
      out += '\n';
    }
  return out;
}

}  // namespace tracformer
