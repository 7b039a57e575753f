#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracformer/error.hpp"
#include "tracformer/rng.hpp"

namespace tracformer {

// Positions are 1-indexed; spans are half-open [start, end) with
// 1 <= start < end <= L+1.

struct SpanDistribution {
  enum class Kind { geometric, dlogistic };
  Kind kind = Kind::geometric;
  double mu = 50.0;
  double sigma = 1.0;  // dlogistic only

  void validate() const {
    if (mu < 1.0) throw ConfigError("span distribution: mean must be >= 1");
    if (kind == Kind::dlogistic && sigma <= 0.0) throw ConfigError("span distribution: sigma must be positive");
  }

  int64_t sample(Rng& rng) const {
    return kind == Kind::geometric ? rng.geometric(mu) : rng.dlogistic(mu, sigma);
  }
};

struct MaskSample {
  std::vector<std::pair<int, int>> spans;  // half-open, pairwise disjoint
  std::vector<int> blank_ids;              // sorted; the positions to mask
  std::vector<int> context;                // sorted complement of blank_ids

  nlohmann::json to_json() const {
    nlohmann::json js = nlohmann::json::array();
    for (auto& [s, e] : spans) js.push_back(nlohmann::json::array({s, e}));
    return nlohmann::json{{"spans", js}, {"blank_ids", blank_ids}, {"context", context}};
  }
};

namespace detail {

inline MaskSample finish_sample(int L, std::vector<std::pair<int, int>> spans) {
  std::sort(spans.begin(), spans.end());
  MaskSample out;
  out.spans = std::move(spans);
  std::vector<char> blank(static_cast<size_t>(L) + 1, 0);
  for (auto& [s, e] : out.spans)
    for (int p = s; p < e; ++p) blank[static_cast<size_t>(p)] = 1;
  for (int p = 1; p <= L; ++p) (blank[static_cast<size_t>(p)] ? out.blank_ids : out.context).push_back(p);
  return out;
}

}  // namespace detail

inline int exact_mask_count(int L, double p) {
  return std::max(1, static_cast<int>(std::llround(p * L)));
}

// Span masking: repeatedly place non-overlapping spans with lengths from
// `dist`, rejecting overlaps, until at least round(p*L) positions are
// covered; the most recently accepted span is then trimmed from its end so
// the count is hit exactly. A rejection budget of 10*L attempts guards
// against stalls at extreme settings.
inline MaskSample sample_span_mask(int L, double p, const SpanDistribution& dist, Rng& rng) {
  if (L < 1) throw DomainError("sample_span_mask: L must be >= 1");
  if (p <= 0.0 || p > 1.0) throw DomainError("sample_span_mask: mask ratio must be in (0, 1]");
  dist.validate();

  const int target = exact_mask_count(L, p);
  std::vector<char> covered(static_cast<size_t>(L) + 1, 0);
  std::vector<std::pair<int, int>> spans;
  int num_masked = 0;
  const long long budget = 10LL * L;
  long long attempts = 0;

  while (num_masked < target) {
    if (++attempts > budget) {
      throw SamplingError("sample_span_mask: rejection budget exhausted (L=" + std::to_string(L) +
                          ", p=" + std::to_string(p) + ", masked " + std::to_string(num_masked) + "/" +
                          std::to_string(target) + " after " + std::to_string(attempts - 1) + " attempts)");
    }
    const int start = static_cast<int>(rng.uniform_int(L)) + 1;  // uniform over [1..L]
    if (covered[static_cast<size_t>(start)]) continue;
    const int64_t span_len = dist.sample(rng);
    const int end = static_cast<int>(std::min<int64_t>(start + span_len, L + 1));
    bool overlap = false;
    for (int q = start; q < end && !overlap; ++q) overlap = covered[static_cast<size_t>(q)];
    if (overlap) continue;
    for (int q = start; q < end; ++q) covered[static_cast<size_t>(q)] = 1;
    spans.emplace_back(start, end);
    num_masked += end - start;
  }
  if (num_masked > target) {
    auto& last = spans.back();
    const int excess = num_masked - target;
    last.second -= excess;  // trim the last span from its end
  }
  return detail::finish_sample(L, std::move(spans));
}

// The per-call rejection budget can be exhausted at high ratios with long
// spans (isolated uncovered cells need a start hit plus a length-1 draw).
// Strategy-level callers resample a bounded number of times; each attempt
// still honors the per-call budget.
inline MaskSample sample_span_mask_retrying(int L, double p, const SpanDistribution& dist, Rng& rng,
                                            int max_attempts = 20) {
  for (int attempt = 0; attempt + 1 < max_attempts; ++attempt) {
    try {
      return sample_span_mask(L, p, dist, rng);
    } catch (const SamplingError&) {
    }
  }
  return sample_span_mask(L, p, dist, rng);
}

enum class MixedBranch { full_mask, high_span, moderate_span };

struct MixedMaskResult {
  MaskSample sample;
  MixedBranch branch;
};

// Mixed strategy: 30% unconditional (everything masked), 20% spans at
// p = 0.85, 50% spans at p = 0.5, geometric span lengths with mean 50.
inline MixedMaskResult sample_mixed_mask(int L, Rng& rng) {
  const double r = rng.uniform();
  MixedMaskResult out;
  if (r < 0.3) {
    out.branch = MixedBranch::full_mask;
    std::vector<std::pair<int, int>> all = {{1, L + 1}};
    out.sample = detail::finish_sample(L, std::move(all));
    return out;
  }
  const SpanDistribution geo{SpanDistribution::Kind::geometric, 50.0, 1.0};
  if (r < 0.5) {
    out.branch = MixedBranch::high_span;
    out.sample = sample_span_mask_retrying(L, 0.85, geo, rng);
  } else {
    out.branch = MixedBranch::moderate_span;
    out.sample = sample_span_mask_retrying(L, 0.5, geo, rng);
  }
  return out;
}

// Fractional [a, b) ranges mapped to 1-indexed positions floor(a*L)+1 ..
// floor(b*L). Ranges must stay inside [0, 1] and may not overlap once
// mapped to indices.
inline MaskSample fixed_range_mask(const std::vector<std::pair<double, double>>& ranges, int L) {
  if (L < 1) throw DomainError("fixed_range_mask: L must be >= 1");
  std::vector<char> covered(static_cast<size_t>(L) + 1, 0);
  std::vector<std::pair<int, int>> spans;
  for (auto& [a, b] : ranges) {
    if (a < 0.0 || b > 1.0 || a > b) throw ConfigError("fixed_range_mask: range outside [0,1] or inverted");
    const int lo = static_cast<int>(std::floor(a * L)) + 1;
    const int hi = static_cast<int>(std::floor(b * L));
    if (lo > hi) continue;  // empty after flooring
    for (int q = lo; q <= hi; ++q) {
      if (covered[static_cast<size_t>(q)]) throw ConfigError("fixed_range_mask: overlapping ranges");
      covered[static_cast<size_t>(q)] = 1;
    }
    spans.emplace_back(lo, hi + 1);
  }
  return detail::finish_sample(L, std::move(spans));
}

// Copy of `tokens` with blank positions replaced by the mask token.
inline std::vector<int> apply_mask(const std::vector<int>& tokens, const std::vector<int>& blank_ids,
                                   int mask_token_id) {
  std::vector<int> out = tokens;
  for (int p : blank_ids) {
    if (p < 1 || p > static_cast<int>(tokens.size())) throw DataError("apply_mask: blank id out of range");
    out[static_cast<size_t>(p - 1)] = mask_token_id;
  }
  return out;
}

// Sorted complement of a sorted position set within [1..L].
inline std::vector<int> complement_positions(const std::vector<int>& sorted_set, int L) {
  std::vector<int> out;
  size_t i = 0;
  for (int p = 1; p <= L; ++p) {
    if (i < sorted_set.size() && sorted_set[i] == p) {
      ++i;
    } else {
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace tracformer
