#include <gtest/gtest.h>

#include <cmath>

#include "tracformer/masks.hpp"

using namespace tracformer;

using IntVec = std::vector<int>;

TEST(Scopes, PrefixExamples) {
  EXPECT_EQ(prefix_scope(5, 2, 8), (IntVec{2, 3, 4, 5}));
  EXPECT_EQ(prefix_scope(1, 3, 8), (IntVec{1}));
  EXPECT_EQ(prefix_scope(3, 0, 8), (IntVec{3}));
}

TEST(Scopes, SuffixExamples) {
  EXPECT_EQ(suffix_scope(5, 2, 8), (IntVec{5, 6, 7, 8}));
  EXPECT_EQ(suffix_scope(8, 4, 8), (IntVec{8}));
  EXPECT_EQ(suffix_scope(4, 1, 8), (IntVec{4, 5}));
}

TEST(Scopes, OutOfRangeRejected) {
  EXPECT_THROW(prefix_scope(0, 1, 8), DomainError);
  EXPECT_THROW(prefix_scope(9, 1, 8), DomainError);
  EXPECT_THROW(suffix_scope(0, 1, 8), DomainError);
}

TEST(Scopes, PrefixMonotoneInLayer) {
  for (int t = 1; t <= 16; ++t)
    for (int l = 0; l < 5; ++l) {
      const IntVec lo = prefix_scope(t, l, 16);
      const IntVec hi = prefix_scope(t, l + 1, 16);
      EXPECT_TRUE(std::includes(hi.begin(), hi.end(), lo.begin(), lo.end()));
    }
}

TEST(SparseMasks, PrefixExamples) {
  // narrow window (2^0 = 1 < N_max): dense
  EXPECT_EQ(sparse_prefix_mask(1, 8, 4).row(5), (IntVec{4, 5}));
  // wide window, N_max = 4: a = 4, b = 20, offsets 0, 16/3, 32/3, 16
  EXPECT_EQ(sparse_prefix_mask(5, 64, 4).row(20), (IntVec{4, 9, 15, 20}));
  // near the left boundary only b survives clipping
  EXPECT_EQ(sparse_prefix_mask(5, 64, 4).row(3), (IntVec{3}));
}

TEST(SparseMasks, SuffixExamples) {
  EXPECT_EQ(sparse_suffix_mask(1, 8, 4).row(5), (IntVec{5, 6}));
  EXPECT_EQ(sparse_suffix_mask(5, 64, 4).row(4), (IntVec{4, 9, 15, 20}));
  EXPECT_EQ(sparse_suffix_mask(3, 8, 4).row(8), (IntVec{8}));
}

TEST(SparseMasks, EndpointsAlwaysPresent) {
  for (int n_max : {2, 4, 8}) {
    for (int l = 1; l <= 6; ++l) {
      MaskLayout lay = sparse_prefix_mask(l, 64, n_max);
      for (int t = 1; t <= 64; ++t) {
        const auto& r = lay.row(t);
        const long long a = t - (1LL << (l - 1));
        EXPECT_EQ(r.back(), t);  // b = t always in range
        if (a >= 1) EXPECT_EQ(r.front(), static_cast<int>(a));
      }
    }
  }
}

TEST(SparseMasks, BadNmaxRejected) {
  EXPECT_THROW(sparse_prefix_mask(2, 8, 1), ConfigError);
  EXPECT_THROW(sparse_suffix_mask(2, 8, 0), ConfigError);
}

TEST(SparseMasks, RowsAreValidLayouts) {
  for (int n_max : {2, 4, 16}) {
    sparse_prefix_mask(6, 50, n_max).validate();
    sparse_suffix_mask(6, 50, n_max).validate();
  }
}

TEST(DecoderMasks, PrefixExamples) {
  EXPECT_EQ(decoder_prefix_mask(4, 4, 8).row(5), (IntVec{2, 4}));   // stride 2
  EXPECT_EQ(decoder_prefix_mask(1, 4, 8).row(5), (IntVec{4}));     // stride 16
  EXPECT_TRUE(decoder_prefix_mask(2, 4, 8).row(1).empty());        // no preceding token
}

TEST(DecoderMasks, SuffixExamples) {
  EXPECT_EQ(decoder_suffix_mask(4, 4, 8).row(5), (IntVec{6, 8}));
  EXPECT_TRUE(decoder_suffix_mask(3, 4, 8).row(8).empty());
  EXPECT_EQ(decoder_suffix_mask(1, 4, 32).row(5), (IntVec{6, 22}));  // t' == 6 mod 16
}

TEST(DecoderMasks, StrictSidedness) {
  const int L = 5, T = 32;
  for (int l = 1; l <= L; ++l) {
    MaskLayout pre = decoder_prefix_mask(l, L, T);
    MaskLayout suf = decoder_suffix_mask(l, L, T);
    for (int t = 1; t <= T; ++t) {
      for (int tp : pre.row(t)) EXPECT_LT(tp, t);
      for (int tp : suf.row(t)) EXPECT_GT(tp, t);
    }
  }
}

TEST(EncoderMasks, Sidedness) {
  for (int l = 1; l <= 6; ++l) {
    MaskLayout pre = sparse_prefix_mask(l, 48, 8);
    MaskLayout suf = sparse_suffix_mask(l, 48, 8);
    for (int t = 1; t <= 48; ++t) {
      for (int tp : pre.row(t)) EXPECT_LE(tp, t);
      for (int tp : suf.row(t)) EXPECT_GE(tp, t);
    }
  }
}

TEST(ReceptiveField, DenseLayoutsReproduceScopes) {
  const int T = 32;
  std::vector<MaskLayout> layouts;
  for (int l = 1; l <= 5; ++l) layouts.push_back(dense_prefix_mask(l, T));
  const auto levels = receptive_field_oracle(layouts);
  for (int l = 0; l <= 5; ++l)
    for (int t = 1; t <= T; ++t) EXPECT_EQ(levels[l].scope(t), prefix_scope(t, l, T));
}

TEST(ReceptiveField, SparseLayoutsReproduceScopesExactly) {
  // the boundary-token union identity, tested over the full grid
  for (int T : {8, 16, 32, 64}) {
    const int l_top = static_cast<int>(std::ceil(std::log2(T))) + 1;
    for (int n_max : {2, 4, 8, 16}) {
      std::vector<MaskLayout> pre, suf;
      for (int l = 1; l <= l_top; ++l) {
        pre.push_back(sparse_prefix_mask(l, T, n_max));
        suf.push_back(sparse_suffix_mask(l, T, n_max));
      }
      const auto pre_levels = receptive_field_oracle(pre);
      const auto suf_levels = receptive_field_oracle(suf);
      for (int l = 0; l <= l_top; ++l)
        for (int t = 1; t <= T; ++t) {
          EXPECT_EQ(pre_levels[l].scope(t), prefix_scope(t, l, T));
          EXPECT_EQ(suf_levels[l].scope(t), suffix_scope(t, l, T));
        }
    }
  }
}

TEST(ReceptiveField, SelfOnlyLayoutKeepsSingletonScope) {
  MaskLayout lay;
  lay.T = 4;
  lay.rows = {{1}, {2}, {3}, {4}};
  const auto levels = receptive_field_oracle({lay});
  for (int t = 1; t <= 4; ++t) EXPECT_EQ(levels[1].scope(t), (IntVec{t}));
}

TEST(Population, EncoderBound) {
  for (int l = 1; l <= 10; ++l) {
    EXPECT_LE(mask_population(sparse_prefix_mask(l, 1024, 8)), 1024u * 8u);
    EXPECT_LE(mask_population(sparse_suffix_mask(l, 1024, 8)), 1024u * 8u);
  }
}

TEST(Population, DecoderStrideBoundAndCausalCount) {
  const int L = 6, T = 64;
  for (int l = 1; l <= L; ++l) {
    const size_t stride = size_t{1} << (L - l + 1);
    const size_t bound = T * ((T + stride - 1) / stride);
    EXPECT_LE(mask_population(decoder_prefix_mask(l, L, T)), bound);
    EXPECT_LE(mask_population(decoder_suffix_mask(l, L, T)), bound);
  }
  EXPECT_EQ(mask_population(causal_mask(10)), 55u);
}

TEST(Csv, LayoutDump) {
  MaskLayout lay;
  lay.T = 3;
  lay.rows = {{1}, {1, 2}, {2, 3}};
  EXPECT_EQ(layout_to_csv(lay, 2), "2,1,1\n2,2,1\n2,2,2\n2,3,2\n2,3,3\n");
}
