#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "tracformer/checkpoint.hpp"
#include "tracformer/masking.hpp"
#include "tracformer/model.hpp"
#include "tracformer/train.hpp"

using namespace tracformer;
using tftest::random_tokens;

namespace {

ModelConfig tiny_config(int T = 16, int L = 4, int d = 16, int H = 2, int V = 20) {
  ModelConfig c;
  c.T_max = T;
  c.L = L;
  c.d = d;
  c.n_heads = H;
  c.N_max = 4;
  c.V = V;
  c.mask_token_id = 1;
  return c;
}

// Positions (1-indexed) whose single-token perturbation changes the given
// output row/feature. `probe` returns the feature vector to compare.
template <typename Probe>
std::vector<int> sensitive_positions(const std::vector<int>& base_tokens, int alt_token, const Probe& probe) {
  const std::vector<double> base = probe(base_tokens);
  std::vector<int> out;
  for (int p = 1; p <= static_cast<int>(base_tokens.size()); ++p) {
    std::vector<int> mod = base_tokens;
    mod[static_cast<size_t>(p - 1)] = mod[static_cast<size_t>(p - 1)] == alt_token ? alt_token + 1 : alt_token;
    const std::vector<double> got = probe(mod);
    bool changed = false;
    for (size_t i = 0; i < base.size() && !changed; ++i) changed = base[i] != got[i];
    if (changed) out.push_back(p);
  }
  return out;
}

std::vector<double> row_of(const Tensor<double>& t, int row) {
  std::vector<double> out(static_cast<size_t>(t.dim(1)));
  for (int j = 0; j < t.dim(1); ++j) out[static_cast<size_t>(j)] = t(row, j);
  return out;
}

}  // namespace

TEST(Init, DeterministicUnderSeed) {
  const ModelConfig c = tiny_config();
  Model<double> a = init_parameters<double>(c, 7);
  Model<double> b = init_parameters<double>(c, 7);
  Model<double> other = init_parameters<double>(c, 8);
  auto pa = a.parameters(), pb = b.parameters(), po = other.parameters();
  bool any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    for (size_t j = 0; j < pa[i].second->size(); ++j) {
      EXPECT_EQ((*pa[i].second)[j], (*pb[i].second)[j]);
      any_diff = any_diff || (*pa[i].second)[j] != (*po[i].second)[j];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(Init, GainsOnesBiasesZeros) {
  Model<double> m = init_parameters<double>(tiny_config(), 3);
  EXPECT_EQ(m.enc[0].ln1_g[0], 1.0);
  EXPECT_EQ(m.enc[0].ln1_b[0], 0.0);
  EXPECT_EQ(m.dec[1].ln3_g[2], 1.0);
  EXPECT_EQ(m.enc[0].bq[0], 0.0);
  EXPECT_NE(m.enc[0].wq[0], 0.0);
}

TEST(Init, ParameterCountMatchesClosedForm) {
  ModelConfig c = tiny_config(8, 3, 32, 4, 64);
  Model<double> m = init_parameters<double>(c, 1);
  EXPECT_EQ(m.parameter_count(), parameter_count_formula(c));
  // 2 V d + V + L (24 d^2 + 28 d) = 2*64*32 + 64 + 3*(24*1024 + 28*32)
  EXPECT_EQ(parameter_count_formula(c), 2u * 64 * 32 + 64 + 3u * (24 * 1024 + 28 * 32));
}

TEST(Config, ValidationRules) {
  ModelConfig c = tiny_config();
  c.d = 18;  // not divisible by heads=2 -> dh odd
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.L = 3;  // < ceil(log2 16)
  EXPECT_THROW(c.validate(), ConfigError);
  c.allow_shallow = true;
  EXPECT_NO_THROW(c.validate());
  c = tiny_config();
  c.N_max = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, ScopeSoundnessExact) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 11);
  const ModelMasks masks = build_model_masks(c, c.T_max);
  Rng rng(13);
  const std::vector<int> base = random_tokens(c.T_max, c.V, rng, 3);

  for (EncoderSide side : {EncoderSide::prefix, EncoderSide::suffix}) {
    for (int l = 0; l <= c.L; ++l) {
      for (int t = 1; t <= c.T_max; ++t) {
        auto probe = [&](const std::vector<int>& toks) {
          return row_of(encoder_forward(m, toks, side, masks).levels[static_cast<size_t>(l)], t - 1);
        };
        const std::vector<int> sens = sensitive_positions(base, 3, probe);
        const std::vector<int> scope =
            side == EncoderSide::prefix ? prefix_scope(t, l, c.T_max) : suffix_scope(t, l, c.T_max);
        // every sensitive position must lie inside the scope
        for (int p : sens)
          EXPECT_TRUE(std::binary_search(scope.begin(), scope.end(), p))
              << "leak at side=" << (side == EncoderSide::prefix ? "prefix" : "suffix") << " l=" << l << " t=" << t
              << " p=" << p;
      }
    }
  }
}

TEST(Encoder, DenseAndSparseMasksAgreeOnMembership) {
  // same weights under dense vs subsampled masks: identical sensitivity
  // sets (the receptive field), though the feature values differ
  const ModelConfig c = tiny_config(16, 4, 16, 2, 20);
  Model<double> m = init_parameters<double>(c, 17);
  ModelMasks sparse = build_model_masks(c, c.T_max);
  ModelConfig dense_cfg = c;
  dense_cfg.N_max = 1 << c.L;  // wide enough that every window stays dense
  ModelMasks dense = build_model_masks(dense_cfg, c.T_max);
  Rng rng(19);
  const std::vector<int> base = random_tokens(c.T_max, c.V, rng, 3);

  const int l = c.L;
  for (int t = 1; t <= c.T_max; t += 3) {
    auto probe_sparse = [&](const std::vector<int>& toks) {
      return row_of(encoder_forward(m, toks, EncoderSide::prefix, sparse).levels[static_cast<size_t>(l)], t - 1);
    };
    auto probe_dense = [&](const std::vector<int>& toks) {
      return row_of(encoder_forward(m, toks, EncoderSide::prefix, dense).levels[static_cast<size_t>(l)], t - 1);
    };
    EXPECT_EQ(sensitive_positions(base, 3, probe_sparse), sensitive_positions(base, 3, probe_dense)) << "t=" << t;
  }
}

TEST(Encoder, SingleTokenSequence) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 23);
  const ModelMasks masks = build_model_masks(c, 1);
  const EncoderStack<double> s = encoder_forward(m, {5}, EncoderSide::prefix, masks);
  EXPECT_EQ(static_cast<int>(s.levels.size()), c.L + 1);
  for (const auto& level : s.levels) EXPECT_EQ(level.dim(0), 1);
}

TEST(Encoder, TokenOutOfRangeRejected) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 29);
  const ModelMasks masks = build_model_masks(c, 2);
  EXPECT_THROW(encoder_forward(m, {0, c.V}, EncoderSide::prefix, masks), DataError);
}

TEST(Decoder, OutputLocalAndFiniteAtEdges) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 31);
  Rng rng(37);
  const std::vector<int> x = random_tokens(c.T_max, c.V, rng, 3);

  // logits at t never see input token t through either encoder
  auto probe_t = [&](int t) {
    return [&, t](const std::vector<int>& toks) {
      return row_of(tracformer_forward(m, toks, toks), t - 1);
    };
  };
  for (int t = 1; t <= c.T_max; ++t) {
    const std::vector<int> sens = sensitive_positions(x, 3, probe_t(t));
    EXPECT_FALSE(std::binary_search(sens.begin(), sens.end(), t)) << "t=" << t;
  }

  // position 1 has no prefix context at any layer; logits must be finite
  const Tensor<double> logits = tracformer_forward(m, x, x);
  for (int j = 0; j < c.V; ++j) EXPECT_TRUE(std::isfinite(logits(0, j)));
}

TEST(Model, CarInformationContract) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 41);
  Rng rng(43);
  const std::vector<int> x = random_tokens(c.T_max, c.V, rng, 3);
  const std::vector<int> context = {3, 4, 9, 14};  // C
  const std::vector<int> blanks = complement_positions(context, c.T_max);

  auto car_probe = [&](int t) {
    return [&, t](const std::vector<int>& toks) {
      const std::vector<int> suffix = apply_mask(toks, blanks, c.mask_token_id);
      return row_of(tracformer_forward(m, toks, suffix), t - 1);
    };
  };
  std::vector<char> in_c(static_cast<size_t>(c.T_max) + 1, 0);
  for (int p : context) in_c[static_cast<size_t>(p)] = 1;
  for (int t = 1; t <= c.T_max; ++t) {
    const std::vector<int> sens = sensitive_positions(x, 3, car_probe(t));
    for (int p : sens) {
      const bool allowed = (p < t) || (in_c[static_cast<size_t>(p)] && p > t);
      EXPECT_TRUE(allowed) << "CAR leak at t=" << t << " from p=" << p;
    }
  }
}

TEST(Model, AcInformationContract) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 47);
  Rng rng(53);
  const std::vector<int> x = random_tokens(c.T_max, c.V, rng, 3);
  const std::vector<int> context = {1, 5, 6, 12, 16};
  const std::vector<int> blanks = complement_positions(context, c.T_max);

  auto ac_probe = [&](int t) {
    return [&, t](const std::vector<int>& toks) {
      const std::vector<int> corrupted = apply_mask(toks, blanks, c.mask_token_id);
      return row_of(tracformer_forward(m, corrupted, corrupted), t - 1);
    };
  };
  std::vector<char> in_c(static_cast<size_t>(c.T_max) + 1, 0);
  for (int p : context) in_c[static_cast<size_t>(p)] = 1;
  for (int t = 1; t <= c.T_max; ++t) {
    const std::vector<int> sens = sensitive_positions(x, 3, ac_probe(t));
    for (int p : sens) EXPECT_TRUE(in_c[static_cast<size_t>(p)] && p != t) << "AC leak at t=" << t << " from p=" << p;
  }
}

TEST(Model, AllMaskInputGivesPositionalMarginals) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 59);
  const std::vector<int> all_mask(static_cast<size_t>(c.T_max), c.mask_token_id);
  const Tensor<double> logits = tracformer_forward(m, all_mask, all_mask);
  EXPECT_EQ(logits.dim(0), c.T_max);
  EXPECT_EQ(logits.dim(1), c.V);
  // token-independent: perturbing nothing to perturb; just finite and stable
  const Tensor<double> again = tracformer_forward(m, all_mask, all_mask);
  for (size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits[i], again[i]);
}

TEST(Model, WeightSharingBetweenEncoders) {
  const ModelConfig c = tiny_config();
  Model<double> m = init_parameters<double>(c, 61);
  const ModelMasks masks = build_model_masks(c, c.T_max);
  Rng rng(67);
  const std::vector<int> x = random_tokens(c.T_max, c.V, rng, 3);

  const Tensor<double> p0 = encoder_forward(m, x, EncoderSide::prefix, masks).levels.back();
  const Tensor<double> s0 = encoder_forward(m, x, EncoderSide::suffix, masks).levels.back();
  m.enc[0].wq(0, 0) += 0.5;  // single storage: both sides must move
  const Tensor<double> p1 = encoder_forward(m, x, EncoderSide::prefix, masks).levels.back();
  const Tensor<double> s1 = encoder_forward(m, x, EncoderSide::suffix, masks).levels.back();

  bool prefix_changed = false, suffix_changed = false;
  for (size_t i = 0; i < p0.size(); ++i) prefix_changed = prefix_changed || p0[i] != p1[i];
  for (size_t i = 0; i < s0.size(); ++i) suffix_changed = suffix_changed || s0[i] != s1[i];
  EXPECT_TRUE(prefix_changed);
  EXPECT_TRUE(suffix_changed);
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny_config(8, 3, 16, 2, 12);
  Model<double> m = init_parameters<double>(c, 71);
  Rng rng(73);
  const std::vector<int> x = random_tokens(c.T_max, c.V, rng, 3);
  const std::vector<int> context = {2, 5};

  auto params = m.parameters();
  Tape<double> tape;
  std::vector<Tensor<double>> analytic;
  {
    TapeGuard<double> guard(tape);
    for (auto& [name, t] : params) tape.watch(*t);
    tape.backward(car_loss(m, x, context, 0));
  }
  auto loss_fn = [&]() { return car_loss(m, x, context, 0)[0]; };

  Rng pick(79);
  const double h = 1e-5;
  int checked = 0;
  double worst = 0;
  while (checked < 150) {
    const size_t pi = static_cast<size_t>(pick.uniform_int(static_cast<int64_t>(params.size())));
    Tensor<double>& t = *params[pi].second;
    const size_t j = static_cast<size_t>(pick.uniform_int(static_cast<int64_t>(t.size())));
    const double saved = t[j];
    t[j] = saved + h;
    const double fp = loss_fn();
    t[j] = saved - h;
    const double fm = loss_fn();
    t[j] = saved;
    const double fd = (fp - fm) / (2 * h);
    worst = std::max(worst, tftest::rel_err(tape.grad(*params[pi].second)[j], fd));
    ++checked;
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  namespace fs = std::filesystem;
  const ModelConfig c = tiny_config();
  Model<float> m = init_parameters<float>(c, 83);
  const std::string dir = testing::TempDir();
  const std::string p1 = dir + "/ckpt_a.trc", p2 = dir + "/ckpt_b.trc";
  save_checkpoint(p1, m);
  Model<float> loaded = load_checkpoint<float>(p1);
  save_checkpoint(p2, loaded);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  ASSERT_FALSE(b1.empty());
  EXPECT_EQ(b1, b2);

  auto pa = m.parameters(), pb = loaded.parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    for (size_t j = 0; j < pa[i].second->size(); ++j) EXPECT_EQ((*pa[i].second)[j], (*pb[i].second)[j]);
}

TEST(Checkpoint, RejectsGarbage) {
  const std::string path = testing::TempDir() + "/not_a_ckpt.trc";
  std::ofstream(path) << "hello";
  EXPECT_THROW(load_checkpoint<float>(path), DataError);
  EXPECT_THROW(load_checkpoint<float>(testing::TempDir() + "/missing.trc"), DataError);
}
