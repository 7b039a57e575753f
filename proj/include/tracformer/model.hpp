#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tracformer/error.hpp"
#include "tracformer/masks.hpp"
#include "tracformer/rng.hpp"
#include "tracformer/tensor.hpp"

namespace tracformer {

inline int ceil_log2(int n) {
  int l = 0;
  while ((1LL << l) < n) ++l;
  return l;
}

struct ModelConfig {
  int T_max = 64;
  int L = 6;
  int d = 64;
  int n_heads = 4;
  int N_max = 8;
  int V = 0;
  int mask_token_id = 1;
  double dropout_rate = 0.0;
  // L < ceil(log2 T_max) means no encoder feature covers the whole input;
  // rejected unless explicitly overridden.
  bool allow_shallow = false;

  void validate() const {
    if (T_max < 1) throw ConfigError("config: T_max must be positive");
    if (L < 1) throw ConfigError("config: L must be positive");
    if (d < 1 || n_heads < 1 || d % n_heads != 0) throw ConfigError("config: d must be a multiple of n_heads");
    if ((d / n_heads) % 2 != 0) throw ConfigError("config: head dimension must be even (rotary pairs)");
    if (N_max < 2) throw ConfigError("config: N_max must be >= 2");
    if (V < 1) throw ConfigError("config: vocabulary size not set");
    if (mask_token_id < 0 || mask_token_id >= V) throw ConfigError("config: mask_token_id out of range");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("config: dropout_rate out of [0, 1)");
    if (!allow_shallow && L < ceil_log2(T_max))
      throw ConfigError("config: L < ceil(log2 T_max); no full-context feature exists. Set allow_shallow to force.");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"T_max", T_max},       {"L", L},
                          {"d", d},               {"n_heads", n_heads},
                          {"N_max", N_max},       {"V", V},
                          {"mask_token_id", mask_token_id}, {"dropout_rate", dropout_rate},
                          {"allow_shallow", allow_shallow}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.T_max = j.at("T_max").get<int>();
    c.L = j.at("L").get<int>();
    c.d = j.at("d").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.N_max = j.at("N_max").get<int>();
    c.V = j.at("V").get<int>();
    c.mask_token_id = j.at("mask_token_id").get<int>();
    c.dropout_rate = j.value("dropout_rate", 0.0);
    c.allow_shallow = j.value("allow_shallow", false);
    return c;
  }
};

// Closed-form parameter count:
//   embedding V*d + head (d*V + V)
//   per encoder layer: attention 4(d^2+d), FFN 8d^2+5d, two norms 4d
//   per decoder layer: the same plus a third norm (2d)
// total = 2 V d + V + L (24 d^2 + 28 d)
inline size_t parameter_count_formula(const ModelConfig& c) {
  const size_t d = static_cast<size_t>(c.d), V = static_cast<size_t>(c.V), L = static_cast<size_t>(c.L);
  return 2 * V * d + V + L * (24 * d * d + 28 * d);
}

enum class EncoderSide { prefix, suffix };

// All four mask families for one sequence length.
struct ModelMasks {
  std::vector<MaskLayout> enc_prefix, enc_suffix, dec_prefix, dec_suffix;  // index l-1
};

inline ModelMasks build_model_masks(const ModelConfig& c, int T) {
  ModelMasks m;
  for (int l = 1; l <= c.L; ++l) {
    m.enc_prefix.push_back(sparse_prefix_mask(l, T, c.N_max));
    m.enc_suffix.push_back(sparse_suffix_mask(l, T, c.N_max));
    m.dec_prefix.push_back(decoder_prefix_mask(l, c.L, T));
    m.dec_suffix.push_back(decoder_suffix_mask(l, c.L, T));
  }
  return m;
}

template <typename S>
struct Model {
  struct EncoderLayer {
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> w1, b1, w2, b2;
  };
  // Cross-attention layer: one norm for the decoder stream, one shared norm
  // for the encoder features of both stacks, one before the FFN.
  struct DecoderLayer {
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> w1, b1, w2, b2;
  };

  ModelConfig config;
  Tensor<S> tok_embed;                  // [V x d]
  std::vector<EncoderLayer> enc;        // shared by the prefix and suffix encoders
  std::vector<DecoderLayer> dec;
  Tensor<S> head_w, head_b;             // [d x V], [V]

  // Stable name -> tensor registry; ordering defines checkpoint layout and
  // initialization order.
  std::vector<std::pair<std::string, Tensor<S>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.emplace_back("tok_embed.weight", &tok_embed);
    for (size_t l = 0; l < enc.size(); ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      auto& e = enc[l];
      out.emplace_back(p + "ln1.gain", &e.ln1_g);
      out.emplace_back(p + "ln1.bias", &e.ln1_b);
      out.emplace_back(p + "ln2.gain", &e.ln2_g);
      out.emplace_back(p + "ln2.bias", &e.ln2_b);
      out.emplace_back(p + "q.weight", &e.wq);
      out.emplace_back(p + "q.bias", &e.bq);
      out.emplace_back(p + "k.weight", &e.wk);
      out.emplace_back(p + "k.bias", &e.bk);
      out.emplace_back(p + "v.weight", &e.wv);
      out.emplace_back(p + "v.bias", &e.bv);
      out.emplace_back(p + "o.weight", &e.wo);
      out.emplace_back(p + "o.bias", &e.bo);
      out.emplace_back(p + "ffn1.weight", &e.w1);
      out.emplace_back(p + "ffn1.bias", &e.b1);
      out.emplace_back(p + "ffn2.weight", &e.w2);
      out.emplace_back(p + "ffn2.bias", &e.b2);
    }
    for (size_t l = 0; l < dec.size(); ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      auto& dl = dec[l];
      out.emplace_back(p + "ln1.gain", &dl.ln1_g);
      out.emplace_back(p + "ln1.bias", &dl.ln1_b);
      out.emplace_back(p + "ln2.gain", &dl.ln2_g);
      out.emplace_back(p + "ln2.bias", &dl.ln2_b);
      out.emplace_back(p + "ln3.gain", &dl.ln3_g);
      out.emplace_back(p + "ln3.bias", &dl.ln3_b);
      out.emplace_back(p + "q.weight", &dl.wq);
      out.emplace_back(p + "q.bias", &dl.bq);
      out.emplace_back(p + "k.weight", &dl.wk);
      out.emplace_back(p + "k.bias", &dl.bk);
      out.emplace_back(p + "v.weight", &dl.wv);
      out.emplace_back(p + "v.bias", &dl.bv);
      out.emplace_back(p + "o.weight", &dl.wo);
      out.emplace_back(p + "o.bias", &dl.bo);
      out.emplace_back(p + "ffn1.weight", &dl.w1);
      out.emplace_back(p + "ffn1.bias", &dl.b1);
      out.emplace_back(p + "ffn2.weight", &dl.w2);
      out.emplace_back(p + "ffn2.bias", &dl.b2);
    }
    out.emplace_back("head.weight", &head_w);
    out.emplace_back("head.bias", &head_b);
    return out;
  }

  size_t parameter_count() {
    size_t n = 0;
    for (auto& [name, t] : parameters()) n += t->size();
    return n;
  }
};

namespace detail {

template <typename S>
void allocate_model(Model<S>& m) {
  const auto& c = m.config;
  const int d = c.d;
  m.tok_embed = Tensor<S>({c.V, d});
  m.enc.resize(static_cast<size_t>(c.L));
  m.dec.resize(static_cast<size_t>(c.L));
  for (auto& e : m.enc) {
    e.ln1_g = Tensor<S>({d});
    e.ln1_b = Tensor<S>({d});
    e.ln2_g = Tensor<S>({d});
    e.ln2_b = Tensor<S>({d});
    e.wq = Tensor<S>({d, d});
    e.bq = Tensor<S>({d});
    e.wk = Tensor<S>({d, d});
    e.bk = Tensor<S>({d});
    e.wv = Tensor<S>({d, d});
    e.bv = Tensor<S>({d});
    e.wo = Tensor<S>({d, d});
    e.bo = Tensor<S>({d});
    e.w1 = Tensor<S>({d, 4 * d});
    e.b1 = Tensor<S>({4 * d});
    e.w2 = Tensor<S>({4 * d, d});
    e.b2 = Tensor<S>({d});
  }
  for (auto& dl : m.dec) {
    dl.ln1_g = Tensor<S>({d});
    dl.ln1_b = Tensor<S>({d});
    dl.ln2_g = Tensor<S>({d});
    dl.ln2_b = Tensor<S>({d});
    dl.ln3_g = Tensor<S>({d});
    dl.ln3_b = Tensor<S>({d});
    dl.wq = Tensor<S>({d, d});
    dl.bq = Tensor<S>({d});
    dl.wk = Tensor<S>({d, d});
    dl.bk = Tensor<S>({d});
    dl.wv = Tensor<S>({d, d});
    dl.bv = Tensor<S>({d});
    dl.wo = Tensor<S>({d, d});
    dl.bo = Tensor<S>({d});
    dl.w1 = Tensor<S>({d, 4 * d});
    dl.b1 = Tensor<S>({4 * d});
    dl.w2 = Tensor<S>({4 * d, d});
    dl.b2 = Tensor<S>({d});
  }
  m.head_w = Tensor<S>({d, c.V});
  m.head_b = Tensor<S>({c.V});
}

inline bool name_is_gain(const std::string& n) { return n.size() > 5 && n.compare(n.size() - 5, 5, ".gain") == 0; }
inline bool name_is_bias(const std::string& n) { return n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0; }

}  // namespace detail

// normal(0, 0.02) for weights, zeros for biases, ones for norm gains;
// a pure function of (config, seed).
template <typename S>
Model<S> init_parameters(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Model<S> m;
  m.config = config;
  detail::allocate_model(m);
  Rng rng(mix_seed(seed, 0x1717, 0));
  for (auto& [name, t] : m.parameters()) {
    if (detail::name_is_gain(name)) {
      for (size_t i = 0; i < t->size(); ++i) (*t)[i] = S{1};
    } else if (detail::name_is_bias(name)) {
      // already zero
    } else {
      for (size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<S>(rng.normal() * 0.02);
    }
  }
  return m;
}

template <typename S>
struct EncoderStack {
  std::vector<Tensor<S>> levels;  // levels[0] = token embedding, levels[l] = layer-l output
};

namespace detail {

template <typename S>
Tensor<S> maybe_dropout(const Tensor<S>& x, double rate, Rng* rng) {
  if (rate == 0.0 || rng == nullptr) return x;
  return dropout(x, rate, *rng);
}

inline std::vector<int> absolute_positions(int T) {
  std::vector<int> pos(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) pos[t] = t + 1;
  return pos;
}

}  // namespace detail

// One encoder pass under the side's sparse masks. Both sides read the same
// layer weights; only inputs and layouts differ.
template <typename S>
EncoderStack<S> encoder_forward(const Model<S>& model, const std::vector<int>& tokens, EncoderSide side,
                                const ModelMasks& masks, Rng* dropout_rng = nullptr) {
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw ShapeError("encoder_forward: empty input");
  if (T > model.config.T_max) throw ShapeError("encoder_forward: sequence longer than T_max");
  const auto pos = detail::absolute_positions(T);
  const double drop = model.config.dropout_rate;

  EncoderStack<S> stack;
  Tensor<S> h = embedding_lookup(model.tok_embed, tokens);
  stack.levels.push_back(h);
  for (int l = 1; l <= model.config.L; ++l) {
    const auto& e = model.enc[static_cast<size_t>(l - 1)];
    const MaskLayout& lay =
        side == EncoderSide::prefix ? masks.enc_prefix[static_cast<size_t>(l - 1)] : masks.enc_suffix[static_cast<size_t>(l - 1)];
    Tensor<S> xn = layer_norm(h, e.ln1_g, e.ln1_b);
    Tensor<S> q = rotary_apply(linear(xn, e.wq, e.bq), pos, model.config.n_heads);
    Tensor<S> k = rotary_apply(linear(xn, e.wk, e.bk), pos, model.config.n_heads);
    Tensor<S> v = linear(xn, e.wv, e.bv);
    Tensor<S> att = linear(sparse_attention(q, k, v, lay, model.config.n_heads), e.wo, e.bo);
    Tensor<S> hhat = add(h, detail::maybe_dropout(att, drop, dropout_rng));
    Tensor<S> f = linear(gelu(linear(layer_norm(hhat, e.ln2_g, e.ln2_b), e.w1, e.b1)), e.w2, e.b2);
    h = add(hhat, detail::maybe_dropout(f, drop, dropout_rng));
    stack.levels.push_back(h);
  }
  return stack;
}

// Cross-attention-only decoder. Layer l reads encoder level L-l+1, so the
// first decoder layer sees the widest-scope features. The prefix and suffix
// streams are two mask-restricted attention evaluations over each stack's
// projected keys/values (same projection weights), summed before the
// residual add. Decoder input features are zero.
template <typename S>
Tensor<S> decoder_forward(const Model<S>& model, const EncoderStack<S>& prefix_stack,
                          const EncoderStack<S>& suffix_stack, const ModelMasks& masks, Rng* dropout_rng = nullptr) {
  const int L = model.config.L;
  if (static_cast<int>(prefix_stack.levels.size()) != L + 1 || static_cast<int>(suffix_stack.levels.size()) != L + 1)
    throw ShapeError("decoder_forward: stack depth mismatch");
  const int T = prefix_stack.levels[0].dim(0);
  if (suffix_stack.levels[0].dim(0) != T) throw ShapeError("decoder_forward: stack length mismatch");
  const auto pos = detail::absolute_positions(T);
  const int H = model.config.n_heads;
  const double drop = model.config.dropout_rate;

  Tensor<S> h({T, model.config.d});  // zero decoder input
  for (int l = 1; l <= L; ++l) {
    const auto& dl = model.dec[static_cast<size_t>(l - 1)];
    const Tensor<S>& pf_raw = prefix_stack.levels[static_cast<size_t>(L - l + 1)];
    const Tensor<S>& sf_raw = suffix_stack.levels[static_cast<size_t>(L - l + 1)];
    Tensor<S> xn = layer_norm(h, dl.ln1_g, dl.ln1_b);
    Tensor<S> q = rotary_apply(linear(xn, dl.wq, dl.bq), pos, H);
    Tensor<S> pf = layer_norm(pf_raw, dl.ln2_g, dl.ln2_b);
    Tensor<S> sf = layer_norm(sf_raw, dl.ln2_g, dl.ln2_b);
    Tensor<S> kp = rotary_apply(linear(pf, dl.wk, dl.bk), pos, H);
    Tensor<S> vp = linear(pf, dl.wv, dl.bv);
    Tensor<S> ks = rotary_apply(linear(sf, dl.wk, dl.bk), pos, H);
    Tensor<S> vs = linear(sf, dl.wv, dl.bv);
    Tensor<S> ctx = add(sparse_attention(q, kp, vp, masks.dec_prefix[static_cast<size_t>(l - 1)], H),
                        sparse_attention(q, ks, vs, masks.dec_suffix[static_cast<size_t>(l - 1)], H));
    Tensor<S> att = linear(ctx, dl.wo, dl.bo);
    Tensor<S> hhat = add(h, detail::maybe_dropout(att, drop, dropout_rng));
    Tensor<S> f = linear(gelu(linear(layer_norm(hhat, dl.ln3_g, dl.ln3_b), dl.w1, dl.b1)), dl.w2, dl.b2);
    h = add(hhat, detail::maybe_dropout(f, drop, dropout_rng));
  }
  return linear(h, model.head_w, model.head_b);
}

// Full forward: shared-weight prefix/suffix encoders plus the decoder.
// CAR mode feeds the uncorrupted sequence to the prefix encoder and the
// mask-corrupted one to the suffix encoder; AC mode corrupts both.
template <typename S>
Tensor<S> tracformer_forward(const Model<S>& model, const std::vector<int>& prefix_tokens,
                             const std::vector<int>& suffix_tokens, Rng* dropout_rng = nullptr) {
  if (prefix_tokens.size() != suffix_tokens.size()) throw ShapeError("tracformer_forward: length mismatch");
  const ModelMasks masks = build_model_masks(model.config, static_cast<int>(prefix_tokens.size()));
  EncoderStack<S> ps = encoder_forward(model, prefix_tokens, EncoderSide::prefix, masks, dropout_rng);
  EncoderStack<S> ss = encoder_forward(model, suffix_tokens, EncoderSide::suffix, masks, dropout_rng);
  return decoder_forward(model, ps, ss, masks, dropout_rng);
}

}  // namespace tracformer
