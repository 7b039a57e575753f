#pragma once

#include <cmath>
#include <vector>

#include "tracformer/error.hpp"
#include "tracformer/masking.hpp"
#include "tracformer/model.hpp"
#include "tracformer/rng.hpp"
#include "tracformer/tensor.hpp"

namespace tracformer {

// Temperature 0 is argmax with lowest-index tie break; otherwise categorical
// over softmax(logits / temperature).
template <typename S>
int sample_token(const std::vector<S>& logits, double temperature, Rng& rng) {
  if (logits.empty()) throw ShapeError("sample_token: empty logits");
  for (S v : logits)
    if (!std::isfinite(v)) throw NumericError("sample_token: non-finite logits");
  if (temperature < 0.0) throw DomainError("sample_token: negative temperature");
  if (temperature == 0.0) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(logits.size()); ++j)
      if (logits[j] > logits[best]) best = j;
    return best;
  }
  std::vector<double> scaled(logits.size());
  double smax = -std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < logits.size(); ++j) {
    scaled[j] = static_cast<double>(logits[j]) / temperature;
    smax = std::max(smax, scaled[j]);
  }
  double sum = 0.0;
  for (auto& v : scaled) {
    v = std::exp(v - smax);
    sum += v;
  }
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  for (size_t j = 0; j < scaled.size(); ++j) {
    acc += scaled[j];
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(scaled.size()) - 1;
}

namespace detail {

// Row-level building blocks mirroring the batched ops, for the incremental
// path. Loop order matches the batched kernels exactly.

template <typename S>
void ln_row(const S* x, const Tensor<S>& gain, const Tensor<S>& bias, int d, S* out, S eps = static_cast<S>(1e-5)) {
  S mu{0};
  for (int j = 0; j < d; ++j) mu += x[j];
  mu /= d;
  S var{0};
  for (int j = 0; j < d; ++j) {
    const S c = x[j] - mu;
    var += c * c;
  }
  var /= d;
  const S inv = S{1} / std::sqrt(var + eps);
  for (int j = 0; j < d; ++j) out[j] = (x[j] - mu) * inv * gain[j] + bias[j];
}

// y = x W + b
template <typename S>
void linear_row(const S* x, const Tensor<S>& w, const Tensor<S>& b, int d_in, int d_out, S* y) {
  for (int j = 0; j < d_out; ++j) y[j] = b[static_cast<size_t>(j)];
  kernels::matvec(x, w.data(), y, d_in, d_out);
}

template <typename S>
void gelu_row(S* x, int n) {
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  const S k3 = static_cast<S>(0.044715);
  for (int j = 0; j < n; ++j) {
    const S v = x[j];
    x[j] = S{0.5} * v * (S{1} + std::tanh(c * (v + k3 * v * v * v)));
  }
}

template <typename S>
void rotary_row(S* x, int d, int n_heads, int position, S base = static_cast<S>(10000)) {
  const int dh = d / n_heads;
  const int pairs = dh / 2;
  for (int h = 0; h < n_heads; ++h)
    for (int i = 0; i < pairs; ++i) {
      const double theta =
          static_cast<double>(position) * std::pow(static_cast<double>(base), -2.0 * i / static_cast<double>(dh));
      const S c = static_cast<S>(std::cos(theta));
      const S s = static_cast<S>(std::sin(theta));
      const int j0 = h * dh + 2 * i, j1 = j0 + 1;
      const S x0 = x[j0], x1 = x[j1];
      x[j0] = x0 * c - x1 * s;
      x[j1] = x0 * s + x1 * c;
    }
}

}  // namespace detail

// Append-only per-layer key/value store for the incrementally processed
// prefix positions, plus the per-level features the decoder reads.
template <typename S>
struct KVCache {
  int d = 0;
  int length = 0;                             // prefix positions processed
  std::vector<std::vector<S>> enc_k, enc_v;   // per encoder layer, [length x d]
  std::vector<std::vector<S>> features;       // per level 0..L, [length x d]
  std::vector<std::vector<S>> dec_k, dec_v;   // per decoder layer, [length x d]
};

// Contextual-AR decoding engine per Appendix-style scheduling: the suffix
// encoder runs once over the masked sequence; prefix-encoder features are
// computed incrementally one position at a time through the KV cache; the
// decoder has no self-attention, so each output column is computed directly.
template <typename S>
class CarEngine {
 public:
  CarEngine(const Model<S>& model, const std::vector<int>& suffix_tokens)
      : model_(model), T_(static_cast<int>(suffix_tokens.size())), masks_(build_model_masks(model.config, T_)) {
    const int L = model.config.L;
    const int d = model.config.d;
    suffix_stack_ = encoder_forward(model, suffix_tokens, EncoderSide::suffix, masks_);

    // decoder-side projections of the (fixed) suffix stack, rotary applied
    const auto pos = detail::absolute_positions(T_);
    for (int l = 1; l <= L; ++l) {
      const auto& dl = model.dec[static_cast<size_t>(l - 1)];
      const Tensor<S>& sf_raw = suffix_stack_.levels[static_cast<size_t>(L - l + 1)];
      Tensor<S> sf = layer_norm(sf_raw, dl.ln2_g, dl.ln2_b);
      suf_k_.push_back(rotary_apply(linear(sf, dl.wk, dl.bk), pos, model.config.n_heads));
      suf_v_.push_back(linear(sf, dl.wv, dl.bv));
    }

    cache_.d = d;
    cache_.enc_k.resize(static_cast<size_t>(L));
    cache_.enc_v.resize(static_cast<size_t>(L));
    cache_.features.resize(static_cast<size_t>(L) + 1);
    cache_.dec_k.resize(static_cast<size_t>(L));
    cache_.dec_v.resize(static_cast<size_t>(L));
  }

  int prefix_length() const { return cache_.length; }

  // Runs the prefix encoder for the next position (0-based index = current
  // cache length) and stores its features and projections.
  void advance_prefix(int token) {
    const auto& c = model_.config;
    if (cache_.length >= T_) throw DomainError("advance_prefix: past the sequence end");
    if (token < 0 || token >= c.V) throw DataError("advance_prefix: token id out of range");
    const int d = c.d, H = c.n_heads, dh = d / H;
    const int p = cache_.length;       // 0-based
    const int pos1 = p + 1;            // rotary position
    const S att_scale = S{1} / static_cast<S>(std::sqrt(static_cast<double>(dh)));

    std::vector<S> x(model_.tok_embed.data() + static_cast<size_t>(token) * d,
                     model_.tok_embed.data() + static_cast<size_t>(token + 1) * d);
    append_row(cache_.features[0], x);

    std::vector<S> xn(d), q(d), k(d), v(d), att(d), tmp(4 * d), w;
    std::vector<int> idx;
    for (int l = 1; l <= c.L; ++l) {
      const auto& e = model_.enc[static_cast<size_t>(l - 1)];
      detail::ln_row(x.data(), e.ln1_g, e.ln1_b, d, xn.data());
      detail::linear_row(xn.data(), e.wq, e.bq, d, d, q.data());
      detail::linear_row(xn.data(), e.wk, e.bk, d, d, k.data());
      detail::linear_row(xn.data(), e.wv, e.bv, d, d, v.data());
      detail::rotary_row(q.data(), d, H, pos1);
      detail::rotary_row(k.data(), d, H, pos1);
      append_row(cache_.enc_k[static_cast<size_t>(l - 1)], k);
      append_row(cache_.enc_v[static_cast<size_t>(l - 1)], v);

      const auto& row = masks_.enc_prefix[static_cast<size_t>(l - 1)].row(pos1);
      idx.clear();
      for (int tp : row) idx.push_back(tp - 1);  // all <= p, already cached
      w.assign(idx.size(), S{0});
      std::fill(att.begin(), att.end(), S{0});
      for (int h = 0; h < H; ++h) {
        const int col = h * dh;
        kernels::attend_row(q.data() + col, cache_.enc_k[static_cast<size_t>(l - 1)].data() + col,
                            cache_.enc_v[static_cast<size_t>(l - 1)].data() + col, idx.data(),
                            static_cast<int>(idx.size()), d, dh, att_scale, att.data() + col, w.data());
      }
      detail::linear_row(att.data(), e.wo, e.bo, d, d, xn.data());
      for (int j = 0; j < d; ++j) x[j] += xn[j];

      detail::ln_row(x.data(), e.ln2_g, e.ln2_b, d, xn.data());
      detail::linear_row(xn.data(), e.w1, e.b1, d, 4 * d, tmp.data());
      detail::gelu_row(tmp.data(), 4 * d);
      detail::linear_row(tmp.data(), e.w2, e.b2, 4 * d, d, xn.data());
      for (int j = 0; j < d; ++j) x[j] += xn[j];
      append_row(cache_.features[static_cast<size_t>(l)], x);
    }

    // decoder-side projections for this prefix position
    std::vector<S> pf(d), proj(d);
    for (int l = 1; l <= c.L; ++l) {
      const auto& dl = model_.dec[static_cast<size_t>(l - 1)];
      const auto& feat = cache_.features[static_cast<size_t>(c.L - l + 1)];
      detail::ln_row(feat.data() + static_cast<size_t>(p) * d, dl.ln2_g, dl.ln2_b, d, pf.data());
      detail::linear_row(pf.data(), dl.wk, dl.bk, d, d, proj.data());
      detail::rotary_row(proj.data(), d, H, pos1);
      append_row(cache_.dec_k[static_cast<size_t>(l - 1)], proj);
      detail::linear_row(pf.data(), dl.wv, dl.bv, d, d, proj.data());
      append_row(cache_.dec_v[static_cast<size_t>(l - 1)], proj);
    }
    ++cache_.length;
  }

  // Vocabulary logits for 1-indexed position t; the prefix cache must hold
  // at least t-1 positions.
  std::vector<S> decode_logits(int t) const {
    const auto& c = model_.config;
    if (t < 1 || t > T_) throw DomainError("decode_logits: position out of range");
    if (cache_.length < t - 1) throw DomainError("decode_logits: prefix cache is behind this position");
    const int d = c.d, H = c.n_heads, dh = d / H;
    const S att_scale = S{1} / static_cast<S>(std::sqrt(static_cast<double>(dh)));

    std::vector<S> h(static_cast<size_t>(d), S{0});
    std::vector<S> xn(d), q(d), ctx_p(d), ctx_s(d), att(d), tmp(4 * d), w;
    std::vector<int> idx;
    for (int l = 1; l <= c.L; ++l) {
      const auto& dl = model_.dec[static_cast<size_t>(l - 1)];
      detail::ln_row(h.data(), dl.ln1_g, dl.ln1_b, d, xn.data());
      detail::linear_row(xn.data(), dl.wq, dl.bq, d, d, q.data());
      detail::rotary_row(q.data(), d, H, t);

      std::fill(ctx_p.begin(), ctx_p.end(), S{0});
      const auto& prow = masks_.dec_prefix[static_cast<size_t>(l - 1)].row(t);
      idx.clear();
      for (int tp : prow) idx.push_back(tp - 1);
      w.assign(idx.size(), S{0});
      for (int h2 = 0; h2 < H; ++h2) {
        const int col = h2 * dh;
        kernels::attend_row(q.data() + col, cache_.dec_k[static_cast<size_t>(l - 1)].data() + col,
                            cache_.dec_v[static_cast<size_t>(l - 1)].data() + col, idx.data(),
                            static_cast<int>(idx.size()), d, dh, att_scale, ctx_p.data() + col, w.data());
      }

      std::fill(ctx_s.begin(), ctx_s.end(), S{0});
      const auto& srow = masks_.dec_suffix[static_cast<size_t>(l - 1)].row(t);
      idx.clear();
      for (int tp : srow) idx.push_back(tp - 1);
      w.assign(idx.size(), S{0});
      for (int h2 = 0; h2 < H; ++h2) {
        const int col = h2 * dh;
        kernels::attend_row(q.data() + col, suf_k_[static_cast<size_t>(l - 1)].data() + col,
                            suf_v_[static_cast<size_t>(l - 1)].data() + col, idx.data(),
                            static_cast<int>(idx.size()), d, dh, att_scale, ctx_s.data() + col, w.data());
      }
      for (int j = 0; j < d; ++j) ctx_p[j] += ctx_s[j];

      detail::linear_row(ctx_p.data(), dl.wo, dl.bo, d, d, att.data());
      for (int j = 0; j < d; ++j) h[j] += att[j];
      detail::ln_row(h.data(), dl.ln3_g, dl.ln3_b, d, xn.data());
      detail::linear_row(xn.data(), dl.w1, dl.b1, d, 4 * d, tmp.data());
      detail::gelu_row(tmp.data(), 4 * d);
      detail::linear_row(tmp.data(), dl.w2, dl.b2, 4 * d, d, xn.data());
      for (int j = 0; j < d; ++j) h[j] += xn[j];
    }

    std::vector<S> logits(static_cast<size_t>(c.V));
    detail::linear_row(h.data(), model_.head_w, model_.head_b, d, c.V, logits.data());
    detail::check_finite(logits.data(), logits.size(), "decode_logits");
    return logits;
  }

 private:
  void append_row(std::vector<S>& buf, const std::vector<S>& row) { buf.insert(buf.end(), row.begin(), row.end()); }

  const Model<S>& model_;
  int T_;
  ModelMasks masks_;
  EncoderStack<S> suffix_stack_;
  std::vector<Tensor<S>> suf_k_, suf_v_;
  KVCache<S> cache_;
};

template <typename S>
struct GenerationResult {
  std::vector<int> tokens;
  std::vector<std::pair<int, double>> logprobs;  // (1-indexed position, log prob of the chosen token)
  std::vector<std::vector<S>> step_logits;       // populated when record_logits is set
};

// Left-to-right contextual-AR generation. Positions in `context` (1-indexed)
// are copied through from `x`; the sequence values at other positions are
// ignored on input. The suffix encoder runs once on the masked sequence and
// is not refreshed as tokens are filled.
template <typename S>
GenerationResult<S> car_generate(const Model<S>& model, const std::vector<int>& x, const std::vector<int>& context,
                                 double temperature, Rng& rng, bool record_logits = false) {
  const int T = static_cast<int>(x.size());
  if (static_cast<int>(context.size()) >= T) throw DomainError("car_generate: context covers the whole sequence");
  const std::vector<int> blanks = complement_positions(context, T);
  CarEngine<S> engine(model, apply_mask(x, blanks, model.config.mask_token_id));

  GenerationResult<S> out;
  out.tokens = x;
  std::vector<char> given(static_cast<size_t>(T) + 1, 0);
  for (int p : context) given[static_cast<size_t>(p)] = 1;
  for (int t = 1; t <= T; ++t) {
    if (t >= 2) engine.advance_prefix(out.tokens[static_cast<size_t>(t - 2)]);
    if (given[static_cast<size_t>(t)]) continue;
    std::vector<S> logits = engine.decode_logits(t);
    const int tok = sample_token(logits, temperature, rng);
    if (tok < 0 || tok >= model.config.V) throw NumericError("car_generate: sampler produced an invalid id");
    out.tokens[static_cast<size_t>(t - 1)] = tok;
    out.logprobs.emplace_back(t, static_cast<double>(log_softmax_at(logits.data(), model.config.V, tok)));
    if (record_logits) out.step_logits.push_back(std::move(logits));
  }
  return out;
}

// Log probabilities the CAR chain assigns to the actual tokens of `x` at
// the non-context positions, via the same incremental path generation uses.
template <typename S>
std::vector<std::pair<int, double>> car_score(const Model<S>& model, const std::vector<int>& x,
                                              const std::vector<int>& context) {
  const int T = static_cast<int>(x.size());
  if (static_cast<int>(context.size()) >= T) throw DomainError("car_score: context covers the whole sequence");
  const std::vector<int> blanks = complement_positions(context, T);
  CarEngine<S> engine(model, apply_mask(x, blanks, model.config.mask_token_id));

  std::vector<char> given(static_cast<size_t>(T) + 1, 0);
  for (int p : context) given[static_cast<size_t>(p)] = 1;
  std::vector<std::pair<int, double>> out;
  for (int t = 1; t <= T; ++t) {
    if (t >= 2) engine.advance_prefix(x[static_cast<size_t>(t - 2)]);
    if (given[static_cast<size_t>(t)]) continue;
    const std::vector<S> logits = engine.decode_logits(t);
    out.emplace_back(t, static_cast<double>(log_softmax_at(logits.data(), model.config.V, x[static_cast<size_t>(t - 1)])));
  }
  return out;
}

// One arbitrary-context forward pass; returns (1-indexed position,
// distribution over V) for every non-context position. Outputs at context
// positions are not returned.
template <typename S>
std::vector<std::pair<int, std::vector<S>>> ac_predict(const Model<S>& model, const std::vector<int>& x,
                                                       const std::vector<int>& context) {
  const int T = static_cast<int>(x.size());
  const std::vector<int> blanks = complement_positions(context, T);
  const std::vector<int> corrupted = apply_mask(x, blanks, model.config.mask_token_id);
  Tensor<S> logits = tracformer_forward(model, corrupted, corrupted);
  std::vector<std::pair<int, std::vector<S>>> out;
  for (int t : blanks)
    out.emplace_back(t, softmax_row(logits.data() + static_cast<size_t>(t - 1) * model.config.V, model.config.V));
  return out;
}

}  // namespace tracformer
