#pragma once

// Recurrent units.
//
// Encoder layer:   [fx, bx, fg, bg, z] = LN(X W),  W: d x (4*d/2 + d)
//                  fh_i = (1-sig(fg_i)) . fh_{i-1} + sig(fg_i) . fx_i
//                  bh_i = (1-sig(bg_i)) . bh_{i+1} + sig(bg_i) . bx_i
//                  h_i  = (1-sig(z_i)) . [fh_i; bh_i] + sig(z_i) . x_i
//
// Decoder layer:   [yt, g, z] = LN(Y W),  W: d x 3d
//                  st_i = (1-sig(g_i)) . st_{i-1} + sig(g_i) . yt_i
//                  c_i  = attn(st_i, H) / sqrt(d)
//                  o_i  = tanh(LN(st_i Ws) + LN(c_i Wc))
//                  s_i  = (1-sig(z_i)) . o_i + sig(z_i) . y_i
//
// Attention:       score_ij = v . tanh(LN(st_i Was) + LN(h_j Wah))
//
// The only time-dependent computation is the parameterless gated scan;
// every matmul sees isolated timesteps and is batched over the whole
// sequence. The LSTM layer below is the baseline with both matmuls
// inside the time loop.

#include "srnmt/ops.hpp"

namespace srnmt {

struct UnitFlags {
  bool layer_norm = true;
  bool highway = true;
};

constexpr double kLayerNormEps = 1e-5;

// ----------------------------------------------------------------------
// Parameter bundles
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> xavier_matrix(Rng& rng, int64_t fan_in, int64_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t = Tensor<T>::zeros(Shape{fan_in, fan_out});
  for (auto& v : t.values())
    v = static_cast<T>(uniform_range(rng, -bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> ones_vector(int64_t n) {
  Tensor<T> t = Tensor<T>::full(Shape{n}, T(1));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> zeros_vector(int64_t n) {
  Tensor<T> t = Tensor<T>::zeros(Shape{n});
  t.set_requires_grad(true);
  return t;
}

template <typename T>
struct EncoderLayerParams {
  Tensor<T> W;        // d x fused, fused = 3d with highway, 2d without
  Tensor<T> ln_gain;  // fused (absent when layer norm is off)
  Tensor<T> ln_bias;
};

template <typename T>
EncoderLayerParams<T> make_encoder_layer(Rng& rng, int64_t d, UnitFlags flags) {
  if (d % 2 != 0)
    throw ConfigError("encoder layer width must be even, got " +
                      std::to_string(d));
  const int64_t fused = flags.highway ? 3 * d : 2 * d;
  EncoderLayerParams<T> p;
  p.W = xavier_matrix<T>(rng, d, fused);
  if (flags.layer_norm) {
    p.ln_gain = ones_vector<T>(fused);
    p.ln_bias = zeros_vector<T>(fused);
  }
  return p;
}

template <typename T>
struct AttentionParams {
  Tensor<T> W_as, W_ah;  // d x d each
  Tensor<T> v;           // d
  Tensor<T> ln_s_gain, ln_s_bias;
  Tensor<T> ln_h_gain, ln_h_bias;
};

template <typename T>
AttentionParams<T> make_attention(Rng& rng, int64_t d, bool layer_norm) {
  AttentionParams<T> p;
  p.W_as = xavier_matrix<T>(rng, d, d);
  p.W_ah = xavier_matrix<T>(rng, d, d);
  p.v = zeros_vector<T>(d);
  if (layer_norm) {
    p.ln_s_gain = ones_vector<T>(d);
    p.ln_s_bias = zeros_vector<T>(d);
    p.ln_h_gain = ones_vector<T>(d);
    p.ln_h_bias = zeros_vector<T>(d);
  }
  return p;
}

template <typename T>
struct DecoderLayerParams {
  Tensor<T> W;  // d x fused
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> W_s;  // d x d
  Tensor<T> ln_s_gain, ln_s_bias;
  bool has_attention = false;
  Tensor<T> W_c;  // d x d, only with attention
  Tensor<T> ln_c_gain, ln_c_bias;
  AttentionParams<T> attn;
};

template <typename T>
DecoderLayerParams<T> make_decoder_layer(Rng& rng, int64_t d, UnitFlags flags,
                                         bool with_attention) {
  const int64_t fused = flags.highway ? 3 * d : 2 * d;
  DecoderLayerParams<T> p;
  p.W = xavier_matrix<T>(rng, d, fused);
  if (flags.layer_norm) {
    p.ln_gain = ones_vector<T>(fused);
    p.ln_bias = zeros_vector<T>(fused);
  }
  p.W_s = xavier_matrix<T>(rng, d, d);
  if (flags.layer_norm) {
    p.ln_s_gain = ones_vector<T>(d);
    p.ln_s_bias = zeros_vector<T>(d);
  }
  p.has_attention = with_attention;
  if (with_attention) {
    p.W_c = xavier_matrix<T>(rng, d, d);
    if (flags.layer_norm) {
      p.ln_c_gain = ones_vector<T>(d);
      p.ln_c_bias = zeros_vector<T>(d);
    }
    p.attn = make_attention<T>(rng, d, flags.layer_norm);
  }
  return p;
}

template <typename T>
struct LstmLayerParams {
  Tensor<T> W_x;   // input_width x 4d, gate order [i, f, g, o]
  Tensor<T> W_h;   // d x 4d
  Tensor<T> bias;  // 4d
};

template <typename T>
LstmLayerParams<T> make_lstm_layer(Rng& rng, int64_t d,
                                   int64_t input_width = 0) {
  if (input_width == 0) input_width = d;
  LstmLayerParams<T> p;
  p.W_x = xavier_matrix<T>(rng, input_width, 4 * d);
  p.W_h = xavier_matrix<T>(rng, d, 4 * d);
  p.bias = zeros_vector<T>(4 * d);
  return p;
}

// ----------------------------------------------------------------------
// dynamic_average_pool: the parameterless gated scan
//   h_i = (1 - sig(g_i)) . h_prev + sig(g_i) . x_i
// running forward or backward in time. Padded steps (keep==false) carry
// the state through unchanged. Backward propagates through the scan in
// reverse time order.
// ----------------------------------------------------------------------

enum class ScanDirection { Forward, Backward };

template <typename T>
Tensor<T> dynamic_average_pool(Tape<T>* tape, const Tensor<T>& x,
                               const Tensor<T>& g, const Tensor<T>& h0,
                               ScanDirection dir, const Mask* keep = nullptr) {
  detail::check_same_shape("dynamic_average_pool", x, g);
  const int rank = x.shape().rank();
  if (rank < 2)
    throw ShapeError("dynamic_average_pool: need [T,k] or [B,T,k], got " +
                     x.shape().str());
  const int64_t B = rank == 3 ? x.shape()[0] : 1;
  const int64_t Tn = rank == 3 ? x.shape()[1] : x.shape()[0];
  const int64_t k = x.shape().cols();
  if (h0.shape().rank() != 1 || h0.shape()[0] != k)
    throw ShapeError("dynamic_average_pool: h0 must be [k], got " +
                     h0.shape().str() + " for k=" + std::to_string(k));
  if (keep && keep->shape.numel() != B * Tn)
    throw ShapeError("dynamic_average_pool: mask size mismatch");

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto gate = std::make_shared<std::vector<T>>(x.values().size());

  const T* px = x.values().data();
  const T* pg = g.values().data();
  const T* ph0 = h0.values().data();
  T* po = out.values().data();
  const uint8_t* km = keep ? keep->keep.data() : nullptr;

  for (int64_t b = 0; b < B; ++b) {
    for (int64_t s = 0; s < Tn; ++s) {
      const int64_t t = dir == ScanDirection::Forward ? s : Tn - 1 - s;
      const int64_t off = (b * Tn + t) * k;
      const int64_t prev_off =
          s == 0 ? -1
                 : (b * Tn +
                    (dir == ScanDirection::Forward ? t - 1 : t + 1)) *
                       k;
      const bool real = !km || km[b * Tn + t];
      for (int64_t j = 0; j < k; ++j) {
        const T prev = s == 0 ? ph0[j] : po[prev_off + j];
        if (real) {
          const T f = sigmoid_scalar(pg[off + j]);
          (*gate)[static_cast<size_t>(off + j)] = f;
          po[off + j] = (T(1) - f) * prev + f * px[off + j];
        } else {
          po[off + j] = prev;
        }
      }
    }
  }

  if (needs_tape(tape, x, g, h0)) {
    mark_output(tape, out);
    auto xn = x.node(), gn = g.node(), hn = h0.node(), on = out.node();
    auto keep_copy = keep ? std::make_shared<Mask>(*keep) : nullptr;
    tape->record({x, g, h0, out}, [xn, gn, hn, on, gate, keep_copy, B, Tn, k,
                                   dir]() {
      if (on->grad.empty()) return;
      const T* dout = on->grad.data();
      const T* px = xn->values.data();
      const T* po = on->values.data();
      const T* ph0 = hn->values.data();
      const uint8_t* km = keep_copy ? keep_copy->keep.data() : nullptr;
      std::vector<T> carry(static_cast<size_t>(k));
      for (int64_t b = 0; b < B; ++b) {
        std::fill(carry.begin(), carry.end(), T(0));
        for (int64_t s = Tn - 1; s >= 0; --s) {
          const int64_t t = dir == ScanDirection::Forward ? s : Tn - 1 - s;
          const int64_t off = (b * Tn + t) * k;
          const int64_t prev_off =
              s == 0 ? -1
                     : (b * Tn +
                        (dir == ScanDirection::Forward ? t - 1 : t + 1)) *
                           k;
          const bool real = !km || km[b * Tn + t];
          for (int64_t j = 0; j < k; ++j) {
            const T dh = dout[off + j] + carry[static_cast<size_t>(j)];
            if (!real) {
              carry[static_cast<size_t>(j)] = dh;
              continue;
            }
            const T f = (*gate)[static_cast<size_t>(off + j)];
            const T prev = s == 0 ? ph0[j] : po[prev_off + j];
            if (xn->requires_grad) grad_buf(*xn)[off + j] += dh * f;
            if (gn->requires_grad)
              grad_buf(*gn)[off + j] +=
                  dh * (px[off + j] - prev) * f * (T(1) - f);
            carry[static_cast<size_t>(j)] = dh * (T(1) - f);
          }
        }
        if (hn->requires_grad) {
          T* dh0 = grad_buf(*hn).data();
          for (int64_t j = 0; j < k; ++j)
            dh0[j] += carry[static_cast<size_t>(j)];
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// Fused MLP attention scores: S[i,j] = sum_k v[k] * tanh(A[i,k] + B[j,k])
// A: [Tt,d] or [Bt,Tt,d]; Bsrc: matching rank with Ts rows.
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> attn_scores(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b,
                      const Tensor<T>& v) {
  if (a.shape().rank() != b.shape().rank())
    throw ShapeError("attn_scores: rank mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  const int rank = a.shape().rank();
  const int64_t B = rank == 3 ? a.shape()[0] : 1;
  const int64_t Tt = rank == 3 ? a.shape()[1] : a.shape()[0];
  const int64_t Ts = rank == 3 ? b.shape()[1] : b.shape()[0];
  const int64_t d = a.shape().cols();
  if (b.shape().cols() != d || (rank == 3 && b.shape()[0] != B))
    throw ShapeError("attn_scores: shapes disagree " + a.shape().str() +
                     " vs " + b.shape().str());
  if (v.shape().rank() != 1 || v.shape()[0] != d)
    throw ShapeError("attn_scores: v must be [d]");

  Shape out_shape = rank == 3 ? Shape{B, Tt, Ts} : Shape{Tt, Ts};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto th = std::make_shared<std::vector<T>>(
      static_cast<size_t>(B * Tt * Ts * d));

  const T* pa = a.values().data();
  const T* pb = b.values().data();
  const T* pv = v.values().data();
  T* po = out.values().data();
  for (int64_t bi = 0; bi < B; ++bi)
    for (int64_t i = 0; i < Tt; ++i) {
      const T* arow = pa + (bi * Tt + i) * d;
      for (int64_t j = 0; j < Ts; ++j) {
        const T* brow = pb + (bi * Ts + j) * d;
        T* trow = th->data() + ((bi * Tt + i) * Ts + j) * d;
        T acc = T(0);
        for (int64_t c = 0; c < d; ++c) {
          const T u = std::tanh(arow[c] + brow[c]);
          trow[c] = u;
          acc += pv[c] * u;
        }
        po[(bi * Tt + i) * Ts + j] = acc;
      }
    }

  if (needs_tape(tape, a, b, v)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), vn = v.node(), on = out.node();
    tape->record({a, b, v, out}, [an, bn, vn, on, th, B, Tt, Ts, d]() {
      if (on->grad.empty()) return;
      const T* ds = on->grad.data();
      const T* pv = vn->values.data();
      T* da = an->requires_grad ? grad_buf(*an).data() : nullptr;
      T* db = bn->requires_grad ? grad_buf(*bn).data() : nullptr;
      T* dv = vn->requires_grad ? grad_buf(*vn).data() : nullptr;
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t i = 0; i < Tt; ++i)
          for (int64_t j = 0; j < Ts; ++j) {
            const T g = ds[(bi * Tt + i) * Ts + j];
            if (g == T(0)) continue;
            const T* trow = th->data() + ((bi * Tt + i) * Ts + j) * d;
            for (int64_t c = 0; c < d; ++c) {
              const T u = trow[c];
              const T common = g * pv[c] * (T(1) - u * u);
              if (da) da[(bi * Tt + i) * d + c] += common;
              if (db) db[(bi * Ts + j) * d + c] += common;
              if (dv) dv[c] += g * u;
            }
          }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// Layer-normalized MLP attention. The source-side projection LN(H Wah)
// is computed once per call (training) or cached by the caller
// (incremental decoding) and shared across all target steps.
// ----------------------------------------------------------------------

template <typename T>
struct AttentionResult {
  Tensor<T> context;  // same leading shape as the target states
  Tensor<T> weights;  // [Tt,Ts] or [B,Tt,Ts]
};

// Source-side half of the score: LN(dropout(H) Wah).
template <typename T>
Tensor<T> attention_source_proj(Tape<T>* tape, const Tensor<T>& H,
                                const AttentionParams<T>& p, bool use_ln,
                                double dropout_p, bool training, Rng& rng) {
  Tensor<T> Hd = dropout(tape, H, dropout_p, training, rng);
  Tensor<T> ph = matmul(tape, Hd, p.W_ah);
  if (use_ln)
    ph = layer_norm(tape, ph, p.ln_h_gain, p.ln_h_bias, T(kLayerNormEps));
  return ph;
}

template <typename T>
AttentionResult<T> mlp_attention(Tape<T>* tape, const Tensor<T>& s_tilde,
                                 const Tensor<T>& H,
                                 const AttentionParams<T>& p,
                                 const Mask* src_keep, bool use_ln,
                                 double dropout_p, bool training, Rng& rng,
                                 const Tensor<T>* cached_src_proj = nullptr) {
  if (s_tilde.shape().cols() != H.shape().cols())
    throw ShapeError("mlp_attention: widths disagree " +
                     s_tilde.shape().str() + " vs " + H.shape().str());
  Tensor<T> sd = dropout(tape, s_tilde, dropout_p, training, rng);
  Tensor<T> ps = matmul(tape, sd, p.W_as);
  if (use_ln)
    ps = layer_norm(tape, ps, p.ln_s_gain, p.ln_s_bias, T(kLayerNormEps));
  Tensor<T> ph = cached_src_proj
                     ? *cached_src_proj
                     : attention_source_proj(tape, H, p, use_ln, dropout_p,
                                             training, rng);
  Tensor<T> scores = attn_scores(tape, ps, ph, p.v);
  Tensor<T> weights = softmax_rows(tape, scores, src_keep);
  Tensor<T> context = weights.shape().rank() == 3 ? bmm(tape, weights, H)
                                                  : matmul(tape, weights, H);
  return {context, weights};
}

// ----------------------------------------------------------------------
// Encoder layer
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> encoder_layer_forward(Tape<T>* tape, const Tensor<T>& X,
                                const EncoderLayerParams<T>& p,
                                UnitFlags flags, double dropout_p,
                                bool training, Rng& rng,
                                const Mask* keep = nullptr) {
  const int64_t d = X.shape().cols();
  if (d % 2 != 0)
    throw ConfigError("encoder layer width must be even, got " +
                      std::to_string(d));
  const int axis = X.shape().rank() - 1;

  Tensor<T> Xd = dropout(tape, X, dropout_p, training, rng);
  Tensor<T> proj = matmul(tape, Xd, p.W);
  if (flags.layer_norm)
    proj = layer_norm(tape, proj, p.ln_gain, p.ln_bias, T(kLayerNormEps));

  std::vector<int64_t> sizes = flags.highway
                                   ? std::vector<int64_t>{d / 2, d / 2, d / 2,
                                                          d / 2, d}
                                   : std::vector<int64_t>{d / 2, d / 2, d / 2,
                                                          d / 2};
  auto slices = split(tape, proj, sizes, axis);

  Tensor<T> h0 = Tensor<T>::zeros(Shape{d / 2});
  Tensor<T> fh = dynamic_average_pool(tape, slices[0], slices[2], h0,
                                      ScanDirection::Forward, keep);
  Tensor<T> bh = dynamic_average_pool(tape, slices[1], slices[3], h0,
                                      ScanDirection::Backward, keep);
  Tensor<T> cand = concat(tape, std::vector<Tensor<T>>{fh, bh}, axis);

  if (!flags.highway) return cand;
  Tensor<T> zgate = sigmoid(tape, slices[4]);
  return add(tape, mul(tape, one_minus(tape, zgate), cand),
             mul(tape, zgate, X));
}

// ----------------------------------------------------------------------
// Decoder layer (training form: batched over all target steps)
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> decoder_layer_forward(Tape<T>* tape, const Tensor<T>& Y,
                                const Tensor<T>& H,
                                const DecoderLayerParams<T>& p,
                                UnitFlags flags, bool attention_enabled,
                                const Mask* src_keep, double dropout_p,
                                bool training, Rng& rng,
                                Tensor<T>* weights_out = nullptr) {
  const int64_t d = Y.shape().cols();
  const int axis = Y.shape().rank() - 1;
  if (attention_enabled && !p.has_attention)
    throw ConfigError("decoder layer has no attention parameters");

  Tensor<T> Yd = dropout(tape, Y, dropout_p, training, rng);
  Tensor<T> proj = matmul(tape, Yd, p.W);
  if (flags.layer_norm)
    proj = layer_norm(tape, proj, p.ln_gain, p.ln_bias, T(kLayerNormEps));

  std::vector<int64_t> sizes = flags.highway ? std::vector<int64_t>{d, d, d}
                                             : std::vector<int64_t>{d, d};
  auto slices = split(tape, proj, sizes, axis);

  Tensor<T> h0 = Tensor<T>::zeros(Shape{d});
  Tensor<T> st = dynamic_average_pool(tape, slices[0], slices[1], h0,
                                      ScanDirection::Forward, nullptr);

  Tensor<T> branch_s = matmul(tape, dropout(tape, st, dropout_p, training, rng),
                              p.W_s);
  if (flags.layer_norm)
    branch_s =
        layer_norm(tape, branch_s, p.ln_s_gain, p.ln_s_bias, T(kLayerNormEps));

  Tensor<T> o;
  if (attention_enabled) {
    AttentionResult<T> att = mlp_attention(tape, st, H, p.attn, src_keep,
                                           flags.layer_norm, dropout_p,
                                           training, rng);
    if (weights_out) *weights_out = att.weights;
    Tensor<T> c = scale(tape, att.context,
                        T(1) / static_cast<T>(std::sqrt(double(d))));
    Tensor<T> branch_c =
        matmul(tape, dropout(tape, c, dropout_p, training, rng), p.W_c);
    if (flags.layer_norm)
      branch_c = layer_norm(tape, branch_c, p.ln_c_gain, p.ln_c_bias,
                            T(kLayerNormEps));
    o = tanh(tape, add(tape, branch_s, branch_c));
  } else {
    o = tanh(tape, branch_s);
  }

  if (!flags.highway) return o;
  Tensor<T> zgate = sigmoid(tape, slices[2]);
  return add(tape, mul(tape, one_minus(tape, zgate), o), mul(tape, zgate, Y));
}

// ----------------------------------------------------------------------
// Decoder layer, incremental form for inference. No tape, no dropout.
// Feeding steps sequentially reproduces the batched result.
// ----------------------------------------------------------------------

template <typename T>
struct DecoderStepResult {
  Tensor<T> s;        // layer output s_t, [d]
  Tensor<T> s_tilde;  // scan state after this step, [d]
};

template <typename T>
DecoderStepResult<T> decoder_layer_step(
    const Tensor<T>& y_t, const Tensor<T>& s_tilde_prev, const Tensor<T>& H,
    const DecoderLayerParams<T>& p, UnitFlags flags, bool attention_enabled,
    const Mask* src_keep, const Tensor<T>* cached_src_proj = nullptr) {
  const int64_t d = y_t.numel();
  Tape<T>* tape = nullptr;
  Rng rng(0);  // dropout disabled below; never drawn from

  Tensor<T> yrow = Tensor<T>::from(Shape{1, d}, y_t.values());
  Tensor<T> proj = matmul(tape, yrow, p.W);
  if (flags.layer_norm)
    proj = layer_norm(tape, proj, p.ln_gain, p.ln_bias, T(kLayerNormEps));
  std::vector<int64_t> sizes = flags.highway ? std::vector<int64_t>{d, d, d}
                                             : std::vector<int64_t>{d, d};
  auto slices = split(tape, proj, sizes, 1);

  // Single scan step: st = (1-sig(g)) . st_prev + sig(g) . yt
  Tensor<T> prev = Tensor<T>::from(Shape{1, d}, s_tilde_prev.values());
  Tensor<T> f = sigmoid(tape, slices[1]);
  Tensor<T> st = add(tape, mul(tape, one_minus(tape, f), prev),
                     mul(tape, f, slices[0]));

  Tensor<T> branch_s = matmul(tape, st, p.W_s);
  if (flags.layer_norm)
    branch_s =
        layer_norm(tape, branch_s, p.ln_s_gain, p.ln_s_bias, T(kLayerNormEps));

  Tensor<T> o;
  if (attention_enabled) {
    AttentionResult<T> att =
        mlp_attention(tape, st, H, p.attn, src_keep, flags.layer_norm, 0.0,
                      false, rng, cached_src_proj);
    Tensor<T> c = scale(tape, att.context,
                        T(1) / static_cast<T>(std::sqrt(double(d))));
    Tensor<T> branch_c = matmul(tape, c, p.W_c);
    if (flags.layer_norm)
      branch_c = layer_norm(tape, branch_c, p.ln_c_gain, p.ln_c_bias,
                            T(kLayerNormEps));
    o = tanh(tape, add(tape, branch_s, branch_c));
  } else {
    o = tanh(tape, branch_s);
  }

  Tensor<T> out_row;
  if (flags.highway) {
    Tensor<T> zgate = sigmoid(tape, slices[2]);
    out_row = add(tape, mul(tape, one_minus(tape, zgate), o),
                  mul(tape, zgate, yrow));
  } else {
    out_row = o;
  }

  DecoderStepResult<T> r;
  r.s = Tensor<T>::from(Shape{d}, out_row.values());
  r.s_tilde = Tensor<T>::from(Shape{d}, st.values());
  return r;
}

// ----------------------------------------------------------------------
// LSTM baseline layer. Standard recurrence, gate order [i, f, g, o];
// both matmuls run inside the time loop, so the layer is inherently
// sequential in T. Dropout hits only the vertical (input) connection.
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> lstm_layer_forward(Tape<T>* tape, const Tensor<T>& X,
                             const LstmLayerParams<T>& p, const Tensor<T>& h0,
                             const Tensor<T>& c0, double dropout_p = 0.0,
                             bool training = false, Rng* rng = nullptr,
                             const Tensor<T>* feed = nullptr) {
  const int rank = X.shape().rank();
  Tensor<T> X3 = rank == 3 ? X
                           : reshape(tape, X,
                                     Shape{1, X.shape()[0], X.shape()[1]});
  const int64_t B = X3.shape()[0], Tn = X3.shape()[1];
  const int64_t d = p.W_h.shape()[0];
  if (p.W_x.shape()[1] != 4 * d || p.W_h.shape()[1] != 4 * d ||
      p.bias.shape()[0] != 4 * d)
    throw ShapeError("lstm_layer_forward: gate block width must be 4d");
  if (h0.numel() != d || c0.numel() != d)
    throw ShapeError("lstm_layer_forward: state widths disagree");

  // Initial states broadcast across the batch as constants.
  Tensor<T> h_prev = Tensor<T>::zeros(Shape{B, d});
  Tensor<T> c_prev = Tensor<T>::zeros(Shape{B, d});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < d; ++j) {
      h_prev.values()[b * d + j] = h0.values()[static_cast<size_t>(j)];
      c_prev.values()[b * d + j] = c0.values()[static_cast<size_t>(j)];
    }

  Rng dummy(0);
  Rng& r = rng ? *rng : dummy;
  std::vector<Tensor<T>> hs;
  hs.reserve(static_cast<size_t>(Tn));
  for (int64_t t = 0; t < Tn; ++t) {
    Tensor<T> xt = select_time(tape, X3, t);
    if (feed)
      xt = concat(tape, std::vector<Tensor<T>>{xt, h_prev}, 1);
    Tensor<T> xd = dropout(tape, xt, dropout_p, training, r);
    Tensor<T> z = add(tape, matmul(tape, xd, p.W_x),
                      matmul(tape, h_prev, p.W_h));
    z = add_bias(tape, z, p.bias);
    auto gates = split(tape, z, {d, d, d, d}, 1);
    Tensor<T> ig = sigmoid(tape, gates[0]);
    Tensor<T> fg = sigmoid(tape, gates[1]);
    Tensor<T> gg = tanh(tape, gates[2]);
    Tensor<T> og = sigmoid(tape, gates[3]);
    Tensor<T> c = add(tape, mul(tape, fg, c_prev), mul(tape, ig, gg));
    Tensor<T> h = mul(tape, og, tanh(tape, c));
    hs.push_back(h);
    h_prev = h;
    c_prev = c;
  }
  Tensor<T> out = stack_time(tape, hs);
  if (rank == 2)
    out = reshape(tape, out, Shape{Tn, d});
  return out;
}

// Single LSTM step for incremental decoding (no tape, no dropout).
template <typename T>
struct LstmStepResult {
  Tensor<T> h, c;  // [d] each
};

template <typename T>
LstmStepResult<T> lstm_step(const Tensor<T>& x_t, const Tensor<T>& h_prev,
                            const Tensor<T>& c_prev,
                            const LstmLayerParams<T>& p) {
  const int64_t d = p.W_h.shape()[0];
  Tape<T>* tape = nullptr;
  Tensor<T> xrow = Tensor<T>::from(Shape{1, x_t.numel()}, x_t.values());
  Tensor<T> hrow = Tensor<T>::from(Shape{1, d}, h_prev.values());
  Tensor<T> crow = Tensor<T>::from(Shape{1, d}, c_prev.values());
  Tensor<T> z = add(tape, matmul(tape, xrow, p.W_x),
                    matmul(tape, hrow, p.W_h));
  z = add_bias(tape, z, p.bias);
  auto gates = split(tape, z, {d, d, d, d}, 1);
  Tensor<T> c = add(tape, mul(tape, sigmoid(tape, gates[1]), crow),
                    mul(tape, sigmoid(tape, gates[0]), tanh(tape, gates[2])));
  Tensor<T> h = mul(tape, sigmoid(tape, gates[3]), tanh(tape, c));
  LstmStepResult<T> r;
  r.h = Tensor<T>::from(Shape{d}, h.values());
  r.c = Tensor<T>::from(Shape{d}, c.values());
  return r;
}

}  // namespace srnmt
