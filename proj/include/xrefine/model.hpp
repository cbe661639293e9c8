#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xrefine/ops.hpp"

// The refinement network: a five-conv patch encoder, bidirectional multi-head
// cross-attention between the two patch embeddings, a tanh score head, and a
// spatial soft-argmax that turns each score map into a sub-pixel offset.

namespace xrefine {

enum class RefineMode { Both, SecondOnly };

struct ModelConfig {
  int patch_size = 11;
  int embed_spatial = 3;   // score map / embedding side length (3 small, 5 large)
  int channels_mid = 16;
  int channels_out = 64;
  int attention_blocks = 1;
  int heads = 4;
  RefineMode refine_mode = RefineMode::Both;
  double softargmax_temperature = 1.0;
  double offset_scale = 5.0;  // grid extreme (+-1) maps to += this many pixels

  static ModelConfig small(int patch = 11) {
    ModelConfig c;
    c.patch_size = patch;
    c.embed_spatial = patch - 8;
    c.attention_blocks = 1;
    c.offset_scale = (patch - 1) / 2.0;
    return c;
  }

  static ModelConfig large(int patch = 11) {
    ModelConfig c;
    c.patch_size = patch;
    c.embed_spatial = patch - 6;
    c.attention_blocks = 3;
    c.offset_scale = (patch - 1) / 2.0;
    return c;
  }

  /// Per-conv zero-padding flags. The small variant pads only the fourth
  /// convolution (11 -> 3); the large variant additionally pads the third
  /// (11 -> 5).
  std::array<bool, 5> padding_pattern() const {
    if (embed_spatial == patch_size - 8) return {false, false, false, true, false};
    if (embed_spatial == patch_size - 6) return {false, false, true, true, false};
    throw ShapeError("unsupported patch_size/embed_spatial combination");
  }

  void validate() const {
    if (patch_size < 7 || patch_size % 2 == 0)
      throw ShapeError("patch_size must be odd and >= 7");
    if (embed_spatial != 3 && embed_spatial != 5)
      throw ShapeError("embed_spatial must be 3 or 5");
    (void)padding_pattern();
    if (attention_blocks < 1) throw ShapeError("attention_blocks must be >= 1");
    if (heads < 1 || channels_out % heads != 0)
      throw ShapeError("channels_out must be divisible by heads");
    if (!(offset_scale > 0)) throw ShapeError("offset_scale must be > 0");
    if (!(softargmax_temperature > 0)) throw ShapeError("temperature must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct ModelWeights {
  ModelConfig config;
  std::array<Tensor<S>, 5> conv_w;
  std::array<Tensor<S>, 5> conv_b;
  Tensor<S> pos_encoding;  // [E*E, D], shared by both patch streams
  std::vector<AttentionWeights<S>> attention;
  Tensor<S> score_w, score_b;  // [1, D, 3, 3], [1]

  static ModelWeights zeros_like(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    const int cm = config.channels_mid, co = config.channels_out;
    const int e = config.embed_spatial;
    const std::array<int, 6> ch = {1, cm, cm, co, co, co};
    for (int i = 0; i < 5; ++i) {
      w.conv_w[i] = Tensor<S>::zeros({ch[i + 1], ch[i], 3, 3});
      w.conv_b[i] = Tensor<S>::zeros({ch[i + 1]});
    }
    w.pos_encoding = Tensor<S>::zeros({e * e, co});
    w.attention.resize(static_cast<size_t>(config.attention_blocks));
    for (auto& blk : w.attention) {
      blk.heads = config.heads;
      blk.wq = Tensor<S>::zeros({co, co});
      blk.wk = Tensor<S>::zeros({co, co});
      blk.wv = Tensor<S>::zeros({co, co});
      blk.wo = Tensor<S>::zeros({co, co});
    }
    w.score_w = Tensor<S>::zeros({1, co, 3, 3});
    w.score_b = Tensor<S>::zeros({1});
    return w;
  }

  /// Kaiming-uniform (fan-in) for conv and projection weights, zero biases,
  /// small uniform values for the positional encoding. The score head is
  /// down-scaled so an untrained model starts near the identity refinement
  /// (offsets well under a tenth of a pixel) while every layer still
  /// receives gradient from the first step. Fully seeded.
  static ModelWeights init(const ModelConfig& config, uint64_t seed) {
    ModelWeights w = zeros_like(config);
    Rng rng(seed);
    auto kaiming = [&rng](Tensor<S>& t, long fan_in) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (S& v : t.data) v = static_cast<S>(rng.uniform(-bound, bound));
    };
    for (int i = 0; i < 5; ++i) kaiming(w.conv_w[i], w.conv_w[i].dim(1) * 9);
    // Patch intensities live in [0,1] with mean near 0.5; start conv1 biases
    // at -0.5 * (kernel sum) so first-layer pre-activations are zero-mean and
    // the ReLUs begin half-active instead of saturating on the input mean.
    for (int f = 0; f < w.conv_w[0].dim(0); ++f) {
      S s = 0;
      for (int j = 0; j < 9; ++j) s += w.conv_w[0](f, 0, j / 3, j % 3);
      w.conv_b[0](f) = S(-0.5) * s;
    }
    for (S& v : w.pos_encoding.data) v = static_cast<S>(rng.uniform(-0.1, 0.1));
    for (auto& blk : w.attention) {
      kaiming(blk.wq, config.channels_out);
      kaiming(blk.wk, config.channels_out);
      kaiming(blk.wv, config.channels_out);
      kaiming(blk.wo, config.channels_out);
    }
    kaiming(w.score_w, config.channels_out * 9);
    for (S& v : w.score_w.data) v *= S(0.05);
    return w;
  }

  /// Visits every learnable tensor in a fixed, documented order. The order is
  /// load-bearing: serialization, Adam state and gradient accumulation all
  /// rely on it.
  template <class F>
  void for_each_param(F&& f) {
    for (int i = 0; i < 5; ++i) {
      f("encoder.conv" + std::to_string(i) + ".weight", conv_w[i]);
      f("encoder.conv" + std::to_string(i) + ".bias", conv_b[i]);
    }
    f(std::string("pos_encoding"), pos_encoding);
    for (size_t b = 0; b < attention.size(); ++b) {
      const std::string p = "attention." + std::to_string(b) + ".";
      f(p + "wq", attention[b].wq);
      f(p + "wk", attention[b].wk);
      f(p + "wv", attention[b].wv);
      f(p + "wo", attention[b].wo);
    }
    f(std::string("score.weight"), score_w);
    f(std::string("score.bias"), score_b);
  }

  template <class F>
  void for_each_param(F&& f) const {
    const_cast<ModelWeights*>(this)->for_each_param(
        [&](const std::string& name, Tensor<S>& t) { f(name, static_cast<const Tensor<S>&>(t)); });
  }

  long parameter_count() const {
    long n = 0;
    for_each_param([&n](const std::string&, const Tensor<S>& t) { n += t.size(); });
    return n;
  }

  template <class T>
  ModelWeights<T> cast() const {
    ModelWeights<T> out = ModelWeights<T>::zeros_like(config);
    const_cast<ModelWeights*>(this)->for_each_param([&out](const std::string& name,
                                                           Tensor<S>& t) {
      out.for_each_param([&](const std::string& oname, Tensor<T>& ot) {
        if (oname == name) ot = t.template cast<T>();
      });
    });
    return out;
  }
};

template <class S>
struct Offset {
  S dx = S(0), dy = S(0);
};

template <class S>
struct RefinementOutput {
  Offset<S> offset_a, offset_b;
  Tensor<S> score_map_a, score_map_b;  // [E, E]; zeros on the A side in SecondOnly mode
};

// ---------------------------------------------------------------------------
// Token layout: embedding [C,E,E] <-> sequence [E*E, C], token t = y*E + x.

template <class S>
Tensor<S> embedding_to_tokens(const Tensor<S>& e) {
  const int c = e.dim(0), h = e.dim(1), w = e.dim(2);
  Tensor<S> t = Tensor<S>::zeros({h * w, c});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < h * w; ++p) t(p, ci) = e.data[static_cast<size_t>(ci) * h * w + p];
  return t;
}

template <class S>
Tensor<S> tokens_to_embedding(const Tensor<S>& t, int side) {
  const int c = t.dim(1);
  Tensor<S> e = Tensor<S>::zeros({c, side, side});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < side * side; ++p) e.data[static_cast<size_t>(ci) * side * side + p] = t(p, ci);
  return e;
}

// ---------------------------------------------------------------------------
// Forward passes with optional recording for the reverse pass.

template <class S>
struct EncodeTrace {
  std::array<Tensor<S>, 5> conv_in;   // input of conv i
  std::array<Tensor<S>, 5> pre_act;   // conv output before ReLU
};

template <class S>
Tensor<S> encode(const Tensor<S>& patch, const ModelWeights<S>& w, EncodeTrace<S>* trace = nullptr) {
  if (patch.rank() != 3 || patch.dim(0) != 1 || patch.dim(1) != w.config.patch_size ||
      patch.dim(2) != w.config.patch_size)
    throw ShapeError("encode: patch must be [1,P,P] with P = config.patch_size");
  const auto pads = w.config.padding_pattern();
  Tensor<S> x = patch;
  for (int i = 0; i < 5; ++i) {
    if (trace) trace->conv_in[i] = x;
    Tensor<S> z = conv2d(x, w.conv_w[i], w.conv_b[i], pads[i]);
    if (trace) trace->pre_act[i] = z;
    x = (i < 4) ? relu(z) : std::move(z);  // embeddings feed attention un-activated
  }
  return x;
}

template <class S>
void encode_backward(const EncodeTrace<S>& trace, const ModelWeights<S>& w,
                     const Tensor<S>& d_embedding, ModelWeights<S>& grad,
                     Tensor<S>* d_patch = nullptr) {
  const auto pads = w.config.padding_pattern();
  Tensor<S> d = d_embedding;
  for (int i = 4; i >= 0; --i) {
    if (i < 4) d = relu_backward(trace.pre_act[i], d);
    Conv2dGrads<S> g = conv2d_backward(trace.conv_in[i], w.conv_w[i], pads[i], d);
    for (size_t j = 0; j < g.kernel.data.size(); ++j) grad.conv_w[i].data[j] += g.kernel.data[j];
    for (size_t j = 0; j < g.bias.data.size(); ++j) grad.conv_b[i].data[j] += g.bias.data[j];
    d = std::move(g.input);
  }
  if (d_patch) *d_patch = std::move(d);
}

template <class S>
struct CrossUpdateTrace {
  Tensor<S> tokens_a0, tokens_b0;  // sequences entering block 0 (pos already added)
  std::vector<AttentionContext<S>> ctx_a, ctx_b;  // per block: A-queries-B, B-queries-A
};

/// Bidirectional cross-attention between the two embeddings. Both directions
/// of each block read the block's own input sequences as key/value, so the
/// two updates are order-free; the positional encoding is added once, before
/// the first block.
template <class S>
std::pair<Tensor<S>, Tensor<S>> cross_update(const Tensor<S>& e_a, const Tensor<S>& e_b,
                                             const ModelWeights<S>& w,
                                             CrossUpdateTrace<S>* trace = nullptr) {
  require_same_shape(e_a, e_b, "cross_update");
  const int side = e_a.dim(1);
  Tensor<S> a = embedding_to_tokens(e_a);
  Tensor<S> b = embedding_to_tokens(e_b);
  require_same_shape(a, w.pos_encoding, "cross_update positional encoding");
  for (size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] += w.pos_encoding.data[i];
    b.data[i] += w.pos_encoding.data[i];
  }
  if (trace) {
    trace->tokens_a0 = a;
    trace->tokens_b0 = b;
    trace->ctx_a.resize(w.attention.size());
    trace->ctx_b.resize(w.attention.size());
  }
  for (size_t blk = 0; blk < w.attention.size(); ++blk) {
    Tensor<S> a_next = multi_head_cross_attention(a, b, w.attention[blk],
                                                  trace ? &trace->ctx_a[blk] : nullptr);
    Tensor<S> b_next = multi_head_cross_attention(b, a, w.attention[blk],
                                                  trace ? &trace->ctx_b[blk] : nullptr);
    a = std::move(a_next);
    b = std::move(b_next);
  }
  return {tokens_to_embedding(a, side), tokens_to_embedding(b, side)};
}

template <class S>
void cross_update_backward(const CrossUpdateTrace<S>& trace, const ModelWeights<S>& w,
                           const Tensor<S>& d_ea_out, const Tensor<S>& d_eb_out,
                           ModelWeights<S>& grad, Tensor<S>* d_ea_in, Tensor<S>* d_eb_in) {
  const int side = d_ea_out.dim(1);
  Tensor<S> da = embedding_to_tokens(d_ea_out);
  Tensor<S> db = embedding_to_tokens(d_eb_out);
  for (size_t blk = w.attention.size(); blk-- > 0;) {
    AttentionGrads<S> ga = multi_head_cross_attention_backward(trace.ctx_a[blk], w.attention[blk], da);
    AttentionGrads<S> gb = multi_head_cross_attention_backward(trace.ctx_b[blk], w.attention[blk], db);
    auto& gw = grad.attention[blk];
    for (size_t j = 0; j < gw.wq.data.size(); ++j) {
      gw.wq.data[j] += ga.wq.data[j] + gb.wq.data[j];
      gw.wk.data[j] += ga.wk.data[j] + gb.wk.data[j];
      gw.wv.data[j] += ga.wv.data[j] + gb.wv.data[j];
      gw.wo.data[j] += ga.wo.data[j] + gb.wo.data[j];
    }
    // a fed direction A as query and direction B as key/value
    da = ga.query;
    for (size_t j = 0; j < da.data.size(); ++j) da.data[j] += gb.kv.data[j];
    db = gb.query;
    for (size_t j = 0; j < db.data.size(); ++j) db.data[j] += ga.kv.data[j];
  }
  for (size_t j = 0; j < grad.pos_encoding.data.size(); ++j)
    grad.pos_encoding.data[j] += da.data[j] + db.data[j];
  if (d_ea_in) *d_ea_in = tokens_to_embedding(da, side);
  if (d_eb_in) *d_eb_in = tokens_to_embedding(db, side);
}

template <class S>
struct ScoreTrace {
  Tensor<S> input;    // [C,E,E]
  Tensor<S> tanh_out; // [1,E,E]
};

/// One padded conv to a single channel followed by tanh; values in (-1, 1).
template <class S>
Tensor<S> score_head(const Tensor<S>& e, const ModelWeights<S>& w, ScoreTrace<S>* trace = nullptr) {
  Tensor<S> z = conv2d(e, w.score_w, w.score_b, /*padded=*/true);
  Tensor<S> s = tanh_map(z);
  if (trace) {
    trace->input = e;
    trace->tanh_out = s;
  }
  const int side = e.dim(1);
  return Tensor<S>::from({side, side}, std::move(s.data));
}

template <class S>
Tensor<S> score_head_backward(const ScoreTrace<S>& trace, const ModelWeights<S>& w,
                              const Tensor<S>& d_score, ModelWeights<S>& grad) {
  Tensor<S> up = Tensor<S>::from(trace.tanh_out.shape, d_score.data);
  Tensor<S> dz = tanh_backward(trace.tanh_out, up);
  Conv2dGrads<S> g = conv2d_backward(trace.input, w.score_w, /*padded=*/true, dz);
  for (size_t j = 0; j < g.kernel.data.size(); ++j) grad.score_w.data[j] += g.kernel.data[j];
  grad.score_b.data[0] += g.bias.data[0];
  return std::move(g.input);
}

/// Expectation of grid coordinates under softmax(score / temperature). The
/// grid spans [-1,1]^2 over the map and the result is scaled into pixels, so
/// offsets are bounded by +-offset_scale per axis for any input.
template <class S>
Offset<S> soft_argmax(const Tensor<S>& score_map, S temperature, S offset_scale,
                      Tensor<S>* probs_out = nullptr) {
  if (score_map.rank() != 2 || score_map.dim(0) != score_map.dim(1) || score_map.dim(0) % 2 == 0)
    throw ShapeError("soft_argmax: score map must be square with odd side");
  const int e = score_map.dim(0);
  Tensor<S> p = softmax(score_map, temperature);
  Offset<S> off;
  for (int y = 0; y < e; ++y) {
    const S gy = S(-1) + S(2) * y / S(e - 1);
    for (int x = 0; x < e; ++x) {
      const S gx = S(-1) + S(2) * x / S(e - 1);
      off.dx += p(y, x) * gx;
      off.dy += p(y, x) * gy;
    }
  }
  off.dx *= offset_scale;
  off.dy *= offset_scale;
  if (probs_out) *probs_out = std::move(p);
  return off;
}

template <class S>
Tensor<S> soft_argmax_backward(const Tensor<S>& probs, S temperature, S offset_scale, S d_dx,
                               S d_dy) {
  const int e = probs.dim(0);
  Tensor<S> dp = Tensor<S>::zeros(probs.shape);
  for (int y = 0; y < e; ++y) {
    const S gy = S(-1) + S(2) * y / S(e - 1);
    for (int x = 0; x < e; ++x) {
      const S gx = S(-1) + S(2) * x / S(e - 1);
      dp(y, x) = offset_scale * (d_dx * gx + d_dy * gy);
    }
  }
  return softmax_backward(probs, dp, temperature);
}

template <class S>
struct RefineTrace {
  EncodeTrace<S> enc_a, enc_b;
  CrossUpdateTrace<S> cross;
  ScoreTrace<S> score_a, score_b;
  Tensor<S> probs_a, probs_b;
};

/// Full pipeline for one match: encode both patches, exchange information via
/// cross-attention, score, soft-argmax. In SecondOnly mode the A side keeps
/// its keypoint: its score head and soft-argmax are skipped and offset_a is
/// exactly (0,0).
template <class S>
RefinementOutput<S> refine_pair(const Tensor<S>& patch_a, const Tensor<S>& patch_b,
                                const ModelWeights<S>& w, RefineTrace<S>* trace = nullptr) {
  const S temp = static_cast<S>(w.config.softargmax_temperature);
  const S scale = static_cast<S>(w.config.offset_scale);
  Tensor<S> ea = encode(patch_a, w, trace ? &trace->enc_a : nullptr);
  Tensor<S> eb = encode(patch_b, w, trace ? &trace->enc_b : nullptr);
  auto [ua, ub] = cross_update(ea, eb, w, trace ? &trace->cross : nullptr);

  RefinementOutput<S> out;
  const int e = w.config.embed_spatial;
  if (w.config.refine_mode == RefineMode::Both) {
    out.score_map_a = score_head(ua, w, trace ? &trace->score_a : nullptr);
    out.offset_a = soft_argmax(out.score_map_a, temp, scale, trace ? &trace->probs_a : nullptr);
  } else {
    out.score_map_a = Tensor<S>::zeros({e, e});
  }
  out.score_map_b = score_head(ub, w, trace ? &trace->score_b : nullptr);
  out.offset_b = soft_argmax(out.score_map_b, temp, scale, trace ? &trace->probs_b : nullptr);
  return out;
}

/// Reverse pass through the whole pipeline; accumulates into `grad` (a
/// zeros_like-initialized weight set). Gradients from the two streams land on
/// the shared encoder/attention/score weights in a fixed order (A then B).
template <class S>
void refine_pair_backward(const RefineTrace<S>& trace, const ModelWeights<S>& w,
                          const Offset<S>& d_offset_a, const Offset<S>& d_offset_b,
                          ModelWeights<S>& grad, Tensor<S>* d_patch_a = nullptr,
                          Tensor<S>* d_patch_b = nullptr) {
  const S temp = static_cast<S>(w.config.softargmax_temperature);
  const S scale = static_cast<S>(w.config.offset_scale);
  const int e = w.config.embed_spatial;

  Tensor<S> d_ua, d_ub;
  if (w.config.refine_mode == RefineMode::Both) {
    Tensor<S> ds_a = soft_argmax_backward(trace.probs_a, temp, scale, d_offset_a.dx, d_offset_a.dy);
    d_ua = score_head_backward(trace.score_a, w, ds_a, grad);
  } else {
    d_ua = Tensor<S>::zeros({w.config.channels_out, e, e});
  }
  Tensor<S> ds_b = soft_argmax_backward(trace.probs_b, temp, scale, d_offset_b.dx, d_offset_b.dy);
  d_ub = score_head_backward(trace.score_b, w, ds_b, grad);

  Tensor<S> d_ea, d_eb;
  cross_update_backward(trace.cross, w, d_ua, d_ub, grad, &d_ea, &d_eb);
  encode_backward(trace.enc_a, w, d_ea, grad, d_patch_a);
  encode_backward(trace.enc_b, w, d_eb, grad, d_patch_b);
}

// ---------------------------------------------------------------------------
// Weight files ("XRFW"). Byte layout documented in the README; float32 only.

void save_weights(const ModelWeights<float>& weights, const std::filesystem::path& path);
ModelWeights<float> load_weights(const std::filesystem::path& path);

/// Loads and rejects weights whose embedded config differs from `expected`.
ModelWeights<float> load_weights(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace xrefine
