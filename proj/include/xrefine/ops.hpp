#pragma once

#include <cmath>
#include <utility>

#include "xrefine/tensor.hpp"

// Differentiable numerical primitives for the refinement network. Forward
// functions are pure; each has an explicit backward companion that takes the
// forward inputs (and, where cheaper, the forward output) plus the upstream
// cotangent. There is no graph engine: the network composes these by hand.

namespace xrefine {

template <class S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// Unrolls 3x3 receptive fields into a (Cin*9) x (Ho*Wo) matrix so the
// convolution becomes a single GEMM. pad is 0 or 1.
template <class S>
MatrixX<S> im2col_3x3(const Tensor<S>& input, int pad) {
  const int ci_n = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int ho = h + 2 * pad - 2, wo = w + 2 * pad - 2;
  MatrixX<S> m = MatrixX<S>::Zero(ci_n * 9, ho * wo);
  for (int ci = 0; ci < ci_n; ++ci) {
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        S* row = m.row(ci * 9 + dy * 3 + dx).data();
        for (int y = 0; y < ho; ++y) {
          const int sy = y + dy - pad;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < wo; ++x) {
            const int sx = x + dx - pad;
            if (sx >= 0 && sx < w) row[y * wo + x] = input(ci, sy, sx);
          }
        }
      }
    }
  }
  return m;
}

template <class S>
void check_conv_shapes(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                       bool padded) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W]");
  if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3)
    throw ShapeError("conv2d: kernel must be [Cout,Cin,3,3]");
  if (kernel.dim(1) != input.dim(0)) throw ShapeError("conv2d: input/kernel channel mismatch");
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
    throw ShapeError("conv2d: bias must be [Cout]");
  if (!padded && (input.dim(1) < 3 || input.dim(2) < 3))
    throw ShapeError("conv2d: input smaller than kernel without padding");
}

}  // namespace detail

/// 2D cross-correlation with a 3x3 kernel. padded=true zero-pads by one pixel
/// and preserves the spatial size; padded=false shrinks each spatial dim by 2.
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 bool padded) {
  detail::check_conv_shapes(input, kernel, bias, padded);
  const int pad = padded ? 1 : 0;
  const int co_n = kernel.dim(0), ci_n = input.dim(0);
  const int ho = input.dim(1) + 2 * pad - 2, wo = input.dim(2) + 2 * pad - 2;

  MatrixX<S> cols = detail::im2col_3x3(input, pad);
  Tensor<S> out = Tensor<S>::zeros({co_n, ho, wo});
  auto out_m = out.as_matrix(co_n, ho * wo);
  out_m.noalias() = kernel.as_matrix(co_n, ci_n * 9) * cols;
  for (int co = 0; co < co_n; ++co) out_m.row(co).array() += bias(co);
  return out;
}

template <class S>
struct Conv2dGrads {
  Tensor<S> input, kernel, bias;
};

template <class S>
Conv2dGrads<S> conv2d_backward(const Tensor<S>& input, const Tensor<S>& kernel, bool padded,
                               const Tensor<S>& upstream) {
  const int pad = padded ? 1 : 0;
  const int co_n = kernel.dim(0), ci_n = input.dim(0);
  const int h = input.dim(1), w = input.dim(2);
  const int ho = h + 2 * pad - 2, wo = w + 2 * pad - 2;
  if (upstream.rank() != 3 || upstream.dim(0) != co_n || upstream.dim(1) != ho ||
      upstream.dim(2) != wo)
    throw ShapeError("conv2d_backward: upstream shape mismatch");

  Conv2dGrads<S> g;
  g.input = Tensor<S>::zeros(input.shape);
  g.kernel = Tensor<S>::zeros(kernel.shape);
  g.bias = Tensor<S>::zeros({co_n});

  auto up_m = upstream.as_matrix(co_n, ho * wo);
  for (int co = 0; co < co_n; ++co) g.bias(co) = up_m.row(co).sum();

  MatrixX<S> cols = detail::im2col_3x3(input, pad);
  g.kernel.as_matrix(co_n, ci_n * 9).noalias() = up_m * cols.transpose();

  // col2im: scatter-add the GEMM result back onto the input grid.
  MatrixX<S> dcols = kernel.as_matrix(co_n, ci_n * 9).transpose() * up_m;
  for (int ci = 0; ci < ci_n; ++ci) {
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        const S* row = dcols.row(ci * 9 + dy * 3 + dx).data();
        for (int y = 0; y < ho; ++y) {
          const int sy = y + dy - pad;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < wo; ++x) {
            const int sx = x + dx - pad;
            if (sx >= 0 && sx < w) g.input(ci, sy, sx) += row[y * wo + x];
          }
        }
      }
    }
  }
  return g;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = x;
  for (S& v : y.data) v = v > S(0) ? v : S(0);
  return y;
}

/// Subgradient at 0 is taken as 0.
template <class S>
Tensor<S> relu_backward(const Tensor<S>& x, const Tensor<S>& upstream) {
  require_same_shape(x, upstream, "relu_backward");
  Tensor<S> g = upstream;
  for (size_t i = 0; i < g.data.size(); ++i)
    if (x.data[i] <= S(0)) g.data[i] = S(0);
  return g;
}

template <class S>
Tensor<S> tanh_map(const Tensor<S>& x) {
  Tensor<S> y = x;
  for (S& v : y.data) v = std::tanh(v);
  return y;
}

/// Takes the forward *output* y = tanh(x).
template <class S>
Tensor<S> tanh_backward(const Tensor<S>& y, const Tensor<S>& upstream) {
  require_same_shape(y, upstream, "tanh_backward");
  Tensor<S> g = upstream;
  for (size_t i = 0; i < g.data.size(); ++i) g.data[i] *= S(1) - y.data[i] * y.data[i];
  return g;
}

/// Softmax over the flattened tensor, with max-subtraction for stability.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, S temperature) {
  if (!(temperature > S(0))) throw NumericalError("softmax: temperature must be > 0");
  Tensor<S> y = x;
  S mx = y.data[0];
  for (S v : y.data) mx = std::max(mx, v);
  S sum = S(0);
  for (S& v : y.data) {
    v = std::exp((v - mx) / temperature);
    sum += v;
  }
  for (S& v : y.data) v /= sum;
  return y;
}

/// Takes the forward output y = softmax(x, temperature).
template <class S>
Tensor<S> softmax_backward(const Tensor<S>& y, const Tensor<S>& upstream, S temperature) {
  require_same_shape(y, upstream, "softmax_backward");
  S dot = S(0);
  for (size_t i = 0; i < y.data.size(); ++i) dot += upstream.data[i] * y.data[i];
  Tensor<S> g = y;
  for (size_t i = 0; i < g.data.size(); ++i)
    g.data[i] = y.data[i] * (upstream.data[i] - dot) / temperature;
  return g;
}

template <class S>
struct AttentionWeights {
  Tensor<S> wq, wk, wv, wo;  // each [D, D], applied as row-vector times matrix
  int heads = 4;

  template <class T>
  AttentionWeights<T> cast() const {
    return {wq.template cast<T>(), wk.template cast<T>(), wv.template cast<T>(),
            wo.template cast<T>(), heads};
  }
};

template <class S>
struct AttentionContext {
  Tensor<S> query, kv;
  MatrixX<S> q, k, v;                 // [N, D] projections
  std::vector<MatrixX<S>> attn;       // per head, [N, N] softmaxed rows
  MatrixX<S> concat;                  // [N, D] heads concatenated
};

namespace detail {

template <class S>
void check_attention_shapes(const Tensor<S>& query, const Tensor<S>& kv,
                            const AttentionWeights<S>& w) {
  if (query.rank() != 2 || kv.rank() != 2) throw ShapeError("attention: sequences must be [N,D]");
  if (query.dim(1) != kv.dim(1) || query.dim(0) != kv.dim(0))
    throw ShapeError("attention: query/kv shape mismatch");
  const int d = query.dim(1);
  for (const Tensor<S>* m : {&w.wq, &w.wk, &w.wv, &w.wo})
    if (m->rank() != 2 || m->dim(0) != d || m->dim(1) != d)
      throw ShapeError("attention: projection must be [D,D]");
  if (w.heads <= 0 || d % w.heads != 0)
    throw ShapeError("attention: D not divisible by head count");
}

}  // namespace detail

/// One block of multi-head scaled dot-product cross-attention with a learned
/// output projection and an additive residual from the query stream.
template <class S>
Tensor<S> multi_head_cross_attention(const Tensor<S>& query_seq, const Tensor<S>& kv_seq,
                                     const AttentionWeights<S>& w,
                                     AttentionContext<S>* ctx = nullptr) {
  detail::check_attention_shapes(query_seq, kv_seq, w);
  const int n = query_seq.dim(0), d = query_seq.dim(1);
  const int dh = d / w.heads;
  const S scale = S(1) / std::sqrt(S(dh));

  auto x_q = query_seq.as_matrix(n, d);
  auto x_kv = kv_seq.as_matrix(n, d);
  MatrixX<S> q = x_q * w.wq.as_matrix(d, d);
  MatrixX<S> k = x_kv * w.wk.as_matrix(d, d);
  MatrixX<S> v = x_kv * w.wv.as_matrix(d, d);

  MatrixX<S> concat(n, d);
  std::vector<MatrixX<S>> attn(static_cast<size_t>(w.heads));
  for (int h = 0; h < w.heads; ++h) {
    MatrixX<S> scores = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    for (int i = 0; i < n; ++i) {
      S mx = scores.row(i).maxCoeff();
      S sum = S(0);
      for (int j = 0; j < n; ++j) {
        scores(i, j) = std::exp(scores(i, j) - mx);
        sum += scores(i, j);
      }
      scores.row(i) /= sum;
    }
    concat.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    attn[static_cast<size_t>(h)] = std::move(scores);
  }

  Tensor<S> out = Tensor<S>::zeros(query_seq.shape);
  out.as_matrix(n, d).noalias() = concat * w.wo.as_matrix(d, d) + x_q;

  if (ctx) {
    ctx->query = query_seq;
    ctx->kv = kv_seq;
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->attn = std::move(attn);
    ctx->concat = std::move(concat);
  }
  return out;
}

template <class S>
struct AttentionGrads {
  Tensor<S> query, kv;
  Tensor<S> wq, wk, wv, wo;
};

template <class S>
AttentionGrads<S> multi_head_cross_attention_backward(const AttentionContext<S>& ctx,
                                                      const AttentionWeights<S>& w,
                                                      const Tensor<S>& upstream) {
  const int n = ctx.query.dim(0), d = ctx.query.dim(1);
  const int dh = d / w.heads;
  const S scale = S(1) / std::sqrt(S(dh));
  require_same_shape(ctx.query, upstream, "attention_backward");

  auto up = upstream.as_matrix(n, d);
  MatrixX<S> d_concat = up * w.wo.as_matrix(d, d).transpose();

  AttentionGrads<S> g;
  g.wo = Tensor<S>::zeros({d, d});
  g.wo.as_matrix(d, d).noalias() = ctx.concat.transpose() * up;

  MatrixX<S> dq = MatrixX<S>::Zero(n, d), dk = MatrixX<S>::Zero(n, d), dv = MatrixX<S>::Zero(n, d);
  for (int h = 0; h < w.heads; ++h) {
    const MatrixX<S>& a = ctx.attn[static_cast<size_t>(h)];
    MatrixX<S> d_oh = d_concat.middleCols(h * dh, dh);
    MatrixX<S> da = d_oh * ctx.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * d_oh;

    // softmax rows: ds_ij = a_ij * (da_ij - sum_k da_ik a_ik)
    MatrixX<S> ds(n, n);
    for (int i = 0; i < n; ++i) {
      S dot = a.row(i).dot(da.row(i));
      for (int j = 0; j < n; ++j) ds(i, j) = a(i, j) * (da(i, j) - dot);
    }
    dq.middleCols(h * dh, dh).noalias() = ds * ctx.k.middleCols(h * dh, dh) * scale;
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * ctx.q.middleCols(h * dh, dh) * scale;
  }

  auto x_q = ctx.query.as_matrix(n, d);
  auto x_kv = ctx.kv.as_matrix(n, d);
  g.wq = Tensor<S>::zeros({d, d});
  g.wk = Tensor<S>::zeros({d, d});
  g.wv = Tensor<S>::zeros({d, d});
  g.wq.as_matrix(d, d).noalias() = x_q.transpose() * dq;
  g.wk.as_matrix(d, d).noalias() = x_kv.transpose() * dk;
  g.wv.as_matrix(d, d).noalias() = x_kv.transpose() * dv;

  g.query = Tensor<S>::zeros(ctx.query.shape);
  g.query.as_matrix(n, d).noalias() = dq * w.wq.as_matrix(d, d).transpose() + up;  // + residual
  g.kv = Tensor<S>::zeros(ctx.kv.shape);
  g.kv.as_matrix(n, d).noalias() = dk * w.wk.as_matrix(d, d).transpose() +
                                   dv * w.wv.as_matrix(d, d).transpose();
  return g;
}

template <class S>
struct AdamParams {
  S lr;
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

template <class S>
struct AdamState {
  std::vector<Tensor<S>> m, v;
  long step = 0;

  static AdamState init(const std::vector<Tensor<S>*>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const Tensor<S>* p : params) {
      st.m.push_back(Tensor<S>::zeros(p->shape));
      st.v.push_back(Tensor<S>::zeros(p->shape));
    }
    return st;
  }
};

/// Standard Adam update with bias correction, in place.
template <class S>
void adam_step(const std::vector<Tensor<S>*>& params, const std::vector<const Tensor<S>*>& grads,
               AdamState<S>& state, const AdamParams<S>& hp) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  state.step += 1;
  const S c1 = S(1) - std::pow(hp.beta1, S(state.step));
  const S c2 = S(1) - std::pow(hp.beta2, S(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i];
    const Tensor<S>& g = *grads[i];
    require_same_shape(p, g, "adam_step");
    require_same_shape(p, state.m[i], "adam_step state");
    for (size_t j = 0; j < p.data.size(); ++j) {
      S& m = state.m[i].data[j];
      S& v = state.v[i].data[j];
      m = hp.beta1 * m + (S(1) - hp.beta1) * g.data[j];
      v = hp.beta2 * v + (S(1) - hp.beta2) * g.data[j] * g.data[j];
      p.data[j] -= hp.lr * (m / c1) / (std::sqrt(v / c2) + hp.eps);
    }
  }
}

}  // namespace xrefine
