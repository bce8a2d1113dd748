#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ldseg/gemm.hpp"
#include "ldseg/tensor.hpp"

namespace ldseg {

// Reverse-mode tape. Nodes are appended in evaluation order, so backward is a
// single reverse sweep with no topological sort. Values live on the tape for
// the lifetime of one forward/backward pass; a fresh Tape is built per step.
//
// With grad_enabled=false no closures are recorded and the same code path
// doubles as the inference engine.
template <typename S>
class Tape {
public:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // empty until first accumulation
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  bool grad_enabled = true;
  bool check_finite = false;

  int add_node(TensorT<S> value, bool needs_grad) {
    if (check_finite) value.require_finite("tape op output");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int leaf(TensorT<S> value, bool needs_grad = false) { return add_node(std::move(value), needs_grad); }

  // Install the backward closure for a node; dropped when the node does not
  // participate in the gradient so inference pays nothing.
  template <typename F>
  void set_backward(int id, F&& fn) {
    Node& n = node(id);
    if (n.needs_grad) n.backward = std::forward<F>(fn);
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const TensorT<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Accumulation target for a node's gradient, allocated on first touch.
  TensorT<S>& grad_buf(int id) {
    Node& n = node(id);
    if (n.grad.numel() == 0) n.grad = TensorT<S>(n.value.shape);
    return n.grad;
  }

  bool grad_touched(int id) const { return node(id).grad.numel() != 0; }

  void backward(int loss_id) {
    Node& loss = node(loss_id);
    if (loss.value.numel() != 1) throw shape_error("backward: loss must be a scalar");
    if (!loss.needs_grad)
      throw value_error("backward: loss is detached from the recorded graph (no gradient path)");
    grad_buf(loss_id).data[0] = S(1);
    for (int id = loss_id; id >= 0; --id) {
      Node& n = node(id);
      if (n.needs_grad && n.grad.numel() != 0 && n.backward) n.backward(*this);
    }
  }

private:
  std::vector<Node> nodes_;
};

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  Var() = default;
  Var(Tape<S>* t, int i) : tape(t), id(i) {}
  const TensorT<S>& val() const { return tape->val(id); }
  bool needs_grad() const { return tape->node(id).needs_grad; }
};

namespace ad {

template <typename S>
Var<S> leaf(Tape<S>& t, TensorT<S> v, bool needs_grad = false) {
  return Var<S>(&t, t.leaf(std::move(v), needs_grad));
}

template <typename S>
void accumulate(TensorT<S>& dst, const TensorT<S>& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += src.data[i];
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  check_same_shape(a.val(), b.val(), "add");
  Tape<S>& t = *a.tape;
  TensorT<S> out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.val().data[i];
  const int ia = a.id, ib = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    if (tp.node(ia).needs_grad) accumulate(tp.grad_buf(ia), g);
    if (tp.node(ib).needs_grad) accumulate(tp.grad_buf(ib), g);
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tape<S>& t = *a.tape;
  TensorT<S> out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.val().data[i];
  const int ia = a.id, ib = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    if (tp.node(ia).needs_grad) accumulate(tp.grad_buf(ia), g);
    if (tp.node(ib).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] -= g.data[i];
    }
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tape<S>& t = *a.tape;
  TensorT<S> out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.val().data[i];
  const int ia = a.id, ib = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& av = tp.val(ia);
    const TensorT<S>& bv = tp.val(ib);
    if (tp.node(ia).needs_grad) {
      TensorT<S>& ga = tp.grad_buf(ia);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    }
    if (tp.node(ib).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> scale(Var<S> a, double c) {
  Tape<S>& t = *a.tape;
  TensorT<S> out = a.val();
  for (auto& v : out.data) v = static_cast<S>(v * c);
  const int ia = a.id;
  int id = t.add_node(std::move(out), a.needs_grad());
  t.set_backward(id, [id, ia, c](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    TensorT<S>& ga = tp.grad_buf(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += static_cast<S>(g.data[i] * c);
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> silu(Var<S> x) {
  Tape<S>& t = *x.tape;
  TensorT<S> out = x.val();
  for (auto& v : out.data) {
    const double xv = static_cast<double>(v);
    v = static_cast<S>(xv / (1.0 + std::exp(-xv)));
  }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& xv = tp.val(ix);
    TensorT<S>& gx = tp.grad_buf(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double v = static_cast<double>(xv.data[i]);
      const double s = 1.0 / (1.0 + std::exp(-v));
      gx.data[i] += static_cast<S>(static_cast<double>(g.data[i]) * s * (1.0 + v * (1.0 - s)));
    }
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> reshape(Var<S> x, std::vector<int> new_shape) {
  Tape<S>& t = *x.tape;
  TensorT<S> out = x.val().reshaped(new_shape);
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    TensorT<S>& gx = tp.grad_buf(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += g.data[i];
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  double acc = 0.0;
  for (S v : x.val().data) acc += static_cast<double>(v);
  const int ix = x.id;
  int id = t.add_node(TensorT<S>::scalar(static_cast<S>(acc)), x.needs_grad());
  t.set_backward(id, [id, ix](Tape<S>& tp) {
    const S g = tp.node(id).grad.data[0];
    TensorT<S>& gx = tp.grad_buf(ix);
    for (auto& v : gx.data) v += g;
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.val().numel()));
}

// mean((a-b)^2)
template <typename S>
Var<S> mse(Var<S> a, Var<S> b) {
  check_same_shape(a.val(), b.val(), "mse");
  Tape<S>& t = *a.tape;
  const std::size_t n = a.val().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.val().data[i]) - static_cast<double>(b.val().data[i]);
    acc += d * d;
  }
  const int ia = a.id, ib = b.id;
  int id = t.add_node(TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n))),
                      a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib, n](Tape<S>& tp) {
    const double g = static_cast<double>(tp.node(id).grad.data[0]);
    const TensorT<S>& av = tp.val(ia);
    const TensorT<S>& bv = tp.val(ib);
    const double c = 2.0 * g / static_cast<double>(n);
    if (tp.node(ia).needs_grad) {
      TensorT<S>& ga = tp.grad_buf(ia);
      for (std::size_t i = 0; i < n; ++i)
        ga.data[i] += static_cast<S>(c * (static_cast<double>(av.data[i]) - static_cast<double>(bv.data[i])));
    }
    if (tp.node(ib).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ib);
      for (std::size_t i = 0; i < n; ++i)
        gb.data[i] -= static_cast<S>(c * (static_cast<double>(av.data[i]) - static_cast<double>(bv.data[i])));
    }
  });
  return Var<S>(&t, id);
}

// ---------------------------------------------------------------------------
// convolution

inline int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename S>
void im2col(const TensorT<S>& x, int n, int k, int stride, int pad, TensorT<S>& col) {
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
  const int P = Ho * Wo;
  S* out = col.ptr();
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          S* dst = out + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ki) * k + kj) * P +
                   static_cast<std::size_t>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < Wo; ++ow) dst[ow] = S(0);
            continue;
          }
          const S* src = &x.at4(n, c, ih, 0);
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accumulate(const TensorT<S>& col, int n, int k, int stride, int pad, TensorT<S>& gx) {
  const int C = gx.dim(1), H = gx.dim(2), W = gx.dim(3);
  const int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
  const int P = Ho * Wo;
  const S* src0 = col.ptr();
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const S* src = src0 + (static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(ki) * k + kj) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          S* dst = &gx.at4(n, c, ih, 0);
          const S* s = src + static_cast<std::size_t>(oh) * Wo;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += s[ow];
          }
        }
      }
    }
  }
}

// x[N,Cin,H,W] (*) w[Cout,Cin,k,k] + b[Cout]; cross-correlation via im2col +
// gemm. Pass a default-constructed Var (id < 0) to omit the bias.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  const TensorT<S>& wv = w.val();
  if (xv.rank() != 4 || wv.rank() != 4) throw shape_error("conv2d: expected 4-d input and weights");
  const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != Cin)
    throw shape_error("conv2d: weight expects " + std::to_string(wv.dim(1)) + " input channels, got " +
                      std::to_string(Cin));
  if (wv.dim(2) != wv.dim(3)) throw shape_error("conv2d: kernel must be square");
  if (k % 2 == 0) throw shape_error("conv2d: kernel size must be odd");
  if (stride < 1 || pad < 0) throw shape_error("conv2d: bad stride/padding");
  const bool has_bias = b.id >= 0;
  if (has_bias && (b.val().rank() != 1 || b.val().dim(0) != Cout))
    throw shape_error("conv2d: bias must be [Cout]");
  const int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw shape_error("conv2d: output would be empty");
  const int K = Cin * k * k, P = Ho * Wo;

  TensorT<S> out({N, Cout, Ho, Wo});
  TensorT<S> col({K, P});
  for (int n = 0; n < N; ++n) {
    im2col(xv, n, k, stride, pad, col);
    gemm_nn(Cout, P, K, wv.ptr(), col.ptr(), &out.at4(n, 0, 0, 0), false);
    if (has_bias) {
      for (int c = 0; c < Cout; ++c) {
        const S bv = b.val().data[static_cast<std::size_t>(c)];
        S* o = &out.at4(n, c, 0, 0);
        for (int p = 0; p < P; ++p) o[p] += bv;
      }
    }
  }

  const int ix = x.id, iw = w.id, ib = has_bias ? b.id : -1;
  const bool ng = x.needs_grad() || w.needs_grad() || (has_bias && b.needs_grad());
  int id = t.add_node(std::move(out), ng);
  t.set_backward(id, [id, ix, iw, ib, stride, pad, N, Cout, k, K, P](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& xv2 = tp.val(ix);
    const TensorT<S>& wv2 = tp.val(iw);
    const bool need_x = tp.node(ix).needs_grad;
    const bool need_w = tp.node(iw).needs_grad;
    const bool need_b = ib >= 0 && tp.node(ib).needs_grad;
    TensorT<S> col({K, P});
    TensorT<S> gcol;
    if (need_x) gcol = TensorT<S>({K, P});
    for (int n = 0; n < N; ++n) {
      const S* gn = &g.at4(n, 0, 0, 0);
      if (need_w) {
        im2col(xv2, n, k, stride, pad, col);
        gemm_nt(Cout, K, P, gn, col.ptr(), tp.grad_buf(iw).ptr(), true);
      }
      if (need_x) {
        gemm_tn(K, P, Cout, wv2.ptr(), gn, gcol.ptr(), false);
        col2im_accumulate(gcol, n, k, stride, pad, tp.grad_buf(ix));
      }
      if (need_b) {
        TensorT<S>& gb = tp.grad_buf(ib);
        for (int c = 0; c < Cout; ++c) {
          S acc = S(0);
          const S* row = gn + static_cast<std::size_t>(c) * P;
          for (int p = 0; p < P; ++p) acc += row[p];
          gb.data[static_cast<std::size_t>(c)] += acc;
        }
      }
    }
  });
  return Var<S>(&t, id);
}

// x[N,F] * w[O,F]^T + b[O]
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  const TensorT<S>& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw shape_error("linear: shape mismatch " + shape_to_string(xv.shape) + " vs " + shape_to_string(wv.shape));
  const int N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
  const bool has_bias = b.id >= 0;
  if (has_bias && (b.val().rank() != 1 || b.val().dim(0) != O)) throw shape_error("linear: bias must be [O]");
  TensorT<S> out({N, O});
  gemm_nt(N, O, F, xv.ptr(), wv.ptr(), out.ptr(), false);
  if (has_bias) {
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) out.at2(n, o) += b.val().data[static_cast<std::size_t>(o)];
  }
  const int ix = x.id, iw = w.id, ib = has_bias ? b.id : -1;
  const bool ng = x.needs_grad() || w.needs_grad() || (has_bias && b.needs_grad());
  int id = t.add_node(std::move(out), ng);
  t.set_backward(id, [id, ix, iw, ib, N, F, O](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    if (tp.node(ix).needs_grad) gemm_nn(N, F, O, g.ptr(), tp.val(iw).ptr(), tp.grad_buf(ix).ptr(), true);
    if (tp.node(iw).needs_grad) gemm_tn(O, F, N, g.ptr(), tp.val(ix).ptr(), tp.grad_buf(iw).ptr(), true);
    if (ib >= 0 && tp.node(ib).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ib);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gb.data[static_cast<std::size_t>(o)] += g.at2(n, o);
    }
  });
  return Var<S>(&t, id);
}

// Normalize each sample over all non-batch elements; no affine part, so the
// output is exactly zero-mean unit-variance up to epsilon.
template <typename S>
Var<S> layer_norm(Var<S> x, double eps) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() < 2) throw shape_error("layer_norm: need at least 2 dims [N, ...]");
  const int N = xv.dim(0);
  const std::size_t D = xv.numel() / static_cast<std::size_t>(N);
  TensorT<S> out(xv.shape);
  std::vector<double> inv_std(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const S* in = xv.ptr() + static_cast<std::size_t>(n) * D;
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += static_cast<double>(in[i]);
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double d = static_cast<double>(in[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(n)] = is;
    S* o = out.ptr() + static_cast<std::size_t>(n) * D;
    for (std::size_t i = 0; i < D; ++i) o[i] = static_cast<S>((static_cast<double>(in[i]) - mu) * is);
  }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, N, D, inv_std](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& y = tp.val(id);
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int n = 0; n < N; ++n) {
      const S* gn = g.ptr() + static_cast<std::size_t>(n) * D;
      const S* yn = y.ptr() + static_cast<std::size_t>(n) * D;
      S* gxn = gx.ptr() + static_cast<std::size_t>(n) * D;
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t i = 0; i < D; ++i) {
        gsum += static_cast<double>(gn[i]);
        gysum += static_cast<double>(gn[i]) * static_cast<double>(yn[i]);
      }
      const double gmean = gsum / static_cast<double>(D);
      const double gymean = gysum / static_cast<double>(D);
      const double is = inv_std[static_cast<std::size_t>(n)];
      for (std::size_t i = 0; i < D; ++i)
        gxn[i] += static_cast<S>(is * (static_cast<double>(gn[i]) - gmean - static_cast<double>(yn[i]) * gymean));
    }
  });
  return Var<S>(&t, id);
}

// Per-(sample, group) normalization with per-channel affine.
template <typename S>
Var<S> group_norm(Var<S> x, int groups, double eps, Var<S> gamma, Var<S> beta) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 4) throw shape_error("group_norm: expected [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (groups < 1 || C % groups != 0) throw shape_error("group_norm: channels not divisible by groups");
  if (gamma.val().numel() != static_cast<std::size_t>(C) || beta.val().numel() != static_cast<std::size_t>(C))
    throw shape_error("group_norm: affine parameters must be [C]");
  const int cg = C / groups;
  const std::size_t D = static_cast<std::size_t>(cg) * H * W;
  const std::size_t HW = static_cast<std::size_t>(H) * W;

  TensorT<S> xhat(xv.shape);
  TensorT<S> out(xv.shape);
  std::vector<double> inv_std(static_cast<std::size_t>(N) * groups);
  for (int n = 0; n < N; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(gi) * cg) * HW;
      const S* in = xv.ptr() + base;
      double mu = 0.0;
      for (std::size_t i = 0; i < D; ++i) mu += static_cast<double>(in[i]);
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (std::size_t i = 0; i < D; ++i) {
        const double d = static_cast<double>(in[i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(D);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * groups + gi] = is;
      S* xh = xhat.ptr() + base;
      for (std::size_t i = 0; i < D; ++i) xh[i] = static_cast<S>((static_cast<double>(in[i]) - mu) * is);
    }
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      const S gm = gamma.val().data[static_cast<std::size_t>(c)];
      const S bt = beta.val().data[static_cast<std::size_t>(c)];
      const S* xh = xhat.ptr() + base;
      S* o = out.ptr() + base;
      for (std::size_t i = 0; i < HW; ++i) o[i] = gm * xh[i] + bt;
    }
  }
  const int ix = x.id, ig = gamma.id, ibt = beta.id;
  const bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  int id = t.add_node(std::move(out), ng);
  // backward needs the normalized activations; park them as a constant node
  const int xhat_id = (ng && t.grad_enabled) ? t.leaf(std::move(xhat), false) : -1;
  t.set_backward(id, [id, ix, ig, ibt, xhat_id, N, C, groups, cg, HW, D, inv_std](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& xh = tp.val(xhat_id);
    const TensorT<S>& gm = tp.val(ig);
    if (tp.node(ig).needs_grad || tp.node(ibt).needs_grad) {
      TensorT<S>& ggamma = tp.grad_buf(ig);
      TensorT<S>& gbeta = tp.grad_buf(ibt);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < HW; ++i) {
            sg += static_cast<double>(g.data[base + i]);
            sgx += static_cast<double>(g.data[base + i]) * static_cast<double>(xh.data[base + i]);
          }
          gbeta.data[static_cast<std::size_t>(c)] += static_cast<S>(sg);
          ggamma.data[static_cast<std::size_t>(c)] += static_cast<S>(sgx);
        }
    }
    if (tp.node(ix).needs_grad) {
      TensorT<S>& gx = tp.grad_buf(ix);
      for (int n = 0; n < N; ++n)
        for (int gi = 0; gi < groups; ++gi) {
          double gsum = 0.0, gxsum = 0.0;
          for (int cc = 0; cc < cg; ++cc) {
            const int c = gi * cg + cc;
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            const double gmc = static_cast<double>(gm.data[static_cast<std::size_t>(c)]);
            for (std::size_t i = 0; i < HW; ++i) {
              const double gh = gmc * static_cast<double>(g.data[base + i]);
              gsum += gh;
              gxsum += gh * static_cast<double>(xh.data[base + i]);
            }
          }
          const double gmean = gsum / static_cast<double>(D);
          const double gxmean = gxsum / static_cast<double>(D);
          const double is = inv_std[static_cast<std::size_t>(n) * groups + gi];
          for (int cc = 0; cc < cg; ++cc) {
            const int c = gi * cg + cc;
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            const double gmc = static_cast<double>(gm.data[static_cast<std::size_t>(c)]);
            S* gxp = gx.ptr() + base;
            for (std::size_t i = 0; i < HW; ++i) {
              const double gh = gmc * static_cast<double>(g.data[base + i]);
              gxp[i] += static_cast<S>(is * (gh - gmean - static_cast<double>(xh.data[base + i]) * gxmean));
            }
          }
        }
    }
  });
  return Var<S>(&t, id);
}

// x[N,C,H,W] + bias[N,C] broadcast over spatial dims (time-embedding injection)
template <typename S>
Var<S> add_rowwise_bias(Var<S> x, Var<S> bias) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  const TensorT<S>& bv = bias.val();
  if (xv.rank() != 4 || bv.rank() != 2 || bv.dim(0) != xv.dim(0) || bv.dim(1) != xv.dim(1))
    throw shape_error("add_rowwise_bias: bias must be [N,C] matching input");
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t HW = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  TensorT<S> out = xv;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S b = bv.at2(n, c);
      S* o = out.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) o[i] += b;
    }
  const int ix = x.id, ib = bias.id;
  int id = t.add_node(std::move(out), x.needs_grad() || bias.needs_grad());
  t.set_backward(id, [id, ix, ib, N, C, HW](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    if (tp.node(ix).needs_grad) accumulate(tp.grad_buf(ix), g);
    if (tp.node(ib).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ib);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S* gp = g.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
          S acc = S(0);
          for (std::size_t i = 0; i < HW; ++i) acc += gp[i];
          gb.at2(n, c) += acc;
        }
    }
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const TensorT<S>& av = a.val();
  const TensorT<S>& bv = b.val();
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3))
    throw shape_error("concat_channels: incompatible shapes " + shape_to_string(av.shape) + " vs " +
                      shape_to_string(bv.shape));
  const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  TensorT<S> out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::memcpy(&out.at4(n, 0, 0, 0), &av.at4(n, 0, 0, 0), sizeof(S) * static_cast<std::size_t>(Ca) * HW);
    std::memcpy(&out.at4(n, Ca, 0, 0), &bv.at4(n, 0, 0, 0), sizeof(S) * static_cast<std::size_t>(Cb) * HW);
  }
  const int ia = a.id, ibx = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ibx, N, Ca, Cb, HW](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const int C = Ca + Cb;
    if (tp.node(ia).needs_grad) {
      TensorT<S>& ga = tp.grad_buf(ia);
      for (int n = 0; n < N; ++n) {
        const S* gp = g.ptr() + static_cast<std::size_t>(n) * C * HW;
        S* gap = ga.ptr() + static_cast<std::size_t>(n) * Ca * HW;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * HW; ++i) gap[i] += gp[i];
      }
    }
    if (tp.node(ibx).needs_grad) {
      TensorT<S>& gb = tp.grad_buf(ibx);
      for (int n = 0; n < N; ++n) {
        const S* gp = g.ptr() + static_cast<std::size_t>(n) * C * HW + static_cast<std::size_t>(Ca) * HW;
        S* gbp = gb.ptr() + static_cast<std::size_t>(n) * Cb * HW;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * HW; ++i) gbp[i] += gp[i];
      }
    }
  });
  return Var<S>(&t, id);
}

template <typename S>
Var<S> upsample_nearest2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 4) throw shape_error("upsample_nearest2: expected [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  TensorT<S> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h) {
        const S* src = &xv.at4(n, c, h, 0);
        S* d0 = &out.at4(n, c, 2 * h, 0);
        S* d1 = &out.at4(n, c, 2 * h + 1, 0);
        for (int w = 0; w < W; ++w) d0[2 * w] = d0[2 * w + 1] = d1[2 * w] = d1[2 * w + 1] = src[w];
      }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, N, C, H, W](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
          const S* g0 = &g.at4(n, c, 2 * h, 0);
          const S* g1 = &g.at4(n, c, 2 * h + 1, 0);
          S* dst = &gx.at4(n, c, h, 0);
          for (int w = 0; w < W; ++w) dst[w] += g0[2 * w] + g0[2 * w + 1] + g1[2 * w] + g1[2 * w + 1];
        }
  });
  return Var<S>(&t, id);
}

// [N,C,H,W] -> [N*heads, H*W, C/heads]
template <typename S>
Var<S> split_heads(Var<S> x, int heads) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 4) throw shape_error("split_heads: expected [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (heads < 1 || C % heads != 0) throw shape_error("split_heads: channels not divisible by head count");
  const int d = C / heads, T = H * W;
  TensorT<S> out({N * heads, T, d});
  for (int n = 0; n < N; ++n)
    for (int a = 0; a < heads; ++a)
      for (int e = 0; e < d; ++e) {
        const S* src = &xv.at4(n, a * d + e, 0, 0);
        S* dst = out.ptr() + (static_cast<std::size_t>(n) * heads + a) * T * d + e;
        for (int p = 0; p < T; ++p) dst[static_cast<std::size_t>(p) * d] = src[p];
      }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, N, heads, d, T](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int n = 0; n < N; ++n)
      for (int a = 0; a < heads; ++a)
        for (int e = 0; e < d; ++e) {
          S* dst = &gx.at4(n, a * d + e, 0, 0);
          const S* src = g.ptr() + (static_cast<std::size_t>(n) * heads + a) * T * d + e;
          for (int p = 0; p < T; ++p) dst[p] += src[static_cast<std::size_t>(p) * d];
        }
  });
  return Var<S>(&t, id);
}

// [N*heads, H*W, d] -> [N, heads*d, H, W]
template <typename S>
Var<S> merge_heads(Var<S> x, int heads, int H, int W) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 3) throw shape_error("merge_heads: expected rank-3 input");
  const int NH = xv.dim(0), T = xv.dim(1), d = xv.dim(2);
  if (heads < 1 || NH % heads != 0 || T != H * W) throw shape_error("merge_heads: bad shape");
  const int N = NH / heads;
  TensorT<S> out({N, heads * d, H, W});
  for (int n = 0; n < N; ++n)
    for (int a = 0; a < heads; ++a)
      for (int e = 0; e < d; ++e) {
        const S* src = xv.ptr() + (static_cast<std::size_t>(n) * heads + a) * T * d + e;
        S* dst = &out.at4(n, a * d + e, 0, 0);
        for (int p = 0; p < T; ++p) dst[p] = src[static_cast<std::size_t>(p) * d];
      }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, N, heads, d, T](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int n = 0; n < N; ++n)
      for (int a = 0; a < heads; ++a)
        for (int e = 0; e < d; ++e) {
          S* dst = gx.ptr() + (static_cast<std::size_t>(n) * heads + a) * T * d + e;
          const S* src = &g.at4(n, a * d + e, 0, 0);
          for (int p = 0; p < T; ++p) dst[static_cast<std::size_t>(p) * d] += src[p];
        }
  });
  return Var<S>(&t, id);
}

// batched a[B,M,K] * b[B,K,N]
template <typename S>
Var<S> bmm(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const TensorT<S>& av = a.val();
  const TensorT<S>& bv = b.val();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
    throw shape_error("bmm: incompatible shapes " + shape_to_string(av.shape) + " vs " + shape_to_string(bv.shape));
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
  TensorT<S> out({B, M, N});
  for (int i = 0; i < B; ++i)
    gemm_nn(M, N, K, av.ptr() + static_cast<std::size_t>(i) * M * K, bv.ptr() + static_cast<std::size_t>(i) * K * N,
            out.ptr() + static_cast<std::size_t>(i) * M * N, false);
  const int ia = a.id, ib = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib, B, M, K, N](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& av2 = tp.val(ia);
    const TensorT<S>& bv2 = tp.val(ib);
    for (int i = 0; i < B; ++i) {
      const S* gp = g.ptr() + static_cast<std::size_t>(i) * M * N;
      if (tp.node(ia).needs_grad)
        gemm_nt(M, K, N, gp, bv2.ptr() + static_cast<std::size_t>(i) * K * N,
                tp.grad_buf(ia).ptr() + static_cast<std::size_t>(i) * M * K, true);
      if (tp.node(ib).needs_grad)
        gemm_tn(K, N, M, av2.ptr() + static_cast<std::size_t>(i) * M * K, gp,
                tp.grad_buf(ib).ptr() + static_cast<std::size_t>(i) * K * N, true);
    }
  });
  return Var<S>(&t, id);
}

// batched a[B,M,K] * b[B,N,K]^T
template <typename S>
Var<S> bmm_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const TensorT<S>& av = a.val();
  const TensorT<S>& bv = b.val();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
    throw shape_error("bmm_nt: incompatible shapes " + shape_to_string(av.shape) + " vs " + shape_to_string(bv.shape));
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
  TensorT<S> out({B, M, N});
  for (int i = 0; i < B; ++i)
    gemm_nt(M, N, K, av.ptr() + static_cast<std::size_t>(i) * M * K, bv.ptr() + static_cast<std::size_t>(i) * N * K,
            out.ptr() + static_cast<std::size_t>(i) * M * N, false);
  const int ia = a.id, ib = b.id;
  int id = t.add_node(std::move(out), a.needs_grad() || b.needs_grad());
  t.set_backward(id, [id, ia, ib, B, M, K, N](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& av2 = tp.val(ia);
    const TensorT<S>& bv2 = tp.val(ib);
    for (int i = 0; i < B; ++i) {
      const S* gp = g.ptr() + static_cast<std::size_t>(i) * M * N;
      if (tp.node(ia).needs_grad)
        gemm_nn(M, K, N, gp, bv2.ptr() + static_cast<std::size_t>(i) * N * K,
                tp.grad_buf(ia).ptr() + static_cast<std::size_t>(i) * M * K, true);
      if (tp.node(ib).needs_grad)
        gemm_tn(N, K, M, gp, av2.ptr() + static_cast<std::size_t>(i) * M * K,
                tp.grad_buf(ib).ptr() + static_cast<std::size_t>(i) * N * K, true);
    }
  });
  return Var<S>(&t, id);
}

// softmax over the last dimension of [B,M,N]
template <typename S>
Var<S> softmax_lastdim(Var<S> x) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 3) throw shape_error("softmax_lastdim: expected rank-3");
  const int rows = xv.dim(0) * xv.dim(1), N = xv.dim(2);
  TensorT<S> out(xv.shape);
  for (int r = 0; r < rows; ++r) {
    const S* in = xv.ptr() + static_cast<std::size_t>(r) * N;
    S* o = out.ptr() + static_cast<std::size_t>(r) * N;
    double mx = -1e300;
    for (int j = 0; j < N; ++j) mx = std::max(mx, static_cast<double>(in[j]));
    double sum = 0.0;
    for (int j = 0; j < N; ++j) {
      const double e = std::exp(static_cast<double>(in[j]) - mx);
      o[j] = static_cast<S>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < N; ++j) o[j] = static_cast<S>(static_cast<double>(o[j]) * inv);
  }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, rows, N](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& p = tp.val(id);
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int r = 0; r < rows; ++r) {
      const S* gp = g.ptr() + static_cast<std::size_t>(r) * N;
      const S* pp = p.ptr() + static_cast<std::size_t>(r) * N;
      S* gxp = gx.ptr() + static_cast<std::size_t>(r) * N;
      double dot = 0.0;
      for (int j = 0; j < N; ++j) dot += static_cast<double>(gp[j]) * static_cast<double>(pp[j]);
      for (int j = 0; j < N; ++j)
        gxp[j] += static_cast<S>(static_cast<double>(pp[j]) * (static_cast<double>(gp[j]) - dot));
    }
  });
  return Var<S>(&t, id);
}

// per-pixel softmax over the channel dimension of [N,C,H,W]
template <typename S>
Var<S> softmax_channel(Var<S> x) {
  Tape<S>& t = *x.tape;
  const TensorT<S>& xv = x.val();
  if (xv.rank() != 4) throw shape_error("softmax_channel: expected [N,C,H,W]");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  TensorT<S> out(xv.shape);
  for (int n = 0; n < N; ++n) {
    const S* in = xv.ptr() + static_cast<std::size_t>(n) * C * HW;
    S* o = out.ptr() + static_cast<std::size_t>(n) * C * HW;
    for (std::size_t p = 0; p < HW; ++p) {
      double mx = -1e300;
      for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(in[static_cast<std::size_t>(c) * HW + p]));
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(static_cast<double>(in[static_cast<std::size_t>(c) * HW + p]) - mx);
        o[static_cast<std::size_t>(c) * HW + p] = static_cast<S>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int c = 0; c < C; ++c)
        o[static_cast<std::size_t>(c) * HW + p] =
            static_cast<S>(static_cast<double>(o[static_cast<std::size_t>(c) * HW + p]) * inv);
    }
  }
  const int ix = x.id;
  int id = t.add_node(std::move(out), x.needs_grad());
  t.set_backward(id, [id, ix, N, C, HW](Tape<S>& tp) {
    const TensorT<S>& g = tp.node(id).grad;
    const TensorT<S>& p = tp.val(id);
    TensorT<S>& gx = tp.grad_buf(ix);
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C * HW;
      for (std::size_t px = 0; px < HW; ++px) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c)
          dot += static_cast<double>(g.data[base + static_cast<std::size_t>(c) * HW + px]) *
                 static_cast<double>(p.data[base + static_cast<std::size_t>(c) * HW + px]);
        for (int c = 0; c < C; ++c) {
          const std::size_t idx = base + static_cast<std::size_t>(c) * HW + px;
          gx.data[idx] +=
              static_cast<S>(static_cast<double>(p.data[idx]) * (static_cast<double>(g.data[idx]) - dot));
        }
      }
    }
  });
  return Var<S>(&t, id);
}

// -(1/Npix) sum log(max(p_true, clamp)); probs [N,C,H,W], labels row-major
// [N,H,W] class indices.
template <typename S>
Var<S> nll_loss(Var<S> probs, const std::vector<int>& labels, double clamp = 1e-12) {
  Tape<S>& t = *probs.tape;
  const TensorT<S>& pv = probs.val();
  if (pv.rank() != 4) throw shape_error("nll_loss: expected [N,C,H,W] probabilities");
  const int N = pv.dim(0), C = pv.dim(1), H = pv.dim(2), W = pv.dim(3);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  const std::size_t npix = static_cast<std::size_t>(N) * HW;
  if (labels.size() != npix) throw shape_error("nll_loss: label count does not match pixel count");
  double acc = 0.0;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const int cls = labels[static_cast<std::size_t>(n) * HW + p];
      if (cls < 0 || cls >= C) throw value_error("nll_loss: label " + std::to_string(cls) + " out of range");
      const double pr =
          std::max(static_cast<double>(pv.data[(static_cast<std::size_t>(n) * C + cls) * HW + p]), clamp);
      acc -= std::log(pr);
    }
  const int ip = probs.id;
  int id = t.add_node(TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(npix))), probs.needs_grad());
  t.set_backward(id, [id, ip, labels, clamp, N, C, HW, npix](Tape<S>& tp) {
    const double g = static_cast<double>(tp.node(id).grad.data[0]);
    const TensorT<S>& pv2 = tp.val(ip);
    TensorT<S>& gp = tp.grad_buf(ip);
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const int cls = labels[static_cast<std::size_t>(n) * HW + p];
        const std::size_t idx = (static_cast<std::size_t>(n) * C + cls) * HW + p;
        const double pr = static_cast<double>(pv2.data[idx]);
        if (pr >= clamp) gp.data[idx] -= static_cast<S>(g / (pr * static_cast<double>(npix)));
      }
  });
  return Var<S>(&t, id);
}

}  // namespace ad
}  // namespace ldseg
