#pragma once

// Reverse-mode autodiff over dense row-major matrices. Nodes are created
// by ops in topological order; backward() replays them in reverse. Ops are
// matrix-level (projections, segmented attention, layer norm, batched 3x3
// rotation algebra) so tape overhead stays small relative to the math.
//
// With recording disabled the same code paths compute values only, which
// is the inference mode.

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "atomo/common.hpp"

namespace atomo::tape {

template <typename S>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  // ---- leaves ------------------------------------------------------

  Var constant(Mat<S> v) { return push(std::move(v), false); }

  Var leaf(Mat<S> v) { return push(std::move(v), recording_); }

  // external parameter: value read from *val, gradient accumulated into *grad
  Var param(const Mat<S>* val, Mat<S>* grad) {
    Node n;
    n.vptr = val;
    n.gptr = grad;
    n.needs = recording_;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  const Mat<S>& val(Var v) const {
    const Node& n = nodes_[size_t(v.id)];
    return n.vptr ? *n.vptr : n.value;
  }

  // gradient of an owned leaf after backward()
  const Mat<S>& grad_of(Var v) {
    Node& n = nodes_[size_t(v.id)];
    ensure_grad(size_t(v.id));
    return n.gptr ? *n.gptr : n.gown;
  }

  // ---- backward ----------------------------------------------------

  void backward(Var root, S seed = S(1)) {
    assert(recording_);
    Node& r = nodes_[size_t(root.id)];
    if (!r.needs) return;
    ensure_grad(size_t(root.id));
    grad(size_t(root.id)).array() += seed;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.needs && n.gready && n.back) n.back();
    }
  }

  // ---- elementwise and linear ops -----------------------------------

  Var matmul(Var a, Var b) {
    const Mat<S>&A = val(a), &B = val(b);
    if (A.cols() != B.rows()) throw ShapeMismatch("matmul: inner dims");
    Var out = push(A * B, needs(a) || needs(b));
    if (track(out)) {
      record(out, [this, a, b, out] {
        const Mat<S>& G = grad(size_t(out.id));
        if (needs(a)) grad_for(a).noalias() += G * val(b).transpose();
        if (needs(b)) grad_for(b).noalias() += val(a).transpose() * G;
      });
    }
    return out;
  }

  Var add(Var a, Var b) {
    const Mat<S>&A = val(a), &B = val(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeMismatch("add: shape");
    Var out = push(A + B, needs(a) || needs(b));
    if (track(out)) {
      record(out, [this, a, b, out] {
        const Mat<S>& G = grad(size_t(out.id));
        if (needs(a)) grad_for(a) += G;
        if (needs(b)) grad_for(b) += G;
      });
    }
    return out;
  }

  Var sub(Var a, Var b) {
    const Mat<S>&A = val(a), &B = val(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeMismatch("sub: shape");
    Var out = push(A - B, needs(a) || needs(b));
    if (track(out)) {
      record(out, [this, a, b, out] {
        const Mat<S>& G = grad(size_t(out.id));
        if (needs(a)) grad_for(a) += G;
        if (needs(b)) grad_for(b) -= G;
      });
    }
    return out;
  }

  Var mul(Var a, Var b) {
    const Mat<S>&A = val(a), &B = val(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeMismatch("mul: shape");
    Var out = push(A.cwiseProduct(B), needs(a) || needs(b));
    if (track(out)) {
      record(out, [this, a, b, out] {
        const Mat<S>& G = grad(size_t(out.id));
        if (needs(a)) grad_for(a).array() += G.array() * val(b).array();
        if (needs(b)) grad_for(b).array() += G.array() * val(a).array();
      });
    }
    return out;
  }

  Var scale(Var a, S c) {
    Var out = push(val(a) * c, needs(a));
    if (track(out)) {
      record(out, [this, a, c, out] { grad_for(a) += grad(size_t(out.id)) * c; });
    }
    return out;
  }

  Var add_scalar(Var a, S c) {
    Var out = push((val(a).array() + c).matrix(), needs(a));
    if (track(out)) {
      record(out, [this, a, out] { grad_for(a) += grad(size_t(out.id)); });
    }
    return out;
  }

  // broadcast a 1xC row over all rows of a
  Var add_rowvec(Var a, Var r) {
    const Mat<S>&A = val(a), &R = val(r);
    if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeMismatch("add_rowvec: shape");
    Mat<S> out = A;
    out.rowwise() += R.row(0);
    Var o = push(std::move(out), needs(a) || needs(r));
    if (track(o)) {
      record(o, [this, a, r, o] {
        const Mat<S>& G = grad(size_t(o.id));
        if (needs(a)) grad_for(a) += G;
        if (needs(r)) grad_for(r).row(0) += G.colwise().sum();
      });
    }
    return o;
  }

  Var sub_rowvec(Var a, Var r) {
    const Mat<S>&A = val(a), &R = val(r);
    if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeMismatch("sub_rowvec: shape");
    Mat<S> out = A;
    out.rowwise() -= R.row(0);
    Var o = push(std::move(out), needs(a) || needs(r));
    if (track(o)) {
      record(o, [this, a, r, o] {
        const Mat<S>& G = grad(size_t(o.id));
        if (needs(a)) grad_for(a) += G;
        if (needs(r)) grad_for(r).row(0) -= G.colwise().sum();
      });
    }
    return o;
  }

  Var affine(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

  // ---- shuffles ------------------------------------------------------

  Var hcat(std::span<const Var> parts) {
    int rows = int(val(parts[0]).rows());
    int cols = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows() != rows) throw ShapeMismatch("hcat: row mismatch");
      cols += int(val(p).cols());
      ng = ng || needs(p);
    }
    Mat<S> out(rows, cols);
    int c = 0;
    for (Var p : parts) {
      out.middleCols(c, int(val(p).cols())) = val(p);
      c += int(val(p).cols());
    }
    Var o = push(std::move(out), ng);
    if (track(o)) {
      std::vector<Var> ps(parts.begin(), parts.end());
      record(o, [this, ps, o] {
        const Mat<S>& G = grad(size_t(o.id));
        int c = 0;
        for (Var p : ps) {
          int w = int(val(p).cols());
          if (needs(p)) grad_for(p) += G.middleCols(c, w);
          c += w;
        }
      });
    }
    return o;
  }

  Var slice_cols(Var a, int c0, int n) {
    const Mat<S>& A = val(a);
    if (c0 < 0 || c0 + n > A.cols()) throw ShapeMismatch("slice_cols: range");
    Var o = push(A.middleCols(c0, n), needs(a));
    if (track(o)) {
      record(o, [this, a, c0, n, o] {
        grad_for(a).middleCols(c0, n) += grad(size_t(o.id));
      });
    }
    return o;
  }

  Var slice_rows(Var a, int r0, int n) {
    const Mat<S>& A = val(a);
    if (r0 < 0 || r0 + n > A.rows()) throw ShapeMismatch("slice_rows: range");
    Var o = push(A.middleRows(r0, n), needs(a));
    if (track(o)) {
      record(o, [this, a, r0, n, o] {
        grad_for(a).middleRows(r0, n) += grad(size_t(o.id));
      });
    }
    return o;
  }

  // out.col(i) = a.col(perm[i])
  Var permute_cols(Var a, std::vector<int> perm) {
    const Mat<S>& A = val(a);
    if (int(perm.size()) != A.cols()) throw ShapeMismatch("permute_cols: size");
    Mat<S> out(A.rows(), A.cols());
    for (int i = 0; i < int(perm.size()); ++i) out.col(i) = A.col(perm[size_t(i)]);
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, perm, o] {
        const Mat<S>& G = grad(size_t(o.id));
        Mat<S>& ga = grad_for(a);
        for (int i = 0; i < int(perm.size()); ++i) ga.col(perm[size_t(i)]) += G.col(i);
      });
    }
    return o;
  }

  // P inputs of shape TxE -> (T*P)xE, row t*P+p = parts[p].row(t)
  Var stack_parts(std::span<const Var> parts) {
    const int P = int(parts.size());
    const int T = int(val(parts[0]).rows());
    const int E = int(val(parts[0]).cols());
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows() != T || val(p).cols() != E) throw ShapeMismatch("stack_parts: shape");
      ng = ng || needs(p);
    }
    Mat<S> out(T * P, E);
    for (int p = 0; p < P; ++p)
      for (int t = 0; t < T; ++t) out.row(t * P + p) = val(parts[size_t(p)]).row(t);
    Var o = push(std::move(out), ng);
    if (track(o)) {
      std::vector<Var> ps(parts.begin(), parts.end());
      record(o, [this, ps, T, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const int P = int(ps.size());
        for (int p = 0; p < P; ++p) {
          if (!needs(ps[size_t(p)])) continue;
          Mat<S>& g = grad_for(ps[size_t(p)]);
          for (int t = 0; t < T; ++t) g.row(t) += G.row(t * P + p);
        }
      });
    }
    return o;
  }

  // inverse of stack_parts for one partition: rows p, p+P, p+2P, ...
  Var unstack_part(Var x, int p, int P) {
    const Mat<S>& X = val(x);
    const int T = int(X.rows()) / P;
    Mat<S> out(T, X.cols());
    for (int t = 0; t < T; ++t) out.row(t) = X.row(t * P + p);
    Var o = push(std::move(out), needs(x));
    if (track(o)) {
      record(o, [this, x, p, P, T, o] {
        const Mat<S>& G = grad(size_t(o.id));
        Mat<S>& g = grad_for(x);
        for (int t = 0; t < T; ++t) g.row(t * P + p) += G.row(t);
      });
    }
    return o;
  }

  // ---- nonlinearities ------------------------------------------------

  Var tanh_(Var a) {
    Var o = push(val(a).array().tanh().matrix(), needs(a));
    if (track(o)) {
      record(o, [this, a, o] {
        const Mat<S>& Y = val(o);
        grad_for(a).array() += grad(size_t(o.id)).array() * (S(1) - Y.array().square());
      });
    }
    return o;
  }

  Var sigmoid_(Var a) {
    Var o = push(((val(a).array() * S(-1)).exp() + S(1)).inverse().matrix(), needs(a));
    if (track(o)) {
      record(o, [this, a, o] {
        const Mat<S>& Y = val(o);
        grad_for(a).array() += grad(size_t(o.id)).array() * Y.array() * (S(1) - Y.array());
      });
    }
    return o;
  }

  // exact GELU (erf form)
  Var gelu(Var a) {
    const Mat<S>& A = val(a);
    Mat<S> out(A.rows(), A.cols());
    const S inv_sqrt2 = S(0.70710678118654752440L);
    for (Eigen::Index i = 0; i < A.size(); ++i) {
      S x = A.data()[i];
      out.data()[i] = S(0.5) * x * (S(1) + S(std::erf(double(x) * double(inv_sqrt2))));
    }
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, o] {
        const Mat<S>& A2 = val(a);
        const Mat<S>& G = grad(size_t(o.id));
        Mat<S>& g = grad_for(a);
        const double inv_sqrt2pi = 0.39894228040143267794;
        for (Eigen::Index i = 0; i < A2.size(); ++i) {
          double x = double(A2.data()[i]);
          double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          g.data()[i] += G.data()[i] * S(cdf + x * pdf);
        }
      });
    }
    return o;
  }

  // per-row layer norm with learnable gain/bias (1xC each)
  Var layernorm(Var x, Var gain, Var bias, S eps = S(1e-5)) {
    const Mat<S>& X = val(x);
    const int C = int(X.cols());
    if (val(gain).cols() != C || val(bias).cols() != C) throw ShapeMismatch("layernorm: affine");
    Mat<S> xhat(X.rows(), C);
    Mat<S> inv_std(X.rows(), 1);
    for (int r = 0; r < X.rows(); ++r) {
      S mu = X.row(r).mean();
      S var = (X.row(r).array() - mu).square().sum() / S(C);
      S is = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      xhat.row(r) = ((X.row(r).array() - mu) * is).matrix();
    }
    Mat<S> out = xhat;
    out.array().rowwise() *= val(gain).row(0).array();
    out.rowwise() += val(bias).row(0);
    Var o = push(std::move(out), needs(x) || needs(gain) || needs(bias));
    if (track(o)) {
      auto cache = std::make_shared<std::pair<Mat<S>, Mat<S>>>(std::move(xhat), std::move(inv_std));
      record(o, [this, x, gain, bias, cache, C, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>& XH = cache->first;
        const Mat<S>& IS = cache->second;
        if (needs(gain)) grad_for(gain).row(0) += (G.array() * XH.array()).colwise().sum().matrix();
        if (needs(bias)) grad_for(bias).row(0) += G.colwise().sum();
        if (needs(x)) {
          Mat<S>& gx = grad_for(x);
          const auto& gn = val(gain).row(0);
          for (int r = 0; r < G.rows(); ++r) {
            Eigen::Array<S, 1, Eigen::Dynamic> dxh = G.row(r).array() * gn.array();
            S sum_dxh = dxh.sum();
            S sum_dxh_xh = (dxh * XH.row(r).array()).sum();
            gx.row(r).array() +=
                IS(r, 0) / S(C) *
                (S(C) * dxh - sum_dxh - XH.row(r).array() * sum_dxh_xh);
          }
        }
      });
    }
    return o;
  }

  // inverted dropout; identity when rate <= 0
  Var dropout(Var a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    const Mat<S>& A = val(a);
    Mat<S> mask(A.rows(), A.cols());
    const S keep = S(1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = rng.uniform() < rate ? S(0) : S(1) / keep;
    Var o = push(A.cwiseProduct(mask), needs(a));
    if (track(o)) {
      auto m = std::make_shared<Mat<S>>(std::move(mask));
      record(o, [this, a, m, o] {
        grad_for(a).array() += grad(size_t(o.id)).array() * m->array();
      });
    }
    return o;
  }

  // ---- attention -----------------------------------------------------

  // Multi-head scaled-dot-product attention over independent contiguous
  // segments of `seg_len` rows. seg_len == rows gives sequence attention;
  // seg_len == P with frame-major stacking gives per-frame attention over
  // partitions. Softmax probabilities are cached for backward and may be
  // inspected through `probs_out`.
  Var attention(Var q, Var k, Var v, int heads, int seg_len, Mat<S>* probs_out = nullptr) {
    const Mat<S>&Q = val(q), &K = val(k), &V = val(v);
    const int R = int(Q.rows());
    const int E = int(Q.cols());
    if (K.rows() != R || V.rows() != R || K.cols() != E || V.cols() != E)
      throw ShapeMismatch("attention: q/k/v shapes differ");
    if (E % heads != 0) throw ShapeMismatch("attention: E not divisible by heads");
    if (R % seg_len != 0) throw ShapeMismatch("attention: rows not divisible by seg_len");
    const int dh = E / heads;
    const int nseg = R / seg_len;
    const S sc = S(1) / std::sqrt(S(dh));

    Mat<S> probs(R, heads * seg_len);
    Mat<S> out(R, E);
    for (int s = 0; s < nseg; ++s) {
      const int r0 = s * seg_len;
      for (int h = 0; h < heads; ++h) {
        auto Qb = Q.block(r0, h * dh, seg_len, dh);
        auto Kb = K.block(r0, h * dh, seg_len, dh);
        auto Vb = V.block(r0, h * dh, seg_len, dh);
        Mat<S> logits = (Qb * Kb.transpose()) * sc;
        for (int r = 0; r < seg_len; ++r) {
          S mx = logits.row(r).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(r).array() - mx).exp();
          logits.row(r) = (e / e.sum()).matrix();
        }
        probs.block(r0, h * seg_len, seg_len, seg_len) = logits;
        out.block(r0, h * dh, seg_len, dh).noalias() = logits * Vb;
      }
    }
    if (probs_out) *probs_out = probs;
    Var o = push(std::move(out), needs(q) || needs(k) || needs(v));
    if (track(o)) {
      auto pcache = std::make_shared<Mat<S>>(std::move(probs));
      record(o, [this, q, k, v, heads, seg_len, dh, nseg, sc, pcache, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>&Q = val(q), &K = val(k), &V = val(v);
        Mat<S>* gq = needs(q) ? &grad_for(q) : nullptr;
        Mat<S>* gk = needs(k) ? &grad_for(k) : nullptr;
        Mat<S>* gv = needs(v) ? &grad_for(v) : nullptr;
        for (int s = 0; s < nseg; ++s) {
          const int r0 = s * seg_len;
          for (int h = 0; h < heads; ++h) {
            auto P = pcache->block(r0, h * seg_len, seg_len, seg_len);
            auto Go = G.block(r0, h * dh, seg_len, dh);
            auto Qb = Q.block(r0, h * dh, seg_len, dh);
            auto Kb = K.block(r0, h * dh, seg_len, dh);
            auto Vb = V.block(r0, h * dh, seg_len, dh);
            if (gv) gv->block(r0, h * dh, seg_len, dh).noalias() += P.transpose() * Go;
            Mat<S> dP = Go * Vb.transpose();
            Mat<S> dS(seg_len, seg_len);
            for (int r = 0; r < seg_len; ++r) {
              S dot = (dP.row(r).array() * P.row(r).array()).sum();
              dS.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
            }
            if (gq) gq->block(r0, h * dh, seg_len, dh).noalias() += sc * (dS * Kb);
            if (gk) gk->block(r0, h * dh, seg_len, dh).noalias() += sc * (dS.transpose() * Qb);
          }
        }
      });
    }
    return o;
  }

  // ---- topology branch and gates --------------------------------------

  // out[t,p,:] = sum_q tanh(W[p*P+q,:]) . h[t,q,:]   (h frame-major (T*P)xE)
  Var topo_mix(Var w, Var h, int P) {
    const Mat<S>&W = val(w), &H = val(h);
    const int E = int(H.cols());
    if (W.rows() != P * P || W.cols() != E) throw ShapeMismatch("topo_mix: W shape");
    if (H.rows() % P != 0) throw ShapeMismatch("topo_mix: H rows");
    const int T = int(H.rows()) / P;
    Mat<S> tw = W.array().tanh().matrix();
    Mat<S> out = Mat<S>::Zero(H.rows(), E);
    for (int t = 0; t < T; ++t)
      for (int p = 0; p < P; ++p) {
        auto dst = out.row(t * P + p);
        for (int q = 0; q < P; ++q)
          dst.array() += tw.row(p * P + q).array() * H.row(t * P + q).array();
      }
    Var o = push(std::move(out), needs(w) || needs(h));
    if (track(o)) {
      auto twc = std::make_shared<Mat<S>>(std::move(tw));
      record(o, [this, w, h, P, T, twc, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>& H2 = val(h);
        if (needs(h)) {
          Mat<S>& gh = grad_for(h);
          for (int t = 0; t < T; ++t)
            for (int q = 0; q < P; ++q) {
              auto dst = gh.row(t * P + q);
              for (int p = 0; p < P; ++p)
                dst.array() += twc->row(p * P + q).array() * G.row(t * P + p).array();
            }
        }
        if (needs(w)) {
          Mat<S>& gw = grad_for(w);
          for (int p = 0; p < P; ++p)
            for (int q = 0; q < P; ++q) {
              Eigen::Array<S, 1, Eigen::Dynamic> acc =
                  Eigen::Array<S, 1, Eigen::Dynamic>::Zero(G.cols());
              for (int t = 0; t < T; ++t)
                acc += G.row(t * P + p).array() * H2.row(t * P + q).array();
              gw.row(p * P + q).array() +=
                  acc * (S(1) - twc->row(p * P + q).array().square());
            }
        }
      });
    }
    return o;
  }

  // out = sigmoid(g) broadcast-multiplied over rows of a; g is 1xE
  Var gate_scale(Var a, Var g) {
    const Mat<S>&A = val(a), &Gt = val(g);
    if (Gt.rows() != 1 || Gt.cols() != A.cols()) throw ShapeMismatch("gate_scale: gate shape");
    Mat<S> sg = ((Gt.array() * S(-1)).exp() + S(1)).inverse().matrix();
    Mat<S> out = A;
    out.array().rowwise() *= sg.row(0).array();
    Var o = push(std::move(out), needs(a) || needs(g));
    if (track(o)) {
      auto sgc = std::make_shared<Mat<S>>(std::move(sg));
      record(o, [this, a, g, sgc, o] {
        const Mat<S>& G = grad(size_t(o.id));
        if (needs(a)) grad_for(a).array() += G.array().rowwise() * sgc->row(0).array();
        if (needs(g)) {
          auto s = sgc->row(0).array();
          grad_for(g).row(0).array() +=
              (G.array() * val(a).array()).colwise().sum() * s * (S(1) - s);
        }
      });
    }
    return o;
  }

  // ---- batched 3x3 rotation algebra (row-major 3x3 per row) -----------

  // Gram-Schmidt 6D -> rotation matrix. Input Tx6 (two unnormalized
  // columns), output Tx9 row-major with columns c1 c2 c3.
  Var gram_schmidt_6d(Var a) {
    const Mat<S>& A = val(a);
    if (A.cols() != 6) throw ShapeMismatch("gram_schmidt_6d: needs Tx6");
    const int T = int(A.rows());
    Mat<S> out(T, 9);
    for (int t = 0; t < T; ++t) {
      Eigen::Matrix<S, 3, 1> av = A.row(t).template head<3>().transpose();
      Eigen::Matrix<S, 3, 1> bv = A.row(t).template tail<3>().transpose();
      S na = std::max(av.norm(), S(1e-8));
      Eigen::Matrix<S, 3, 1> c1 = av / na;
      Eigen::Matrix<S, 3, 1> w = bv - c1.dot(bv) * c1;
      S nw = std::max(w.norm(), S(1e-8));
      Eigen::Matrix<S, 3, 1> c2 = w / nw;
      Eigen::Matrix<S, 3, 1> c3 = c1.cross(c2);
      for (int r = 0; r < 3; ++r) {
        out(t, 3 * r + 0) = c1(r);
        out(t, 3 * r + 1) = c2(r);
        out(t, 3 * r + 2) = c3(r);
      }
    }
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, T, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>& A2 = val(a);
        const Mat<S>& O = val(o);
        Mat<S>& ga = grad_for(a);
        for (int t = 0; t < T; ++t) {
          Eigen::Matrix<S, 3, 1> av = A2.row(t).template head<3>().transpose();
          Eigen::Matrix<S, 3, 1> bv = A2.row(t).template tail<3>().transpose();
          Eigen::Matrix<S, 3, 1> c1, c2, c3, gc1, gc2, gc3;
          for (int r = 0; r < 3; ++r) {
            c1(r) = O(t, 3 * r + 0);
            c2(r) = O(t, 3 * r + 1);
            c3(r) = O(t, 3 * r + 2);
            gc1(r) = G(t, 3 * r + 0);
            gc2(r) = G(t, 3 * r + 1);
            gc3(r) = G(t, 3 * r + 2);
          }
          S na = std::max(av.norm(), S(1e-8));
          S s = c1.dot(bv);
          S nw = std::max((bv - s * c1).norm(), S(1e-8));
          // c3 = c1 x c2
          gc1 += c2.cross(gc3);
          gc2 += gc3.cross(c1);
          // c2 = w / |w|
          Eigen::Matrix<S, 3, 1> gw = (gc2 - c2.dot(gc2) * c2) / nw;
          // w = b - (c1.b) c1
          Eigen::Matrix<S, 3, 1> gb = gw - c1.dot(gw) * c1;
          gc1 += -(gw.dot(c1)) * bv - s * gw;
          // c1 = a / |a|
          Eigen::Matrix<S, 3, 1> gav = (gc1 - c1.dot(gc1) * c1) / na;
          for (int r = 0; r < 3; ++r) {
            ga(t, r) += gav(r);
            ga(t, 3 + r) += gb(r);
          }
        }
      });
    }
    return o;
  }

  // rowwise 3x3 product C = A * B, all Tx9 row-major
  Var rot_compose(Var a, Var b) {
    const Mat<S>&A = val(a), &B = val(b);
    if (A.cols() != 9 || B.cols() != 9 || A.rows() != B.rows())
      throw ShapeMismatch("rot_compose: needs Tx9 pairs");
    const int T = int(A.rows());
    using M3 = Eigen::Matrix<S, 3, 3, Eigen::RowMajor>;
    Mat<S> out(T, 9);
    for (int t = 0; t < T; ++t) {
      Eigen::Map<const M3> ma(A.row(t).data()), mb(B.row(t).data());
      Eigen::Map<M3> mo(out.row(t).data());
      mo.noalias() = ma * mb;
    }
    Var o = push(std::move(out), needs(a) || needs(b));
    if (track(o)) {
      record(o, [this, a, b, T, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>&A2 = val(a), &B2 = val(b);
        using M3 = Eigen::Matrix<S, 3, 3, Eigen::RowMajor>;
        Mat<S>* ga = needs(a) ? &grad_for(a) : nullptr;
        Mat<S>* gb = needs(b) ? &grad_for(b) : nullptr;
        for (int t = 0; t < T; ++t) {
          Eigen::Map<const M3> mg(G.row(t).data()), ma(A2.row(t).data()), mb(B2.row(t).data());
          if (ga) Eigen::Map<M3>(ga->row(t).data()).noalias() += mg * mb.transpose();
          if (gb) Eigen::Map<M3>(gb->row(t).data()).noalias() += ma.transpose() * mg;
        }
      });
    }
    return o;
  }

  // rowwise y = R v; r is Tx9, v is Tx3
  Var rot_apply(Var r, Var v) {
    const Mat<S>&R = val(r), &V = val(v);
    if (R.cols() != 9 || V.cols() != 3 || R.rows() != V.rows())
      throw ShapeMismatch("rot_apply: shapes");
    const int T = int(R.rows());
    using M3 = Eigen::Matrix<S, 3, 3, Eigen::RowMajor>;
    using V3 = Eigen::Matrix<S, 3, 1>;
    Mat<S> out(T, 3);
    for (int t = 0; t < T; ++t) {
      Eigen::Map<const M3> mr(R.row(t).data());
      V3 x = V.row(t).transpose();
      out.row(t) = (mr * x).transpose();
    }
    Var o = push(std::move(out), needs(r) || needs(v));
    if (track(o)) {
      record(o, [this, r, v, T, o] {
        const Mat<S>& G = grad(size_t(o.id));
        const Mat<S>&R2 = val(r), &V2 = val(v);
        using M3 = Eigen::Matrix<S, 3, 3, Eigen::RowMajor>;
        using V3 = Eigen::Matrix<S, 3, 1>;
        Mat<S>* gr = needs(r) ? &grad_for(r) : nullptr;
        Mat<S>* gv = needs(v) ? &grad_for(v) : nullptr;
        for (int t = 0; t < T; ++t) {
          Eigen::Map<const M3> mr(R2.row(t).data());
          V3 g = G.row(t).transpose();
          if (gr) {
            V3 x = V2.row(t).transpose();
            Eigen::Map<M3>(gr->row(t).data()).noalias() += g * x.transpose();
          }
          if (gv) gv->row(t).noalias() += (mr.transpose() * g).transpose();
        }
      });
    }
    return o;
  }

  // ---- reductions ------------------------------------------------------

  Var mean_rows(Var a) {
    const Mat<S>& A = val(a);
    Mat<S> out = A.colwise().mean();
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, o] {
        const Mat<S>& G = grad(size_t(o.id));
        Mat<S>& g = grad_for(a);
        g.array().rowwise() += G.row(0).array() / S(g.rows());
      });
    }
    return o;
  }

  // scale * sum |a|, as 1x1. sign(0) treated as 0.
  Var l1_sum(Var a, S sc) {
    const Mat<S>& A = val(a);
    Mat<S> out(1, 1);
    out(0, 0) = A.array().abs().sum() * sc;
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, sc, o] {
        S g = grad(size_t(o.id))(0, 0) * sc;
        const Mat<S>& A2 = val(a);
        Mat<S>& ga = grad_for(a);
        for (Eigen::Index i = 0; i < A2.size(); ++i) {
          S x = A2.data()[i];
          ga.data()[i] += x > S(0) ? g : (x < S(0) ? -g : S(0));
        }
      });
    }
    return o;
  }

  // scale * sum a^2, as 1x1
  Var sumsq(Var a, S sc) {
    const Mat<S>& A = val(a);
    Mat<S> out(1, 1);
    out(0, 0) = A.array().square().sum() * sc;
    Var o = push(std::move(out), needs(a));
    if (track(o)) {
      record(o, [this, a, sc, o] {
        S g = grad(size_t(o.id))(0, 0) * sc;
        grad_for(a) += S(2) * g * val(a);
      });
    }
    return o;
  }

  // weighted sum of 1x1 scalars
  Var wsum(std::span<const Var> vs, std::span<const S> ws) {
    Mat<S> out(1, 1);
    out(0, 0) = S(0);
    bool ng = false;
    for (size_t i = 0; i < vs.size(); ++i) {
      out(0, 0) += ws[i] * val(vs[i])(0, 0);
      ng = ng || needs(vs[i]);
    }
    Var o = push(std::move(out), ng);
    if (track(o)) {
      std::vector<Var> vv(vs.begin(), vs.end());
      std::vector<S> wv(ws.begin(), ws.end());
      record(o, [this, vv, wv, o] {
        S g = grad(size_t(o.id))(0, 0);
        for (size_t i = 0; i < vv.size(); ++i)
          if (needs(vv[i])) grad_for(vv[i])(0, 0) += wv[i] * g;
      });
    }
    return o;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    const Mat<S>* vptr = nullptr;  // external value (params)
    Mat<S>* gptr = nullptr;        // external grad sink
    Mat<S> gown;
    bool needs = false;
    bool gready = false;
    std::function<void()> back;
  };

  Var push(Mat<S> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs = needs_grad && recording_;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[size_t(v.id)].needs; }
  bool track(Var v) const { return recording_ && nodes_[size_t(v.id)].needs; }

  void record(Var v, std::function<void()> f) { nodes_[size_t(v.id)].back = std::move(f); }

  void ensure_grad(size_t id) {
    Node& n = nodes_[id];
    if (n.gready) return;
    const Mat<S>& v = n.vptr ? *n.vptr : n.value;
    if (n.gptr) {
      if (n.gptr->rows() != v.rows() || n.gptr->cols() != v.cols())
        throw ShapeMismatch("tape: external grad sink shape mismatch");
    } else {
      n.gown.setZero(v.rows(), v.cols());
    }
    n.gready = true;
  }

  Mat<S>& grad(size_t id) {
    Node& n = nodes_[id];
    return n.gptr ? *n.gptr : n.gown;
  }

  // accumulate-target accessor used by backward lambdas
  Mat<S>& grad_for(Var v) {
    ensure_grad(size_t(v.id));
    return grad(size_t(v.id));
  }

  std::vector<Node> nodes_;
  bool recording_;
};

}  // namespace atomo::tape
