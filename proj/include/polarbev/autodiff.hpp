#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "polarbev/tensor.hpp"

namespace polarbev {

// Reverse-mode tape over the fixed set of kernels the pipeline needs.
// Nodes are created per forward pass; parameters are long-lived leaf
// nodes whose grad persists across passes (backward accumulates, the
// caller zeroes between steps).
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // accumulate into parents' grads

  Tensor& g() {
    if (grad.data.empty()) grad = Tensor(val.shape);
    return grad;
  }
  void zero_grad() {
    if (!grad.data.empty()) grad.fill(0.0);
  }
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  return n;
}

inline Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = true;
  return n;
}

inline Var make_op(Tensor val, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

// ---- graph traversal ------------------------------------------------

inline void topo_order(const Var& root, std::vector<Node*>& out) {
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      out.push_back(n);
      stack.pop_back();
    }
  }
}

// Backward from a scalar loss. Seeds d(loss)/d(loss)=1.
inline void backward(const Var& loss) {
  if (loss->val.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  if (!loss->requires_grad) return;
  std::vector<Node*> order;
  topo_order(loss, order);
  loss->g()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
  }
}

// ---- kernels ---------------------------------------------------------

// y = x W + b over the rows of x; x:[N,K] (any leading shape, K last),
// W:[K,M], b:[M] (b may be null).
inline Var linear(const Var& x, const Var& W, const Var& b) {
  const int64_t K = x->val.cols(), N = x->val.rows();
  if (W->val.shape.size() != 2 || W->val.shape[0] != K)
    throw std::invalid_argument("linear: inner extents disagree " +
                                shape_str(x->val.shape) + " vs " +
                                shape_str(W->val.shape));
  const int64_t M = W->val.shape[1];
  if (b && b->val.numel() != M)
    throw std::invalid_argument("linear: bias extent mismatch");
  std::vector<int64_t> oshape = x->val.shape;
  if (oshape.empty()) oshape = {1};
  oshape.back() = M;
  Tensor out(oshape);
  const double* xd = x->val.data.data();
  const double* wd = W->val.data.data();
  for (int64_t i = 0; i < N; ++i) {
    double* o = &out[i * M];
    if (b)
      for (int64_t j = 0; j < M; ++j) o[j] = b->val[j];
    for (int64_t k = 0; k < K; ++k) {
      const double xv = xd[i * K + k];
      if (xv == 0.0) continue;
      const double* wrow = &wd[k * M];
      for (int64_t j = 0; j < M; ++j) o[j] += xv * wrow[j];
    }
  }
  std::vector<Var> parents = b ? std::vector<Var>{x, W, b} : std::vector<Var>{x, W};
  return make_op(std::move(out), std::move(parents), [N, K, M](Node& n) {
    const Var& x = n.parents[0];
    const Var& W = n.parents[1];
    const double* gy = n.grad.data.data();
    if (x->requires_grad) {
      double* gx = x->g().data.data();
      const double* wd = W->val.data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t k = 0; k < K; ++k) {
          double acc = 0.0;
          const double* wrow = &wd[k * M];
          const double* grow = &gy[i * M];
          for (int64_t j = 0; j < M; ++j) acc += grow[j] * wrow[j];
          gx[i * K + k] += acc;
        }
    }
    if (W->requires_grad) {
      double* gw = W->g().data.data();
      const double* xd = x->val.data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t k = 0; k < K; ++k) {
          const double xv = xd[i * K + k];
          if (xv == 0.0) continue;
          const double* grow = &gy[i * M];
          double* gwrow = &gw[k * M];
          for (int64_t j = 0; j < M; ++j) gwrow[j] += xv * grow[j];
        }
    }
    if (n.parents.size() == 3 && n.parents[2]->requires_grad) {
      double* gb = n.parents[2]->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < M; ++j) gb[j] += gy[i * M + j];
    }
  });
}

inline Var linear(const Var& x, const Var& W) { return linear(x, W, nullptr); }

// y = a b^T; a:[N,K], b:[M,K] -> [N,M]. Used for attention scores.
inline Var matmul_nt(const Var& a, const Var& b) {
  const int64_t N = a->val.rows(), K = a->val.cols(), M = b->val.rows();
  if (b->val.cols() != K) throw std::invalid_argument("matmul_nt: inner extents disagree");
  Tensor out({N, M});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < M; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a->val[i * K + k] * b->val[j * K + k];
      out[i * M + j] = acc;
    }
  return make_op(std::move(out), {a, b}, [N, K, M](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    const double* g = n.grad.data.data();
    if (a->requires_grad) {
      double* ga = a->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < M; ++j) {
          const double gv = g[i * M + j];
          if (gv == 0.0) continue;
          for (int64_t k = 0; k < K; ++k) ga[i * K + k] += gv * b->val[j * K + k];
        }
    }
    if (b->requires_grad) {
      double* gb = b->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < M; ++j) {
          const double gv = g[i * M + j];
          if (gv == 0.0) continue;
          for (int64_t k = 0; k < K; ++k) gb[j * K + k] += gv * a->val[i * K + k];
        }
    }
  });
}

// y = a b; a:[N,K], b:[K,M]
inline Var matmul(const Var& a, const Var& b) { return linear(a, b, nullptr); }

inline Var add(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (int p = 0; p < 2; ++p)
      if (n.parents[p]->requires_grad) {
        double* g = n.parents[p]->g().data.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
      }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->val;
  for (auto& v : out.data) v *= c;
  return make_op(std::move(out), {a}, [c](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += c * n.grad[i];
  });
}

// numerically stabilized softmax over the last dimension
inline Var softmax(const Var& x) {
  const int64_t N = x->val.rows(), C = x->val.cols();
  Tensor out(x->val.shape);
  for (int64_t i = 0; i < N; ++i) {
    const double* xr = &x->val[i * C];
    double mx = xr[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < C; ++j) sum += (out[i * C + j] = std::exp(xr[j] - mx));
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < C; ++j) out[i * C + j] *= inv;
  }
  return make_op(std::move(out), {x}, [N, C](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* gx = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < N; ++i) {
      const double* y = &n.val[i * C];
      const double* g = &n.grad[i * C];
      double dot = 0.0;
      for (int64_t j = 0; j < C; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < C; ++j) gx[i * C + j] += y[j] * (g[j] - dot);
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out = x->val;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_op(std::move(out), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    const Tensor& xv = n.parents[0]->val;
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (xv[i] > 0.0) g[i] += n.grad[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x->val;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make_op(std::move(out), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      const double y = n.val[i];
      g[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

// per-row layer normalization over the last dimension
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-6) {
  const int64_t N = x->val.rows(), C = x->val.cols();
  if (gamma->val.numel() != C || beta->val.numel() != C)
    throw std::invalid_argument("layer_norm: affine extent mismatch");
  Tensor out(x->val.shape);
  Tensor xhat(x->val.shape);
  Tensor inv_std({N});
  for (int64_t i = 0; i < N; ++i) {
    const double* xr = &x->val[i * C];
    double mu = 0.0;
    for (int64_t j = 0; j < C; ++j) mu += xr[j];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t j = 0; j < C; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int64_t j = 0; j < C; ++j) {
      const double xh = (xr[j] - mu) * inv;
      xhat[i * C + j] = xh;
      out[i * C + j] = gamma->val[j] * xh + beta->val[j];
    }
  }
  auto xh_keep = std::make_shared<Tensor>(std::move(xhat));
  auto inv_keep = std::make_shared<Tensor>(std::move(inv_std));
  return make_op(std::move(out), {x, gamma, beta}, [N, C, xh_keep, inv_keep](Node& n) {
    const Var& x = n.parents[0];
    const Var& gamma = n.parents[1];
    const Var& beta = n.parents[2];
    const double* g = n.grad.data.data();
    const Tensor& xh = *xh_keep;
    if (gamma->requires_grad) {
      double* gg = gamma->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < C; ++j) gg[j] += g[i * C + j] * xh[i * C + j];
    }
    if (beta->requires_grad) {
      double* gb = beta->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < C; ++j) gb[j] += g[i * C + j];
    }
    if (x->requires_grad) {
      double* gx = x->g().data.data();
      for (int64_t i = 0; i < N; ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int64_t j = 0; j < C; ++j) {
          const double dxh = g[i * C + j] * gamma->val[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[i * C + j];
        }
        mean_dxh /= static_cast<double>(C);
        mean_dxh_xh /= static_cast<double>(C);
        const double inv = (*inv_keep)[i];
        for (int64_t j = 0; j < C; ++j) {
          const double dxh = g[i * C + j] * gamma->val[j];
          gx[i * C + j] += inv * (dxh - mean_dxh - xh[i * C + j] * mean_dxh_xh);
        }
      }
    }
  });
}

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x->val.data) s += v;
  Tensor out({1});
  out[0] = s;
  return make_op(std::move(out), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    const double gv = n.grad[0];
    for (int64_t i = 0; i < n.parents[0]->val.numel(); ++i) g[i] += gv;
  });
}

// columns [c0, c1) of a [N,C] matrix
inline Var col_slice(const Var& x, int64_t c0, int64_t c1) {
  const int64_t N = x->val.rows(), C = x->val.cols(), M = c1 - c0;
  Tensor out({N, M});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < M; ++j) out[i * M + j] = x->val[i * C + c0 + j];
  return make_op(std::move(out), {x}, [N, C, M, c0](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < M; ++j) g[i * C + c0 + j] += n.grad[i * M + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  const int64_t N = parts.front()->val.rows();
  int64_t M = 0;
  for (const auto& p : parts) M += p->val.cols();
  Tensor out({N, M});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t c = p->val.cols();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < c; ++j) out[i * M + off + j] = p->val[i * c + j];
    off += c;
  }
  return make_op(std::move(out), parts, [N, M](Node& n) {
    int64_t off = 0;
    for (auto& p : n.parents) {
      const int64_t c = p->val.cols();
      if (p->requires_grad) {
        double* g = p->g().data.data();
        for (int64_t i = 0; i < N; ++i)
          for (int64_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * M + off + j];
      }
      off += c;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  const int64_t C = parts.front()->val.cols();
  int64_t N = 0;
  for (const auto& p : parts) {
    if (p->val.cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
    N += p->val.rows();
  }
  Tensor out({N, C});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.data.begin(), p->val.data.end(), out.data.begin() + off * C);
    off += p->val.rows();
  }
  return make_op(std::move(out), parts, [C](Node& n) {
    int64_t off = 0;
    for (auto& p : n.parents) {
      const int64_t r = p->val.rows();
      if (p->requires_grad) {
        double* g = p->g().data.data();
        for (int64_t i = 0; i < r * C; ++i) g[i] += n.grad[off * C + i];
      }
      off += r;
    }
  });
}

inline Var gather_rows(const Var& x, std::vector<int64_t> idx) {
  const int64_t C = x->val.cols(), N = static_cast<int64_t>(idx.size());
  Tensor out({N, C});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < C; ++j) out[i * C + j] = x->val[idx[i] * C + j];
  auto keep = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return make_op(std::move(out), {x}, [C, N, keep](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < C; ++j) g[(*keep)[i] * C + j] += n.grad[i * C + j];
  });
}

// broadcast-add a length-C row to every row of x
inline Var add_row(const Var& x, const Var& row) {
  const int64_t N = x->val.rows(), C = x->val.cols();
  if (row->val.numel() != C) throw std::invalid_argument("add_row: extent mismatch");
  Tensor out = x->val;
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < C; ++j) out[i * C + j] += row->val[j];
  return make_op(std::move(out), {x, row}, [N, C](Node& n) {
    if (n.parents[0]->requires_grad) {
      double* g = n.parents[0]->g().data.data();
      for (int64_t i = 0; i < N * C; ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      double* g = n.parents[1]->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < C; ++j) g[j] += n.grad[i * C + j];
    }
  });
}

// a length-C row repeated n times -> [n, C]
inline Var repeat_row(const Var& row, int64_t nrep) {
  const int64_t C = row->val.numel();
  Tensor out({nrep, C});
  for (int64_t i = 0; i < nrep; ++i)
    for (int64_t j = 0; j < C; ++j) out[i * C + j] = row->val[j];
  return make_op(std::move(out), {row}, [nrep, C](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    for (int64_t i = 0; i < nrep; ++i)
      for (int64_t j = 0; j < C; ++j) g[j] += n.grad[i * C + j];
  });
}

// scale every element by a scalar Var
inline Var mul_scalar(const Var& x, const Var& s) {
  if (s->val.numel() != 1) throw std::invalid_argument("mul_scalar: s not scalar");
  Tensor out = x->val;
  const double sv = s->val[0];
  for (auto& v : out.data) v *= sv;
  return make_op(std::move(out), {x, s}, [](Node& n) {
    const Var& x = n.parents[0];
    const Var& s = n.parents[1];
    const double sv = s->val[0];
    if (x->requires_grad) {
      double* g = x->g().data.data();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += sv * n.grad[i];
    }
    if (s->requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * x->val[i];
      s->g()[0] += acc;
    }
  });
}

// scale row i of x by w[i]; w is [N] (or [N,1])
inline Var mul_rows(const Var& x, const Var& w) {
  const int64_t N = x->val.rows(), C = x->val.cols();
  if (w->val.numel() != N) throw std::invalid_argument("mul_rows: extent mismatch");
  Tensor out = x->val;
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < C; ++j) out[i * C + j] *= w->val[i];
  return make_op(std::move(out), {x, w}, [N, C](Node& n) {
    const Var& x = n.parents[0];
    const Var& w = n.parents[1];
    if (x->requires_grad) {
      double* g = x->g().data.data();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < C; ++j) g[i * C + j] += n.grad[i * C + j] * w->val[i];
    }
    if (w->requires_grad) {
      double* g = w->g().data.data();
      for (int64_t i = 0; i < N; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < C; ++j) acc += n.grad[i * C + j] * x->val[i * C + j];
        g[i] += acc;
      }
    }
  });
}

// elementwise clamp; gradient passes through strictly inside the range
inline Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x->val;
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  return make_op(std::move(out), {x}, [lo, hi](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double* g = n.parents[0]->g().data.data();
    const Tensor& xv = n.parents[0]->val;
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (xv[i] > lo && xv[i] < hi) g[i] += n.grad[i];
  });
}

inline Var add_scalars(const Var& a, const Var& b) { return add(a, b); }

// sinusoidal positional encoding of pos in [0,1]; C must be even.
// channel 2k = sin(pos / T^(2k/C)), channel 2k+1 = cos(same), T = 10000.
inline Tensor sinusoidal_embed(double pos, int64_t C) {
  if (C % 2 != 0) throw std::invalid_argument("sinusoidal_embed: C must be even");
  Tensor out({C});
  for (int64_t k = 0; 2 * k < C; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * k) / static_cast<double>(C));
    out[2 * k] = std::sin(pos * freq);
    out[2 * k + 1] = std::cos(pos * freq);
  }
  return out;
}

}  // namespace polarbev
