#include "cgnc/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "cgnc/error.hpp"

namespace cgnc::ag {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

bool needs_grad(const Var& v) { return v && v->requires_grad; }

// Creates a node; graph edges are kept only if some input needs a gradient.
Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || needs_grad(in);
  if (rg) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(fn);
  }
  return n;
}

void expect_rank(const Var& v, std::size_t r, const char* op) {
  if (!v || v->value.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + " input, got " +
                     (v ? shape_str(v->value.shape()) : std::string("null")));
  }
}

void expect_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape() != b->value.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
}

template <class F>
Var unary(const Var& a, F&& f, std::function<void(Node&)> bw) {
  Tensor out = a->value;
  for (auto& x : out.storage()) x = f(x);
  return make(std::move(out), {a}, std::move(bw));
}

void im2col(const double* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t K, int stride, int pad,
            std::int64_t Ho, std::int64_t Wo, double* cols) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < K; ++ki) {
      for (std::int64_t kj = 0; kj < K; ++kj) {
        double* row = cols + ((c * K + ki) * K + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(row + oh * Wo, row + (oh + 1) * Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            row[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t K, int stride, int pad,
            std::int64_t Ho, std::int64_t Wo, double* dx) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < K; ++ki) {
      for (std::int64_t kj = 0; kj < K; ++kj) {
        const double* row = cols + ((c * K + ki) * K + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          double* dst = dx + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

Var param(const Parameter& p, bool track) {
  auto n = std::make_shared<Node>();
  n->value = p.value;
  if (track) {
    n->requires_grad = true;
    const Parameter* pp = &p;
    n->backward = [pp](Node& self) {
      if (pp->grad.size() != pp->value.size()) pp->grad = Tensor(pp->value.shape());
      auto& g = pp->grad.storage();
      const auto& s = self.grad.storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
    };
  }
  return n;
}

void backward(const Var& root) {
  if (!root || root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

Var add(const Var& a, const Var& b) {
  expect_same_shape(a, b, "add");
  Tensor out = a->value;
  auto& o = out.storage();
  const auto& bv = b->value.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!needs_grad(in)) continue;
      auto& g = in->grad_buffer().storage();
      const auto& s = self.grad.storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().storage();
    const auto& d = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * d[i];
  });
}

Var mul_const(const Var& a, const Tensor& m) {
  if (a->value.shape() != m.shape()) {
    throw ShapeError("mul_const: shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(m.shape()));
  }
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return make(std::move(out), {a}, [m](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += m[i] * self.grad[i];
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; }, [slope](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (in.value[i] > 0.0 ? 1.0 : slope) * self.grad[i];
  });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += (1.0 - y * y) * self.grad[i];
    }
  });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, [lo, hi](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = in.value[i];
      if (x >= lo && x <= hi) g[i] += self.grad[i];
    }
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a->value.size());
  Tensor out(Shape{1}, a->value.sum() / n);
  return make(std::move(out), {a}, [n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().storage();
    const double d = self.grad[0] / n;
    for (auto& x : g) x += d;
  });
}

Var reshape(const Var& a, Shape s) {
  Tensor out = a->value.reshaped(std::move(s));
  return make(std::move(out), {a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().storage();
    const auto& d = self.grad.storage();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  });
}

Var concat0(const std::vector<Var>& parts) {
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p->value);
  Tensor out = cgnc::concat0(vals);
  return make(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (needs_grad(in)) {
        auto& g = in->grad_buffer().storage();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  const auto m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a->value.shape()) + " * " + shape_str(b->value.shape()));
  }
  Tensor out(Shape{m, n});
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a->value.data(), m, k) * ConstMatMap(b->value.data(), k, n);
  return make(std::move(out), {a, b}, [m, k, n](Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    ConstMatMap G(self.grad.data(), m, n);
    if (A.requires_grad) {
      MatMap(A.grad_buffer().data(), m, k).noalias() += G * ConstMatMap(B.value.data(), k, n).transpose();
    }
    if (B.requires_grad) {
      MatMap(B.grad_buffer().data(), k, n).noalias() += ConstMatMap(A.value.data(), m, k).transpose() * G;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  expect_rank(x, 2, "linear");
  expect_rank(w, 2, "linear");
  const auto n = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
  if (w->value.dim(1) != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " +
                     shape_str(w->value.shape()));
  }
  if (b && b->value.size() != static_cast<std::size_t>(out_dim)) throw ShapeError("linear: bias length mismatch");
  Tensor out(Shape{n, out_dim});
  MatMap O(out.data(), n, out_dim);
  O.noalias() = ConstMatMap(x->value.data(), n, in) * ConstMatMap(w->value.data(), out_dim, in).transpose();
  if (b) O.rowwise() += ConstVecMap(b->value.data(), out_dim).transpose();
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make(std::move(out), std::move(inputs), [n, in, out_dim](Node& self) {
    auto& X = *self.inputs[0];
    auto& Wt = *self.inputs[1];
    ConstMatMap G(self.grad.data(), n, out_dim);
    if (X.requires_grad) {
      MatMap(X.grad_buffer().data(), n, in).noalias() += G * ConstMatMap(Wt.value.data(), out_dim, in);
    }
    if (Wt.requires_grad) {
      MatMap(Wt.grad_buffer().data(), out_dim, in).noalias() += G.transpose() * ConstMatMap(X.value.data(), n, in);
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      VecMap(self.inputs[2]->grad_buffer().data(), out_dim) += G.colwise().sum().transpose();
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  expect_rank(x, 4, "conv2d");
  expect_rank(w, 4, "conv2d");
  const auto B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const auto O = w->value.dim(0), K = w->value.dim(2);
  if (w->value.dim(1) != C || w->value.dim(3) != K) {
    throw ShapeError("conv2d: weight " + shape_str(w->value.shape()) + " incompatible with input " +
                     shape_str(x->value.shape()));
  }
  if (stride < 1 || pad < 0) throw ArgumentError("conv2d: invalid stride/pad");
  const auto Ho = (H + 2 * pad - K) / stride + 1;
  const auto Wo = (W + 2 * pad - K) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x->value.shape()));
  const auto ckk = C * K * K, hw = Ho * Wo;

  const bool keep_cols = needs_grad(w);
  auto cols = std::make_shared<Storage>(static_cast<std::size_t>((keep_cols ? B : 1) * ckk * hw));
  Tensor out(Shape{B, O, Ho, Wo});
  ConstMatMap Wm(w->value.data(), O, ckk);
  for (std::int64_t bi = 0; bi < B; ++bi) {
    double* cb = cols->data() + (keep_cols ? bi * ckk * hw : 0);
    im2col(x->value.data() + bi * C * H * W, C, H, W, K, stride, pad, Ho, Wo, cb);
    MatMap Ob(out.data() + bi * O * hw, O, hw);
    Ob.noalias() = Wm * ConstMatMap(cb, ckk, hw);
    if (b) Ob.colwise() += ConstVecMap(b->value.data(), O);
  }
  if (!keep_cols) cols.reset();
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make(std::move(out), std::move(inputs), [=](Node& self) {
    auto& X = *self.inputs[0];
    auto& Wt = *self.inputs[1];
    ConstMatMap Wmat(Wt.value.data(), O, ckk);
    Storage dcols(X.requires_grad ? static_cast<std::size_t>(ckk * hw) : 0);
    for (std::int64_t bi = 0; bi < B; ++bi) {
      ConstMatMap G(self.grad.data() + bi * O * hw, O, hw);
      if (Wt.requires_grad) {
        MatMap(Wt.grad_buffer().data(), O, ckk).noalias() += G * ConstMatMap(cols->data() + bi * ckk * hw, ckk, hw).transpose();
      }
      if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
        VecMap(self.inputs[2]->grad_buffer().data(), O) += G.rowwise().sum();
      }
      if (X.requires_grad) {
        MatMap(dcols.data(), ckk, hw).noalias() = Wmat.transpose() * G;
        col2im(dcols.data(), C, H, W, K, stride, pad, Ho, Wo, X.grad_buffer().data() + bi * C * H * W);
      }
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  expect_rank(x, 4, "instance_norm");
  const auto B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  if (gamma->value.size() != static_cast<std::size_t>(C) || beta->value.size() != static_cast<std::size_t>(C)) {
    throw ShapeError("instance_norm: affine parameters do not match channel count " + std::to_string(C));
  }
  auto xhat = std::make_shared<Tensor>(x->value.shape());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C));
  Tensor out(x->value.shape());
  const double n = static_cast<double>(HW);
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* src = x->value.data() + bc * HW;
    double mu = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) mu += src[i];
    mu /= n;
    double var = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<std::size_t>(bc)] = is;
    const double g = gamma->value[static_cast<std::size_t>(bc % C)];
    const double be = beta->value[static_cast<std::size_t>(bc % C)];
    double* xh = xhat->data() + bc * HW;
    double* o = out.data() + bc * HW;
    for (std::int64_t i = 0; i < HW; ++i) {
      xh[i] = (src[i] - mu) * is;
      o[i] = g * xh[i] + be;
    }
  }
  return make(std::move(out), {x, gamma, beta}, [=](Node& self) {
    auto& X = *self.inputs[0];
    auto& G = *self.inputs[1];
    auto& Be = *self.inputs[2];
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const auto c = static_cast<std::size_t>(bc % C);
      const double* dy = self.grad.data() + bc * HW;
      const double* xh = xhat->data() + bc * HW;
      double sdy = 0.0, sdyx = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) {
        sdy += dy[i];
        sdyx += dy[i] * xh[i];
      }
      if (G.requires_grad) G.grad_buffer()[c] += sdyx;
      if (Be.requires_grad) Be.grad_buffer()[c] += sdy;
      if (X.requires_grad) {
        const double g = G.value[c];
        const double is = (*invstd)[static_cast<std::size_t>(bc)];
        double* dx = X.grad_buffer().data() + bc * HW;
        // d/dx of gamma * xhat, with xhat's dependence on mean and variance.
        for (std::int64_t i = 0; i < HW; ++i) {
          dx[i] += g * is * (dy[i] - sdy / n - xh[i] * sdyx / n);
        }
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  expect_rank(a, 4, "concat_channels");
  expect_rank(b, 4, "concat_channels");
  const auto B = a->value.dim(0), Ca = a->value.dim(1), Cb = b->value.dim(1);
  const auto HW = a->value.dim(2) * a->value.dim(3);
  if (b->value.dim(0) != B || b->value.dim(2) != a->value.dim(2) || b->value.dim(3) != a->value.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  }
  Tensor out(Shape{B, Ca + Cb, a->value.dim(2), a->value.dim(3)});
  for (std::int64_t bi = 0; bi < B; ++bi) {
    std::copy_n(a->value.data() + bi * Ca * HW, Ca * HW, out.data() + bi * (Ca + Cb) * HW);
    std::copy_n(b->value.data() + bi * Cb * HW, Cb * HW, out.data() + (bi * (Ca + Cb) + Ca) * HW);
  }
  return make(std::move(out), {a, b}, [=](Node& self) {
    for (std::int64_t bi = 0; bi < B; ++bi) {
      const double* g = self.grad.data() + bi * (Ca + Cb) * HW;
      if (self.inputs[0]->requires_grad) {
        double* d = self.inputs[0]->grad_buffer().data() + bi * Ca * HW;
        for (std::int64_t i = 0; i < Ca * HW; ++i) d[i] += g[i];
      }
      if (self.inputs[1]->requires_grad) {
        double* d = self.inputs[1]->grad_buffer().data() + bi * Cb * HW;
        for (std::int64_t i = 0; i < Cb * HW; ++i) d[i] += g[Ca * HW + i];
      }
    }
  });
}

Var broadcast_spatial(const Var& e, std::int64_t h, std::int64_t w) {
  expect_rank(e, 2, "broadcast_spatial");
  const auto B = e->value.dim(0), K = e->value.dim(1), HW = h * w;
  Tensor out(Shape{B, K, h, w});
  for (std::int64_t i = 0; i < B * K; ++i) std::fill_n(out.data() + i * HW, HW, e->value[static_cast<std::size_t>(i)]);
  return make(std::move(out), {e}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t i = 0; i < B * K; ++i) {
      const double* d = self.grad.data() + i * HW;
      double s = 0.0;
      for (std::int64_t j = 0; j < HW; ++j) s += d[j];
      g[static_cast<std::size_t>(i)] += s;
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  expect_rank(x, 4, "upsample_nearest2x");
  const auto BC = x->value.dim(0) * x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out(Shape{x->value.dim(0), x->value.dim(1), 2 * H, 2 * W});
  for (std::int64_t p = 0; p < BC; ++p) {
    const double* s = x->value.data() + p * H * W;
    double* o = out.data() + p * 4 * H * W;
    for (std::int64_t i = 0; i < 2 * H; ++i)
      for (std::int64_t j = 0; j < 2 * W; ++j) o[i * 2 * W + j] = s[(i / 2) * W + j / 2];
  }
  return make(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t p = 0; p < BC; ++p) {
      const double* d = self.grad.data() + p * 4 * H * W;
      double* t = g.data() + p * H * W;
      for (std::int64_t i = 0; i < 2 * H; ++i)
        for (std::int64_t j = 0; j < 2 * W; ++j) t[(i / 2) * W + j / 2] += d[i * 2 * W + j];
    }
  });
}

Var max_pool2(const Var& x) {
  expect_rank(x, 4, "max_pool2");
  const auto BC = x->value.dim(0) * x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const auto Ho = H / 2, Wo = W / 2;
  Tensor out(Shape{x->value.dim(0), x->value.dim(1), Ho, Wo});
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.size());
  for (std::int64_t p = 0; p < BC; ++p) {
    const double* s = x->value.data() + p * H * W;
    for (std::int64_t i = 0; i < Ho; ++i) {
      for (std::int64_t j = 0; j < Wo; ++j) {
        std::int64_t best = (2 * i) * W + 2 * j;
        for (std::int64_t di = 0; di < 2; ++di)
          for (std::int64_t dj = 0; dj < 2; ++dj) {
            const auto idx = (2 * i + di) * W + 2 * j + dj;
            if (s[idx] > s[best]) best = idx;
          }
        const auto o = static_cast<std::size_t>(p * Ho * Wo + i * Wo + j);
        out[o] = s[best];
        (*arg)[o] = p * H * W + best;
      }
    }
  }
  return make(std::move(out), {x}, [arg](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < arg->size(); ++o) g[static_cast<std::size_t>((*arg)[o])] += self.grad[o];
  });
}

Var avg_pool2(const Var& x) {
  expect_rank(x, 4, "avg_pool2");
  const auto BC = x->value.dim(0) * x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const auto Ho = H / 2, Wo = W / 2;
  Tensor out(Shape{x->value.dim(0), x->value.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < BC; ++p) {
    const double* s = x->value.data() + p * H * W;
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        const auto a = (2 * i) * W + 2 * j;
        out[static_cast<std::size_t>(p * Ho * Wo + i * Wo + j)] = 0.25 * (s[a] + s[a + 1] + s[a + W] + s[a + W + 1]);
      }
  }
  return make(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t p = 0; p < BC; ++p) {
      double* t = g.data() + p * H * W;
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          const double d = 0.25 * self.grad[static_cast<std::size_t>(p * Ho * Wo + i * Wo + j)];
          const auto a = (2 * i) * W + 2 * j;
          t[a] += d;
          t[a + 1] += d;
          t[a + W] += d;
          t[a + W + 1] += d;
        }
    }
  });
}

Var global_avg_pool(const Var& x) {
  expect_rank(x, 4, "global_avg_pool");
  const auto B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
  Tensor out(Shape{B, C});
  for (std::int64_t p = 0; p < B * C; ++p) {
    const double* s = x->value.data() + p * HW;
    double acc = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) acc += s[i];
    out[static_cast<std::size_t>(p)] = acc / static_cast<double>(HW);
  }
  return make(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t p = 0; p < B * C; ++p) {
      const double d = self.grad[static_cast<std::size_t>(p)] / static_cast<double>(HW);
      double* t = g.data() + p * HW;
      for (std::int64_t i = 0; i < HW; ++i) t[i] += d;
    }
  });
}

Var to_tokens(const Var& z) {
  expect_rank(z, 4, "to_tokens");
  const auto B = z->value.dim(0), C = z->value.dim(1), HW = z->value.dim(2) * z->value.dim(3);
  Tensor out(Shape{B, HW, C});
  for (std::int64_t b = 0; b < B; ++b)
    MatMap(out.data() + b * HW * C, HW, C) = ConstMatMap(z->value.data() + b * C * HW, C, HW).transpose();
  return make(std::move(out), {z}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t b = 0; b < B; ++b)
      MatMap(g.data() + b * C * HW, C, HW) += ConstMatMap(self.grad.data() + b * HW * C, HW, C).transpose();
  });
}

Var from_tokens(const Var& t, std::int64_t h, std::int64_t w) {
  expect_rank(t, 3, "from_tokens");
  const auto B = t->value.dim(0), HW = t->value.dim(1), C = t->value.dim(2);
  if (HW != h * w) throw ShapeError("from_tokens: token count " + std::to_string(HW) + " != h*w");
  Tensor out(Shape{B, C, h, w});
  for (std::int64_t b = 0; b < B; ++b)
    MatMap(out.data() + b * C * HW, C, HW) = ConstMatMap(t->value.data() + b * HW * C, HW, C).transpose();
  return make(std::move(out), {t}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t b = 0; b < B; ++b)
      MatMap(g.data() + b * HW * C, HW, C) += ConstMatMap(self.grad.data() + b * C * HW, C, HW).transpose();
  });
}

Var attention(const Var& q, const Var& k, const Var& v, Tensor* weights_out) {
  expect_rank(q, 3, "attention");
  expect_rank(k, 3, "attention");
  expect_rank(v, 3, "attention");
  const auto B = q->value.dim(0), n = q->value.dim(1), d = q->value.dim(2), T = k->value.dim(1);
  if (k->value.dim(0) != B || v->value.dim(0) != B || k->value.dim(2) != d || v->value.shape() != k->value.shape()) {
    throw ShapeError("attention: incompatible q/k/v shapes");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto weights = std::make_shared<Tensor>(Shape{B, n, T});
  Tensor out(Shape{B, n, d});
  for (std::int64_t b = 0; b < B; ++b) {
    ConstMatMap Q(q->value.data() + b * n * d, n, d);
    ConstMatMap Kb(k->value.data() + b * T * d, T, d);
    ConstMatMap Vb(v->value.data() + b * T * d, T, d);
    MatMap A(weights->data() + b * n * T, n, T);
    A.noalias() = (Q * Kb.transpose()) * inv_sqrt_d;
    for (std::int64_t i = 0; i < n; ++i) {
      const double mx = A.row(i).maxCoeff();
      A.row(i) = (A.row(i).array() - mx).exp();
      A.row(i) /= A.row(i).sum();
    }
    MatMap(out.data() + b * n * d, n, d).noalias() = A * Vb;
  }
  if (weights_out) *weights_out = *weights;
  return make(std::move(out), {q, k, v}, [=](Node& self) {
    auto& Qn = *self.inputs[0];
    auto& Kn = *self.inputs[1];
    auto& Vn = *self.inputs[2];
    RowMat dA(n, T), dS(n, T);
    for (std::int64_t b = 0; b < B; ++b) {
      ConstMatMap G(self.grad.data() + b * n * d, n, d);
      ConstMatMap A(weights->data() + b * n * T, n, T);
      ConstMatMap Q(Qn.value.data() + b * n * d, n, d);
      ConstMatMap Kb(Kn.value.data() + b * T * d, T, d);
      ConstMatMap Vb(Vn.value.data() + b * T * d, T, d);
      if (Vn.requires_grad) MatMap(Vn.grad_buffer().data() + b * T * d, T, d).noalias() += A.transpose() * G;
      dA.noalias() = G * Vb.transpose();
      // Softmax Jacobian applied row-wise.
      for (std::int64_t i = 0; i < n; ++i) {
        const double dot = (dA.row(i).array() * A.row(i).array()).sum();
        dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
      }
      dS *= inv_sqrt_d;
      if (Qn.requires_grad) MatMap(Qn.grad_buffer().data() + b * n * d, n, d).noalias() += dS * Kb;
      if (Kn.requires_grad) MatMap(Kn.grad_buffer().data() + b * T * d, T, d).noalias() += dS.transpose() * Q;
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<std::int64_t>& targets) {
  expect_rank(logits, 2, "cross_entropy");
  const auto B = logits->value.dim(0), L = logits->value.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != B) throw ShapeError("cross_entropy: target count != batch size");
  for (auto t : targets) {
    if (t < 0 || t >= L) throw ArgumentError("cross_entropy: target index " + std::to_string(t) + " out of range");
  }
  auto probs = std::make_shared<Tensor>(logits->value.shape());
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* z = logits->value.data() + b * L;
    const double mx = *std::max_element(z, z + L);
    double s = 0.0;
    for (std::int64_t j = 0; j < L; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::int64_t j = 0; j < L; ++j) probs->at(b, j) = std::exp(z[j] - lse);
    loss += lse - z[targets[static_cast<std::size_t>(b)]];
  }
  Tensor out(Shape{1}, loss / static_cast<double>(B));
  return make(std::move(out), {logits}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double scale = self.grad[0] / static_cast<double>(B);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t j = 0; j < L; ++j) {
        const double y = (j == targets[static_cast<std::size_t>(b)]) ? 1.0 : 0.0;
        g.at(b, j) += scale * (probs->at(b, j) - y);
      }
    }
  });
}

Var spectral_norm_weight(const Var& w, const Tensor& u, const Tensor& v) {
  expect_rank(w, 2, "spectral_norm_weight");
  const auto m = w->value.dim(0), n = w->value.dim(1);
  if (u.size() != static_cast<std::size_t>(m) || v.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("spectral_norm_weight: power-iteration vectors do not match " + shape_str(w->value.shape()));
  }
  ConstMatMap Wm(w->value.data(), m, n);
  ConstVecMap uv(u.data(), m), vv(v.data(), n);
  double sigma = uv.dot(Wm * vv);
  const bool degenerate = !(std::abs(sigma) > std::numeric_limits<double>::min());
  if (degenerate) sigma = 1.0;
  Tensor out = w->value;
  for (auto& x : out.storage()) x /= sigma;
  return make(std::move(out), {w}, [=](Node& self) {
    auto& W = *self.inputs[0];
    MatMap dW(W.grad_buffer().data(), m, n);
    ConstMatMap G(self.grad.data(), m, n);
    dW += G / sigma;
    if (!degenerate) {
      const double gw = (G.array() * ConstMatMap(W.value.data(), m, n).array()).sum();
      dW -= (gw / (sigma * sigma)) * (ConstVecMap(u.data(), m) * ConstVecMap(v.data(), n).transpose());
    }
  });
}

}  // namespace cgnc::ag
