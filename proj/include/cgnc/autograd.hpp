#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cgnc/tensor.hpp"

namespace cgnc {

// A learnable array. `grad` is an accumulator written by backward passes; it
// is not part of the logical value, hence mutable.
struct Parameter {
  std::string name;
  Tensor value;
  mutable Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() const { grad = Tensor(value.shape()); }
};

namespace ag {

struct Node;
using Var = std::shared_ptr<Node>;

// Reverse-mode graph node. Nodes that do not depend on any tracked leaf carry
// no inputs and no backward closure, so inference builds no graph.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor& grad_buffer();
};

Var constant(Tensor t);
// Free leaf that requires a gradient (read it back from ->grad).
Var leaf(Tensor t);
// Parameter leaf; when `track` is set, gradients accumulate into p.grad.
Var param(const Parameter& p, bool track);

// Runs reverse accumulation from a scalar root.
void backward(const Var& root);

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& m);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var tanh(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var mean(const Var& a);
Var reshape(const Var& a, Shape s);
Var concat0(const std::vector<Var>& parts);

// a [m x k] * b [k x n]
Var matmul(const Var& a, const Var& b);
// x [n x in], w [out x in], optional b [out] -> x w^T + b
Var linear(const Var& x, const Var& w, const Var& b);

// x [B,C,H,W], w [O,C,K,K], optional b [O]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// Per-(sample, channel) normalization over space with affine gamma/beta [C].
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var concat_channels(const Var& a, const Var& b);
// e [B,K] -> [B,K,h,w] with every spatial position equal to the row of e.
Var broadcast_spatial(const Var& e, std::int64_t h, std::int64_t w);
Var upsample_nearest2x(const Var& x);
Var max_pool2(const Var& x);
Var avg_pool2(const Var& x);
// [B,C,H,W] -> [B,C]
Var global_avg_pool(const Var& x);

// [B,C,h,w] -> [B,h*w,C] and back.
Var to_tokens(const Var& z);
Var from_tokens(const Var& t, std::int64_t h, std::int64_t w);

// Scaled dot-product attention. q [B,n,d], k,v [B,T,d] -> [B,n,d].
// If `weights_out` is non-null it receives the softmax matrix [B,n,T].
Var attention(const Var& q, const Var& k, const Var& v, Tensor* weights_out = nullptr);

// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(const Var& logits, const std::vector<std::int64_t>& targets);

// w / sigma with sigma = u^T w v and (u, v) held constant; sigma == 0 is
// treated as 1 so a zero weight passes through unchanged.
Var spectral_norm_weight(const Var& w, const Tensor& u, const Tensor& v);

}  // namespace ag
}  // namespace cgnc
