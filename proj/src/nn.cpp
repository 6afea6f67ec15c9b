#include "cgnc/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "cgnc/error.hpp"

namespace cgnc::nn {

Tensor kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : t.storage()) x = std * rng.normal();
  return t;
}

Tensor orthogonal(std::int64_t rows, std::int64_t cols, Rng& rng, double gain) {
  const auto big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // Sign fix makes the draw uniform over the orthogonal group.
  Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor t(Shape{rows, cols});
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) t.at(i, j) = gain * (rows >= cols ? q(i, j) : q(j, i));
  return t;
}

Conv2d::Conv2d(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, int s, Rng& rng,
               bool zero_init)
    : weight(name + ".weight", zero_init ? Tensor(Shape{out, in, k, k}) : kaiming_normal({out, in, k, k}, in * k * k, rng)),
      bias(name + ".bias", Tensor(Shape{out})),
      stride(s),
      pad(static_cast<int>(k / 2)) {}

ag::Var Conv2d::operator()(const ag::Var& x, bool track) const {
  return ag::conv2d(x, ag::param(weight, track), ag::param(bias, track), stride, pad);
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

InstanceNorm::InstanceNorm(const std::string& name, std::int64_t channels)
    : gamma(name + ".gamma", Tensor(Shape{channels}, 1.0)), beta(name + ".beta", Tensor(Shape{channels})) {}

ag::Var InstanceNorm::operator()(const ag::Var& x, bool track) const {
  return ag::instance_norm(x, ag::param(gamma, track), ag::param(beta, track));
}

void InstanceNorm::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Linear::Linear(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng)
    : weight(name + ".weight", kaiming_normal({out, in}, in, rng)), bias(name + ".bias", Tensor(Shape{out})) {}

ag::Var Linear::operator()(const ag::Var& x, bool track) const {
  return ag::linear(x, ag::param(weight, track), ag::param(bias, track));
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Adam::Adam(std::vector<Parameter*> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
  if (!(opt_.lr >= 0.0)) throw ArgumentError("Adam: learning rate must be non-negative");
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (p.grad.size() != p.value.size()) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

}  // namespace cgnc::nn
