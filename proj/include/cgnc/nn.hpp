#pragma once

#include <string>
#include <vector>

#include "cgnc/autograd.hpp"
#include "cgnc/rng.hpp"

namespace cgnc::nn {

// N(0, 2 / fan_in) entries.
Tensor kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng);
// rows x cols matrix with orthonormal rows or columns (whichever is fewer).
Tensor orthogonal(std::int64_t rows, std::int64_t cols, Rng& rng, double gain = 1.0);

struct Conv2d {
  Parameter weight;  // [out, in, k, k]
  Parameter bias;    // [out]
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  // zero_init leaves weight and bias at 0; otherwise Kaiming-normal weight.
  Conv2d(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, int stride, Rng& rng,
         bool zero_init = false);
  ag::Var operator()(const ag::Var& x, bool track) const;
  void collect(std::vector<Parameter*>& out);
};

struct InstanceNorm {
  Parameter gamma;
  Parameter beta;

  InstanceNorm() = default;
  InstanceNorm(const std::string& name, std::int64_t channels);
  ag::Var operator()(const ag::Var& x, bool track) const;
  void collect(std::vector<Parameter*>& out);
};

struct Linear {
  Parameter weight;  // [out, in]
  Parameter bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng);
  ag::Var operator()(const ag::Var& x, bool track) const;
  void collect(std::vector<Parameter*>& out);
};

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opt);

  void zero_grad();
  void step();
  const AdamOptions& options() const { return opt_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t t_ = 0;
};

}  // namespace cgnc::nn
