#include "cgnc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cgnc/error.hpp"

namespace cgnc {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
  }
  return Tensor(std::move(s), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::slice0(std::int64_t begin, std::int64_t end) const {
  if (shape_.empty() || begin < 0 || end > shape_[0] || begin > end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(shape_));
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::int64_t inner = shape_[0] ? static_cast<std::int64_t>(data_.size()) / shape_[0] : 0;
  return Tensor(s, Storage(data_.begin() + begin * inner, data_.begin() + end * inner));
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double Tensor::min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }
double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat0 of empty list");
  Shape s = parts.front().shape();
  std::int64_t lead = 0;
  Storage data;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat0: mismatched shapes " + shape_str(s) + " and " + shape_str(p.shape()));
    }
    lead += p.dim(0);
    data.insert(data.end(), p.storage().begin(), p.storage().end());
  }
  s[0] = lead;
  return Tensor(s, std::move(data));
}

}  // namespace cgnc
