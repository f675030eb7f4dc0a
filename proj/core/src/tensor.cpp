#include "mixttt/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mixttt/errors.hpp"

namespace mixttt {

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (std::size_t d : shape_) n *= d;
  data_.assign(n, 0.0);
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw InputError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor operator-(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw InputError("tensor subtraction: shape mismatch");
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace mixttt
