#include "bootleg/loss.hpp"

#include <cmath>

#include "bootleg/error.hpp"

namespace bootleg {

LossKind parse_loss_kind(const std::string& name) {
  if (name == "mse") return LossKind::MSE;
  if (name == "mse_no_forward") return LossKind::MSENoForward;
  if (name == "smooth_l1") return LossKind::SmoothL1;
  if (name == "l1") return LossKind::L1;
  fail(ErrorCode::InvalidConfig, "unknown loss '" + name + "'");
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::MSE: return "mse";
    case LossKind::MSENoForward: return "mse_no_forward";
    case LossKind::SmoothL1: return "smooth_l1";
    case LossKind::L1: return "l1";
  }
  return "?";
}

Reduction parse_reduction(const std::string& name) {
  if (name == "mean") return Reduction::Mean;
  if (name == "sum") return Reduction::Sum;
  fail(ErrorCode::InvalidConfig, "unknown reduction '" + name + "'");
}

std::string to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

void LossSpec::validate() const {
  require(monitor_every >= 1, ErrorCode::InvalidConfig, "loss.monitor_every must be >= 1");
  require(smooth_l1_beta > 0, ErrorCode::InvalidConfig, "smooth_l1 beta must be positive");
}

namespace {

template <class T>
void check_shapes(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.same_shape(target), ErrorCode::ShapeMismatch,
          "prediction " + shape_string(pred.shape()) + " vs target " +
              shape_string(target.shape()));
}

template <class T, class F>
double reduce(const Tensor<T>& pred, const Tensor<T>& target, Reduction r, F&& f) {
  check_shapes(pred, target);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    s += f(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  return r == Reduction::Mean && pred.size() ? s / static_cast<double>(pred.size()) : s;
}

}  // namespace

template <class T>
double mse(const Tensor<T>& pred, const Tensor<T>& target, Reduction r) {
  return reduce(pred, target, r, [](double d) { return d * d; });
}

template <class T>
double smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, double beta, Reduction r) {
  return reduce(pred, target, r, [beta](double d) {
    const double a = std::abs(d);
    return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  });
}

template <class T>
double l1(const Tensor<T>& pred, const Tensor<T>& target, Reduction r) {
  return reduce(pred, target, r, [](double d) { return std::abs(d); });
}

template <class T>
T MseNoForward<T>::forward(const Tensor<T>& pred, const Tensor<T>& target) {
  check_shapes(pred, target);
  diff_ = Tensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) diff_[i] = pred[i] - target[i];
  return T{0};
}

template <class T>
Tensor<T> MseNoForward<T>::backward(T upstream) const {
  T scale = T{2} * upstream;
  if (reduction_ == Reduction::Mean && diff_.size())
    scale /= static_cast<T>(diff_.size());
  Tensor<T> g(diff_.shape());
  for (std::size_t i = 0; i < diff_.size(); ++i) g[i] = scale * diff_[i];
  return g;
}

template <class T>
LossResult<T> loss_and_grad(const Tensor<T>& pred, const Tensor<T>& target,
                            const LossSpec& spec, T upstream) {
  check_shapes(pred, target);
  LossResult<T> res;
  const std::size_t n = pred.size();
  const double norm = spec.reduction == Reduction::Mean && n ? 1.0 / n : 1.0;
  switch (spec.kind) {
    case LossKind::MSENoForward: {
      MseNoForward<T> f(spec.reduction);
      res.value = f.forward(pred, target);
      res.grad = f.backward(upstream);
      return res;
    }
    case LossKind::MSE:
      res.value = mse(pred, target, spec.reduction);
      break;
    case LossKind::SmoothL1:
      res.value = smooth_l1(pred, target, spec.smooth_l1_beta, spec.reduction);
      break;
    case LossKind::L1:
      res.value = l1(pred, target, spec.reduction);
      break;
  }
  res.grad = Tensor<T>(pred.shape());
  const double beta = spec.smooth_l1_beta;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    double g = 0;
    switch (spec.kind) {
      case LossKind::MSE: g = 2 * d; break;
      case LossKind::SmoothL1: g = std::abs(d) < beta ? d / beta : (d > 0 ? 1 : -1); break;
      case LossKind::L1: g = d > 0 ? 1 : (d < 0 ? -1 : 0); break;
      default: break;
    }
    res.grad[i] = static_cast<T>(g * norm * upstream);
  }
  return res;
}

#define BOOTLEG_INSTANTIATE(T)                                                       \
  template double mse<T>(const Tensor<T>&, const Tensor<T>&, Reduction);             \
  template double smooth_l1<T>(const Tensor<T>&, const Tensor<T>&, double, Reduction); \
  template double l1<T>(const Tensor<T>&, const Tensor<T>&, Reduction);              \
  template class MseNoForward<T>;                                                    \
  template LossResult<T> loss_and_grad<T>(const Tensor<T>&, const Tensor<T>&,        \
                                          const LossSpec&, T);

BOOTLEG_INSTANTIATE(float)
BOOTLEG_INSTANTIATE(double)

}  // namespace bootleg
