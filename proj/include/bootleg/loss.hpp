#pragma once

#include <cstdint>
#include <string>

#include "bootleg/tensor.hpp"

namespace bootleg {

enum class LossKind { MSE, MSENoForward, SmoothL1, L1 };
enum class Reduction { Mean, Sum };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind k);
Reduction parse_reduction(const std::string& name);
std::string to_string(Reduction r);

struct LossSpec {
  LossKind kind = LossKind::MSENoForward;
  Reduction reduction = Reduction::Mean;
  int monitor_every = 1;
  double smooth_l1_beta = 1.0;

  void validate() const;
  /// Whether the true loss value is evaluated (and logged) at `step`.
  bool monitored(std::uint64_t step) const { return step % monitor_every == 0; }
};

template <class T>
double mse(const Tensor<T>& pred, const Tensor<T>& target, Reduction r);
template <class T>
double smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, double beta, Reduction r);
template <class T>
double l1(const Tensor<T>& pred, const Tensor<T>& target, Reduction r);

/// Backward-only squared error. forward() stores pred - target and returns a
/// dummy 0; backward() turns the stored difference into d(loss)/d(pred)
/// scaled by the upstream gradient. No gradient flows to the target.
template <class T>
class MseNoForward {
 public:
  explicit MseNoForward(Reduction r) : reduction_(r) {}

  T forward(const Tensor<T>& pred, const Tensor<T>& target);
  Tensor<T> backward(T upstream) const;

  const Tensor<T>& saved() const { return diff_; }

 private:
  Reduction reduction_;
  Tensor<T> diff_;
};

/// Value and gradient wrt pred for any loss kind. For MSENoForward the
/// returned value is the dummy 0.
template <class T>
struct LossResult {
  double value = 0;
  Tensor<T> grad;
};

template <class T>
LossResult<T> loss_and_grad(const Tensor<T>& pred, const Tensor<T>& target,
                            const LossSpec& spec, T upstream = T{1});

}  // namespace bootleg
