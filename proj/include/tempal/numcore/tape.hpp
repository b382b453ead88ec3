#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "tempal/numcore/tensor.hpp"

namespace tempal {

/// Ordered record of differentiable operations.
///
/// Operations append a closure that reads the output gradient and accumulates
/// into input gradients. backward() replays them in exact reverse order. A
/// disabled tape records nothing, so forward passes through it carry no
/// bookkeeping cost.
template <typename Scalar>
class GradTape {
 public:
  using TensorT = Tensor<Scalar>;

  explicit GradTape(bool enabled = true) : enabled_(enabled) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }

  /// True when an op over these inputs must be recorded.
  template <typename... Ts>
  bool tracks(const Ts&... inputs) const {
    return enabled_ && (inputs.requires_grad() || ...);
  }

  /// Marks `out` as a recorded intermediate and appends its backward closure.
  void record(TensorT& out, std::function<void()> backward) {
    out.set_requires_grad(true);
    entries_.push_back({out.storage(), std::move(backward)});
  }

  /// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
  ///
  /// Intermediate gradients are reset first, so replaying the same tape twice
  /// adds exactly one more copy of the leaf gradients.
  void backward(const TensorT& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    for (auto& e : entries_) e.out->grad.setZero();
    auto& g = loss.storage()->grad;
    if (g.size() != 1) g = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(1);
    g[0] += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::Storage<Scalar>> out;
    std::function<void()> backward;
  };
  bool enabled_;
  std::vector<Entry> entries_;
};

}  // namespace tempal
