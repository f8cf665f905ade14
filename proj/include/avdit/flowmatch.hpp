#pragma once

// Conditional flow matching on the straight path x_t = (1 - t) x0 + t x1,
// regressing the velocity onto x1 - x0.

#include "avdit/mmdit.hpp"

#include <cmath>
#include <random>

namespace avdit {

using Rng = std::mt19937_64;

template <typename Scalar>
struct FlowSample {
  Tensor<Scalar> x0;
  Tensor<Scalar> x1;
  double t = 0.0;
  Tensor<Scalar> x_t;
  Tensor<Scalar> target;
};

template <typename Scalar>
FlowSample<Scalar> sample_path(const Tensor<Scalar>& x0, const Tensor<Scalar>& x1, double t) {
  if (x0.shape() != x1.shape()) {
    throw DimensionError("sample_path: " + shape_string(x0.shape()) + " vs " + shape_string(x1.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("sample_path: t must lie in [0, 1]");
  FlowSample<Scalar> s{x0, x1, t, Tensor<Scalar>(x0.shape()), Tensor<Scalar>(x0.shape())};
  // std::lerp is exact at both endpoints and when x0 == x1
  const Scalar ts = static_cast<Scalar>(t);
  for (Index i = 0; i < x0.numel(); ++i) s.x_t[i] = std::lerp(x0[i], x1[i], ts);
  s.target.data() = x1.data() - x0.data();
  return s;
}

/// Mean squared error over elements whose mask entry is nonzero (no mask:
/// all elements).
template <typename Scalar>
double cfm_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>* keep = nullptr) {
  if (pred.shape() != target.shape()) throw DimensionError("cfm_loss: prediction and target shapes differ");
  if (keep && keep->shape() != pred.shape()) throw DimensionError("cfm_loss: mask shape differs");
  double sum = 0.0;
  Index count = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    if (keep && (*keep)[i] == Scalar(0)) continue;
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += d * d;
    ++count;
  }
  if (count == 0) throw DimensionError("cfm_loss: no unmasked elements");
  return sum / static_cast<double>(count);
}

struct LossBreakdown {
  double loss_a = 0.0;
  double loss_v = 0.0;
  double total = 0.0;
  Task task = Task::T2AV;
};

/// TTS and TV2A generate audio only; the joint tasks add the video term.
inline bool task_has_video_loss(Task task) {
  switch (task) {
    case Task::TTS:
    case Task::TV2A: return false;
    case Task::T2AV:
    case Task::TI2AV:
    case Task::TR2AV: return true;
  }
  throw std::invalid_argument("compose_loss: unknown task");
}

inline LossBreakdown compose_loss(Task task, double loss_a, double loss_v) {
  LossBreakdown b;
  b.task = task;
  b.loss_a = loss_a;
  if (task_has_video_loss(task)) {
    b.loss_v = loss_v;
    b.total = loss_a + loss_v;
  } else {
    b.total = loss_a;
  }
  return b;
}

/// With probability p, every condition becomes null together.
template <typename Scalar>
ConditionSet<Scalar> condition_dropout(const ConditionSet<Scalar>& cond, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("condition_dropout: p must lie in [0, 1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < p ? ConditionSet<Scalar>::null() : cond;
}

inline double sample_timestep(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng);
}

template <typename Scalar>
Tensor<Scalar> gaussian_like(const Shape& shape, Rng& rng) {
  Tensor<Scalar> t(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(n(rng));
  return t;
}

}  // namespace avdit
