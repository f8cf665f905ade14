#pragma once

// ODE sampling from t = 0 (noise) to t = 1 (data) with classifier-free
// guidance. Euler by default, Heun on request.

#include "avdit/flowmatch.hpp"

#include <functional>
#include <string>

namespace avdit {

enum class Integrator { euler, heun };

struct GuidanceSpec {
  double omega = 3.0;
  Index steps = 50;
  Task task = Task::T2AV;
  std::uint64_t seed = 0;
  Integrator method = Integrator::euler;

  void validate() const {
    if (steps < 1) throw ConfigError("sample.steps", "must be at least 1");
    if (!std::isfinite(omega)) throw ConfigError("sample.omega", "must be finite");
  }
};

class IntegrationError : public NumericError {
 public:
  IntegrationError(Index step, const std::string& what)
      : NumericError("integration aborted at step " + std::to_string(step) + ": " + what), step_(step) {}
  Index step() const { return step_; }

 private:
  Index step_;
};

/// v(x, t, cond, tv2a) for a latent pair.
template <typename Scalar>
using VelocityField =
    std::function<Latents<Scalar>(const Latents<Scalar>& x, double t, const ConditionSet<Scalar>& cond, bool tv2a)>;

template <typename Scalar>
VelocityField<Scalar> model_field(const MMDiT<Scalar>& model) {
  return [&model](const Latents<Scalar>& x, double t, const ConditionSet<Scalar>& cond, bool tv2a) {
    return model.model_forward(x.video, x.audio, t, cond, tv2a);
  };
}

/// v_null + omega (v_cond - v_null). omega = 1 and omega = 0 return the
/// conditional and unconditional fields unchanged.
template <typename Scalar>
Latents<Scalar> guide(const Latents<Scalar>& v_cond, const Latents<Scalar>& v_null, double omega) {
  if (omega == 1.0) return v_cond;
  if (omega == 0.0) return v_null;
  const Scalar w = static_cast<Scalar>(omega);
  Latents<Scalar> out = v_null;
  out.video.data() += w * (v_cond.video.data() - v_null.video.data());
  out.audio.data() += w * (v_cond.audio.data() - v_null.audio.data());
  return out;
}

template <typename Scalar>
Latents<Scalar> guided_field(const VelocityField<Scalar>& field, const Latents<Scalar>& x, double t,
                             const ConditionSet<Scalar>& cond, double omega, bool tv2a = false) {
  if (omega == 1.0) return field(x, t, cond, tv2a);
  const Latents<Scalar> v_null = field(x, t, ConditionSet<Scalar>::null(), tv2a);
  if (omega == 0.0) return v_null;
  return guide(field(x, t, cond, tv2a), v_null, omega);
}

/// Shapes of the latent pair a task produces; audio-only tasks carry a
/// zero-frame video.
inline Shape video_shape(const ModelConfig& cfg, bool with_video) {
  return {with_video ? cfg.video_frames : 0, cfg.video_height, cfg.video_width, cfg.video_channels};
}
inline Shape audio_shape(const ModelConfig& cfg) { return {cfg.audio_frames, cfg.audio_channels}; }

/// Starting point at t = 0. Audio noise is drawn first, then video, so the
/// audio prior does not depend on whether a video stream exists.
template <typename Scalar>
Latents<Scalar> initial_noise(const ModelConfig& cfg, const GuidanceSpec& spec) {
  Rng rng(spec.seed);
  Latents<Scalar> x;
  x.audio = gaussian_like<Scalar>(audio_shape(cfg), rng);
  x.video = gaussian_like<Scalar>(video_shape(cfg, spec.task != Task::TTS), rng);
  return x;
}

struct SamplerHooks {
  /// Called before each field evaluation with (step index, t).
  std::function<void(Index, double)> on_step;
};

/// Integrates from seeded noise. `clean_video` is required for TV2A (the
/// video stream is held at it); TI2AV takes frame 0 from `cond.image`.
template <typename Scalar>
Latents<Scalar> integrate(const VelocityField<Scalar>& field, const ModelConfig& cfg,
                          const ConditionSet<Scalar>& cond, const GuidanceSpec& spec,
                          const Tensor<Scalar>* clean_video = nullptr, const SamplerHooks* hooks = nullptr) {
  spec.validate();
  const bool tv2a = spec.task == Task::TV2A;
  if (tv2a && (!clean_video || clean_video->shape() != video_shape(cfg, true))) {
    throw std::invalid_argument("TV2A sampling needs a clean video latent of the model's shape");
  }
  if (spec.task == Task::TI2AV && !cond.image) throw std::invalid_argument("TI2AV sampling needs an identity image");

  Latents<Scalar> x = initial_noise<Scalar>(cfg, spec);
  const Index frame = cfg.video_height * cfg.video_width * cfg.video_channels;
  auto clamp = [&](Latents<Scalar>& s) {
    if (tv2a) s.video = *clean_video;
    if (spec.task == Task::TI2AV) s.video.data().head(frame) = cond.image->data();
  };
  clamp(x);

  const double dt = 1.0 / static_cast<double>(spec.steps);
  const Scalar h = static_cast<Scalar>(dt);
  auto eval = [&](const Latents<Scalar>& at, double t, Index k) {
    Latents<Scalar> v;
    try {
      v = guided_field(field, at, t, cond, spec.omega, tv2a);
    } catch (const NumericError& e) {
      throw IntegrationError(k, e.what());
    }
    if (!v.video.all_finite() || !v.audio.all_finite()) throw IntegrationError(k, "non-finite velocity");
    return v;
  };
  for (Index k = 0; k < spec.steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (hooks && hooks->on_step) hooks->on_step(k, t);
    const Latents<Scalar> v = eval(x, t, k);
    if (spec.method == Integrator::euler) {
      x.video.data() += h * v.video.data();
      x.audio.data() += h * v.audio.data();
    } else {
      Latents<Scalar> pred = x;
      pred.video.data() += h * v.video.data();
      pred.audio.data() += h * v.audio.data();
      clamp(pred);
      const Latents<Scalar> v2 = eval(pred, t + dt, k);
      x.video.data() += (h / Scalar(2)) * (v.video.data() + v2.video.data());
      x.audio.data() += (h / Scalar(2)) * (v.audio.data() + v2.audio.data());
    }
    clamp(x);
    if (!x.video.all_finite() || !x.audio.all_finite()) throw IntegrationError(k, "non-finite state");
  }
  return x;
}

}  // namespace avdit
