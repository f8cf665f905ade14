#pragma once

// Anisotropic rotary embedding over (t, h, w). Video tokens rotate by their
// grid position on all three axes; audio tokens rotate along t only (after
// time rescaling) and share one fixed spatial anchor, so the spatial part of
// any audio-audio logit is position independent.

#include "avdit/numerics/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace avdit {

struct PositionTriple {
  Index t = 0;
  Index h = 0;
  Index w = 0;
  bool operator==(const PositionTriple&) const = default;
};

enum class TokenKind { video, audio, text };

struct RopeConfig {
  Index head_dim = 16;
  Index d_t = 8;
  Index d_h = 4;
  Index d_w = 4;
  double base = 10000.0;
  Index anchor_h = 0;
  Index anchor_w = 0;
  /// Audio frame index -> video latent time (T_video_latent / T_audio_latent).
  double audio_time_scale = 1.0;
  /// Text row index -> video latent time.
  double text_time_scale = 1.0;

  /// Half of head_dim on t and a quarter each on h and w (rounded down to
  /// even); any remainder goes to t.
  static RopeConfig standard(Index head_dim, double audio_time_scale = 1.0, double text_time_scale = 1.0) {
    RopeConfig c;
    c.head_dim = head_dim;
    c.d_h = 2 * (head_dim / 8);
    c.d_w = c.d_h;
    c.d_t = head_dim - c.d_h - c.d_w;
    c.audio_time_scale = audio_time_scale;
    c.text_time_scale = text_time_scale;
    c.validate();
    return c;
  }

  void validate() const {
    if (d_t < 0 || d_h < 0 || d_w < 0 || d_t % 2 || d_h % 2 || d_w % 2) {
      throw std::invalid_argument("rope: per-axis channel counts must be even and non-negative");
    }
    if (d_t + d_h + d_w != head_dim) throw std::invalid_argument("rope: axis split must sum to head_dim");
    if (!(base > 1.0)) throw std::invalid_argument("rope: base must exceed 1");
  }
};

/// Rotation angles laid out as [t-block | h-block | w-block], head_dim / 2
/// entries, with angle_i = p_axis * base^(-2i / d_axis).
inline VectorX<double> rope_angles(const PositionTriple& pos, const RopeConfig& cfg,
                                   TokenKind kind = TokenKind::video) {
  double t = static_cast<double>(pos.t);
  double h = static_cast<double>(pos.h);
  double w = static_cast<double>(pos.w);
  if (kind != TokenKind::video) {
    t *= kind == TokenKind::audio ? cfg.audio_time_scale : cfg.text_time_scale;
    h = static_cast<double>(cfg.anchor_h);
    w = static_cast<double>(cfg.anchor_w);
  }
  VectorX<double> out(cfg.head_dim / 2);
  Index k = 0;
  auto fill = [&](double p, Index d) {
    for (Index i = 0; i < d / 2; ++i) {
      out[k++] = p * std::pow(cfg.base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    }
  };
  fill(t, cfg.d_t);
  fill(h, cfg.d_h);
  fill(w, cfg.d_w);
  return out;
}

/// Rotates each (2i, 2i+1) channel pair of the trailing head_dim axis by
/// `angles[i]`. Works on any tensor whose last extent is head_dim.
template <typename Scalar>
Tensor<Scalar> apply_rope(const Tensor<Scalar>& x, const VectorX<double>& angles) {
  if (x.rank() == 0) throw DimensionError("apply_rope: scalar input");
  const Index hd = x.shape().back();
  if (hd % 2 != 0) throw DimensionError("apply_rope: odd head_dim");
  if (angles.size() != hd / 2) throw DimensionError("apply_rope: angle count does not match head_dim");
  Tensor<Scalar> out = x;
  for (Index base = 0; base < x.numel(); base += hd) {
    for (Index i = 0; i < hd / 2; ++i) {
      const Scalar c = static_cast<Scalar>(std::cos(angles[i]));
      const Scalar s = static_cast<Scalar>(std::sin(angles[i]));
      const Scalar a = x[base + 2 * i], b = x[base + 2 * i + 1];
      out[base + 2 * i] = a * c - b * s;
      out[base + 2 * i + 1] = a * s + b * c;
    }
  }
  return out;
}

/// Per-row cos/sin tables for `rope_rows`.
template <typename Scalar>
struct RopeTable {
  MatrixX<Scalar> cos;
  MatrixX<Scalar> sin;
};

template <typename Scalar>
RopeTable<Scalar> rope_table(const std::vector<PositionTriple>& positions, const RopeConfig& cfg, TokenKind kind) {
  RopeTable<Scalar> table{MatrixX<Scalar>(static_cast<Index>(positions.size()), cfg.head_dim / 2),
                          MatrixX<Scalar>(static_cast<Index>(positions.size()), cfg.head_dim / 2)};
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const VectorX<double> a = rope_angles(positions[r], cfg, kind);
    for (Index i = 0; i < a.size(); ++i) {
      table.cos(static_cast<Index>(r), i) = static_cast<Scalar>(std::cos(a[i]));
      table.sin(static_cast<Index>(r), i) = static_cast<Scalar>(std::sin(a[i]));
    }
  }
  return table;
}

template <typename Scalar>
Var<Scalar> apply_rope(Var<Scalar> x, const RopeTable<Scalar>& table, Index n_heads) {
  return rope_rows(x, table.cos, table.sin, n_heads);
}

}  // namespace avdit
