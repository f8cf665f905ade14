#pragma once

// Brute-force reference implementations, written with explicit loops and
// kept independent of the library kernels.

#include "avdit/mmdit.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace avdit::oracle {

using Mat = std::vector<std::vector<double>>;

template <typename Scalar>
Mat to_mat(const MatrixX<Scalar>& m) {
  Mat out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out[i][j] = static_cast<double>(m(i, j));
  return out;
}

inline MatrixX<double> to_eigen(const Mat& m) {
  MatrixX<double> out(static_cast<Index>(m.size()), m.empty() ? 0 : static_cast<Index>(m[0].size()));
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) out(i, j) = m[i][j];
  return out;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i][p] * b[p][j];
      c[i][j] = s;
    }
  return c;
}

/// x W + b, with b given as a single row (or empty for no bias).
inline Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y = matmul(x, w);
  if (!b.empty())
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
  return y;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  return c;
}

/// Rotates each head of every row by the angles of that row's position.
inline Mat rope(const Mat& x, const std::vector<PositionTriple>& pos, const RopeConfig& cfg, TokenKind kind,
                Index n_heads) {
  Mat out = x;
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);
  for (std::size_t r = 0; r < x.size(); ++r) {
    const VectorX<double> ang = rope_angles(pos[r], cfg, kind);
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const std::size_t c0 = h * hd + 2 * i;
        const double a = x[r][c0], b = x[r][c0 + 1];
        out[r][c0] = a * std::cos(ang[static_cast<Index>(i)]) - b * std::sin(ang[static_cast<Index>(i)]);
        out[r][c0 + 1] = a * std::sin(ang[static_cast<Index>(i)]) + b * std::cos(ang[static_cast<Index>(i)]);
      }
  }
  return out;
}

/// Multi-head softmax(QK^T / sqrt(d)) V with an allow-mask (empty: all allowed).
/// Fully blocked rows output zeros.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, Index n_heads,
                     const std::vector<std::vector<bool>>& allow = {}) {
  const std::size_t nq = q.size(), nk = k.size(), d = q[0].size() / static_cast<std::size_t>(n_heads);
  Mat out(nq, std::vector<double>(q[0].size(), 0.0));
  for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> logit(nk, -std::numeric_limits<double>::infinity());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        if (!allow.empty() && !allow[i][j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += q[i][h * d + c] * k[j][h * d + c];
        logit[j] = s / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, logit[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (std::size_t j = 0; j < nk; ++j) z += std::isinf(logit[j]) ? 0.0 : std::exp(logit[j] - mx);
      for (std::size_t j = 0; j < nk; ++j) {
        if (std::isinf(logit[j])) continue;
        const double p = std::exp(logit[j] - mx) / z;
        for (std::size_t c = 0; c < d; ++c) out[i][h * d + c] += p * v[j][h * d + c];
      }
    }
  return out;
}

template <typename Scalar>
Mat param(const ParamStore<Scalar>& store, Index id) {
  if (id < 0) return {};
  return to_mat<Scalar>(store[id].value.matrix());
}

struct JointResult {
  Mat video, audio;
};

/// Joint attention computed on one explicit concatenated sequence. With
/// `video_keys_only`, video queries see only video keys and audio queries
/// see everything.
template <typename Scalar>
JointResult joint_attention(const ParamStore<Scalar>& store, const StreamBlockIds& vid, const StreamBlockIds& aud,
                            const Mat& xv, const std::vector<PositionTriple>& pv, const Mat& xa,
                            const std::vector<PositionTriple>& pa, const RopeConfig& cfg, Index n_heads,
                            bool video_keys_only) {
  auto proj = [&](const Mat& x, const LinearIds& l) {
    return linear(x, param(store, l.w), param(store, l.b));
  };
  const Mat qv = rope(proj(xv, vid.q), pv, cfg, TokenKind::video, n_heads);
  const Mat kv = rope(proj(xv, vid.k), pv, cfg, TokenKind::video, n_heads);
  const Mat vv = proj(xv, vid.v);
  const Mat qa = rope(proj(xa, aud.q), pa, cfg, TokenKind::audio, n_heads);
  const Mat ka = rope(proj(xa, aud.k), pa, cfg, TokenKind::audio, n_heads);
  const Mat va = proj(xa, aud.v);
  Mat q = qv, k = kv, v = vv;
  q.insert(q.end(), qa.begin(), qa.end());
  k.insert(k.end(), ka.begin(), ka.end());
  v.insert(v.end(), va.begin(), va.end());
  std::vector<std::vector<bool>> allow;
  if (video_keys_only) {
    allow.assign(q.size(), std::vector<bool>(k.size(), true));
    for (std::size_t i = 0; i < qv.size(); ++i)
      for (std::size_t j = kv.size(); j < k.size(); ++j) allow[i][j] = false;
  }
  const Mat o = attention(q, k, v, n_heads, allow);
  JointResult r;
  r.video.assign(o.begin(), o.begin() + static_cast<std::ptrdiff_t>(qv.size()));
  r.audio.assign(o.begin() + static_cast<std::ptrdiff_t>(qv.size()), o.end());
  r.video = linear(r.video, param(store, vid.o.w), param(store, vid.o.b));
  r.audio = linear(r.audio, param(store, aud.o.w), param(store, aud.o.b));
  return r;
}

inline double max_abs_diff(const Mat& a, const MatrixX<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      m = std::max(m, std::abs(a[i][j] - b(static_cast<Index>(i), static_cast<Index>(j))));
  return m;
}

}  // namespace avdit::oracle
