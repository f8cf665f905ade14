#pragma once

// Dual-stream MM-DiT backbone.
//
// Video and audio tokens run through twin streams with identical block
// shapes. Each block does joint attention over the concatenated sequence,
// dual cross-attention (text and reference audio, summed), and an FFN, each
// residual branch modulated and gated by adaLN vectors derived from the
// timestep embedding.

#include "avdit/common.hpp"
#include "avdit/rope.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace avdit {

struct ModelConfig {
  Index n_blocks = 2;
  Index model_dim = 32;
  Index n_heads = 2;
  Index head_dim = 16;
  Index ffn_mult = 4;
  Index patch_t = 1;
  Index patch_h = 2;
  Index patch_w = 2;
  // Latent extents of one clip.
  Index video_frames = 8;
  Index video_height = 4;
  Index video_width = 4;
  Index video_channels = 8;
  Index audio_frames = 16;
  Index audio_channels = 8;
  Index text_dim = 16;
  Index text_len = 16;
  Index ref_len = 8;
  double norm_eps = 1e-6;

  Index video_grid_t() const { return video_frames / patch_t; }
  Index video_tokens() const { return video_grid_t() * (video_height / patch_h) * (video_width / patch_w); }
  Index video_token_channels() const { return patch_t * patch_h * patch_w * video_channels; }

  RopeConfig rope() const {
    const double audio_scale = static_cast<double>(video_grid_t()) / static_cast<double>(audio_frames);
    return RopeConfig::standard(head_dim, audio_scale, 1.0 / static_cast<double>(patch_t));
  }

  void validate() const {
    auto positive = [](Index v, const char* f) {
      if (v <= 0) throw ConfigError(std::string("model.") + f, "must be positive");
    };
    positive(n_blocks, "n_blocks");
    positive(model_dim, "model_dim");
    positive(n_heads, "n_heads");
    positive(head_dim, "head_dim");
    positive(ffn_mult, "ffn_mult");
    positive(patch_t, "patch_t");
    positive(patch_h, "patch_h");
    positive(patch_w, "patch_w");
    positive(video_frames, "video_frames");
    positive(video_height, "video_height");
    positive(video_width, "video_width");
    positive(video_channels, "video_channels");
    positive(audio_frames, "audio_frames");
    positive(audio_channels, "audio_channels");
    positive(text_dim, "text_dim");
    positive(text_len, "text_len");
    positive(ref_len, "ref_len");
    if (n_heads * head_dim != model_dim) throw ConfigError("model.model_dim", "must equal n_heads * head_dim");
    if (head_dim % 2 != 0) throw ConfigError("model.head_dim", "must be even");
    if (video_frames % patch_t) throw ConfigError("model.patch_t", "must divide video_frames");
    if (video_height % patch_h) throw ConfigError("model.patch_h", "must divide video_height");
    if (video_width % patch_w) throw ConfigError("model.patch_w", "must divide video_width");
    if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) throw ConfigError("model.norm_eps", "must be positive");
  }

  /// Dimensions reported for the full-size system (documentation only).
  static ModelConfig full_scale() {
    ModelConfig c;
    c.n_blocks = 30;
    c.model_dim = 3072;
    c.n_heads = 24;
    c.head_dim = 128;
    c.text_len = 512;
    c.ref_len = 257;
    return c;
  }
};

/// Conditioning inputs. A missing entry is the null condition and behaves
/// exactly like an all-zeros sequence of the fixed length.
template <typename Scalar>
struct ConditionSet {
  std::optional<Tensor<Scalar>> text;       // [text_len, text_dim]
  std::optional<Tensor<Scalar>> image;      // [1, H, W, C_v]
  std::optional<Tensor<Scalar>> ref_audio;  // [ref_len, C_a]

  static ConditionSet null() { return {}; }
  bool is_null() const { return !text && !image && !ref_audio; }

  void validate(const ModelConfig& cfg) const {
    if (text && text->shape() != Shape{cfg.text_len, cfg.text_dim}) {
      throw DimensionError("text condition must be " + shape_string({cfg.text_len, cfg.text_dim}) + ", got " +
                           shape_string(text->shape()));
    }
    if (ref_audio && ref_audio->shape() != Shape{cfg.ref_len, cfg.audio_channels}) {
      throw DimensionError("reference audio must be " + shape_string({cfg.ref_len, cfg.audio_channels}) +
                           ", got " + shape_string(ref_audio->shape()));
    }
    if (image && image->shape() != Shape{1, cfg.video_height, cfg.video_width, cfg.video_channels}) {
      throw DimensionError("identity image has shape " + shape_string(image->shape()));
    }
  }

  template <typename To>
  ConditionSet<To> cast() const {
    ConditionSet<To> out;
    if (text) out.text = text->template cast<To>();
    if (image) out.image = image->template cast<To>();
    if (ref_audio) out.ref_audio = ref_audio->template cast<To>();
    return out;
  }
};

/// Pads with zero rows or truncates to exactly `rows`.
template <typename Scalar>
Tensor<Scalar> fit_rows(const Tensor<Scalar>& seq, Index rows) {
  Tensor<Scalar> out({rows, seq.cols()});
  const Index keep = std::min(rows, seq.rows());
  out.matrix().topRows(keep) = seq.matrix().topRows(keep);
  return out;
}

// --- patchify -------------------------------------------------------------

/// [T, H, W, C] -> tokens in (t, h, w) grid order, channels ordered
/// (dt, dh, dw, c). T may be zero.
template <typename Scalar>
MatrixX<Scalar> patchify(const Tensor<Scalar>& video, const ModelConfig& cfg) {
  if (video.rank() != 4 || video.extent(1) != cfg.video_height || video.extent(2) != cfg.video_width ||
      video.extent(3) != cfg.video_channels || video.extent(0) % cfg.patch_t != 0) {
    throw DimensionError("video latent shape " + shape_string(video.shape()) + " does not fit the model");
  }
  const Index T = video.extent(0), H = cfg.video_height, W = cfg.video_width, C = cfg.video_channels;
  const Index gt = T / cfg.patch_t, gh = H / cfg.patch_h, gw = W / cfg.patch_w;
  MatrixX<Scalar> tokens(gt * gh * gw, cfg.video_token_channels());
  for (Index tt = 0; tt < gt; ++tt)
    for (Index hh = 0; hh < gh; ++hh)
      for (Index ww = 0; ww < gw; ++ww) {
        const Index row = (tt * gh + hh) * gw + ww;
        Index col = 0;
        for (Index dt = 0; dt < cfg.patch_t; ++dt)
          for (Index dh = 0; dh < cfg.patch_h; ++dh)
            for (Index dw = 0; dw < cfg.patch_w; ++dw) {
              const Index src = (((tt * cfg.patch_t + dt) * H + hh * cfg.patch_h + dh) * W + ww * cfg.patch_w + dw) * C;
              for (Index c = 0; c < C; ++c) tokens(row, col++) = video[src + c];
            }
      }
  return tokens;
}

template <typename Scalar>
Tensor<Scalar> unpatchify(const MatrixX<Scalar>& tokens, const ModelConfig& cfg, Index frames) {
  const Index H = cfg.video_height, W = cfg.video_width, C = cfg.video_channels;
  const Index gt = frames / cfg.patch_t, gh = H / cfg.patch_h, gw = W / cfg.patch_w;
  if (tokens.rows() != gt * gh * gw || tokens.cols() != cfg.video_token_channels()) {
    throw DimensionError("token matrix does not match the video grid");
  }
  Tensor<Scalar> video({frames, H, W, C});
  for (Index tt = 0; tt < gt; ++tt)
    for (Index hh = 0; hh < gh; ++hh)
      for (Index ww = 0; ww < gw; ++ww) {
        const Index row = (tt * gh + hh) * gw + ww;
        Index col = 0;
        for (Index dt = 0; dt < cfg.patch_t; ++dt)
          for (Index dh = 0; dh < cfg.patch_h; ++dh)
            for (Index dw = 0; dw < cfg.patch_w; ++dw) {
              const Index dst = (((tt * cfg.patch_t + dt) * H + hh * cfg.patch_h + dh) * W + ww * cfg.patch_w + dw) * C;
              for (Index c = 0; c < C; ++c) video[dst + c] = tokens(row, col++);
            }
      }
  return video;
}

inline std::vector<PositionTriple> video_positions(const ModelConfig& cfg, Index frames) {
  std::vector<PositionTriple> out;
  const Index gt = frames / cfg.patch_t, gh = cfg.video_height / cfg.patch_h, gw = cfg.video_width / cfg.patch_w;
  for (Index t = 0; t < gt; ++t)
    for (Index h = 0; h < gh; ++h)
      for (Index w = 0; w < gw; ++w) out.push_back({t, h, w});
  return out;
}

/// Audio tokens carry their frame index on t and the fixed spatial anchor.
inline std::vector<PositionTriple> audio_positions(const RopeConfig& rope, Index frames) {
  std::vector<PositionTriple> out;
  for (Index t = 0; t < frames; ++t) out.push_back({t, rope.anchor_h, rope.anchor_w});
  return out;
}

inline std::vector<PositionTriple> text_positions(const RopeConfig& rope, Index rows) {
  return audio_positions(rope, rows);
}

// --- parameters -----------------------------------------------------------

struct LinearIds {
  Index w = -1;
  Index b = -1;  // -1: no bias
};

/// Parameter ids of one stream inside one block.
struct StreamBlockIds {
  LinearIds q, k, v, o;
  LinearIds cross_q, text_k, text_v, ref_k, ref_v, cross_o;
  LinearIds fc1, fc2;
  LinearIds ada;  // model_dim -> 9 * model_dim
};

struct BlockIds {
  StreamBlockIds video, audio;
};

struct ModelIds {
  LinearIds time_fc1, time_fc2, text_embed;
  LinearIds video_in, audio_in, video_out, audio_out;
  std::vector<BlockIds> blocks;
};

/// The nine adaLN vectors, in order.
enum class Mod : Index { shift_attn, scale_attn, gate_attn, shift_cross, scale_cross, gate_cross, shift_ffn, scale_ffn, gate_ffn };

inline std::string stream_prefix(bool video) { return video ? "video." : "audio."; }

namespace detail {

/// Registers (or, when verifying, looks up) every parameter in a fixed order.
/// Init draws are taken from `rng` in registration order.
template <typename Scalar>
class LayoutBuilder {
 public:
  LayoutBuilder(ParamStore<Scalar>& store, std::mt19937_64* rng) : store_(store), rng_(rng) {}

  enum class Init { xavier, zero };

  Index tensor(const std::string& name, Shape shape, Init init, const std::vector<std::pair<Index, Index>>& zero_cols = {}) {
    if (!rng_) {
      const Index id = store_.index_of(name);
      if (store_[id].value.shape() != shape) {
        throw DimensionError("parameter " + name + " has shape " + shape_string(store_[id].value.shape()) +
                             ", expected " + shape_string(shape));
      }
      return id;
    }
    Tensor<Scalar> t(shape);
    if (init == Init::xavier) {
      const Index fan_in = shape[0], fan_out = shape.size() > 1 ? shape[1] : shape[0];
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-a, a);
      for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(u(*rng_));
      for (auto [c0, n] : zero_cols) t.matrix().middleCols(c0, n).setZero();
    }
    return store_.add(name, std::move(t));
  }

  LinearIds linear(const std::string& name, Index in, Index out, bool bias, Init init = Init::xavier,
                   const std::vector<std::pair<Index, Index>>& zero_cols = {}) {
    LinearIds ids;
    ids.w = tensor(name + ".w", {in, out}, init, zero_cols);
    if (bias) ids.b = tensor(name + ".b", {out}, Init::zero);
    return ids;
  }

 private:
  ParamStore<Scalar>& store_;
  std::mt19937_64* rng_;
};

template <typename Scalar>
ModelIds build_layout(const ModelConfig& cfg, ParamStore<Scalar>& store, std::mt19937_64* rng) {
  using Init = typename LayoutBuilder<Scalar>::Init;
  LayoutBuilder<Scalar> b(store, rng);
  const Index d = cfg.model_dim;
  ModelIds ids;
  ids.time_fc1 = b.linear("time.fc1", d, d, true);
  ids.time_fc2 = b.linear("time.fc2", d, d, true);
  ids.text_embed = b.linear("text_embed", cfg.text_dim, d, false);
  ids.video_in = b.linear("video.in", cfg.video_token_channels(), d, true);
  ids.audio_in = b.linear("audio.in", cfg.audio_channels, d, true);
  // gate columns of the adaLN map start at zero
  const std::vector<std::pair<Index, Index>> gates{{2 * d, d}, {5 * d, d}, {8 * d, d}};
  for (Index i = 0; i < cfg.n_blocks; ++i) {
    BlockIds blk;
    for (bool video : {true, false}) {
      const std::string p = stream_prefix(video) + "blocks." + std::to_string(i) + ".";
      StreamBlockIds s;
      s.q = b.linear(p + "attn.q", d, d, true);
      s.k = b.linear(p + "attn.k", d, d, true);
      s.v = b.linear(p + "attn.v", d, d, true);
      s.o = b.linear(p + "attn.o", d, d, true);
      s.cross_q = b.linear(p + "cross.q", d, d, true);
      s.text_k = b.linear(p + "cross.text_k", d, d, false);
      s.text_v = b.linear(p + "cross.text_v", d, d, false);
      s.ref_k = b.linear(p + "cross.ref_k", cfg.audio_channels, d, false);
      s.ref_v = b.linear(p + "cross.ref_v", cfg.audio_channels, d, false);
      s.cross_o = b.linear(p + "cross.o", d, d, false);
      s.fc1 = b.linear(p + "ffn.fc1", d, cfg.ffn_mult * d, true);
      s.fc2 = b.linear(p + "ffn.fc2", cfg.ffn_mult * d, d, true);
      s.ada = b.linear(p + "ada", d, 9 * d, true, Init::xavier, gates);
      (video ? blk.video : blk.audio) = s;
    }
    ids.blocks.push_back(blk);
  }
  ids.video_out = b.linear("video.out", d, cfg.video_token_channels(), true, Init::zero);
  ids.audio_out = b.linear("audio.out", d, cfg.audio_channels, true, Init::zero);
  return ids;
}

}  // namespace detail

// --- differentiable building blocks ---------------------------------------

template <typename Scalar>
Var<Scalar> linear(ParamBinding<Scalar>& bind, const LinearIds& ids, Var<Scalar> x) {
  Var<Scalar> y = matmul(x, bind(ids.w));
  if (ids.b >= 0) y = add_row(y, bind(ids.b));
  return y;
}

/// Sinusoidal features of t * 1000 (cos half, sin half), width `dim`.
template <typename Scalar>
MatrixX<Scalar> timestep_features(double t, Index dim) {
  MatrixX<Scalar> f(1, dim);
  const Index half = dim / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = t * 1000.0 * freq;
    f(0, i) = static_cast<Scalar>(std::cos(arg));
    f(0, half + i) = static_cast<Scalar>(std::sin(arg));
  }
  if (dim % 2) f(0, dim - 1) = Scalar(0);
  return f;
}

template <typename Scalar>
Var<Scalar> timestep_embed(ParamBinding<Scalar>& bind, const ModelIds& ids, double t, Index dim) {
  if (!std::isfinite(t)) throw NumericError("timestep is not finite");
  Var<Scalar> f = bind.graph().input(timestep_features<Scalar>(t, dim));
  return linear(bind, ids.time_fc2, silu(linear(bind, ids.time_fc1, f)));
}

/// Stream tokens already normalized and modulated, plus positions.
template <typename Scalar>
struct TokenBatch {
  Var<Scalar> video;  // n_v x model_dim (may be invalid when n_v = 0)
  std::vector<PositionTriple> video_pos;
  Var<Scalar> audio;  // n_a x model_dim
  std::vector<PositionTriple> audio_pos;
  bool tv2a = false;

  Index n_video() const { return video.valid() ? video.rows() : 0; }
  Index n_audio() const { return audio.valid() ? audio.rows() : 0; }
};

/// Joint attention mask: video queries never see audio keys under TV2A.
inline BoolMatrix tv2a_mask(Index n_video, Index n_audio) {
  BoolMatrix m = BoolMatrix::Constant(n_video + n_audio, n_video + n_audio, true);
  m.topRightCorner(n_video, n_audio).setConstant(false);
  return m;
}

template <typename Scalar>
struct StreamPair {
  Var<Scalar> video;
  Var<Scalar> audio;
};

/// Per-stream Q/K/V (RoPE on Q and K), one attention over the concatenated
/// sequence, per-stream output projections.
template <typename Scalar>
StreamPair<Scalar> joint_attention(ParamBinding<Scalar>& bind, const StreamBlockIds& video_ids,
                                   const StreamBlockIds& audio_ids, const TokenBatch<Scalar>& batch,
                                   const RopeConfig& rope, Index n_heads, MatrixX<Scalar>* capture = nullptr) {
  const Index nv = batch.n_video(), na = batch.n_audio();
  if (nv + na == 0) throw DimensionError("joint attention over an empty sequence");
  if (static_cast<Index>(batch.video_pos.size()) != nv || static_cast<Index>(batch.audio_pos.size()) != na) {
    throw DimensionError("position list length does not match token count");
  }
  struct Proj {
    Var<Scalar> q, k, v;
  };
  auto project = [&](Var<Scalar> x, const StreamBlockIds& ids, const std::vector<PositionTriple>& pos, TokenKind kind) {
    const auto table = rope_table<Scalar>(pos, rope, kind);
    return Proj{apply_rope(linear(bind, ids.q, x), table, n_heads), apply_rope(linear(bind, ids.k, x), table, n_heads),
                linear(bind, ids.v, x)};
  };
  std::optional<Proj> pv, pa;
  if (nv) pv = project(batch.video, video_ids, batch.video_pos, TokenKind::video);
  if (na) pa = project(batch.audio, audio_ids, batch.audio_pos, TokenKind::audio);
  Var<Scalar> q, k, v;
  if (pv && pa) {
    q = concat_rows(pv->q, pa->q);
    k = concat_rows(pv->k, pa->k);
    v = concat_rows(pv->v, pa->v);
  } else {
    const Proj& p = pv ? *pv : *pa;
    q = p.q;
    k = p.k;
    v = p.v;
  }
  std::optional<BoolMatrix> mask;
  if (batch.tv2a && nv && na) mask = tv2a_mask(nv, na);
  Var<Scalar> out = multihead_attention(q, k, v, n_heads, mask ? &*mask : nullptr, capture);
  StreamPair<Scalar> result;
  if (nv) result.video = linear(bind, video_ids.o, nv == out.rows() ? out : slice_rows(out, 0, nv));
  if (na) result.audio = linear(bind, audio_ids.o, na == out.rows() ? out : slice_rows(out, nv, na));
  return result;
}

/// Condition sequences lifted into the graph once per forward.
template <typename Scalar>
struct ConditionVars {
  std::optional<Var<Scalar>> text;  // text_len x model_dim (after text_embed)
  std::optional<Var<Scalar>> ref;   // ref_len x C_a
  RopeTable<Scalar> text_rope;
};

template <typename Scalar>
ConditionVars<Scalar> lift_conditions(ParamBinding<Scalar>& bind, const ModelIds& ids, const ModelConfig& cfg,
                                      const ConditionSet<Scalar>& cond) {
  cond.validate(cfg);
  ConditionVars<Scalar> out;
  auto& g = bind.graph();
  if (cond.text) {
    out.text = matmul(g.input(MatrixX<Scalar>(cond.text->matrix())), bind(ids.text_embed.w));
    const RopeConfig rope = cfg.rope();
    out.text_rope = rope_table<Scalar>(text_positions(rope, cfg.text_len), rope, TokenKind::text);
  }
  if (cond.ref_audio) out.ref = g.input(MatrixX<Scalar>(cond.ref_audio->matrix()));
  return out;
}

/// Queries attend text and reference audio separately; outputs are summed,
/// then projected. K/V maps are bias-free, so a null condition contributes
/// exactly zero. Text keys carry temporal RoPE (row j at frame j); the
/// reference branch is position-free.
template <typename Scalar>
Var<Scalar> dual_cross_attention(ParamBinding<Scalar>& bind, const StreamBlockIds& ids, Var<Scalar> x,
                                 const RopeTable<Scalar>& x_rope, const ConditionVars<Scalar>& cond, Index n_heads) {
  auto& g = bind.graph();
  std::optional<Var<Scalar>> fused;
  if (cond.text || cond.ref) {
    Var<Scalar> q = linear(bind, ids.cross_q, x);
    if (cond.text) {
      Var<Scalar> kt = apply_rope(matmul(*cond.text, bind(ids.text_k.w)), cond.text_rope, n_heads);
      Var<Scalar> vt = matmul(*cond.text, bind(ids.text_v.w));
      fused = multihead_attention(apply_rope(q, x_rope, n_heads), kt, vt, n_heads);
    }
    if (cond.ref) {
      Var<Scalar> kr = matmul(*cond.ref, bind(ids.ref_k.w));
      Var<Scalar> vr = matmul(*cond.ref, bind(ids.ref_v.w));
      Var<Scalar> r = multihead_attention(q, kr, vr, n_heads);
      fused = fused ? add(*fused, r) : r;
    }
  }
  if (!fused) return g.input(MatrixX<Scalar>::Zero(x.rows(), x.cols()));
  return matmul(*fused, bind(ids.cross_o.w));
}

/// Residual stream state for one modality inside the backbone.
template <typename Scalar>
struct StreamState {
  Var<Scalar> x;
  std::vector<PositionTriple> pos;
  RopeTable<Scalar> rope;
  Var<Scalar> t_emb;  // 1 x model_dim
  Index n() const { return x.valid() ? x.rows() : 0; }
};

/// One MM-DiT block applied to both streams in place.
template <typename Scalar>
void block_forward(ParamBinding<Scalar>& bind, const BlockIds& block, const ModelConfig& cfg,
                   StreamState<Scalar>& video, StreamState<Scalar>& audio, const ConditionVars<Scalar>& cond,
                   bool tv2a, MatrixX<Scalar>* capture = nullptr) {
  const Index d = cfg.model_dim;
  const Scalar eps = static_cast<Scalar>(cfg.norm_eps);
  struct Active {
    StreamState<Scalar>* s;
    const StreamBlockIds* ids;
    Var<Scalar> mods;
  };
  std::vector<Active> streams;
  if (video.n()) streams.push_back({&video, &block.video, {}});
  if (audio.n()) streams.push_back({&audio, &block.audio, {}});
  for (auto& a : streams) a.mods = linear(bind, a.ids->ada, silu(a.s->t_emb));
  auto mod = [d](const Active& a, Mod m) { return slice_cols(a.mods, static_cast<Index>(m) * d, d); };
  auto normed = [&](const Active& a, Mod shift, Mod scale_m) {
    return modulate(layer_norm_rows(a.s->x, eps), mod(a, shift), mod(a, scale_m));
  };

  TokenBatch<Scalar> batch;
  batch.tv2a = tv2a;
  for (auto& a : streams) {
    Var<Scalar> h = normed(a, Mod::shift_attn, Mod::scale_attn);
    if (a.s == &video) {
      batch.video = h;
      batch.video_pos = video.pos;
    } else {
      batch.audio = h;
      batch.audio_pos = audio.pos;
    }
  }
  const StreamPair<Scalar> attn =
      joint_attention(bind, block.video, block.audio, batch, cfg.rope(), cfg.n_heads, capture);
  for (auto& a : streams) {
    Var<Scalar> branch = a.s == &video ? attn.video : attn.audio;
    a.s->x = add(a.s->x, mul_row(branch, mod(a, Mod::gate_attn)));
  }
  for (auto& a : streams) {
    Var<Scalar> h = normed(a, Mod::shift_cross, Mod::scale_cross);
    Var<Scalar> c = dual_cross_attention(bind, *a.ids, h, a.s->rope, cond, cfg.n_heads);
    a.s->x = add(a.s->x, mul_row(c, mod(a, Mod::gate_cross)));
  }
  for (auto& a : streams) {
    Var<Scalar> h = normed(a, Mod::shift_ffn, Mod::scale_ffn);
    Var<Scalar> f = linear(bind, a.ids->fc2, gelu(linear(bind, a.ids->fc1, h)));
    a.s->x = add(a.s->x, mul_row(f, mod(a, Mod::gate_ffn)));
  }
}

/// Head-averaged joint-attention maps keyed by block index. Rows/cols are
/// ordered video tokens first, then audio tokens.
template <typename Scalar>
struct AttentionCapture {
  std::set<Index> blocks;
  std::map<Index, MatrixX<Scalar>> maps;
  Index n_video = 0;
  Index n_audio = 0;
};

template <typename Scalar>
struct ForwardInputs {
  MatrixX<Scalar> video_tokens;  // n_v x video_token_channels, n_v in {0, cfg.video_tokens()}
  MatrixX<Scalar> audio_tokens;  // audio_frames x audio_channels
  double t_video = 0.0;
  double t_audio = 0.0;
  const ConditionSet<Scalar>* cond = nullptr;
  bool tv2a = false;
  AttentionCapture<Scalar>* capture = nullptr;
};

template <typename Scalar>
struct ForwardOutputs {
  Var<Scalar> video;  // invalid when there were no video tokens
  Var<Scalar> audio;
};

/// Predicted velocities for a latent pair.
template <typename Scalar>
struct Latents {
  Tensor<Scalar> video;  // [T, H, W, C_v]
  Tensor<Scalar> audio;  // [T_a, C_a]
};

template <typename Scalar>
class MMDiT {
 public:
  /// Fresh weights: Xavier-uniform projections; adaLN gates and output heads zero.
  static MMDiT initialize(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MMDiT m;
    m.cfg_ = cfg;
    std::mt19937_64 rng(seed);
    m.ids_ = detail::build_layout(cfg, m.params_, &rng);
    return m;
  }

  /// Wraps existing weights; names and shapes must match the layout.
  static MMDiT from_params(const ModelConfig& cfg, ParamStore<Scalar> params) {
    cfg.validate();
    MMDiT m;
    m.cfg_ = cfg;
    m.params_ = std::move(params);
    m.ids_ = detail::build_layout(cfg, m.params_, nullptr);
    if (m.params_.size() != static_cast<Index>(count_layout(cfg))) {
      throw DimensionError("parameter store has entries outside the model layout");
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const ModelIds& ids() const { return ids_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }

  template <typename To>
  MMDiT<To> cast() const {
    return MMDiT<To>::from_params(cfg_, params_.template cast<To>());
  }

  ForwardOutputs<Scalar> forward(ParamBinding<Scalar>& bind, const ForwardInputs<Scalar>& in) const {
    const Index nv = in.video_tokens.rows(), na = in.audio_tokens.rows();
    if (nv != 0 && (nv != cfg_.video_tokens() || in.video_tokens.cols() != cfg_.video_token_channels())) {
      throw DimensionError("video token matrix does not match the model grid");
    }
    if (na != cfg_.audio_frames || in.audio_tokens.cols() != cfg_.audio_channels) {
      throw DimensionError("audio token matrix does not match the model");
    }
    auto& g = bind.graph();
    const RopeConfig rope = cfg_.rope();
    const ConditionSet<Scalar> none;
    const ConditionVars<Scalar> cond = lift_conditions(bind, ids_, cfg_, in.cond ? *in.cond : none);

    StreamState<Scalar> video, audio;
    audio.t_emb = timestep_embed(bind, ids_, in.t_audio, cfg_.model_dim);
    audio.pos = audio_positions(rope, na);
    audio.rope = rope_table<Scalar>(audio.pos, rope, TokenKind::audio);
    audio.x = linear(bind, ids_.audio_in, g.input(in.audio_tokens));
    if (nv) {
      video.t_emb = in.t_video == in.t_audio ? audio.t_emb : timestep_embed(bind, ids_, in.t_video, cfg_.model_dim);
      video.pos = video_positions(cfg_, cfg_.video_frames);
      video.rope = rope_table<Scalar>(video.pos, rope, TokenKind::video);
      video.x = linear(bind, ids_.video_in, g.input(in.video_tokens));
    }
    if (in.capture) {
      in.capture->n_video = nv;
      in.capture->n_audio = na;
    }
    for (Index b = 0; b < cfg_.n_blocks; ++b) {
      MatrixX<Scalar>* cap = nullptr;
      if (in.capture && in.capture->blocks.count(b)) cap = &in.capture->maps[b];
      block_forward(bind, ids_.blocks[static_cast<std::size_t>(b)], cfg_, video, audio, cond, in.tv2a, cap);
    }
    const Scalar eps = static_cast<Scalar>(cfg_.norm_eps);
    ForwardOutputs<Scalar> out;
    out.audio = linear(bind, ids_.audio_out, layer_norm_rows(audio.x, eps));
    if (nv) out.video = linear(bind, ids_.video_out, layer_norm_rows(video.x, eps));
    return out;
  }

  /// Velocity prediction for latent tensors. `video` may have zero frames
  /// (audio-only). Under TV2A the video stream is treated as clean (t = 1)
  /// and video queries are masked from audio keys.
  Latents<Scalar> model_forward(const Tensor<Scalar>& video, const Tensor<Scalar>& audio, double t,
                                const ConditionSet<Scalar>& cond, bool tv2a,
                                AttentionCapture<Scalar>* capture = nullptr) const {
    if (video.rank() != 4 || (video.extent(0) != 0 && video.extent(0) != cfg_.video_frames)) {
      throw DimensionError("video latent " + shape_string(video.shape()) + " does not match the model");
    }
    if (audio.shape() != Shape{cfg_.audio_frames, cfg_.audio_channels}) {
      throw DimensionError("audio latent " + shape_string(audio.shape()) + " does not match the model");
    }
    Graph<Scalar> g;
    ParamBinding<Scalar> bind(g, params_, GradMode::none);
    ForwardInputs<Scalar> in;
    in.video_tokens = patchify(video, cfg_);
    in.audio_tokens = audio.matrix();
    in.t_audio = t;
    in.t_video = tv2a ? 1.0 : t;
    in.cond = &cond;
    in.tv2a = tv2a;
    in.capture = capture;
    ForwardOutputs<Scalar> out = forward(bind, in);
    Latents<Scalar> result;
    result.audio = Tensor<Scalar>({cfg_.audio_frames, cfg_.audio_channels});
    result.audio.matrix() = out.audio.value();
    result.video = out.video.valid() ? unpatchify(MatrixX<Scalar>(out.video.value()), cfg_, video.extent(0))
                                     : Tensor<Scalar>(video.shape());
    return result;
  }

  /// Timestep embedding vector (model_dim).
  Tensor<Scalar> timestep_embedding(double t) const {
    Graph<Scalar> g;
    ParamBinding<Scalar> bind(g, params_, GradMode::none);
    Var<Scalar> e = timestep_embed(bind, ids_, t, cfg_.model_dim);
    Tensor<Scalar> out({cfg_.model_dim});
    out.matrix() = e.value();
    return out;
  }

 private:
  static std::size_t count_layout(const ModelConfig& cfg) {
    ParamStore<Scalar> probe;
    std::mt19937_64 rng(0);
    detail::build_layout(cfg, probe, &rng);
    return static_cast<std::size_t>(probe.size());
  }

  ModelConfig cfg_;
  ParamStore<Scalar> params_;
  ModelIds ids_;
};

}  // namespace avdit
