#pragma once

// Synthetic audiovisual world. A hidden phoneme sequence drives both latent
// streams: each video frame stamps a viseme template on the mouth region of
// an identity background, each audio frame carries a phoneme template plus
// a timbre vector from a subspace orthogonal to the phonemes.

#include "avdit/mmdit.hpp"

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace avdit {

struct ToyWorldConfig {
  Index alphabet = 4;
  Index frames = 8;
  Index height = 4;
  Index width = 4;
  Index video_channels = 8;
  Index audio_per_frame = 2;
  Index audio_channels = 8;
  Index timbre_dim = 4;
  std::vector<std::pair<Index, Index>> mouth{{2, 1}, {2, 2}, {3, 1}, {3, 2}};
  double noise_std = 0.05;
  Index text_len = 16;
  Index text_dim = 16;
  Index ref_len = 8;
  Index ref_min = 4;
  Index ref_max = 8;
  Index n_identities = 4;
  double template_gain = 2.0;
  double timbre_gain = 1.0;
  std::uint64_t bank_seed = 1234;

  Index audio_frames() const { return frames * audio_per_frame; }
  Index mouth_dim() const { return static_cast<Index>(mouth.size()) * video_channels; }
  Index n_timbres() const { return timbre_dim; }

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Model extents implied by a world (architecture fields keep their defaults).
ModelConfig model_config_for(const ToyWorldConfig& world, ModelConfig base = {});

/// Throws ConfigError when the model cannot consume this world's latents.
void check_compatible(const ModelConfig& model, const ToyWorldConfig& world);

struct TemplateBank {
  MatrixX<double> visemes;   // A x mouth_dim, orthogonal rows of norm template_gain
  MatrixX<double> phonemes;  // A x C_a
  MatrixX<double> timbre_basis;  // timbre_dim x C_a, orthonormal, orthogonal to phonemes
  MatrixX<double> identities;    // n_identities x (H * W * C_v)
  MatrixX<double> text_table;    // A x text_dim

  static TemplateBank build(const ToyWorldConfig& world);

  /// Timbre k as a C_a vector (scaled by timbre_gain).
  RowVectorX<double> timbre_vector(Index k, const ToyWorldConfig& world) const;
  double min_viseme_distance() const;
  double min_phoneme_distance() const;
};

struct PairedSample {
  std::vector<Index> phonemes;  // length T
  Tensor<float> video;          // [T, H, W, C_v]
  Tensor<float> audio;          // [T_a, C_a]
  Tensor<float> text;           // [text_len, text_dim]
  Tensor<float> identity;       // [1, H, W, C_v], the clean frame 0
  Tensor<float> ref_audio;      // [ref_len, C_a]
  Index identity_id = 0;
  Index timbre_id = 0;
  Index ref_frames = 0;
};

PairedSample make_paired_sample(std::mt19937_64& rng, const ToyWorldConfig& world, const TemplateBank& bank);

/// Renders audio for the given per-video-frame phonemes (no noise when
/// noise_std is zero).
Tensor<float> render_audio(const std::vector<Index>& phonemes, Index timbre, std::mt19937_64& rng,
                           const ToyWorldConfig& world, const TemplateBank& bank);
Tensor<float> render_video(const std::vector<Index>& phonemes, Index identity, std::mt19937_64& rng,
                           const ToyWorldConfig& world, const TemplateBank& bank);
Tensor<float> render_text(const std::vector<Index>& phonemes, const ToyWorldConfig& world, const TemplateBank& bank);

/// A fresh reference clip of random length in [ref_min, ref_max] audio
/// frames with the given timbre, zero-padded (or truncated) to ref_len.
Tensor<float> make_ref_audio(std::mt19937_64& rng, Index timbre, const ToyWorldConfig& world,
                             const TemplateBank& bank, Index* frames_out = nullptr);

enum class BankKind { viseme, phoneme };

/// Nearest template id by L2 (timbre subspace removed for audio); ties go
/// to the lowest id.
Index nearest_phoneme(const VectorX<double>& frame, const TemplateBank& bank, BankKind which);

/// Mouth-region vector of video frame i.
VectorX<double> mouth_patch(const Tensor<float>& video, Index frame, const ToyWorldConfig& world);

std::vector<Index> decode_video(const Tensor<float>& video, const ToyWorldConfig& world, const TemplateBank& bank);
/// Majority vote over each block of audio_per_frame audio frames.
std::vector<Index> decode_audio(const Tensor<float>& audio, const ToyWorldConfig& world, const TemplateBank& bank);

double sync_agreement(const Tensor<float>& video, const Tensor<float>& audio, const TemplateBank& bank,
                      const ToyWorldConfig& world);

double timbre_similarity(const Tensor<float>& audio, Index timbre, const TemplateBank& bank,
                         const ToyWorldConfig& world);

/// Fraction of decoded frames matching the prompt. With a video stream the
/// video and audio fractions are averaged; an empty video counts audio only.
double text_adherence(const Tensor<float>& video, const Tensor<float>& audio, const std::vector<Index>& phonemes,
                      const TemplateBank& bank, const ToyWorldConfig& world);

/// Grayscale images for inspection: one image per video frame laid out
/// H x (W * C_v), and the audio as a C_a x T_a "spectrogram".
std::vector<MatrixX<double>> video_frame_images(const Tensor<float>& video);
MatrixX<double> audio_image(const Tensor<float>& audio);

}  // namespace avdit
