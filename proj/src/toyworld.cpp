#include "avdit/toyworld.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace avdit {

void ToyWorldConfig::validate() const {
  auto positive = [](Index v, const char* f) {
    if (v <= 0) throw ConfigError(std::string("world.") + f, "must be positive");
  };
  if (alphabet < 2) throw ConfigError("world.alphabet", "must be at least 2");
  positive(frames, "frames");
  positive(height, "height");
  positive(width, "width");
  positive(video_channels, "video_channels");
  positive(audio_per_frame, "audio_per_frame");
  positive(audio_channels, "audio_channels");
  positive(timbre_dim, "timbre_dim");
  positive(text_len, "text_len");
  positive(text_dim, "text_dim");
  positive(ref_len, "ref_len");
  positive(n_identities, "n_identities");
  if (mouth.empty()) throw ConfigError("world.mouth", "must list at least one cell");
  std::set<std::pair<Index, Index>> seen;
  for (const auto& [h, w] : mouth) {
    if (h < 0 || h >= height || w < 0 || w >= width) throw ConfigError("world.mouth", "cell outside the grid");
    if (!seen.insert({h, w}).second) throw ConfigError("world.mouth", "duplicate cell");
  }
  if (mouth_dim() < alphabet) throw ConfigError("world.mouth", "mouth region too small for the alphabet");
  if (alphabet + timbre_dim > audio_channels) {
    throw ConfigError("world.audio_channels", "must hold alphabet + timbre_dim orthogonal directions");
  }
  if (text_len < frames) throw ConfigError("world.text_len", "must be at least frames");
  if (ref_min < 1 || ref_max < ref_min) throw ConfigError("world.ref_min", "need 1 <= ref_min <= ref_max");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("world.noise_std", "must be >= 0");
  if (!(template_gain > 0.0) || !std::isfinite(template_gain)) {
    throw ConfigError("world.template_gain", "must be positive");
  }
  if (!(timbre_gain >= 0.0) || !std::isfinite(timbre_gain)) throw ConfigError("world.timbre_gain", "must be >= 0");
  // orthogonal rows of norm g sit sqrt(2) g apart
  if (std::sqrt(2.0) * template_gain <= 6.0 * noise_std) {
    throw ConfigError("world.template_gain", "templates not separable at this noise level");
  }
}

ModelConfig model_config_for(const ToyWorldConfig& world, ModelConfig base) {
  base.video_frames = world.frames;
  base.video_height = world.height;
  base.video_width = world.width;
  base.video_channels = world.video_channels;
  base.audio_frames = world.audio_frames();
  base.audio_channels = world.audio_channels;
  base.text_dim = world.text_dim;
  base.text_len = world.text_len;
  base.ref_len = world.ref_len;
  return base;
}

void check_compatible(const ModelConfig& m, const ToyWorldConfig& w) {
  auto same = [](Index a, Index b, const char* field) {
    if (a != b) throw ConfigError(field, "must match the world (" + std::to_string(b) + ")");
  };
  same(m.video_frames, w.frames, "model.video_frames");
  same(m.video_height, w.height, "model.video_height");
  same(m.video_width, w.width, "model.video_width");
  same(m.video_channels, w.video_channels, "model.video_channels");
  same(m.audio_frames, w.audio_frames(), "model.audio_frames");
  same(m.audio_channels, w.audio_channels, "model.audio_channels");
  same(m.text_dim, w.text_dim, "model.text_dim");
  same(m.text_len, w.text_len, "model.text_len");
  same(m.ref_len, w.ref_len, "model.ref_len");
}

namespace {

/// n orthonormal columns of dimension d from a seeded Gaussian draw.
MatrixX<double> orthonormal_columns(Index d, Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(d, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < d; ++i) a(i, j) = g(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, n);
  return q;
}

double min_row_distance(const MatrixX<double>& m) {
  double best = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = i + 1; j < m.rows(); ++j) best = std::min(best, (m.row(i) - m.row(j)).norm());
  return best;
}

Index argmin_distance(const VectorX<double>& x, const MatrixX<double>& bank) {
  Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < bank.rows(); ++k) {
    const double d = (bank.row(k).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Index majority(const std::vector<Index>& votes, Index alphabet) {
  std::vector<Index> count(static_cast<std::size_t>(alphabet), 0);
  for (Index v : votes) ++count[static_cast<std::size_t>(v)];
  return static_cast<Index>(std::max_element(count.begin(), count.end()) - count.begin());
}

}  // namespace

TemplateBank TemplateBank::build(const ToyWorldConfig& world) {
  world.validate();
  std::mt19937_64 rng(world.bank_seed);
  TemplateBank b;
  b.visemes = world.template_gain * orthonormal_columns(world.mouth_dim(), world.alphabet, rng).transpose();
  const MatrixX<double> audio_dirs =
      orthonormal_columns(world.audio_channels, world.alphabet + world.timbre_dim, rng).transpose();
  b.phonemes = world.template_gain * audio_dirs.topRows(world.alphabet);
  b.timbre_basis = audio_dirs.bottomRows(world.timbre_dim);
  std::normal_distribution<double> g;
  b.identities.resize(world.n_identities, world.height * world.width * world.video_channels);
  for (Index i = 0; i < b.identities.size(); ++i) b.identities.data()[i] = g(rng);
  b.text_table.resize(world.alphabet, world.text_dim);
  for (Index i = 0; i < b.text_table.size(); ++i) b.text_table.data()[i] = g(rng);
  return b;
}

RowVectorX<double> TemplateBank::timbre_vector(Index k, const ToyWorldConfig& world) const {
  if (k < 0 || k >= timbre_basis.rows()) throw std::out_of_range("timbre id " + std::to_string(k));
  return world.timbre_gain * timbre_basis.row(k);
}

double TemplateBank::min_viseme_distance() const { return min_row_distance(visemes); }
double TemplateBank::min_phoneme_distance() const { return min_row_distance(phonemes); }

Tensor<float> render_video(const std::vector<Index>& phonemes, Index identity, std::mt19937_64& rng,
                           const ToyWorldConfig& world, const TemplateBank& bank) {
  const Index H = world.height, W = world.width, C = world.video_channels;
  Tensor<float> video({static_cast<Index>(phonemes.size()), H, W, C});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t f = 0; f < phonemes.size(); ++f) {
    const Index base = static_cast<Index>(f) * H * W * C;
    for (Index i = 0; i < H * W * C; ++i) video[base + i] = static_cast<float>(bank.identities(identity, i));
    const auto viseme = bank.visemes.row(phonemes[f]);
    Index k = 0;
    for (const auto& [h, w] : world.mouth)
      for (Index c = 0; c < C; ++c) video[base + (h * W + w) * C + c] = static_cast<float>(viseme(k++));
    if (world.noise_std > 0.0)
      for (Index i = 0; i < H * W * C; ++i) video[base + i] += static_cast<float>(world.noise_std * noise(rng));
  }
  return video;
}

Tensor<float> render_audio(const std::vector<Index>& phonemes, Index timbre, std::mt19937_64& rng,
                           const ToyWorldConfig& world, const TemplateBank& bank) {
  const Index r = world.audio_per_frame, C = world.audio_channels;
  const RowVectorX<double> tv = bank.timbre_vector(timbre, world);
  Tensor<float> audio({static_cast<Index>(phonemes.size()) * r, C});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Index j = 0; j < audio.rows(); ++j) {
    const RowVectorX<double> row = bank.phonemes.row(phonemes[static_cast<std::size_t>(j / r)]) + tv;
    for (Index c = 0; c < C; ++c) {
      double v = row(c);
      if (world.noise_std > 0.0) v += world.noise_std * noise(rng);
      audio[j * C + c] = static_cast<float>(v);
    }
  }
  return audio;
}

Tensor<float> render_text(const std::vector<Index>& phonemes, const ToyWorldConfig& world, const TemplateBank& bank) {
  Tensor<float> text({world.text_len, world.text_dim});
  const Index n = std::min(world.text_len, static_cast<Index>(phonemes.size()));
  for (Index i = 0; i < n; ++i) text.matrix().row(i) = bank.text_table.row(phonemes[static_cast<std::size_t>(i)]).cast<float>();
  return text;
}

Tensor<float> make_ref_audio(std::mt19937_64& rng, Index timbre, const ToyWorldConfig& world,
                             const TemplateBank& bank, Index* frames_out) {
  std::uniform_int_distribution<Index> len(world.ref_min, world.ref_max);
  std::uniform_int_distribution<Index> ph(0, world.alphabet - 1);
  const Index n = len(rng);
  // one phoneme per audio frame: render with audio_per_frame = 1
  ToyWorldConfig single = world;
  single.audio_per_frame = 1;
  std::vector<Index> seq(static_cast<std::size_t>(n));
  for (auto& p : seq) p = ph(rng);
  const Tensor<float> clip = render_audio(seq, timbre, rng, single, bank);
  if (frames_out) *frames_out = n;
  return fit_rows(clip, world.ref_len);
}

PairedSample make_paired_sample(std::mt19937_64& rng, const ToyWorldConfig& world, const TemplateBank& bank) {
  PairedSample s;
  std::uniform_int_distribution<Index> ph(0, world.alphabet - 1);
  s.phonemes.resize(static_cast<std::size_t>(world.frames));
  for (auto& p : s.phonemes) p = ph(rng);
  s.identity_id = std::uniform_int_distribution<Index>(0, world.n_identities - 1)(rng);
  s.timbre_id = std::uniform_int_distribution<Index>(0, world.n_timbres() - 1)(rng);
  s.video = render_video(s.phonemes, s.identity_id, rng, world, bank);
  s.audio = render_audio(s.phonemes, s.timbre_id, rng, world, bank);
  s.text = render_text(s.phonemes, world, bank);
  s.identity = Tensor<float>({1, world.height, world.width, world.video_channels});
  s.identity.data() = s.video.data().head(s.identity.numel());
  s.ref_audio = make_ref_audio(rng, s.timbre_id, world, bank, &s.ref_frames);
  return s;
}

Index nearest_phoneme(const VectorX<double>& frame, const TemplateBank& bank, BankKind which) {
  if (which == BankKind::viseme) {
    if (frame.size() != bank.visemes.cols()) throw DimensionError("mouth patch length does not match the bank");
    return argmin_distance(frame, bank.visemes);
  }
  if (frame.size() != bank.phonemes.cols()) throw DimensionError("audio frame length does not match the bank");
  const VectorX<double> content = frame - bank.timbre_basis.transpose() * (bank.timbre_basis * frame);
  return argmin_distance(content, bank.phonemes);
}

VectorX<double> mouth_patch(const Tensor<float>& video, Index frame, const ToyWorldConfig& world) {
  const Index C = world.video_channels;
  VectorX<double> out(world.mouth_dim());
  Index k = 0;
  for (const auto& [h, w] : world.mouth)
    for (Index c = 0; c < C; ++c) out[k++] = static_cast<double>(video.at({frame, h, w, c}));
  return out;
}

std::vector<Index> decode_video(const Tensor<float>& video, const ToyWorldConfig& world, const TemplateBank& bank) {
  if (video.rank() != 4 || video.extent(1) != world.height || video.extent(2) != world.width ||
      video.extent(3) != world.video_channels) {
    throw DimensionError("video latent " + shape_string(video.shape()) + " does not match the world");
  }
  std::vector<Index> out;
  for (Index f = 0; f < video.extent(0); ++f)
    out.push_back(nearest_phoneme(mouth_patch(video, f, world), bank, BankKind::viseme));
  return out;
}

std::vector<Index> decode_audio(const Tensor<float>& audio, const ToyWorldConfig& world, const TemplateBank& bank) {
  if (audio.rank() != 2 || audio.extent(1) != world.audio_channels || audio.extent(0) % world.audio_per_frame) {
    throw DimensionError("audio latent " + shape_string(audio.shape()) + " does not match the world");
  }
  std::vector<Index> out;
  for (Index f = 0; f < audio.extent(0) / world.audio_per_frame; ++f) {
    std::vector<Index> votes;
    for (Index j = 0; j < world.audio_per_frame; ++j) {
      const Index row = f * world.audio_per_frame + j;
      votes.push_back(nearest_phoneme(audio.matrix().row(row).transpose().cast<double>(), bank, BankKind::phoneme));
    }
    out.push_back(majority(votes, world.alphabet));
  }
  return out;
}

double sync_agreement(const Tensor<float>& video, const Tensor<float>& audio, const TemplateBank& bank,
                      const ToyWorldConfig& world) {
  const auto v = decode_video(video, world, bank);
  const auto a = decode_audio(audio, world, bank);
  if (v.size() != a.size() || v.empty()) {
    throw DimensionError("sync_agreement: " + std::to_string(v.size()) + " video frames vs " +
                         std::to_string(a.size()) + " audio frame groups");
  }
  Index hit = 0;
  for (std::size_t i = 0; i < v.size(); ++i) hit += v[i] == a[i];
  return static_cast<double>(hit) / static_cast<double>(v.size());
}

double timbre_similarity(const Tensor<float>& audio, Index timbre, const TemplateBank& bank,
                         const ToyWorldConfig& world) {
  const RowVectorX<double> target = bank.timbre_vector(timbre, world);
  const RowVectorX<double> mean = audio.matrix().cast<double>().colwise().mean();
  const VectorX<double> coords = bank.timbre_basis * mean.transpose();
  const VectorX<double> target_coords = bank.timbre_basis * target.transpose();
  const double denom = coords.norm() * target_coords.norm();
  if (denom == 0.0) return 0.0;
  return coords.dot(target_coords) / denom;
}

double text_adherence(const Tensor<float>& video, const Tensor<float>& audio, const std::vector<Index>& phonemes,
                      const TemplateBank& bank, const ToyWorldConfig& world) {
  auto frac = [&](const std::vector<Index>& decoded) {
    if (decoded.size() != phonemes.size()) throw DimensionError("text_adherence: length mismatch");
    Index hit = 0;
    for (std::size_t i = 0; i < decoded.size(); ++i) hit += decoded[i] == phonemes[i];
    return static_cast<double>(hit) / static_cast<double>(decoded.size());
  };
  const double a = frac(decode_audio(audio, world, bank));
  if (video.numel() == 0) return a;
  return 0.5 * (a + frac(decode_video(video, world, bank)));
}

std::vector<MatrixX<double>> video_frame_images(const Tensor<float>& video) {
  const Index T = video.extent(0), H = video.extent(1), W = video.extent(2), C = video.extent(3);
  std::vector<MatrixX<double>> out;
  for (Index f = 0; f < T; ++f) {
    MatrixX<double> img(H, W * C);
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w)
        for (Index c = 0; c < C; ++c) img(h, w * C + c) = video.at({f, h, w, c});
    out.push_back(std::move(img));
  }
  return out;
}

MatrixX<double> audio_image(const Tensor<float>& audio) { return audio.matrix().transpose().cast<double>(); }

}  // namespace avdit
