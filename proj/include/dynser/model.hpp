#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dynser/attention.hpp"
#include "dynser/checkpoint.hpp"
#include "dynser/common.hpp"
#include "dynser/gru.hpp"
#include "dynser/tensor.hpp"

namespace dynser {

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

enum class EmotionLabel : int {
  kAnger = 0,
  kHappiness = 1,
  kSadness = 2,
  kFear = 3,
  kNeutral = 4,
};

inline constexpr int kNumEmotions = 5;

inline const std::array<std::string, 5>& emotion_names() {
  static const std::array<std::string, 5> names{"anger", "happiness", "sadness",
                                                "fear", "neutral"};
  return names;
}

// Case-insensitive; returns -1 for unknown names.
inline int emotion_id(const std::string& name) {
  std::string low;
  for (char c : name) low.push_back(static_cast<char>(std::tolower(c)));
  const auto& names = emotion_names();
  for (int i = 0; i < kNumEmotions; ++i) {
    if (names[i] == low) return i;
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

enum class ModelVariant {
  kOneStreamWave,
  kOneStreamGruWave,
  kOneStreamGruMfcc,
  kOneStreamBiGruWave,
  kDualStreamBiGru,
  kDualStreamDynCbam,
  kDualStreamDynCbamBiGru,
  kProposed,
};

inline constexpr std::array<ModelVariant, 8> kAllVariants{
    ModelVariant::kOneStreamWave,        ModelVariant::kOneStreamGruWave,
    ModelVariant::kOneStreamGruMfcc,     ModelVariant::kOneStreamBiGruWave,
    ModelVariant::kDualStreamBiGru,      ModelVariant::kDualStreamDynCbam,
    ModelVariant::kDualStreamDynCbamBiGru, ModelVariant::kProposed,
};

inline const char* variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOneStreamWave: return "one-stream-wave";
    case ModelVariant::kOneStreamGruWave: return "one-stream-gru-wave";
    case ModelVariant::kOneStreamGruMfcc: return "one-stream-gru-mfcc";
    case ModelVariant::kOneStreamBiGruWave: return "one-stream-bigru-wave";
    case ModelVariant::kDualStreamBiGru: return "dual-stream-bigru";
    case ModelVariant::kDualStreamDynCbam: return "dual-stream-dyncbam";
    case ModelVariant::kDualStreamDynCbamBiGru:
      return "dual-stream-dyncbam-bigru";
    case ModelVariant::kProposed: return "proposed";
  }
  return "?";
}

inline ModelVariant variant_from_name(const std::string& name) {
  for (ModelVariant v : kAllVariants) {
    if (name == variant_name(v)) return v;
  }
  throw ParameterError("unknown model variant '" + name + "'");
}

enum class Recurrence { kNone, kUni, kBi };

inline bool variant_uses_wave(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOneStreamGruMfcc:
    case ModelVariant::kProposed:
      return false;
    default:
      return true;
  }
}

inline bool variant_uses_mfcc(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOneStreamGruMfcc:
    case ModelVariant::kDualStreamBiGru:
    case ModelVariant::kDualStreamDynCbam:
    case ModelVariant::kDualStreamDynCbamBiGru:
    case ModelVariant::kProposed:
      return true;
    default:
      return false;
  }
}

inline Recurrence variant_wave_recurrence(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOneStreamGruWave: return Recurrence::kUni;
    case ModelVariant::kOneStreamBiGruWave:
    case ModelVariant::kDualStreamBiGru:
    case ModelVariant::kDualStreamDynCbamBiGru:
      return Recurrence::kBi;
    default:
      return Recurrence::kNone;
  }
}

inline Recurrence variant_mfcc_recurrence(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOneStreamGruMfcc: return Recurrence::kUni;
    case ModelVariant::kDualStreamBiGru:
    case ModelVariant::kDualStreamDynCbamBiGru:
    case ModelVariant::kProposed:
      return Recurrence::kBi;
    default:
      return Recurrence::kNone;
  }
}

inline bool variant_has_attention(ModelVariant v) {
  switch (v) {
    case ModelVariant::kDualStreamDynCbam:
    case ModelVariant::kDualStreamDynCbamBiGru:
    case ModelVariant::kProposed:
      return true;
    default:
      return false;
  }
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

struct ModelHyper {
  std::vector<std::int64_t> conv_channels{16, 32, 64, 128};
  std::int64_t conv_kernel = 3;
  std::int64_t pool_window = 2;
  std::int64_t gru_hidden = 128;
  std::int64_t gru_layers = 1;
  std::int64_t cbam_reduction = 16;
  std::int64_t cbam_spatial_kernel = 7;
  std::int64_t odconv_kernels = 4;
  std::int64_t odconv_reduction = 4;
  std::int64_t classifier_hidden = 128;
  std::int64_t n_classes = 5;
  double dropout = 0.3;

  void validate() const {
    if (n_classes != kNumEmotions) {
      throw ParameterError("hyper: n_classes is fixed at 5 by the label contract");
    }
    if (conv_channels.empty()) throw ParameterError("hyper: empty channel ladder");
    for (auto c : conv_channels) {
      if (c < 1) throw ParameterError("hyper: non-positive channel count");
    }
    if (conv_kernel < 1 || conv_kernel % 2 == 0) {
      throw ParameterError("hyper: conv_kernel must be odd and >= 1");
    }
    if (pool_window < 2) throw ParameterError("hyper: pool_window must be >= 2");
    if (gru_hidden < 1 || gru_layers < 1) {
      throw ParameterError("hyper: gru_hidden and gru_layers must be >= 1");
    }
    if (classifier_hidden < 1) {
      throw ParameterError("hyper: classifier_hidden must be >= 1");
    }
    if (cbam_spatial_kernel < 1 || cbam_spatial_kernel % 2 == 0) {
      throw ParameterError("hyper: cbam_spatial_kernel must be odd");
    }
    if (odconv_kernels < 1 || odconv_reduction < 1 || cbam_reduction < 1) {
      throw ParameterError("hyper: attention parameters must be >= 1");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ParameterError("hyper: dropout must be in [0,1)");
    }
  }
};

// Input geometry the classifier head is built against.
struct ModelInputSpec {
  std::int64_t mfcc_coeffs = 40;
  std::int64_t mfcc_frames = 498;
  std::int64_t wave_samples = 80000;
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

// Convolution -> batchnorm -> relu -> maxpool embedding stage.
struct CbmBlock {
  Tensor conv_w;  // rank 2: [O,C,k,k]; rank 1: [O,C,k]
  Tensor conv_b;
  Tensor bn_gamma, bn_beta;
  BatchNormState bn_state;
  int rank = 2;
  std::int64_t pool_window = 2;
};

inline CbmBlock make_cbm_block(std::int64_t c_in, std::int64_t c_out,
                               std::int64_t kernel, std::int64_t pool_window,
                               int rank, Rng& rng) {
  CbmBlock b;
  b.rank = rank;
  b.pool_window = pool_window;
  if (rank == 2) {
    b.conv_w = kaiming_uniform({c_out, c_in, kernel, kernel},
                               c_in * kernel * kernel, rng);
  } else {
    b.conv_w = kaiming_uniform({c_out, c_in, kernel}, c_in * kernel, rng);
  }
  b.conv_b = Tensor::zeros({c_out}, true);
  b.bn_gamma = Tensor::ones({c_out}, true);
  b.bn_beta = Tensor::zeros({c_out}, true);
  return b;
}

// Same-padded stride-1 convolution, batchnorm, relu, then a maxpool that
// floor-halves every spatial dim (window == stride == pool_window).
inline Tensor cbm_block(const Tensor& x, CbmBlock& block, Mode mode) {
  const std::int64_t k = block.conv_w.shape().back();
  Tensor c = convolution(x, block.conv_w, block.conv_b, 1, (k - 1) / 2,
                         block.rank);
  Tensor n = batchnorm(c, block.bn_gamma, block.bn_beta, block.bn_state, mode);
  Tensor r = relu(n);
  return pool(r, PoolKind::kMax, block.pool_window, block.pool_window,
              PoolScope::kWindowed);
}

struct DenseLayer {
  Tensor w, b;
};

inline DenseLayer make_dense(std::int64_t in, std::int64_t out, Rng& rng) {
  return DenseLayer{kaiming_uniform({out, in}, in, rng),
                    Tensor::zeros({out}, true)};
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

struct ModelParams {
  ModelVariant variant = ModelVariant::kProposed;
  ModelHyper hyper;
  ModelInputSpec input;
  std::uint64_t seed = 0;

  std::vector<CbmBlock> wave_blocks;         // rank 1
  std::vector<CbmBlock> mfcc_blocks;         // rank 2
  std::optional<DynamicCbamParams> attention;
  std::vector<GruWeights> wave_gru;          // unidirectional stack
  std::vector<BiGruLayer> wave_bigru;
  std::vector<GruWeights> mfcc_gru;
  std::vector<BiGruLayer> mfcc_bigru;
  DenseLayer fc1, fc2;

  ModelParams() = default;
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;
  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;
};

namespace model_detail {

inline std::int64_t halve_chain(std::int64_t extent, std::size_t blocks,
                                std::int64_t window, const char* what) {
  for (std::size_t i = 0; i < blocks; ++i) {
    if (extent < window) {
      throw DimensionError(std::string("build_model: ") + what +
                           " extent shrinks to zero at block " +
                           std::to_string(i) + " (extent " +
                           std::to_string(extent) + ", pool " +
                           std::to_string(window) + ")");
    }
    extent /= window;
  }
  return extent;
}

inline void walk_gru(const std::string& prefix, GruWeights& w,
                     const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".w_ir", w.w_ir);
  fn(prefix + ".w_iz", w.w_iz);
  fn(prefix + ".w_in", w.w_in);
  fn(prefix + ".w_hr", w.w_hr);
  fn(prefix + ".w_hz", w.w_hz);
  fn(prefix + ".w_hn", w.w_hn);
  fn(prefix + ".b_ir", w.b_ir);
  fn(prefix + ".b_iz", w.b_iz);
  fn(prefix + ".b_in", w.b_in);
  fn(prefix + ".b_hr", w.b_hr);
  fn(prefix + ".b_hz", w.b_hz);
  fn(prefix + ".b_hn", w.b_hn);
}

}  // namespace model_detail

// Visits every learnable tensor with a stable name; the visit order defines
// the checkpoint layout.
inline void walk_params(ModelParams& p,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  auto walk_blocks = [&](const std::string& stream, std::vector<CbmBlock>& bs) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      const std::string pre = stream + ".cbm" + std::to_string(i);
      fn(pre + ".conv_w", bs[i].conv_w);
      fn(pre + ".conv_b", bs[i].conv_b);
      fn(pre + ".bn_gamma", bs[i].bn_gamma);
      fn(pre + ".bn_beta", bs[i].bn_beta);
    }
  };
  walk_blocks("wave", p.wave_blocks);
  walk_blocks("mfcc", p.mfcc_blocks);
  if (p.attention) {
    DynamicCbamParams& a = *p.attention;
    fn("att.mlp.w0", a.mlp.w0);
    fn("att.mlp.w1", a.mlp.w1);
    fn("att.odconv.kernels", a.spatial.kernels);
    fn("att.odconv.bias", a.spatial.bias);
    fn("att.odconv.head.squeeze_w", a.spatial.head.squeeze_w);
    fn("att.odconv.head.squeeze_b", a.spatial.head.squeeze_b);
    fn("att.odconv.head.spatial_w", a.spatial.head.spatial_w);
    fn("att.odconv.head.spatial_b", a.spatial.head.spatial_b);
    fn("att.odconv.head.in_w", a.spatial.head.in_w);
    fn("att.odconv.head.in_b", a.spatial.head.in_b);
    fn("att.odconv.head.out_w", a.spatial.head.out_w);
    fn("att.odconv.head.out_b", a.spatial.head.out_b);
    fn("att.odconv.head.mix_w", a.spatial.head.mix_w);
    fn("att.odconv.head.mix_b", a.spatial.head.mix_b);
    fn("att.cbs.conv_w", a.cbs.conv_w);
    fn("att.cbs.conv_b", a.cbs.conv_b);
    fn("att.cbs.bn_gamma", a.cbs.bn_gamma);
    fn("att.cbs.bn_beta", a.cbs.bn_beta);
  }
  for (std::size_t l = 0; l < p.wave_gru.size(); ++l) {
    model_detail::walk_gru("wave.gru" + std::to_string(l), p.wave_gru[l], fn);
  }
  for (std::size_t l = 0; l < p.wave_bigru.size(); ++l) {
    model_detail::walk_gru("wave.bigru" + std::to_string(l) + ".fwd",
                           p.wave_bigru[l].fwd, fn);
    model_detail::walk_gru("wave.bigru" + std::to_string(l) + ".bwd",
                           p.wave_bigru[l].bwd, fn);
  }
  for (std::size_t l = 0; l < p.mfcc_gru.size(); ++l) {
    model_detail::walk_gru("mfcc.gru" + std::to_string(l), p.mfcc_gru[l], fn);
  }
  for (std::size_t l = 0; l < p.mfcc_bigru.size(); ++l) {
    model_detail::walk_gru("mfcc.bigru" + std::to_string(l) + ".fwd",
                           p.mfcc_bigru[l].fwd, fn);
    model_detail::walk_gru("mfcc.bigru" + std::to_string(l) + ".bwd",
                           p.mfcc_bigru[l].bwd, fn);
  }
  fn("fc1.w", p.fc1.w);
  fn("fc1.b", p.fc1.b);
  fn("fc2.w", p.fc2.w);
  fn("fc2.b", p.fc2.b);
}

// Non-learnable state (batchnorm running statistics).
inline void walk_buffers(
    ModelParams& p,
    const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  auto walk_blocks = [&](const std::string& stream, std::vector<CbmBlock>& bs) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      const std::string pre = stream + ".cbm" + std::to_string(i) + ".bn_state";
      fn(pre + ".mean", bs[i].bn_state.running_mean);
      fn(pre + ".var", bs[i].bn_state.running_var);
    }
  };
  walk_blocks("wave", p.wave_blocks);
  walk_blocks("mfcc", p.mfcc_blocks);
  if (p.attention) {
    fn("att.cbs.bn_state.mean", p.attention->cbs.bn_state.running_mean);
    fn("att.cbs.bn_state.var", p.attention->cbs.bn_state.running_var);
  }
}

inline std::vector<std::pair<std::string, Tensor>> trainable_params(
    ModelParams& p) {
  std::vector<std::pair<std::string, Tensor>> out;
  walk_params(p, [&](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

inline std::int64_t parameter_count(ModelParams& p) {
  std::int64_t n = 0;
  walk_params(p, [&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

inline ModelParams build_model(ModelVariant variant, const ModelHyper& hyper,
                               const ModelInputSpec& input, std::uint64_t seed) {
  hyper.validate();
  ModelParams p;
  p.variant = variant;
  p.hyper = hyper;
  p.input = input;
  p.seed = seed;
  Rng rng(derive_seed(seed, "model_init"));

  const std::int64_t c_last = hyper.conv_channels.back();
  const std::int64_t blocks = static_cast<std::int64_t>(hyper.conv_channels.size());

  std::int64_t fc_in = 0;

  if (variant_uses_wave(variant)) {
    model_detail::halve_chain(input.wave_samples, blocks, hyper.pool_window,
                              "waveform");
    std::int64_t c_in = 1;
    for (auto c_out : hyper.conv_channels) {
      p.wave_blocks.push_back(make_cbm_block(c_in, c_out, hyper.conv_kernel,
                                             hyper.pool_window, 1, rng));
      c_in = c_out;
    }
    switch (variant_wave_recurrence(variant)) {
      case Recurrence::kNone:
        fc_in += c_last;
        break;
      case Recurrence::kUni: {
        std::int64_t in = c_last;
        for (std::int64_t l = 0; l < hyper.gru_layers; ++l) {
          p.wave_gru.push_back(make_gru_weights(in, hyper.gru_hidden, rng));
          in = hyper.gru_hidden;
        }
        fc_in += hyper.gru_hidden;
        break;
      }
      case Recurrence::kBi: {
        std::int64_t in = c_last;
        for (std::int64_t l = 0; l < hyper.gru_layers; ++l) {
          p.wave_bigru.push_back(make_bigru_layer(in, hyper.gru_hidden, rng));
          in = 2 * hyper.gru_hidden;
        }
        fc_in += 2 * hyper.gru_hidden;
        break;
      }
    }
  }

  if (variant_uses_mfcc(variant)) {
    const std::int64_t f_out = model_detail::halve_chain(
        input.mfcc_coeffs, blocks, hyper.pool_window, "mfcc coefficient");
    model_detail::halve_chain(input.mfcc_frames, blocks, hyper.pool_window,
                              "mfcc frame");
    std::int64_t c_in = 1;
    for (auto c_out : hyper.conv_channels) {
      p.mfcc_blocks.push_back(make_cbm_block(c_in, c_out, hyper.conv_kernel,
                                             hyper.pool_window, 2, rng));
      c_in = c_out;
    }
    if (variant_has_attention(variant)) {
      p.attention = make_dynamic_cbam(c_last, hyper.cbam_reduction,
                                      hyper.cbam_spatial_kernel,
                                      hyper.odconv_kernels,
                                      hyper.odconv_reduction, rng);
    }
    switch (variant_mfcc_recurrence(variant)) {
      case Recurrence::kNone:
        fc_in += c_last;
        break;
      case Recurrence::kUni: {
        std::int64_t in = c_last * f_out;
        for (std::int64_t l = 0; l < hyper.gru_layers; ++l) {
          p.mfcc_gru.push_back(make_gru_weights(in, hyper.gru_hidden, rng));
          in = hyper.gru_hidden;
        }
        fc_in += hyper.gru_hidden;
        break;
      }
      case Recurrence::kBi: {
        std::int64_t in = c_last * f_out;
        for (std::int64_t l = 0; l < hyper.gru_layers; ++l) {
          p.mfcc_bigru.push_back(make_bigru_layer(in, hyper.gru_hidden, rng));
          in = 2 * hyper.gru_hidden;
        }
        fc_in += 2 * hyper.gru_hidden;
        break;
      }
    }
  }

  p.fc1 = make_dense(fc_in, hyper.classifier_hidden, rng);
  p.fc2 = make_dense(hyper.classifier_hidden, hyper.n_classes, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct BatchInput {
  Tensor wave;  // [B, 1, L]
  Tensor mfcc;  // [B, 1, F, T]
};

namespace model_detail {

// [B,T,H] -> last-step state [B,H]; bidirectional takes the forward half at
// t = T-1 and the backward half at t = 0.
inline Tensor last_state(const Tensor& seq, bool bidirectional,
                         std::int64_t hidden) {
  const std::int64_t batch = seq.dim_size(0);
  const std::int64_t steps = seq.dim_size(1);
  if (!bidirectional) {
    return reshape(narrow(seq, 1, steps - 1, 1), {batch, hidden});
  }
  Tensor last = reshape(narrow(seq, 1, steps - 1, 1), {batch, 2 * hidden});
  Tensor first = reshape(narrow(seq, 1, 0, 1), {batch, 2 * hidden});
  return concat({narrow(last, 1, 0, hidden), narrow(first, 1, hidden, hidden)},
                1);
}

}  // namespace model_detail

// Logits [B, n_classes]. `dropout_seed` feeds the recurrent inter-layer
// dropout stream in train mode; it is inert for single-layer stacks.
inline Tensor model_forward(ModelParams& p, const BatchInput& batch, Mode mode,
                            std::uint64_t dropout_seed = 0) {
  std::vector<Tensor> embeddings;

  if (variant_uses_wave(p.variant)) {
    if (!batch.wave.defined()) {
      throw ProtocolError(std::string("model_forward: variant ") +
                          variant_name(p.variant) +
                          " requires the waveform stream");
    }
    if (batch.wave.dim() != 3 || batch.wave.dim_size(1) != 1) {
      throw DimensionError("model_forward: waveform input must be [B,1,L], got " +
                           shape_str(batch.wave.shape()));
    }
    Tensor x = batch.wave;
    for (auto& block : p.wave_blocks) x = cbm_block(x, block, mode);
    switch (variant_wave_recurrence(p.variant)) {
      case Recurrence::kNone: {
        // disambiguate [B,C,L] from [C,H,W] for the global pool
        Tensor x4 =
            reshape(x, {x.dim_size(0), x.dim_size(1), 1, x.dim_size(2)});
        embeddings.push_back(
            pool(x4, PoolKind::kAvg, 0, 0, PoolScope::kGlobal));
        break;
      }
      case Recurrence::kUni: {
        Tensor seq = permute(x, {0, 2, 1});  // [B,T,C]
        Tensor out = gru_stack_forward(seq, p.wave_gru, mode, p.hyper.dropout,
                                       derive_seed(dropout_seed, "wave_gru"));
        embeddings.push_back(
            model_detail::last_state(out, false, p.hyper.gru_hidden));
        break;
      }
      case Recurrence::kBi: {
        Tensor seq = permute(x, {0, 2, 1});
        Tensor out =
            bigru_stack_forward(seq, p.wave_bigru, mode, p.hyper.dropout,
                                derive_seed(dropout_seed, "wave_bigru"));
        embeddings.push_back(
            model_detail::last_state(out, true, p.hyper.gru_hidden));
        break;
      }
    }
  }

  if (variant_uses_mfcc(p.variant)) {
    if (!batch.mfcc.defined()) {
      throw ProtocolError(std::string("model_forward: variant ") +
                          variant_name(p.variant) +
                          " requires the MFCC stream");
    }
    if (batch.mfcc.dim() != 4 || batch.mfcc.dim_size(1) != 1) {
      throw DimensionError("model_forward: MFCC input must be [B,1,F,T], got " +
                           shape_str(batch.mfcc.shape()));
    }
    if (batch.mfcc.dim_size(2) != p.input.mfcc_coeffs) {
      throw DimensionError("model_forward: MFCC input has " +
                           std::to_string(batch.mfcc.dim_size(2)) +
                           " coefficients, model was built for " +
                           std::to_string(p.input.mfcc_coeffs));
    }
    Tensor x = batch.mfcc;
    for (auto& block : p.mfcc_blocks) x = cbm_block(x, block, mode);
    if (p.attention) {
      x = dynamic_cbam_forward(x, *p.attention, mode);
    }
    switch (variant_mfcc_recurrence(p.variant)) {
      case Recurrence::kNone:
        embeddings.push_back(pool(x, PoolKind::kAvg, 0, 0, PoolScope::kGlobal));
        break;
      case Recurrence::kUni:
      case Recurrence::kBi: {
        // fold channel x frequency into the feature axis, keep time
        const std::int64_t b = x.dim_size(0), c = x.dim_size(1);
        const std::int64_t f = x.dim_size(2), t = x.dim_size(3);
        Tensor seq = reshape(permute(x, {0, 3, 1, 2}), {b, t, c * f});
        if (variant_mfcc_recurrence(p.variant) == Recurrence::kUni) {
          Tensor out = gru_stack_forward(seq, p.mfcc_gru, mode, p.hyper.dropout,
                                         derive_seed(dropout_seed, "mfcc_gru"));
          embeddings.push_back(
              model_detail::last_state(out, false, p.hyper.gru_hidden));
        } else {
          Tensor out =
              bigru_stack_forward(seq, p.mfcc_bigru, mode, p.hyper.dropout,
                                  derive_seed(dropout_seed, "mfcc_bigru"));
          embeddings.push_back(
              model_detail::last_state(out, true, p.hyper.gru_hidden));
        }
        break;
      }
    }
  }

  Tensor emb = embeddings.size() == 1 ? embeddings[0] : concat(embeddings, 1);
  Tensor h = relu(linear(emb, p.fc1.w, p.fc1.b));
  Tensor logits = linear(h, p.fc2.w, p.fc2.b);
  detail::check_finite(logits, "model_forward");
  return logits;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline nlohmann::json hyper_to_json(const ModelHyper& h) {
  return nlohmann::json{{"conv_channels", h.conv_channels},
                        {"conv_kernel", h.conv_kernel},
                        {"pool_window", h.pool_window},
                        {"gru_hidden", h.gru_hidden},
                        {"gru_layers", h.gru_layers},
                        {"cbam_reduction", h.cbam_reduction},
                        {"cbam_spatial_kernel", h.cbam_spatial_kernel},
                        {"odconv_kernels", h.odconv_kernels},
                        {"odconv_reduction", h.odconv_reduction},
                        {"classifier_hidden", h.classifier_hidden},
                        {"n_classes", h.n_classes},
                        {"dropout", h.dropout}};
}

inline ModelHyper hyper_from_json(const nlohmann::json& j) {
  ModelHyper h;
  h.conv_channels = j.value("conv_channels", h.conv_channels);
  h.conv_kernel = j.value("conv_kernel", h.conv_kernel);
  h.pool_window = j.value("pool_window", h.pool_window);
  h.gru_hidden = j.value("gru_hidden", h.gru_hidden);
  h.gru_layers = j.value("gru_layers", h.gru_layers);
  h.cbam_reduction = j.value("cbam_reduction", h.cbam_reduction);
  h.cbam_spatial_kernel = j.value("cbam_spatial_kernel", h.cbam_spatial_kernel);
  h.odconv_kernels = j.value("odconv_kernels", h.odconv_kernels);
  h.odconv_reduction = j.value("odconv_reduction", h.odconv_reduction);
  h.classifier_hidden = j.value("classifier_hidden", h.classifier_hidden);
  h.n_classes = j.value("n_classes", h.n_classes);
  h.dropout = j.value("dropout", h.dropout);
  return h;
}

inline nlohmann::json model_meta(ModelParams& p) {
  nlohmann::json labels = nlohmann::json::object();
  for (int i = 0; i < kNumEmotions; ++i) labels[emotion_names()[i]] = i;
  return nlohmann::json{{"variant", variant_name(p.variant)},
                        {"hyper", hyper_to_json(p.hyper)},
                        {"input",
                         {{"mfcc_coeffs", p.input.mfcc_coeffs},
                          {"mfcc_frames", p.input.mfcc_frames},
                          {"wave_samples", p.input.wave_samples}}},
                        {"seed", p.seed},
                        {"labels", labels}};
}

inline std::vector<CheckpointEntry> model_entries(ModelParams& p) {
  std::vector<CheckpointEntry> entries;
  walk_params(p, [&](const std::string& name, Tensor& t) {
    entries.push_back(checkpoint_entry(name, t));
  });
  walk_buffers(p, [&](const std::string& name, std::vector<double>& v) {
    entries.push_back(checkpoint_entry(name, v));
  });
  return entries;
}

// Writes the checkpoint plus a human-readable JSON sidecar at <path>.json.
inline void save_model(const std::string& path, ModelParams& p) {
  // running stats may be lazily sized; fix them before serializing
  for (auto* blocks : {&p.wave_blocks, &p.mfcc_blocks}) {
    for (auto& b : *blocks) b.bn_state.ensure(b.bn_gamma.size());
  }
  if (p.attention) p.attention->cbs.bn_state.ensure(p.attention->cbs.bn_gamma.size());
  save_checkpoint(path, model_entries(p), model_meta(p));
  std::ofstream side(path + ".json");
  if (!side) throw IoError("save_model: cannot open " + path + ".json");
  side << model_meta(p).dump(2) << "\n";
}

inline ModelParams load_model(const std::string& path) {
  nlohmann::json meta = peek_checkpoint_meta(path);
  if (!meta.contains("variant")) {
    throw UnsupportedFormatError("load_model: " + path +
                                 " has no model metadata");
  }
  ModelInputSpec input;
  input.mfcc_coeffs = meta["input"].value("mfcc_coeffs", input.mfcc_coeffs);
  input.mfcc_frames = meta["input"].value("mfcc_frames", input.mfcc_frames);
  input.wave_samples = meta["input"].value("wave_samples", input.wave_samples);
  ModelParams p = build_model(variant_from_name(meta["variant"]),
                              hyper_from_json(meta["hyper"]), input,
                              meta.value("seed", std::uint64_t{0}));
  for (auto* blocks : {&p.wave_blocks, &p.mfcc_blocks}) {
    for (auto& b : *blocks) b.bn_state.ensure(b.bn_gamma.size());
  }
  if (p.attention) p.attention->cbs.bn_state.ensure(p.attention->cbs.bn_gamma.size());
  load_checkpoint(path, model_entries(p));
  return p;
}

}  // namespace dynser
