#pragma once

#include <optional>

#include "dynser/common.hpp"
#include "dynser/tensor.hpp"

namespace dynser {

// Shared two-layer bottleneck MLP of the channel-attention gate:
// v -> w1 * relu(w0 * v), no biases.
struct ChannelMlp {
  Tensor w0;  // [hidden, C]
  Tensor w1;  // [C, hidden]
};

inline std::int64_t channel_mlp_hidden(std::int64_t channels,
                                       std::int64_t reduction) {
  const std::int64_t r = std::min<std::int64_t>(reduction, channels);
  if (channels % r != 0) {
    throw ParameterError("channel attention: channel count " +
                         std::to_string(channels) +
                         " is not divisible by reduction " + std::to_string(r));
  }
  return channels / r;
}

inline ChannelMlp make_channel_mlp(std::int64_t channels,
                                   std::int64_t reduction, Rng& rng) {
  const std::int64_t hidden = channel_mlp_hidden(channels, reduction);
  ChannelMlp mlp;
  mlp.w0 = kaiming_uniform({hidden, channels}, channels, rng);
  mlp.w1 = kaiming_uniform({channels, hidden}, hidden, rng);
  return mlp;
}

// conv3x3 -> batchnorm -> relu stage on the residual output path.
struct CbsBlock {
  Tensor conv_w;  // [C, C, 3, 3]
  Tensor conv_b;  // [C]
  Tensor bn_gamma, bn_beta;
  BatchNormState bn_state;
};

inline CbsBlock make_cbs(std::int64_t channels, Rng& rng) {
  CbsBlock cbs;
  cbs.conv_w = kaiming_uniform({channels, channels, 3, 3}, channels * 9, rng);
  cbs.conv_b = Tensor::zeros({channels}, true);
  cbs.bn_gamma = Tensor::ones({channels}, true);
  cbs.bn_beta = Tensor::zeros({channels}, true);
  return cbs;
}

namespace att_detail {

// Normalizes [C,H,W] to [1,C,H,W]; remembers whether to squeeze on the way out.
inline Tensor with_batch(const Tensor& f, bool& was_unbatched) {
  if (f.dim() == 3) {
    was_unbatched = true;
    Shape s = f.shape();
    return reshape(f, {1, s[0], s[1], s[2]});
  }
  if (f.dim() != 4) {
    throw DimensionError("attention: expected [C,H,W] or [B,C,H,W], got " +
                         shape_str(f.shape()));
  }
  was_unbatched = false;
  return f;
}

inline Tensor cbs_apply(const Tensor& f, CbsBlock& cbs, Mode mode) {
  Tensor c = convolution(f, cbs.conv_w, cbs.conv_b, 1, 1, 2);
  Tensor n = batchnorm(c, cbs.bn_gamma, cbs.bn_beta, cbs.bn_state, mode);
  return relu(n);
}

}  // namespace att_detail

// Per-channel gate: sigmoid(MLP(avgpool) + MLP(maxpool)), entries in (0,1).
// Returns [C] for [C,H,W] input and [B,C] for [B,C,H,W].
inline Tensor channel_attention(const Tensor& f, const ChannelMlp& mlp) {
  bool unbatched = false;
  Tensor x = att_detail::with_batch(f, unbatched);
  if (x.dim_size(1) != mlp.w0.dim_size(1)) {
    throw DimensionError("channel_attention: input has " +
                         std::to_string(x.dim_size(1)) +
                         " channels, MLP expects " +
                         std::to_string(mlp.w0.dim_size(1)));
  }
  Tensor avg = pool(x, PoolKind::kAvg, 0, 0, PoolScope::kGlobal);  // [B,C]
  Tensor mx = pool(x, PoolKind::kMax, 0, 0, PoolScope::kGlobal);
  auto head = [&](const Tensor& v) {
    return linear(relu(linear(v, mlp.w0, Tensor())), mlp.w1, Tensor());
  };
  Tensor gate = sigmoid(add(head(avg), head(mx)));
  if (unbatched) gate = reshape(gate, {gate.dim_size(1)});
  return gate;
}

// Per-location gate from the stacked channel-mean/channel-max maps through a
// kxk convolution (pad (k-1)/2) and a sigmoid. Returns [1,H,W] / [B,1,H,W].
inline Tensor spatial_attention(const Tensor& f, const Tensor& kernel) {
  bool unbatched = false;
  Tensor x = att_detail::with_batch(f, unbatched);
  if (kernel.dim() != 4 || kernel.dim_size(0) != 1 || kernel.dim_size(1) != 2) {
    throw DimensionError("spatial_attention: kernel must be [1,2,k,k], got " +
                         shape_str(kernel.shape()));
  }
  Tensor avg = reduce_axis(x, 1, Reduce::kMean);  // [B,1,H,W]
  Tensor mx = reduce_axis(x, 1, Reduce::kMax);
  Tensor stacked = concat({avg, mx}, 1);          // [B,2,H,W]
  const std::int64_t k = kernel.dim_size(3);
  Tensor conv = convolution(stacked, kernel, Tensor(), 1, (k - 1) / 2, 2);
  Tensor gate = sigmoid(conv);
  if (unbatched) {
    gate = reshape(gate, {1, gate.dim_size(2), gate.dim_size(3)});
  }
  return gate;
}

struct CbamParams {
  std::int64_t channels = 0;
  std::int64_t reduction = 16;
  ChannelMlp mlp;
  Tensor spatial_kernel;  // [1,2,k,k]
  CbsBlock cbs;
};

inline CbamParams make_cbam(std::int64_t channels, std::int64_t reduction,
                            std::int64_t spatial_k, Rng& rng) {
  CbamParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.mlp = make_channel_mlp(channels, reduction, rng);
  p.spatial_kernel =
      kaiming_uniform({1, 2, spatial_k, spatial_k}, 2 * spatial_k * spatial_k,
                      rng);
  p.cbs = make_cbs(channels, rng);
  return p;
}

// Channel gate, then spatial gate, then a residual refinement:
//   f1 = gate_c(f) * f;  f2 = gate_s(f1) * f1;  out = f + cbs(f2)
inline Tensor cbam_forward(const Tensor& f, CbamParams& params,
                           Mode mode = Mode::kEval) {
  bool unbatched = false;
  Tensor x = att_detail::with_batch(f, unbatched);
  if (x.dim_size(1) != params.channels) {
    throw DimensionError("cbam_forward: input has " +
                         std::to_string(x.dim_size(1)) +
                         " channels, params expect " +
                         std::to_string(params.channels));
  }
  Tensor mc = channel_attention(x, params.mlp);            // [B,C]
  Tensor f1 = mul(x, reshape(mc, {x.dim_size(0), x.dim_size(1), 1, 1}));
  Tensor ms = spatial_attention(f1, params.spatial_kernel);  // [B,1,H,W]
  Tensor f2 = mul(f1, ms);
  Tensor out = add(x, att_detail::cbs_apply(f2, params.cbs, mode));
  if (unbatched) {
    out = reshape(out, {out.dim_size(1), out.dim_size(2), out.dim_size(3)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Omni-dimensional dynamic convolution
// ---------------------------------------------------------------------------

// Attention head: squeeze (global avg pool) -> shared FC with reduction ->
// four parallel branches over the kernel's spatial / input / output / mixture
// axes.
struct OdconvAttentionHead {
  Tensor squeeze_w, squeeze_b;  // [hidden, c_in], [hidden]
  Tensor spatial_w, spatial_b;  // [k*k, hidden]
  Tensor in_w, in_b;            // [c_in, hidden]
  Tensor out_w, out_b;          // [c_out, hidden]
  Tensor mix_w, mix_b;          // [m, hidden]
};

struct OdconvBank {
  std::int64_t m = 4;
  std::int64_t c_in = 0, c_out = 0, k = 0;
  std::int64_t reduction = 4;
  Tensor kernels;  // [m, c_out, c_in, k, k]
  Tensor bias;     // [c_out]
  OdconvAttentionHead head;

  std::int64_t hidden() const { return (c_in + reduction - 1) / reduction; }
};

inline OdconvBank make_odconv_bank(std::int64_t c_in, std::int64_t c_out,
                                   std::int64_t k, std::int64_t m,
                                   std::int64_t reduction, Rng& rng) {
  if (m < 1) throw ParameterError("odconv: kernel count must be >= 1");
  if (k < 1 || k % 2 == 0) {
    throw ParameterError("odconv: kernel size must be odd and >= 1");
  }
  OdconvBank bank;
  bank.m = m;
  bank.c_in = c_in;
  bank.c_out = c_out;
  bank.k = k;
  bank.reduction = reduction;
  bank.kernels = kaiming_uniform({m, c_out, c_in, k, k}, c_in * k * k, rng);
  bank.bias = Tensor::zeros({c_out}, true);
  const std::int64_t h = bank.hidden();
  bank.head.squeeze_w = kaiming_uniform({h, c_in}, c_in, rng);
  bank.head.squeeze_b = Tensor::zeros({h}, true);
  bank.head.spatial_w = kaiming_uniform({k * k, h}, h, rng);
  bank.head.spatial_b = Tensor::zeros({k * k}, true);
  bank.head.in_w = kaiming_uniform({c_in, h}, h, rng);
  bank.head.in_b = Tensor::zeros({c_in}, true);
  bank.head.out_w = kaiming_uniform({c_out, h}, h, rng);
  bank.head.out_b = Tensor::zeros({c_out}, true);
  bank.head.mix_w = kaiming_uniform({m, h}, h, rng);
  bank.head.mix_b = Tensor::zeros({m}, true);
  return bank;
}

// Per-example attention factors, all batched.
struct OdconvAttention {
  Tensor spatial;  // [B, k*k], sigmoid
  Tensor in_ch;    // [B, c_in], sigmoid
  Tensor out_ch;   // [B, c_out], sigmoid
  Tensor mix;      // [B, m], softmax
};

// Test hook: fixed values substituted for the computed attentions.
struct OdconvOverride {
  std::optional<std::vector<double>> spatial;  // k*k entries
  std::optional<std::vector<double>> in_ch;    // c_in entries
  std::optional<std::vector<double>> out_ch;   // c_out entries
  std::optional<std::vector<double>> mix;      // m entries

  static OdconvOverride all_ones_uniform(const OdconvBank& bank) {
    OdconvOverride o;
    o.spatial = std::vector<double>(bank.k * bank.k, 1.0);
    o.in_ch = std::vector<double>(bank.c_in, 1.0);
    o.out_ch = std::vector<double>(bank.c_out, 1.0);
    o.mix = std::vector<double>(bank.m, 1.0 / static_cast<double>(bank.m));
    return o;
  }
};

inline OdconvAttention odconv_attention(const Tensor& x,
                                        const OdconvBank& bank) {
  bool unbatched = false;
  Tensor xb = att_detail::with_batch(x, unbatched);
  if (xb.dim_size(1) != bank.c_in) {
    throw DimensionError("odconv_attention: input has " +
                         std::to_string(xb.dim_size(1)) +
                         " channels, bank expects " +
                         std::to_string(bank.c_in));
  }
  Tensor pooled = pool(xb, PoolKind::kAvg, 0, 0, PoolScope::kGlobal);
  Tensor hid = relu(linear(pooled, bank.head.squeeze_w, bank.head.squeeze_b));
  OdconvAttention att;
  att.spatial = sigmoid(linear(hid, bank.head.spatial_w, bank.head.spatial_b));
  att.in_ch = sigmoid(linear(hid, bank.head.in_w, bank.head.in_b));
  att.out_ch = sigmoid(linear(hid, bank.head.out_w, bank.head.out_b));
  att.mix = softmax(linear(hid, bank.head.mix_w, bank.head.mix_b));
  return att;
}

namespace att_detail {

inline Tensor override_tensor(const std::vector<double>& values,
                              std::int64_t batch, std::int64_t expect,
                              const char* which) {
  if (static_cast<std::int64_t>(values.size()) != expect) {
    throw ParameterError(std::string("odconv override: ") + which + " needs " +
                         std::to_string(expect) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor row = Tensor::from_data({1, expect}, values);
  std::vector<Tensor> rows(batch, row);
  return batch == 1 ? row : concat(rows, 0);
}

}  // namespace att_detail

// Effective kernel: sum_i mix[i] * (spatial ⊙ in ⊙ out ⊙ kernels[i]), each
// attention broadcast along its own kernel axis, then a same-padded stride-1
// convolution of x with the per-example kernel.
inline Tensor odconv_forward(const Tensor& x, const OdconvBank& bank,
                             const OdconvOverride* override_hook = nullptr) {
  bool unbatched = false;
  Tensor xb = att_detail::with_batch(x, unbatched);
  const std::int64_t batch = xb.dim_size(0);

  OdconvAttention att = odconv_attention(xb, bank);
  if (override_hook) {
    if (override_hook->spatial) {
      att.spatial = att_detail::override_tensor(*override_hook->spatial, batch,
                                                bank.k * bank.k, "spatial");
    }
    if (override_hook->in_ch) {
      att.in_ch = att_detail::override_tensor(*override_hook->in_ch, batch,
                                              bank.c_in, "in_ch");
    }
    if (override_hook->out_ch) {
      att.out_ch = att_detail::override_tensor(*override_hook->out_ch, batch,
                                               bank.c_out, "out_ch");
    }
    if (override_hook->mix) {
      att.mix = att_detail::override_tensor(*override_hook->mix, batch, bank.m,
                                            "mix");
    }
  }

  const std::int64_t m = bank.m, co = bank.c_out, ci = bank.c_in, k = bank.k;
  Tensor kernels6 = reshape(bank.kernels, {1, m, co, ci, k, k});
  Tensor mix6 = reshape(att.mix, {batch, m, 1, 1, 1, 1});
  Tensor out6 = reshape(att.out_ch, {batch, 1, co, 1, 1, 1});
  Tensor in6 = reshape(att.in_ch, {batch, 1, 1, ci, 1, 1});
  Tensor sp6 = reshape(att.spatial, {batch, 1, 1, 1, k, k});
  Tensor scaled = mul(mul(mul(mul(kernels6, mix6), out6), in6), sp6);
  Tensor w_eff = reshape(reduce_axis(scaled, 1, Reduce::kSum),
                         {batch, co, ci, k, k});
  Tensor y = convolution(xb, w_eff, bank.bias, 1, (k - 1) / 2, 2);
  if (unbatched) {
    y = reshape(y, {y.dim_size(1), y.dim_size(2), y.dim_size(3)});
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dynamic CBAM: CBAM whose spatial-attention convolution is an ODConv
// ---------------------------------------------------------------------------

struct DynamicCbamParams {
  std::int64_t channels = 0;
  std::int64_t reduction = 16;
  ChannelMlp mlp;
  OdconvBank spatial;  // c_in = 2, c_out = 1
  CbsBlock cbs;
};

inline DynamicCbamParams make_dynamic_cbam(std::int64_t channels,
                                           std::int64_t reduction,
                                           std::int64_t spatial_k,
                                           std::int64_t odconv_m,
                                           std::int64_t odconv_reduction,
                                           Rng& rng) {
  DynamicCbamParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.mlp = make_channel_mlp(channels, reduction, rng);
  p.spatial = make_odconv_bank(2, 1, spatial_k, odconv_m, odconv_reduction, rng);
  p.cbs = make_cbs(channels, rng);
  return p;
}

// Identical to cbam_forward except the spatial gate's convolution over the
// stacked mean/max map is dynamic.
inline Tensor dynamic_cbam_forward(const Tensor& f, DynamicCbamParams& params,
                                   Mode mode = Mode::kEval,
                                   const OdconvOverride* override_hook = nullptr) {
  bool unbatched = false;
  Tensor x = att_detail::with_batch(f, unbatched);
  if (x.dim_size(1) != params.channels) {
    throw DimensionError("dynamic_cbam_forward: input has " +
                         std::to_string(x.dim_size(1)) +
                         " channels, params expect " +
                         std::to_string(params.channels));
  }
  Tensor mc = channel_attention(x, params.mlp);
  Tensor f1 = mul(x, reshape(mc, {x.dim_size(0), x.dim_size(1), 1, 1}));
  Tensor avg = reduce_axis(f1, 1, Reduce::kMean);
  Tensor mx = reduce_axis(f1, 1, Reduce::kMax);
  Tensor stacked = concat({avg, mx}, 1);
  Tensor ms = sigmoid(odconv_forward(stacked, params.spatial, override_hook));
  Tensor f2 = mul(f1, ms);
  Tensor out = add(x, att_detail::cbs_apply(f2, params.cbs, mode));
  if (unbatched) {
    out = reshape(out, {out.dim_size(1), out.dim_size(2), out.dim_size(3)});
  }
  return out;
}

}  // namespace dynser
