#pragma once

#include <vector>

#include "dynser/common.hpp"
#include "dynser/tensor.hpp"

namespace dynser {

struct GruWeights {
  Tensor w_ir, w_iz, w_in;  // [H, D]
  Tensor w_hr, w_hz, w_hn;  // [H, H]
  Tensor b_ir, b_iz, b_in, b_hr, b_hz, b_hn;  // [H]

  std::int64_t hidden() const { return w_ir.dim_size(0); }
  std::int64_t input() const { return w_ir.dim_size(1); }
};

inline GruWeights make_gru_weights(std::int64_t input, std::int64_t hidden,
                                   Rng& rng) {
  GruWeights w;
  w.w_ir = kaiming_uniform({hidden, input}, input, rng);
  w.w_iz = kaiming_uniform({hidden, input}, input, rng);
  w.w_in = kaiming_uniform({hidden, input}, input, rng);
  w.w_hr = kaiming_uniform({hidden, hidden}, hidden, rng);
  w.w_hz = kaiming_uniform({hidden, hidden}, hidden, rng);
  w.w_hn = kaiming_uniform({hidden, hidden}, hidden, rng);
  w.b_ir = Tensor::zeros({hidden}, true);
  w.b_iz = Tensor::zeros({hidden}, true);
  w.b_in = Tensor::zeros({hidden}, true);
  w.b_hr = Tensor::zeros({hidden}, true);
  w.b_hz = Tensor::zeros({hidden}, true);
  w.b_hn = Tensor::zeros({hidden}, true);
  return w;
}

// One step with the gate pre-activations exposed, for property tests.
struct GruCellDetail {
  Tensor reset, update, candidate, hidden;
};

namespace gru_detail {

// Step from precomputed input projections px_* = x W_i*^T + b_i*.
inline GruCellDetail cell_from_projections(const Tensor& px_r,
                                           const Tensor& px_z,
                                           const Tensor& px_n,
                                           const Tensor& h_prev,
                                           const GruWeights& w) {
  GruCellDetail d;
  d.reset = sigmoid(add(px_r, linear(h_prev, w.w_hr, w.b_hr)));
  d.update = sigmoid(add(px_z, linear(h_prev, w.w_hz, w.b_hz)));
  d.candidate = tanh_op(add(px_n, mul(d.reset, linear(h_prev, w.w_hn, w.b_hn))));
  // h = (1 - z) * n + z * h_prev
  d.hidden = add(mul(affine(d.update, -1.0, 1.0), d.candidate),
                 mul(d.update, h_prev));
  return d;
}

}  // namespace gru_detail

inline GruCellDetail gru_cell_detailed(const Tensor& x_t, const Tensor& h_prev,
                                       const GruWeights& w) {
  if (x_t.shape().back() != w.input()) {
    throw DimensionError("gru_cell: input width " +
                         std::to_string(x_t.shape().back()) +
                         " does not match weights (" +
                         std::to_string(w.input()) + ")");
  }
  if (h_prev.shape().back() != w.hidden()) {
    throw DimensionError("gru_cell: hidden width " +
                         std::to_string(h_prev.shape().back()) +
                         " does not match weights (" +
                         std::to_string(w.hidden()) + ")");
  }
  return gru_detail::cell_from_projections(
      linear(x_t, w.w_ir, w.b_ir), linear(x_t, w.w_iz, w.b_iz),
      linear(x_t, w.w_in, w.b_in), h_prev, w);
}

// r = s(W_ir x + b_ir + W_hr h + b_hr), z likewise,
// n = tanh(W_in x + b_in + r * (W_hn h + b_hn)), h' = (1-z)*n + z*h.
// Accepts [D] / [B,D] inputs with matching h_prev.
inline Tensor gru_cell(const Tensor& x_t, const Tensor& h_prev,
                       const GruWeights& w) {
  return gru_cell_detailed(x_t, h_prev, w).hidden;
}

// Left fold of gru_cell over time. xs is [T,D] or [B,T,D]; h0 is [H] or
// [B,H]; returns all hidden states, [T,H] or [B,T,H]. Input projections for
// all steps are batched into one matrix product per gate.
inline Tensor gru_sequence(const Tensor& xs, const Tensor& h0,
                           const GruWeights& w) {
  const bool batched = xs.dim() == 3;
  if (!batched && xs.dim() != 2) {
    throw DimensionError("gru_sequence: expected [T,D] or [B,T,D], got " +
                         shape_str(xs.shape()));
  }
  const std::int64_t batch = batched ? xs.dim_size(0) : 1;
  const std::int64_t steps = xs.dim_size(batched ? 1 : 0);
  const std::int64_t width = xs.dim_size(batched ? 2 : 1);
  const std::int64_t hidden = w.hidden();
  if (width != w.input()) {
    throw DimensionError("gru_sequence: input width " + std::to_string(width) +
                         " does not match weights (" +
                         std::to_string(w.input()) + ")");
  }
  Tensor x2 = reshape(xs, {batch * steps, width});
  Tensor pr = reshape(linear(x2, w.w_ir, w.b_ir), {batch, steps, hidden});
  Tensor pz = reshape(linear(x2, w.w_iz, w.b_iz), {batch, steps, hidden});
  Tensor pn = reshape(linear(x2, w.w_in, w.b_in), {batch, steps, hidden});

  Tensor h = batched ? h0 : reshape(h0, {1, hidden});
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::int64_t t = 0; t < steps; ++t) {
    auto step = [&](const Tensor& p) {
      return reshape(narrow(p, 1, t, 1), {batch, hidden});
    };
    h = gru_detail::cell_from_projections(step(pr), step(pz), step(pn), h, w)
            .hidden;
    outputs.push_back(reshape(h, {batch, 1, hidden}));
  }
  Tensor all = concat(outputs, 1);
  return batched ? all : reshape(all, {steps, hidden});
}

// One bidirectional layer: forward pass over xs, backward pass over the
// time-reversed sequence re-reversed on output, concatenated per step.
// Output width is 2H.
inline Tensor bigru_layer(const Tensor& xs, const GruWeights& fwd,
                          const GruWeights& bwd) {
  const bool batched = xs.dim() == 3;
  const int time_axis = batched ? 1 : 0;
  const std::int64_t batch = batched ? xs.dim_size(0) : 1;
  Tensor h0f = batched ? Tensor::zeros({batch, fwd.hidden()})
                       : Tensor::zeros({fwd.hidden()});
  Tensor h0b = batched ? Tensor::zeros({batch, bwd.hidden()})
                       : Tensor::zeros({bwd.hidden()});
  Tensor f = gru_sequence(xs, h0f, fwd);
  Tensor b = flip(gru_sequence(flip(xs, time_axis), h0b, bwd), time_axis);
  return concat({f, b}, batched ? 2 : 1);
}

struct BiGruLayer {
  GruWeights fwd, bwd;
};

inline BiGruLayer make_bigru_layer(std::int64_t input, std::int64_t hidden,
                                   Rng& rng) {
  return BiGruLayer{make_gru_weights(input, hidden, rng),
                    make_gru_weights(input, hidden, rng)};
}

namespace gru_detail {

// Inverted Bernoulli dropout: keep with probability 1-p, scale kept units by
// 1/(1-p) so eval mode is an identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ParameterError("dropout: rate must be in [0,1)");
  Tensor mask = Tensor::zeros(x.shape());
  const double keep = 1.0 - rate;
  for (auto& v : mask.values()) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, mask);
}

}  // namespace gru_detail

// Stacked bidirectional GRU. In train mode the input to layer l+1 is the
// previous layer's output under a seeded Bernoulli dropout factor with
// inverted scaling; eval mode and single layers are unaffected.
inline Tensor bigru_stack_forward(const Tensor& xs,
                                  const std::vector<BiGruLayer>& layers,
                                  Mode mode, double dropout_rate,
                                  std::uint64_t seed) {
  if (layers.empty()) throw ParameterError("bigru: no layers");
  Tensor h = xs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && mode == Mode::kTrain && dropout_rate > 0.0) {
      Rng rng(derive_seed(seed, "bigru_dropout", l));
      h = gru_detail::dropout(h, dropout_rate, rng);
    }
    h = bigru_layer(h, layers[l].fwd, layers[l].bwd);
  }
  return h;
}

// Single-layer entry point. dropout_rate and seed only take effect between
// stacked layers, so they are inert here; kept for interface symmetry with
// the stack.
inline Tensor bigru_forward(const Tensor& xs, const GruWeights& fwd,
                            const GruWeights& bwd, Mode mode = Mode::kEval,
                            double dropout_rate = 0.0, std::uint64_t seed = 0) {
  (void)mode;
  (void)dropout_rate;
  (void)seed;
  return bigru_layer(xs, fwd, bwd);
}

// Stacked unidirectional GRU with the same inter-layer dropout scheme.
inline Tensor gru_stack_forward(const Tensor& xs,
                                const std::vector<GruWeights>& layers,
                                Mode mode, double dropout_rate,
                                std::uint64_t seed) {
  if (layers.empty()) throw ParameterError("gru: no layers");
  const bool batched = xs.dim() == 3;
  Tensor h = xs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && mode == Mode::kTrain && dropout_rate > 0.0) {
      Rng rng(derive_seed(seed, "gru_dropout", l));
      h = gru_detail::dropout(h, dropout_rate, rng);
    }
    const std::int64_t batch = batched ? h.dim_size(0) : 1;
    Tensor h0 = batched ? Tensor::zeros({batch, layers[l].hidden()})
                        : Tensor::zeros({layers[l].hidden()});
    h = gru_sequence(h, h0, layers[l]);
  }
  return h;
}

}  // namespace dynser
