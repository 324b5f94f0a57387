#pragma once
// Tensor-product fusion of text and image token states.
//
// Both modalities are stacked, RMS-normed with a shared weight, and dropped
// out; the fused update is V(t'+i'), gated elementwise by (1 + R t'), mapped
// through O, and added back onto the raw text states:
//
//   out = V(t' + i'); out = out + out (.) (R t'); return t + O out
//
// The residual uses the un-normed t, so O = 0 collapses the module to
// identity over the text stream.

#include <cmath>

#include "docfuse/common.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

template <typename S>
struct FusionParams {
  TensorPtr<S> V, R, O;  // [d, d], applied as x @ M
  TensorPtr<S> w;        // [d]
  double dropout_rate = 0.1;
  double eps = 1e-6;

  static FusionParams init(int64_t d, Rng& rng, double dropout_rate = 0.1) {
    FusionParams p;
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    p.V = randn_tensor<S>({d, d}, rng, std, true);
    p.R = randn_tensor<S>({d, d}, rng, std, true);
    p.O = randn_tensor<S>({d, d}, rng, std, true);
    p.w = full_like_value<S>({d}, S(1));
    p.w->requires_grad = true;
    p.dropout_rate = dropout_rate;
    return p;
  }

  void validate() const {
    const auto d = w->shape[0];
    for (const auto& m : {V, R, O})
      if (m->rank() != 2 || m->shape[0] != d || m->shape[1] != d)
        throw DimensionError("fusion matrices must be square of side " + std::to_string(d));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("fusion dropout_rate must be in [0,1)");
  }
};

template <typename S>
TensorPtr<S> fuse(Tape<S>& tape, const TensorPtr<S>& text_states,
                  const TensorPtr<S>& image_states, const FusionParams<S>& params,
                  bool training, Rng* rng) {
  params.validate();
  if (text_states->shape != image_states->shape)
    throw DimensionError("fusion inputs differ: " + shape_str(text_states->shape) + " vs " +
                         shape_str(image_states->shape));
  if (text_states->rank() != 3)
    throw DimensionError("fusion expects [batch, n, d] states, got " +
                         shape_str(text_states->shape));
  const int64_t batch = text_states->shape[0];
  const int64_t n = text_states->shape[1];
  const int64_t d = text_states->shape[2];
  if (d != params.w->shape[0])
    throw DimensionError("fusion d mismatch: states " + shape_str(text_states->shape) +
                         " vs params of side " + std::to_string(params.w->shape[0]));
  if (n == 0) return text_states;

  auto t2 = reshape(tape, text_states, {batch * n, d});
  auto i2 = reshape(tape, image_states, {batch * n, d});
  auto stacked = stack(tape, {t2, i2}, 0);  // [2, batch*n, d] modality axis
  auto normed = rms_norm(tape, stacked, params.w, params.eps);
  auto dropped = dropout(tape, normed, params.dropout_rate, training, rng);
  auto t_hat = reshape(tape, slice(tape, dropped, 0, 0, 1), {batch * n, d});
  auto i_hat = reshape(tape, slice(tape, dropped, 0, 1, 2), {batch * n, d});

  auto out = matmul(tape, add(tape, t_hat, i_hat), params.V);
  auto gate = matmul(tape, t_hat, params.R);
  out = add(tape, out, mul(tape, out, gate));
  out = matmul(tape, out, params.O);
  auto fused = add(tape, t2, out);
  return reshape(tape, fused, {batch, n, d});
}

}  // namespace docfuse
