#pragma once
// Analytical memory and compute estimator for the encoder-decoder under its
// long-context execution strategies. Closed-form byte and FLOP sums with
// toggles for attention sparsity (blockwise encoding), mixed precision,
// memory-efficient attention, dropping the cross-attention KV cache,
// activation checkpointing, decoder CPU offload, and random chunk
// sampling, plus a budget-constrained maximum-context search.
//
// Modeling constants (recalibrate here):
//   kBytesPerTokenMeta  28   per-input-token ids/boxes/position payload,
//                            never scaled by precision
//   act row floats      8*d + 2*d_ff   stored per sequence row per layer
//   kAttnCopies         4    encoder score-matrix copies (logits, probs,
//                            backward workspace)
//   kAttnCopiesDec      2    decoder score-matrix copies
//   optimizer moments   2 fp32 tensors per weight regardless of precision
//   kSearchCap          1<<20 tokens, upper bound of the context search
//
// Accounting conventions: inference holds one chunk's working set at a time
// (peak), while training retains every row of every layer for backward;
// encoder score matrices live in `attention`; decoder score workspaces are
// part of `activations` and vanish with mem_efficient_attention; the
// recombined encoder output always persists for the decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "docfuse/chunker.hpp"
#include "docfuse/common.hpp"

namespace docfuse {

constexpr int64_t kBytesPerTokenMeta = 28;
constexpr int64_t kAttnCopies = 4;
constexpr int64_t kAttnCopiesDec = 2;
constexpr int64_t kSearchCap = int64_t{1} << 20;

enum class MemMode { inference, training };

struct MemConfig {
  int64_t d = 1024;
  int64_t num_layers_enc = 24;
  int64_t num_layers_dec = 24;
  int64_t num_heads = 16;
  int64_t d_ff = 4096;
  int64_t vocab_size = 32128;
  int64_t c = 1024, o = 0, l = 64;
  int64_t out_len = 128;
  bool sparsity = false;
  bool mixed_precision = false;
  bool mem_efficient_attention = false;
  bool no_cross_kv_cache = false;      // inference only
  bool nested_checkpointing = false;   // training only
  bool cpu_offload = false;            // training only
  bool random_chunks = false;          // training only
  int64_t max_chunks = 16;
  MemMode mode = MemMode::inference;
  int64_t budget_bytes = int64_t{24} << 30;

  void validate() const {
    if (d < 1 || num_layers_enc < 1 || num_layers_dec < 1 || num_heads < 1 || d_ff < 1 ||
        vocab_size < 2)
      throw ConfigError("model dimensions must be positive");
    if (d % num_heads != 0) throw ConfigError("d must be divisible by num_heads");
    if (l < 0 || l >= c) throw ConfigError("need 0 <= l < c");
    if (o < 0 || o >= c - l) throw ConfigError("need 0 <= o < c - l");
    if (out_len < 1) throw ConfigError("out_len must be >= 1");
    if (budget_bytes < 1) throw ConfigError("budget_bytes must be positive");
    if (mode == MemMode::inference) {
      if (nested_checkpointing)
        throw ConfigError("nested_checkpointing is a training-only toggle");
      if (cpu_offload) throw ConfigError("cpu_offload is a training-only toggle");
      if (random_chunks) throw ConfigError("random_chunks is a training-only toggle");
    } else {
      if (no_cross_kv_cache)
        throw ConfigError("no_cross_kv_cache is an inference-only toggle");
    }
    if (random_chunks && max_chunks < 1)
      throw ConfigError("random_chunks needs max_chunks >= 1");
  }

  int64_t bytes_per_float() const { return mixed_precision ? 2 : 4; }

  // Weight count from the modeled dims: tied embedding + output bias, per
  // encoder layer 4 attention mats + fusion (3 mats + gain) + FFN pair +
  // 2 norms, per decoder layer 8 attention mats + FFN pair + 3 norms,
  // final norms, and the shared relative-bias tables (32 buckets each).
  int64_t weight_count() const {
    const int64_t enc_layer = 7 * d * d + 2 * d * d_ff + 3 * d;
    const int64_t dec_layer = 8 * d * d + 2 * d * d_ff + 3 * d;
    return vocab_size * d + vocab_size + num_layers_enc * enc_layer +
           num_layers_dec * dec_layer + 2 * d + 4 * 32 * num_heads;
  }
};

struct MemoryBreakdown {
  int64_t weights = 0;
  int64_t activations = 0;
  int64_t attention = 0;
  int64_t kv_cache = 0;
  int64_t gradients = 0;
  int64_t optimizer = 0;

  int64_t total() const {
    return weights + activations + attention + kv_cache + gradients + optimizer;
  }
};

namespace detail {

inline int64_t sat_bytes(long double v) {
  const long double cap = 4.0e18L;
  return static_cast<int64_t>(std::min(v, cap));
}

struct RowCounts {
  long double total = 0;  // sequence rows across chunks
  long double peak = 0;   // rows of the largest chunk
  long double sum_sq = 0; // sum of squared chunk lengths
};

inline RowCounts row_counts(int64_t C, const MemConfig& cfg) {
  RowCounts rc;
  if (!cfg.sparsity) {
    const long double n = static_cast<long double>(cfg.l + C);
    rc.total = n;
    rc.peak = n;
    rc.sum_sq = n * n;
    return rc;
  }
  const ChunkPlan plan = plan_chunks(C, cfg.c, cfg.o, cfg.l);
  for (const auto& span : plan.chunks) {
    const long double n = static_cast<long double>(cfg.l + span.len());
    rc.total += n;
    rc.peak = std::max(rc.peak, n);
    rc.sum_sq += n * n;
  }
  return rc;
}

}  // namespace detail

inline MemoryBreakdown estimate_memory(int64_t C, const MemConfig& cfg) {
  cfg.validate();
  if (C < 1) throw ValidationError("context length must be >= 1");
  const bool training = cfg.mode == MemMode::training;
  const long double B = static_cast<long double>(cfg.bytes_per_float());
  const long double P = static_cast<long double>(cfg.weight_count());
  // Training with random chunk sampling bounds every compute term by the
  // sampled chunk budget while the document itself keeps growing.
  int64_t C_eff = C;
  if (training && cfg.random_chunks)
    C_eff = std::min(C, cfg.max_chunks * (cfg.c - cfg.l));
  const auto rc = detail::row_counts(C_eff, cfg);
  const long double act_row = static_cast<long double>(8 * cfg.d + 2 * cfg.d_ff);
  const long double H = static_cast<long double>(cfg.num_heads);
  const long double Le = static_cast<long double>(cfg.num_layers_enc);
  const long double Ld = static_cast<long double>(cfg.num_layers_dec);
  const long double out_rows = static_cast<long double>(cfg.l + C_eff);
  const long double m = static_cast<long double>(cfg.out_len);

  MemoryBreakdown out;
  out.weights = detail::sat_bytes(P * B);

  long double act = static_cast<long double>(kBytesPerTokenMeta) *
                    static_cast<long double>(C);  // raw input payload
  if (training) {
    if (cfg.nested_checkpointing)
      // Checkpoints hold layer inputs only (d floats per row): every chunk's
      // embedding rows plus one chunk's per-layer inputs, with a full working
      // buffer for the single layer being recomputed.
      act += (rc.total + rc.peak * Le) * static_cast<long double>(cfg.d) * B +
             rc.peak * act_row * B;
    else
      act += rc.total * Le * act_row * B;
  } else {
    act += rc.peak * act_row * B;  // one chunk in flight
  }
  act += out_rows * static_cast<long double>(cfg.d) * B;  // recombined encoder output
  if (!(training && cfg.cpu_offload)) act += m * Ld * act_row * B;  // decoder rows
  if (!cfg.mem_efficient_attention) {
    // Decoder score workspaces: causal self plus cross over the full input.
    act += H * m * m * kAttnCopiesDec * B;
    act += H * m * out_rows * kAttnCopiesDec * B;
  }
  out.activations = detail::sat_bytes(act);

  if (!cfg.mem_efficient_attention) {
    // One layer's score matrices are resident at a time; training keeps
    // them for every chunk while inference frees them chunk by chunk.
    const long double scores = training ? rc.sum_sq : rc.peak * rc.peak;
    out.attention = detail::sat_bytes(H * scores * kAttnCopies * B);
  }

  if (!training) {
    long double kv = 2.0L * Ld * m * static_cast<long double>(cfg.d) * B;
    if (!cfg.no_cross_kv_cache)
      kv += 2.0L * Ld * out_rows * static_cast<long double>(cfg.d) * B;
    out.kv_cache = detail::sat_bytes(kv);
  }

  if (training) {
    out.gradients = detail::sat_bytes(P * B);
    out.optimizer = detail::sat_bytes(P * 2.0L * 4.0L);  // fp32 moment pair
  }
  return out;
}

// Largest context fitting the budget, by binary search over the strictly
// increasing total; clamped at kSearchCap.
inline int64_t max_context(const MemConfig& cfg) {
  cfg.validate();
  if (estimate_memory(1, cfg).total() > cfg.budget_bytes)
    throw ConfigError("memory budget cannot hold the weights and a one-token pass");
  if (estimate_memory(kSearchCap, cfg).total() <= cfg.budget_bytes) return kSearchCap;
  int64_t lo = 1, hi = kSearchCap;  // est(lo) fits, est(hi) does not
  while (hi - lo > 1) {
    const int64_t mid = lo + (hi - lo) / 2;
    if (estimate_memory(mid, cfg).total() <= cfg.budget_bytes)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

struct FlopsBreakdown {
  double encoder_matmul = 0;
  double encoder_attention = 0;
  double decoder = 0;
  double cross_kv = 0;
  double output_head = 0;

  double total() const {
    return encoder_matmul + encoder_attention + decoder + cross_kv + output_head;
  }
};

inline FlopsBreakdown estimate_flops(int64_t C, int64_t out_len, const MemConfig& cfg) {
  cfg.validate();
  if (C < 1) throw ValidationError("context length must be >= 1");
  if (out_len < 1) throw ValidationError("out_len must be >= 1");
  const bool training = cfg.mode == MemMode::training;
  int64_t C_eff = C;
  if (training && cfg.random_chunks)
    C_eff = std::min(C, cfg.max_chunks * (cfg.c - cfg.l));
  const auto rc = detail::row_counts(C_eff, cfg);
  const double d = static_cast<double>(cfg.d);
  const double dff = static_cast<double>(cfg.d_ff);
  const double Le = static_cast<double>(cfg.num_layers_enc);
  const double Ld = static_cast<double>(cfg.num_layers_dec);
  const double m = static_cast<double>(out_len);
  const double rows = static_cast<double>(rc.total);
  const double out_rows = static_cast<double>(cfg.l + C_eff);

  FlopsBreakdown f;
  // Per encoder row and layer: 4 attention projections, 3 fusion matrices,
  // FFN up and down.
  f.encoder_matmul = 2.0 * rows * Le * (7.0 * d * d + 2.0 * d * dff);
  f.encoder_attention = 4.0 * static_cast<double>(rc.sum_sq) * d * Le;
  // Decoder: self projections + causal scores, cross query/output
  // projections + scores over the encoder output, FFN.
  f.decoder = Ld * m * (2.0 * 4.0 * d * d + 2.0 * 2.0 * d * dff) +
              Ld * 4.0 * m * m * d + Ld * (2.0 * 2.0 * d * d) * m +
              Ld * 4.0 * m * out_rows * d;
  // Cross K/V projections: once with the cache, once per output token
  // without it (the compute-for-memory trade).
  const double kv_passes = (!training && cfg.no_cross_kv_cache) ? m : 1.0;
  f.cross_kv = kv_passes * Ld * 2.0 * 2.0 * d * d * out_rows;
  f.output_head = 2.0 * m * d * static_cast<double>(cfg.vocab_size);
  return f;
}

}  // namespace docfuse
