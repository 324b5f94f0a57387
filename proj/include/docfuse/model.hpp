#pragma once
// Encoder-decoder over layout documents. Encoder blocks are pre-norm
// residual attention + FFN with the vision fusion module appended, repeated
// per layer; long inputs are encoded chunk by chunk and recombined; the
// decoder cross-attends the full recombined states and decodes greedily
// with per-token probabilities.
//
// T5 conventions throughout: RMS pre-norm, no attention scaling, relative
// bias tables shared across layers, tied embedding/output head with the
// logits scaled by d^-1/2, PAD as the decoder start token.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "docfuse/chunker.hpp"
#include "docfuse/common.hpp"
#include "docfuse/fusion.hpp"
#include "docfuse/layout.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

constexpr double kMaskValue = -1e30;

struct ModelConfig {
  int64_t d = 64;
  int64_t num_layers_enc = 2;
  int64_t num_layers_dec = 2;
  int64_t num_heads = 4;
  int64_t d_ff = 256;
  int64_t vocab_size = 64;
  int64_t c = 1024, o = 0, l = 0;
  BiasConfig bias;
  int64_t d_vis = 4;
  double dropout = 0.1;
  bool fusion_every_layer = true;
  bool fusion_after_ffn = true;
  bool recompute_cross_kv = false;
  bool chunk_local_positions = true;
  bool use_visual = true;

  void validate() const {
    if (d < 1 || num_heads < 1 || d % num_heads != 0)
      throw ConfigError("model width " + std::to_string(d) + " not divisible by " +
                        std::to_string(num_heads) + " heads");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (num_layers_enc < 1 || num_layers_dec < 1)
      throw ConfigError("layer counts must be >= 1");
    if (d_ff < 1 || d_vis < 1) throw ConfigError("d_ff and d_vis must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
    if (bias.num_heads != static_cast<int>(num_heads))
      throw ConfigError("bias table heads differ from model heads");
  }
};

template <typename S>
struct AttentionParams {
  TensorPtr<S> wq, wk, wv, wo;  // [d, d], applied as x @ W

  static AttentionParams init(int64_t d, int64_t heads, Rng& rng) {
    AttentionParams p;
    const int64_t dh = d / heads;
    p.wq = randn_tensor<S>({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d * dh)), true);
    p.wk = randn_tensor<S>({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    p.wv = randn_tensor<S>({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    p.wo = randn_tensor<S>({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    return p;
  }
};

template <typename S>
struct EncoderLayerParams {
  TensorPtr<S> attn_norm_w, ffn_norm_w;
  AttentionParams<S> attn;
  TensorPtr<S> w1, w2;  // [d, d_ff], [d_ff, d]
  FusionParams<S> fusion;
};

template <typename S>
struct DecoderLayerParams {
  TensorPtr<S> self_norm_w, cross_norm_w, ffn_norm_w;
  AttentionParams<S> self_attn, cross_attn;
  TensorPtr<S> w1, w2;
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  TensorPtr<S> embed;     // [vocab, d], tied with the output head
  TensorPtr<S> out_bias;  // [vocab]
  TensorPtr<S> vis_proj;  // [d_vis, d]
  BiasTables<S> enc_bias;
  TensorPtr<S> dec_bias_1d;  // [heads, buckets_1d]
  std::vector<EncoderLayerParams<S>> enc_layers;
  std::vector<DecoderLayerParams<S>> dec_layers;
  TensorPtr<S> enc_final_norm_w, dec_final_norm_w;

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    const int64_t d = cfg.d;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    auto ones = [&](int64_t n) {
      auto w = full_like_value<S>({n}, S(1));
      w->requires_grad = true;
      return w;
    };
    p.embed = randn_tensor<S>({cfg.vocab_size, d}, rng, 1.0, true);
    p.out_bias = make_tensor<S>({cfg.vocab_size}, true);
    p.vis_proj = randn_tensor<S>({cfg.d_vis, d}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.d_vis)), true);
    p.enc_bias = BiasTables<S>::init(cfg.bias, rng, inv_sqrt_d);
    p.dec_bias_1d =
        randn_tensor<S>({cfg.bias.num_heads, cfg.bias.num_buckets_1d}, rng, inv_sqrt_d, true);
    for (int64_t i = 0; i < cfg.num_layers_enc; ++i) {
      EncoderLayerParams<S> lp;
      lp.attn_norm_w = ones(d);
      lp.ffn_norm_w = ones(d);
      lp.attn = AttentionParams<S>::init(d, cfg.num_heads, rng);
      lp.w1 = randn_tensor<S>({d, cfg.d_ff}, rng, inv_sqrt_d, true);
      lp.w2 = randn_tensor<S>({cfg.d_ff, d}, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_ff)), true);
      lp.fusion = FusionParams<S>::init(d, rng, cfg.dropout);
      p.enc_layers.push_back(std::move(lp));
    }
    for (int64_t i = 0; i < cfg.num_layers_dec; ++i) {
      DecoderLayerParams<S> lp;
      lp.self_norm_w = ones(d);
      lp.cross_norm_w = ones(d);
      lp.ffn_norm_w = ones(d);
      lp.self_attn = AttentionParams<S>::init(d, cfg.num_heads, rng);
      lp.cross_attn = AttentionParams<S>::init(d, cfg.num_heads, rng);
      lp.w1 = randn_tensor<S>({d, cfg.d_ff}, rng, inv_sqrt_d, true);
      lp.w2 = randn_tensor<S>({cfg.d_ff, d}, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_ff)), true);
      p.dec_layers.push_back(std::move(lp));
    }
    p.enc_final_norm_w = ones(d);
    p.dec_final_norm_w = ones(d);
    return p;
  }

  // Stable name -> tensor listing; the checkpoint and optimizer orders
  // follow this exactly.
  std::vector<std::pair<std::string, TensorPtr<S>>> named() const {
    std::vector<std::pair<std::string, TensorPtr<S>>> out;
    out.emplace_back("embed", embed);
    out.emplace_back("out.bias", out_bias);
    out.emplace_back("vis.proj", vis_proj);
    out.emplace_back("enc.bias_1d", enc_bias.bias_1d);
    out.emplace_back("enc.bias_h", enc_bias.bias_h);
    out.emplace_back("enc.bias_v", enc_bias.bias_v);
    out.emplace_back("dec.bias_1d", dec_bias_1d);
    for (size_t i = 0; i < enc_layers.size(); ++i) {
      const std::string b = "enc." + std::to_string(i) + ".";
      const auto& lp = enc_layers[i];
      out.emplace_back(b + "attn_norm.w", lp.attn_norm_w);
      out.emplace_back(b + "attn.wq", lp.attn.wq);
      out.emplace_back(b + "attn.wk", lp.attn.wk);
      out.emplace_back(b + "attn.wv", lp.attn.wv);
      out.emplace_back(b + "attn.wo", lp.attn.wo);
      out.emplace_back(b + "ffn_norm.w", lp.ffn_norm_w);
      out.emplace_back(b + "ffn.w1", lp.w1);
      out.emplace_back(b + "ffn.w2", lp.w2);
      const std::string f = "fusion." + std::to_string(i) + ".";
      out.emplace_back(f + "V", lp.fusion.V);
      out.emplace_back(f + "R", lp.fusion.R);
      out.emplace_back(f + "O", lp.fusion.O);
      out.emplace_back(f + "w", lp.fusion.w);
    }
    out.emplace_back("enc.final_norm.w", enc_final_norm_w);
    for (size_t i = 0; i < dec_layers.size(); ++i) {
      const std::string b = "dec." + std::to_string(i) + ".";
      const auto& lp = dec_layers[i];
      out.emplace_back(b + "self_norm.w", lp.self_norm_w);
      out.emplace_back(b + "self.wq", lp.self_attn.wq);
      out.emplace_back(b + "self.wk", lp.self_attn.wk);
      out.emplace_back(b + "self.wv", lp.self_attn.wv);
      out.emplace_back(b + "self.wo", lp.self_attn.wo);
      out.emplace_back(b + "cross_norm.w", lp.cross_norm_w);
      out.emplace_back(b + "cross.wq", lp.cross_attn.wq);
      out.emplace_back(b + "cross.wk", lp.cross_attn.wk);
      out.emplace_back(b + "cross.wv", lp.cross_attn.wv);
      out.emplace_back(b + "cross.wo", lp.cross_attn.wo);
      out.emplace_back(b + "ffn_norm.w", lp.ffn_norm_w);
      out.emplace_back(b + "ffn.w1", lp.w1);
      out.emplace_back(b + "ffn.w2", lp.w2);
    }
    out.emplace_back("dec.final_norm.w", dec_final_norm_w);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Attention

// Projects an encoder-side sequence to per-head keys and values [h, nk, dh].
template <typename S>
std::pair<TensorPtr<S>, TensorPtr<S>> attention_kv(Tape<S>& tape, const TensorPtr<S>& x,
                                                   const AttentionParams<S>& p, int64_t heads) {
  const int64_t nk = x->shape[0], d = x->shape[1], dh = d / heads;
  auto k = transpose(tape, reshape(tape, matmul(tape, x, p.wk), {nk, heads, dh}), {1, 0, 2});
  auto v = transpose(tape, reshape(tape, matmul(tape, x, p.wv), {nk, heads, dh}), {1, 0, 2});
  return {k, v};
}

// Unscaled dot-product attention with optional additive bias [h, nq, nk]
// and additive mask [nq, nk] (0 to pass, kMaskValue to block).
template <typename S>
TensorPtr<S> attention_with_kv(Tape<S>& tape, const TensorPtr<S>& x_q, const TensorPtr<S>& k3,
                               const TensorPtr<S>& v3, const AttentionParams<S>& p,
                               int64_t heads, const TensorPtr<S>& bias,
                               const TensorPtr<S>& mask) {
  const int64_t nq = x_q->shape[0], d = x_q->shape[1], dh = d / heads;
  auto q = transpose(tape, reshape(tape, matmul(tape, x_q, p.wq), {nq, heads, dh}), {1, 0, 2});
  auto logits = matmul(tape, q, transpose(tape, k3, {0, 2, 1}));
  if (bias) logits = add(tape, logits, bias);
  if (mask) logits = add(tape, logits, mask);
  auto probs = softmax(tape, logits, 2);
  auto ctx = reshape(tape, transpose(tape, matmul(tape, probs, v3), {1, 0, 2}), {nq, d});
  return matmul(tape, ctx, p.wo);
}

template <typename S>
TensorPtr<S> attention(Tape<S>& tape, const TensorPtr<S>& x_q, const TensorPtr<S>& x_kv,
                       const AttentionParams<S>& p, int64_t heads, const TensorPtr<S>& bias,
                       const TensorPtr<S>& mask) {
  auto [k3, v3] = attention_kv(tape, x_kv, p, heads);
  return attention_with_kv(tape, x_q, k3, v3, p, heads, bias, mask);
}

template <typename S>
TensorPtr<S> causal_mask(int64_t n) {
  auto m = make_tensor<S>({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) m->data[i * n + j] = static_cast<S>(kMaskValue);
  return m;
}

// Additive mask permitting attention only within equal segment ids.
template <typename S>
TensorPtr<S> segment_block_mask(const std::vector<int64_t>& segments) {
  const int64_t n = static_cast<int64_t>(segments.size());
  auto m = make_tensor<S>({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (segments[i] != segments[j]) m->data[i * n + j] = static_cast<S>(kMaskValue);
  return m;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename S>
TensorPtr<S> ffn_forward(Tape<S>& tape, const TensorPtr<S>& x, const TensorPtr<S>& w1,
                         const TensorPtr<S>& w2, double rate, bool training, Rng* rng) {
  auto h = relu(tape, matmul(tape, x, w1));
  h = dropout(tape, h, rate, training, rng);
  return matmul(tape, h, w2);
}

template <typename S>
TensorPtr<S> encoder_block_forward(Tape<S>& tape, TensorPtr<S> states,
                                   const TensorPtr<S>& image_states, const TensorPtr<S>& bias,
                                   const EncoderLayerParams<S>& lp, const ModelConfig& cfg,
                                   int64_t layer_idx, bool training, Rng* rng) {
  if (states->shape != image_states->shape)
    throw DimensionError("encoder block image states differ: " + shape_str(states->shape) +
                         " vs " + shape_str(image_states->shape));
  const int64_t n = states->shape[0], d = states->shape[1];
  const bool fusion_on = cfg.fusion_every_layer || layer_idx == 0;
  auto run_fusion = [&](TensorPtr<S> x) {
    auto y = fuse(tape, reshape(tape, x, {1, n, d}), reshape(tape, image_states, {1, n, d}),
                  lp.fusion, training, rng);
    return reshape(tape, y, {n, d});
  };
  if (fusion_on && !cfg.fusion_after_ffn) states = run_fusion(states);
  auto a = attention(tape, rms_norm(tape, states, lp.attn_norm_w, 1e-6),
                     rms_norm(tape, states, lp.attn_norm_w, 1e-6), lp.attn, cfg.num_heads,
                     bias, TensorPtr<S>{});
  states = add(tape, states, dropout(tape, a, cfg.dropout, training, rng));
  auto f = ffn_forward(tape, rms_norm(tape, states, lp.ffn_norm_w, 1e-6), lp.w1, lp.w2,
                       cfg.dropout, training, rng);
  states = add(tape, states, dropout(tape, f, cfg.dropout, training, rng));
  if (fusion_on && cfg.fusion_after_ffn) states = run_fusion(states);
  return states;
}

// ---------------------------------------------------------------------------
// Document encoding

template <typename S>
struct EncodedDocument {
  TensorPtr<S> states;  // [total, d]
  // row -> (document token index, chunk index); prefix rows carry -1.
  std::vector<std::pair<int64_t, int64_t>> origin;
  ChunkPlan plan;
};

inline BoundingBox prefix_box() { return BoundingBox{0.0, 0.0, 1.0, 1.0, 0}; }

// Encodes one chunk sequence: replicated question prefix followed by the
// chunk's document tokens. Prefix tokens carry a full-page box and a zero
// visual embedding.
template <typename S>
TensorPtr<S> encode_chunk(Tape<S>& tape, const LayoutDocument& doc,
                          const std::vector<int32_t>& prefix_tokens, const ChunkSpan& span,
                          const ModelParams<S>& params, bool training, Rng* rng) {
  const ModelConfig& cfg = params.cfg;
  const int64_t l = static_cast<int64_t>(prefix_tokens.size());
  const int64_t len = span.len();
  const int64_t n = l + len;
  std::vector<int32_t> ids = prefix_tokens;
  std::vector<int64_t> positions(static_cast<size_t>(n));
  std::vector<BoundingBox> boxes(static_cast<size_t>(n), prefix_box());
  std::vector<BoundingBox> token_boxes;
  for (int64_t i = 0; i < l; ++i) positions[static_cast<size_t>(i)] = i;
  for (int64_t t = 0; t < len; ++t) {
    const auto& tok = doc.tokens[static_cast<size_t>(span.start + t)];
    ids.push_back(tok.id);
    positions[static_cast<size_t>(l + t)] =
        cfg.chunk_local_positions ? l + t : l + span.start + t;
    boxes[static_cast<size_t>(l + t)] = tok.box;
    token_boxes.push_back(tok.box);
  }
  auto states = embedding_lookup(tape, params.embed, ids);
  states = dropout(tape, states, cfg.dropout, training, rng);

  TensorPtr<S> image;
  if (cfg.use_visual && doc.has_grid && len > 0) {
    auto vis = roi_visual_embed(tape, doc.grid, token_boxes, params.vis_proj);
    auto zeros = make_tensor<S>({l, cfg.d});
    image = l > 0 ? concat(tape, {zeros, vis}, 0) : vis;
  } else {
    image = make_tensor<S>({n, cfg.d});
  }

  auto bias = attention_bias(tape, params.enc_bias, positions, boxes);
  for (size_t li = 0; li < params.enc_layers.size(); ++li)
    states = encoder_block_forward(tape, states, image, bias, params.enc_layers[li], cfg,
                                   static_cast<int64_t>(li), training, rng);
  return rms_norm(tape, states, params.enc_final_norm_w, 1e-6);
}

template <typename S>
EncodedDocument<S> encode(Tape<S>& tape, const LayoutDocument& doc,
                          const std::vector<int32_t>& prefix_tokens,
                          const ModelParams<S>& params, bool training = false,
                          Rng* rng = nullptr, const ChunkPlan* plan_override = nullptr) {
  if (doc.tokens.empty()) throw ValidationError("cannot encode an empty document");
  const ModelConfig& cfg = params.cfg;
  const int64_t l = static_cast<int64_t>(prefix_tokens.size());
  if (l >= cfg.c)
    throw ConfigError("prefix of " + std::to_string(l) + " tokens does not fit chunk size " +
                      std::to_string(cfg.c));
  EncodedDocument<S> enc;
  enc.plan = plan_override
                 ? *plan_override
                 : plan_chunks(static_cast<int64_t>(doc.tokens.size()), cfg.c, cfg.o, l);
  std::vector<TensorPtr<S>> outputs;
  std::vector<ChunkSpan> spans;
  for (size_t k = 0; k < enc.plan.chunks.size(); ++k) {
    const auto& span = enc.plan.chunks[k];
    outputs.push_back(encode_chunk(tape, doc, prefix_tokens, span, params, training, rng));
    spans.push_back(span);
    int64_t drop = 0;
    if (k > 0) {
      drop = l;
      if (enc.plan.o > 0 && span.index == spans[k - 1].index + 1) drop += enc.plan.o;
    }
    for (int64_t r = drop; r < l + span.len(); ++r) {
      const int64_t doc_idx = r < l ? -1 : span.start + (r - l);
      enc.origin.emplace_back(doc_idx, span.index);
    }
  }
  enc.states = recombine(tape, outputs, spans, l, enc.plan.o);
  return enc;
}

// ---------------------------------------------------------------------------
// Decoder

template <typename S>
struct CrossKV {
  std::vector<std::pair<TensorPtr<S>, TensorPtr<S>>> per_layer;
};

template <typename S>
CrossKV<S> compute_cross_kv(Tape<S>& tape, const TensorPtr<S>& enc_states,
                            const ModelParams<S>& params) {
  CrossKV<S> kv;
  for (const auto& lp : params.dec_layers)
    kv.per_layer.push_back(
        attention_kv(tape, enc_states, lp.cross_attn, params.cfg.num_heads));
  return kv;
}

template <typename S>
TensorPtr<S> decoder_self_bias(Tape<S>& tape, const ModelParams<S>& params, int64_t m) {
  std::vector<int32_t> idx(static_cast<size_t>(m * m));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j)
      idx[static_cast<size_t>(i * m + j)] = bucket_relative_position(
          j - i, params.cfg.bias.num_buckets_1d, params.cfg.bias.max_distance_1d);
  return bias_gather(tape, params.dec_bias_1d, idx, m, m);
}

// Teacher-forced decoder pass: dec_ids -> [m, vocab] logits. Cross K/V come
// from the cache when given, otherwise are projected here from enc_states.
template <typename S>
TensorPtr<S> decoder_forward(Tape<S>& tape, const TensorPtr<S>& enc_states,
                             const std::vector<int32_t>& dec_ids, const ModelParams<S>& params,
                             bool training, Rng* rng, const CrossKV<S>* kv_cache = nullptr) {
  const ModelConfig& cfg = params.cfg;
  const int64_t m = static_cast<int64_t>(dec_ids.size());
  if (m < 1) throw DimensionError("decoder input is empty");
  auto x = embedding_lookup(tape, params.embed, dec_ids);
  x = dropout(tape, x, cfg.dropout, training, rng);
  auto bias = decoder_self_bias(tape, params, m);
  auto mask = causal_mask<S>(m);
  for (size_t li = 0; li < params.dec_layers.size(); ++li) {
    const auto& lp = params.dec_layers[li];
    auto a = attention(tape, rms_norm(tape, x, lp.self_norm_w, 1e-6),
                       rms_norm(tape, x, lp.self_norm_w, 1e-6), lp.self_attn, cfg.num_heads,
                       bias, mask);
    x = add(tape, x, dropout(tape, a, cfg.dropout, training, rng));
    auto h = rms_norm(tape, x, lp.cross_norm_w, 1e-6);
    TensorPtr<S> k3, v3;
    if (kv_cache) {
      k3 = kv_cache->per_layer[li].first;
      v3 = kv_cache->per_layer[li].second;
    } else {
      std::tie(k3, v3) = attention_kv(tape, enc_states, lp.cross_attn, cfg.num_heads);
    }
    auto ca = attention_with_kv(tape, h, k3, v3, lp.cross_attn, cfg.num_heads, TensorPtr<S>{},
                                TensorPtr<S>{});
    x = add(tape, x, dropout(tape, ca, cfg.dropout, training, rng));
    auto f = ffn_forward(tape, rms_norm(tape, x, lp.ffn_norm_w, 1e-6), lp.w1, lp.w2,
                         cfg.dropout, training, rng);
    x = add(tape, x, dropout(tape, f, cfg.dropout, training, rng));
  }
  x = rms_norm(tape, x, params.dec_final_norm_w, 1e-6);
  x = scale(tape, x, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
  auto logits = matmul(tape, x, transpose(tape, params.embed, {1, 0}));
  return add(tape, logits, params.out_bias);
}

// ---------------------------------------------------------------------------
// Greedy generation

struct GenerationResult {
  std::vector<int32_t> tokens;   // emitted answer, end token excluded
  std::vector<double> scores;    // chosen-token softmax probability per step,
                                 // including the terminating end token's
};

template <typename S>
GenerationResult generate(const EncodedDocument<S>& enc, const ModelParams<S>& params,
                          int64_t max_out) {
  if (max_out < 1) throw ConfigError("generation requires max_out >= 1");
  Tape<S> tape;
  const bool recompute = params.cfg.recompute_cross_kv;
  CrossKV<S> cache;
  if (!recompute) cache = compute_cross_kv(tape, enc.states, params);
  GenerationResult res;
  std::vector<int32_t> ids{kPadId};
  while (static_cast<int64_t>(res.tokens.size()) < max_out) {
    CrossKV<S> step_kv;
    if (recompute) step_kv = compute_cross_kv(tape, enc.states, params);
    auto logits = decoder_forward(tape, enc.states, ids, params, false, nullptr,
                                  recompute ? &step_kv : &cache);
    const int64_t vocab = logits->shape[1];
    const S* row = logits->data.data() + (logits->shape[0] - 1) * vocab;
    int32_t best = 0;
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < vocab; ++j)
      if (static_cast<double>(row[j]) > mx) {
        mx = static_cast<double>(row[j]);
        best = static_cast<int32_t>(j);
      }
    double denom = 0.0;
    for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double score = 1.0 / denom;  // exp(mx - mx) / denom
    res.scores.push_back(score);
    if (best == kEosId) break;
    res.tokens.push_back(best);
    ids.push_back(best);
  }
  return res;
}

}  // namespace docfuse
