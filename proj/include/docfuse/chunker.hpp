#pragma once
// Chunked long-input processing: split the token stream into fixed-size
// chunks that each open with a replicated prefix (the question), encode
// chunks independently, then stitch encoder outputs back into one sequence.
//
// For core length c, overlap o, and prefix length l, chunk k covers input
// tokens [start_k, end_k) with end_k = min(start_k + c - l, input_len) and
// start_{k+1} = end_k - o. Unpadded: the final chunk keeps its true length.

#include <cstdint>
#include <string>
#include <vector>

#include "docfuse/common.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

struct ChunkSpan {
  int64_t start = 0, end = 0;  // input token span [start, end)
  int64_t index = 0;           // position in the original full plan
  int64_t len() const { return end - start; }
};

struct ChunkPlan {
  int64_t c = 1024, o = 0, l = 0;
  int64_t input_len = 0;
  std::vector<ChunkSpan> chunks;
};

inline ChunkPlan plan_chunks(int64_t input_len, int64_t c, int64_t o, int64_t l) {
  if (!(l >= 0 && l < c))
    throw ConfigError("chunk prefix violates 0 <= l < c (l=" + std::to_string(l) +
                      ", c=" + std::to_string(c) + ")");
  if (!(o >= 0 && o < c - l))
    throw ConfigError("chunk overlap violates 0 <= o < c - l (o=" + std::to_string(o) +
                      ", c=" + std::to_string(c) + ", l=" + std::to_string(l) + ")");
  if (input_len < 1) throw ConfigError("chunking requires input_len >= 1");
  ChunkPlan plan;
  plan.c = c;
  plan.o = o;
  plan.l = l;
  plan.input_len = input_len;
  int64_t start = 0;
  for (int64_t k = 0;; ++k) {
    const int64_t end = std::min(start + (c - l), input_len);
    plan.chunks.push_back({start, end, k});
    if (end == input_len) break;
    start = end - o;
  }
  return plan;
}

// Stitches per-chunk encoder outputs back into one [total, d] sequence.
// The first listed chunk contributes all rows. Every later chunk drops its
// l prefix rows, plus the o duplicated leading tokens when its predecessor
// in the full plan is also present (a sampled plan may have gaps, and a gap
// means those tokens were never produced by the previous kept chunk).
template <typename S>
TensorPtr<S> recombine(Tape<S>& tape, const std::vector<TensorPtr<S>>& chunk_outputs,
                       const std::vector<ChunkSpan>& spans, int64_t l, int64_t o) {
  if (chunk_outputs.empty()) throw DimensionError("recombine of zero chunks");
  if (chunk_outputs.size() != spans.size())
    throw DimensionError("recombine outputs and spans differ in count");
  std::vector<TensorPtr<S>> kept;
  for (size_t k = 0; k < chunk_outputs.size(); ++k) {
    const auto& out = chunk_outputs[k];
    if (out->rank() != 2) throw DimensionError("chunk outputs must be [len, d]");
    int64_t drop = 0;
    if (k > 0) {
      drop = l;
      if (o > 0 && spans[k].index == spans[k - 1].index + 1) drop += o;
    }
    if (out->shape[0] < drop)
      throw DimensionError("chunk output of " + std::to_string(out->shape[0]) +
                           " rows is shorter than its " + std::to_string(drop) +
                           " dropped rows");
    kept.push_back(drop == 0 ? out : slice(tape, out, 0, drop, out->shape[0]));
  }
  return kept.size() == 1 ? kept[0] : concat(tape, kept, 0);
}

// Keeps chunk 1 and a uniform without-replacement draw of the rest, order
// preserved. Used to expose training to different document parts per epoch.
inline ChunkPlan sample_training_chunks(const ChunkPlan& plan, int64_t max_chunks, Rng& rng) {
  if (max_chunks < 1) throw ConfigError("chunk sampling requires max_chunks >= 1");
  const int64_t n = static_cast<int64_t>(plan.chunks.size());
  if (n <= max_chunks) return plan;
  ChunkPlan out = plan;
  out.chunks.clear();
  out.chunks.push_back(plan.chunks[0]);
  auto picks = rng.sample_without_replacement(static_cast<uint64_t>(n - 1),
                                              static_cast<uint64_t>(max_chunks - 1));
  std::sort(picks.begin(), picks.end());
  for (uint64_t p : picks) out.chunks.push_back(plan.chunks[static_cast<size_t>(p + 1)]);
  return out;
}

// Total recombined rows for a plan, counting prefixes and duplicate drops.
inline int64_t recombined_len(const ChunkPlan& plan) {
  int64_t total = 0;
  for (size_t k = 0; k < plan.chunks.size(); ++k) {
    int64_t rows = plan.l + plan.chunks[k].len();
    if (k > 0) {
      rows -= plan.l;
      if (plan.o > 0 && plan.chunks[k].index == plan.chunks[k - 1].index + 1) rows -= plan.o;
    }
    total += rows;
  }
  return total;
}

}  // namespace docfuse
