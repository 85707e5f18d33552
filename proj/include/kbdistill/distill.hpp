#pragma once

// Distillation distribution over KB records and its reference target.

#include <vector>

#include "kbdistill/encoder.hpp"

namespace kbd {

/// Tape-backed scores s_m and probabilities d_m = softmax(s)_m.
struct DistillationDistribution {
  Var scores;
  Var probs;
};

struct ReferenceDistribution {
  std::vector<double> counts;  // s*_m
  std::vector<double> probs;   // d*_m, uniform when every count is zero
};

/// s_m = sum over history token occurrences w and values v of record m of
/// cos(E[w], E[v]). With unique_history_words each word type counts once.
DistillationDistribution distill_pairwise(Tape& tape, const Model& model,
                                          const std::vector<TokenId>& history_flat,
                                          const KBMemory& kb);

/// s_m = r_m . c (c projected to the embedding width when widths differ).
DistillationDistribution distill_naive(Tape& tape, const Model& model, const KBMemory& kb,
                                       Var context);

/// s_m = sum over attributes n of w . tanh(A c + B v_mn).
DistillationDistribution distill_entry_attention(Tape& tape, const Model& model,
                                                 const KBMemory& kb, Var context);

/// Dispatches on model.config.scorer.
DistillationDistribution distill(Tape& tape, const Model& model, const ContextEncoding& ctx,
                                 const KBMemory& kb);

/// Occurrences of any of record m's values among history and gold-response tokens.
std::vector<double> reference_counts(const DialogSample& sample);
ReferenceDistribution reference_from_counts(std::vector<double> counts);
ReferenceDistribution reference_distribution(const DialogSample& sample);

}  // namespace kbd
