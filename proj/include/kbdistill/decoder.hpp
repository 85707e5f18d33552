#pragma once

// Sketch decoder with a multi-hop context pointer, a distillation-weighted
// KB pointer, and a soft gate combining the two into the copy distribution.

#include <map>
#include <optional>
#include <vector>

#include "kbdistill/distill.hpp"
#include "kbdistill/encoder.hpp"

namespace kbd {

/// Probability mass per vocabulary id; absent ids carry zero.
using SparseDist = std::map<TokenId, Real>;

/// Per-sample quantities shared by every decoding step.
struct DecoderContext {
  const ContextEncoding* context = nullptr;
  const KBMemory* kb = nullptr;
  Var word_proj;    // positions x att
  Var record_proj;  // records x att
  Var key_proj;     // key types x att
  Var distill_probs;
  std::vector<std::uint32_t> attr_record;
  std::vector<std::uint32_t> attr_key;
  bool kb_active = false;
};

/// `pd` may be null only for an empty KB.
DecoderContext prepare_decoder(Tape& tape, const Model& model, const ContextEncoding& ctx,
                               const KBMemory& kb, const DistillationDistribution* pd);

/// h_0 = tanh(W c + b).
Var initial_decoder_state(Tape& tape, const Model& model, const ContextEncoding& ctx);

struct StepVars {
  Var hidden;
  std::vector<Var> hop_summaries;  // g^1 .. g^H
  Var hop_attention;               // a^H over history positions
  Var p_gen;                       // over the vocabulary
  Var beta;                        // over records
  Var gamma;                       // over key types
  Var p_kb_attr;                   // over flat attributes
  Var alpha;
};

StepVars decoder_step(Tape& tape, const Model& model, const DecoderContext& dctx, Var prev_hidden,
                      TokenId prev_token, const DropoutContext& dropout = {});

/// P_c(w) as a tape node, or nullopt when w is in neither history nor KB.
std::optional<Var> copy_probability(Tape& tape, const DecoderContext& dctx, const StepVars& step,
                                    TokenId w);

struct StepOutput {
  Vec p_gen;
  SparseDist p_con;
  SparseDist p_kb;  // empty for an empty KB
  SparseDist p_copy;
  Real alpha = 0.0;
  std::vector<Vec> hop_summaries;
};

StepOutput summarize_step(const Tape& tape, const DecoderContext& dctx, const StepVars& step);

/// Argmax of P_c over candidates typed `type`; falls back to the unrestricted
/// argmax when no candidate has positive mass. Ties go to the lower id.
TokenId resolve_entity(std::string_view type, const StepOutput& step, const Vocabulary& vocab,
                       const EntityLexicon& lexicon);

struct DecodeResult {
  std::vector<TokenId> sketch_ids;
  Tokens sketch;
  Tokens resolved;
  std::vector<StepOutput> steps;
};

DecodeResult decode_greedy(const Model& model, const PreparedSample& sample,
                           const Vocabulary& vocab, const EntityLexicon& lexicon,
                           std::size_t max_len, Exec exec = Exec::serial);

}  // namespace kbd
