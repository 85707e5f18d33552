#pragma once

// Training objectives: sketch generation, entity copy, record distillation
// and the same-type entity constraint.

#include <random>
#include <span>
#include <utility>
#include <vector>

#include "kbdistill/decoder.hpp"

namespace kbd {

inline constexpr Real kLogEps = 1e-12;

struct LossBreakdown {
  Real l_g = 0.0;
  Real l_c = 0.0;
  Real l_ec = 0.0;
  Real l_d = 0.0;
  Real total = 0.0;

  /// total = l_g + l_c + l_ec + l_d, summed in that order.
  void finalize() { total = l_g + l_c + l_ec + l_d; }
};

/// -sum_t log P_g(y_t). Throws ContractViolation when lengths differ.
Real loss_generate(std::span<const Vec> p_gen, std::span<const TokenId> gold);

/// -sum over masked t of log P_c(y_t); zero when nothing is masked.
Real loss_copy(std::span<const SparseDist> p_copy, std::span<const TokenId> gold,
               const std::vector<bool>& mask);

using IdPair = std::pair<std::uint32_t, std::uint32_t>;

/// Sum of cos(E[a], E[b]) over pairs.
Real loss_entity_constraint(const Param& table, std::span<const IdPair> pairs,
                            Exec exec = Exec::serial);
/// Adds scale * dL_ec/dE into grad (shaped like table).
void loss_entity_constraint_backward(const Param& table, std::span<const IdPair> pairs,
                                     Real scale, Vec& grad, Exec exec = Exec::serial);

/// -sum_m d*_m log d_m. Throws ContractViolation when sizes differ.
Real loss_distillation(std::span<const Real> d, std::span<const Real> dstar);

/// Same-type vocabulary id pairs among the KB values of a batch, capped at
/// max_pairs by uniform subsampling without replacement.
std::vector<IdPair> batch_entity_pairs(std::span<const DialogSample* const> batch,
                                       const EntityLexicon& lexicon, const Vocabulary& vocab,
                                       std::size_t max_pairs, std::mt19937_64& rng);

struct ForwardOptions {
  double teacher_forcing = 1.0;  // per-step probability of feeding the gold token
  DropoutContext dropout;
  std::mt19937_64* rng = nullptr;  // teacher forcing draws; null means always force
  const std::vector<TokenId>* sketch_override = nullptr;  // e.g. a DLD-modified target
};

struct SampleLosses {
  Var l_g;
  Var l_c;
  Var l_d;  // scalar zero for an empty KB
  std::vector<Var> p_gen;  // per step, including the end step
  std::vector<std::optional<Var>> p_copy_gold;  // per step, entity positions only
  std::optional<DistillationDistribution> distill;
};

/// Runs the encoder and decoder over one sample's gold target, appending the
/// end token to the sketch, and records L_g, L_c and L_d on the tape.
SampleLosses forward_losses(Tape& tape, const Model& model, const PreparedSample& sample,
                            const ForwardOptions& options = {});

}  // namespace kbd
