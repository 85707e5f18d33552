#include "kbdistill/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kbdistill/errors.hpp"

namespace kbd {

namespace {

Real clamped_log(Real p) { return std::log(std::max(p, kLogEps)); }

kernels::TableView view_of(const Param& p) { return {p.value.data(), p.rows, p.cols}; }

Var negated_sum(Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) return tape.scalar_constant(0.0);
  Var total = tape.sum(tape.concat(std::span<const Var>(terms)));
  return tape.scale(total, tape.scalar_constant(-1.0));
}

}  // namespace

Real loss_generate(std::span<const Vec> p_gen, std::span<const TokenId> gold) {
  if (p_gen.size() != gold.size()) {
    throw ContractViolation("loss_generate: " + std::to_string(p_gen.size()) + " steps vs " +
                            std::to_string(gold.size()) + " targets");
  }
  Real loss = 0.0;
  for (std::size_t t = 0; t < gold.size(); ++t) loss -= clamped_log(p_gen[t].at(gold[t]));
  return loss;
}

Real loss_copy(std::span<const SparseDist> p_copy, std::span<const TokenId> gold,
               const std::vector<bool>& mask) {
  if (p_copy.size() != gold.size() || mask.size() != gold.size()) {
    throw ContractViolation("loss_copy: step, target and mask lengths differ");
  }
  Real loss = 0.0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (!mask[t]) continue;
    auto it = p_copy[t].find(gold[t]);
    loss -= clamped_log(it == p_copy[t].end() ? 0.0 : it->second);
  }
  return loss;
}

Real loss_entity_constraint(const Param& table, std::span<const IdPair> pairs, Exec exec) {
  return kernels::pair_cosine_sum(exec, view_of(table), pairs);
}

void loss_entity_constraint_backward(const Param& table, std::span<const IdPair> pairs,
                                     Real scale, Vec& grad, Exec exec) {
  if (grad.size() != table.value.size()) grad.assign(table.value.size(), 0.0);
  kernels::pair_cosine_sum_backward(exec, view_of(table), pairs, scale, grad.data());
}

Real loss_distillation(std::span<const Real> d, std::span<const Real> dstar) {
  if (d.size() != dstar.size()) {
    throw ContractViolation("loss_distillation: " + std::to_string(d.size()) + " records vs " +
                            std::to_string(dstar.size()) + " in the reference");
  }
  Real loss = 0.0;
  for (std::size_t m = 0; m < d.size(); ++m) loss -= dstar[m] * clamped_log(d[m]);
  return loss;
}

std::vector<IdPair> batch_entity_pairs(std::span<const DialogSample* const> batch,
                                       const EntityLexicon& lexicon, const Vocabulary& vocab,
                                       std::size_t max_pairs, std::mt19937_64& rng) {
  std::set<std::string> values;
  for (const DialogSample* s : batch) {
    for (const auto& rec : s->kb) {
      for (const auto& a : rec.attributes) values.insert(a.value);
    }
  }
  std::vector<IdPair> pairs;
  for (const auto& [a, b] : same_type_pairs(lexicon, values)) {
    auto ia = vocab.find(a);
    auto ib = vocab.find(b);
    if (!ia || !ib || *ia == *ib) continue;
    pairs.emplace_back(std::min(*ia, *ib), std::max(*ia, *ib));
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  if (pairs.size() > max_pairs) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(max_pairs);
    std::sort(pairs.begin(), pairs.end());
  }
  return pairs;
}

SampleLosses forward_losses(Tape& tape, const Model& model, const PreparedSample& sample,
                            const ForwardOptions& options) {
  SampleLosses out;
  const ContextEncoding ctx = encode_context(tape, model, sample.history, options.dropout);
  const KBMemory kb = encode_kb(tape, model, sample);
  if (!kb.empty_kb) out.distill = distill(tape, model, ctx, kb);
  const DecoderContext dctx =
      prepare_decoder(tape, model, ctx, kb, out.distill ? &*out.distill : nullptr);

  std::vector<TokenId> target =
      options.sketch_override ? *options.sketch_override : sample.sketch;
  if (target.size() != sample.sketch.size()) {
    throw ContractViolation("sketch override length differs from the gold sketch");
  }
  target.push_back(Vocabulary::kEnd);

  std::bernoulli_distribution force(options.teacher_forcing);
  std::vector<Var> gen_terms;
  std::vector<Var> copy_terms;
  Var h = initial_decoder_state(tape, model, ctx);
  TokenId prev = Vocabulary::kStart;
  for (std::size_t t = 0; t < target.size(); ++t) {
    StepVars s = decoder_step(tape, model, dctx, h, prev, options.dropout);
    h = s.hidden;
    out.p_gen.push_back(s.p_gen);
    gen_terms.push_back(tape.log_clamped(tape.gather(s.p_gen, {target[t]}), kLogEps));

    std::optional<Var> pc;
    if (t < sample.entity_mask.size() && sample.entity_mask[t]) {
      pc = copy_probability(tape, dctx, s, sample.response[t]);
      copy_terms.push_back(pc ? tape.log_clamped(*pc, kLogEps)
                              : tape.scalar_constant(std::log(kLogEps)));
    }
    out.p_copy_gold.push_back(pc);

    const bool teacher = options.rng == nullptr || force(*options.rng);
    if (teacher) {
      prev = target[t];
    } else {
      const Vec& p = tape.value(s.p_gen);
      prev = static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
    }
  }
  out.l_g = negated_sum(tape, gen_terms);
  out.l_c = negated_sum(tape, copy_terms);

  if (out.distill) {
    const ReferenceDistribution ref = reference_from_counts(sample.reference_counts);
    if (ref.probs.size() != kb.records) {
      throw ContractViolation("reference distribution does not match the KB size");
    }
    Var logd = tape.log_clamped(out.distill->probs, kLogEps);
    out.l_d = tape.scale(tape.dot(tape.constant(ref.probs), logd), tape.scalar_constant(-1.0));
  } else {
    out.l_d = tape.scalar_constant(0.0);
  }
  return out;
}

}  // namespace kbd
