#include "kbdistill/distill.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "kbdistill/errors.hpp"

namespace kbd {

namespace {

void require_records(const KBMemory& kb) {
  if (kb.empty_kb || kb.records == 0) {
    throw ContractViolation("distillation over an empty KB; mask the KB pointer instead");
  }
}

}  // namespace

DistillationDistribution distill_pairwise(Tape& tape, const Model& model,
                                          const std::vector<TokenId>& history_flat,
                                          const KBMemory& kb) {
  require_records(kb);
  std::map<TokenId, double> counts;
  for (TokenId w : history_flat) counts[w] += 1.0;
  kernels::WeightedIds hist;
  for (const auto& [id, n] : counts) {
    hist.ids.push_back(id);
    hist.weights.push_back(model.config.unique_history_words ? 1.0 : n);
  }
  const Param* table = model.embedding;
  const kernels::TableView view{table->value.data(), table->rows, table->cols};
  Vec scores = kernels::record_scores(tape.exec(), view, hist, kb.record_values);
  auto records = kb.record_values;
  Var s = tape.push(std::move(scores), "pairwise_scores",
                    [table, hist, records](Tape& t, const Vec& g) {
                      const kernels::TableView v{table->value.data(), table->rows, table->cols};
                      kernels::record_scores_backward(t.exec(), v, hist, records, g,
                                                      t.param_grad(*table).data());
                    });
  return {s, tape.softmax(s)};
}

DistillationDistribution distill_naive(Tape& tape, const Model& model, const KBMemory& kb,
                                       Var context) {
  require_records(kb);
  Var c = context;
  if (model.config.emb_dim != model.config.hid_dim) c = tape.affine(*model.naive_proj, context);
  Var s = tape.rows_dot(kb.record_vectors, c);
  return {s, tape.softmax(s)};
}

DistillationDistribution distill_entry_attention(Tape& tape, const Model& model,
                                                 const KBMemory& kb, Var context) {
  require_records(kb);
  Var keys = tape.affine_rows(*model.entry_v, kb.values);
  Var query = tape.affine(*model.entry_c, context);
  Var per_attribute = tape.attention_scores(keys, query, *model.entry_out);
  std::vector<std::uint32_t> segment;
  segment.reserve(kb.attributes.size());
  for (const auto& a : kb.attributes) segment.push_back(a.record);
  Var s = tape.segment_sum(per_attribute, std::move(segment), kb.records);
  return {s, tape.softmax(s)};
}

DistillationDistribution distill(Tape& tape, const Model& model, const ContextEncoding& ctx,
                                 const KBMemory& kb) {
  switch (model.config.scorer) {
    case Scorer::pairwise: return distill_pairwise(tape, model, ctx.words, kb);
    case Scorer::naive: return distill_naive(tape, model, kb, ctx.context);
    case Scorer::entry_level: return distill_entry_attention(tape, model, kb, ctx.context);
  }
  throw ContractViolation("unknown scorer");
}

std::vector<double> reference_counts(const DialogSample& sample) {
  std::vector<std::set<std::string>> values(sample.kb.size());
  for (std::size_t m = 0; m < sample.kb.size(); ++m) {
    for (const auto& a : sample.kb[m].attributes) values[m].insert(a.value);
  }
  std::vector<double> counts(sample.kb.size(), 0.0);
  auto tally = [&](const Tokens& toks) {
    for (const auto& tok : toks) {
      for (std::size_t m = 0; m < values.size(); ++m) {
        if (values[m].contains(tok)) counts[m] += 1.0;
      }
    }
  };
  for (const auto& u : sample.history) tally(u.tokens);
  tally(sample.gold_response);
  return counts;
}

ReferenceDistribution reference_from_counts(std::vector<double> counts) {
  ReferenceDistribution ref;
  ref.counts = std::move(counts);
  const std::size_t m = ref.counts.size();
  double total = 0.0;
  for (double c : ref.counts) total += c;
  ref.probs.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    ref.probs[i] = total > 0.0 ? ref.counts[i] / total : 1.0 / static_cast<double>(m);
  }
  return ref;
}

ReferenceDistribution reference_distribution(const DialogSample& sample) {
  return reference_from_counts(reference_counts(sample));
}

}  // namespace kbd
