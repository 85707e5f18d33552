#pragma once

// Corpus BLEU and entity F1 (set and multiset), micro-averaged.

#include <map>
#include <string>
#include <vector>

#include "kbdistill/corpus.hpp"

namespace kbd {

struct F1Ledger {
  std::size_t tp = 0;
  std::size_t pred_total = 0;
  std::size_t gold_total = 0;

  double precision() const;
  double recall() const;
  double f1() const;
  void add(const F1Ledger& o) {
    tp += o.tp;
    pred_total += o.pred_total;
    gold_total += o.gold_total;
  }
};

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  F1Ledger ledger;
};

/// TP per sample = sum over e of min(count_pred(e), count_gold(e)).
F1Ledger multiset_ledger(const Tokens& pred, const Tokens& gold);
/// TP per sample = |set(pred) & set(gold)|, totals are set sizes.
F1Ledger set_ledger(const Tokens& pred, const Tokens& gold);

PRF multiset_entity_f1(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds);
PRF entity_f1(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds);

/// Lexicon tokens of a response, in order, with multiplicity.
Tokens extract_entities(const Tokens& response, const EntityLexicon& lexicon);

/// Corpus BLEU-4, uniform weights, brevity penalty; 0 if any precision is 0.
double corpus_bleu(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds);

struct MetricReport {
  double bleu = 0.0;
  double entity_f1 = 0.0;
  double mse_f1 = 0.0;
  std::map<std::string, double> per_domain;  // domain -> mse_f1
  F1Ledger entity_ledger;
  F1Ledger mse_ledger;
  std::size_t samples = 0;

  /// Scores scaled by 100.
  nlohmann::json to_json() const;
};

/// Scores surface responses; `domains` may be empty.
MetricReport score_responses(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds,
                             const EntityLexicon& lexicon,
                             const std::vector<std::string>& domains = {});

}  // namespace kbd
