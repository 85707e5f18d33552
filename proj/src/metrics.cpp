#include "kbdistill/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "kbdistill/errors.hpp"

namespace kbd {

double F1Ledger::precision() const {
  return pred_total == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(pred_total);
}

double F1Ledger::recall() const {
  return gold_total == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(gold_total);
}

double F1Ledger::f1() const {
  const double p = precision();
  const double r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

namespace {

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ContractViolation(std::string(what) + ": " + std::to_string(a) + " predictions vs " +
                            std::to_string(b) + " references");
  }
}

PRF finish(const F1Ledger& l) { return {l.precision(), l.recall(), l.f1(), l}; }

}  // namespace

F1Ledger multiset_ledger(const Tokens& pred, const Tokens& gold) {
  std::map<std::string, std::size_t> gold_counts;
  for (const auto& e : gold) ++gold_counts[e];
  F1Ledger l;
  l.pred_total = pred.size();
  l.gold_total = gold.size();
  for (const auto& e : pred) {
    auto it = gold_counts.find(e);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++l.tp;
    }
  }
  return l;
}

F1Ledger set_ledger(const Tokens& pred, const Tokens& gold) {
  const std::set<std::string> p(pred.begin(), pred.end());
  const std::set<std::string> g(gold.begin(), gold.end());
  F1Ledger l;
  l.pred_total = p.size();
  l.gold_total = g.size();
  for (const auto& e : p) l.tp += g.contains(e) ? 1 : 0;
  return l;
}

PRF multiset_entity_f1(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds) {
  require_aligned(preds.size(), golds.size(), "multiset_entity_f1");
  F1Ledger total;
  for (std::size_t i = 0; i < preds.size(); ++i) total.add(multiset_ledger(preds[i], golds[i]));
  return finish(total);
}

PRF entity_f1(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds) {
  require_aligned(preds.size(), golds.size(), "entity_f1");
  F1Ledger total;
  for (std::size_t i = 0; i < preds.size(); ++i) total.add(set_ledger(preds[i], golds[i]));
  return finish(total);
}

Tokens extract_entities(const Tokens& response, const EntityLexicon& lexicon) {
  Tokens out;
  for (const auto& tok : response) {
    if (lexicon.contains(tok)) out.push_back(tok);
  }
  return out;
}

double corpus_bleu(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds) {
  require_aligned(preds.size(), golds.size(), "corpus_bleu");
  constexpr int kOrder = 4;
  std::array<std::size_t, kOrder> matched{};
  std::array<std::size_t, kOrder> total{};
  std::size_t pred_len = 0;
  std::size_t ref_len = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Tokens& p = preds[i];
    const Tokens& g = golds[i];
    pred_len += p.size();
    ref_len += g.size();
    for (int n = 1; n <= kOrder; ++n) {
      std::map<Tokens, std::size_t> ref_counts;
      for (std::size_t k = 0; k + n <= g.size(); ++k) {
        ++ref_counts[Tokens(g.begin() + k, g.begin() + k + n)];
      }
      for (std::size_t k = 0; k + n <= p.size(); ++k) {
        ++total[n - 1];
        auto it = ref_counts.find(Tokens(p.begin() + k, p.begin() + k + n));
        if (it != ref_counts.end() && it->second > 0) {
          --it->second;
          ++matched[n - 1];
        }
      }
    }
  }
  double log_sum = 0.0;
  for (int n = 0; n < kOrder; ++n) {
    if (matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp = pred_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(pred_len));
  return bp * std::exp(log_sum / kOrder);
}

nlohmann::json MetricReport::to_json() const {
  auto ledger = [](const F1Ledger& l) {
    return nlohmann::json{{"tp", l.tp}, {"pred_total", l.pred_total}, {"gold_total", l.gold_total}};
  };
  nlohmann::json domains = nlohmann::json::object();
  for (const auto& [d, v] : per_domain) domains[d] = 100.0 * v;
  return {{"bleu", 100.0 * bleu},
          {"entity_f1", 100.0 * entity_f1},
          {"mse_f1", 100.0 * mse_f1},
          {"per_domain", domains},
          {"samples", samples},
          {"ledgers", {{"entity_f1", ledger(entity_ledger)}, {"mse_f1", ledger(mse_ledger)}}}};
}

MetricReport score_responses(const std::vector<Tokens>& preds, const std::vector<Tokens>& golds,
                             const EntityLexicon& lexicon,
                             const std::vector<std::string>& domains) {
  require_aligned(preds.size(), golds.size(), "score_responses");
  if (!domains.empty()) require_aligned(domains.size(), golds.size(), "score_responses domains");
  MetricReport r;
  r.samples = preds.size();
  std::vector<Tokens> pe;
  std::vector<Tokens> ge;
  std::map<std::string, F1Ledger> by_domain;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    pe.push_back(extract_entities(preds[i], lexicon));
    ge.push_back(extract_entities(golds[i], lexicon));
    if (!domains.empty()) by_domain[domains[i]].add(multiset_ledger(pe.back(), ge.back()));
  }
  const PRF ms = multiset_entity_f1(pe, ge);
  const PRF st = entity_f1(pe, ge);
  r.mse_f1 = ms.f1;
  r.mse_ledger = ms.ledger;
  r.entity_f1 = st.f1;
  r.entity_ledger = st.ledger;
  r.bleu = preds.empty() ? 0.0 : corpus_bleu(preds, golds);
  for (const auto& [d, l] : by_domain) r.per_domain[d] = l.f1();
  return r;
}

}  // namespace kbd
