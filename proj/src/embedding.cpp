#include "kbdistill/embedding.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "kbdistill/errors.hpp"
#include "kbdistill/model.hpp"

namespace kbd {

std::optional<std::span<const Real>> EmbeddingTable::row(std::string_view token) const {
  auto id = vocab->find(token);
  if (!id) return std::nullopt;
  return row(*id);
}

std::size_t init_embeddings(Param& table, const Vocabulary& vocab,
                            const std::optional<std::filesystem::path>& pretrained,
                            std::uint64_t seed) {
  if (table.rows != vocab.size()) {
    throw ConfigError("embedding rows (" + std::to_string(table.rows) +
                      ") differ from vocabulary size (" + std::to_string(vocab.size()) + ")");
  }
  std::mt19937_64 rng(seed);
  glorot_uniform(table, table.cols, table.cols, rng);
  if (!pretrained) return 0;

  std::ifstream in(*pretrained);
  if (!in) throw ConfigError("cannot open pretrained vectors: " + pretrained->string());
  std::size_t copied = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<Real> v;
    Real x;
    while (ls >> x) v.push_back(x);
    if (v.size() != table.cols) {
      throw ConfigError("pretrained vector on line " + std::to_string(line_no) + " has " +
                        std::to_string(v.size()) + " values, expected " + std::to_string(table.cols));
    }
    if (auto id = vocab.find(word)) {
      std::copy(v.begin(), v.end(), table.row(*id));
      ++copied;
    }
  }
  return copied;
}

Real cosine(std::span<const Real> u, std::span<const Real> v) {
  if (u.size() != v.size()) throw ContractViolation("cosine of vectors with different sizes");
  return kernels::cosine(u.data(), v.data(), u.size());
}

nlohmann::json SimilarityReport::to_json() const {
  nlohmann::json types = nlohmann::json::object();
  for (const auto& [type, s] : per_type) {
    types[type] = {{"entities", s.entities}, {"pairs", s.pairs}, {"mean_cosine", s.mean},
                   {"max_cosine", s.max}};
  }
  return {{"per_type", types}, {"total_pairs", total_pairs}, {"mean_pairwise_cosine", mean_pairwise}};
}

SimilarityReport same_type_similarity_report(const EmbeddingTable& table,
                                             const EntityLexicon& lexicon) {
  if (lexicon.size() == 0) throw ContractViolation("similarity report needs a nonempty lexicon");
  SimilarityReport report;
  Real grand = 0.0;
  for (const auto& [type, values] : lexicon.by_type()) {
    std::vector<std::span<const Real>> rows;
    for (const auto& v : values) {
      if (auto r = table.row(v)) rows.push_back(*r);
    }
    if (rows.size() < 2) continue;
    TypeSimilarity s;
    s.entities = rows.size();
    s.max = -std::numeric_limits<Real>::infinity();
    Real acc = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = i + 1; j < rows.size(); ++j) {
        const Real c = cosine(rows[i], rows[j]);
        acc += c;
        s.max = std::max(s.max, c);
        ++s.pairs;
      }
    }
    s.mean = acc / static_cast<Real>(s.pairs);
    grand += acc;
    report.total_pairs += s.pairs;
    report.per_type.emplace(type, s);
  }
  report.mean_pairwise = report.total_pairs > 0 ? grand / static_cast<Real>(report.total_pairs) : 0.0;
  return report;
}

void export_entity_embeddings(const EmbeddingTable& table, const EntityLexicon& lexicon,
                              const std::filesystem::path& out) {
  std::ofstream os(out);
  if (!os) throw ConfigError("cannot write embedding export: " + out.string());
  os << std::setprecision(9);
  for (const auto& [type, values] : lexicon.by_type()) {
    for (const auto& v : values) {
      auto r = table.row(v);
      if (!r) continue;
      os << v << '\t' << type;
      for (Real x : *r) os << '\t' << x;
      os << '\n';
    }
  }
}

}  // namespace kbd
