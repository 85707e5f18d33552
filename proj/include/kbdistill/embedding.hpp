#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "kbdistill/corpus.hpp"
#include "kbdistill/tape.hpp"

namespace kbd {

/// Read-only view of the shared embedding matrix.
struct EmbeddingTable {
  const Param* matrix = nullptr;
  const Vocabulary* vocab = nullptr;

  std::size_t dim() const { return matrix->cols; }
  std::span<const Real> row(TokenId id) const { return {matrix->row(id), matrix->cols}; }
  std::optional<std::span<const Real>> row(std::string_view token) const;
};

/// Glorot-uniform rows from `seed`, then rows found in the pretrained text
/// file ("word v1 .. vd" per line) are copied verbatim. Returns how many
/// rows came from the file. A vector of the wrong width is a ConfigError.
std::size_t init_embeddings(Param& table, const Vocabulary& vocab,
                            const std::optional<std::filesystem::path>& pretrained,
                            std::uint64_t seed);

/// eps-guarded cosine similarity.
Real cosine(std::span<const Real> u, std::span<const Real> v);

struct TypeSimilarity {
  std::size_t entities = 0;
  std::size_t pairs = 0;
  Real mean = 0.0;
  Real max = 0.0;
};

struct SimilarityReport {
  std::map<std::string, TypeSimilarity> per_type;  // types with >= 2 embedded entities
  std::size_t total_pairs = 0;
  Real mean_pairwise = 0.0;  // over all same-type pairs

  nlohmann::json to_json() const;
};

SimilarityReport same_type_similarity_report(const EmbeddingTable& table,
                                             const EntityLexicon& lexicon);

/// Writes "entity<TAB>type<TAB>v1 .. vd" for every lexicon entity in the vocabulary.
void export_entity_embeddings(const EmbeddingTable& table, const EntityLexicon& lexicon,
                              const std::filesystem::path& out);

}  // namespace kbd
