#pragma once

// Parameter layout of the dialogue generator and the per-sample features
// the forward pass consumes.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kbdistill/corpus.hpp"
#include "kbdistill/tape.hpp"

namespace kbd {

enum class Scorer { pairwise, naive, entry_level };

Scorer parse_scorer(std::string_view name);
std::string_view scorer_name(Scorer s);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t emb_dim = 200;
  std::size_t hid_dim = 200;   // context word states; the BiGRU halves are hid_dim / 2
  std::size_t dec_dim = 100;
  std::size_t att_dim = 100;   // hidden width of the additive attention heads
  int hops = 3;
  Scorer scorer = Scorer::pairwise;
  bool unique_history_words = false;  // sum over word types instead of occurrences
  double dropout = 0.2;
};

struct Model {
  ModelConfig config;
  ParamStore params;

  Param* embedding = nullptr;
  GruParams enc_fwd, enc_bwd, context_gru, dec_gru;
  Param* dec_init_w = nullptr;
  Param* dec_init_b = nullptr;
  Param* query_proj = nullptr;  // hid x dec
  // context hop attention
  Param* hop_word = nullptr;   // att x hid
  Param* hop_query = nullptr;  // att x hid
  Param* hop_v = nullptr;      // 1 x att
  // generate head
  Param* gen_w = nullptr;  // V x (dec + hid)
  Param* gen_b = nullptr;  // V
  // record attention
  Param* rec_g = nullptr;  // att x hid
  Param* rec_h = nullptr;  // att x dec
  Param* rec_r = nullptr;  // att x emb
  Param* rec_v = nullptr;  // 1 x att
  // key attention
  Param* key_g = nullptr;
  Param* key_h = nullptr;
  Param* key_k = nullptr;
  Param* key_v = nullptr;
  // gate
  Param* gate_w = nullptr;  // 1 x (dec + hid + emb)
  // naive scorer projection (used only when emb_dim != hid_dim)
  Param* naive_proj = nullptr;  // emb x hid
  // entry-level scorer
  Param* entry_c = nullptr;  // att x hid
  Param* entry_v = nullptr;  // att x emb
  Param* entry_out = nullptr;  // 1 x att

  /// Allocates every parameter and draws Glorot-uniform weights (zero biases).
  static Model create(const ModelConfig& config, std::uint64_t seed);
};

/// Fills a parameter from U(-b, b), b = sqrt(6 / (fan_in + fan_out)).
void glorot_uniform(Param& p, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// A DialogSample mapped onto vocabulary ids.
struct PreparedSample {
  std::vector<std::vector<TokenId>> history;  // per utterance
  std::vector<TokenId> history_flat;
  struct Attribute {
    std::uint32_t record = 0;
    std::uint32_t key_slot = 0;  // index into key_ids
    TokenId value = 0;
  };
  std::vector<Attribute> attributes;              // record-major
  std::vector<std::vector<TokenId>> record_values;
  std::vector<TokenId> key_ids;                   // distinct attribute types in this KB
  std::vector<TokenId> sketch;                    // gold sketch ids
  std::vector<TokenId> response;                  // gold surface ids
  std::vector<bool> entity_mask;                  // sketch position holds a tag
  std::vector<double> reference_counts;           // s*_m
  std::string domain;

  std::size_t records() const { return record_values.size(); }
  bool empty_kb() const { return record_values.empty(); }
};

/// Throws VocabularyError when an attribute type is not in the vocabulary.
PreparedSample prepare_sample(const DialogSample& sample, const Vocabulary& vocab);

}  // namespace kbd
