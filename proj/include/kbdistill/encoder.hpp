#pragma once

#include <random>
#include <vector>

#include "kbdistill/model.hpp"

namespace kbd {

/// Dropout settings for one forward pass; rate 0 (or no rng) disables it.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }
  Var apply(Tape& tape, Var v) const { return active() ? tape.dropout(v, rate, *rng) : v; }
};

struct ContextEncoding {
  Var word_states;                     // row-stacked, one hid_dim row per history token
  std::vector<Var> utterance_states;   // concatenated final forward/backward states
  Var context;                         // final state of the utterance-level GRU
  std::vector<TokenId> words;          // token id of each word_states row
  std::size_t positions = 0;
};

struct KBMemory {
  bool empty_kb = true;
  std::size_t records = 0;
  Var record_vectors;  // M x emb, r_m = sum of the record's value embeddings
  Var keys;            // distinct attribute types x emb
  Var values;          // one emb row per attribute, record-major
  std::vector<PreparedSample::Attribute> attributes;
  std::vector<std::vector<TokenId>> record_values;
  std::size_t key_count = 0;
};

/// Hierarchical encoder: a BiGRU per utterance, then a GRU over utterances.
ContextEncoding encode_context(Tape& tape, const Model& model,
                               const std::vector<std::vector<TokenId>>& history,
                               const DropoutContext& dropout = {});

/// Two-level KB memory. Empty KBs produce a memory with empty_kb set.
KBMemory encode_kb(Tape& tape, const Model& model, const PreparedSample& sample);

}  // namespace kbd
