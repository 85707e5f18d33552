#include "kbdistill/encoder.hpp"

#include "kbdistill/errors.hpp"

namespace kbd {

ContextEncoding encode_context(Tape& tape, const Model& model,
                               const std::vector<std::vector<TokenId>>& history,
                               const DropoutContext& dropout) {
  const ModelConfig& cfg = model.config;
  const std::size_t half = cfg.hid_dim / 2;
  ContextEncoding enc;
  std::vector<Var> rows;
  for (const auto& utt : history) {
    if (utt.empty()) continue;
    std::vector<Var> emb;
    emb.reserve(utt.size());
    for (TokenId id : utt) emb.push_back(dropout.apply(tape, tape.embed(*model.embedding, id)));

    std::vector<Var> fwd(utt.size()), bwd(utt.size());
    Var h = tape.constant(Vec(half, 0.0));
    for (std::size_t j = 0; j < utt.size(); ++j) fwd[j] = h = tape.gru(model.enc_fwd, emb[j], h);
    h = tape.constant(Vec(half, 0.0));
    for (std::size_t j = utt.size(); j-- > 0;) bwd[j] = h = tape.gru(model.enc_bwd, emb[j], h);

    for (std::size_t j = 0; j < utt.size(); ++j) {
      rows.push_back(dropout.apply(tape, tape.concat({fwd[j], bwd[j]})));
      enc.words.push_back(utt[j]);
    }
    enc.utterance_states.push_back(tape.concat({fwd.back(), bwd.front()}));
  }
  if (rows.empty()) throw ContractViolation("encode_context needs a nonempty history");
  enc.positions = rows.size();
  enc.word_states = tape.concat(rows);

  Var c = tape.constant(Vec(cfg.hid_dim, 0.0));
  for (Var u : enc.utterance_states) c = tape.gru(model.context_gru, u, c);
  enc.context = dropout.apply(tape, c);
  return enc;
}

KBMemory encode_kb(Tape& tape, const Model& model, const PreparedSample& sample) {
  KBMemory kb;
  kb.records = sample.records();
  kb.empty_kb = sample.empty_kb();
  kb.attributes = sample.attributes;
  kb.record_values = sample.record_values;
  kb.key_count = sample.key_ids.size();
  if (kb.empty_kb) return kb;

  std::vector<Var> value_rows;
  std::vector<Var> record_rows;
  for (const auto& values : sample.record_values) {
    Var sum;
    for (TokenId v : values) {
      Var e = tape.embed(*model.embedding, v);
      value_rows.push_back(e);
      sum = sum.valid() ? tape.add(sum, e) : e;
    }
    if (!sum.valid()) sum = tape.constant(Vec(model.config.emb_dim, 0.0));
    record_rows.push_back(sum);
  }
  std::vector<Var> key_rows;
  for (TokenId k : sample.key_ids) key_rows.push_back(tape.embed(*model.embedding, k));
  kb.values = tape.concat(value_rows);
  kb.record_vectors = tape.concat(record_rows);
  kb.keys = tape.concat(key_rows);
  return kb;
}

}  // namespace kbd
