#include "kbdistill/model.hpp"

#include <cmath>

#include "kbdistill/distill.hpp"
#include "kbdistill/errors.hpp"

namespace kbd {

Scorer parse_scorer(std::string_view name) {
  if (name == "pairwise") return Scorer::pairwise;
  if (name == "naive") return Scorer::naive;
  if (name == "entry_level") return Scorer::entry_level;
  throw ConfigError("unknown scorer: " + std::string(name));
}

std::string_view scorer_name(Scorer s) {
  switch (s) {
    case Scorer::pairwise: return "pairwise";
    case Scorer::naive: return "naive";
    case Scorer::entry_level: return "entry_level";
  }
  return "pairwise";
}

void glorot_uniform(Param& p, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : p.value) x = dist(rng);
}

namespace {

GruParams make_gru(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                   std::mt19937_64& rng) {
  Param& wx = store.add(name + ".wx", 3 * hidden, in);
  Param& wh = store.add(name + ".wh", 3 * hidden, hidden);
  Param& bx = store.add(name + ".bx", 3 * hidden, 1);
  Param& bh = store.add(name + ".bh", 3 * hidden, 1);
  glorot_uniform(wx, in, hidden, rng);
  glorot_uniform(wh, hidden, hidden, rng);
  return GruParams{&wx, &wh, &bx, &bh, hidden};
}

Param* make_weight(ParamStore& store, const std::string& name, std::size_t rows, std::size_t cols,
                   std::mt19937_64& rng) {
  Param& p = store.add(name, rows, cols);
  glorot_uniform(p, cols, rows, rng);
  return &p;
}

}  // namespace

Model Model::create(const ModelConfig& c, std::uint64_t seed) {
  if (c.vocab_size == 0 || c.emb_dim == 0 || c.dec_dim == 0 || c.att_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (c.hid_dim == 0 || c.hid_dim % 2 != 0) throw ConfigError("hid_dim must be even and positive");
  if (c.hops < 1) throw ConfigError("hops must be >= 1");

  Model m;
  m.config = c;
  std::mt19937_64 rng(seed);
  ParamStore& s = m.params;

  m.embedding = &s.add("embedding", c.vocab_size, c.emb_dim);
  glorot_uniform(*m.embedding, c.emb_dim, c.emb_dim, rng);

  const std::size_t half = c.hid_dim / 2;
  m.enc_fwd = make_gru(s, "enc_fwd", c.emb_dim, half, rng);
  m.enc_bwd = make_gru(s, "enc_bwd", c.emb_dim, half, rng);
  m.context_gru = make_gru(s, "context_gru", c.hid_dim, c.hid_dim, rng);
  m.dec_gru = make_gru(s, "dec_gru", c.emb_dim, c.dec_dim, rng);

  m.dec_init_w = make_weight(s, "dec_init.w", c.dec_dim, c.hid_dim, rng);
  m.dec_init_b = &s.add("dec_init.b", c.dec_dim, 1);
  m.query_proj = make_weight(s, "query_proj", c.hid_dim, c.dec_dim, rng);

  m.hop_word = make_weight(s, "hop.word", c.att_dim, c.hid_dim, rng);
  m.hop_query = make_weight(s, "hop.query", c.att_dim, c.hid_dim, rng);
  m.hop_v = make_weight(s, "hop.v", 1, c.att_dim, rng);

  m.gen_w = make_weight(s, "gen.w", c.vocab_size, c.dec_dim + c.hid_dim, rng);
  m.gen_b = &s.add("gen.b", c.vocab_size, 1);

  m.rec_g = make_weight(s, "rec.g", c.att_dim, c.hid_dim, rng);
  m.rec_h = make_weight(s, "rec.h", c.att_dim, c.dec_dim, rng);
  m.rec_r = make_weight(s, "rec.r", c.att_dim, c.emb_dim, rng);
  m.rec_v = make_weight(s, "rec.v", 1, c.att_dim, rng);

  m.key_g = make_weight(s, "key.g", c.att_dim, c.hid_dim, rng);
  m.key_h = make_weight(s, "key.h", c.att_dim, c.dec_dim, rng);
  m.key_k = make_weight(s, "key.k", c.att_dim, c.emb_dim, rng);
  m.key_v = make_weight(s, "key.v", 1, c.att_dim, rng);

  m.gate_w = make_weight(s, "gate.w", 1, c.dec_dim + c.hid_dim + c.emb_dim, rng);

  m.naive_proj = make_weight(s, "naive.proj", c.emb_dim, c.hid_dim, rng);
  m.entry_c = make_weight(s, "entry.c", c.att_dim, c.hid_dim, rng);
  m.entry_v = make_weight(s, "entry.v", c.att_dim, c.emb_dim, rng);
  m.entry_out = make_weight(s, "entry.out", 1, c.att_dim, rng);
  return m;
}

PreparedSample prepare_sample(const DialogSample& sample, const Vocabulary& vocab) {
  PreparedSample p;
  for (const auto& u : sample.history) {
    p.history.push_back(vocab.encode(u.tokens));
    p.history_flat.insert(p.history_flat.end(), p.history.back().begin(), p.history.back().end());
  }
  for (std::size_t m = 0; m < sample.kb.size(); ++m) {
    std::vector<TokenId> values;
    for (const auto& a : sample.kb[m].attributes) {
      auto key = vocab.find(a.key);
      if (!key) throw VocabularyError("attribute type '" + a.key + "' missing from vocabulary");
      std::uint32_t slot = 0;
      while (slot < p.key_ids.size() && p.key_ids[slot] != *key) ++slot;
      if (slot == p.key_ids.size()) p.key_ids.push_back(*key);
      const TokenId value = vocab.id(a.value);
      p.attributes.push_back({static_cast<std::uint32_t>(m), slot, value});
      values.push_back(value);
    }
    p.record_values.push_back(std::move(values));
  }
  p.sketch = vocab.encode(sample.gold_sketch);
  p.response = vocab.encode(sample.gold_response);
  p.entity_mask.resize(p.sketch.size());
  for (std::size_t t = 0; t < p.sketch.size(); ++t) {
    p.entity_mask[t] = sample.gold_sketch[t] != sample.gold_response[t];
  }
  p.reference_counts = reference_counts(sample);
  p.domain = sample.domain;
  return p;
}

}  // namespace kbd
