#include "kbdistill/decoder.hpp"

#include <algorithm>

#include "kbdistill/errors.hpp"

namespace kbd {

DecoderContext prepare_decoder(Tape& tape, const Model& model, const ContextEncoding& ctx,
                               const KBMemory& kb, const DistillationDistribution* pd) {
  DecoderContext d;
  d.context = &ctx;
  d.kb = &kb;
  d.word_proj = tape.affine_rows(*model.hop_word, ctx.word_states);
  d.kb_active = !kb.empty_kb;
  if (!d.kb_active) return d;
  if (pd == nullptr) throw ContractViolation("a nonempty KB needs a distillation distribution");
  d.distill_probs = pd->probs;
  d.record_proj = tape.affine_rows(*model.rec_r, kb.record_vectors);
  d.key_proj = tape.affine_rows(*model.key_k, kb.keys);
  for (const auto& a : kb.attributes) {
    d.attr_record.push_back(a.record);
    d.attr_key.push_back(a.key_slot);
  }
  return d;
}

Var initial_decoder_state(Tape& tape, const Model& model, const ContextEncoding& ctx) {
  return tape.tanh(tape.affine(*model.dec_init_w, ctx.context, model.dec_init_b));
}

StepVars decoder_step(Tape& tape, const Model& model, const DecoderContext& dctx, Var prev_hidden,
                      TokenId prev_token, const DropoutContext& dropout) {
  const ModelConfig& cfg = model.config;
  StepVars s;
  Var x = dropout.apply(tape, tape.embed(*model.embedding, prev_token));
  s.hidden = tape.gru(model.dec_gru, x, prev_hidden);

  Var q = tape.affine(*model.query_proj, s.hidden);
  for (int hop = 0; hop < cfg.hops; ++hop) {
    Var scores = tape.attention_scores(dctx.word_proj, tape.affine(*model.hop_query, q), *model.hop_v);
    s.hop_attention = tape.softmax(scores);
    Var g = tape.weighted_rows(s.hop_attention, dctx.context->word_states, cfg.hid_dim);
    s.hop_summaries.push_back(g);
    q = tape.add(q, g);
  }
  const Var g1 = s.hop_summaries.front();
  const Var gh = s.hop_summaries.back();

  s.p_gen = tape.softmax(tape.affine(*model.gen_w, tape.concat({s.hidden, g1}), model.gen_b));

  if (!dctx.kb_active) {
    s.alpha = tape.scalar_constant(0.0);
    return s;
  }
  Var rec_query = tape.add(tape.affine(*model.rec_g, gh), tape.affine(*model.rec_h, s.hidden));
  s.beta = tape.softmax(tape.attention_scores(dctx.record_proj, rec_query, *model.rec_v));
  Var key_query = tape.add(tape.affine(*model.key_g, gh), tape.affine(*model.key_h, s.hidden));
  s.gamma = tape.softmax(tape.attention_scores(dctx.key_proj, key_query, *model.key_v));

  Var joint = tape.mul(tape.mul(tape.gather(dctx.distill_probs, dctx.attr_record),
                                tape.gather(s.beta, dctx.attr_record)),
                       tape.gather(s.gamma, dctx.attr_key));
  s.p_kb_attr = tape.normalize(joint);

  Var record_weight = tape.mul(dctx.distill_probs, s.beta);
  Var kb_summary = tape.weighted_rows(record_weight, dctx.kb->record_vectors, cfg.emb_dim);
  s.alpha = tape.sigmoid(tape.affine(*model.gate_w, tape.concat({s.hidden, gh, kb_summary})));
  return s;
}

std::optional<Var> copy_probability(Tape& tape, const DecoderContext& dctx, const StepVars& step,
                                    TokenId w) {
  std::vector<std::uint32_t> con_idx;
  const auto& words = dctx.context->words;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == w) con_idx.push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<std::uint32_t> kb_idx;
  if (dctx.kb_active) {
    const auto& attrs = dctx.kb->attributes;
    for (std::size_t i = 0; i < attrs.size(); ++i) {
      if (attrs[i].value == w) kb_idx.push_back(static_cast<std::uint32_t>(i));
    }
  }
  std::optional<Var> out;
  if (!kb_idx.empty()) {
    Var pkb = tape.sum(tape.gather(step.p_kb_attr, std::move(kb_idx)));
    out = tape.mul(step.alpha, pkb);
  }
  if (!con_idx.empty()) {
    Var pcon = tape.sum(tape.gather(step.hop_attention, std::move(con_idx)));
    Var term = dctx.kb_active ? tape.mul(tape.one_minus(step.alpha), pcon) : pcon;
    out = out ? tape.add(*out, term) : term;
  }
  return out;
}

StepOutput summarize_step(const Tape& tape, const DecoderContext& dctx, const StepVars& step) {
  StepOutput o;
  o.p_gen = tape.value(step.p_gen);
  o.alpha = tape.scalar(step.alpha);
  for (Var g : step.hop_summaries) o.hop_summaries.push_back(tape.value(g));
  const Vec& a = tape.value(step.hop_attention);
  const auto& words = dctx.context->words;
  for (std::size_t i = 0; i < words.size(); ++i) o.p_con[words[i]] += a[i];
  if (dctx.kb_active) {
    const Vec& pk = tape.value(step.p_kb_attr);
    const auto& attrs = dctx.kb->attributes;
    for (std::size_t i = 0; i < attrs.size(); ++i) o.p_kb[attrs[i].value] += pk[i];
  }
  for (const auto& [w, p] : o.p_con) o.p_copy[w] += (1.0 - o.alpha) * p;
  for (const auto& [w, p] : o.p_kb) o.p_copy[w] += o.alpha * p;
  return o;
}

TokenId resolve_entity(std::string_view type, const StepOutput& step, const Vocabulary& vocab,
                       const EntityLexicon& lexicon) {
  std::optional<TokenId> best;
  Real best_p = 0.0;
  for (const auto& [w, p] : step.p_copy) {
    if (!(p > 0.0)) continue;
    auto t = lexicon.type_of(vocab.token(w));
    if (!t || *t != type) continue;
    if (!best || p > best_p) {
      best = w;
      best_p = p;
    }
  }
  if (best) return *best;
  for (const auto& [w, p] : step.p_copy) {
    if (!best || p > best_p) {
      best = w;
      best_p = p;
    }
  }
  return best.value_or(Vocabulary::kUnk);
}

DecodeResult decode_greedy(const Model& model, const PreparedSample& sample,
                           const Vocabulary& vocab, const EntityLexicon& lexicon,
                           std::size_t max_len, Exec exec) {
  Tape tape(nullptr, exec);
  const ContextEncoding ctx = encode_context(tape, model, sample.history);
  const KBMemory kb = encode_kb(tape, model, sample);
  std::optional<DistillationDistribution> pd;
  if (!kb.empty_kb) pd = distill(tape, model, ctx, kb);
  const DecoderContext dctx = prepare_decoder(tape, model, ctx, kb, pd ? &*pd : nullptr);

  DecodeResult out;
  Var h = initial_decoder_state(tape, model, ctx);
  TokenId prev = Vocabulary::kStart;
  for (std::size_t t = 0; t < max_len; ++t) {
    StepVars s = decoder_step(tape, model, dctx, h, prev);
    h = s.hidden;
    StepOutput so = summarize_step(tape, dctx, s);
    const auto& pg = so.p_gen;
    const TokenId next = static_cast<TokenId>(std::max_element(pg.begin(), pg.end()) - pg.begin());
    if (next == Vocabulary::kEnd) break;
    out.sketch_ids.push_back(next);
    const std::string& tok = vocab.token(next);
    out.sketch.push_back(tok);
    if (vocab.is_tag(next)) {
      out.resolved.push_back(vocab.token(resolve_entity(std::string_view(tok).substr(1), so, vocab, lexicon)));
    } else {
      out.resolved.push_back(tok);
    }
    out.steps.push_back(std::move(so));
    prev = next;
  }
  return out;
}

}  // namespace kbd
