// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "kbdistill/decoder.hpp"
#include "kbdistill/embedding.hpp"
#include "kbdistill/losses.hpp"
#include "synthetic.hpp"

using namespace kbd;
using namespace kbd::testing;
namespace fs = std::filesystem;

namespace {

constexpr double kF1Tol = 1e-9;
constexpr double kProbTol = 1e-6;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradPassRate = 0.99;
constexpr double kOverfitBleu = 95.0;
constexpr double kOverfitPd = 0.8;
constexpr int kOverfitEpochs = 300;
constexpr int kAblationSeeds = 5;
constexpr int kAblationEpochs = 60;
constexpr double kCosineGap = 0.1;

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = seconds_since(t0);
  if (limit_s > 0 && secs > limit_s) o.require(false, "runtime " + std::to_string(secs) + "s over limit");
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << " (" << std::fixed;
  std::cout.precision(1);
  std::cout << secs << "s)";
  std::cout.unsetf(std::ios::fixed);
  std::cout.precision(6);
  if (!o.detail.empty()) std::cout << ": " << o.detail;
  std::cout << std::endl;
  return o.pass;
}

// ---------------------------------------------------------------- 1

Outcome metric_oracle() {
  Outcome o;
  std::mt19937_64 rng(1001);
  auto uni = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const std::vector<std::string> pool = {"e0", "e1", "e2", "e3", "e4", "e5", "e6", "e7", "e8", "e9"};
  auto draw = [&](int max_mult) {
    Tokens t;
    const int distinct = uni(0, 10);
    std::vector<std::string> p = pool;
    std::shuffle(p.begin(), p.end(), rng);
    for (int i = 0; i < distinct; ++i)
      for (int k = uni(1, max_mult); k > 0; --k) t.push_back(p[i]);
    std::shuffle(t.begin(), t.end(), rng);
    return t;
  };
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Tokens> preds, golds;
    const int n = uni(1, 4);
    double tp = 0, np = 0, ng = 0;
    for (int i = 0; i < n; ++i) {
      preds.push_back(draw(4));
      golds.push_back(draw(4));
      for (const auto& e : pool) {
        const double cp = std::count(preds.back().begin(), preds.back().end(), e);
        const double cg = std::count(golds.back().begin(), golds.back().end(), e);
        tp += std::min(cp, cg);
      }
      np += preds.back().size();
      ng += golds.back().size();
    }
    const double pr = np > 0 ? tp / np : 0.0;
    const double rc = ng > 0 ? tp / ng : 0.0;
    const double f1 = pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0.0;
    const PRF got = multiset_entity_f1(preds, golds);
    if (got.f1 != f1 || got.ledger.tp != tp || got.ledger.pred_total != np || got.ledger.gold_total != ng)
      ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " oracle mismatches");

  const Tokens gold = {"8th", "11am", "wednesday", "11am"};
  const double f_a = multiset_entity_f1({{"8th", "11am"}}, {gold}).f1;
  const double f_b = multiset_entity_f1({{"8th", "8th", "8th", "8th"}}, {gold}).f1;
  o.require(std::abs(f_a - 2.0 / 3.0) <= kF1Tol, "pred-1 f1 " + std::to_string(f_a));
  o.require(std::abs(f_b - 0.25) <= kF1Tol, "pred-2 f1 " + std::to_string(f_b));

  int unequal = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Tokens> preds = {draw(1), draw(1)};
    std::vector<Tokens> golds = {draw(1), draw(1)};
    if (multiset_entity_f1(preds, golds).f1 != entity_f1(preds, golds).f1) ++unequal;
  }
  o.require(unequal == 0, std::to_string(unequal) + " multiplicity-1 cases differ from set F1");
  if (o.pass) o.detail = "1000 oracle instances, pred-1 " + std::to_string(f_a) + ", pred-2 " + std::to_string(f_b);
  return o;
}

// ---------------------------------------------------------------- 2

double mass(const SparseDist& d) {
  double s = 0;
  for (const auto& [k, v] : d) s += v;
  return s;
}

Outcome distribution_invariants() {
  Outcome o;
  std::mt19937_64 rng(2002);
  int bad_sum = 0, bad_mix = 0, bad_perm = 0, checked_perm = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const bool empty = trial % 10 == 9;
    auto f = random_fixture(rng, static_cast<Scorer>(trial % 3), 1 + 2 * (trial % 3), empty);
    Tape t;
    const auto ctx = encode_context(t, f.model, f.prepared.history);
    const auto kb = encode_kb(t, f.model, f.prepared);
    std::optional<DistillationDistribution> pd;
    if (!kb.empty_kb) pd = distill(t, f.model, ctx, kb);
    const auto dctx = prepare_decoder(t, f.model, ctx, kb, pd ? &*pd : nullptr);
    Var h = initial_decoder_state(t, f.model, ctx);
    TokenId prev = Vocabulary::kStart;
    for (int step = 0; step < 3; ++step) {
      const StepVars sv = decoder_step(t, f.model, dctx, h, prev);
      const StepOutput out = summarize_step(t, dctx, sv);
      const double pg = std::accumulate(out.p_gen.begin(), out.p_gen.end(), 0.0);
      bad_sum += std::abs(pg - 1.0) > kProbTol;
      bad_sum += std::abs(mass(out.p_con) - 1.0) > kProbTol;
      bad_sum += std::abs(mass(out.p_copy) - 1.0) > kProbTol;
      if (!empty) bad_sum += std::abs(mass(out.p_kb) - 1.0) > kProbTol;
      for (const auto& [w, p] : out.p_copy) {
        const double k = out.p_kb.contains(w) ? out.p_kb.at(w) : 0.0;
        const double c = out.p_con.contains(w) ? out.p_con.at(w) : 0.0;
        bad_mix += std::abs(p - (out.alpha * k + (1 - out.alpha) * c)) > kProbTol;
      }
      h = sv.hidden;
      prev = static_cast<TokenId>(std::max_element(out.p_gen.begin(), out.p_gen.end()) - out.p_gen.begin());
    }
    if (pd) {
      const Vec d = t.value(pd->probs);
      bad_sum += std::abs(std::accumulate(d.begin(), d.end(), 0.0) - 1.0) > kProbTol;
      std::vector<std::size_t> perm(f.sample.kb.size());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      DialogSample shuffled = f.sample;
      for (std::size_t i = 0; i < perm.size(); ++i) shuffled.kb[i] = f.sample.kb[perm[i]];
      const PreparedSample ps = prepare_sample(shuffled, f.vocab);
      Tape t2;
      const auto c2 = encode_context(t2, f.model, ps.history);
      const Vec d2 = t2.value(distill(t2, f.model, c2, encode_kb(t2, f.model, ps)).probs);
      ++checked_perm;
      for (std::size_t i = 0; i < perm.size(); ++i) bad_perm += std::abs(d2[i] - d[perm[i]]) > kProbTol;
    }
  }
  o.require(bad_sum == 0, std::to_string(bad_sum) + " distributions off unit mass");
  o.require(bad_mix == 0, std::to_string(bad_mix) + " copy mixture violations");
  o.require(bad_perm == 0, std::to_string(bad_perm) + " permutation violations");
  if (o.pass) o.detail = "200 fixtures, " + std::to_string(checked_perm) + " permutation checks";
  return o;
}

// ---------------------------------------------------------------- 3

Outcome gradient_checks() {
  Outcome o;
  GradCheckOptions opts;
  opts.rel_tol = kGradRelTol;
  opts.per_param = 8;
  std::ostringstream summary;
  const char* names[] = {"L_g", "L_c", "L_d"};
  for (int which = 0; which < 3; ++which) {
    GradCheckResult agg;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      auto f = gradient_fixture(seed);
      std::mt19937_64 rng(3000 + seed);
      const auto r = grad_check_tape(
          f.model.params,
          [&f, which](Tape& t) {
            const SampleLosses sl = forward_losses(t, f.model, f.prepared);
            return which == 0 ? sl.l_g : which == 1 ? sl.l_c : sl.l_d;
          },
          rng, opts);
      agg.checked += r.checked;
      agg.passed += r.passed;
    }
    summary << names[which] << " " << agg.passed << "/" << agg.checked << " ";
    o.require(agg.pass_rate() >= kGradPassRate, std::string(names[which]) + " pass rate " + std::to_string(agg.pass_rate()));
  }
  GradCheckResult ec;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto f = gradient_fixture(seed);
    std::vector<const DialogSample*> batch = {&f.sample};
    std::mt19937_64 rng(3100 + seed);
    const auto pairs = batch_entity_pairs(batch, f.lexicon, f.vocab, 10000, rng);
    const auto r = grad_check(
        f.model.params, [&] { return loss_entity_constraint(*f.model.embedding, pairs); },
        [&](GradBuffer& g) {
          loss_entity_constraint_backward(*f.model.embedding, pairs, 1.0, g[f.model.embedding->id]);
        },
        rng, opts);
    ec.checked += r.checked;
    ec.passed += r.passed;
  }
  summary << "L_ec " << ec.passed << "/" << ec.checked;
  o.require(ec.pass_rate() >= kGradPassRate, "L_ec pass rate " + std::to_string(ec.pass_rate()));
  if (o.pass) o.detail = summary.str();
  return o;
}

// ---------------------------------------------------------------- 4

Outcome tiny_overfit() {
  Outcome o;
  const auto data = tiny_dialogs();
  auto c = make_corpus(data);
  TrainConfig cfg = small_config();
  cfg.epochs = kOverfitEpochs;
  cfg.batch_size = 4;
  int epochs_run = 0;
  TrainResult r = train(cfg, c.train, {}, c.vocab, c.lexicon, [&](const EpochLog& e) { epochs_run = e.epoch; });
  const Evaluation ev = evaluate(r.best.model, c.train, c.vocab, c.lexicon, cfg.max_decode_len);
  const double f1 = 100.0 * ev.report.mse_f1;
  const double bleu = 100.0 * ev.report.bleu;
  o.require(f1 == 100.0, "train mse_f1 " + std::to_string(f1));
  o.require(bleu >= kOverfitBleu, "train BLEU " + std::to_string(bleu));
  const auto target = targets(data);
  double worst = 1.0;
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    const PreparedSample p = prepare_sample(c.train[i], c.vocab);
    Tape t;
    const auto ctx = encode_context(t, r.best.model, p.history);
    const Vec d = t.value(distill(t, r.best.model, ctx, encode_kb(t, r.best.model, p)).probs);
    worst = std::min(worst, d[target[i]]);
  }
  o.require(worst >= kOverfitPd, "min P_d on target " + std::to_string(worst));
  std::ostringstream s;
  s << "mse_f1 " << f1 << ", BLEU " << bleu << ", min P_d " << worst << ", best epoch " << r.best.epoch << "/"
    << epochs_run;
  if (o.pass) o.detail = s.str();
  return o;
}

// ---------------------------------------------------------------- 5 and 6

struct Variant {
  std::string name;
  std::vector<double> val_f1;
  std::vector<double> cosine;
  double mean(const std::vector<double>& v) const { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }
};

struct AblationRuns {
  Variant full{"full"}, no_lec{"no L_ec"}, naive{"naive"};
  bool done = false;
  std::string error;
};

AblationRuns& ablation() {
  static AblationRuns runs;
  if (runs.done) return runs;
  runs.done = true;
  const CalendarOptions tr{50, 501, 4, true, false};
  const CalendarOptions va{50, 502, 4, true, false};
  auto c = make_corpus(calendar_dialogs(tr), calendar_dialogs(va));
  const fs::path vectors = fs::temp_directory_path() / "kbd_acceptance_vectors.txt";
  for (int s = 0; s < kAblationSeeds; ++s) {
    write_clustered_vectors(vectors, c.vocab, c.lexicon, 32, 0.5, 700 + s);
    TrainConfig base = small_config();
    base.epochs = kAblationEpochs;
    base.seed = 1 + s;
    base.pretrained = vectors.string();
    for (Variant* v : {&runs.full, &runs.no_lec, &runs.naive}) {
      TrainConfig cfg = base;
      if (v == &runs.no_lec) cfg.use_l_ec = false;
      if (v == &runs.naive) cfg.scorer = Scorer::naive;
      const TrainResult r = train(cfg, c.train, c.val, c.vocab, c.lexicon);
      v->val_f1.push_back(100.0 * r.best.val_mse_f1);
      const auto rep = same_type_similarity_report({r.best.model.embedding, &c.vocab}, c.lexicon);
      v->cosine.push_back(rep.mean_pairwise);
    }
  }
  fs::remove(vectors);
  return runs;
}

Outcome ablation_direction() {
  Outcome o;
  auto& a = ablation();
  const double f = a.full.mean(a.full.val_f1), n = a.no_lec.mean(a.no_lec.val_f1), v = a.naive.mean(a.naive.val_f1);
  o.require(f > n, "full <= no L_ec");
  o.require(f > v, "full <= naive");
  std::ostringstream s;
  s << "mean val mse_f1 full " << f << ", no L_ec " << n << ", naive " << v;
  o.detail = o.pass ? s.str() : o.detail + " (" + s.str() + ")";
  return o;
}

Outcome lec_effect() {
  Outcome o;
  auto& a = ablation();
  const double f = a.full.mean(a.full.cosine), n = a.no_lec.mean(a.no_lec.cosine);
  o.require(n - f >= kCosineGap, "gap below threshold");
  std::ostringstream s;
  s << "mean same-type cosine full " << f << ", no L_ec " << n << ", gap " << n - f;
  o.detail = o.pass ? s.str() : o.detail + " (" + s.str() + ")";
  return o;
}

// ---------------------------------------------------------------- 7

Outcome smd_subsample() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "kbd_acceptance_smd";
  fs::remove_all(dir);
  fs::create_directories(dir / "data");
  // 5% of the 2425 SMD training dialogs, two-turn dialogs mixed in.
  auto train = calendar_dialogs({61, 801, 5, true, false});
  for (auto& d : calendar_dialogs({60, 802, 5, true, true})) train.push_back(d);
  std::ofstream(dir / "data" / "train.json") << train.dump();
  std::ofstream(dir / "data" / "dev.json") << calendar_dialogs({13, 803, 5, true, true}).dump();
  TrainConfig cfg = small_config();
  cfg.epochs = 15;
  cfg.dropout = 0.2;
  cfg.teacher_forcing = 0.9;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  std::ofstream(dir / "subsample.cfg") << cfg.to_text();
  const std::string cmd = std::string(KBD_CLI_PATH) + " train --config " + (dir / "subsample.cfg").string() +
                          " --data " + (dir / "data").string() + " --out " + (dir / "run").string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.require(code == 0, "exit code " + std::to_string(code));
  std::vector<double> epoch_loss;
  std::ifstream log(dir / "run" / "train_log.jsonl");
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("epoch")) epoch_loss.push_back(j["total"].get<double>());
  }
  o.require(epoch_loss.size() == static_cast<std::size_t>(cfg.epochs), "logged " + std::to_string(epoch_loss.size()) + " epochs");
  // Trailing three-epoch moving average.
  std::vector<double> smooth;
  for (std::size_t i = 2; i < epoch_loss.size(); ++i)
    smooth.push_back((epoch_loss[i] + epoch_loss[i - 1] + epoch_loss[i - 2]) / 3.0);
  int rises = 0;
  for (std::size_t i = 1; i < smooth.size(); ++i) rises += smooth[i] > smooth[i - 1];
  o.require(rises == 0, std::to_string(rises) + " increases in smoothed loss");
  std::ostringstream s;
  if (!epoch_loss.empty()) s << "epoch loss " << epoch_loss.front() << " -> " << epoch_loss.back();
  o.detail = o.pass ? s.str() : o.detail + " (" + s.str() + ")";
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  bool ok = true;
  ok &= report(1, "metric oracle", 5, metric_oracle);
  ok &= report(2, "distribution invariants", 60, distribution_invariants);
  ok &= report(3, "gradient checks", 120, gradient_checks);
  ok &= report(4, "tiny overfit", 300, tiny_overfit);
  ok &= report(5, "ablation direction", 1800, ablation_direction);
  ok &= report(6, "entity constraint effect", 0, lec_effect);
  ok &= report(7, "SMD-schema subsample end to end", 0, smd_subsample);
  return ok ? 0 : 1;
}
