#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "kbdistill/errors.hpp"
#include "kbdistill/losses.hpp"
#include "synthetic.hpp"

using namespace kbd;
using namespace kbd::testing;

TEST_CASE("generation loss examples") {
  std::vector<Vec> certain = {{0, 1, 0}, {1, 0, 0}};
  CHECK(loss_generate(certain, std::vector<TokenId>{1, 0}) == 0.0);
  std::vector<Vec> uniform(2, Vec(10, 0.1));
  CHECK(loss_generate(uniform, std::vector<TokenId>{3, 7}) == doctest::Approx(4.605170185988092).epsilon(1e-12));
  std::vector<Vec> halved = uniform;
  halved[1] = Vec(10, 0.1);
  halved[1][7] = 0.05;
  CHECK(loss_generate(halved, std::vector<TokenId>{3, 7}) - loss_generate(uniform, std::vector<TokenId>{3, 7}) ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK_THROWS_AS(loss_generate(uniform, std::vector<TokenId>{1}), ContractViolation);
  std::vector<Vec> zero = {{0.0, 1.0}};
  CHECK(loss_generate(zero, std::vector<TokenId>{0}) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("copy loss examples") {
  std::vector<SparseDist> p = {{{5, 0.5}, {6, 0.5}}, {{5, 1.0}}};
  const std::vector<TokenId> gold = {5, 5};
  CHECK(loss_copy(p, gold, {false, false}) == 0.0);
  CHECK(loss_copy(p, gold, {true, false}) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(loss_copy(p, gold, {false, true}) == 0.0);
}

TEST_CASE("entity constraint loss examples") {
  ParamStore s;
  Param& e = s.add("e", 4, 2);
  e.value = {1, 0, 0, 1, 1, 0, 0.6, 0.8};
  const std::vector<IdPair> orth = {{0, 1}};
  CHECK(loss_entity_constraint(e, orth) == doctest::Approx(0.0));
  const std::vector<IdPair> same = {{0, 2}};
  CHECK(loss_entity_constraint(e, same) == doctest::Approx(1.0).epsilon(1e-6));
  // cosines 0.5 and -0.5
  e.value = {1, 0, 0.5, std::sqrt(0.75), -0.5, std::sqrt(0.75), 0, 1};
  const std::vector<IdPair> mixed = {{0, 1}, {0, 2}};
  CHECK(loss_entity_constraint(e, mixed) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("distillation loss examples and Gibbs inequality") {
  CHECK(loss_distillation(Vec{0.5, 0.5}, Vec{0.5, 0.5}) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(loss_distillation(Vec{1.0 - 1e-12, 1e-12}, Vec{1, 0}) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss_distillation(Vec{0.5, 0.5}, Vec{1, 0}) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK_THROWS_AS(loss_distillation(Vec{1.0}, Vec{0.5, 0.5}), ContractViolation);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + trial % 5;
    Vec d(m), ds(m);
    double sd = 0, ss = 0;
    for (std::size_t i = 0; i < m; ++i) {
      sd += d[i] = u(rng);
      ss += ds[i] = u(rng);
    }
    for (std::size_t i = 0; i < m; ++i) {
      d[i] /= sd;
      ds[i] /= ss;
    }
    const double entropy = loss_distillation(ds, ds);
    CHECK(loss_distillation(d, ds) >= entropy - 1e-6);
  }
}

TEST_CASE("minimizing the entity constraint alone pushes same-type cosines down") {
  std::mt19937_64 rng(32);
  ParamStore s;
  Param& e = s.add("e", 5, 8);
  std::normal_distribution<double> n;
  for (auto& x : e.value) x = n(rng);
  const std::vector<IdPair> pairs = {{0, 1}, {0, 2}, {1, 2}, {3, 4}};
  const double start = loss_entity_constraint(e, pairs);
  for (int step = 0; step < 100; ++step) {
    Vec g;
    loss_entity_constraint_backward(e, pairs, 1.0, g);
    for (std::size_t k = 0; k < g.size(); ++k) e.value[k] -= 0.1 * g[k];
  }
  const double end = loss_entity_constraint(e, pairs);
  CHECK(end < start);
  // pair (3,4) approaches cosine -1
  CHECK(loss_entity_constraint(e, std::vector<IdPair>{{3, 4}}) < -0.95);
}

TEST_CASE("forward losses have per-part gradients that match finite differences") {
  for (std::uint64_t seed : {1u, 2u}) {
    auto f = gradient_fixture(seed);
    std::mt19937_64 rng(seed);
    auto part = [&](int which) {
      return [&f, which](Tape& t) {
        const SampleLosses sl = forward_losses(t, f.model, f.prepared);
        return which == 0 ? sl.l_g : which == 1 ? sl.l_c : sl.l_d;
      };
    };
    for (int which = 0; which < 3; ++which) {
      const auto r = grad_check_tape(f.model.params, part(which), rng);
      INFO("part " << which << " " << r.worst_coordinate);
      CHECK(r.pass_rate() >= 0.99);
    }
  }
}

TEST_CASE("entity constraint gradient matches finite differences") {
  auto f = gradient_fixture(3);
  std::vector<const DialogSample*> batch = {&f.sample};
  std::mt19937_64 rng(3);
  const auto pairs = batch_entity_pairs(batch, f.lexicon, f.vocab, 10000, rng);
  CHECK(pairs.size() == 3);
  const auto r = grad_check(
      f.model.params, [&] { return loss_entity_constraint(*f.model.embedding, pairs); },
      [&](GradBuffer& g) { loss_entity_constraint_backward(*f.model.embedding, pairs, 1.0, g[f.model.embedding->id]); },
      rng);
  INFO(r.worst_coordinate);
  CHECK(r.pass_rate() >= 0.99);
}

TEST_CASE("tape losses agree with the value-level losses") {
  auto f = gradient_fixture(4);
  Tape t;
  const SampleLosses sl = forward_losses(t, f.model, f.prepared);
  std::vector<Vec> pg;
  for (Var v : sl.p_gen) pg.push_back(t.value(v));
  std::vector<TokenId> target = f.prepared.sketch;
  target.push_back(Vocabulary::kEnd);
  CHECK(t.scalar(sl.l_g) == doctest::Approx(loss_generate(pg, target)).epsilon(1e-12));
  const auto ref = reference_from_counts(f.prepared.reference_counts);
  CHECK(t.scalar(sl.l_d) == doctest::Approx(loss_distillation(t.value(sl.distill->probs), ref.probs)).epsilon(1e-12));
}

TEST_CASE("pair subsampling caps the count deterministically") {
  auto c = make_corpus(calendar_dialogs({10, 5}));
  std::vector<const DialogSample*> batch;
  for (const auto& s : c.train) batch.push_back(&s);
  std::mt19937_64 r1(1), r2(1);
  const auto all = batch_entity_pairs(batch, c.lexicon, c.vocab, 100000, r1);
  const auto capped = batch_entity_pairs(batch, c.lexicon, c.vocab, 5, r2);
  CHECK(all.size() > 5);
  CHECK(capped.size() == 5);
  std::mt19937_64 r3(1);
  CHECK(batch_entity_pairs(batch, c.lexicon, c.vocab, 5, r3) == capped);
}

TEST_CASE("breakdown total is the sum of its parts") {
  LossBreakdown b{1.25, 0.5, -0.75, 0.125, 0.0};
  b.finalize();
  CHECK(b.total == 1.25 + 0.5 + -0.75 + 0.125);
}
