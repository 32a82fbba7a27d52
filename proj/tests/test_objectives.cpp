// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "metrolab/errors.hpp"
#include "metrolab/objectives.hpp"
#include "support/gradcheck.hpp"
#include "support/micro.hpp"

using namespace metrolab;
using metrolab::testing::check_gradients;
using metrolab::testing::micro_config;
using metrolab::testing::random_batch;

namespace {

const char* const kSentence = "Thank you for inviting me to your party last week";

Vocab sentence_vocab() {
  return Vocab::build({kSentence, "giving apple"}, VocabMode::word, 0, 4);
}

MaskPlan plan_at(std::size_t n, std::initializer_list<std::size_t> positions) {
  MaskPlan p{std::vector<std::uint8_t>(n, 0), 0.15, MaskPattern::iid};
  for (auto i : positions) p.flags[i] = 1;
  return p;
}

ProposalFn scripted(std::vector<TokenSeq> per_row) {
  return [per_row](std::size_t row, std::span<const TokenId>, const MaskPlan&, Rng&) { return per_row[row]; };
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

bool any_nonzero(const Tensor<double>& t) {
  if (!t.has_grad()) return false;
  for (double g : t.grad()) {
    if (g != 0.0) return true;
  }
  return false;
}

struct Frozen {
  NoisyBatch batch;
  TargetSpec target;
};

Frozen frozen_batch(const Model<double>& model, std::uint64_t seed, std::size_t len = 16) {
  Rng rng(seed);
  auto x = random_batch({len, len - 3}, model.vocab_size(), seed + 1);
  MetroStepOutput out;
  NoGradScope<double> no_grad;
  ObjectiveOptions opts;
  (void)metro_objective(model, x, opts, rng, ForwardPass<double>{}, &out);
  return {out.batch, out.target};
}

}  // namespace

TEST_CASE("noisy batch: worked sentence example") {
  const auto v = sentence_vocab();
  const auto orig = TokenBatch::from_rows({v.encode(kSentence)});
  const std::vector<MaskPlan> plans{plan_at(10, {2, 3, 8})};
  Rng rng(1);
  auto b = build_noisy_batch(orig, plans, scripted({v.encode("for giving apple")}), rng);
  CHECK(v.decode(b.x_masked.row(0)) == "Thank you [M] [M] me to your party [M] week");
  CHECK(v.decode(b.x_noise.row(0)) == "Thank you for giving me to your party apple week");
  CHECK(b.replaced == std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0, 1, 0});

  auto masked_only = build_decoder_target(orig.row(0), plans[0], TargetVariant::masked_only, true);
  CHECK(v.decode(masked_only.decoder_target) == "for inviting last");
  CHECK(masked_only.loss_mask == std::vector<std::uint8_t>{1, 1, 1});

  auto all = build_decoder_target(orig.row(0), plans[0], TargetVariant::all_tokens);
  CHECK(v.decode(all.decoder_target) == kSentence);
  CHECK(all.loss_mask == std::vector<std::uint8_t>(10, 1));

  auto masked_loss = build_decoder_target(orig.row(0), plans[0], TargetVariant::all_tokens_masked_loss);
  CHECK(v.decode(masked_loss.decoder_target) == kSentence);
  CHECK(masked_loss.loss_mask == std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 0, 0, 1, 0});

  for (const auto* t : {&masked_only, &all, &masked_loss}) {
    REQUIRE(t->decoder_input.size() == t->decoder_target.size());
    CHECK(t->decoder_input[0] == kBos);
    for (std::size_t i = 1; i < t->decoder_input.size(); ++i) CHECK(t->decoder_input[i] == t->decoder_target[i - 1]);
  }
  CHECK_THROWS_AS(build_decoder_target(orig.row(0), plans[0], TargetVariant::masked_only), ConfigError);
}

TEST_CASE("noisy batch: empty plan and label oracle over 1000 batches") {
  Model<double> m(micro_config(), 2);
  Rng rng(3);
  auto x = random_batch({9, 12, 5}, 37, 4);
  std::vector<MaskPlan> none;
  for (std::size_t r = 0; r < x.rows; ++r) none.push_back(MaskPlan{std::vector<std::uint8_t>(x.lengths[r], 0)});
  NoGradScope<double> no_grad;
  auto same = build_noisy_batch(x, none, m, rng, ForwardPass<double>{});
  CHECK(same.x_noise.ids == x.ids);
  for (auto f : same.replaced) CHECK(f == 0);
  auto target = build_decoder_targets(same, TargetVariant::all_tokens_masked_loss);
  for (auto f : target.loss_mask) CHECK(f == 0);

  std::size_t mismatches = 0, replaced_total = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t a = 4 + rng.below(13), b = 2 + rng.below(15);
    auto batch = random_batch({a, b}, 37, 100 + t);
    auto plans = sample_batch_plans(batch, t % 2 ? MaskPattern::span : MaskPattern::iid, 0.3, 2.0, rng);
    auto nb = build_noisy_batch(batch, plans, m, rng, ForwardPass<double>{});
    for (std::size_t r = 0; r < batch.rows; ++r) {
      for (std::size_t c = 0; c < batch.cols; ++c) {
        const std::size_t i = r * batch.cols + c;
        const bool valid = c < batch.lengths[r];
        const bool expect = valid && batch.ids[i] != nb.x_noise.ids[i];
        mismatches += (nb.replaced[i] != 0) != expect;
        if (valid && !nb.mask[i]) mismatches += nb.x_noise.ids[i] != batch.ids[i];
        replaced_total += expect;
      }
    }
  }
  CHECK(mismatches == 0);
  CHECK(replaced_total > 0);
}

TEST_CASE("span corruption batch targets") {
  auto x = TokenBatch::from_rows({{20, 21, 22, 23, 24}});
  std::vector<MaskPlan> plans{plan_at(5, {2, 3})};
  const SentinelRange s{kFirstSentinel, 4};
  auto sentinel = build_span_corruption_batch(x, plans, s, T5Target::sentinel);
  CHECK(sentinel.encoder_input.ids == TokenSeq{20, 21, s.id(0), 24});
  CHECK(sentinel.target.decoder_target.ids == TokenSeq{s.id(0), 22, 23, kEos});
  CHECK(sentinel.target.decoder_input.ids == TokenSeq{kBos, s.id(0), 22, 23});
  auto full = build_span_corruption_batch(x, plans, s, T5Target::all_tokens);
  CHECK(full.encoder_input.ids == TokenSeq{20, 21, s.id(0), 24});
  CHECK(full.target.decoder_target.ids == x.ids);
  CHECK(full.target.loss_mask == std::vector<std::uint8_t>(5, 1));
}

TEST_CASE("ambiguity: colliding draws and rates per variant") {
  const auto v = Vocab::build({"1 2 3 4 5 6"}, VocabMode::word, 0, 0);
  const TokenSeq orig = v.encode("1 2 3 4 5");
  const auto x = TokenBatch::from_rows({orig, orig});
  const std::vector<MaskPlan> plans{plan_at(5, {1, 2, 3}), plan_at(5, {2, 3})};
  Rng rng(5);
  auto nb = build_noisy_batch(x, plans, scripted({v.encode("2 6 4"), v.encode("6 4")}), rng);
  CHECK(v.decode(nb.x_noise.row(0)) == "1 2 6 4 5");
  CHECK(v.decode(nb.x_noise.row(1)) == "1 2 6 4 5");
  auto a = build_decoder_target(orig, plans[0], TargetVariant::masked_only, true);
  auto b = build_decoder_target(orig, plans[1], TargetVariant::masked_only, true);
  CHECK(v.decode(a.decoder_target) == "2 3 4");
  CHECK(v.decode(b.decoder_target) == "3 4");
  auto a2 = build_decoder_target(orig, plans[0], TargetVariant::all_tokens_masked_loss);
  auto b2 = build_decoder_target(orig, plans[1], TargetVariant::all_tokens_masked_loss);
  CHECK(a2.decoder_target == b2.decoder_target);
  CHECK(a2.loss_mask != b2.loss_mask);

  const std::vector<TokenSeq> corpus{orig};
  const auto proposal = unigram_proposal({v.encode("1 2 3 4 5 6")});
  Rng r1(6), r2(6), r3(6);
  auto masked_only = detect_target_ambiguity(corpus, proposal, TargetVariant::masked_only, 4000, r1);
  auto all = detect_target_ambiguity(corpus, proposal, TargetVariant::all_tokens, 4000, r2);
  auto masked_loss = detect_target_ambiguity(corpus, proposal, TargetVariant::all_tokens_masked_loss, 4000, r3);
  CHECK(masked_only.colliding_pairs > 0);
  CHECK(masked_only.rate() > 0.0);
  CHECK(all.rate() == 0.0);
  CHECK(masked_loss.rate() == 0.0);
  CHECK(masked_loss.mask_divergence_rate() > 0.0);
  CHECK(all.colliding_pairs == masked_only.colliding_pairs);
}

TEST_CASE("losses: weight degeneracy, oracle logits, recomposition") {
  Model<double> m(micro_config(), 7);
  auto f = frozen_batch(m, 8);
  ObjectiveOptions zero{0.0, 0.0};
  auto t0 = metro_losses(m, f.batch, f.target, zero, ForwardPass<double>{});
  CHECK(t0.combined.item() == t0.l_mlm.item());
  CHECK_FALSE(t0.l_rtd.defined());

  ObjectiveOptions paper;
  auto t = metro_losses(m, f.batch, f.target, paper, ForwardPass<double>{});
  const auto b = t.breakdown();
  const double recomposed = 1.0 * b.l_mlm + 50.0 * b.l_rtd + 1.0 * b.l_clm;
  CHECK(std::abs(b.combined - recomposed) <= 1e-6 * std::abs(recomposed));
  CHECK(b.l_rtd > 0.0);
  CHECK_THROWS_AS(compute_losses(f.batch, f.target, Tensor<double>(), Tensor<double>(), Tensor<double>(), -1.0, 1.0),
                  ConfigError);

  const auto& nb = f.batch;
  const auto mlm_rows = flagged_rows(nb.mask);
  const auto clm_rows = flagged_rows(f.target.loss_mask);
  Tensor<double> mlm(Shape{mlm_rows.size(), 37}), clm(Shape{clm_rows.size(), 37}), rtd(Shape{nb.mask.size(), 1});
  for (std::size_t i = 0; i < mlm_rows.size(); ++i) mlm.mutable_data()[i * 37 + nb.x_orig.ids[mlm_rows[i]]] = 40.0;
  for (std::size_t i = 0; i < clm_rows.size(); ++i) {
    clm.mutable_data()[i * 37 + f.target.decoder_target.ids[clm_rows[i]]] = 40.0;
  }
  for (std::size_t i = 0; i < nb.mask.size(); ++i) rtd.mutable_data()[i] = nb.replaced[i] ? 40.0 : -40.0;
  auto perfect = compute_losses(nb, f.target, mlm, rtd, clm, 50.0, 1.0).breakdown();
  CHECK(perfect.l_mlm < 1e-3);
  CHECK(perfect.l_rtd < 1e-3);
  CHECK(perfect.l_clm < 1e-3);
}

TEST_CASE("losses: gradient isolation per term") {
  Model<double> m(micro_config(), 9);
  auto f = frozen_batch(m, 10);
  auto run = [&](auto pick) {
    for (const auto& n : m.parameter_names()) m.parameter(n).zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto t = metro_losses(m, f.batch, f.target, ObjectiveOptions{}, ForwardPass<double>{});
    tape.backward(pick(t));
  };
  run([](const LossTerms<double>& t) { return t.l_mlm; });
  for (const auto& n : m.parameter_names()) {
    if (!starts_with(n, "aux.") && n != "embed.tokens") CHECK_FALSE(any_nonzero(m.parameter(n)));
  }
  CHECK(any_nonzero(m.parameter("aux.layer0.ffn.in.weight")));

  run([](const LossTerms<double>& t) { return t.l_rtd; });
  bool enc_touched = false;
  for (const auto& n : m.parameter_names()) {
    if (starts_with(n, "dec.") || starts_with(n, "clm.") || starts_with(n, "aux.")) {
      CHECK_FALSE(any_nonzero(m.parameter(n)));
    }
    if (starts_with(n, "enc.")) enc_touched |= any_nonzero(m.parameter(n));
  }
  CHECK(enc_touched);

  run([](const LossTerms<double>& t) { return t.l_clm; });
  CHECK(any_nonzero(m.parameter("enc.layer0.self.q.weight")));
  CHECK(any_nonzero(m.parameter("dec.layer1.cross.v.weight")));
}

TEST_CASE("losses: combined gradient matches finite differences (sampled entries)") {
  Model<double> m(micro_config(), 11);
  auto f = frozen_batch(m, 12);
  metrolab::testing::NamedParams params;
  for (const auto& n : m.parameter_names()) params.emplace_back(n, m.parameter(n));
  auto report = check_gradients(
      params, [&] { return metro_losses(m, f.batch, f.target, ObjectiveOptions{}, ForwardPass<double>{}).combined; },
      1e-5, 1e-3, 1e-8, 13);
  for (const auto& msg : report.failures) MESSAGE(msg);
  CHECK(report.failed == 0);
  CHECK(report.checked > 300);
}

TEST_CASE("losses: a small gradient step lowers the combined loss") {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Model<double> m(micro_config(), 100 + seed);
    auto f = frozen_batch(m, 200 + seed);
    Tape<double> tape;
    double before = 0;
    {
      TapeScope<double> scope(tape);
      auto t = metro_losses(m, f.batch, f.target, ObjectiveOptions{}, ForwardPass<double>{});
      before = t.combined.item();
      tape.backward(t.combined);
    }
    for (const auto& n : m.parameter_names()) {
      auto& p = m.parameter(n);
      if (!p.has_grad()) continue;
      auto d = p.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 1e-4 * p.grad()[i];
    }
    const double after = metro_losses(m, f.batch, f.target, ObjectiveOptions{}, ForwardPass<double>{}).combined.item();
    decreased += after < before;
  }
  CHECK(decreased >= 18);
}
