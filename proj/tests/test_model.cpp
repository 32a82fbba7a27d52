// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "metrolab/errors.hpp"
#include "metrolab/model.hpp"
#include "support/micro.hpp"

using namespace metrolab;
using metrolab::testing::micro_config;
using metrolab::testing::random_batch;

namespace {

template <class Real>
std::vector<Real> values(const Tensor<Real>& t) {
  return {t.data().begin(), t.data().end()};
}

// Direct piecewise-log rule with exact integer comparisons: for |d| >= e (e = h/2,
// h = buckets/2) the bucket is the largest b < h − e with (|d|/e)^(h−e) >= (m/e)^b.
std::size_t bucket_oracle(std::int64_t distance, std::size_t buckets, std::size_t max_distance) {
  const std::size_t h = buckets / 2;
  const std::size_t e = h / 2;
  const std::size_t offset = distance > 0 ? h : 0;
  const auto n = static_cast<unsigned __int128>(distance < 0 ? -distance : distance);
  if (n < e) return offset + static_cast<std::size_t>(n);
  auto power = [](unsigned __int128 base, std::size_t k) {
    unsigned __int128 r = 1;
    for (std::size_t i = 0; i < k; ++i) r *= base;
    return r;
  };
  std::size_t b = 0;
  // n^(h−e) · e^b >= m^b · e^(h−e)  <=>  (n/e)^(h−e) >= (m/e)^b
  while (b + 1 < h - e && power(n, h - e) * power(e, b + 1) >= power(max_distance, b + 1) * power(e, h - e)) ++b;
  return offset + e + b;
}

std::size_t closed_form_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size, p = c.max_abs_positions;
  const std::size_t rel = c.rel_buckets * c.n_heads;
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t enc_layer = attn + ln + ffn + ln;
  const std::size_t dec_layer = enc_layer + attn + ln;
  auto stack = [&](std::size_t layers, std::size_t per_layer) { return p * d + ln + rel + layers * per_layer; };
  std::size_t total = v * d;
  total += stack(c.effective_aux_layers(), enc_layer) + v;
  total += stack(c.enc_layers, enc_layer);
  total += stack(c.dec_layers, dec_layer);
  total += (d * d + d) + ln + (d + 1);
  total += v;
  return total;
}

}  // namespace

TEST_CASE("relative buckets: zero, clamp, and agreement with an exact oracle") {
  CHECK(relative_bucket(0, 32, 128) == 0);
  CHECK(relative_bucket(1000, 32, 128) == 31);
  CHECK(relative_bucket(-1000, 32, 128) == 15);
  CHECK(relative_bucket(129, 32, 128) == 31);
  CHECK(relative_bucket(-129, 32, 128) == 15);
  std::size_t prev_pos = 0, prev_neg = 0;
  for (std::int64_t d = 1; d <= 256; ++d) {
    const auto pos = relative_bucket(d, 32, 128);
    const auto neg = relative_bucket(-d, 32, 128);
    CHECK(pos == bucket_oracle(d, 32, 128));
    CHECK(neg == bucket_oracle(-d, 32, 128));
    CHECK(pos >= prev_pos);
    CHECK(neg >= prev_neg);
    CHECK(pos >= 16);
    CHECK(neg < 16);
    prev_pos = pos;
    prev_neg = neg;
  }
  for (std::int64_t d = -40; d <= 40; ++d) CHECK(relative_bucket(d, 8, 16) == bucket_oracle(d, 8, 16));
}

TEST_CASE("config: auxiliary depth defaults to a third of the encoder") {
  ModelConfig c;
  c.enc_layers = 12;
  CHECK(c.effective_aux_layers() == 4);
  c.enc_layers = 2;
  CHECK(c.effective_aux_layers() == 1);
}

TEST_CASE("parameter count matches the closed form") {
  auto c = micro_config();
  CHECK(Model<double>(c, 1).parameter_count() == closed_form_count(c));
  ModelConfig def;
  def.vocab_size = 500;
  CHECK(Model<float>(def, 1).parameter_count() == closed_form_count(def));
  c.clm_head_style = ClmHeadStyle::projection;
  CHECK(Model<double>(c, 1).parameter_count() == closed_form_count(micro_config()) + 8 * 8 + 8 + 16);
  c.clm_head_style = ClmHeadStyle::copy;
  CHECK_THROWS_AS(Model<double>(c, 1), ConfigError);
}

TEST_CASE("aux_forward: normalised rows, tied embeddings, length limit") {
  Model<double> m(micro_config(), 3);
  auto batch = random_batch({6, 4}, 37, 5);
  batch.ids[1] = kMask;
  auto logits = m.aux_forward(batch);
  CHECK(logits.shape() == Shape{12, 37});
  for (std::size_t r = 0; r < 12; ++r) {
    auto lp = log_softmax(logits.data().subspan(r * 37, 37));
    double total = 0;
    for (double x : lp) total += std::exp(x);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto before = values(logits);
  m.parameter("embed.tokens").mutable_data()[10 * 8 + 3] += 0.5;
  CHECK(values(m.aux_forward(batch)) != before);

  auto too_long = random_batch({21}, 37, 6);
  CHECK_THROWS_AS(m.aux_forward(too_long), LengthError);
  CHECK_THROWS_AS(m.encode(too_long), LengthError);
}

TEST_CASE("sample_noise: copies, degenerate and Monte-Carlo categorical") {
  Rng rng(8);
  TokenSeq orig{9, 10, 11};
  Tensor<double> logits(Shape{3, 4}, std::vector<double>(12, 0.0));
  MaskPlan none{{0, 0, 0}, 0.15, MaskPattern::iid};
  CHECK(sample_noise(logits, orig, none, 1.0, rng) == orig);

  Tensor<double> spike(Shape{3, 4}, std::vector<double>(12, 0.0));
  spike.mutable_data()[1 * 4 + 2] = 80.0;
  MaskPlan middle{{0, 1, 0}, 0.15, MaskPattern::iid};
  for (int i = 0; i < 100; ++i) CHECK(sample_noise(spike, orig, middle, 1.0, rng) == TokenSeq{9, 2, 11});

  const std::vector<double> two{std::log(1.0), std::log(3.0)};
  std::size_t ones = 0;
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) ones += sample_categorical(std::span<const double>(two), 1.0, rng) == 1;
  CHECK(std::abs(double(draws - ones) / draws - 0.25) <= 0.01);
  CHECK(std::abs(double(ones) / draws - 0.75) <= 0.01);
}

TEST_CASE("decoder is causal and ignores encoder padding") {
  for (auto style : {NormStyle::post_ln, NormStyle::pre_ln}) {
    auto cfg = micro_config();
    cfg.norm_style = style;
    Model<double> m(cfg, 11);
    auto enc_in = random_batch({7, 4}, 37, 12);
    auto dec_in = random_batch({7, 7}, 37, 13);
    auto mem = m.encode(enc_in);
    auto base = values(m.decode(mem, enc_in, dec_in));
    for (std::size_t j = 1; j < 7; ++j) {
      auto changed = dec_in;
      changed.ids[j] = changed.ids[j] == 20 ? 21 : 20;
      auto out = values(m.decode(mem, enc_in, changed));
      for (std::size_t t = 0; t < j; ++t) {
        for (std::size_t k = 0; k < 8; ++k) CHECK(out[t * 8 + k] == base[t * 8 + k]);
      }
      bool later_changed = false;
      for (std::size_t k = j * 8; k < 7 * 8; ++k) later_changed |= out[k] != base[k];
      CHECK(later_changed);
    }
    auto padded = enc_in;
    for (std::size_t c = 4; c < 7; ++c) padded.ids[7 + c] = static_cast<TokenId>(15 + c);
    auto padded_out = values(m.decode(m.encode(padded), padded, dec_in));
    CHECK(padded_out == base);
  }
}

TEST_CASE("ablation switches change outputs on the same inputs") {
  auto enc_in = random_batch({6}, 37, 21);
  auto dec_in = random_batch({6}, 37, 22);
  auto post = micro_config();
  auto pre = post;
  pre.norm_style = NormStyle::pre_ln;
  Model<double> a(post, 5), b(pre, 5);
  // Shared-name parameters are copied so only the composition differs.
  b.import_tensors(a.export_tensors(), [&](const std::string& n) { return a.has_parameter(n); });
  auto ha = values(a.decode(a.encode(enc_in), enc_in, dec_in));
  auto hb = values(b.decode(b.encode(enc_in), enc_in, dec_in));
  CHECK(ha != hb);

  auto proj = post;
  proj.clm_head_style = ClmHeadStyle::projection;
  Model<double> c(proj, 5);
  c.import_tensors(a.export_tensors(), [&](const std::string& n) { return a.has_parameter(n); });
  auto dec = a.decode(a.encode(enc_in), enc_in, dec_in);
  auto la = a.clm_logits(dec);
  auto lc = c.clm_logits(dec);
  CHECK(la.shape() == Shape{6, 37});
  CHECK(lc.shape() == Shape{6, 37});
  CHECK(values(la) != values(lc));
  auto before = values(la);
  a.parameter("embed.tokens").mutable_data()[12 * 8] += 1.0;
  CHECK(values(a.clm_logits(dec)) != before);
}

TEST_CASE("rtd head: shape, zero weights, gradient reaches the encoder only") {
  Model<double> m(micro_config(), 31);
  auto enc_in = random_batch({5, 3}, 37, 32);
  auto h = m.encode(enc_in);
  auto logits = m.rtd_logits(h);
  CHECK(logits.shape() == Shape{10, 1});
  for (auto* name : {"rtd.out.weight", "rtd.out.bias"}) {
    auto d = m.parameter(name).mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
  const auto zeroed = m.rtd_logits(h);
  for (double x : zeroed.data()) CHECK(x == 0.0);

  Model<double> g(micro_config(), 33);
  auto dec_in = random_batch({5, 5}, 37, 34);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto enc = g.encode(enc_in);
    (void)g.decode(enc, enc_in, dec_in);
    tape.backward(sum(g.rtd_logits(enc)));
  }
  bool encoder_touched = false;
  for (const auto& name : g.parameter_names()) {
    const auto& p = g.parameter(name);
    if (name.rfind("dec.", 0) == 0) {
      for (double x : p.grad()) CHECK(x == 0.0);
    }
    if (name.rfind("enc.", 0) == 0 && p.has_grad()) {
      for (double x : p.grad()) encoder_touched |= x != 0.0;
    }
  }
  CHECK(encoder_touched);
}

TEST_CASE("checkpoint: round trip gives bit-identical logits") {
  const auto path = std::filesystem::temp_directory_path() / "metrolab_model_rt.ckpt";
  auto enc_in = random_batch({6, 5}, 37, 41);
  auto dec_in = random_batch({6, 6}, 37, 42);

  Model<double> a(micro_config(), 40);
  Checkpoint ck;
  ck.config_text = "[model]\nd_model = 8\n";
  ck.step = 17;
  ck.rng_state = "state";
  ck.tensors = a.export_tensors();
  save_checkpoint(path, ck);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.step == 17);
  CHECK(loaded.rng_state == "state");
  CHECK(loaded.config_text == ck.config_text);
  Model<double> b(micro_config(), 99);
  b.import_tensors(loaded.tensors);
  CHECK(values(a.clm_logits(a.decode(a.encode(enc_in), enc_in, dec_in))) ==
        values(b.clm_logits(b.decode(b.encode(enc_in), enc_in, dec_in))));

  Model<float> fa(micro_config(), 40);
  ck.tensors = fa.export_tensors();
  save_checkpoint(path, ck);
  Model<float> fb(micro_config(), 7);
  fb.import_tensors(load_checkpoint(path).tensors);
  CHECK(values(fa.aux_forward(enc_in)) == values(fb.aux_forward(enc_in)));

  auto partial = ck;
  partial.tensors.pop_back();
  save_checkpoint(path, partial);
  CHECK_THROWS_AS(fb.import_tensors(load_checkpoint(path).tensors), CheckpointError);
  {
    std::ofstream(path, std::ios::binary) << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}
