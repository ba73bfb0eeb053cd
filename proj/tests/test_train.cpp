#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "mrwkv/synth.hpp"
#include "mrwkv/train.hpp"

using namespace mrwkv;
using namespace mrwkv::train;
using model::ModelConfig;
using model::ModelState;
using model::Parameters;

namespace {

ModelConfig small(int vocab = 8) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.head_size = 16;
  c.d_ffn = 64;
  c.vocab_size = vocab;
  c.decay_lora = 8;
  c.aaa_lora = 8;
  c.mv_lora = 8;
  c.gate_lora = 8;
  return c;
}

std::vector<Example> markov_examples(const synth::MarkovChain& m, int count, std::size_t len, uint64_t seed) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::substream(seed, {static_cast<uint64_t>(i)});
    Example e;
    e.ids = m.sample(len, rng);
    e.mask.assign(len, 1);
    e.mask[0] = e.mask[1] = 0;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

TEST_CASE("adam step matches the closed form") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  Adam opt(3, cfg);
  std::vector<double> p{1.0, -2.0, 0.5}, g{0.2, -0.4, 0.0};
  std::vector<uint8_t> decay{1, 0, 1};
  opt.step(p, g, decay);
  // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 1.0 - 0.1 * 0.2 / (0.2 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.4 / (0.4 + 1e-8)));
  CHECK(p[2] == doctest::Approx(0.5 - 0.1 * 0.5 * 0.5));
  // Second step against a hand-rolled recurrence.
  std::vector<double> g2{-0.1, 0.3, 0.2};
  const double pm = p[1];
  opt.step(p, g2, decay);
  const double m = 0.9 * 0.1 * -0.4 + 0.1 * 0.3;
  const double v = 0.999 * 0.001 * 0.16 + 0.001 * 0.09;
  const double upd = (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  CHECK(p[1] == doctest::Approx(pm - 0.1 * upd));
}

TEST_CASE("global norm clipping") {
  std::vector<double> g{3, 4};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  std::vector<double> h{0.3, 0.4};
  clip_global_norm(h, 1.0);
  CHECK(h[0] == 0.3);
}

TEST_CASE("markov chain oracle") {
  Rng rng(1);
  const auto m = synth::MarkovChain::random(4, 1.5, rng);
  const auto pi = m.stationary_pairs();
  double total = 0;
  for (double v : pi) total += v;
  CHECK(total == doctest::Approx(1.0));
  // Empirical conditional entropy of a long sample converges to the rate.
  Rng r2(2);
  const auto seq = m.sample(400000, r2);
  double nll = 0;
  for (std::size_t t = 2; t < seq.size(); ++t) nll -= std::log(m.prob(seq[t - 2], seq[t - 1], seq[t]));
  CHECK(nll / (seq.size() - 2) == doctest::Approx(m.entropy_rate()).epsilon(0.01));
  CHECK(m.entropy_rate() < std::log(4.0));
}

TEST_CASE("pretraining lowers loss and is deterministic") {
  Rng rng(3);
  const auto chain = synth::MarkovChain::random(8, 2.0, rng);
  const auto data = markov_examples(chain, 16, 64, 5);
  auto cfg = TrainConfig::defaults(Mode::Pretrain);
  cfg.lr = 3e-3;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const auto dir = std::filesystem::temp_directory_path() / "mrwkv_train_test";
  cfg.log_path = dir / "log.jsonl";
  Parameters<double> p1(small()), p2(small());
  model::init_parameters(p1, 1);
  model::init_parameters(p2, 1);
  const auto r1 = pretrain(p1, fixed_source(data), cfg);
  cfg.log_path.clear();
  const auto r2 = pretrain(p2, fixed_source(data), cfg);
  REQUIRE(r1.steps == 12);
  CHECK(r1.epochs_done == 3);
  CHECK(r1.log.back().loss < r1.log.front().loss);
  for (std::size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].loss == r2.log[i].loss);
  CHECK(model::parameter_hash(p1) == model::parameter_hash(p2));

  std::ifstream f(dir / "log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("lr"));
    CHECK(j.contains("wall"));
    ++lines;
  }
  CHECK(lines == 12);
  std::filesystem::remove_all(dir);
}

TEST_CASE("state tuning freezes parameters") {
  Rng rng(4);
  const auto chain = synth::MarkovChain::random(8, 2.0, rng);
  const auto data = markov_examples(chain, 8, 48, 6);
  Parameters<double> p(small());
  model::init_parameters(p, 2);
  // Make the output path live so the state has an effect.
  Rng perturb(5);
  for (auto& v : p.flat()) v += perturb.uniform(-0.1, 0.1);
  const auto before = model::parameter_hash(p);
  ModelState<double> s(p.config());
  auto cfg = TrainConfig::defaults(Mode::State);
  cfg.epochs = 4;
  cfg.batch_size = 4;
  const double l0 = evaluate(p, s, std::span<const Example>(data)).nats_per_token;
  const auto res = state_tune(p, s, fixed_source(data), cfg);
  CHECK(res.steps == 8);
  CHECK(model::parameter_hash(p) == before);
  CHECK(evaluate(p, s, std::span<const Example>(data)).nats_per_token < l0);
  // Token-shift vectors stay zero unless requested.
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 32; ++i) CHECK(s.att_shift(l)[i] == 0.0);
}

TEST_CASE("lora tuning freezes the base") {
  Rng rng(7);
  const auto chain = synth::MarkovChain::random(8, 2.0, rng);
  const auto data = markov_examples(chain, 8, 48, 8);
  Parameters<double> p(small());
  model::init_parameters(p, 3);
  Rng perturb(5);
  for (auto& v : p.flat()) v += perturb.uniform(-0.1, 0.1);
  const auto before = model::parameter_hash(p);
  auto lora = model::make_lora<double>(p.layout(), 4, 4.0, 1);
  const ModelState<double> zero(p.config());
  const double base = evaluate(p, zero, std::span<const Example>(data)).nats_per_token;
  CHECK(evaluate(model::merge_lora(p, lora), zero, std::span<const Example>(data)).nats_per_token == base);
  auto cfg = TrainConfig::defaults(Mode::Lora);
  cfg.lr = 1e-2;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  lora_tune(p, lora, fixed_source(data), cfg);
  CHECK(model::parameter_hash(p) == before);
  CHECK(evaluate(model::merge_lora(p, lora), zero, std::span<const Example>(data)).nats_per_token < base);
}

TEST_CASE("time budget and divergence") {
  Rng rng(8);
  const auto chain = synth::MarkovChain::random(8, 2.0, rng);
  const auto data = markov_examples(chain, 64, 64, 9);
  Parameters<double> p(small());
  model::init_parameters(p, 4);
  auto cfg = TrainConfig::defaults(Mode::Pretrain);
  cfg.batch_size = 1;
  cfg.epochs = 100;
  cfg.time_budget = 0.0;
  const auto res = pretrain(p, fixed_source(data), cfg);
  CHECK(res.budget_hit);
  CHECK(res.steps == 1);

  // A NaN in the data path stops training and restores the last good weights.
  Parameters<double> q(small());
  model::init_parameters(q, 4);
  auto& v = q.view(q.layout().emb)[0];
  v = std::nan("");
  cfg.time_budget.reset();
  cfg.epochs = 1;
  std::vector<Example> bad{data[0]};
  bad[0].ids[0] = 0;
  const auto snapshot = model::parameter_hash(q);
  const auto r2 = pretrain(q, fixed_source(bad), cfg);
  CHECK(r2.diverged);
  CHECK(model::parameter_hash(q) == snapshot);

  TrainConfig wrong;
  wrong.lr = 0;
  CHECK_THROWS_AS(pretrain(p, fixed_source(data), wrong), TrainError);
}

TEST_CASE("synthetic styles") {
  const auto a = synth::make_corpus(synth::style_a(), 3, 16, 1);
  const auto b = synth::make_corpus(synth::style_b(), 3, 16, 1);
  const auto a2 = synth::make_corpus(synth::style_a(), 3, 16, 1);
  CHECK(a == a2);
  for (const auto& s : a) {
    midi::validate(s);
    CHECK(s.tracks.size() == 3);
    CHECK(s.note_count() >= 100);
    CHECK(midi::bar_grid(s).size() == 16);
  }
  for (const auto& s : b) midi::validate(s);
  CHECK(a[0].tracks[0].program != b[0].tracks[0].program);
}
