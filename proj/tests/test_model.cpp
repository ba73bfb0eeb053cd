#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "mrwkv/model.hpp"
#include "mrwkv/rng.hpp"

using namespace mrwkv;
using namespace mrwkv::model;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.head_size = 8;
  c.d_ffn = 24;
  c.vocab_size = 30;
  c.decay_lora = 4;
  c.aaa_lora = 4;
  c.mv_lora = 4;
  c.gate_lora = 4;
  return c;
}

// Reference init perturbed everywhere so no path is switched off by a zero
// (output projections, value matrices, LoRA up factors start at zero).
template <typename T>
Parameters<T> random_params(const ModelConfig& cfg, uint64_t seed, double spread = 0.3) {
  Parameters<T> p(cfg);
  init_parameters(p, seed);
  Rng rng(seed * 7 + 1);
  for (auto& v : p.flat()) v += static_cast<T>(rng.uniform(-spread, spread));
  return p;
}

template <typename T>
ModelState<T> random_state(const ModelConfig& cfg, uint64_t seed, double spread = 0.3) {
  ModelState<T> s(cfg);
  Rng rng(seed);
  for (auto& v : s.flat()) v = static_cast<T>(rng.uniform(-spread, spread));
  return s;
}

std::vector<int> random_ids(const ModelConfig& cfg, std::size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> ids(n);
  for (auto& t : ids) t = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
  return ids;
}

// Independent closed-form parameter count.
std::size_t formula_count(const ModelConfig& c) {
  const std::size_t C = c.d_model, V = c.vocab_size, F = c.d_ffn, L = c.n_layers;
  const std::size_t Dw = c.decay_rank(), Da = c.aaa_rank(), Dv = c.mv_rank(), Dg = c.gate_rank();
  std::size_t per = 4 * C + 6 * C + C + 2 * C * Dw + C + 2 * C * Da + 2 * C * Dg + 3 * C + 4 * C * C + 2 * C + C +
                    2 * C * F;
  return V * C + 2 * C + L * per + (L - 1) * (C + 2 * C * Dv) + 2 * C + C * V;
}

}  // namespace

TEST_CASE("layout sizes") {
  const auto paper = ModelConfig::paper();
  CHECK(paper.n_heads() == 6);
  CHECK(paper.decay_rank() == 32);
  CHECK(paper.aaa_rank() == 32);
  CHECK(paper.mv_rank() == 32);
  CHECK(paper.gate_rank() == 64);
  CHECK(count_parameters(paper) == formula_count(paper));
  CHECK(count_parameters(tiny()) == formula_count(tiny()));
  CHECK(count_trainable(paper, TrainMode::State) == 294912);
  CHECK(count_trainable(tiny(), TrainMode::State) == 256);
  // r (in + out) over 4 square attention matrices and the two ffn matrices.
  const std::size_t C = 384, F = 1344;
  CHECK(count_trainable(paper, TrainMode::Lora, 4) == 4 * 12 * (4 * 2 * C + 2 * (C + F)));
  CHECK(count_trainable(paper, TrainMode::Lora, 4) == 313344);
  Layout lay(tiny());
  CHECK_THROWS_AS(lay.find("blocks.0.att.v0"), std::out_of_range);
  CHECK(lay.tensor(lay.find("blocks.1.att.v0")).size == 16);
  CHECK_FALSE(lay.tensor(lay.emb).weight_decay);
  CHECK(lay.tensor(lay.head).weight_decay);
  ModelConfig bad = tiny();
  bad.head_size = 5;
  CHECK_THROWS_AS(Layout{bad}, ModelError);
}

TEST_CASE("init is deterministic and finite") {
  Parameters<double> a(tiny()), b(tiny()), c(tiny());
  init_parameters(a, 3);
  init_parameters(b, 3);
  init_parameters(c, 4);
  CHECK(parameter_hash(a) == parameter_hash(b));
  CHECK(parameter_hash(a) != parameter_hash(c));
  for (double v : a.flat()) REQUIRE(std::isfinite(v));
  // Orthogonal head: columns of (C, V) with V > C have orthogonal rows.
  const auto h = a.view(a.layout().head);
  const std::size_t C = 16, V = 30;
  const double gain2 = 0.25 * V / C;
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < V; ++k) dot += h[i * V + k] * h[j * V + k];
      CHECK(dot == doctest::Approx(i == j ? gain2 : 0.0).epsilon(1e-9).scale(1.0));
    }
}

TEST_CASE("recurrent steps match the teacher-forced pass") {
  ModelConfig cfg = tiny();
  cfg.d_model = 32;
  cfg.vocab_size = 50;
  const auto p = random_params<float>(cfg, 11);
  const auto ids = random_ids(cfg, 70, 5);
  ModelState<float> s1(cfg), s2(cfg);
  const auto full = forward_sequence(p, s1, ids);
  double worst = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto z = forward_step(p, s2, ids[t]);
    for (int v = 0; v < cfg.vocab_size; ++v)
      worst = std::max(worst, static_cast<double>(std::abs(z[v] - full[t * cfg.vocab_size + v])));
  }
  CHECK(worst < 1e-5);
  double sd = 0;
  for (std::size_t i = 0; i < s1.size(); ++i) sd = std::max(sd, static_cast<double>(std::abs(s1.flat()[i] - s2.flat()[i])));
  CHECK(sd < 1e-5);
}

TEST_CASE("causality and prefix state") {
  const auto cfg = tiny();
  const auto p = random_params<double>(cfg, 2);
  auto ids = random_ids(cfg, 30, 9);
  ModelState<double> s0(cfg);
  const auto base = forward_sequence(p, s0, ids);
  ids[20] = (ids[20] + 1) % cfg.vocab_size;
  ModelState<double> s1(cfg);
  const auto changed = forward_sequence(p, s1, ids);
  const std::size_t V = cfg.vocab_size;
  for (std::size_t i = 0; i < 20 * V; ++i) REQUIRE(changed[i] == base[i]);
  double diff = 0;
  for (std::size_t i = 20 * V; i < 21 * V; ++i) diff += std::abs(changed[i] - base[i]);
  CHECK(diff > 0);

  // Running a then b equals running a + b.
  ModelState<double> sa(cfg), sb(cfg);
  std::vector<int> a(ids.begin(), ids.begin() + 13), b(ids.begin() + 13, ids.end());
  forward_sequence(p, sa, a);
  const auto tail = forward_sequence(p, sa, b);
  const auto whole = forward_sequence(p, sb, ids);
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == doctest::Approx(whole[13 * V + i]).epsilon(1e-12));
}

TEST_CASE("uniform head gives ln V") {
  const auto cfg = tiny();
  auto p = random_params<double>(cfg, 4);
  for (auto& v : p.view(p.layout().head)) v = 0;
  const auto ids = random_ids(cfg, 12, 1);
  std::vector<uint8_t> mask(ids.size(), 1);
  CHECK(sequence_loss(p, ModelState<double>(cfg), ids, mask) == doctest::Approx(std::log(30.0)).epsilon(1e-12));
}

TEST_CASE("input validation") {
  const auto cfg = tiny();
  const auto p = random_params<double>(cfg, 4);
  ModelState<double> s(cfg);
  CHECK_THROWS_AS(forward_step(p, s, 30), ModelError);
  CHECK_THROWS_AS(forward_step(p, s, -1), ModelError);
  std::vector<int> ids{1, 2, 3};
  std::vector<uint8_t> none(3, 0), shortm(2, 1);
  CHECK_THROWS_AS(sequence_loss(p, s, ids, none), ModelError);
  CHECK_THROWS_AS(sequence_loss(p, s, ids, shortm), ModelError);
  ModelConfig other = cfg;
  other.d_model = 32;
  ModelState<double> wrong(other);
  CHECK_THROWS_AS(forward_step(p, wrong, 1), ModelError);
  CHECK(forward_sequence(p, s, std::vector<int>{}).empty());
}

// Central differences against the analytic gradient for every parameter and
// every initial-state entry.
TEST_CASE("gradients match finite differences") {
  const auto cfg = tiny();
  for (uint64_t seed : {1u, 2u, 3u}) {
    CAPTURE(seed);
    auto p = random_params<double>(cfg, seed);
    auto s = random_state<double>(cfg, seed + 100);
    const auto ids = random_ids(cfg, 37, seed + 200);
    std::vector<uint8_t> mask(ids.size(), 0);
    for (std::size_t t = 5; t < ids.size(); ++t) mask[t] = (t % 3 != 0);
    Parameters<double> g(p.layout_ptr());
    ModelState<double> gs(cfg);
    LossOptions opt;
    opt.shift_state_grad = true;
    loss_and_grads_opt(p, s, ids, mask, &g, &gs, opt);

    const double h = 1e-5;
    double worst = 0;
    // The floor keeps round-off (about 1e-10 absolute) on near-zero entries
    // from dominating the relative error.
    auto compare = [&](double analytic, double numeric) {
      const double err = std::abs(analytic - numeric) / std::max(1e-4, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, err);
    };
    auto flat = p.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      const double keep = flat[i];
      flat[i] = keep + h;
      const double up = sequence_loss(p, s, ids, mask);
      flat[i] = keep - h;
      const double dn = sequence_loss(p, s, ids, mask);
      flat[i] = keep;
      compare(g.flat()[i], (up - dn) / (2 * h));
    }
    auto sf = s.flat();
    for (std::size_t i = 0; i < sf.size(); ++i) {
      const double keep = sf[i];
      sf[i] = keep + h;
      const double up = sequence_loss(p, s, ids, mask);
      sf[i] = keep - h;
      const double dn = sequence_loss(p, s, ids, mask);
      sf[i] = keep;
      compare(gs.flat()[i], (up - dn) / (2 * h));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("state gradient options") {
  const auto cfg = tiny();
  const auto p = random_params<double>(cfg, 8);
  const auto s = random_state<double>(cfg, 9);
  const auto ids = random_ids(cfg, 20, 10);
  std::vector<uint8_t> mask(ids.size(), 1);
  ModelState<double> gs(cfg);
  loss_and_grads(p, s, ids, mask, nullptr, &gs);
  // Default: only the WKV part is written.
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int i = 0; i < cfg.d_model; ++i) {
      CHECK(gs.att_shift(l)[i] == 0.0);
      CHECK(gs.ffn_shift(l)[i] == 0.0);
    }
    double mag = 0;
    for (std::size_t i = 0; i < gs.wkv_size(); ++i) mag += std::abs(gs.wkv(l)[i]);
    CHECK(mag > 0);
  }
  // Gradients accumulate.
  ModelState<double> twice(cfg);
  loss_and_grads(p, s, ids, mask, nullptr, &twice);
  loss_and_grads(p, s, ids, mask, nullptr, &twice);
  for (std::size_t i = 0; i < gs.size(); ++i) CHECK(twice.flat()[i] == doctest::Approx(2 * gs.flat()[i]));
}

TEST_CASE("lora adapter") {
  const auto cfg = tiny();
  const auto p = random_params<double>(cfg, 5);
  auto lora = make_lora<double>(p.layout(), 2, 4.0, 7);
  CHECK(lora.count() == count_trainable(cfg, TrainMode::Lora, 2));
  const auto merged = merge_lora(p, lora);
  CHECK(parameter_hash(merged) == parameter_hash(p));

  // Chain rule through the merge against finite differences.
  Rng rng(3);
  for (auto& t : lora.targets)
    for (auto& v : t.b) v = rng.uniform(-0.2, 0.2);
  const auto ids = random_ids(cfg, 18, 4);
  std::vector<uint8_t> mask(ids.size(), 1);
  const ModelState<double> s(cfg);
  Parameters<double> gw(p.layout_ptr());
  loss_and_grads(merge_lora(p, lora), s, ids, mask, &gw, nullptr);
  auto grad = lora;
  for (auto& t : grad.targets) {
    std::fill(t.a.begin(), t.a.end(), 0.0);
    std::fill(t.b.begin(), t.b.end(), 0.0);
  }
  lora_backward(lora, gw, grad);
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t ti : {std::size_t{0}, std::size_t{5}, std::size_t{9}})
    for (int which = 0; which < 2; ++which) {
      auto& vec = which == 0 ? lora.targets[ti].a : lora.targets[ti].b;
      const auto& gvec = which == 0 ? grad.targets[ti].a : grad.targets[ti].b;
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double keep = vec[i];
        vec[i] = keep + h;
        const double up = sequence_loss(merge_lora(p, lora), s, ids, mask);
        vec[i] = keep - h;
        const double dn = sequence_loss(merge_lora(p, lora), s, ids, mask);
        vec[i] = keep;
        const double num = (up - dn) / (2 * h);
        worst = std::max(worst, std::abs(num - gvec[i]) / std::max(1e-4, std::abs(num) + std::abs(gvec[i])));
      }
    }
  CHECK(worst < 1e-5);
}

TEST_CASE("checkpoint round trip") {
  const auto cfg = tiny();
  const auto p = random_params<double>(cfg, 6);
  const auto dir = std::filesystem::temp_directory_path() / "mrwkv_test_ckpt";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", to_checkpoint(p));
  const auto q = parameters_from<double>(load_checkpoint(dir / "m.ckpt"));
  CHECK(parameter_hash(q) == parameter_hash(p));
  CHECK(q.config() == cfg);

  const auto single = parameters_from<float>(checkpoint_from_bytes(checkpoint_to_bytes(to_checkpoint(p), true)));
  CHECK(parameter_hash(single) == parameter_hash(p.cast<float>()));

  const auto s = random_state<double>(cfg, 1);
  const auto s2 = state_from<double>(checkpoint_from_bytes(checkpoint_to_bytes(to_checkpoint(s), false)));
  CHECK(std::equal(s.flat().begin(), s.flat().end(), s2.flat().begin()));

  auto lora = make_lora<double>(p.layout(), 3, 6.0, 2);
  lora.targets[1].b[0] = 0.5;
  const auto l2 = lora_from<double>(checkpoint_from_bytes(checkpoint_to_bytes(to_checkpoint(lora, p.layout()), false)),
                                    p.layout());
  CHECK(l2.rank == 3);
  CHECK(l2.alpha == 6.0);
  CHECK(parameter_hash(merge_lora(p, l2)) == parameter_hash(merge_lora(p, lora)));

  auto bytes = checkpoint_to_bytes(to_checkpoint(p), false);
  CHECK_THROWS_AS(checkpoint_from_bytes(std::span<const uint8_t>(bytes.data(), bytes.size() - 3)), ModelError);
  bytes[0] = 'X';
  CHECK_THROWS_AS(checkpoint_from_bytes(bytes), ModelError);
  CHECK_THROWS_AS(state_from<double>(to_checkpoint(p)), ModelError);
  std::filesystem::remove_all(dir);
}
