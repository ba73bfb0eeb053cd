#include <cmath>

#include "doctest.h"
#include "metric_refs.hpp"
#include "mrwkv/metrics.hpp"
#include "mrwkv/rng.hpp"
#include "mrwkv/synth.hpp"

using namespace mrwkv;
using namespace mrwkv::metrics;
using namespace metric_refs;

TEST_CASE("groove similarity examples") {
  const std::vector<uint8_t> a{1, 0, 0, 0}, b{1, 0, 1, 0}, c{0, 1, 1, 1};
  CHECK(groove_similarity(a, b) == 0.75);
  CHECK(groove_similarity(a, a) == 1.0);
  CHECK(groove_similarity(a, c) == 0.0);
  CHECK(groove_similarity(b, a) == groove_similarity(a, b));
  CHECK_THROWS_AS(groove_similarity(a, std::vector<uint8_t>{1, 0}), MetricError);
}

TEST_CASE("pitch class entropy examples") {
  const auto uniform = notes_at({60, 61, 62, 63, 64, 65, 66, 67, 68, 69, 70, 71});
  const auto single = notes_at({60, 72, 48});
  CHECK(entropy_bits(bar_chroma(single)) == 0.0);
  CHECK(pche_difference(single, notes_at({62})).value == 0.0);
  CHECK(pche_difference(uniform, single).value == doctest::Approx(std::log2(12.0)).epsilon(1e-15));
  CHECK(pche_difference(uniform, BarContent{0, 96, {}}).value == doctest::Approx(std::log2(12.0)));
  CHECK(pche_difference(BarContent{0, 96, {}}, BarContent{0, 96, {}}).skipped);
}

TEST_CASE("content preservation examples") {
  const std::vector<BarContent> c{notes_at({60}), notes_at({60})};
  const std::vector<BarContent> fs{notes_at({66}), notes_at({66})};
  CHECK(content_preservation(c, c).value == 1.0);
  CHECK(content_preservation(c, fs).value == 0.0);
  const std::vector<BarContent> silent{BarContent{0, 96, {}}, BarContent{96, 96, {}}};
  const auto r = content_preservation(c, silent);
  CHECK(std::isnan(r.value));
  CHECK(r.skipped == 32);
  CHECK_THROWS_AS(content_preservation(std::vector<BarContent>{}, std::vector<BarContent>{}), MetricError);
  CHECK_THROWS_AS(content_preservation(c, std::vector<BarContent>{c[0]}), MetricError);
  // Octave shifts leave chroma unchanged.
  const std::vector<BarContent> up{notes_at({72, 64}), notes_at({79})};
  const std::vector<BarContent> down{notes_at({48, 52}), notes_at({55})};
  CHECK(content_preservation(up, down).value == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("f1 examples") {
  BarContent o{0, 96, {}}, i{0, 96, {}};
  for (int k = 0; k < 4; ++k) o.notes.push_back({60 + k, 100, 12 * k, 6});
  for (int k = 0; k < 3; ++k) i.notes.push_back({60 + k, 90, 12 * k, 9});
  for (int k = 0; k < 3; ++k) i.notes.push_back({50 + k, 90, 12 * k, 9});
  F1Options opt;
  opt.ticks_per_quarter = kTpq;
  CHECK(f1_notes(std::vector{o}, std::vector{i}, opt).value == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(f1_notes(std::vector{o}, std::vector{o}, opt).value == 1.0);
  opt.match_duration = true;
  CHECK(f1_notes(std::vector{o}, std::vector{i}, opt).value == 0.0);
  const auto e = f1_notes(std::vector{BarContent{}}, std::vector{BarContent{}}, opt);
  CHECK(e.value == 1.0);
  CHECK(e.both_empty);
}

TEST_CASE("metrics match tick-level references on random pairs") {
  Rng rng(2024);
  F1Options fo;
  fo.ticks_per_quarter = kTpq;
  fo.positions_per_quarter = kPpq;
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nb = static_cast<std::size_t>(rng.uniform_int(1, 3));
    std::vector<BarContent> o, i;
    for (std::size_t b = 0; b < nb; ++b) {
      o.push_back(random_bar(rng, 96 * static_cast<int64_t>(b), 96, 10));
      i.push_back(random_bar(rng, 96 * static_cast<int64_t>(b), 96, 10));
    }
    const auto cp = content_preservation(o, i);
    const double want_cp = ref_cp(o, i, 16);
    if (std::isnan(want_cp))
      CHECK(std::isnan(cp.value));
    else
      CHECK(std::abs(cp.value - want_cp) < 1e-12);
    // Symmetry.
    const auto cp_rev = content_preservation(i, o);
    CHECK((std::isnan(cp.value) || std::abs(cp.value - cp_rev.value) < 1e-12));
    for (std::size_t b = 0; b < nb; ++b) {
      const auto go = groove_pattern(o[b], kTpq, kPpq), gi = groove_pattern(i[b], kTpq, kPpq);
      REQUIRE(go == ref_groove(o[b]));
      CHECK(std::abs(groove_similarity(go, gi) - ref_gs(ref_groove(o[b]), ref_groove(i[b]))) < 1e-12);
      const auto p = pche_difference(o[b], i[b]);
      if (o[b].notes.empty() && i[b].notes.empty())
        CHECK(p.skipped);
      else
        CHECK(std::abs(p.value - std::abs(ref_entropy(o[b]) - ref_entropy(i[b]))) < 1e-12);
    }
    CHECK(std::abs(f1_notes(o, i, fo).value - ref_f1(o, i)) < 1e-12);
    ++compared;
  }
  CHECK(compared == 100);
}

TEST_CASE("chroma on uneven step boundaries") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = random_bar(rng, 1000, 100, 6);
    const auto steps = chroma_steps(b, 16);
    for (int t = 0; t < 16; ++t) {
      const auto want = ref_chroma(b, 1000 + 100 * t / 16, 1000 + 100 * (t + 1) / 16);
      for (int p = 0; p < 12; ++p) CHECK(std::abs(steps[t][p] - want[p]) < 1e-12);
    }
  }
}

TEST_CASE("groove compatibility grid") {
  BarContent b{0, 96, {{60, 100, 0, 6}, {62, 100, 47, 6}, {64, 100, 95, 1}}};
  const auto g = groove_pattern(b, kTpq, kPpq, 16);
  REQUIRE(g.size() == 16);
  CHECK(g[0] == 1);
  CHECK(g[7] == 1);
  CHECK(g[15] == 1);
  CHECK(std::count(g.begin(), g.end(), 1) == 3);
  CHECK(groove_pattern(b, kTpq, kPpq).size() == 32);
}

TEST_CASE("attribute adherence") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nb = 4;
    std::vector<BarContent> bars;
    std::vector<prompt::AttributeControls> req;
    for (std::size_t b = 0; b < nb; ++b) {
      bars.push_back(random_bar(rng, 96 * static_cast<int64_t>(b), 96, 22));
      BarContent other = random_bar(rng, 0, 96, 22);
      if (other.notes.empty()) other.notes.push_back({60, 100, 0, 12});
      req.push_back(prompt::compute_controls(rng.uniform() < 0.5 || bars.back().notes.empty() ? other.notes
                                                                                               : bars.back().notes,
                                             kTpq));
    }
    const auto a = attribute_adherence(req, bars, kTpq);
    double dens = 0, dur = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const int c = static_cast<int>(bars[b].notes.size());
      dens += req[b].density == 19 ? (c >= 18 ? 0 : 18 - c) : std::abs(c - req[b].density);
      if (c > 0) dur += prompt::compute_controls(bars[b].notes, kTpq).dur_flags == req[b].dur_flags;
    }
    CHECK(std::abs(a.density_abs_diff - dens / nb) < 1e-12);
    CHECK(std::abs(a.success.at("dur_flags") - dur / nb) < 1e-12);
  }
  // Exact match.
  std::vector<BarContent> bars{notes_at({60, 64}), notes_at({60, 62, 64})};
  std::vector<prompt::AttributeControls> req{prompt::compute_controls(bars[0].notes, kTpq),
                                             prompt::compute_controls(bars[1].notes, kTpq)};
  const auto a = attribute_adherence(req, bars, kTpq);
  CHECK(a.density_abs_diff == 0.0);
  for (const auto& [k, v] : a.success) CHECK(v == 1.0);
  req[0].density = 4;
  CHECK(attribute_adherence(req, bars, kTpq).density_abs_diff == 1.0);
}

TEST_CASE("score-level self comparison") {
  const tok::RemiTokenizer tk;
  const auto songs = synth::make_corpus(synth::style_a(), 3, 12, 17);
  std::vector<ExampleMetrics> ex;
  for (const auto& s : songs)
    for (std::size_t track = 0; track < s.tracks.size(); ++track) {
      const auto m = evaluate_example(tk, s, s, track, 2, 4);
      CHECK(m.cp == 1.0);
      CHECK(m.gs == 1.0);
      CHECK(m.pche == 0.0);
      CHECK(m.f1 == 1.0);
      ex.push_back(m);
    }
  // Against a different song the scores drop below perfect.
  const auto m = evaluate_example(tk, songs[0], songs[1], 0, 2, 4);
  CHECK(m.f1 < 1.0);
  const auto r = aggregate(ex);
  CHECK(r.gs.mean == 1.0);
  CHECK(r.gs.n == ex.size());
  const auto js = report_to_json(r);
  CHECK(js.find("\"pche\"") != std::string::npos);
  CHECK_THROWS_AS(evaluate_example(tk, songs[0], songs[1], 9, 0, 1), MetricError);
}
