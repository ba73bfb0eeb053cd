#include <algorithm>
#include <map>
#include <random>

#include "doctest.h"
#include "mrwkv/prompt.hpp"
#include "test_util.hpp"

using namespace mrwkv;
using namespace mrwkv::prompt;
using tok::Kind;

namespace {

midi::Score make_score(int nbars, std::vector<midi::Track> tracks) {
  midi::Score s;
  s.tempo_map = {{0, 500000}};
  s.timesig_map = {{0, 4, 4}};
  s.tracks = std::move(tracks);
  midi::normalize(s);
  (void)nbars;
  return s;
}

// One quarter note per beat on every bar of one melodic track.
midi::Track dense_track(int program, int nbars, int pitch = 60) {
  midi::Track t{program, {}};
  for (int b = 0; b < nbars; ++b)
    for (int q = 0; q < 4; ++q) t.notes.push_back(midi::Note{pitch + q, 80, b * 1920 + q * 480, 480});
  return t;
}

// Grid-aligned random score with tempo on a bin so quantization is the identity.
midi::Score quantized_random(std::mt19937_64& rng, const tok::RemiTokenizer& tk, int ntracks, int nbars) {
  const auto& v = tk.vocab();
  std::vector<int> vels;
  for (int b = 0; b < 32; ++b) vels.push_back(v.velocity_value(b));
  auto s = testutil::random_score(rng, ntracks, nbars, true, vels);
  for (auto& t : s.tracks)
    for (auto& n : t.notes) n.pitch = std::clamp(n.pitch, 21, 108);
  for (auto& tc : s.tempo_map) tc = midi::TempoChange::from_bpm(tc.tick, v.tempo_value(v.tempo_bin(tc.bpm())));
  midi::normalize(s);
  return tk.quantize_score(s);
}

// Brute-force polyphony: at each onset, count notes with onset <= t < end.
std::pair<int, int> poly_oracle(const std::vector<midi::Note>& notes) {
  int lo = 1 << 30, hi = 0;
  for (const auto& a : notes) {
    int k = 0;
    for (const auto& b : notes)
      if (b.onset <= a.onset && a.onset < b.end()) ++k;
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }
  return {lo, hi};
}

std::vector<int> fill_content(const Prompt& p) {
  return {p.tokens.begin() + static_cast<std::ptrdiff_t>(p.fill_start) + 1,
          p.tokens.begin() + static_cast<std::ptrdiff_t>(p.fill_end)};
}

std::size_t count_kind(const std::vector<int>& ids, const tok::BaseVocab& v, Kind k) {
  return static_cast<std::size_t>(std::count_if(ids.begin(), ids.end(), [&](int id) { return v.is(id, k); }));
}

}  // namespace

TEST_CASE("compute_controls examples") {
  SUBCASE("25 notes fall in the overflow density bin") {
    std::vector<midi::Note> notes;
    for (int i = 0; i < 25; ++i) notes.push_back(midi::Note{40 + i, 80, (i % 8) * 240, 120});
    CHECK(compute_controls(notes, 480).density == AttributeControls::kDensityOver);
  }
  SUBCASE("one quarter note") {
    const std::vector<midi::Note> notes{{60, 80, 0, 480}};
    const auto c = compute_controls(notes, 480);
    CHECK(c.density == 1);
    CHECK(c.dur_flags == std::array<bool, 5>{false, false, true, false, false});
    CHECK(c.poly_min == 1);
    CHECK(c.poly_max == 1);
  }
  SUBCASE("three-note chord then a single note") {
    const std::vector<midi::Note> notes{{60, 80, 0, 480}, {64, 80, 0, 480}, {67, 80, 0, 480}, {72, 80, 960, 480}};
    const auto c = compute_controls(notes, 480);
    CHECK(c.poly_min == 1);
    CHECK(c.poly_max == 3);
    CHECK(std::make_pair(c.poly_min, c.poly_max) == poly_oracle(notes));
  }
  SUBCASE("empty bar is an error") { CHECK_THROWS_AS(compute_controls({}, 480), std::invalid_argument); }
}

TEST_CASE("compute_controls polyphony matches the sweep oracle") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 500; ++i) {
    std::vector<midi::Note> notes;
    const int n = 1 + static_cast<int>(rng() % 10);
    for (int k = 0; k < n; ++k)
      notes.push_back(midi::Note{40 + k, 80, static_cast<int64_t>(rng() % 32) * 60,
                                 (1 + static_cast<int64_t>(rng() % 40)) * 60});
    const auto c = compute_controls(notes, 480);
    const auto [lo, hi] = poly_oracle(notes);
    CHECK(c.poly_min == lo);
    CHECK(c.poly_max == hi);
    CHECK(c.density == n);
  }
}

TEST_CASE("duration classes") {
  CHECK(duration_class(1920, 480) == tok::DurationClass::Whole);
  CHECK(duration_class(960, 480) == tok::DurationClass::Half);
  CHECK(duration_class(720, 480) == tok::DurationClass::Half);       // dotted quarter, log2 0.58
  CHECK(duration_class(320, 480) == tok::DurationClass::Eighth);     // triplet quarter, log2 -0.58
  CHECK(duration_class(160, 480) == tok::DurationClass::Sixteenth);  // triplet eighth, log2 -1.58
  CHECK(duration_class(60, 480) == tok::DurationClass::Sixteenth);
  CHECK(duration_class(7680, 480) == tok::DurationClass::Whole);
}

TEST_CASE("control tokens round trip") {
  const tok::BaseVocab v;
  AttributeControls c{7, {true, false, true, false, true}, 2, 5};
  const auto ids = control_tokens(c, v);
  CHECK(ids.size() == kControlsPerBar);
  CHECK(controls_from_tokens(ids, v) == c);
  c.poly_min = 6;
  CHECK_THROWS_AS(control_tokens(c, v), PromptError);
}

TEST_CASE("infill_length formula") {
  CHECK(infill_length(40, 2, 0.25) == 10);
  CHECK(infill_length(8, 8, 0.1) == 8);
  CHECK(infill_length(3, 8, 0.1) == 3);
  CHECK(infill_length(5, 1, 0.1) == 1);
}

TEST_CASE("select_infill_length histogram for L = 100") {
  // For L = 100 the uniform term floor(100 u) lies in [10, 39] and always
  // dominates the choice term, so N is uniform over those 30 values.
  Rng rng(42);
  const int draws = 100000;
  std::map<std::size_t, int> hist;
  for (int i = 0; i < draws; ++i) ++hist[select_infill_length(100, rng)];
  CHECK(hist.begin()->first == 10);
  CHECK(hist.rbegin()->first == 39);
  const double p = 1.0 / 30, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (const auto& [n, c] : hist) CHECK(std::abs(c - mean) < 5 * sd);
}

TEST_CASE("select_infill_length histogram for L = 12 against the formula") {
  // Oracle: integrate the formula over the four choices and the uniform density.
  Rng rng(7);
  const int draws = 100000;
  std::map<std::size_t, double> expected;
  const int grid = 30000;
  for (std::size_t c : {1u, 2u, 4u, 8u})
    for (int k = 0; k < grid; ++k)
      expected[infill_length(12, c, 0.1 + 0.3 * (k + 0.5) / grid)] += 1.0 / (4.0 * grid);
  std::map<std::size_t, int> hist;
  for (int i = 0; i < draws; ++i) ++hist[select_infill_length(12, rng)];
  for (const auto& [n, p] : expected) {
    const double sd = std::sqrt(draws * p * (1 - p));
    CHECK(std::abs(hist[n] - draws * p) < 5 * sd + 1);
  }
  for (const auto& [n, c] : hist) CHECK(expected.count(n) == 1);
}

TEST_CASE("select_region_start avoids empty bars") {
  Rng rng(1);
  const std::vector<bool> ne{true, false, true, true, true, false, true};
  for (int i = 0; i < 200; ++i) {
    const auto s = select_region_start(ne, 3, rng, 32);
    REQUIRE(s);
    CHECK(*s == 2);
  }
  CHECK_FALSE(select_region_start(ne, 4, rng, 32));
  CHECK_FALSE(select_region_start(ne, 8, rng, 32));
}

TEST_CASE("build_prompt layout for a one-track three-bar score") {
  const tok::RemiTokenizer tk;
  const auto& v = tk.vocab();
  const auto s = make_score(3, {dense_track(0, 3)});
  PromptSpec spec;
  spec.infill_start = 1;
  spec.infill_len = 1;
  spec.context_bars = 1;
  const auto p = build_prompt(tk, s, spec, Mode::Train);

  const auto bar0 = tk.encode_bars(s, 0, 0, 3, true)[0];
  const auto bar1 = tk.encode_bars(s, 0, 1, 2, false)[0];
  const auto bar2 = tk.encode_bars(s, 0, 0, 3, true)[2];
  std::vector<int> expected{v.id(Kind::Track_Start), v.id(Kind::Program, 0)};
  expected.insert(expected.end(), bar0.begin(), bar0.end());
  expected.push_back(v.id(Kind::Infill_Bar));
  expected.insert(expected.end(), bar2.begin(), bar2.end());
  expected.push_back(v.id(Kind::Track_End));
  expected.push_back(v.id(Kind::FillBar_Start));
  const auto ctl = control_tokens(AttributeControls{4, {false, false, true, false, false}, 1, 1}, v);
  expected.insert(expected.end(), ctl.begin(), ctl.end());
  expected.insert(expected.end(), bar1.begin() + 1, bar1.end());
  expected.push_back(v.id(Kind::FillBar_End));
  CHECK(p.tokens == expected);
  CHECK(p.fill_start == expected.size() - bar1.size() - ctl.size() - 1);
  CHECK(p.fill_end == expected.size() - 1);

  const auto layout = validate_prompt(p.tokens, v);
  CHECK(layout.tracks == 1);
  CHECK(layout.infill_bars == 1);
  CHECK(layout.filled_bars == 1);
  CHECK(layout.fill_end.has_value());

  SUBCASE("infer mode stops after the first bar's controls") {
    const auto q = build_prompt(tk, s, spec, Mode::Infer);
    std::vector<int> head(expected.begin(), expected.begin() + static_cast<std::ptrdiff_t>(p.fill_start) + 1);
    head.insert(head.end(), ctl.begin(), ctl.end());
    CHECK(q.tokens == head);
    CHECK(q.fill_end == q.tokens.size());
    CHECK_FALSE(validate_prompt(q.tokens, v).fill_end.has_value());
  }
}

TEST_CASE("build_prompt counts and errors") {
  const tok::RemiTokenizer tk;
  const auto& v = tk.vocab();
  const auto s = make_score(6, {dense_track(0, 6), dense_track(33, 6, 40)});
  PromptSpec spec;
  spec.track = 1;
  spec.infill_start = 2;
  spec.infill_len = 2;
  spec.context_bars = 1;
  spec.track_order = {1, 0};
  const auto p = build_prompt(tk, s, spec, Mode::Train);
  CHECK(count_kind(p.tokens, v, Kind::Infill_Bar) == 2);
  CHECK(count_kind(p.tokens, v, Kind::FillBar_Start) == 1);
  CHECK(count_kind(p.tokens, v, Kind::FillBar_End) == 1);
  CHECK(count_kind(p.tokens, v, Kind::Track_Start) == 2);
  CHECK(v.value(p.tokens[1]) == 33);
  // Controls follow FillBar_Start and every Bar_None of the fill section.
  const auto fill = fill_content(p);
  CHECK(v.is(fill[0], Kind::Density));
  const auto sep = std::find(fill.begin(), fill.end(), v.bar_none());
  REQUIRE(sep != fill.end());
  CHECK(v.is(*(sep + 1), Kind::Density));
  CHECK(build_prompt(tk, s, spec, Mode::Train).tokens == p.tokens);

  PromptSpec bad = spec;
  bad.infill_start = 5;
  CHECK_THROWS_AS(build_prompt(tk, s, bad, Mode::Train), PromptError);
  bad = spec;
  bad.track = 2;
  CHECK_THROWS_AS(build_prompt(tk, s, bad, Mode::Train), PromptError);
  bad = spec;
  bad.track_order = {0, 0};
  CHECK_THROWS_AS(build_prompt(tk, s, bad, Mode::Train), PromptError);
  bad = spec;
  bad.controls.resize(3);
  CHECK_THROWS_AS(build_prompt(tk, s, bad, Mode::Train), PromptError);
}

TEST_CASE("randomized prompts validate and splice back to the original") {
  const tok::RemiTokenizer tk;
  const auto& v = tk.vocab();
  std::mt19937_64 rng(12);
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    const auto s = quantized_random(rng, tk, 3, 4 + static_cast<int>(rng() % 6));
    const auto bars = prompt_bars(tk, s);
    if (bars.empty()) continue;
    PromptSpec spec;
    spec.track = rng() % s.tracks.size();
    spec.infill_len = 1 + rng() % std::min<std::size_t>(3, bars.size());
    spec.infill_start = rng() % (bars.size() - spec.infill_len + 1);
    spec.context_bars = rng() % 4;
    spec.track_order = {2, 0, 1};
    Prompt p;
    try {
      p = build_prompt(tk, s, spec, Mode::Train);
    } catch (const PromptError&) {
      // Empty bar in the region: supply controls instead.
      spec.controls.assign(spec.infill_len, AttributeControls{});
      p = build_prompt(tk, s, spec, Mode::Train);
    }
    const auto layout = validate_prompt(p.tokens, v);
    CHECK(layout.infill_bars == spec.infill_len);
    CHECK(layout.filled_bars == spec.infill_len);
    CHECK(splice_back(tk, s, spec, fill_content(p)) == s);
    ++checked;
  }
  CHECK(checked > 150);
}

TEST_CASE("splice_back replaces only the region") {
  const tok::RemiTokenizer tk;
  const auto& v = tk.vocab();
  std::mt19937_64 rng(31);
  for (int i = 0; i < 50; ++i) {
    const auto s = quantized_random(rng, tk, 2, 6);
    const auto bars = prompt_bars(tk, s);
    if (bars.size() < 4) continue;
    PromptSpec spec;
    spec.track = 0;
    spec.infill_start = 1;
    spec.infill_len = 2;
    // Two bars, each a single whole note.
    const std::vector<int> gen{v.id(Kind::Position, 0), v.id(Kind::Pitch, 50), v.id(Kind::Velocity, 10),
                               v.id(Kind::Duration, 32), v.bar_none(), v.id(Kind::Position, 4),
                               v.id(Kind::Pitch, 52), v.id(Kind::Velocity, 10), v.id(Kind::Duration, 8)};
    const auto out = splice_back(tk, s, spec, gen);
    CHECK(out.tracks[1] == s.tracks[1]);
    CHECK(out.tempo_map == s.tempo_map);
    const int64_t r0 = bars[1].start, r1 = bars[2].end;
    std::vector<midi::Note> outside_a, outside_b, inside;
    for (const auto& n : s.tracks[0].notes)
      if (n.onset < r0 || n.onset >= r1) outside_a.push_back(n);
    for (const auto& n : out.tracks[0].notes)
      if (n.onset < r0 || n.onset >= r1)
        outside_b.push_back(n);
      else
        inside.push_back(n);
    CHECK(outside_a == outside_b);
    CHECK(inside.size() <= 2);
    CHECK(inside.size() >= 1);
    CHECK_NOTHROW(midi::validate(out));
  }
  const auto s = make_score(4, {dense_track(0, 4)});
  PromptSpec spec;
  spec.infill_start = 1;
  spec.infill_len = 2;
  CHECK_THROWS_AS(splice_back(tk, s, spec, std::vector<int>{}), PromptError);
}

TEST_CASE("validate_prompt rejects malformed sequences") {
  const tok::RemiTokenizer tk;
  const auto& v = tk.vocab();
  const auto s = make_score(3, {dense_track(0, 3)});
  PromptSpec spec;
  spec.infill_start = 1;
  spec.context_bars = 1;
  const auto p = build_prompt(tk, s, spec, Mode::Train);

  auto bad = p.tokens;
  bad.erase(bad.begin() + static_cast<std::ptrdiff_t>(p.fill_start) + 1);  // drop Density
  CHECK_THROWS_AS(validate_prompt(bad, v), tok::TokenizerError);

  bad = p.tokens;
  std::swap(bad[p.fill_start + 2], bad[p.fill_start + 3]);  // duration flags out of order
  CHECK_THROWS_AS(validate_prompt(bad, v), tok::TokenizerError);

  bad = p.tokens;
  bad.push_back(v.bar_none());
  CHECK_THROWS_AS(validate_prompt(bad, v), tok::TokenizerError);

  bad = p.tokens;
  bad.insert(bad.end() - 1, v.bar_none());  // second filled bar but one Infill_Bar
  bad.insert(bad.end() - 1, p.tokens.begin() + static_cast<std::ptrdiff_t>(p.fill_start) + 1,
             p.tokens.begin() + static_cast<std::ptrdiff_t>(p.fill_start) + 1 + kControlsPerBar);
  try {
    validate_prompt(bad, v);
    FAIL("expected error");
  } catch (const tok::TokenizerError& e) {
    CHECK(e.index() == bad.size() - 1);
  }
}

TEST_CASE("select_context matches a linear scan") {
  const tok::RemiTokenizer tk;
  std::mt19937_64 rng(17);
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < 10; ++i) {
    const auto s = quantized_random(rng, tk, 2, 8);
    for (const auto& t : tk.encode_base(s)) corpus.push_back(t);
  }
  const auto voc = tok::train_bpe(corpus, tk.vocab().size() + 60);

  const auto s = make_score(20, {dense_track(0, 20), dense_track(5, 20, 48)});
  PromptSpec spec;
  spec.track = 1;
  spec.infill_start = 9;
  spec.infill_len = 2;
  auto length_at = [&](std::size_t c) {
    PromptSpec t = spec;
    t.context_bars = c;
    return tok::apply_bpe(build_prompt(tk, s, t, Mode::Train).tokens, voc).size();
  };
  SUBCASE("budget forcing an interior C") {
    for (std::size_t target : {0u, 1u, 3u, 5u}) {
      const std::size_t budget = length_at(target);
      std::size_t oracle = 0;
      for (std::size_t c = 0; c <= 20; ++c)
        if (length_at(c) <= budget) oracle = c;
      CHECK(select_context(tk, voc, s, spec, budget) == oracle);
      CHECK(oracle == target);
      CHECK(select_context(tk, voc, s, spec, budget + 1) == target);
    }
  }
  SUBCASE("everything fits") { CHECK(select_context(tk, voc, s, spec, 100000) == 9); }
  SUBCASE("region at bar 0") {
    spec.infill_start = 0;
    CHECK(select_context(tk, voc, s, spec, 100000) == 18);
  }
  SUBCASE("nothing fits") { CHECK_THROWS_AS(select_context(tk, voc, s, spec, 10), ExampleRejected); }
}

TEST_CASE("octave transposition keeps melodic pitches in range and drums fixed") {
  const tok::RemiTokenizer tk;
  midi::Track melodic{0, {{30, 80, 0, 480}, {70, 80, 480, 480}}};
  midi::Track drums{midi::kDrums, {{36, 100, 0, 120}}};
  const auto s = make_score(1, {melodic, drums});
  Rng rng(3);
  std::map<int, int> seen;
  for (int i = 0; i < 2000; ++i) {
    const int k = choose_octave_shift(tk, s, rng, 6, 64);
    ++seen[k];
    // 30 - 12 < 21 forbids negative shifts; 70 + 36 = 106 is the highest legal.
    CHECK(k >= 0);
    CHECK(k <= 3);
  }
  CHECK(seen.size() == 4);
  const auto t = transpose_octaves(s, 2);
  CHECK(t.tracks[0].notes[0].pitch == 54);
  CHECK(t.tracks[1].notes[0].pitch == 36);
}

TEST_CASE("make_training_example") {
  const tok::RemiTokenizer tk;
  const tok::Vocabulary voc;
  const auto& v = tk.vocab();
  ExampleConfig cfg;
  cfg.min_notes = 20;
  cfg.seq_budget = 1024;

  std::mt19937_64 gen(5);
  std::vector<midi::Score> scores;
  while (scores.size() < 20) {
    auto s = quantized_random(gen, tk, 3, 8 + static_cast<int>(gen() % 8));
    if (passes_corpus_filter(tk, s, cfg)) scores.push_back(std::move(s));
  }

  SUBCASE("fixed seed gives an identical stream") {
    auto run = [&] {
      std::vector<std::vector<int>> out;
      for (std::size_t f = 0; f < scores.size(); ++f) {
        Rng rng = Rng::substream(42, {f, 0});
        try {
          out.push_back(make_training_example(tk, voc, scores[f], rng, cfg).ids);
        } catch (const ExampleRejected&) {
          out.emplace_back();
        }
      }
      return out;
    };
    CHECK(run() == run());
  }

  SUBCASE("structure, budget and non-empty infill bars") {
    int made = 0;
    bool consecutive_empty_context = false;
    for (uint64_t k = 0; k < 10000; ++k) {
      Rng rng = Rng::substream(42, {k % scores.size(), k / scores.size()});
      TrainingExample ex;
      try {
        ex = make_training_example(tk, voc, scores[k % scores.size()], rng, cfg);
      } catch (const ExampleRejected&) {
        continue;
      }
      ++made;
      CHECK(ex.ids.size() <= cfg.seq_budget);
      const auto base = tok::invert_bpe(ex.ids, voc);
      const auto layout = validate_prompt(base, v);
      CHECK(layout.infill_bars == ex.spec.infill_len);
      CHECK(layout.filled_bars == ex.spec.infill_len);
      REQUIRE(ex.target_end < ex.ids.size());
      CHECK(v.is(ex.ids[ex.target_begin], Kind::FillBar_Start));
      CHECK(v.is(ex.ids[ex.target_end], Kind::FillBar_End));
      CHECK(ex.loss_mask[ex.target_end] == 1);
      CHECK(ex.loss_mask[ex.target_begin] == 0);
      const std::vector<int> fill(base.begin() + static_cast<std::ptrdiff_t>(layout.fill_start) + 1,
                                  base.end() - 1);
      for (const auto& bar : split_bars(fill, v))
        CHECK(std::any_of(bar.begin(), bar.end(), [&](int id) { return v.is(id, Kind::Pitch); }));
      for (std::size_t i = 0; i + 1 < layout.fill_start; ++i)
        if (base[i] == v.bar_none() && base[i + 1] == v.bar_none()) consecutive_empty_context = true;
    }
    CHECK(made > 7500);
    CHECK(consecutive_empty_context);
  }

  SUBCASE("zero shift and identity order reproduce build_prompt") {
    Rng rng(9);
    cfg.max_octave_shift = 0;
    const auto& s = scores[0];
    const auto ex = make_training_example(tk, voc, s, rng, cfg);
    auto spec = ex.spec;
    const auto p = build_prompt(tk, s, spec, Mode::Train);
    CHECK(tok::apply_bpe(p.tokens, voc) == ex.ids);
  }

  SUBCASE("corpus filter") {
    ExampleConfig strict;
    Rng rng(1);
    const auto small = make_score(4, {dense_track(0, 4)});
    CHECK_FALSE(passes_corpus_filter(tk, small, strict));
    CHECK_THROWS_AS(make_training_example(tk, voc, small, rng, strict), ExampleRejected);
  }
}
