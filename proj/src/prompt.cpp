#include "mrwkv/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mrwkv::prompt {

using tok::Kind;

tok::DurationClass duration_class(int64_t duration_ticks, int ticks_per_quarter) {
  if (ticks_per_quarter <= 0) throw std::invalid_argument("ticks_per_quarter must be positive");
  const double quarters = std::max<double>(1.0, static_cast<double>(duration_ticks)) / ticks_per_quarter;
  const double l = std::log2(quarters);
  // Class c (0 = whole) sits at log2 = 2 - c. Ties round toward the shorter class.
  const double c = std::floor(2.0 - l + 0.5);
  return static_cast<tok::DurationClass>(static_cast<int>(std::clamp(c, 0.0, 4.0)));
}

AttributeControls compute_controls(std::span<const midi::Note> bar_notes, int ticks_per_quarter, int poly_cap) {
  if (bar_notes.empty()) throw std::invalid_argument("attribute controls of an empty bar");
  AttributeControls c;
  c.density = std::min<int>(static_cast<int>(bar_notes.size()), AttributeControls::kDensityOver);
  for (const auto& n : bar_notes)
    c.dur_flags[static_cast<std::size_t>(duration_class(n.duration, ticks_per_quarter))] = true;

  // Sounding notes at each onset: started at or before it and not yet ended.
  std::vector<int64_t> onsets, ends;
  for (const auto& n : bar_notes) {
    onsets.push_back(n.onset);
    ends.push_back(n.end());
  }
  std::sort(onsets.begin(), onsets.end());
  std::sort(ends.begin(), ends.end());
  int lo = INT32_MAX, hi = 0;
  for (std::size_t i = 0; i < onsets.size();) {
    const int64_t t = onsets[i];
    while (i < onsets.size() && onsets[i] == t) ++i;
    const auto ended = std::upper_bound(ends.begin(), ends.end(), t) - ends.begin();
    const int sounding = static_cast<int>(i) - static_cast<int>(ended);
    lo = std::min(lo, sounding);
    hi = std::max(hi, sounding);
  }
  c.poly_min = std::clamp(lo, 1, poly_cap);
  c.poly_max = std::clamp(hi, 1, poly_cap);
  return c;
}

std::vector<int> control_tokens(const AttributeControls& c, const tok::BaseVocab& vocab) {
  if (c.poly_min > c.poly_max) throw PromptError("poly_min exceeds poly_max");
  std::vector<int> out;
  out.reserve(kControlsPerBar);
  try {
    out.push_back(vocab.id(Kind::Density, c.density));
    for (std::size_t k = 0; k < tok::kDurationClasses; ++k)
      out.push_back(vocab.id(Kind::DurClass, static_cast<int>(2 * k) + (c.dur_flags[k] ? 1 : 0)));
    out.push_back(vocab.id(Kind::PolyMin, c.poly_min));
    out.push_back(vocab.id(Kind::PolyMax, c.poly_max));
  } catch (const std::out_of_range&) {
    throw PromptError("attribute control value out of range");
  }
  return out;
}

AttributeControls controls_from_tokens(std::span<const int> tokens, const tok::BaseVocab& vocab) {
  if (tokens.size() != kControlsPerBar) throw PromptError("wrong number of control tokens");
  AttributeControls c;
  auto expect = [&](std::size_t i, Kind k) {
    if (!vocab.is(tokens[i], k)) throw tok::TokenizerError("expected " + std::string(tok::kind_name(k)), i);
    return vocab.value(tokens[i]);
  };
  c.density = expect(0, Kind::Density);
  for (std::size_t k = 0; k < tok::kDurationClasses; ++k) {
    const int v = expect(1 + k, Kind::DurClass);
    if (v / 2 != static_cast<int>(k)) throw tok::TokenizerError("duration flags out of order", 1 + k);
    c.dur_flags[k] = (v % 2) == 1;
  }
  c.poly_min = expect(6, Kind::PolyMin);
  c.poly_max = expect(7, Kind::PolyMax);
  if (c.poly_min > c.poly_max) throw tok::TokenizerError("poly_min exceeds poly_max", 7);
  return c;
}

std::vector<midi::Bar> prompt_bars(const tok::RemiTokenizer& tk, const midi::Score& score) {
  return midi::bar_grid(score, tk.quantize_score(score).end_tick());
}

namespace {

std::vector<midi::Note> quantized_track(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track) {
  if (track >= score.tracks.size()) throw PromptError("track index out of range");
  const auto& tr = score.tracks[track];
  std::vector<midi::Note> notes;
  notes.reserve(tr.notes.size());
  for (const auto& n : tr.notes) notes.push_back(tk.quantize(n, score.ticks_per_quarter, tr.is_drums(), nullptr));
  midi::normalize_notes(notes);
  return notes;
}

std::vector<midi::Note> slice(const std::vector<midi::Note>& sorted, const midi::Bar& bar) {
  auto lo = std::lower_bound(sorted.begin(), sorted.end(), bar.start,
                             [](const midi::Note& n, int64_t t) { return n.onset < t; });
  auto hi = std::lower_bound(lo, sorted.end(), bar.end, [](const midi::Note& n, int64_t t) { return n.onset < t; });
  return {lo, hi};
}

void check_spec(const PromptSpec& spec, const midi::Score& score, std::size_t nbars) {
  if (spec.track >= score.tracks.size()) throw PromptError("track index out of range");
  if (spec.infill_len < 1) throw PromptError("infill length must be at least 1");
  if (spec.infill_start + spec.infill_len > nbars) throw PromptError("infill region outside the score");
  std::vector<std::size_t> order = spec.track_order;
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> ident(score.tracks.size());
  std::iota(ident.begin(), ident.end(), 0);
  if (!spec.track_order.empty() && order != ident) throw PromptError("track_order is not a permutation");
  if (!spec.controls.empty() && spec.controls.size() != spec.infill_len)
    throw PromptError("controls must have one entry per infill bar");
}

}  // namespace

std::vector<midi::Note> notes_in_bar(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track,
                                     const midi::Bar& bar) {
  return slice(quantized_track(tk, score, track), bar);
}

std::vector<AttributeControls> region_controls(const tok::RemiTokenizer& tk, const midi::Score& score,
                                               std::size_t track, std::size_t start, std::size_t len) {
  const auto bars = prompt_bars(tk, score);
  if (start + len > bars.size()) throw PromptError("infill region outside the score");
  const auto notes = quantized_track(tk, score, track);
  std::vector<AttributeControls> out;
  for (std::size_t b = start; b < start + len; ++b) {
    const auto in_bar = slice(notes, bars[b]);
    if (in_bar.empty()) throw PromptError("bar " + std::to_string(b) + " is empty; controls must be supplied");
    out.push_back(compute_controls(in_bar, score.ticks_per_quarter, tk.config().poly_max));
  }
  return out;
}

Prompt build_prompt(const tok::RemiTokenizer& tk, const midi::Score& score, const PromptSpec& spec, Mode mode) {
  const auto& v = tk.vocab();
  const auto bars = prompt_bars(tk, score);
  check_spec(spec, score, bars.size());
  const auto controls =
      spec.controls.empty() ? region_controls(tk, score, spec.track, spec.infill_start, spec.infill_len)
                            : spec.controls;
  const std::size_t lo = spec.infill_start - std::min(spec.context_bars, spec.infill_start);
  const std::size_t hi = std::min(bars.size(), spec.infill_start + spec.infill_len + spec.context_bars);

  std::vector<std::size_t> order = spec.track_order;
  if (order.empty()) {
    order.resize(score.tracks.size());
    std::iota(order.begin(), order.end(), 0);
  }

  Prompt p;
  auto& out = p.tokens;
  for (std::size_t t : order) {
    out.push_back(v.id(Kind::Track_Start));
    out.push_back(v.id(Kind::Program, score.tracks[t].program));
    const auto enc = tk.encode_bars(score, t, lo, hi, true);
    for (std::size_t b = lo; b < hi; ++b) {
      if (t == spec.track && b >= spec.infill_start && b < spec.infill_start + spec.infill_len)
        out.push_back(v.id(Kind::Infill_Bar));
      else
        out.insert(out.end(), enc[b - lo].begin(), enc[b - lo].end());
    }
    out.push_back(v.id(Kind::Track_End));
  }

  p.fill_start = out.size();
  out.push_back(v.id(Kind::FillBar_Start));
  if (mode == Mode::Infer) {
    const auto c = control_tokens(controls.front(), v);
    out.insert(out.end(), c.begin(), c.end());
    p.fill_end = out.size();
    return p;
  }
  const auto fill = tk.encode_bars(score, spec.track, spec.infill_start, spec.infill_start + spec.infill_len, false);
  for (std::size_t i = 0; i < fill.size(); ++i) {
    if (i > 0) out.push_back(v.bar_none());
    const auto c = control_tokens(controls[i], v);
    out.insert(out.end(), c.begin(), c.end());
    out.insert(out.end(), fill[i].begin() + 1, fill[i].end());
  }
  p.fill_end = out.size();
  out.push_back(v.id(Kind::FillBar_End));
  return p;
}

PromptLayout validate_prompt(std::span<const int> tokens, const tok::BaseVocab& vocab) {
  PromptLayout layout;
  const int units = vocab.config().max_positions();
  std::size_t i = 0;
  auto at = [&](std::size_t k) { return k < tokens.size() ? tokens[k] : -1; };
  auto fail = [&](const std::string& what, std::size_t k) -> tok::TokenizerError {
    return tok::TokenizerError(what, k);
  };
  // Bar content up to the next structural token; controls are not allowed here.
  auto content = [&](bool meta) {
    tok::BarGrammar g(vocab, units, meta);
    while (i < tokens.size()) {
      const int id = tokens[i];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw fail("token id out of range", i);
      const Kind k = vocab.kind(id);
      if (tok::is_structural(k)) break;
      if (tok::is_control(k)) throw fail("control token outside a control block", i);
      if (!g.accepts(id)) throw fail("unexpected " + tok::to_string(vocab.token(id)), i);
      g.advance(id);
      ++i;
    }
    if (!g.can_end()) throw fail("truncated note group", i);
  };

  while (vocab.is(at(i), Kind::Track_Start)) {
    ++i;
    if (!vocab.is(at(i), Kind::Program)) throw fail("expected Program", i);
    ++i;
    while (true) {
      const int id = at(i);
      if (vocab.is(id, Kind::Infill_Bar)) {
        ++layout.infill_bars;
        ++i;
      } else if (vocab.is(id, Kind::Bar_None)) {
        ++i;
        content(true);
      } else if (vocab.is(id, Kind::Track_End)) {
        ++i;
        break;
      } else {
        throw fail("expected a bar or Track_End", i);
      }
    }
    ++layout.tracks;
  }
  if (layout.tracks == 0) throw fail("expected Track_Start", i);
  if (layout.infill_bars == 0) throw fail("no Infill_Bar in the context", i);
  if (!vocab.is(at(i), Kind::FillBar_Start)) throw fail("expected FillBar_Start", i);
  layout.fill_start = i++;

  auto controls = [&]() {
    if (i + kControlsPerBar > tokens.size()) throw fail("truncated control block", tokens.size());
    try {
      layout.controls.push_back(controls_from_tokens(tokens.subspan(i, kControlsPerBar), vocab));
    } catch (const tok::TokenizerError& e) {
      throw fail(e.what(), i + e.index());
    }
    i += kControlsPerBar;
  };
  controls();
  layout.filled_bars = 1;
  while (i < tokens.size()) {
    content(false);
    if (i == tokens.size()) break;
    const int id = tokens[i];
    if (vocab.is(id, Kind::Bar_None)) {
      ++i;
      controls();
      ++layout.filled_bars;
    } else if (vocab.is(id, Kind::FillBar_End)) {
      layout.fill_end = i++;
      if (i != tokens.size()) throw fail("tokens after FillBar_End", i);
      if (layout.filled_bars != layout.infill_bars) throw fail("filled bar count differs from Infill_Bar count", i - 1);
    } else {
      throw fail("unexpected structural token in the fill section", i);
    }
  }
  return layout;
}

std::vector<std::vector<int>> split_bars(std::span<const int> generated, const tok::BaseVocab& vocab) {
  std::vector<std::vector<int>> bars(1);
  for (int id : generated) {
    if (vocab.is(id, Kind::Bar_None))
      bars.emplace_back();
    else
      bars.back().push_back(id);
  }
  return bars;
}

midi::Score splice_back(const tok::RemiTokenizer& tk, const midi::Score& score, const PromptSpec& spec,
                        std::span<const int> generated) {
  const auto bars = prompt_bars(tk, score);
  if (spec.track >= score.tracks.size()) throw PromptError("track index out of range");
  if (spec.infill_len < 1 || spec.infill_start + spec.infill_len > bars.size())
    throw PromptError("infill region outside the score");
  const auto parts = split_bars(generated, tk.vocab());
  if (parts.size() != spec.infill_len)
    throw PromptError("generated " + std::to_string(parts.size()) + " bars, expected " +
                      std::to_string(spec.infill_len));

  const int64_t r0 = bars[spec.infill_start].start;
  const int64_t r1 = bars[spec.infill_start + spec.infill_len - 1].end;
  std::vector<midi::Note> fresh;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& bar = bars[spec.infill_start + i];
    auto notes = tk.decode_bar_notes(parts[i], bar.start, bar.length(), score.ticks_per_quarter);
    fresh.insert(fresh.end(), notes.begin(), notes.end());
  }

  midi::Score out = score;
  auto& kept = out.tracks[spec.track].notes;
  std::erase_if(kept, [&](const midi::Note& n) { return n.onset >= r0 && n.onset < r1; });
  // Fit the new notes around kept notes of the same pitch so nothing outside
  // the region changes when the track is re-normalized.
  std::vector<midi::Note> accepted;
  for (auto n : fresh) {
    bool drop = false;
    for (const auto& k : kept) {
      if (k.pitch != n.pitch) continue;
      if (k.onset <= n.onset && n.onset < k.end()) drop = true;
      else if (n.onset < k.onset && k.onset < n.end()) n.duration = k.onset - n.onset;
    }
    if (!drop) accepted.push_back(n);
  }
  kept.insert(kept.end(), accepted.begin(), accepted.end());
  midi::normalize_notes(kept);
  return out;
}

// --- training example synthesis ---------------------------------------------

bool passes_corpus_filter(const tok::RemiTokenizer& tk, const midi::Score& score, const ExampleConfig& cfg) {
  if (score.tracks.empty() || score.note_count() < cfg.min_notes) return false;
  return prompt_bars(tk, score).size() >= cfg.min_bars;
}

std::size_t infill_length(std::size_t track_bars, std::size_t choice, double fraction) {
  if (track_bars == 0) throw std::invalid_argument("track has no bars");
  const auto scaled = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(track_bars)));
  return std::clamp<std::size_t>(std::max(choice, scaled), 1, track_bars);
}

std::size_t select_infill_length(std::size_t track_bars, Rng& rng) {
  static const std::vector<std::size_t> choices{1, 2, 4, 8};
  const std::size_t c = rng.choice(choices);
  const double u = rng.uniform(0.1, 0.4);
  return infill_length(track_bars, c, u);
}

std::optional<std::size_t> select_region_start(const std::vector<bool>& nonempty, std::size_t len, Rng& rng,
                                               int attempts) {
  if (len == 0 || len > nonempty.size()) return std::nullopt;
  const auto last = static_cast<int64_t>(nonempty.size() - len);
  for (int a = 0; a < attempts; ++a) {
    const auto s = static_cast<std::size_t>(rng.uniform_int(0, last));
    if (std::all_of(nonempty.begin() + static_cast<std::ptrdiff_t>(s),
                    nonempty.begin() + static_cast<std::ptrdiff_t>(s + len), [](bool b) { return b; }))
      return s;
  }
  return std::nullopt;
}

std::size_t select_context(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab, const midi::Score& score,
                           PromptSpec spec, std::size_t seq_budget) {
  const auto nbars = prompt_bars(tk, score).size();
  check_spec(spec, score, nbars);
  if (spec.controls.empty()) spec.controls = region_controls(tk, score, spec.track, spec.infill_start, spec.infill_len);
  auto fits = [&](std::size_t c) {
    spec.context_bars = c;
    return tok::apply_bpe(build_prompt(tk, score, spec, Mode::Train).tokens, vocab).size() <= seq_budget;
  };
  if (!fits(0)) throw ExampleRejected("infill region alone exceeds the sequence budget");
  // Beyond this the window is clipped on both sides and nothing changes.
  const std::size_t cmax = std::max(spec.infill_start, nbars - spec.infill_start - spec.infill_len);
  std::size_t lo = 0, hi = cmax;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    if (fits(mid))
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

int choose_octave_shift(const tok::RemiTokenizer& tk, const midi::Score& score, Rng& rng, int max_shift,
                        int attempts) {
  int lo = 128, hi = -1;
  for (const auto& t : score.tracks) {
    if (t.is_drums()) continue;
    for (const auto& n : t.notes) {
      lo = std::min(lo, n.pitch);
      hi = std::max(hi, n.pitch);
    }
  }
  const auto& cfg = tk.config();
  for (int a = 0; a < attempts; ++a) {
    const int s = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
    if (hi < 0 || (lo + 12 * s >= cfg.pitch_min && hi + 12 * s <= cfg.pitch_max)) return s;
  }
  return 0;
}

midi::Score transpose_octaves(const midi::Score& score, int octaves) {
  midi::Score out = score;
  for (auto& t : out.tracks) {
    if (t.is_drums()) continue;
    for (auto& n : t.notes) n.pitch = std::clamp(n.pitch + 12 * octaves, 0, 127);
  }
  return out;
}

std::vector<uint8_t> infill_loss_mask(std::span<const int> ids, const tok::Vocabulary& vocab, std::size_t fill_start,
                                      std::size_t fill_end) {
  std::vector<uint8_t> mask(ids.size(), 0);
  for (std::size_t t = fill_start + 1; t <= fill_end && t < ids.size(); ++t)
    mask[t] = tok::is_control(vocab.first_kind(ids[t])) ? 0 : 1;
  return mask;
}

TrainingExample make_training_example(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab,
                                      const midi::Score& score, Rng& rng, const ExampleConfig& cfg) {
  if (!passes_corpus_filter(tk, score, cfg)) throw ExampleRejected("score fails the corpus filter");
  TrainingExample ex;
  ex.octave_shift = choose_octave_shift(tk, score, rng, cfg.max_octave_shift, cfg.transpose_attempts);
  const midi::Score s = ex.octave_shift == 0 ? score : transpose_octaves(score, ex.octave_shift);

  std::vector<std::size_t> order(s.tracks.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  const auto bars = prompt_bars(tk, s);
  // Infill track candidates in random order; the first with a valid window wins.
  std::vector<std::size_t> candidates = order;
  rng.shuffle(candidates);
  PromptSpec spec;
  bool found = false;
  for (std::size_t t : candidates) {
    const auto notes = quantized_track(tk, s, t);
    std::vector<bool> nonempty(bars.size());
    for (std::size_t b = 0; b < bars.size(); ++b) nonempty[b] = !slice(notes, bars[b]).empty();
    if (std::find(nonempty.begin(), nonempty.end(), true) == nonempty.end()) continue;
    const std::size_t n = select_infill_length(bars.size(), rng);
    const auto start = select_region_start(nonempty, n, rng, cfg.region_attempts);
    if (!start) continue;
    spec.track = t;
    spec.infill_start = *start;
    spec.infill_len = n;
    found = true;
    break;
  }
  if (!found) throw ExampleRejected("no all-non-empty infill window found");
  spec.track_order = order;
  spec.controls = region_controls(tk, s, spec.track, spec.infill_start, spec.infill_len);
  spec.context_bars = select_context(tk, vocab, s, spec, cfg.seq_budget);

  const auto p = build_prompt(tk, s, spec, Mode::Train);
  ex.ids = tok::apply_bpe(p.tokens, vocab);
  const int fs = tk.vocab().id(Kind::FillBar_Start), fe = tk.vocab().id(Kind::FillBar_End);
  ex.target_begin = static_cast<std::size_t>(std::find(ex.ids.begin(), ex.ids.end(), fs) - ex.ids.begin());
  ex.target_end = static_cast<std::size_t>(std::find(ex.ids.begin(), ex.ids.end(), fe) - ex.ids.begin());
  if (cfg.full_sequence_loss) {
    ex.loss_mask.assign(ex.ids.size(), 1);
    ex.loss_mask[0] = 0;
  } else {
    ex.loss_mask = infill_loss_mask(ex.ids, vocab, ex.target_begin, ex.target_end);
  }
  ex.spec = std::move(spec);
  return ex;
}

}  // namespace mrwkv::prompt
