#include "mrwkv/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace mrwkv::tok {

namespace {

constexpr std::array<std::string_view, kKindCount> kKindNames = {
    "PAD",     "Bar_None", "Track_Start", "Track_End", "FillBar_Start", "FillBar_End",
    "Infill_Bar", "Program", "TimeSig", "Tempo", "Position", "Pitch",
    "Velocity", "Duration", "Density", "DurClass", "PolyMin", "PolyMax"};

std::size_t kind_index(Kind k) { return static_cast<std::size_t>(k); }

}  // namespace

std::string_view kind_name(Kind k) { return kKindNames[kind_index(k)]; }

std::optional<Kind> kind_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kKindCount; ++i)
    if (kKindNames[i] == name) return static_cast<Kind>(i);
  return std::nullopt;
}

bool is_structural(Kind k) {
  switch (k) {
    case Kind::PAD:
    case Kind::Bar_None:
    case Kind::Track_Start:
    case Kind::Track_End:
    case Kind::FillBar_Start:
    case Kind::FillBar_End:
    case Kind::Infill_Bar:
    case Kind::Program:
      return true;
    default:
      return false;
  }
}

bool is_control(Kind k) {
  return k == Kind::Density || k == Kind::DurClass || k == Kind::PolyMin || k == Kind::PolyMax;
}

bool is_mergeable(Kind k) {
  return k == Kind::Position || k == Kind::Pitch || k == Kind::Velocity || k == Kind::Duration;
}

std::string to_string(const BaseToken& t) {
  std::string s(kind_name(t.kind));
  if (!is_structural(t.kind) || t.kind == Kind::Program) s += "=" + std::to_string(t.value);
  return s;
}

std::vector<std::pair<int, int>> TokenizerConfig::default_time_signatures() {
  std::vector<std::pair<int, int>> v;
  for (int n = 1; n <= 8; ++n) v.emplace_back(n, 4);
  for (int n = 1; n <= 16; ++n) v.emplace_back(n, 8);
  for (int n = 1; n <= 4; ++n) v.emplace_back(n, 2);
  for (int n = 1; n <= 16; ++n) v.emplace_back(n, 16);
  return v;
}

BaseVocab::BaseVocab(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.positions_per_quarter <= 0 || cfg_.velocity_bins <= 0 || cfg_.tempo_bins < 2 ||
      cfg_.pitch_min > cfg_.pitch_max || cfg_.max_duration_bars <= 0 || cfg_.poly_max <= 0 ||
      cfg_.density_bins <= 0 || cfg_.tempo_min <= 0 || cfg_.tempo_max <= cfg_.tempo_min)
    throw std::invalid_argument("invalid tokenizer configuration");
  first_.fill(-1);
  auto add_range = [&](Kind k, int lo, int hi) {
    first_[kind_index(k)] = static_cast<int>(tokens_.size());
    count_[kind_index(k)] = hi - lo + 1;
    value_base_[kind_index(k)] = lo;
    for (int v = lo; v <= hi; ++v) tokens_.push_back(BaseToken{k, v});
  };
  for (Kind k : {Kind::PAD, Kind::Bar_None, Kind::Track_Start, Kind::Track_End, Kind::FillBar_Start,
                 Kind::FillBar_End, Kind::Infill_Bar})
    add_range(k, 0, 0);
  add_range(Kind::Program, midi::kDrums, 127);
  add_range(Kind::TimeSig, 0, static_cast<int>(cfg_.time_signatures.size()) - 1);
  add_range(Kind::Tempo, 0, cfg_.tempo_bins - 1);
  add_range(Kind::Position, 0, cfg_.max_positions() - 1);
  add_range(Kind::Pitch, cfg_.pitch_min, cfg_.pitch_max);
  add_range(Kind::Velocity, 0, cfg_.velocity_bins - 1);
  add_range(Kind::Duration, 1, cfg_.max_duration_units());
  add_range(Kind::Density, 1, cfg_.density_bins + 1);
  add_range(Kind::DurClass, 0, 2 * static_cast<int>(kDurationClasses) - 1);
  add_range(Kind::PolyMin, 1, cfg_.poly_max);
  add_range(Kind::PolyMax, 1, cfg_.poly_max);
}

const BaseToken& BaseVocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("base token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> BaseVocab::find(Kind kind, int value) const {
  const auto k = kind_index(kind);
  if (first_[k] < 0) return std::nullopt;
  const int off = value - value_base_[k];
  if (off < 0 || off >= count_[k]) return std::nullopt;
  return first_[k] + off;
}

int BaseVocab::id(Kind kind, int value) const {
  auto r = find(kind, value);
  if (!r) throw std::out_of_range("no token " + std::string(kind_name(kind)) + "=" + std::to_string(value));
  return *r;
}

int BaseVocab::velocity_bin(int velocity) const {
  velocity = std::clamp(velocity, 1, 127);
  return std::min(cfg_.velocity_bins - 1, (velocity - 1) * cfg_.velocity_bins / 127);
}

int BaseVocab::velocity_value(int bin) const {
  return std::clamp(1 + (2 * bin + 1) * 127 / (2 * cfg_.velocity_bins), 1, 127);
}

int BaseVocab::tempo_bin(double bpm) const {
  const double span = std::log(cfg_.tempo_max / cfg_.tempo_min);
  const double x = (cfg_.tempo_bins - 1) * std::log(std::max(bpm, 1e-9) / cfg_.tempo_min) / span;
  return std::clamp(static_cast<int>(std::lround(x)), 0, cfg_.tempo_bins - 1);
}

double BaseVocab::tempo_value(int bin) const {
  return cfg_.tempo_min * std::pow(cfg_.tempo_max / cfg_.tempo_min, static_cast<double>(bin) / (cfg_.tempo_bins - 1));
}

int BaseVocab::timesig_index(int numerator, int denominator) const {
  const auto& v = cfg_.time_signatures;
  auto it = std::find(v.begin(), v.end(), std::make_pair(numerator, denominator));
  if (it == v.end()) return -1;
  return static_cast<int>(it - v.begin());
}

int BaseVocab::clamp_pitch(int pitch) const { return std::clamp(pitch, cfg_.pitch_min, cfg_.pitch_max); }

// ---------------------------------------------------------------------------

BarGrammar::BarGrammar(const BaseVocab& vocab, int bar_units, bool allow_meta)
    : vocab_(&vocab), bar_units_(bar_units), allow_meta_(allow_meta) {}

void BarGrammar::reset(int bar_units) {
  bar_units_ = bar_units;
  state_ = State::BarStart;
  last_position_ = -1;
  last_pitch_ = -1;
  notes_ = 0;
}

bool BarGrammar::accepts(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_->size()) return false;
  const auto& t = vocab_->token(id);
  switch (t.kind) {
    case Kind::Density:
    case Kind::DurClass:
    case Kind::PolyMin:
    case Kind::PolyMax:
      return state_ == State::BarStart && last_position_ < 0;
    case Kind::TimeSig:
      return allow_meta_ && state_ == State::BarStart;
    case Kind::Position:
      return (state_ == State::BarStart || state_ == State::AfterTimeSig || state_ == State::AfterTempo ||
              state_ == State::AfterDuration) &&
             t.value > last_position_ && t.value < bar_units_;
    case Kind::Tempo:
      return allow_meta_ && state_ == State::AfterPosition;
    case Kind::Pitch:
      return state_ == State::AfterPosition || state_ == State::AfterTempo ||
             (state_ == State::AfterDuration && t.value > last_pitch_);
    case Kind::Velocity:
      return state_ == State::AfterPitch;
    case Kind::Duration:
      return state_ == State::AfterVelocity;
    default:
      return false;
  }
}

void BarGrammar::advance(int id) {
  if (!accepts(id)) throw std::logic_error("token not accepted by bar grammar");
  const auto& t = vocab_->token(id);
  switch (t.kind) {
    case Kind::TimeSig:
      state_ = State::AfterTimeSig;
      break;
    case Kind::Position:
      state_ = State::AfterPosition;
      last_position_ = t.value;
      last_pitch_ = -1;
      break;
    case Kind::Tempo:
      state_ = State::AfterTempo;
      break;
    case Kind::Pitch:
      state_ = State::AfterPitch;
      last_pitch_ = t.value;
      break;
    case Kind::Velocity:
      state_ = State::AfterVelocity;
      break;
    case Kind::Duration:
      state_ = State::AfterDuration;
      ++notes_;
      break;
    default:
      break;
  }
}

bool BarGrammar::can_end() const {
  return state_ == State::BarStart || state_ == State::AfterTimeSig || state_ == State::AfterTempo ||
         state_ == State::AfterDuration;
}

// ---------------------------------------------------------------------------

RemiTokenizer::RemiTokenizer(TokenizerConfig cfg) : vocab_(std::move(cfg)) {}

int RemiTokenizer::bar_units(int numerator, int denominator) const {
  const int whole = config().units_per_whole();
  if (denominator <= 0 || (whole * numerator) % denominator != 0)
    throw std::invalid_argument("time signature " + std::to_string(numerator) + "/" + std::to_string(denominator) +
                                " does not fit the position grid");
  return whole * numerator / denominator;
}

double RemiTokenizer::unit_ticks(int ticks_per_quarter) const {
  return static_cast<double>(ticks_per_quarter) / config().positions_per_quarter;
}

midi::Note RemiTokenizer::quantize(const midi::Note& n, int tpq, bool drums, EncodeReport* report) const {
  const double unit = unit_ticks(tpq);
  midi::Note q = n;
  q.onset = std::llround(static_cast<double>(std::llround(n.onset / unit)) * unit);
  int64_t units = std::llround(n.duration / unit);
  if (units < 1 || units > config().max_duration_units()) {
    if (units > config().max_duration_units() && report) ++report->clamped_durations;
    units = std::clamp<int64_t>(units, 1, config().max_duration_units());
  }
  q.duration = std::max<int64_t>(1, std::llround(units * unit));
  q.velocity = vocab_.velocity_value(vocab_.velocity_bin(n.velocity));
  const int p = vocab_.clamp_pitch(n.pitch);
  if (p != n.pitch) {
    if (report) ++report->clamped_pitches;
    q.pitch = p;
  }
  (void)drums;
  return q;
}

midi::Score RemiTokenizer::quantize_score(const midi::Score& score) const {
  midi::Score out = score;
  for (auto& t : out.tracks) {
    for (auto& n : t.notes) n = quantize(n, score.ticks_per_quarter, t.is_drums(), nullptr);
    midi::normalize_notes(t.notes);
  }
  return out;
}

std::vector<int> RemiTokenizer::encode_bar_notes(std::span<const midi::Note> notes, int64_t bar_start,
                                                 int64_t bar_length, int tpq, EncodeReport* report) const {
  const double unit = unit_ticks(tpq);
  std::vector<midi::Note> q;
  for (const auto& n : notes) q.push_back(quantize(n, tpq, false, report));
  midi::normalize_notes(q);
  std::vector<int> out;
  int last_pos = -1;
  const int max_pos = std::min<int>(config().max_positions(), static_cast<int>(std::llround(bar_length / unit)));
  for (const auto& n : q) {
    const int pos = static_cast<int>(std::llround((n.onset - bar_start) / unit));
    if (pos < 0 || pos >= max_pos) continue;
    if (pos != last_pos) {
      out.push_back(vocab_.id(Kind::Position, pos));
      last_pos = pos;
    }
    out.push_back(vocab_.id(Kind::Pitch, n.pitch));
    out.push_back(vocab_.id(Kind::Velocity, vocab_.velocity_bin(n.velocity)));
    const int units = static_cast<int>(std::clamp<int64_t>(std::llround(n.duration / unit), 1,
                                                           config().max_duration_units()));
    out.push_back(vocab_.id(Kind::Duration, units));
  }
  return out;
}

std::vector<std::vector<int>> RemiTokenizer::encode_bars(const midi::Score& score, std::size_t track,
                                                         std::size_t first_bar, std::size_t last_bar,
                                                         bool with_meta, EncodeReport* report) const {
  if (track >= score.tracks.size()) throw std::out_of_range("track index out of range");
  const int tpq = score.ticks_per_quarter;
  const double unit = unit_ticks(tpq);
  const auto bars = midi::bar_grid(score, quantize_score(score).end_tick());
  last_bar = std::min(last_bar, bars.size());
  std::vector<std::vector<int>> out;
  if (first_bar >= last_bar) return out;

  // Quantize once so that notes land in bars by their quantized onset.
  std::vector<midi::Note> notes;
  const auto& tr = score.tracks[track];
  for (const auto& n : tr.notes) notes.push_back(quantize(n, tpq, tr.is_drums(), report));
  midi::normalize_notes(notes);

  auto timesig_at = [&](int64_t tick) {
    const midi::TimeSignature* cur = &score.timesig_map.front();
    for (const auto& ts : score.timesig_map)
      if (ts.tick <= tick) cur = &ts;
    return *cur;
  };

  std::size_t ni = 0;
  while (ni < notes.size() && notes[ni].onset < bars[first_bar].start) ++ni;
  int last_tempo_bin = -1;
  std::pair<int, int> last_ts{-1, -1};
  for (std::size_t b = first_bar; b < last_bar; ++b) {
    const auto& bar = bars[b];
    std::vector<int> toks{vocab_.bar_none()};
    std::map<int, int> tempo_at_pos;  // position -> tempo bin
    if (with_meta) {
      const auto ts = timesig_at(bar.start);
      if (std::make_pair(ts.numerator, ts.denominator) != last_ts) {
        const int idx = vocab_.timesig_index(ts.numerator, ts.denominator);
        if (idx < 0)
          throw TokenizerError("unsupported time signature " + std::to_string(ts.numerator) + "/" +
                                   std::to_string(ts.denominator),
                               0);
        toks.push_back(vocab_.id(Kind::TimeSig, idx));
        last_ts = {ts.numerator, ts.denominator};
      }
      if (b == first_bar) {
        uint32_t us = score.tempo_map.front().us_per_quarter;
        for (const auto& tc : score.tempo_map)
          if (tc.tick <= bar.start) us = tc.us_per_quarter;
        tempo_at_pos[0] = vocab_.tempo_bin(60'000'000.0 / us);
      }
      for (const auto& tc : score.tempo_map) {
        if (tc.tick < bar.start || tc.tick >= bar.end || (b == first_bar && tc.tick == bar.start)) continue;
        const int pos = static_cast<int>(std::llround((tc.tick - bar.start) / unit));
        if (pos < config().max_positions()) tempo_at_pos[pos] = vocab_.tempo_bin(tc.bpm());
      }
    }
    const int max_pos = config().max_positions();
    std::map<int, std::vector<const midi::Note*>> groups;
    while (ni < notes.size() && notes[ni].onset < bar.end) {
      const int pos = static_cast<int>(std::llround((notes[ni].onset - bar.start) / unit));
      if (pos >= 0 && pos < max_pos) groups[pos].push_back(&notes[ni]);
      ++ni;
    }
    for (auto& [pos, tb] : tempo_at_pos) groups.try_emplace(pos);
    for (const auto& [pos, group] : groups) {
      auto tp = tempo_at_pos.find(pos);
      const bool emit_tempo = tp != tempo_at_pos.end() && tp->second != last_tempo_bin;
      if (group.empty() && !emit_tempo) continue;
      toks.push_back(vocab_.id(Kind::Position, pos));
      if (emit_tempo) {
        toks.push_back(vocab_.id(Kind::Tempo, tp->second));
        last_tempo_bin = tp->second;
      }
      for (const midi::Note* n : group) {
        toks.push_back(vocab_.id(Kind::Pitch, n->pitch));
        toks.push_back(vocab_.id(Kind::Velocity, vocab_.velocity_bin(n->velocity)));
        const int units = static_cast<int>(
            std::clamp<int64_t>(std::llround(n->duration / unit), 1, config().max_duration_units()));
        toks.push_back(vocab_.id(Kind::Duration, units));
      }
    }
    out.push_back(std::move(toks));
  }
  return out;
}

std::vector<std::vector<int>> RemiTokenizer::encode_base(const midi::Score& score, EncodeReport* report) const {
  midi::validate(score);
  const auto nbars = midi::bar_grid(score, quantize_score(score).end_tick()).size();
  std::vector<std::vector<int>> out;
  for (std::size_t t = 0; t < score.tracks.size(); ++t) {
    std::vector<int> seq{vocab_.id(Kind::Program, score.tracks[t].program)};
    for (auto& bar : encode_bars(score, t, 0, nbars, true, report)) seq.insert(seq.end(), bar.begin(), bar.end());
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<midi::Note> RemiTokenizer::decode_bar_notes(std::span<const int> content, int64_t bar_start,
                                                        int64_t bar_length, int tpq) const {
  const double unit = unit_ticks(tpq);
  const int units = static_cast<int>(std::llround(bar_length / unit));
  BarGrammar g(vocab_, units, true);
  std::vector<midi::Note> notes;
  int pos = 0;
  midi::Note cur;
  for (std::size_t i = 0; i < content.size(); ++i) {
    const int id = content[i];
    if (!g.accepts(id)) {
      const std::string what = (id >= 0 && static_cast<std::size_t>(id) < vocab_.size())
                                   ? to_string(vocab_.token(id))
                                   : "id " + std::to_string(id);
      throw TokenizerError("unexpected token " + what + " in bar content", i);
    }
    g.advance(id);
    const auto& t = vocab_.token(id);
    switch (t.kind) {
      case Kind::Position:
        pos = t.value;
        break;
      case Kind::Pitch:
        cur = midi::Note{};
        cur.pitch = t.value;
        cur.onset = bar_start + std::llround(pos * unit);
        break;
      case Kind::Velocity:
        cur.velocity = vocab_.velocity_value(t.value);
        break;
      case Kind::Duration:
        cur.duration = std::max<int64_t>(1, std::llround(t.value * unit));
        notes.push_back(cur);
        break;
      default:
        break;
    }
  }
  if (!g.can_end()) throw TokenizerError("bar content ends inside a note group", content.size());
  return notes;
}

DecodedTrack RemiTokenizer::decode_base(std::span<const int> tokens, const DecodeContext& ctx) const {
  DecodedTrack out;
  if (tokens.empty() || !vocab_.is(tokens[0], Kind::Program))
    throw TokenizerError("track sequence must start with a Program token", 0);
  out.track.program = vocab_.value(tokens[0]);
  const int tpq = ctx.ticks_per_quarter;
  const double unit = unit_ticks(tpq);
  midi::TimeSignature ts = ctx.time_signature;
  int64_t bar_start = 0;
  int64_t bar_len = 0;
  std::size_t i = 1;
  int last_tempo = -1;
  while (i < tokens.size()) {
    if (!vocab_.is(tokens[i], Kind::Bar_None)) throw TokenizerError("expected Bar_None", i);
    bar_start += bar_len;
    ++i;
    if (i < tokens.size() && vocab_.is(tokens[i], Kind::TimeSig)) {
      const auto [num, den] = config().time_signatures[static_cast<std::size_t>(vocab_.value(tokens[i]))];
      ts = midi::TimeSignature{bar_start, num, den};
      out.timesig_map.push_back(ts);
    }
    bar_len = std::llround(bar_units(ts.numerator, ts.denominator) * unit);
    BarGrammar g(vocab_, bar_units(ts.numerator, ts.denominator), true);
    int pos = 0;
    midi::Note cur;
    for (; i < tokens.size() && !vocab_.is(tokens[i], Kind::Bar_None); ++i) {
      const int id = tokens[i];
      if (!g.accepts(id)) {
        const std::string what = (id >= 0 && static_cast<std::size_t>(id) < vocab_.size())
                                     ? to_string(vocab_.token(id))
                                     : "id " + std::to_string(id);
        throw TokenizerError("unexpected token " + what, i);
      }
      g.advance(id);
      const auto& t = vocab_.token(id);
      switch (t.kind) {
        case Kind::Position:
          pos = t.value;
          break;
        case Kind::Tempo:
          if (t.value != last_tempo) {
            out.tempo_map.push_back(
                midi::TempoChange::from_bpm(bar_start + std::llround(pos * unit), vocab_.tempo_value(t.value)));
            last_tempo = t.value;
          }
          break;
        case Kind::Pitch:
          cur = midi::Note{};
          cur.pitch = t.value;
          cur.onset = bar_start + std::llround(pos * unit);
          break;
        case Kind::Velocity:
          cur.velocity = vocab_.velocity_value(t.value);
          break;
        case Kind::Duration:
          cur.duration = std::max<int64_t>(1, std::llround(t.value * unit));
          out.track.notes.push_back(cur);
          break;
        default:
          break;
      }
    }
    if (!g.can_end()) throw TokenizerError("bar ends inside a note group", i);
    ++out.bars;
  }
  if (out.tempo_map.empty() || out.tempo_map.front().tick != 0)
    out.tempo_map.insert(out.tempo_map.begin(), midi::TempoChange{0, ctx.us_per_quarter});
  if (out.timesig_map.empty() || out.timesig_map.front().tick != 0)
    out.timesig_map.insert(out.timesig_map.begin(),
                           midi::TimeSignature{0, ctx.time_signature.numerator, ctx.time_signature.denominator});
  midi::normalize_notes(out.track.notes);
  return out;
}

midi::Score RemiTokenizer::decode_score(std::span<const std::vector<int>> tracks, int ticks_per_quarter) const {
  midi::Score s;
  s.ticks_per_quarter = ticks_per_quarter;
  DecodeContext ctx;
  ctx.ticks_per_quarter = ticks_per_quarter;
  for (std::size_t t = 0; t < tracks.size(); ++t) {
    auto d = decode_base(tracks[t], ctx);
    if (t == 0) {
      s.tempo_map = std::move(d.tempo_map);
      s.timesig_map = std::move(d.timesig_map);
    }
    s.tracks.push_back(std::move(d.track));
  }
  midi::normalize(s);
  return s;
}

}  // namespace mrwkv::tok
