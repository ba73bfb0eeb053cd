#include "mrwkv/midi.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <deque>
#include <fstream>
#include <iterator>
#include <map>
#include <utility>

namespace mrwkv::midi {

TempoChange TempoChange::from_bpm(int64_t tick, double bpm) {
  return TempoChange{tick, static_cast<uint32_t>(std::lround(60'000'000.0 / bpm))};
}

int64_t Score::end_tick() const {
  int64_t end = 0;
  for (const auto& t : tracks)
    for (const auto& n : t.notes) end = std::max(end, n.end());
  return end;
}

std::size_t Score::note_count() const {
  std::size_t n = 0;
  for (const auto& t : tracks) n += t.notes.size();
  return n;
}

namespace {

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> bytes, std::size_t base = 0) : bytes_(bytes), base_(base) {}

  /// Absolute offset in the enclosing file.
  std::size_t pos() const { return base_ + pos_; }
  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  uint8_t u8() {
    if (pos_ >= bytes_.size()) throw MidiError("unexpected end of data", pos());
    return bytes_[pos_++];
  }
  uint8_t peek() const {
    if (pos_ >= bytes_.size()) throw MidiError("unexpected end of data", pos());
    return bytes_[pos_];
  }
  uint16_t u16() {
    uint16_t hi = u8();
    return static_cast<uint16_t>((hi << 8) | u8());
  }
  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
    return v;
  }
  uint32_t vlq() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const uint8_t b = u8();
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw MidiError("variable-length quantity longer than 4 bytes", pos());
  }
  std::string tag() {
    std::string s;
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>(u8()));
    return s;
  }
  void skip(std::size_t n) {
    if (n > remaining()) throw MidiError("chunk or event length exceeds file size", pos());
    pos_ += n;
  }
  std::span<const uint8_t> take(std::size_t n) {
    if (n > remaining()) throw MidiError("chunk or event length exceeds file size", pos());
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const uint8_t> bytes_;
  std::size_t base_ = 0;
  std::size_t pos_ = 0;
};

struct OpenNote {
  int64_t onset;
  int velocity;
};

struct TrackBuilder {
  int chunk = 0;
  int channel = 0;
  int order = 0;
  int program = -2;  // unset
  std::vector<Note> notes;
  std::array<std::deque<OpenNote>, 128> open;
};

void close_note(TrackBuilder& tb, int pitch, int64_t tick, ParseReport& rep) {
  auto& q = tb.open[pitch];
  if (q.empty()) return;
  const OpenNote on = q.front();
  q.pop_front();
  if (tick > on.onset) {
    tb.notes.push_back(Note{pitch, on.velocity, on.onset, tick - on.onset});
  } else {
    ++rep.dropped_events;
  }
}

template <typename T>
void sort_and_dedupe_by_tick(std::vector<T>& v) {
  std::stable_sort(v.begin(), v.end(), [](const T& a, const T& b) { return a.tick < b.tick; });
  std::vector<T> out;
  for (const auto& e : v) {
    if (!out.empty() && out.back().tick == e.tick)
      out.back() = e;
    else
      out.push_back(e);
  }
  v = std::move(out);
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<uint8_t>(v >> s));
}

void put_vlq(std::vector<uint8_t>& out, uint32_t v) {
  std::array<uint8_t, 5> buf{};
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

struct TimedEvent {
  int64_t tick;
  int order;
  std::vector<uint8_t> bytes;
};

void put_chunk(std::vector<uint8_t>& out, std::vector<TimedEvent> events) {
  std::stable_sort(events.begin(), events.end(), [](const TimedEvent& a, const TimedEvent& b) {
    return std::tie(a.tick, a.order) < std::tie(b.tick, b.order);
  });
  std::vector<uint8_t> body;
  int64_t last = 0;
  for (const auto& e : events) {
    put_vlq(body, static_cast<uint32_t>(e.tick - last));
    last = e.tick;
    body.insert(body.end(), e.bytes.begin(), e.bytes.end());
  }
  // End of track.
  body.insert(body.end(), {0x00, 0xFF, 0x2F, 0x00});
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_u32(out, static_cast<uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
}

}  // namespace

Score read_midi(std::span<const uint8_t> bytes, ParseReport* report) {
  ParseReport rep;
  ByteReader in(bytes);
  if (in.remaining() < 14 || in.tag() != "MThd") throw MidiError("missing MThd header", 0);
  const uint32_t header_len = in.u32();
  if (header_len < 6) throw MidiError("MThd chunk too short", in.pos());
  const uint16_t format = in.u16();
  const uint16_t ntracks = in.u16();
  const uint16_t division = in.u16();
  in.skip(header_len - 6);
  if (format > 2) throw MidiError("unknown SMF format " + std::to_string(format), 8);
  if (format == 2) throw MidiError("SMF type 2 files are not supported", 8);
  if (division & 0x8000) throw MidiError("SMPTE time division is not supported", 12);
  if (division == 0) throw MidiError("ticks per quarter must be positive", 12);

  Score score;
  score.ticks_per_quarter = division;

  std::vector<TrackBuilder> builders;
  std::map<std::pair<int, int>, std::size_t> by_key;

  int chunk_index = 0;
  int order = 0;
  while (!in.done() && chunk_index < ntracks) {
    if (in.remaining() < 8) throw MidiError("truncated chunk header", in.pos());
    const std::size_t chunk_pos = in.pos();
    const std::string tag = in.tag();
    const uint32_t len = in.u32();
    if (tag != "MTrk") {
      in.skip(len);
      continue;
    }
    if (len > in.remaining()) throw MidiError("MTrk length exceeds file size", chunk_pos + 4);
    const std::size_t base = chunk_pos + 8;
    ByteReader tr(in.take(len), base);
    int64_t tick = 0;
    uint8_t running = 0;
    bool saw_channel = false;
    bool saw_conductor = false;
    bool ended = false;

    auto builder_for = [&](int channel) -> TrackBuilder& {
      auto key = std::make_pair(chunk_index, channel);
      auto it = by_key.find(key);
      if (it == by_key.end()) {
        TrackBuilder tb;
        tb.chunk = chunk_index;
        tb.channel = channel;
        tb.order = order++;
        builders.push_back(std::move(tb));
        it = by_key.emplace(key, builders.size() - 1).first;
      }
      return builders[it->second];
    };

    while (!tr.done() && !ended) {
      tick += tr.vlq();
      uint8_t status = tr.peek();
      if (status & 0x80) {
        tr.u8();
      } else {
        if (!running) throw MidiError("data byte without running status", tr.pos());
        status = running;
      }
      if (status == 0xFF) {
        const uint8_t type = tr.u8();
        const uint32_t mlen = tr.vlq();
        auto data = tr.take(mlen);
        running = 0;
        if (type == 0x2F) {
          ended = true;
        } else if (type == 0x51) {
          if (mlen != 3) throw MidiError("tempo meta event must have length 3", tr.pos());
          const uint32_t us = (uint32_t{data[0]} << 16) | (uint32_t{data[1]} << 8) | data[2];
          if (us == 0) throw MidiError("zero tempo", tr.pos());
          score.tempo_map.push_back(TempoChange{tick, us});
          saw_conductor = true;
        } else if (type == 0x58) {
          if (mlen < 2) throw MidiError("time signature meta event too short", tr.pos());
          if (data[1] > 6) throw MidiError("time signature denominator too large", tr.pos());
          if (data[0] == 0) throw MidiError("time signature numerator is zero", tr.pos());
          score.timesig_map.push_back(TimeSignature{tick, data[0], 1 << data[1]});
          saw_conductor = true;
        }
      } else if (status == 0xF0 || status == 0xF7) {
        tr.skip(tr.vlq());
        running = 0;
        ++rep.dropped_events;
      } else if (status >= 0xF1) {
        throw MidiError("system common/realtime message in file", tr.pos());
      } else {
        running = status;
        const int kind = status & 0xF0;
        const int channel = status & 0x0F;
        const int nbytes = (kind == 0xC0 || kind == 0xD0) ? 1 : 2;
        std::array<int, 2> d{0, 0};
        for (int i = 0; i < nbytes; ++i) {
          d[i] = tr.u8();
          if (d[i] & 0x80) throw MidiError("data byte has high bit set", tr.pos() - 1);
        }
        saw_channel = true;
        if (kind == 0x90 && d[1] > 0) {
          auto& tb = builder_for(channel);
          tb.open[d[0]].push_back(OpenNote{tick, d[1]});
        } else if (kind == 0x80 || kind == 0x90) {
          close_note(builder_for(channel), d[0], tick, rep);
        } else if (kind == 0xC0) {
          auto& tb = builder_for(channel);
          if (tb.program == -2) tb.program = d[0];
        } else {
          ++rep.dropped_events;
        }
      }
    }
    // Dangling notes are closed at the end of their chunk.
    for (auto& tb : builders) {
      if (tb.chunk != chunk_index) continue;
      for (int p = 0; p < 128; ++p) {
        while (!tb.open[p].empty()) {
          ++rep.dangling_notes;
          const int64_t onset = tb.open[p].front().onset;
          close_note(tb, p, std::max(tick, onset + 1), rep);
        }
      }
    }
    if (!saw_channel && !saw_conductor) {
      TrackBuilder tb;
      tb.chunk = chunk_index;
      tb.channel = 0;
      tb.order = order++;
      tb.program = 0;
      builders.push_back(std::move(tb));
    }
    ++chunk_index;
  }
  if (chunk_index < ntracks) throw MidiError("fewer MTrk chunks than declared in header", in.pos());

  std::stable_sort(builders.begin(), builders.end(),
                   [](const TrackBuilder& a, const TrackBuilder& b) { return a.order < b.order; });
  for (auto& tb : builders) {
    Track t;
    t.program = tb.channel == 9 ? kDrums : std::max(tb.program, 0);
    t.notes = std::move(tb.notes);
    score.tracks.push_back(std::move(t));
  }
  rep.merged_overlaps = normalize(score);
  if (report) *report = rep;
  return score;
}

std::vector<uint8_t> write_midi(const Score& score) {
  validate(score);
  std::vector<uint8_t> out;
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  put_u32(out, 6);
  put_u16(out, 1);
  put_u16(out, static_cast<uint16_t>(score.tracks.size() + 1));
  put_u16(out, static_cast<uint16_t>(score.ticks_per_quarter));

  std::vector<TimedEvent> conductor;
  for (const auto& ts : score.timesig_map) {
    const int dd = std::countr_zero(static_cast<unsigned>(ts.denominator));
    conductor.push_back({ts.tick, 0,
                         {0xFF, 0x58, 0x04, static_cast<uint8_t>(ts.numerator),
                          static_cast<uint8_t>(dd), 24, 8}});
  }
  for (const auto& tc : score.tempo_map) {
    const uint32_t us = tc.us_per_quarter;
    conductor.push_back({tc.tick, 1,
                         {0xFF, 0x51, 0x03, static_cast<uint8_t>(us >> 16),
                          static_cast<uint8_t>(us >> 8), static_cast<uint8_t>(us)}});
  }
  put_chunk(out, std::move(conductor));

  int next_channel = 0;
  for (const auto& track : score.tracks) {
    int channel = 9;
    if (!track.is_drums()) {
      if (next_channel == 9) ++next_channel;
      channel = next_channel;
      next_channel = (next_channel + 1) % 16;
    }
    std::vector<TimedEvent> events;
    const auto program = static_cast<uint8_t>(track.is_drums() ? 0 : track.program);
    events.push_back({0, -1, {static_cast<uint8_t>(0xC0 | channel), program}});
    for (const auto& n : track.notes) {
      events.push_back({n.onset, 1 + n.pitch,
                        {static_cast<uint8_t>(0x90 | channel), static_cast<uint8_t>(n.pitch),
                         static_cast<uint8_t>(n.velocity)}});
      // Offs sort before ons at the same tick.
      events.push_back({n.end(), -200 + n.pitch,
                        {static_cast<uint8_t>(0x80 | channel), static_cast<uint8_t>(n.pitch), 0}});
    }
    put_chunk(out, std::move(events));
  }
  return out;
}

Score read_midi_file(const std::filesystem::path& path, ParseReport* report) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return read_midi(bytes, report);
}

void write_midi_file(const std::filesystem::path& path, const Score& score) {
  const auto bytes = write_midi(score);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

int normalize_notes(std::vector<Note>& notes) {
  std::sort(notes.begin(), notes.end(), [](const Note& a, const Note& b) {
    return std::tie(a.onset, a.pitch) < std::tie(b.onset, b.pitch);
  });
  int merged = 0;
  std::vector<Note> out;
  out.reserve(notes.size());
  std::array<std::ptrdiff_t, 128> last{};
  last.fill(-1);
  for (const auto& n : notes) {
    const auto li = last[n.pitch];
    if (li >= 0 && n.onset < out[li].end()) {
      // Overlapping (or coincident) same-pitch note: keep the union interval.
      out[li].duration = std::max(out[li].end(), n.end()) - out[li].onset;
      ++merged;
      continue;
    }
    last[n.pitch] = static_cast<std::ptrdiff_t>(out.size());
    out.push_back(n);
  }
  notes = std::move(out);
  return merged;
}

int normalize(Score& score) {
  sort_and_dedupe_by_tick(score.tempo_map);
  sort_and_dedupe_by_tick(score.timesig_map);
  if (score.tempo_map.empty() || score.tempo_map.front().tick != 0)
    score.tempo_map.insert(score.tempo_map.begin(), TempoChange{0, 500000});
  if (score.timesig_map.empty() || score.timesig_map.front().tick != 0)
    score.timesig_map.insert(score.timesig_map.begin(), TimeSignature{0, 4, 4});
  int merged = 0;
  for (auto& t : score.tracks) merged += normalize_notes(t.notes);
  return merged;
}

void validate(const Score& score) {
  if (score.ticks_per_quarter <= 0 || score.ticks_per_quarter > 0x7FFF)
    throw ValidationError("ticks_per_quarter out of range");
  if (score.tempo_map.empty() || score.tempo_map.front().tick != 0)
    throw ValidationError("tempo map must start at tick 0");
  if (score.timesig_map.empty() || score.timesig_map.front().tick != 0)
    throw ValidationError("time signature map must start at tick 0");
  for (std::size_t i = 1; i < score.tempo_map.size(); ++i)
    if (score.tempo_map[i].tick <= score.tempo_map[i - 1].tick)
      throw ValidationError("tempo map not strictly sorted");
  for (std::size_t i = 1; i < score.timesig_map.size(); ++i)
    if (score.timesig_map[i].tick <= score.timesig_map[i - 1].tick)
      throw ValidationError("time signature map not strictly sorted");
  for (const auto& tc : score.tempo_map)
    if (tc.us_per_quarter == 0 || tc.us_per_quarter > 0xFFFFFF) throw ValidationError("tempo out of range");
  for (const auto& ts : score.timesig_map) {
    if (ts.denominator <= 0) throw ValidationError("time signature denominator must be positive");
    if (!std::has_single_bit(static_cast<unsigned>(ts.denominator)) || ts.denominator > 64)
      throw ValidationError("time signature denominator must be a power of two");
    if (ts.numerator <= 0 || ts.numerator > 255) throw ValidationError("time signature numerator out of range");
  }
  for (const auto& t : score.tracks) {
    if (!t.is_drums() && (t.program < 0 || t.program > 127)) throw ValidationError("program out of range");
    for (std::size_t i = 0; i < t.notes.size(); ++i) {
      const auto& n = t.notes[i];
      if (n.pitch < 0 || n.pitch > 127) throw ValidationError("pitch out of range");
      if (n.velocity < 1 || n.velocity > 127) throw ValidationError("velocity out of range");
      if (n.onset < 0 || n.duration <= 0) throw ValidationError("note onset/duration invalid");
      if (i > 0 && std::tie(t.notes[i - 1].onset, t.notes[i - 1].pitch) > std::tie(n.onset, n.pitch))
        throw ValidationError("notes not sorted by (onset, pitch)");
    }
  }
}

std::vector<Bar> bars_for(std::span<const TimeSignature> timesigs, int64_t ticks_per_quarter, int64_t end) {
  std::vector<Bar> bars;
  if (timesigs.empty()) throw ValidationError("empty time signature map");
  for (const auto& ts : timesigs) {
    if (ts.denominator == 0) throw ValidationError("time signature with zero denominator");
    if (ts.numerator <= 0 || ts.denominator < 0) throw ValidationError("invalid time signature");
  }
  int64_t cur = 0;
  std::size_t ti = 0;
  while (cur < end) {
    while (ti + 1 < timesigs.size() && timesigs[ti + 1].tick <= cur) ++ti;
    const auto& ts = timesigs[ti];
    const int64_t len = std::max<int64_t>(1, ts.numerator * ticks_per_quarter * 4 / ts.denominator);
    int64_t bar_end = cur + len;
    if (ti + 1 < timesigs.size()) bar_end = std::min(bar_end, timesigs[ti + 1].tick);
    bars.push_back(Bar{cur, bar_end});
    cur = bar_end;
  }
  return bars;
}

std::vector<Bar> bar_grid(const Score& score) { return bar_grid(score, score.end_tick()); }

std::vector<Bar> bar_grid(const Score& score, int64_t end) {
  return bars_for(score.timesig_map, score.ticks_per_quarter, end);
}

std::size_t bar_index(std::span<const Bar> bars, int64_t tick) {
  auto it = std::upper_bound(bars.begin(), bars.end(), tick,
                             [](int64_t t, const Bar& b) { return t < b.end; });
  return static_cast<std::size_t>(it - bars.begin());
}

}  // namespace mrwkv::midi
