#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrwkv::midi {

/// Program value used for percussion tracks (MIDI channel 10).
inline constexpr int kDrums = -1;

struct Note {
  int pitch = 60;
  int velocity = 100;
  int64_t onset = 0;
  int64_t duration = 1;

  int64_t end() const { return onset + duration; }
  auto operator<=>(const Note&) const = default;
};

struct Track {
  int program = 0;
  std::vector<Note> notes;

  bool is_drums() const { return program == kDrums; }
  bool operator==(const Track&) const = default;
};

struct TempoChange {
  int64_t tick = 0;
  uint32_t us_per_quarter = 500000;

  double bpm() const { return 60'000'000.0 / us_per_quarter; }
  static TempoChange from_bpm(int64_t tick, double bpm);
  bool operator==(const TempoChange&) const = default;
};

struct TimeSignature {
  int64_t tick = 0;
  int numerator = 4;
  int denominator = 4;
  bool operator==(const TimeSignature&) const = default;
};

struct Score {
  int ticks_per_quarter = 480;
  std::vector<TempoChange> tempo_map;
  std::vector<TimeSignature> timesig_map;
  std::vector<Track> tracks;

  /// Latest note offset over all tracks, 0 when the score has no notes.
  int64_t end_tick() const;
  std::size_t note_count() const;
  bool operator==(const Score&) const = default;
};

struct Bar {
  int64_t start = 0;
  int64_t end = 0;
  int64_t length() const { return end - start; }
  bool operator==(const Bar&) const = default;
};

/// Counters for content that the reader had to repair or drop.
struct ParseReport {
  int dangling_notes = 0;
  int dropped_events = 0;
  int merged_overlaps = 0;
};

class MidiError : public std::runtime_error {
 public:
  MidiError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Score read_midi(std::span<const uint8_t> bytes, ParseReport* report = nullptr);
std::vector<uint8_t> write_midi(const Score& score);

Score read_midi_file(const std::filesystem::path& path, ParseReport* report = nullptr);
void write_midi_file(const std::filesystem::path& path, const Score& score);

/// Sorts notes by (onset, pitch), merges overlapping same-pitch notes into
/// their union and makes sure tempo/time-signature maps start at tick 0.
/// Returns the number of merged notes.
int normalize(Score& score);
int normalize_notes(std::vector<Note>& notes);

/// Throws ValidationError when an invariant of the score does not hold.
void validate(const Score& score);

/// Bars covering [0, end) for the given time-signature map. A time-signature
/// change that is not on a bar line cuts the running bar short.
std::vector<Bar> bars_for(std::span<const TimeSignature> timesigs, int64_t ticks_per_quarter,
                          int64_t end);

/// Bar partition of [0, score.end_tick()).
std::vector<Bar> bar_grid(const Score& score);
/// Bar partition covering at least [0, end).
std::vector<Bar> bar_grid(const Score& score, int64_t end);

/// Index of the bar containing tick, or bars.size() when past the grid.
std::size_t bar_index(std::span<const Bar> bars, int64_t tick);

}  // namespace mrwkv::midi
