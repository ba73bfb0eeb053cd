#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mrwkv/midi.hpp"

namespace mrwkv::tok {

enum class Kind : uint8_t {
  PAD,
  Bar_None,
  Track_Start,
  Track_End,
  FillBar_Start,
  FillBar_End,
  Infill_Bar,
  Program,
  TimeSig,
  Tempo,
  Position,
  Pitch,
  Velocity,
  Duration,
  Density,
  DurClass,
  PolyMin,
  PolyMax,
};

inline constexpr std::size_t kKindCount = 18;

std::string_view kind_name(Kind k);
std::optional<Kind> kind_from_name(std::string_view name);

/// Structural tokens carry fixed identity and are never merged by BPE.
bool is_structural(Kind k);
/// Attribute-control tokens (density, duration classes, polyphony bounds).
bool is_control(Kind k);
/// Kinds that may take part in BPE merges.
bool is_mergeable(Kind k);

struct BaseToken {
  Kind kind = Kind::PAD;
  int value = 0;
  bool operator==(const BaseToken&) const = default;
};

std::string to_string(const BaseToken& t);

/// Quantization grid and bin layout. The defaults give 8 positions per
/// quarter, 32 velocity bins, durations up to 4 bars of 4/4 and 32
/// log-spaced tempo bins between 40 and 250 BPM.
struct TokenizerConfig {
  int positions_per_quarter = 8;
  int velocity_bins = 32;
  int tempo_bins = 32;
  double tempo_min = 40.0;
  double tempo_max = 250.0;
  int pitch_min = 21;
  int pitch_max = 108;
  int max_duration_bars = 4;
  int max_bar_quarters = 8;
  int density_bins = 18;
  int poly_max = 16;
  std::vector<std::pair<int, int>> time_signatures = default_time_signatures();

  static std::vector<std::pair<int, int>> default_time_signatures();
  int units_per_whole() const { return positions_per_quarter * 4; }
  int max_duration_units() const { return max_duration_bars * units_per_whole(); }
  int max_positions() const { return max_bar_quarters * positions_per_quarter; }
  bool operator==(const TokenizerConfig&) const = default;
};

class TokenizerError : public std::runtime_error {
 public:
  TokenizerError(const std::string& what, std::size_t index)
      : std::runtime_error(what + " (token index " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

/// Duration classes used by the duration-flag controls, longest first.
enum class DurationClass : uint8_t { Whole, Half, Quarter, Eighth, Sixteenth };
inline constexpr std::size_t kDurationClasses = 5;

/// Fixed id layout of the base (pre-BPE) vocabulary.
class BaseVocab {
 public:
  explicit BaseVocab(TokenizerConfig cfg = {});

  const TokenizerConfig& config() const { return cfg_; }
  std::size_t size() const { return tokens_.size(); }
  const BaseToken& token(int id) const;
  std::span<const BaseToken> tokens() const { return tokens_; }

  /// Id of (kind, value); throws std::out_of_range when the pair is absent.
  int id(Kind kind, int value = 0) const;
  std::optional<int> find(Kind kind, int value = 0) const;
  Kind kind(int id) const { return token(id).kind; }
  int value(int id) const { return token(id).value; }
  bool is(int id, Kind k) const { return id >= 0 && static_cast<std::size_t>(id) < size() && kind(id) == k; }

  int bar_none() const { return id(Kind::Bar_None); }

  // Quantizers. Each maps a raw value to a token value and back; mapping a
  // dequantized value again returns the same bin.
  int velocity_bin(int velocity) const;
  int velocity_value(int bin) const;
  int tempo_bin(double bpm) const;
  double tempo_value(int bin) const;
  int timesig_index(int numerator, int denominator) const;
  int clamp_pitch(int pitch) const;

 private:
  TokenizerConfig cfg_;
  std::vector<BaseToken> tokens_;
  std::array<int, kKindCount> first_{};
  std::array<int, kKindCount> count_{};
  std::array<int, kKindCount> value_base_{};
};

/// Grammar position inside bar content. Used by the decoder and by the
/// sampler to mask tokens that cannot follow.
class BarGrammar {
 public:
  enum class State : uint8_t { BarStart, AfterTimeSig, AfterPosition, AfterTempo, AfterPitch, AfterVelocity, AfterDuration };

  BarGrammar(const BaseVocab& vocab, int bar_units, bool allow_meta);

  /// Whether the token can come next. Bar boundaries are not part of bar content.
  bool accepts(int id) const;
  /// Consumes a token; throws std::logic_error when it is not accepted.
  void advance(int id);
  /// True when the bar may end here.
  bool can_end() const;
  bool empty() const { return notes_ == 0; }
  int notes() const { return notes_; }
  State state() const { return state_; }
  void reset(int bar_units);

 private:
  const BaseVocab* vocab_;
  int bar_units_;
  bool allow_meta_;
  State state_ = State::BarStart;
  int last_position_ = -1;
  int last_pitch_ = -1;
  int notes_ = 0;
};

/// Everything needed to decode tokens into ticks.
struct DecodeContext {
  int ticks_per_quarter = 480;
  midi::TimeSignature time_signature{0, 4, 4};
  uint32_t us_per_quarter = 500000;
};

/// A decoded track fragment with the meta events it carried.
struct DecodedTrack {
  midi::Track track;
  std::vector<midi::TempoChange> tempo_map;
  std::vector<midi::TimeSignature> timesig_map;
  int bars = 0;
};

struct EncodeReport {
  int clamped_pitches = 0;
  int clamped_durations = 0;
};

/// REMI encoder/decoder over a fixed base vocabulary. Within a bar, notes
/// are grouped by position as Position, then Pitch, Velocity, Duration per
/// note in ascending pitch order.
class RemiTokenizer {
 public:
  explicit RemiTokenizer(TokenizerConfig cfg = {});

  const BaseVocab& vocab() const { return vocab_; }
  const TokenizerConfig& config() const { return vocab_.config(); }

  /// One sequence per track: Program followed by one Bar_None-led bar per bar
  /// of the score grid.
  std::vector<std::vector<int>> encode_base(const midi::Score& score, EncodeReport* report = nullptr) const;

  /// Tokens of bars [first_bar, last_bar) of one track, each starting with
  /// Bar_None. With with_meta, the first bar of the range restates the time
  /// signature and tempo, and later bars carry changes.
  std::vector<std::vector<int>> encode_bars(const midi::Score& score, std::size_t track, std::size_t first_bar,
                                            std::size_t last_bar, bool with_meta,
                                            EncodeReport* report = nullptr) const;

  /// Bar content (no leading Bar_None) of notes that start inside a bar of the
  /// given length, positions relative to bar_start. No meta tokens.
  std::vector<int> encode_bar_notes(std::span<const midi::Note> notes, int64_t bar_start, int64_t bar_length,
                                    int ticks_per_quarter, EncodeReport* report = nullptr) const;

  /// Inverse of encode_base for one track sequence.
  DecodedTrack decode_base(std::span<const int> tokens, const DecodeContext& ctx = {}) const;

  /// Decodes per-track sequences into a Score using the meta events of the
  /// first track.
  midi::Score decode_score(std::span<const std::vector<int>> tracks, int ticks_per_quarter = 480) const;

  /// Notes encoded by bar content starting at bar_start (Position..Duration
  /// groups, controls skipped). Throws TokenizerError with the offending index.
  std::vector<midi::Note> decode_bar_notes(std::span<const int> content, int64_t bar_start, int64_t bar_length,
                                           int ticks_per_quarter) const;

  /// Grid units per bar for a time signature.
  int bar_units(int numerator, int denominator) const;
  /// Tick length of one grid unit.
  double unit_ticks(int ticks_per_quarter) const;
  /// Note after quantizing onset and duration to the grid and velocity to its bin.
  midi::Note quantize(const midi::Note& n, int ticks_per_quarter, bool drums, EncodeReport* report) const;
  /// Applies quantize to every note and normalizes overlaps.
  midi::Score quantize_score(const midi::Score& score) const;

 private:
  BaseVocab vocab_;
};

}  // namespace mrwkv::tok
