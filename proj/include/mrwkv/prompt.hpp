#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrwkv/bpe.hpp"
#include "mrwkv/midi.hpp"
#include "mrwkv/rng.hpp"
#include "mrwkv/tokenizer.hpp"

namespace mrwkv::prompt {

/// Per-bar attribute controls. density is the note count for 1..18 and
/// kDensityOver for more notes.
struct AttributeControls {
  static constexpr int kDensityOver = 19;

  int density = 1;
  std::array<bool, tok::kDurationClasses> dur_flags{};
  int poly_min = 1;
  int poly_max = 1;

  bool operator==(const AttributeControls&) const = default;
};

/// Number of control tokens injected per bar.
inline constexpr std::size_t kControlsPerBar = 3 + tok::kDurationClasses;

/// Nearest duration class of a note length, compared in log2 space. Ties go
/// to the shorter class.
tok::DurationClass duration_class(int64_t duration_ticks, int ticks_per_quarter);

/// Controls of the notes starting in one bar. Throws std::invalid_argument
/// for an empty bar.
AttributeControls compute_controls(std::span<const midi::Note> bar_notes, int ticks_per_quarter, int poly_cap = 16);

/// Density, five duration flags, poly_min, poly_max.
std::vector<int> control_tokens(const AttributeControls& c, const tok::BaseVocab& vocab);
AttributeControls controls_from_tokens(std::span<const int> tokens, const tok::BaseVocab& vocab);

struct PromptSpec {
  std::size_t track = 0;
  std::size_t infill_start = 0;
  std::size_t infill_len = 1;
  std::size_t context_bars = 0;
  std::vector<AttributeControls> controls;
  std::vector<std::size_t> track_order;
};

enum class Mode { Train, Infer };

class PromptError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bar grid used for prompting: the score's bars up to its last quantized offset.
std::vector<midi::Bar> prompt_bars(const tok::RemiTokenizer& tk, const midi::Score& score);

/// Notes of one track whose (quantized) onset falls in the bar.
std::vector<midi::Note> notes_in_bar(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track,
                                     const midi::Bar& bar);

/// Controls computed from the original content of the region, one per bar.
std::vector<AttributeControls> region_controls(const tok::RemiTokenizer& tk, const midi::Score& score,
                                               std::size_t track, std::size_t start, std::size_t len);

struct Prompt {
  std::vector<int> tokens;  // base ids
  std::size_t fill_start = 0;  // index of FillBar_Start
  std::size_t fill_end = 0;    // index of FillBar_End (train) or tokens.size() (infer)
};

/// Bar-Fill serialization. Each track in spec.track_order becomes
/// Track_Start, Program, bars of the N+2C window, Track_End; the N masked bars
/// of spec.track are Infill_Bar tokens. Train mode appends FillBar_Start, the
/// controlled infill bars and FillBar_End. Infer mode appends FillBar_Start
/// and the controls of the first bar.
Prompt build_prompt(const tok::RemiTokenizer& tk, const midi::Score& score, const PromptSpec& spec, Mode mode);

/// Structural summary of a serialized prompt, produced by validate_prompt.
struct PromptLayout {
  std::size_t tracks = 0;
  std::size_t infill_bars = 0;   // Infill_Bar tokens in the context
  std::size_t fill_start = 0;
  std::optional<std::size_t> fill_end;
  std::size_t filled_bars = 0;   // bars inside the FillBar section
  std::vector<AttributeControls> controls;
};

/// Checks the grammar of a base-id prompt and returns its layout. Throws
/// tok::TokenizerError with the offending index.
PromptLayout validate_prompt(std::span<const int> tokens, const tok::BaseVocab& vocab);

/// Replaces the region of spec.track with the bars encoded by the FillBar
/// section content (tokens strictly between FillBar_Start and FillBar_End).
/// Everything outside the region is left untouched.
midi::Score splice_back(const tok::RemiTokenizer& tk, const midi::Score& score, const PromptSpec& spec,
                        std::span<const int> generated);

/// Splits FillBar section content into bars at Bar_None.
std::vector<std::vector<int>> split_bars(std::span<const int> generated, const tok::BaseVocab& vocab);

// --- training example synthesis ---------------------------------------------

class ExampleRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExampleConfig {
  std::size_t seq_budget = 2048;
  std::size_t min_bars = 8;
  std::size_t min_notes = 100;
  int max_octave_shift = 6;
  int region_attempts = 32;
  int transpose_attempts = 64;
  /// Loss over the whole sequence instead of the infill span only.
  bool full_sequence_loss = false;
};

bool passes_corpus_filter(const tok::RemiTokenizer& tk, const midi::Score& score, const ExampleConfig& cfg);

/// N = max(choice, floor(fraction * L)), clipped to [1, L].
std::size_t infill_length(std::size_t track_bars, std::size_t choice, double fraction);
/// Draws choice from {1,2,4,8} and fraction from U(0.1, 0.4).
std::size_t select_infill_length(std::size_t track_bars, Rng& rng);

/// Start bar of an all-non-empty window of length len, or nullopt after
/// `attempts` uniform draws.
std::optional<std::size_t> select_region_start(const std::vector<bool>& nonempty, std::size_t len, Rng& rng,
                                               int attempts);

/// Largest C whose serialized train prompt fits seq_budget after BPE.
/// Throws ExampleRejected when C = 0 does not fit.
std::size_t select_context(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab, const midi::Score& score,
                           PromptSpec spec, std::size_t seq_budget);

/// Octave shift in [-max, max] drawn until every melodic pitch stays in range;
/// 0 after the attempt budget.
int choose_octave_shift(const tok::RemiTokenizer& tk, const midi::Score& score, Rng& rng, int max_shift,
                        int attempts);
midi::Score transpose_octaves(const midi::Score& score, int octaves);

struct TrainingExample {
  std::vector<int> ids;  // BPE ids
  std::size_t target_begin = 0;  // index of FillBar_Start
  std::size_t target_end = 0;    // index of FillBar_End
  std::vector<uint8_t> loss_mask;  // 1 where ids[t] is a prediction target
  PromptSpec spec;
  int octave_shift = 0;
};

TrainingExample make_training_example(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab,
                                      const midi::Score& score, Rng& rng, const ExampleConfig& cfg);

/// Loss mask over a BPE sequence: tokens after FillBar_Start up to and
/// including FillBar_End, control tokens excluded.
std::vector<uint8_t> infill_loss_mask(std::span<const int> ids, const tok::Vocabulary& vocab, std::size_t fill_start,
                                      std::size_t fill_end);

}  // namespace mrwkv::prompt
