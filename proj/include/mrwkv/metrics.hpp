#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrwkv/midi.hpp"
#include "mrwkv/prompt.hpp"
#include "mrwkv/tokenizer.hpp"

namespace mrwkv::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Notes that start in one bar. Sounding time past the bar end is ignored.
struct BarContent {
  int64_t start = 0;
  int64_t length = 1;
  std::vector<midi::Note> notes;
};

using Chroma = std::array<double, 12>;

/// Per step pitch-class distribution weighted by sounding time within the
/// step; all-zero for a silent step.
std::vector<Chroma> chroma_steps(const BarContent& bar, int steps = 16);

/// Whole-bar pitch-class distribution weighted by sounding time.
Chroma bar_chroma(const BarContent& bar);

struct CpResult {
  double value = 0;         // mean cosine over compared frames (NaN when none)
  std::size_t frames = 0;   // T N
  std::size_t skipped = 0;  // frames where either averaged vector is zero
};

/// Content preservation: chroma over T steps per bar, forward moving average
/// of T/2 frames clipped at the sequence end, mean cosine over frames.
CpResult content_preservation(std::span<const BarContent> original, std::span<const BarContent> infilled,
                              int steps = 16);

/// Onset pattern with `dim` slots. dim 0 uses the tokenizer grid (one slot
/// per grid unit of the bar); otherwise onsets map to floor(dim * offset / length).
std::vector<uint8_t> groove_pattern(const BarContent& bar, int ticks_per_quarter, int positions_per_quarter,
                                    int dim = 0);

/// 1 - mean XOR over all positions.
double groove_similarity(std::span<const uint8_t> a, std::span<const uint8_t> b);

/// -sum c log2 c; 0 for an empty histogram.
double entropy_bits(const Chroma& c);

struct PcheResult {
  double value = 0;
  bool skipped = false;  // both bars empty
};
PcheResult pche_difference(const BarContent& original, const BarContent& infilled);

struct F1Options {
  bool match_duration = false;
  int ticks_per_quarter = 480;
  int positions_per_quarter = 8;
};
struct F1Result {
  double value = 0;
  bool both_empty = false;
};
/// Notes match on (bar, pitch, onset grid position within the bar) and
/// optionally duration in grid units. Multiset intersection.
F1Result f1_notes(std::span<const BarContent> original, std::span<const BarContent> infilled, const F1Options& opt);

struct Adherence {
  double density_abs_diff = 0;
  std::size_t bars = 0;
  std::map<std::string, double> success;  // density, dur_flags, poly_min, poly_max
};

/// Requested controls against the controls recomputed from generated bars.
/// A requested density over 18 scores 0 for 18 or more realized notes.
Adherence attribute_adherence(std::span<const prompt::AttributeControls> requested,
                              std::span<const BarContent> generated, int ticks_per_quarter, int poly_cap = 16);

// --- score-level evaluation --------------------------------------------------

struct ExampleMetrics {
  double cp = 0, gs = 0, pche = 0, f1 = 0;
  bool cp_valid = true, pche_valid = true;
  std::size_t cp_skipped = 0;
};

/// Bars [start, start + n) of one track as BarContent (quantized onsets).
std::vector<BarContent> region_bars(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track,
                                    std::size_t start, std::size_t n);

struct EvalOptions {
  int chroma_steps = 16;
  int groove_dim = 0;  // 0: tokenizer grid
  bool f1_duration = false;
};

ExampleMetrics evaluate_example(const tok::RemiTokenizer& tk, const midi::Score& original,
                                const midi::Score& infilled, std::size_t track, std::size_t start, std::size_t n,
                                const EvalOptions& opt = {});

struct Stat {
  double mean = 0, std = 0;
  std::size_t n = 0;
};
Stat summarize(std::span<const double> values);

struct MetricReport {
  Stat cp, gs, pche, f1;
  std::vector<ExampleMetrics> examples;
  std::optional<Adherence> adherence;
  std::size_t failures = 0;
};

MetricReport aggregate(std::vector<ExampleMetrics> examples);
std::string report_to_json(const MetricReport& r);

}  // namespace mrwkv::metrics
