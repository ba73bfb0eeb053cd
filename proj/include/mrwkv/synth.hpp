#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrwkv/midi.hpp"
#include "mrwkv/rng.hpp"

namespace mrwkv::synth {

/// Order-2 Markov chain over K symbols, p[(a K + b) K + c] = P(c | a, b).
struct MarkovChain {
  int k = 0;
  std::vector<double> p;

  /// Conditionals softmax(sharpness * z) with z standard normal, so every
  /// transition has positive mass and the pair chain is ergodic.
  static MarkovChain random(int k, double sharpness, Rng& rng);

  double prob(int a, int b, int c) const { return p[(static_cast<std::size_t>(a) * k + b) * k + c]; }
  /// Stationary distribution over pairs (a, b), index a K + b.
  std::vector<double> stationary_pairs() const;
  /// Entropy rate in nats: sum over pairs of pi(a, b) H(P(. | a, b)).
  double entropy_rate() const;
  /// Sequence whose first pair is drawn from the stationary distribution.
  std::vector<int> sample(std::size_t n, Rng& rng) const;
};

/// Parameters of a synthetic song style: melody over a looping chord grid
/// with bass and chord tracks.
struct Style {
  std::string name;
  int root = 60;
  bool minor = false;
  std::vector<int> progression;  // scale degrees (0-based) of the chord roots, one per bar
  int melody_low = 64, melody_high = 84;
  int melody_units = 4;     // melody note length in 1/8-quarter grid units
  double rest_prob = 0.1;
  double leap_prob = 0.2;
  int bass_units = 32;      // bass note length
  int chord_units = 16;     // chord stab length
  int chord_offset = 0;     // stab offset inside its slot
  int velocity = 90;
  double bpm = 120;
  int program_melody = 0, program_bass = 33, program_chords = 4;
};

Style style_a();  // major, steady quarter melody, sustained chords
Style style_b();  // minor, busy eighths, off-beat stabs, low register

/// Song of nbars 4/4 bars at 480 ticks per quarter.
midi::Score make_song(const Style& style, int nbars, Rng& rng);

std::vector<midi::Score> make_corpus(const Style& style, int count, int nbars, uint64_t seed);

}  // namespace mrwkv::synth
