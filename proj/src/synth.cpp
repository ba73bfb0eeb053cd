#include "mrwkv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mrwkv::synth {

MarkovChain MarkovChain::random(int k, double sharpness, Rng& rng) {
  if (k < 2) throw std::invalid_argument("Markov chain needs at least 2 symbols");
  MarkovChain m;
  m.k = k;
  m.p.resize(static_cast<std::size_t>(k) * k * k);
  for (std::size_t ctx = 0; ctx < static_cast<std::size_t>(k) * k; ++ctx) {
    double* row = m.p.data() + ctx * k;
    double sum = 0;
    for (int c = 0; c < k; ++c) sum += row[c] = std::exp(sharpness * rng.normal());
    for (int c = 0; c < k; ++c) row[c] /= sum;
  }
  return m;
}

std::vector<double> MarkovChain::stationary_pairs() const {
  const std::size_t n = static_cast<std::size_t>(k) * k;
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b)
        for (int c = 0; c < k; ++c) next[static_cast<std::size_t>(b) * k + c] += pi[a * k + b] * prob(a, b, c);
    double diff = 0;
    for (std::size_t i = 0; i < n; ++i) diff += std::abs(next[i] - pi[i]);
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

double MarkovChain::entropy_rate() const {
  const auto pi = stationary_pairs();
  double h = 0;
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) {
      double hc = 0;
      for (int c = 0; c < k; ++c) {
        const double q = prob(a, b, c);
        if (q > 0) hc -= q * std::log(q);
      }
      h += pi[a * k + b] * hc;
    }
  return h;
}

namespace {

int draw(const double* probs, int n, Rng& rng) {
  double u = rng.uniform();
  for (int i = 0; i < n - 1; ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  return n - 1;
}

}  // namespace

std::vector<int> MarkovChain::sample(std::size_t n, Rng& rng) const {
  std::vector<int> out;
  if (n == 0) return out;
  const auto pi = stationary_pairs();
  const int pair = draw(pi.data(), k * k, rng);
  out.push_back(pair / k);
  if (n > 1) out.push_back(pair % k);
  while (out.size() < n) {
    const int a = out[out.size() - 2], b = out.back();
    out.push_back(draw(p.data() + (static_cast<std::size_t>(a) * k + b) * k, k, rng));
  }
  return out;
}

Style style_a() {
  Style s;
  s.name = "A";
  s.root = 60;
  s.minor = false;
  s.progression = {0, 4, 5, 3};
  s.melody_low = 67;
  s.melody_high = 86;
  s.melody_units = 8;
  s.rest_prob = 0.05;
  s.leap_prob = 0.1;
  s.bass_units = 32;
  s.chord_units = 16;
  s.chord_offset = 0;
  s.velocity = 80;
  s.bpm = 100;
  s.program_melody = 0;
  s.program_bass = 32;
  s.program_chords = 48;
  return s;
}

Style style_b() {
  Style s;
  s.name = "B";
  s.root = 57;
  s.minor = true;
  s.progression = {0, 5, 2, 6};
  s.melody_low = 55;
  s.melody_high = 72;
  s.melody_units = 4;
  s.rest_prob = 0.25;
  s.leap_prob = 0.4;
  s.bass_units = 4;
  s.chord_units = 4;
  s.chord_offset = 4;
  s.velocity = 110;
  s.bpm = 140;
  s.program_melody = 81;
  s.program_bass = 38;
  s.program_chords = 5;
  return s;
}

midi::Score make_song(const Style& st, int nbars, Rng& rng) {
  if (nbars < 1 || st.progression.empty()) throw std::invalid_argument("song needs bars and a progression");
  static const int major[7] = {0, 2, 4, 5, 7, 9, 11};
  static const int minor[7] = {0, 2, 3, 5, 7, 8, 10};
  const int* scale = st.minor ? minor : major;
  constexpr int64_t unit = 60;  // 480 / 8
  constexpr int64_t bar_len = 32 * unit;
  auto degree_pitch = [&](int degree, int base) {
    const int oct = degree >= 0 ? degree / 7 : -((6 - degree) / 7);
    return base + 12 * oct + scale[((degree % 7) + 7) % 7];
  };

  midi::Score s;
  s.ticks_per_quarter = 480;
  s.tempo_map = {midi::TempoChange::from_bpm(0, st.bpm)};
  s.timesig_map = {{0, 4, 4}};
  midi::Track mel{st.program_melody, {}}, bass{st.program_bass, {}}, chords{st.program_chords, {}};
  // Melody as a walk over scale degrees relative to the root.
  const int lo = [&] {
    int d = -14;
    while (degree_pitch(d, st.root) < st.melody_low) ++d;
    return d;
  }();
  const int hi = [&] {
    int d = 21;
    while (degree_pitch(d, st.root) > st.melody_high) --d;
    return d;
  }();
  int deg = (lo + hi) / 2;
  for (int b = 0; b < nbars; ++b) {
    const int chord = st.progression[static_cast<std::size_t>(b) % st.progression.size()];
    const int64_t b0 = b * bar_len;
    for (int64_t t = 0; t < 32; t += st.melody_units) {
      if (rng.uniform() < st.rest_prob) continue;
      if (rng.uniform() < st.leap_prob)
        deg += static_cast<int>(rng.uniform_int(-4, 4));
      else
        deg += static_cast<int>(rng.uniform_int(-1, 1));
      // Strong beats snap to a chord tone.
      if (t % 16 == 0) {
        int best = deg, dist = 99;
        for (int d = deg - 3; d <= deg + 3; ++d) {
          const int rel = ((d - chord) % 7 + 7) % 7;
          if ((rel == 0 || rel == 2 || rel == 4) && std::abs(d - deg) < dist) {
            best = d;
            dist = std::abs(d - deg);
          }
        }
        deg = best;
      }
      deg = std::clamp(deg, lo, hi);
      const int vel = std::clamp(st.velocity + static_cast<int>(rng.uniform_int(-8, 8)), 1, 127);
      mel.notes.push_back({degree_pitch(deg, st.root), vel, b0 + t * unit, st.melody_units * unit});
    }
    const int bass_pitch = degree_pitch(chord, st.root - 24);
    for (int64_t t = 0; t < 32; t += st.bass_units) {
      const int p = (t / st.bass_units) % 2 == 1 && st.bass_units <= 8 ? bass_pitch + 12 : bass_pitch;
      bass.notes.push_back({p, std::clamp(st.velocity - 10, 1, 127), b0 + t * unit, st.bass_units * unit});
    }
    for (int64_t t = 0; t < 32; t += 2 * st.chord_units) {
      const int64_t on = t + st.chord_offset;
      if (on >= 32) break;
      const int64_t len = std::min<int64_t>(st.chord_units, 32 - on);
      for (int k = 0; k < 3; ++k)
        chords.notes.push_back(
            {degree_pitch(chord + 2 * k, st.root - 12), std::clamp(st.velocity - 20, 1, 127), b0 + on * unit, len * unit});
    }
  }
  s.tracks = {std::move(mel), std::move(bass), std::move(chords)};
  midi::normalize(s);
  return s;
}

std::vector<midi::Score> make_corpus(const Style& style, int count, int nbars, uint64_t seed) {
  std::vector<midi::Score> out;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::substream(seed, {0x5117, static_cast<uint64_t>(i)});
    out.push_back(make_song(style, nbars, rng));
  }
  return out;
}

}  // namespace mrwkv::synth
