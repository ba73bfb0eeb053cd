#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "mrwkv/metrics.hpp"
#include "mrwkv/rng.hpp"

// Tick-by-tick reference implementations of the objective metrics, at a
// coarse resolution (24 ticks per quarter, 8 grid positions per quarter).
namespace metric_refs {

namespace midi = mrwkv::midi;
using mrwkv::Rng;
using mrwkv::metrics::BarContent;
using mrwkv::metrics::Chroma;

inline constexpr int kTpq = 24, kPpq = 8;

inline BarContent random_bar(Rng& rng, int64_t start, int64_t length, int max_notes) {
  BarContent b{start, length, {}};
  const int n = static_cast<int>(rng.uniform_int(0, max_notes));
  for (int i = 0; i < n; ++i) {
    midi::Note x;
    x.pitch = static_cast<int>(rng.uniform_int(36, 84));
    // Mostly on grid so F1 and groove see collisions.
    x.onset = start + (rng.uniform() < 0.7 ? 3 * rng.uniform_int(0, length / 3 - 1) : rng.uniform_int(0, length - 1));
    x.duration = rng.uniform_int(1, length);
    b.notes.push_back(x);
  }
  return b;
}


inline Chroma ref_chroma(const BarContent& b, int64_t lo, int64_t hi) {
  Chroma c{};
  double total = 0;
  for (int64_t t = lo; t < hi; ++t)
    for (const auto& n : b.notes)
      if (t >= n.onset && t < n.onset + n.duration && t < b.start + b.length) {
        c[n.pitch % 12] += 1;
        total += 1;
      }
  if (total > 0)
    for (auto& v : c) v /= total;
  return c;
}

inline double ref_cp(const std::vector<BarContent>& o, const std::vector<BarContent>& i, int T) {
  std::vector<Chroma> a, b;
  for (std::size_t k = 0; k < o.size(); ++k)
    for (int t = 0; t < T; ++t) {
      const int64_t L = o[k].length;
      a.push_back(ref_chroma(o[k], o[k].start + L * t / T, o[k].start + L * (t + 1) / T));
      b.push_back(ref_chroma(i[k], i[k].start + L * t / T, i[k].start + L * (t + 1) / T));
    }
  const std::size_t F = a.size(), w = static_cast<std::size_t>(T / 2);
  double s = 0;
  int used = 0;
  for (std::size_t t = 0; t < F; ++t) {
    Chroma ma{}, mb{};
    int cnt = 0;
    for (std::size_t u = t; u < t + w && u < F; ++u, ++cnt)
      for (int p = 0; p < 12; ++p) {
        ma[p] += a[u][p];
        mb[p] += b[u][p];
      }
    double d = 0, x = 0, y = 0;
    for (int p = 0; p < 12; ++p) {
      d += (ma[p] / cnt) * (mb[p] / cnt);
      x += (ma[p] / cnt) * (ma[p] / cnt);
      y += (mb[p] / cnt) * (mb[p] / cnt);
    }
    if (x == 0 || y == 0) continue;
    s += d / (std::sqrt(x) * std::sqrt(y));
    ++used;
  }
  return used ? s / used : NAN;
}

inline double ref_entropy(const BarContent& b) {
  const auto c = ref_chroma(b, b.start, b.start + b.length);
  double h = 0;
  for (double v : c)
    if (v > 0) h -= v * std::log(v) / std::log(2.0);
  return h;
}

inline std::vector<uint8_t> ref_groove(const BarContent& b) {
  const int64_t unit = kTpq / kPpq;
  std::vector<uint8_t> g(static_cast<std::size_t>(b.length / unit), 0);
  for (int64_t s = 0; s < static_cast<int64_t>(g.size()); ++s)
    for (const auto& n : b.notes) {
      const int64_t off = n.onset - b.start;
      // Nearest grid slot: s * unit - unit/2 <= off < s * unit + unit/2, ties up.
      if (2 * off >= (2 * s - 1) * unit && 2 * off < (2 * s + 1) * unit) g[static_cast<std::size_t>(s)] = 1;
    }
  return g;
}

inline double ref_gs(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  int same = 0;
  for (std::size_t k = 0; k < a.size(); ++k) same += a[k] == b[k];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline double ref_f1(const std::vector<BarContent>& o, const std::vector<BarContent>& i) {
  const int64_t unit = kTpq / kPpq;
  std::size_t no = 0, ni = 0, match = 0;
  for (std::size_t k = 0; k < o.size(); ++k) {
    no += o[k].notes.size();
    ni += i[k].notes.size();
    std::vector<bool> used(i[k].notes.size(), false);
    for (const auto& x : o[k].notes)
      for (std::size_t j = 0; j < i[k].notes.size(); ++j) {
        const auto& y = i[k].notes[j];
        const auto px = std::llround(static_cast<double>(x.onset - o[k].start) / unit);
        const auto py = std::llround(static_cast<double>(y.onset - i[k].start) / unit);
        if (!used[j] && x.pitch == y.pitch && px == py) {
          used[j] = true;
          ++match;
          break;
        }
      }
  }
  if (no + ni == 0) return 1.0;
  return 2.0 * static_cast<double>(match) / static_cast<double>(no + ni);
}

inline BarContent notes_at(std::initializer_list<int> pitches, int64_t length = 96) {
  BarContent b{0, length, {}};
  int64_t t = 0;
  const int64_t d = length / static_cast<int64_t>(pitches.size());
  for (int p : pitches) {
    b.notes.push_back({p, 100, t, d});
    t += d;
  }
  return b;
}

}  // namespace metric_refs
