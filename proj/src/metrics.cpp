#include "mrwkv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "json.hpp"

namespace mrwkv::metrics {

namespace {

void add_overlap(Chroma& c, const BarContent& bar, int64_t lo, int64_t hi) {
  const int64_t bar_end = bar.start + bar.length;
  for (const auto& n : bar.notes) {
    const int64_t a = std::max(lo, n.onset), b = std::min({hi, n.end(), bar_end});
    if (b > a) c[static_cast<std::size_t>(((n.pitch % 12) + 12) % 12)] += static_cast<double>(b - a);
  }
}

void normalize(Chroma& c) {
  double s = 0;
  for (double v : c) s += v;
  if (s > 0)
    for (double& v : c) v /= s;
}

}  // namespace

std::vector<Chroma> chroma_steps(const BarContent& bar, int steps) {
  if (steps < 1) throw MetricError("steps must be positive");
  if (bar.length <= 0) throw MetricError("bar length must be positive");
  std::vector<Chroma> out(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    // Step boundaries in exact integer arithmetic.
    const int64_t lo = bar.start + bar.length * t / steps, hi = bar.start + bar.length * (t + 1) / steps;
    Chroma c{};
    add_overlap(c, bar, lo, hi);
    normalize(c);
    out[static_cast<std::size_t>(t)] = c;
  }
  return out;
}

Chroma bar_chroma(const BarContent& bar) {
  Chroma c{};
  add_overlap(c, bar, bar.start, bar.start + bar.length);
  normalize(c);
  return c;
}

CpResult content_preservation(std::span<const BarContent> original, std::span<const BarContent> infilled, int steps) {
  if (original.size() != infilled.size()) throw MetricError("bar counts differ");
  if (original.empty()) throw MetricError("no bars to compare");
  std::vector<Chroma> co, ci;
  for (std::size_t b = 0; b < original.size(); ++b) {
    auto x = chroma_steps(original[b], steps), y = chroma_steps(infilled[b], steps);
    co.insert(co.end(), x.begin(), x.end());
    ci.insert(ci.end(), y.begin(), y.end());
  }
  const std::size_t frames = co.size();
  const std::size_t w = static_cast<std::size_t>(std::max(1, steps / 2));
  auto average = [&](const std::vector<Chroma>& c, std::size_t t) {
    Chroma a{};
    const std::size_t end = std::min(frames, t + w);
    for (std::size_t u = t; u < end; ++u)
      for (int k = 0; k < 12; ++k) a[k] += c[u][k];
    for (double& v : a) v /= static_cast<double>(end - t);
    return a;
  };
  CpResult r;
  r.frames = frames;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    const auto a = average(co, t), b = average(ci, t);
    double dot = 0, na = 0, nb = 0;
    for (int k = 0; k < 12; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    if (na == 0 || nb == 0) {
      ++r.skipped;
      continue;
    }
    sum += dot / std::sqrt(na * nb);  // exact 1 for identical vectors
    ++used;
  }
  r.value = used ? sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::vector<uint8_t> groove_pattern(const BarContent& bar, int tpq, int ppq, int dim) {
  if (bar.length <= 0) throw MetricError("bar length must be positive");
  std::vector<uint8_t> g;
  if (dim == 0) {
    const double unit = static_cast<double>(tpq) / ppq;
    const auto slots = static_cast<std::size_t>(std::llround(static_cast<double>(bar.length) / unit));
    g.assign(std::max<std::size_t>(1, slots), 0);
    for (const auto& n : bar.notes) {
      const auto pos = std::llround(static_cast<double>(n.onset - bar.start) / unit);
      if (pos >= 0 && static_cast<std::size_t>(pos) < g.size()) g[static_cast<std::size_t>(pos)] = 1;
    }
  } else {
    g.assign(static_cast<std::size_t>(dim), 0);
    for (const auto& n : bar.notes) {
      const int64_t off = n.onset - bar.start;
      if (off < 0 || off >= bar.length) continue;
      g[static_cast<std::size_t>(off * dim / bar.length)] = 1;
    }
  }
  return g;
}

double groove_similarity(std::span<const uint8_t> a, std::span<const uint8_t> b) {
  if (a.size() != b.size()) throw MetricError("groove patterns differ in dimension");
  if (a.empty()) throw MetricError("empty groove pattern");
  std::size_t x = 0;
  for (std::size_t i = 0; i < a.size(); ++i) x += (a[i] != 0) != (b[i] != 0);
  return 1.0 - static_cast<double>(x) / static_cast<double>(a.size());
}

double entropy_bits(const Chroma& c) {
  double h = 0;
  for (double v : c)
    if (v > 0) h -= v * std::log2(v);
  return h;
}

PcheResult pche_difference(const BarContent& original, const BarContent& infilled) {
  const auto a = bar_chroma(original), b = bar_chroma(infilled);
  const bool ea = std::all_of(a.begin(), a.end(), [](double v) { return v == 0; });
  const bool eb = std::all_of(b.begin(), b.end(), [](double v) { return v == 0; });
  if (ea && eb) return {0.0, true};
  return {std::abs(entropy_bits(a) - entropy_bits(b)), false};
}

F1Result f1_notes(std::span<const BarContent> original, std::span<const BarContent> infilled, const F1Options& opt) {
  if (original.size() != infilled.size()) throw MetricError("bar counts differ");
  using Key = std::tuple<std::size_t, int, int64_t, int64_t>;
  const double unit = static_cast<double>(opt.ticks_per_quarter) / opt.positions_per_quarter;
  auto keys = [&](std::span<const BarContent> bars) {
    std::vector<Key> out;
    for (std::size_t b = 0; b < bars.size(); ++b)
      for (const auto& n : bars[b].notes)
        out.emplace_back(b, n.pitch, std::llround(static_cast<double>(n.onset - bars[b].start) / unit),
                         opt.match_duration ? std::llround(static_cast<double>(n.duration) / unit) : 0);
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto ko = keys(original), ki = keys(infilled);
  if (ko.empty() && ki.empty()) return {1.0, true};
  std::vector<Key> common;
  std::set_intersection(ko.begin(), ko.end(), ki.begin(), ki.end(), std::back_inserter(common));
  return {2.0 * static_cast<double>(common.size()) / static_cast<double>(ko.size() + ki.size()), false};
}

Adherence attribute_adherence(std::span<const prompt::AttributeControls> requested,
                              std::span<const BarContent> generated, int tpq, int poly_cap) {
  if (requested.size() != generated.size()) throw MetricError("controls and bars differ in count");
  Adherence a;
  a.bars = requested.size();
  if (a.bars == 0) return a;
  double dens = 0;
  std::size_t ok_d = 0, ok_f = 0, ok_lo = 0, ok_hi = 0;
  for (std::size_t b = 0; b < requested.size(); ++b) {
    const auto& want = requested[b];
    const int count = static_cast<int>(generated[b].notes.size());
    if (want.density == prompt::AttributeControls::kDensityOver)
      dens += std::max(0, 18 - count);
    else
      dens += std::abs(count - want.density);
    if (count == 0) continue;  // every categorical control fails on an empty bar
    const auto got = prompt::compute_controls(generated[b].notes, tpq, poly_cap);
    ok_d += got.density == want.density;
    ok_f += got.dur_flags == want.dur_flags;
    ok_lo += got.poly_min == want.poly_min;
    ok_hi += got.poly_max == want.poly_max;
  }
  const double n = static_cast<double>(a.bars);
  a.density_abs_diff = dens / n;
  a.success = {{"density", ok_d / n}, {"dur_flags", ok_f / n}, {"poly_min", ok_lo / n}, {"poly_max", ok_hi / n}};
  return a;
}

std::vector<BarContent> region_bars(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track,
                                    std::size_t start, std::size_t n) {
  const auto bars = prompt::prompt_bars(tk, score);
  std::vector<BarContent> out;
  for (std::size_t b = start; b < start + n; ++b) {
    BarContent c;
    if (b < bars.size()) {
      c.start = bars[b].start;
      c.length = bars[b].length();
      c.notes = prompt::notes_in_bar(tk, score, track, bars[b]);
    } else {
      // Past the last note: an empty 4/4 bar continuing the grid.
      const auto& last = bars.empty() ? midi::Bar{0, 4 * static_cast<int64_t>(score.ticks_per_quarter)} : bars.back();
      c.length = last.length();
      c.start = last.end + static_cast<int64_t>(b - bars.size()) * c.length;
    }
    out.push_back(std::move(c));
  }
  return out;
}

ExampleMetrics evaluate_example(const tok::RemiTokenizer& tk, const midi::Score& original,
                                const midi::Score& infilled, std::size_t track, std::size_t start, std::size_t n,
                                const EvalOptions& opt) {
  if (n == 0) throw MetricError("no bars to compare");
  if (track >= original.tracks.size() || track >= infilled.tracks.size()) throw MetricError("track out of range");
  const auto o = region_bars(tk, original, track, start, n);
  const auto i = region_bars(tk, infilled, track, start, n);
  ExampleMetrics m;
  const auto cp = content_preservation(o, i, opt.chroma_steps);
  m.cp = cp.value;
  m.cp_valid = std::isfinite(cp.value);
  m.cp_skipped = cp.skipped;
  double gs = 0, pche = 0;
  std::size_t pche_n = 0;
  for (std::size_t b = 0; b < n; ++b) {
    gs += groove_similarity(groove_pattern(o[b], original.ticks_per_quarter, tk.config().positions_per_quarter,
                                           opt.groove_dim),
                            groove_pattern(i[b], infilled.ticks_per_quarter, tk.config().positions_per_quarter,
                                           opt.groove_dim));
    const auto p = pche_difference(o[b], i[b]);
    if (!p.skipped) {
      pche += p.value;
      ++pche_n;
    }
  }
  m.gs = gs / static_cast<double>(n);
  m.pche_valid = pche_n > 0;
  m.pche = pche_n ? pche / static_cast<double>(pche_n) : 0.0;
  F1Options fo;
  fo.match_duration = opt.f1_duration;
  fo.ticks_per_quarter = original.ticks_per_quarter;
  fo.positions_per_quarter = tk.config().positions_per_quarter;
  m.f1 = f1_notes(o, i, fo).value;
  return m;
}

Stat summarize(std::span<const double> values) {
  Stat s;
  s.n = values.size();
  if (s.n == 0) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = s.n > 1 ? std::sqrt(s.std / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

MetricReport aggregate(std::vector<ExampleMetrics> examples) {
  MetricReport r;
  std::vector<double> cp, gs, pche, f1;
  for (const auto& e : examples) {
    if (e.cp_valid) cp.push_back(e.cp);
    gs.push_back(e.gs);
    if (e.pche_valid) pche.push_back(e.pche);
    f1.push_back(e.f1);
  }
  r.cp = summarize(cp);
  r.gs = summarize(gs);
  r.pche = summarize(pche);
  r.f1 = summarize(f1);
  r.examples = std::move(examples);
  return r;
}

std::string report_to_json(const MetricReport& r) {
  auto stat = [](const Stat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; };
  nlohmann::json j;
  j["cp"] = stat(r.cp);
  j["gs"] = stat(r.gs);
  j["pche"] = stat(r.pche);
  j["f1"] = stat(r.f1);
  j["failures"] = r.failures;
  auto ex = nlohmann::json::array();
  for (const auto& e : r.examples) {
    nlohmann::json x{{"gs", e.gs}, {"f1", e.f1}, {"cp_skipped", e.cp_skipped}};
    x["cp"] = e.cp_valid ? nlohmann::json(e.cp) : nlohmann::json(nullptr);
    x["pche"] = e.pche_valid ? nlohmann::json(e.pche) : nlohmann::json(nullptr);
    ex.push_back(x);
  }
  j["examples"] = ex;
  if (r.adherence) {
    j["adherence"] = {{"density_abs_diff", r.adherence->density_abs_diff},
                      {"bars", r.adherence->bars},
                      {"success", r.adherence->success}};
  }
  return j.dump(2);
}

}  // namespace mrwkv::metrics
