#include "mrwkv/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace mrwkv::sample {

using tok::Kind;

SamplerConfig SamplerConfig::identity() {
  SamplerConfig c;
  c.repetition_penalty = 1.0;
  c.temperature = 1.0;
  c.top_k = 0;
  c.top_p = 1.0;
  return c;
}

void SamplerConfig::check() const {
  if (!(temperature > 0)) throw SamplerError("temperature must be positive");
  if (!(repetition_penalty >= 1)) throw SamplerError("repetition_penalty must be at least 1");
  if (top_k < 0) throw SamplerError("top_k must be non-negative");
  if (!(top_p > 0 && top_p <= 1)) throw SamplerError("top_p must lie in (0, 1]");
  if (max_tokens == 0) throw SamplerError("max_tokens must be positive");
  if (end_retries < 0) throw SamplerError("end_retries must be non-negative");
}

std::vector<double> filter_logits(std::span<const float> logits, std::span<const int> history,
                                  const SamplerConfig& cfg, std::span<const uint8_t> forbidden) {
  cfg.check();
  const std::size_t n = logits.size();
  if (!forbidden.empty() && forbidden.size() != n) throw SamplerError("forbidden mask has the wrong size");
  std::vector<double> z(logits.begin(), logits.end());
  for (double v : z)
    if (!std::isfinite(v)) throw SamplerError("non-finite logit");
  if (cfg.repetition_penalty != 1.0) {
    std::vector<uint8_t> seen(n, 0);
    for (int id : history)
      if (id >= 0 && static_cast<std::size_t>(id) < n) seen[id] = 1;
    for (std::size_t i = 0; i < n; ++i)
      if (seen[i]) z[i] = z[i] > 0 ? z[i] / cfg.repetition_penalty : z[i] * cfg.repetition_penalty;
  }
  for (double& v : z) v /= cfg.temperature;
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < forbidden.size(); ++i)
    if (forbidden[i]) z[i] = ninf;
  const double mx = *std::max_element(z.begin(), z.end());
  if (mx == ninf) throw SamplerError("every token is forbidden");
  std::vector<double> p(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += p[i] = z[i] == ninf ? 0.0 : std::exp(z[i] - mx);
  for (double& v : p) v /= sum;

  // Rank by probability, ties by id, for top-k and top-p.
  if (cfg.top_k > 0 || cfg.top_p < 1.0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = n;
    if (cfg.top_k > 0) keep = std::min(keep, static_cast<std::size_t>(cfg.top_k));
    if (cfg.top_p < 1.0) {
      double kept = 0;
      for (std::size_t i = 0; i < keep; ++i) kept += p[order[i]];
      double cum = 0;
      for (std::size_t i = 0; i < keep; ++i) {
        cum += p[order[i]] / kept;
        if (cum >= cfg.top_p) {
          keep = i + 1;
          break;
        }
      }
    }
    std::vector<double> q(n, 0.0);
    double s = 0;
    for (std::size_t i = 0; i < keep; ++i) s += q[order[i]] = p[order[i]];
    if (!(s > 0)) throw SamplerError("no probability mass left after top-k/top-p");
    for (double& v : q) v /= s;
    p.swap(q);
  }
  return p;
}

int draw(std::span<const double> probs, Rng& rng, bool greedy) {
  if (probs.empty()) throw SamplerError("empty distribution");
  if (greedy) return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  double u = rng.uniform();
  int last = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    last = static_cast<int>(i);
    if (u < probs[i]) return last;
    u -= probs[i];
  }
  if (last < 0) throw SamplerError("empty distribution");
  return last;
}

namespace {

// Whether the grammar accepts every base token of a vocabulary id.
bool accepts_all(tok::BarGrammar g, std::span<const int> expansion) {
  for (int b : expansion) {
    if (!g.accepts(b)) return false;
    g.advance(b);
  }
  return true;
}

}  // namespace

InfillResult infill(const model::Parameters<float>& params, const model::ModelState<float>& state0,
                    const tok::Vocabulary& vocab, std::span<const int> prompt_ids,
                    std::span<const prompt::AttributeControls> controls, std::span<const int> bar_units,
                    const SamplerConfig& cfg) {
  cfg.check();
  const auto& base = vocab.base();
  const std::size_t n_bars = controls.size();
  if (n_bars == 0) throw SamplerError("nothing to infill");
  if (bar_units.size() != n_bars) throw SamplerError("bar_units and controls differ in length");
  if (static_cast<std::size_t>(params.config().vocab_size) != vocab.size())
    throw SamplerError("model vocabulary size differs from the tokenizer");
  {
    // The prompt must end with FillBar_Start and the first bar's controls.
    const auto want = prompt::control_tokens(controls[0], base);
    const std::size_t need = want.size() + 1;
    if (prompt_ids.size() < need || !base.is(prompt_ids[prompt_ids.size() - need], Kind::FillBar_Start) ||
        !std::equal(want.begin(), want.end(), prompt_ids.end() - static_cast<std::ptrdiff_t>(want.size())))
      throw SamplerError("prompt must end with FillBar_Start and the controls of the first bar");
  }

  const std::size_t V = vocab.size();
  const int bar_none = base.bar_none();
  const int fill_end = base.id(Kind::FillBar_End);
  // Ids that can never be drawn inside bar content.
  std::vector<uint8_t> never(V, 0);
  for (std::size_t id = 0; id < V; ++id) {
    const Kind k = vocab.first_kind(static_cast<int>(id));
    if (tok::is_structural(k) || tok::is_control(k) || k == Kind::Program || k == Kind::TimeSig || k == Kind::Tempo ||
        k == Kind::PAD)
      never[id] = 1;
  }

  model::ModelState<float> state = state0;
  std::vector<float> logits = model::forward_sequence(params, state, prompt_ids);
  logits.erase(logits.begin(), logits.end() - static_cast<std::ptrdiff_t>(V));

  Rng rng = Rng::substream(cfg.seed, {0x5A3B});
  InfillResult out;
  tok::BarGrammar grammar(base, bar_units[0], false);
  std::vector<uint8_t> forbid(V);
  auto emit = [&](int id) {
    out.tokens.push_back(id);
    logits = model::forward_step(params, state, id);
  };
  while (true) {
    if (out.tokens.size() >= cfg.max_tokens) {
      out.truncated = true;
      break;
    }
    const bool can_close = grammar.can_end() && !grammar.empty();
    const bool last_bar = out.bars + 1 == n_bars;
    for (std::size_t id = 0; id < V; ++id) {
      if (static_cast<int>(id) == bar_none)
        forbid[id] = !can_close;
      else if (static_cast<int>(id) == fill_end)
        forbid[id] = !can_close;
      else
        forbid[id] = never[id] || !grammar.accepts(vocab.expansion(static_cast<int>(id)).front()) ||
                     !accepts_all(grammar, vocab.expansion(static_cast<int>(id)));
    }
    int id = -1;
    for (int attempt = 0;; ++attempt) {
      const auto probs = filter_logits(logits, out.tokens, cfg, forbid);
      id = draw(probs, rng, cfg.greedy);
      ++out.sampled;
      if (id != fill_end || last_bar) break;
      // FillBar_End before the last bar: redraw, then mask it.
      ++out.end_retries;
      if (attempt >= cfg.end_retries || cfg.greedy) forbid[fill_end] = 1;
    }
    if (id == fill_end || (id == bar_none && last_bar)) {
      out.bars = n_bars;
      break;
    }
    if (id == bar_none) {
      ++out.bars;
      emit(id);
      // The next bar's controls are fed, not sampled, and may run past
      // max_tokens only if the budget is exhausted; check first.
      const auto ctl = prompt::control_tokens(controls[out.bars], base);
      if (out.tokens.size() + ctl.size() > cfg.max_tokens) {
        out.truncated = true;
        break;
      }
      for (int c : ctl) emit(c);
      grammar.reset(bar_units[out.bars]);
      continue;
    }
    for (int b : vocab.expansion(id)) grammar.advance(b);
    emit(id);
  }
  return out;
}

std::string check_fill(std::span<const int> content, const tok::BaseVocab& vocab,
                       std::span<const prompt::AttributeControls> controls) {
  const std::size_t nc = prompt::kControlsPerBar;
  std::size_t bar = 0, i = 0;
  auto expect_controls = [&]() -> std::string {
    if (bar >= controls.size()) return "more bars than controls";
    const auto want = prompt::control_tokens(controls[bar], vocab);
    if (content.size() < i + nc || !std::equal(want.begin(), want.end(), content.begin() + static_cast<std::ptrdiff_t>(i)))
      return "controls of bar " + std::to_string(bar) + " missing or altered at index " + std::to_string(i);
    i += nc;
    return {};
  };
  if (auto e = expect_controls(); !e.empty()) return e;
  std::size_t notes_in_bar = 0;
  bool prev_bar_none = false;
  for (; i < content.size(); ++i) {
    const int id = content[i];
    const Kind k = vocab.kind(id);
    if (k == Kind::Bar_None) {
      if (prev_bar_none) return "consecutive Bar_None at index " + std::to_string(i);
      if (notes_in_bar == 0) return "empty bar " + std::to_string(bar);
      prev_bar_none = true;
      ++bar;
      ++i;
      if (auto e = expect_controls(); !e.empty()) return e;
      --i;
      notes_in_bar = 0;
      continue;
    }
    if (tok::is_control(k)) return "sampled control token at index " + std::to_string(i);
    if (tok::is_structural(k)) return "structural token inside fill content at index " + std::to_string(i);
    prev_bar_none = false;
    if (k == Kind::Duration) ++notes_in_bar;
  }
  if (notes_in_bar == 0) return "empty bar " + std::to_string(bar);
  if (bar + 1 != controls.size())
    return "expected " + std::to_string(controls.size()) + " bars, found " + std::to_string(bar + 1);
  return {};
}

}  // namespace mrwkv::sample
