#include "mrwkv/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "json.hpp"

namespace mrwkv::harness {

using nlohmann::json;

// --- protocol ----------------------------------------------------------------

void Task::check() const {
  if (n < 1) throw HarnessError("task needs at least one infilled bar");
  if (c != 4 * n)
    throw HarnessError("context must be 4N bars: N=" + std::to_string(n) + " got C=" + std::to_string(c));
}

std::string Task::name() const { return std::to_string(n) + "-bar"; }

Task make_task(std::size_t n) {
  Task t{n, 4 * n};
  t.check();
  return t;
}

std::vector<Task> paper_tasks() { return {make_task(2), make_task(4), make_task(8)}; }

std::vector<AblationRun> ablation_grid(const sample::SamplerConfig& defaults) {
  defaults.check();
  std::vector<AblationRun> out{{"default", defaults}};
  auto fmt = [](double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (s.back() == '.') s.pop_back();
    return s;
  };
  for (double t : {0.8, 1.2}) {
    auto c = defaults;
    c.temperature = t;
    out.push_back({"temperature=" + fmt(t), c});
  }
  for (double r : {1.0, 1.4}) {
    auto c = defaults;
    c.repetition_penalty = r;
    out.push_back({"repetition_penalty=" + fmt(r), c});
  }
  for (double p : {0.9, 0.98}) {
    auto c = defaults;
    c.top_p = p;
    out.push_back({"top_p=" + fmt(p), c});
  }
  for (int k : {15, 30}) {
    auto c = defaults;
    c.top_k = k;
    out.push_back({"top_k=" + std::to_string(k), c});
  }
  return out;
}

// --- significance ------------------------------------------------------------

namespace {

// Number of subsets of `weights` per subset sum; sums index the vector.
std::vector<double> subset_sum_counts(std::span<const int> weights) {
  int total = 0;
  for (int w : weights) total += w;
  std::vector<double> c(static_cast<std::size_t>(total) + 1, 0.0);
  c[0] = 1;
  int reach = 0;
  for (int w : weights) {
    for (int s = reach; s >= 0; --s)
      if (c[s] != 0) c[s + w] += c[s];
    reach += w;
  }
  return c;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw HarnessError("paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] - y[i];
    if (!std::isfinite(v)) throw HarnessError("non-finite value in paired samples");
    if (v != 0) d.push_back(v);
  }
  WilcoxonResult r;
  r.n = d.size();
  if (r.n == 0) return r;
  std::vector<std::size_t> order(r.n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  // Doubled ranks keep average ranks of ties integral.
  std::vector<int> rank2(r.n);
  double tie_term = 0;
  for (std::size_t i = 0; i < r.n;) {
    std::size_t j = i;
    while (j + 1 < r.n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const auto t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = static_cast<int>(i + j + 2);
    i = j + 1;
  }
  int wp2 = 0, wm2 = 0;
  for (std::size_t i = 0; i < r.n; ++i) (d[i] > 0 ? wp2 : wm2) += rank2[i];
  r.w_plus = wp2 / 2.0;
  r.w_minus = wm2 / 2.0;
  r.w = std::min(r.w_plus, r.w_minus);
  const double nn = static_cast<double>(r.n);
  if (r.n <= 50) {
    const auto counts = subset_sum_counts(rank2);
    double below = 0;
    for (int s = 0; s <= std::min(wp2, wm2); ++s) below += counts[s];
    r.p = std::min(1.0, 2.0 * below / std::ldexp(1.0, static_cast<int>(r.n)));
    r.exact = true;
  } else {
    const double mean = nn * (nn + 1) / 4;
    const double sd = std::sqrt(nn * (nn + 1) * (2 * nn + 1) / 24 - tie_term / 48);
    const double z = (r.w - mean + 0.5) / sd;
    r.p = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
    r.exact = false;
  }
  return r;
}

int wilcoxon_critical_value(std::size_t n, double alpha) {
  if (n == 0 || n > 60) throw HarnessError("critical values are tabulated for 1..60 pairs");
  std::vector<int> w(n);
  std::iota(w.begin(), w.end(), 1);
  const auto counts = subset_sum_counts(w);
  const double total = std::ldexp(1.0, static_cast<int>(n));
  double cum = 0;
  int crit = -1;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    cum += counts[s];
    if (cum / total > alpha / 2) break;
    crit = static_cast<int>(s);
  }
  return crit;
}

std::vector<double> holm_adjust(std::span<const double> p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  std::vector<double> adj(m);
  double run = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!(p[order[i]] >= 0 && p[order[i]] <= 1)) throw HarnessError("p-values must lie in [0, 1]");
    run = std::max(run, std::min(1.0, static_cast<double>(m - i) * p[order[i]]));
    adj[order[i]] = run;
  }
  return adj;
}

std::vector<bool> holm_reject(std::span<const double> p, double alpha) {
  const auto adj = holm_adjust(p);
  std::vector<bool> out(adj.size());
  for (std::size_t i = 0; i < adj.size(); ++i) out[i] = adj[i] <= alpha;
  return out;
}

// --- bundles -----------------------------------------------------------------

Bundle::Bundle(tok::Vocabulary v, const model::Parameters<double>& p)
    : tk(v.config()),
      vocab(std::move(v)),
      params(p.cast<float>()),
      state(p.config()),
      weights_hash(model::parameter_hash(p)) {
  if (static_cast<std::size_t>(p.config().vocab_size) != vocab.size())
    throw HarnessError("model vocab_size " + std::to_string(p.config().vocab_size) + " differs from vocabulary size " +
                       std::to_string(vocab.size()));
}

Bundle load_bundle(const std::filesystem::path& dir, const std::string& variant) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw HarnessError("checkpoint directory not found: " + dir.string());
  auto vocab = tok::load_vocabulary(dir / "vocab.json");
  const auto params = model::parameters_from<double>(model::load_checkpoint(dir / "model.ckpt"));
  std::string v = variant;
  if (v == "auto") v = fs::exists(dir / "state.ckpt") ? "state" : fs::exists(dir / "lora.ckpt") ? "lora" : "base";
  if (v == "base") {
    Bundle b(std::move(vocab), params);
    return b;
  }
  if (v == "state") {
    Bundle b(std::move(vocab), params);
    b.state = model::state_from<double>(model::load_checkpoint(dir / "state.ckpt")).cast<float>();
    if (b.state.size() != model::ModelState<float>(params.config()).size())
      throw HarnessError("state checkpoint does not match the model");
    b.variant = "state";
    return b;
  }
  if (v == "lora") {
    const auto lora = model::lora_from<double>(model::load_checkpoint(dir / "lora.ckpt"), params.layout());
    Bundle b(std::move(vocab), model::merge_lora(params, lora));
    b.weights_hash = model::parameter_hash(params);
    b.variant = "lora";
    return b;
  }
  throw HarnessError("unknown variant '" + variant + "' (base, state, lora, auto)");
}

void save_bundle(const std::filesystem::path& dir, const tok::Vocabulary& vocab, const model::Parameters<double>& p,
                 const model::ModelState<double>* state, const model::LoraAdapter<double>* lora) {
  std::filesystem::create_directories(dir);
  tok::save_vocabulary(dir / "vocab.json", vocab);
  model::save_checkpoint(dir / "model.ckpt", model::to_checkpoint(p));
  if (state) model::save_checkpoint(dir / "state.ckpt", model::to_checkpoint(*state));
  if (lora) model::save_checkpoint(dir / "lora.ckpt", model::to_checkpoint(*lora, p.layout()));
}

// --- infilling ---------------------------------------------------------------

namespace {

void check_region(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t track, std::size_t start,
                  std::size_t n) {
  if (track >= score.tracks.size())
    throw HarnessError("track " + std::to_string(track) + " out of range (score has " +
                       std::to_string(score.tracks.size()) + ")");
  if (n < 1) throw HarnessError("at least one bar must be infilled");
  const auto bars = prompt::prompt_bars(tk, score);
  if (start + n > bars.size())
    throw HarnessError("bars " + std::to_string(start) + ".." + std::to_string(start + n - 1) +
                       " outside the score (" + std::to_string(bars.size()) + " bars)");
}

}  // namespace

std::vector<prompt::AttributeControls> resolve_controls(const tok::RemiTokenizer& tk, const midi::Score& score,
                                                        const InfillRequest& req) {
  check_region(tk, score, req.track, req.start, req.n);
  if (!req.controls.empty() && req.controls.size() != req.n)
    throw HarnessError("controls must be given for every bar of the region or omitted");
  const auto bars = prompt::prompt_bars(tk, score);
  std::vector<prompt::AttributeControls> out;
  for (std::size_t i = 0; i < req.n; ++i) {
    if (!req.controls.empty() && req.controls[i]) {
      out.push_back(*req.controls[i]);
      continue;
    }
    const auto notes = prompt::notes_in_bar(tk, score, req.track, bars[req.start + i]);
    if (notes.empty())
      throw HarnessError("bar " + std::to_string(req.start + i) + " is empty in the original; give its controls");
    out.push_back(prompt::compute_controls(notes, score.ticks_per_quarter));
  }
  return out;
}

InfillOutcome infill_score(const Bundle& bundle, const midi::Score& score, const InfillRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  InfillOutcome out;
  out.requested = resolve_controls(bundle.tk, score, req);
  out.spec.track = req.track;
  out.spec.infill_start = req.start;
  out.spec.infill_len = req.n;
  out.spec.context_bars = req.context;
  out.spec.controls = out.requested;
  const auto pr = prompt::build_prompt(bundle.tk, score, out.spec, prompt::Mode::Infer);
  const auto ids = tok::apply_bpe(pr.tokens, bundle.vocab);
  out.prompt_tokens = ids.size();

  const auto bars = prompt::prompt_bars(bundle.tk, score);
  const double unit = bundle.tk.unit_ticks(score.ticks_per_quarter);
  std::vector<int> units;
  for (std::size_t i = 0; i < req.n; ++i)
    units.push_back(static_cast<int>(std::llround(static_cast<double>(bars[req.start + i].length()) / unit)));

  out.generation = sample::infill(bundle.params, bundle.state, bundle.vocab, ids, out.requested, units, req.sampler);
  if (out.generation.truncated)
    throw HarnessError("generation hit max_tokens after " + std::to_string(out.generation.bars) + " of " +
                       std::to_string(req.n) + " bars");
  auto content = prompt::control_tokens(out.requested[0], bundle.vocab.base());
  const auto gen = tok::invert_bpe(out.generation.tokens, bundle.vocab);
  content.insert(content.end(), gen.begin(), gen.end());
  out.score = prompt::splice_back(bundle.tk, score, out.spec, content);

  const auto new_bars = prompt::prompt_bars(bundle.tk, out.score);
  for (std::size_t i = 0; i < req.n; ++i) {
    const auto notes = prompt::notes_in_bar(bundle.tk, out.score, req.track, new_bars[req.start + i]);
    if (notes.empty())
      out.realized.push_back(std::nullopt);
    else
      out.realized.push_back(prompt::compute_controls(notes, out.score.ticks_per_quarter));
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

Infiller model_infiller(const Bundle& bundle) {
  return [&bundle](const midi::Score& s, const InfillRequest& r) { return infill_score(bundle, s, r).score; };
}

Infiller identity_infiller() {
  return [](const midi::Score& s, const InfillRequest&) { return s; };
}

// --- experiments -------------------------------------------------------------

std::optional<EvalCase> choose_case(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t index,
                                    const EvalConfig& cfg) {
  cfg.task.check();
  Rng rng = Rng::substream(cfg.seed, {0xCA5E, index});
  const auto bars = prompt::prompt_bars(tk, score);
  std::vector<std::size_t> tracks(score.tracks.size());
  std::iota(tracks.begin(), tracks.end(), 0);
  rng.shuffle(tracks);
  for (std::size_t t : tracks) {
    std::vector<bool> nonempty;
    for (const auto& b : bars) nonempty.push_back(!prompt::notes_in_bar(tk, score, t, b).empty());
    if (nonempty.size() < cfg.task.n) continue;
    if (auto s = prompt::select_region_start(nonempty, cfg.task.n, rng, cfg.region_attempts))
      return EvalCase{index, t, *s};
  }
  return std::nullopt;
}

namespace {

struct CaseResult {
  bool ok = false;
  metrics::ExampleMetrics m;
  metrics::Adherence adherence;
};

CaseResult run_case(const tok::RemiTokenizer& tk, const Infiller& infiller, const midi::Score& score,
                    std::size_t index, const EvalConfig& cfg) {
  CaseResult r;
  try {
    const auto c = choose_case(tk, score, index, cfg);
    if (!c) return r;
    InfillRequest req;
    req.track = c->track;
    req.start = c->start;
    req.n = cfg.task.n;
    req.context = cfg.task.c;
    req.sampler = cfg.sampler;
    req.sampler.seed = Rng::substream(cfg.sampler.seed, {0x5EED, cfg.seed, index}).next();
    const auto requested = resolve_controls(tk, score, req);
    const auto filled = infiller(score, req);
    r.m = metrics::evaluate_example(tk, score, filled, c->track, c->start, cfg.task.n, cfg.metric_options);
    const auto gen_bars = metrics::region_bars(tk, filled, c->track, c->start, cfg.task.n);
    r.adherence = metrics::attribute_adherence(requested, gen_bars, filled.ticks_per_quarter);
    r.ok = true;
  } catch (const std::exception&) {
    r.ok = false;
  }
  return r;
}

}  // namespace

metrics::MetricReport run_objective_eval(const tok::RemiTokenizer& tk, const Infiller& infiller,
                                         std::span<const midi::Score> scores, const EvalConfig& cfg) {
  cfg.task.check();
  std::vector<CaseResult> results(scores.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < scores.size();) results[i] = run_case(tk, infiller, scores[i], i, cfg);
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(cfg.threads, scores.size()));
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<metrics::ExampleMetrics> ex;
  metrics::Adherence total;
  std::size_t failures = 0;
  for (const auto& r : results) {
    if (!r.ok) {
      ++failures;
      continue;
    }
    ex.push_back(r.m);
    const double b = static_cast<double>(r.adherence.bars);
    total.density_abs_diff += r.adherence.density_abs_diff * b;
    for (const auto& [k, v] : r.adherence.success) total.success[k] += v * b;
    total.bars += r.adherence.bars;
  }
  auto report = metrics::aggregate(std::move(ex));
  report.failures = failures;
  if (total.bars > 0) {
    const double b = static_cast<double>(total.bars);
    total.density_abs_diff /= b;
    for (auto& [k, v] : total.success) v /= b;
    report.adherence = total;
  }
  return report;
}

std::vector<AblationResult> run_sampling_ablation(const Bundle& bundle, std::span<const midi::Score> scores,
                                                  const EvalConfig& cfg) {
  std::vector<AblationResult> out;
  for (const auto& run : ablation_grid(cfg.sampler)) {
    auto c = cfg;
    c.sampler = run.cfg;
    out.push_back({run, run_objective_eval(bundle.tk, model_infiller(bundle), scores, c)});
  }
  return out;
}

namespace {

json sampler_json(const sample::SamplerConfig& c) {
  return {{"temperature", c.temperature}, {"repetition_penalty", c.repetition_penalty}, {"top_k", c.top_k},
          {"top_p", c.top_p},             {"seed", c.seed},                             {"max_tokens", c.max_tokens}};
}

}  // namespace

std::string ablation_to_json(std::span<const AblationResult> results) {
  json runs = json::array();
  for (const auto& r : results)
    runs.push_back({{"name", r.run.name},
                    {"sampler", sampler_json(r.run.cfg)},
                    {"report", json::parse(metrics::report_to_json(r.report))}});
  return json{{"runs", runs}}.dump(2);
}

Split split_indices(std::size_t count, std::size_t n_train, uint64_t seed) {
  if (n_train >= count) throw HarnessError("split needs at least one test item");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng::substream(seed, {0x5917});
  rng.shuffle(idx);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<train::Example> make_examples(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab,
                                          std::span<const midi::Score> scores, std::size_t per_score,
                                          uint64_t seed, const prompt::ExampleConfig& cfg) {
  std::vector<train::Example> out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t k = 0; k < per_score; ++k) {
      Rng rng = Rng::substream(seed, {0xE8A4, i, k});
      try {
        auto ex = prompt::make_training_example(tk, vocab, scores[i], rng, cfg);
        out.push_back({std::move(ex.ids), std::move(ex.loss_mask)});
      } catch (const prompt::ExampleRejected&) {
      }
    }
  return out;
}

std::vector<SplitOutcome> run_style_split_experiment(const tok::Vocabulary& vocab,
                                                     const model::Parameters<double>& params,
                                                     std::span<const midi::Score> corpus,
                                                     const StyleSplitConfig& cfg) {
  const tok::RemiTokenizer tk(vocab.config());
  std::vector<SplitOutcome> out;
  for (std::size_t s = 0; s < cfg.n_splits; ++s) {
    SplitOutcome o;
    o.split = split_indices(corpus.size(), cfg.n_train, Rng::substream(cfg.seed, {s}).next());
    std::vector<midi::Score> tr, te;
    for (auto i : o.split.train) tr.push_back(corpus[i]);
    for (auto i : o.split.test) te.push_back(corpus[i]);
    const auto train_ex = make_examples(tk, vocab, tr, cfg.examples_per_score, cfg.seed * 31 + s, cfg.example_config);
    const auto test_ex = make_examples(tk, vocab, te, cfg.test_examples_per_score, cfg.seed * 31 + s + 1000, cfg.example_config);
    if (train_ex.empty() || test_ex.empty()) throw HarnessError("split produced no usable examples");
    const model::ModelState<double> zero(params.config());
    o.base_loss = train::evaluate(params, zero, test_ex).nats_per_token;
    model::ModelState<double> state(params.config());
    auto tc = cfg.train;
    tc.mode = train::Mode::State;
    tc.seed = cfg.train.seed + s;
    train::state_tune(params, state, train::fixed_source(train_ex), tc);
    o.tuned_loss = train::evaluate(params, state, test_ex).nats_per_token;
    if (cfg.run_eval) {
      Bundle base(vocab, params);
      o.base_report = run_objective_eval(tk, model_infiller(base), te, cfg.eval);
      Bundle tuned(vocab, params);
      tuned.state = state.cast<float>();
      tuned.variant = "state";
      o.tuned_report = run_objective_eval(tk, model_infiller(tuned), te, cfg.eval);
    }
    out.push_back(std::move(o));
  }
  return out;
}

std::string style_split_to_json(std::span<const SplitOutcome> outcomes) {
  json splits = json::array();
  for (const auto& o : outcomes)
    splits.push_back({{"train", o.split.train},
                      {"test", o.split.test},
                      {"base_loss", o.base_loss},
                      {"tuned_loss", o.tuned_loss},
                      {"base_report", json::parse(metrics::report_to_json(o.base_report))},
                      {"tuned_report", json::parse(metrics::report_to_json(o.tuned_report))}});
  return json{{"splits", splits}}.dump(2);
}

}  // namespace mrwkv::harness
