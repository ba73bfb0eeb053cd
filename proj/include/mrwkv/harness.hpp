#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrwkv/bpe.hpp"
#include "mrwkv/metrics.hpp"
#include "mrwkv/model.hpp"
#include "mrwkv/prompt.hpp"
#include "mrwkv/sampler.hpp"
#include "mrwkv/train.hpp"

namespace mrwkv::harness {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- protocol ----------------------------------------------------------------

/// N infilled bars with C context bars on each side.
struct Task {
  std::size_t n = 2;
  std::size_t c = 8;
  /// Throws unless c == 4n and n >= 1.
  void check() const;
  std::string name() const;  // "2-bar"
};

Task make_task(std::size_t n);  // C = 4N
/// (2, 8), (4, 16), (8, 32).
std::vector<Task> paper_tasks();

struct AblationRun {
  std::string name;  // "default" or "<param>=<value>"
  sample::SamplerConfig cfg;
};

/// The defaults plus one run per alternative value of temperature,
/// repetition penalty, top-p and top-k, one parameter changed at a time.
std::vector<AblationRun> ablation_grid(const sample::SamplerConfig& defaults = {});

// --- significance ------------------------------------------------------------

struct WilcoxonResult {
  double w_plus = 0, w_minus = 0;
  double w = 0;          // min(w_plus, w_minus)
  std::size_t n = 0;     // non-zero differences
  double p = 1;          // two-sided
  bool exact = true;     // exact null distribution (else normal approximation)
};

/// Paired signed-rank test. Zero differences are dropped, ties get average
/// ranks. Exact for n <= 50.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

/// Largest w with P(W <= w) <= alpha / 2 under the exact null for n pairs,
/// -1 when no such w exists.
int wilcoxon_critical_value(std::size_t n, double alpha_two_sided = 0.05);

/// Holm step-down adjusted p-values (monotone, capped at 1), input order kept.
std::vector<double> holm_adjust(std::span<const double> p);
std::vector<bool> holm_reject(std::span<const double> p, double alpha = 0.05);

// --- model bundles -----------------------------------------------------------

/// A loaded model: tokenizer, vocabulary, f32 weights and the initial state
/// (zero, or a tuned state). A LoRA adapter is merged at load time.
struct Bundle {
  tok::RemiTokenizer tk;
  tok::Vocabulary vocab;
  model::Parameters<float> params;
  model::ModelState<float> state;
  std::string variant = "base";  // base | state | lora
  uint64_t weights_hash = 0;

  Bundle(tok::Vocabulary v, const model::Parameters<double>& p);
};

/// Directory layout: vocab.json, model.ckpt, optional state.ckpt and lora.ckpt.
/// variant "auto" picks state, then lora, then base by file presence.
Bundle load_bundle(const std::filesystem::path& dir, const std::string& variant = "auto");
void save_bundle(const std::filesystem::path& dir, const tok::Vocabulary& vocab, const model::Parameters<double>& p,
                 const model::ModelState<double>* state = nullptr, const model::LoraAdapter<double>* lora = nullptr);

// --- infilling ---------------------------------------------------------------

struct InfillRequest {
  std::size_t track = 0;
  std::size_t start = 0;    // first infilled bar
  std::size_t n = 2;        // infilled bars
  std::size_t context = 8;  // bars of context on each side
  /// Per-bar controls; missing entries (or an empty vector) are computed from
  /// the original content.
  std::vector<std::optional<prompt::AttributeControls>> controls;
  sample::SamplerConfig sampler;
};

struct InfillOutcome {
  midi::Score score;
  prompt::PromptSpec spec;
  std::vector<prompt::AttributeControls> requested;
  std::vector<std::optional<prompt::AttributeControls>> realized;  // nullopt for an empty bar
  sample::InfillResult generation;
  std::size_t prompt_tokens = 0;
  double seconds = 0;
};

/// Controls per bar of the region; user values win, the rest are computed
/// from the original content. Throws HarnessError for an empty original bar
/// without a user value.
std::vector<prompt::AttributeControls> resolve_controls(const tok::RemiTokenizer& tk, const midi::Score& score,
                                                        const InfillRequest& req);

/// Mask, prompt, sample, splice. Throws HarnessError for an invalid request
/// and when the generation is truncated.
InfillOutcome infill_score(const Bundle& bundle, const midi::Score& score, const InfillRequest& req);

/// Produces the infilled score for a request.
using Infiller = std::function<midi::Score(const midi::Score&, const InfillRequest&)>;
Infiller model_infiller(const Bundle& bundle);
/// Returns the original; checks the evaluation pipeline end to end.
Infiller identity_infiller();

// --- experiments -------------------------------------------------------------

struct EvalConfig {
  Task task = make_task(2);
  sample::SamplerConfig sampler;
  uint64_t seed = 0;
  std::size_t threads = 1;
  metrics::EvalOptions metric_options;
  int region_attempts = 32;
};

struct EvalCase {
  std::size_t score_index = 0;
  std::size_t track = 0;
  std::size_t start = 0;
};

/// Region for score i: a track and an all-non-empty N-bar window drawn from
/// a per-score stream of the seed. nullopt when the score has none.
std::optional<EvalCase> choose_case(const tok::RemiTokenizer& tk, const midi::Score& score, std::size_t index,
                                    const EvalConfig& cfg);

/// For every score: choose a region, infill it, splice and score all four
/// metrics and the control adherence. Failed generations are counted and
/// excluded. Results do not depend on the thread count.
metrics::MetricReport run_objective_eval(const tok::RemiTokenizer& tk, const Infiller& infiller,
                                         std::span<const midi::Score> scores, const EvalConfig& cfg);

struct AblationResult {
  AblationRun run;
  metrics::MetricReport report;
};
std::vector<AblationResult> run_sampling_ablation(const Bundle& bundle, std::span<const midi::Score> scores,
                                                  const EvalConfig& cfg);
std::string ablation_to_json(std::span<const AblationResult> results);

struct Split {
  std::vector<std::size_t> train, test;
};
/// Seeded disjoint split of [0, count) into n_train and the rest.
Split split_indices(std::size_t count, std::size_t n_train, uint64_t seed);

/// Training examples from scores, `per_score` draws each; rejected draws are
/// skipped.
std::vector<train::Example> make_examples(const tok::RemiTokenizer& tk, const tok::Vocabulary& vocab,
                                          std::span<const midi::Score> scores, std::size_t per_score,
                                          uint64_t seed, const prompt::ExampleConfig& cfg);

struct StyleSplitConfig {
  std::size_t n_train = 8;
  std::size_t n_splits = 3;
  uint64_t seed = 0;
  std::size_t examples_per_score = 4;
  std::size_t test_examples_per_score = 4;  // held-out draws per test score
  prompt::ExampleConfig example_config;
  train::TrainConfig train = train::TrainConfig::defaults(train::Mode::State);
  EvalConfig eval;
  bool run_eval = true;
};

struct SplitOutcome {
  Split split;
  double base_loss = 0;   // held-out nats per token with the zero state
  double tuned_loss = 0;  // with the tuned state
  metrics::MetricReport base_report, tuned_report;
};

/// Per split: state-tune on the train scores, compare held-out infill loss
/// and objective metrics against the untuned model.
std::vector<SplitOutcome> run_style_split_experiment(const tok::Vocabulary& vocab,
                                                     const model::Parameters<double>& params,
                                                     std::span<const midi::Score> corpus,
                                                     const StyleSplitConfig& cfg);
std::string style_split_to_json(std::span<const SplitOutcome> outcomes);

}  // namespace mrwkv::harness
