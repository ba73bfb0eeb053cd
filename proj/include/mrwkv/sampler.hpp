#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "mrwkv/bpe.hpp"
#include "mrwkv/model.hpp"
#include "mrwkv/prompt.hpp"
#include "mrwkv/rng.hpp"

namespace mrwkv::sample {

struct SamplerConfig {
  double temperature = 1.0;
  double repetition_penalty = 1.2;
  int top_k = 20;  // 0 disables
  double top_p = 0.95;
  uint64_t seed = 42;
  std::size_t max_tokens = 2048;  // tokens emitted into the fill section, injected controls included
  bool greedy = false;            // argmax instead of sampling
  int end_retries = 8;            // redraws of a premature FillBar_End before it is masked

  /// penalty 1, temperature 1, no top-k, top-p 1: plain softmax sampling.
  static SamplerConfig identity();
  void check() const;
};

class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Distribution after, in order: repetition penalty on tokens in history
/// (positive logits divided by the penalty, negative ones multiplied),
/// temperature, removal of forbidden ids, softmax, top-k, top-p. Throws
/// SamplerError when no token is left.
std::vector<double> filter_logits(std::span<const float> logits, std::span<const int> history,
                                  const SamplerConfig& cfg, std::span<const uint8_t> forbidden = {});

/// Index drawn from a distribution (greedy: the first argmax).
int draw(std::span<const double> probs, Rng& rng, bool greedy = false);

struct InfillResult {
  std::vector<int> tokens;  // fill-section ids (BPE), injected controls included, terminator excluded
  std::size_t bars = 0;     // completed bars
  bool truncated = false;   // max_tokens reached first
  int end_retries = 0;      // premature FillBar_End draws that were rejected
  std::size_t sampled = 0;  // tokens drawn from the model
};

/// Generates bar content for controls.size() bars after a prompt that ends
/// with FillBar_Start and the controls of the first bar. Bar_None and
/// FillBar_End are never drawn while the current bar is empty or mid-note,
/// so no two Bar_None follow each other; after each drawn Bar_None the next
/// bar's controls are fed to the model instead of sampled. Stops at the
/// boundary that would open bar N + 1 or at FillBar_End after bar N.
/// bar_units gives the grid length of each generated bar.
InfillResult infill(const model::Parameters<float>& params, const model::ModelState<float>& state0,
                    const tok::Vocabulary& vocab, std::span<const int> prompt_ids,
                    std::span<const prompt::AttributeControls> controls, std::span<const int> bar_units,
                    const SamplerConfig& cfg);

/// Checks that base-id fill content has exactly n_bars bars, no empty bar,
/// no consecutive Bar_None and the expected controls after every separator.
/// Returns an empty string when valid, else a description.
std::string check_fill(std::span<const int> base_content, const tok::BaseVocab& vocab,
                       std::span<const prompt::AttributeControls> controls);

}  // namespace mrwkv::sample
