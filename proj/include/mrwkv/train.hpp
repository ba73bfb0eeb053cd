#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrwkv/model.hpp"
#include "mrwkv/rng.hpp"

namespace mrwkv::train {

/// One training sequence. mask[t] marks ids[t] as a prediction target.
struct Example {
  std::vector<int> ids;
  std::vector<uint8_t> mask;
};

enum class Mode { Pretrain, State, Lora };

struct TrainConfig {
  Mode mode = Mode::Pretrain;
  double lr = 1e-4;
  double weight_decay = 0.1;  // decoupled, matrices only, pretrain only
  int epochs = 24;
  std::size_t batch_size = 16;
  std::size_t seq_len = 2048;  // longer examples are cut to their last seq_len tokens
  uint64_t seed = 42;
  std::optional<double> time_budget;  // seconds
  double clip_norm = 0.0;             // 0 disables
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int lora_rank = 4;
  double lora_alpha = 4.0;
  bool tune_shift_state = false;  // state mode: also tune token-shift vectors
  std::filesystem::path log_path;  // JSONL; empty disables

  /// Settings used for the 38M model: pretrain lr 1e-4, wd 0.1, batch 16,
  /// 24 epochs; state lr 5e-2, 16 epochs, clip 1.0; LoRA lr 5e-4.
  static TrainConfig defaults(Mode mode);
  void check() const;
};

struct StepLog {
  std::size_t step = 0;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double wall = 0;  // seconds since start
};

struct TrainResult {
  std::vector<StepLog> log;
  std::size_t steps = 0;
  int epochs_done = 0;
  bool budget_hit = false;
  bool diverged = false;  // a non-finite loss stopped training; weights are the last good ones
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Produces the examples of one epoch. Called once per epoch so data can be
/// reshuffled and re-sampled (fresh infill regions, transpositions).
using EpochSource = std::function<std::vector<Example>(int epoch, Rng& rng)>;

/// Fixed example list shuffled each epoch.
EpochSource fixed_source(std::vector<Example> examples);

/// Adam with decoupled weight decay on selected entries.
class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg);
  /// decay_mask may be empty (no decay anywhere).
  void step(std::span<double> params, std::span<const double> grads, std::span<const uint8_t> decay_mask);
  std::size_t steps() const { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::span<double> grads, double max_norm);

TrainResult pretrain(model::Parameters<double>& params, const EpochSource& data, const TrainConfig& cfg);

/// Optimizes the initial state only; params are read-only.
TrainResult state_tune(const model::Parameters<double>& params, model::ModelState<double>& state,
                       const EpochSource& data, const TrainConfig& cfg);

/// Optimizes the adapter only, on top of params and an optional initial state.
TrainResult lora_tune(const model::Parameters<double>& params, model::LoraAdapter<double>& lora,
                      const EpochSource& data, const TrainConfig& cfg,
                      const model::ModelState<double>* state = nullptr);

struct EvalResult {
  double nats_per_token = 0;
  std::size_t tokens = 0;
};

/// Token-weighted mean cross-entropy over the masked targets of examples.
template <typename T>
EvalResult evaluate(const model::Parameters<T>& params, const model::ModelState<T>& state,
                    std::span<const Example> examples);

}  // namespace mrwkv::train
