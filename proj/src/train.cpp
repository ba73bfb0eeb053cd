#include "mrwkv/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace mrwkv::train {

using model::LoraAdapter;
using model::ModelState;
using model::Parameters;

TrainConfig TrainConfig::defaults(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  switch (mode) {
    case Mode::Pretrain:
      break;
    case Mode::State:
      c.lr = 5e-2;
      c.weight_decay = 0;
      c.epochs = 16;
      c.clip_norm = 1.0;
      break;
    case Mode::Lora:
      c.lr = 5e-4;
      c.weight_decay = 0;
      c.epochs = 16;
      break;
  }
  return c;
}

void TrainConfig::check() const {
  if (!(lr > 0)) throw TrainError("lr must be positive");
  if (seq_len == 0) throw TrainError("seq_len must be positive");
  if (batch_size == 0) throw TrainError("batch_size must be positive");
  if (epochs < 0) throw TrainError("epochs must be non-negative");
  if (weight_decay < 0 || clip_norm < 0) throw TrainError("weight_decay and clip_norm must be non-negative");
  if (mode == Mode::Lora && lora_rank < 1) throw TrainError("LoRA rank must be positive");
}

EpochSource fixed_source(std::vector<Example> examples) {
  return [examples = std::move(examples)](int, Rng& rng) {
    auto out = examples;
    rng.shuffle(out);
    return out;
  };
}

Adam::Adam(std::size_t n, const TrainConfig& cfg)
    : lr_(cfg.lr), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, std::span<const uint8_t> decay_mask) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw TrainError("optimizer size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const bool decay = wd_ > 0 && !decay_mask.empty();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = b1_ * m_[i] + (1 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1 - b2_) * g * g;
    if (decay && decay_mask[i]) params[i] -= lr_ * wd_ * params[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

double clip_global_norm(std::span<double> grads, double max_norm) {
  double ss = 0;
  for (double g : grads) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grads) g *= s;
  }
  return norm;
}

namespace {

// Trims to the last seq_len tokens; the first kept token can not be a target.
Example fit(const Example& e, std::size_t seq_len) {
  if (e.ids.size() != e.mask.size()) throw TrainError("example mask length differs from ids");
  if (e.ids.size() <= seq_len) return e;
  Example out;
  const auto off = static_cast<std::ptrdiff_t>(e.ids.size() - seq_len);
  out.ids.assign(e.ids.begin() + off, e.ids.end());
  out.mask.assign(e.mask.begin() + off, e.mask.end());
  return out;
}

bool has_target(const Example& e) {
  for (std::size_t t = 1; t < e.mask.size(); ++t)
    if (e.mask[t]) return true;
  return false;
}

// Shared loop. grad_fn fills the gradient of the trainable vector for one
// example and returns its loss.
struct Trainable {
  std::span<double> values;
  std::vector<uint8_t> decay_mask;
  std::function<double(const Example&, std::vector<double>& grad)> grad_fn;
};

TrainResult run(Trainable tr, const EpochSource& data, const TrainConfig& cfg) {
  cfg.check();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    if (cfg.log_path.has_parent_path()) std::filesystem::create_directories(cfg.log_path.parent_path());
    log.open(cfg.log_path);
    if (!log) throw TrainError("cannot write log " + cfg.log_path.string());
  }
  Adam opt(tr.values.size(), cfg);
  TrainResult res;
  std::vector<double> grad(tr.values.size()), total(tr.values.size());
  std::vector<double> last_good(tr.values.begin(), tr.values.end());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::substream(cfg.seed, {0xE90C, static_cast<uint64_t>(epoch)});
    std::vector<Example> examples;
    for (const auto& e : data(epoch, rng)) {
      auto f = fit(e, cfg.seq_len);
      if (has_target(f)) examples.push_back(std::move(f));
    }
    if (examples.empty()) throw TrainError("epoch " + std::to_string(epoch) + " has no usable example");
    for (std::size_t b = 0; b < examples.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(examples.size(), b + cfg.batch_size);
      std::fill(total.begin(), total.end(), 0.0);
      double loss = 0;
      for (std::size_t i = b; i < end; ++i) {
        std::fill(grad.begin(), grad.end(), 0.0);
        loss += tr.grad_fn(examples[i], grad);
        for (std::size_t j = 0; j < grad.size(); ++j) total[j] += grad[j];
      }
      const double n = static_cast<double>(end - b);
      loss /= n;
      for (double& g : total) g /= n;
      bool finite = std::isfinite(loss);
      for (double g : total) finite = finite && std::isfinite(g);
      if (!finite) {
        std::copy(last_good.begin(), last_good.end(), tr.values.begin());
        res.diverged = true;
        return res;
      }
      if (cfg.clip_norm > 0) clip_global_norm(total, cfg.clip_norm);
      std::copy(tr.values.begin(), tr.values.end(), last_good.begin());
      opt.step(tr.values, total, tr.decay_mask);
      ++res.steps;
      StepLog s{res.steps, epoch, loss, cfg.lr, elapsed()};
      res.log.push_back(s);
      if (log) {
        log << nlohmann::json{{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss}, {"lr", s.lr}, {"wall", s.wall}}
                   .dump()
            << '\n';
        log.flush();
      }
      if (cfg.time_budget && s.wall >= *cfg.time_budget) {
        res.budget_hit = true;
        return res;
      }
    }
    res.epochs_done = epoch + 1;
  }
  return res;
}

}  // namespace

TrainResult pretrain(Parameters<double>& params, const EpochSource& data, const TrainConfig& cfg) {
  const ModelState<double> zero(params.config());
  Parameters<double> g(params.layout_ptr());
  Trainable tr;
  tr.values = params.flat();
  tr.decay_mask.assign(params.count(), 0);
  for (const auto& t : params.layout().tensors())
    if (t.weight_decay) std::fill_n(tr.decay_mask.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, 1);
  tr.grad_fn = [&](const Example& e, std::vector<double>& out) {
    g.zero();
    const double loss = model::loss_and_grads(params, zero, e.ids, e.mask, &g, nullptr);
    std::copy(g.flat().begin(), g.flat().end(), out.begin());
    return loss;
  };
  return run(std::move(tr), data, cfg);
}

TrainResult state_tune(const Parameters<double>& params, ModelState<double>& state, const EpochSource& data,
                       const TrainConfig& cfg) {
  if (!(state.config() == params.config())) throw TrainError("state shape does not match the model");
  ModelState<double> g(params.config());
  model::LossOptions opt;
  opt.shift_state_grad = cfg.tune_shift_state;
  Trainable tr;
  tr.values = state.flat();
  tr.grad_fn = [&](const Example& e, std::vector<double>& out) {
    g.zero();
    const double loss = model::loss_and_grads_opt(params, state, e.ids, e.mask, nullptr, &g, opt);
    std::copy(g.flat().begin(), g.flat().end(), out.begin());
    return loss;
  };
  return run(std::move(tr), data, cfg);
}

TrainResult lora_tune(const Parameters<double>& params, LoraAdapter<double>& lora, const EpochSource& data,
                      const TrainConfig& cfg, const ModelState<double>* state) {
  const ModelState<double> zero(params.config());
  const ModelState<double>& s0 = state ? *state : zero;
  // Adapter factors live in one flat vector during training.
  std::vector<double> flat;
  for (const auto& t : lora.targets) {
    flat.insert(flat.end(), t.a.begin(), t.a.end());
    flat.insert(flat.end(), t.b.begin(), t.b.end());
  }
  auto unpack = [&](std::span<const double> src, LoraAdapter<double>& dst) {
    std::size_t o = 0;
    for (auto& t : dst.targets) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o), t.a.size(), t.a.begin());
      o += t.a.size();
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o), t.b.size(), t.b.begin());
      o += t.b.size();
    }
  };
  Parameters<double> gw(params.layout_ptr());
  LoraAdapter<double> ga = lora;
  Trainable tr;
  tr.values = flat;
  tr.grad_fn = [&](const Example& e, std::vector<double>& out) {
    unpack(flat, lora);
    const auto merged = model::merge_lora(params, lora);
    gw.zero();
    const double loss = model::loss_and_grads(merged, s0, e.ids, e.mask, &gw, nullptr);
    for (auto& t : ga.targets) {
      std::fill(t.a.begin(), t.a.end(), 0.0);
      std::fill(t.b.begin(), t.b.end(), 0.0);
    }
    model::lora_backward(lora, gw, ga);
    std::size_t o = 0;
    for (const auto& t : ga.targets) {
      std::copy(t.a.begin(), t.a.end(), out.begin() + static_cast<std::ptrdiff_t>(o));
      o += t.a.size();
      std::copy(t.b.begin(), t.b.end(), out.begin() + static_cast<std::ptrdiff_t>(o));
      o += t.b.size();
    }
    return loss;
  };
  auto res = run(std::move(tr), data, cfg);
  unpack(flat, lora);
  return res;
}

template <typename T>
EvalResult evaluate(const Parameters<T>& params, const ModelState<T>& state, std::span<const Example> examples) {
  double sum = 0;
  std::size_t tokens = 0;
  for (const auto& e : examples) {
    std::size_t n = 0;
    for (std::size_t t = 1; t < e.mask.size(); ++t) n += e.mask[t] != 0;
    if (n == 0) continue;
    sum += static_cast<double>(model::sequence_loss(params, state, e.ids, e.mask)) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw TrainError("no targets to evaluate");
  return {sum / static_cast<double>(tokens), tokens};
}

template EvalResult evaluate<float>(const Parameters<float>&, const ModelState<float>&, std::span<const Example>);
template EvalResult evaluate<double>(const Parameters<double>&, const ModelState<double>&, std::span<const Example>);

}  // namespace mrwkv::train
