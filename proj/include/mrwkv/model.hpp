#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace mrwkv::model {

struct ModelConfig {
  int n_layers = 12;
  int d_model = 384;
  int head_size = 64;
  int d_ffn = 1344;
  int vocab_size = 16000;
  // Low-rank widths of the decay, in-context learning rate, value residual and
  // gate projections. 0 picks the RWKV-7 reference sizing from d_model.
  int decay_lora = 0;
  int aaa_lora = 0;
  int mv_lora = 0;
  int gate_lora = 0;

  int n_heads() const { return d_model / head_size; }
  int decay_rank() const;
  int aaa_rank() const;
  int mv_rank() const;
  int gate_rank() const;
  void check() const;

  /// 12 layers, d 384, head size 64, ffn 1344, 16000 tokens.
  static ModelConfig paper();
  bool operator==(const ModelConfig&) const = default;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool weight_decay = false;  // matrices except the embedding
};

/// Tensor indices of one block.
struct LayerSlots {
  std::size_t ln0_w = 0, ln0_b = 0;  // layer 0 only
  std::size_t ln1_w, ln1_b, ln2_w, ln2_b;
  std::size_t x_r, x_w, x_k, x_v, x_a, x_g;
  std::size_t w0, w1, w2, a0, a1, a2;
  std::size_t v0 = 0, v1 = 0, v2 = 0;  // layers > 0
  std::size_t g1, g2, k_k, k_a, r_k;
  std::size_t wr, wk, wv, wo;
  std::size_t lnx_w, lnx_b;
  std::size_t f_xk, f_key, f_val;
};

/// Named flat layout shared by parameters and their gradients. Matrices are
/// stored row-major as (in, out).
class Layout {
 public:
  explicit Layout(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& tensor(std::size_t i) const { return tensors_.at(i); }
  std::size_t find(std::string_view name) const;  // throws std::out_of_range
  std::size_t total() const { return total_; }

  std::size_t emb, ln_out_w, ln_out_b, head;
  std::vector<LayerSlots> layers;

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape, bool decay);

  ModelConfig cfg_;
  std::vector<TensorInfo> tensors_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::size_t total_ = 0;
};

template <typename T>
class Parameters {
 public:
  explicit Parameters(const ModelConfig& cfg);
  explicit Parameters(std::shared_ptr<const Layout> layout);

  const ModelConfig& config() const { return layout_->config(); }
  const Layout& layout() const { return *layout_; }
  std::shared_ptr<const Layout> layout_ptr() const { return layout_; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* ptr(std::size_t tensor) { return data_.data() + layout_->tensor(tensor).offset; }
  const T* ptr(std::size_t tensor) const { return data_.data() + layout_->tensor(tensor).offset; }
  std::span<T> view(std::size_t tensor) { return {ptr(tensor), layout_->tensor(tensor).size}; }
  std::span<const T> view(std::size_t tensor) const { return {ptr(tensor), layout_->tensor(tensor).size}; }
  std::span<T> view(std::string_view name) { return view(layout_->find(name)); }

  std::size_t count() const { return data_.size(); }
  void zero();

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out(layout_);
    auto dst = out.flat();
    for (std::size_t i = 0; i < data_.size(); ++i) dst[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<T> data_;
};

/// Reference RWKV-7 initialization (token shifts, decay ramps, zeroed output
/// projections, orthogonal low-rank factors).
template <typename T>
void init_parameters(Parameters<T>& p, uint64_t seed);

/// Per layer: token-shift vector of the time mix, token-shift vector of the
/// channel mix, and n_heads WKV matrices (value index major).
template <typename T>
class ModelState {
 public:
  explicit ModelState(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* att_shift(int layer) { return data_.data() + layer * stride_; }
  T* ffn_shift(int layer) { return att_shift(layer) + cfg_.d_model; }
  T* wkv(int layer) { return att_shift(layer) + 2 * cfg_.d_model; }
  const T* att_shift(int layer) const { return data_.data() + layer * stride_; }
  const T* ffn_shift(int layer) const { return att_shift(layer) + cfg_.d_model; }
  const T* wkv(int layer) const { return att_shift(layer) + 2 * cfg_.d_model; }
  std::size_t wkv_size() const;  // per layer
  std::size_t layer_stride() const { return stride_; }
  std::size_t size() const { return data_.size(); }
  void zero();

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out(cfg_);
    auto dst = out.flat();
    for (std::size_t i = 0; i < data_.size(); ++i) dst[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  ModelConfig cfg_;
  std::size_t stride_;
  std::vector<T> data_;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One token through all layers. state is updated in place; returns logits.
template <typename T>
std::vector<T> forward_step(const Parameters<T>& p, ModelState<T>& state, int token);

/// Teacher-forced pass, layer by layer over the whole sequence. Returns
/// logits as ids.size() rows of vocab_size; state is advanced past ids.
template <typename T>
std::vector<T> forward_sequence(const Parameters<T>& p, ModelState<T>& state, std::span<const int> ids);

struct LossOptions {
  bool wkv_state_grad = true;
  bool shift_state_grad = false;
};

/// Mean cross-entropy over positions t with mask[t] != 0, where ids[t] is
/// predicted from ids[0..t-1]. mask[0] is ignored. Gradients are accumulated
/// (added) into param_grad and state_grad, which may be null.
template <typename T>
T loss_and_grads(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                 std::span<const uint8_t> mask, Parameters<std::type_identity_t<T>>* param_grad,
                 ModelState<std::type_identity_t<T>>* state_grad);

/// loss_and_grads with control over which state gradients are produced.
template <typename T>
T loss_and_grads_opt(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                     std::span<const uint8_t> mask, Parameters<std::type_identity_t<T>>* param_grad,
                     ModelState<std::type_identity_t<T>>* state_grad, const LossOptions& opt);

/// Loss only, same definition as loss_and_grads.
template <typename T>
T sequence_loss(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                std::span<const uint8_t> mask);

// --- LoRA -------------------------------------------------------------------

/// Adapter on a set of (in, out) matrices: W + (alpha / r) A B with A (in, r)
/// and B (r, out). B starts at zero so a fresh adapter is the identity.
template <typename T>
struct LoraAdapter {
  struct Target {
    std::size_t tensor = 0;
    std::size_t in = 0, out = 0;
    std::vector<T> a, b;
  };
  int rank = 4;
  double alpha = 4.0;
  std::vector<Target> targets;

  T scale() const { return static_cast<T>(alpha / rank); }
  std::size_t count() const;
};

/// Names of the adapted matrices: receptance, key, value and output of every
/// time mix plus key and value of every channel mix.
std::vector<std::string> lora_target_names(const ModelConfig& cfg);

template <typename T>
LoraAdapter<T> make_lora(const Layout& layout, int rank, double alpha, uint64_t seed);

template <typename T>
Parameters<T> merge_lora(const Parameters<T>& base, const LoraAdapter<T>& lora);

/// Chain rule from effective-weight gradients to adapter factors. grads are
/// accumulated into ga and gb (same shapes as the adapter targets).
template <typename T>
void lora_backward(const LoraAdapter<T>& lora, const Parameters<T>& weight_grad, LoraAdapter<T>& grad);

// --- counts -----------------------------------------------------------------

enum class TrainMode { Full, State, Lora };

/// Trainable parameter count. State counts the WKV initial-state entries;
/// Lora counts r (in + out) over the target matrices.
std::size_t count_trainable(const ModelConfig& cfg, TrainMode mode, int lora_rank = 0);
std::size_t count_parameters(const ModelConfig& cfg);

// --- checkpoints ------------------------------------------------------------

/// Binary container: magic "MRWKVCKP", u32 version, u64 header length, JSON
/// header {kind, config, meta, tensors: [{name, dtype, shape, offset, nbytes}]},
/// then little-endian tensor data.
struct Checkpoint {
  std::string kind;  // "model", "state" or "lora"
  ModelConfig config;
  std::string meta_json = "{}";
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::vector<double>> data;
};

std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ck, bool single_precision);
Checkpoint checkpoint_from_bytes(std::span<const uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck, bool single_precision = false);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint to_checkpoint(const Parameters<T>& p);
template <typename T>
Checkpoint to_checkpoint(const ModelState<T>& s);
template <typename T>
Checkpoint to_checkpoint(const LoraAdapter<T>& lora, const Layout& layout);

template <typename T>
Parameters<T> parameters_from(const Checkpoint& ck);
template <typename T>
ModelState<T> state_from(const Checkpoint& ck);
template <typename T>
LoraAdapter<T> lora_from(const Checkpoint& ck, const Layout& layout);

/// FNV-1a over the raw parameter bytes; used to prove frozen weights.
template <typename T>
uint64_t parameter_hash(const Parameters<T>& p);

}  // namespace mrwkv::model
