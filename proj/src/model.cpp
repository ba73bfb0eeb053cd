#include "mrwkv/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mrwkv/rng.hpp"

namespace mrwkv::model {

// --- config -----------------------------------------------------------------

namespace {

int reference_rank(int d, double factor, double power) {
  const double v = std::round(factor * std::pow(static_cast<double>(d), power) / 32.0) * 32.0;
  return std::max(32, static_cast<int>(v));
}

}  // namespace

int ModelConfig::decay_rank() const { return decay_lora > 0 ? decay_lora : reference_rank(d_model, 1.8, 0.5); }
int ModelConfig::aaa_rank() const { return aaa_lora > 0 ? aaa_lora : reference_rank(d_model, 1.8, 0.5); }
int ModelConfig::mv_rank() const { return mv_lora > 0 ? mv_lora : reference_rank(d_model, 1.3, 0.5); }
int ModelConfig::gate_rank() const { return gate_lora > 0 ? gate_lora : reference_rank(d_model, 0.6, 0.8); }

void ModelConfig::check() const {
  if (n_layers < 1 || d_model < 1 || head_size < 1 || d_ffn < 1 || vocab_size < 1)
    throw ModelError("model dimensions must be positive");
  if (d_model % head_size != 0) throw ModelError("d_model must be divisible by head_size");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j{{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"head_size", c.head_size},
                   {"d_ffn", c.d_ffn},           {"vocab_size", c.vocab_size}, {"decay_lora", c.decay_lora},
                   {"aaa_lora", c.aaa_lora},     {"mv_lora", c.mv_lora},       {"gate_lora", c.gate_lora}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.head_size = j.at("head_size");
  c.d_ffn = j.at("d_ffn");
  c.vocab_size = j.at("vocab_size");
  c.decay_lora = j.value("decay_lora", 0);
  c.aaa_lora = j.value("aaa_lora", 0);
  c.mv_lora = j.value("mv_lora", 0);
  c.gate_lora = j.value("gate_lora", 0);
  c.check();
  return c;
}

// --- layout -----------------------------------------------------------------

Layout::Layout(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.check();
  const std::size_t C = cfg.d_model, V = cfg.vocab_size, F = cfg.d_ffn, H = cfg.n_heads(), N = cfg.head_size;
  const std::size_t Dw = cfg.decay_rank(), Da = cfg.aaa_rank(), Dv = cfg.mv_rank(), Dg = cfg.gate_rank();
  emb = add("emb.weight", {V, C}, false);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    LayerSlots s{};
    if (l == 0) {
      s.ln0_w = add(b + "ln0.weight", {C}, false);
      s.ln0_b = add(b + "ln0.bias", {C}, false);
    }
    s.ln1_w = add(b + "ln1.weight", {C}, false);
    s.ln1_b = add(b + "ln1.bias", {C}, false);
    s.ln2_w = add(b + "ln2.weight", {C}, false);
    s.ln2_b = add(b + "ln2.bias", {C}, false);
    s.x_r = add(b + "att.x_r", {C}, false);
    s.x_w = add(b + "att.x_w", {C}, false);
    s.x_k = add(b + "att.x_k", {C}, false);
    s.x_v = add(b + "att.x_v", {C}, false);
    s.x_a = add(b + "att.x_a", {C}, false);
    s.x_g = add(b + "att.x_g", {C}, false);
    s.w0 = add(b + "att.w0", {C}, false);
    s.w1 = add(b + "att.w1", {C, Dw}, true);
    s.w2 = add(b + "att.w2", {Dw, C}, true);
    s.a0 = add(b + "att.a0", {C}, false);
    s.a1 = add(b + "att.a1", {C, Da}, true);
    s.a2 = add(b + "att.a2", {Da, C}, true);
    if (l > 0) {
      s.v0 = add(b + "att.v0", {C}, false);
      s.v1 = add(b + "att.v1", {C, Dv}, true);
      s.v2 = add(b + "att.v2", {Dv, C}, true);
    }
    s.g1 = add(b + "att.g1", {C, Dg}, true);
    s.g2 = add(b + "att.g2", {Dg, C}, true);
    s.k_k = add(b + "att.k_k", {C}, false);
    s.k_a = add(b + "att.k_a", {C}, false);
    s.r_k = add(b + "att.r_k", {H, N}, false);
    s.wr = add(b + "att.receptance.weight", {C, C}, true);
    s.wk = add(b + "att.key.weight", {C, C}, true);
    s.wv = add(b + "att.value.weight", {C, C}, true);
    s.wo = add(b + "att.output.weight", {C, C}, true);
    s.lnx_w = add(b + "att.ln_x.weight", {C}, false);
    s.lnx_b = add(b + "att.ln_x.bias", {C}, false);
    s.f_xk = add(b + "ffn.x_k", {C}, false);
    s.f_key = add(b + "ffn.key.weight", {C, F}, true);
    s.f_val = add(b + "ffn.value.weight", {F, C}, true);
    layers.push_back(s);
  }
  ln_out_w = add("ln_out.weight", {C}, false);
  ln_out_b = add("ln_out.bias", {C}, false);
  head = add("head.weight", {C, V}, true);
}

std::size_t Layout::add(std::string name, std::vector<std::size_t> shape, bool decay) {
  TensorInfo t;
  t.name = std::move(name);
  t.size = 1;
  for (auto s : shape) t.size *= s;
  t.shape = std::move(shape);
  t.offset = total_;
  t.weight_decay = decay;
  total_ += t.size;
  index_.emplace(t.name, tensors_.size());
  tensors_.push_back(std::move(t));
  return tensors_.size() - 1;
}

std::size_t Layout::find(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no tensor named " + std::string(name));
  return it->second;
}

// --- parameters and state ---------------------------------------------------

template <typename T>
Parameters<T>::Parameters(const ModelConfig& cfg) : Parameters(std::make_shared<const Layout>(cfg)) {}

template <typename T>
Parameters<T>::Parameters(std::shared_ptr<const Layout> layout)
    : layout_(std::move(layout)), data_(layout_->total(), T(0)) {}

template <typename T>
void Parameters<T>::zero() {
  std::fill(data_.begin(), data_.end(), T(0));
}

template <typename T>
ModelState<T>::ModelState(const ModelConfig& cfg)
    : cfg_(cfg),
      stride_(2 * static_cast<std::size_t>(cfg.d_model) +
              static_cast<std::size_t>(cfg.n_heads()) * cfg.head_size * cfg.head_size),
      data_(stride_ * cfg.n_layers, T(0)) {
  cfg.check();
}

template <typename T>
std::size_t ModelState<T>::wkv_size() const {
  return static_cast<std::size_t>(cfg_.n_heads()) * cfg_.head_size * cfg_.head_size;
}

template <typename T>
void ModelState<T>::zero() {
  std::fill(data_.begin(), data_.end(), T(0));
}

namespace {

// (rows, cols) matrix with orthonormal rows or columns, scaled by gain.
std::vector<double> orthogonal(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // Sign fix so the distribution is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = gain * (rows >= cols ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                                               : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)));
  return out;
}

}  // namespace

template <typename T>
void init_parameters(Parameters<T>& p, uint64_t seed) {
  const auto& lay = p.layout();
  const auto& cfg = p.config();
  const std::size_t C = cfg.d_model, V = cfg.vocab_size;
  const int L = cfg.n_layers;
  p.zero();
  Rng rng = Rng::substream(seed, {0x1417});
  auto fill = [&](std::size_t t, auto f) {
    auto v = p.view(t);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(f(i));
  };
  auto uniform = [&](std::size_t t, double bound) { fill(t, [&](std::size_t) { return rng.uniform(-bound, bound); }); };
  auto ortho = [&](std::size_t t, double gain) {
    const auto& info = lay.tensor(t);
    const auto q = orthogonal(info.shape[0], info.shape[1], gain, rng);
    fill(t, [&](std::size_t i) { return q[i]; });
  };
  auto constant = [&](std::size_t t, double c) { fill(t, [&](std::size_t) { return c; }); };

  uniform(lay.emb, 1e-4);
  for (int l = 0; l < L; ++l) {
    const auto& s = lay.layers[l];
    const double r01 = L > 1 ? static_cast<double>(l) / (L - 1) : 0.0;
    const double r10 = 1.0 - static_cast<double>(l) / L;
    auto ddd = [&](std::size_t i) { return static_cast<double>(i) / C; };
    if (l == 0) {
      constant(s.ln0_w, 1.0);
    }
    constant(s.ln1_w, 1.0);
    constant(s.ln2_w, 1.0);
    fill(s.x_r, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.2 * r10); });
    fill(s.x_w, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.9 * r10); });
    fill(s.x_k, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.7 * r10); });
    fill(s.x_v, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.7 * r10); });
    fill(s.x_a, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.9 * r10); });
    fill(s.x_g, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), 0.2 * r10); });
    fill(s.w0, [&](std::size_t i) {
      const double n = C > 1 ? static_cast<double>(i) / (C - 1) : 0.0;
      return -7.0 + 5.0 * std::pow(n, 0.85 + std::sqrt(r01)) + 0.5;
    });
    ortho(s.w2, 0.1);
    ortho(s.a2, 0.1);
    if (l > 0) {
      constant(s.v0, 1.0);
      ortho(s.v2, 0.1);
    }
    ortho(s.g2, 0.1);
    constant(s.k_k, 0.85);
    constant(s.k_a, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(C));
    uniform(s.wr, 0.5 * bound);
    uniform(s.wk, 0.05 * bound);
    uniform(s.wv, 0.5 * bound);
    constant(s.lnx_w, std::pow((1.0 + l) / L, 0.7));
    fill(s.f_xk, [&](std::size_t i) { return 1.0 - std::pow(ddd(i), std::pow(r10, 4)); });
    uniform(s.f_key, 0.5 * bound);
  }
  constant(lay.ln_out_w, 1.0);
  ortho(lay.head, V > C ? 0.5 * std::sqrt(static_cast<double>(V) / C) : 0.5);
}

// --- dense kernels ----------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

// C (m, n) = A (m, k) B (k, n), or += when acc.
template <typename T>
void mm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool acc = false) {
  CMap<T> A(a, m, k), B(b, k, n);
  Map<T> Cm(c, m, n);
  if (acc)
    Cm.noalias() += A * B;
  else
    Cm.noalias() = A * B;
}

// C (k, n) += A^T B with A (m, k), B (m, n).
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  CMap<T> A(a, m, k), B(b, m, n);
  Map<T> Cm(c, k, n);
  Cm.noalias() += A.transpose() * B;
}

// C (m, k) (+)= A B^T with A (m, n), B (k, n).
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool acc) {
  CMap<T> A(a, m, n), B(b, k, n);
  Map<T> Cm(c, m, k);
  if (acc)
    Cm.noalias() += A * B.transpose();
  else
    Cm.noalias() = A * B.transpose();
}

template <typename T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

constexpr double kLnEps = 1e-5;
constexpr double kGroupEps = 64e-5;
constexpr double kNormEps = 1e-12;
const double kDecayScale = std::exp(-0.5);

// Row-wise normalization in groups of g columns.
template <typename T>
void norm_rows(const T* x, T* xhat, T* mu, T* rs, std::size_t rows, std::size_t cols, std::size_t g, double eps) {
  const std::size_t groups = cols / g;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < groups; ++q) {
      const T* xi = x + r * cols + q * g;
      T* yi = xhat + r * cols + q * g;
      T m = 0;
      for (std::size_t i = 0; i < g; ++i) m += xi[i];
      m /= static_cast<T>(g);
      T var = 0;
      for (std::size_t i = 0; i < g; ++i) var += (xi[i] - m) * (xi[i] - m);
      var /= static_cast<T>(g);
      const T s = T(1) / std::sqrt(var + static_cast<T>(eps));
      for (std::size_t i = 0; i < g; ++i) yi[i] = (xi[i] - m) * s;
      mu[r * groups + q] = m;
      rs[r * groups + q] = s;
    }
}

template <typename T>
void affine_rows(const T* xhat, T* y, const T* w, const T* b, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < cols; ++i) y[r * cols + i] = xhat[r * cols + i] * w[i] + b[i];
}

// Backward of y = xhat * w + b with xhat normalized in groups of g.
// dx is accumulated.
template <typename T>
void norm_backward(const T* dy, const T* xhat, const T* rs, const T* w, T* dx, T* dw, T* db, std::size_t rows,
                   std::size_t cols, std::size_t g) {
  const std::size_t groups = cols / g;
  std::vector<T> dxh(g);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < cols; ++i) {
      dw[i] += dy[r * cols + i] * xhat[r * cols + i];
      db[i] += dy[r * cols + i];
    }
    for (std::size_t q = 0; q < groups; ++q) {
      const std::size_t o = r * cols + q * g;
      T m1 = 0, m2 = 0;
      for (std::size_t i = 0; i < g; ++i) {
        dxh[i] = dy[o + i] * w[q * g + i];
        m1 += dxh[i];
        m2 += dxh[i] * xhat[o + i];
      }
      m1 /= static_cast<T>(g);
      m2 /= static_cast<T>(g);
      const T s = rs[r * groups + q];
      for (std::size_t i = 0; i < g; ++i) dx[o + i] += s * (dxh[i] - m1 - xhat[o + i] * m2);
    }
  }
}

// Activations of one block over a sequence.
template <typename T>
struct LayerCache {
  std::size_t n = 0;
  std::vector<T> x_in;                // residual entering the block (after ln0 on layer 0)
  std::vector<T> x0hat, mu0, rs0;     // layer 0: normalized embedding
  std::vector<T> h, hhat, mu1, rs1;   // ln1
  std::vector<T> shift_att, shift_ffn;  // incoming token-shift state
  std::vector<T> xr, xw, xk, xv, xa, xg;
  std::vector<T> r, k0, vraw, wt, sw, w, vl, vg, al, a, gs, g, kk, kkn, k, v;
  std::vector<T> y, yhat, gmu, grs, rks, o, og;
  std::vector<T> x_mid, h2, h2hat, mu2, rs2, xk2, kpre, kf;
  std::vector<T> wkv_ckpt;  // WKV state before token c*K for each chunk c
};

constexpr std::size_t kChunk = 16;

template <typename T>
void resize(std::vector<T>& v, std::size_t n) {
  v.assign(n, T(0));
}

// One WKV step for one head: S <- S diag(w) + (S aa) bb^T + v k^T; y = S r.
template <typename T>
inline void wkv_step(T* S, const T* r, const T* w, const T* k, const T* v, const T* kk, const T* a, T* y,
                     std::size_t N, T* sa_out) {
  for (std::size_t i = 0; i < N; ++i) {
    T* Si = S + i * N;
    T sa = 0;
    for (std::size_t j = 0; j < N; ++j) sa -= Si[j] * kk[j];
    if (sa_out) sa_out[i] = sa;
    T acc = 0;
    for (std::size_t j = 0; j < N; ++j) {
      Si[j] = Si[j] * w[j] + sa * kk[j] * a[j] + v[i] * k[j];
      acc += Si[j] * r[j];
    }
    y[i] = acc;
  }
}

// Block forward over n tokens. x is the residual stream (n, C), updated in
// place; v_first is written on layer 0 and read on later layers.
template <typename T>
void layer_forward(const Parameters<T>& p, int l, std::size_t n, T* x, T* v_first, ModelState<T>& st,
                   LayerCache<T>& c, bool keep_states) {
  const auto& cfg = p.config();
  const auto& s = p.layout().layers[l];
  const std::size_t C = cfg.d_model, H = cfg.n_heads(), N = cfg.head_size, F = cfg.d_ffn;
  const std::size_t Dw = cfg.decay_rank(), Da = cfg.aaa_rank(), Dv = cfg.mv_rank(), Dg = cfg.gate_rank();
  const std::size_t nc = n * C;
  c.n = n;

  if (l == 0) {
    resize(c.x0hat, nc);
    resize(c.mu0, n);
    resize(c.rs0, n);
    norm_rows(x, c.x0hat.data(), c.mu0.data(), c.rs0.data(), n, C, C, kLnEps);
    affine_rows(c.x0hat.data(), x, p.ptr(s.ln0_w), p.ptr(s.ln0_b), n, C);
  }
  c.x_in.assign(x, x + nc);

  // Time mix.
  resize(c.h, nc);
  resize(c.hhat, nc);
  resize(c.mu1, n);
  resize(c.rs1, n);
  norm_rows(x, c.hhat.data(), c.mu1.data(), c.rs1.data(), n, C, C, kLnEps);
  affine_rows(c.hhat.data(), c.h.data(), p.ptr(s.ln1_w), p.ptr(s.ln1_b), n, C);
  c.shift_att.assign(st.att_shift(l), st.att_shift(l) + C);

  for (auto* buf : {&c.xr, &c.xw, &c.xk, &c.xv, &c.xa, &c.xg}) resize(*buf, nc);
  const T* mus[6] = {p.ptr(s.x_r), p.ptr(s.x_w), p.ptr(s.x_k), p.ptr(s.x_v), p.ptr(s.x_a), p.ptr(s.x_g)};
  T* outs[6] = {c.xr.data(), c.xw.data(), c.xk.data(), c.xv.data(), c.xa.data(), c.xg.data()};
  for (std::size_t t = 0; t < n; ++t) {
    const T* hp = t == 0 ? c.shift_att.data() : c.h.data() + (t - 1) * C;
    const T* ht = c.h.data() + t * C;
    for (int q = 0; q < 6; ++q)
      for (std::size_t i = 0; i < C; ++i) outs[q][t * C + i] = ht[i] + (hp[i] - ht[i]) * mus[q][i];
  }
  std::copy(c.h.end() - C, c.h.end(), st.att_shift(l));

  resize(c.r, nc);
  resize(c.k0, nc);
  resize(c.vraw, nc);
  mm(c.xr.data(), p.ptr(s.wr), c.r.data(), n, C, C);
  mm(c.xk.data(), p.ptr(s.wk), c.k0.data(), n, C, C);
  mm(c.xv.data(), p.ptr(s.wv), c.vraw.data(), n, C, C);

  // Decay.
  resize(c.wt, n * Dw);
  mm(c.xw.data(), p.ptr(s.w1), c.wt.data(), n, C, Dw);
  for (auto& e : c.wt) e = std::tanh(e);
  resize(c.sw, nc);
  mm(c.wt.data(), p.ptr(s.w2), c.sw.data(), n, Dw, C);
  resize(c.w, nc);
  {
    const T* w0 = p.ptr(s.w0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < C; ++i) {
        const T sg = sigmoid(c.sw[t * C + i] + w0[i]);
        c.sw[t * C + i] = sg;
        c.w[t * C + i] = std::exp(-static_cast<T>(kDecayScale) * sg);
      }
  }

  // Value residual.
  resize(c.v, nc);
  if (l == 0) {
    c.v = c.vraw;
    std::copy(c.v.begin(), c.v.end(), v_first);
  } else {
    resize(c.vl, n * Dv);
    mm(c.xv.data(), p.ptr(s.v1), c.vl.data(), n, C, Dv);
    resize(c.vg, nc);
    mm(c.vl.data(), p.ptr(s.v2), c.vg.data(), n, Dv, C);
    const T* v0 = p.ptr(s.v0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < C; ++i) {
        const std::size_t e = t * C + i;
        c.vg[e] = sigmoid(c.vg[e] + v0[i]);
        c.v[e] = c.vraw[e] + (v_first[e] - c.vraw[e]) * c.vg[e];
      }
  }

  // In-context learning rate.
  resize(c.al, n * Da);
  mm(c.xa.data(), p.ptr(s.a1), c.al.data(), n, C, Da);
  resize(c.a, nc);
  mm(c.al.data(), p.ptr(s.a2), c.a.data(), n, Da, C);
  {
    const T* a0 = p.ptr(s.a0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < C; ++i) c.a[t * C + i] = sigmoid(c.a[t * C + i] + a0[i]);
  }

  // Gate.
  resize(c.gs, n * Dg);
  mm(c.xg.data(), p.ptr(s.g1), c.gs.data(), n, C, Dg);
  for (auto& e : c.gs) e = sigmoid(e);
  resize(c.g, nc);
  mm(c.gs.data(), p.ptr(s.g2), c.g.data(), n, Dg, C);

  // Removal key and replacement key.
  resize(c.kk, nc);
  resize(c.kkn, n * H);
  resize(c.k, nc);
  {
    const T* kkw = p.ptr(s.k_k);
    const T* kaw = p.ptr(s.k_a);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        T ss = 0;
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t e = t * C + h * N + j;
          c.kk[e] = c.k0[e] * kkw[h * N + j];
          ss += c.kk[e] * c.kk[e];
        }
        const T nrm = std::max(std::sqrt(ss), static_cast<T>(kNormEps));
        c.kkn[t * H + h] = nrm;
        for (std::size_t j = 0; j < N; ++j) c.kk[t * C + h * N + j] /= nrm;
      }
      for (std::size_t i = 0; i < C; ++i) {
        const std::size_t e = t * C + i;
        c.k[e] = c.k0[e] * (T(1) + (c.a[e] - T(1)) * kaw[i]);
      }
    }
  }

  // WKV recurrence.
  resize(c.y, nc);
  const std::size_t HNN = H * N * N;
  if (keep_states) c.wkv_ckpt.assign(((n + kChunk - 1) / kChunk) * HNN, T(0));
  {
    T* S = st.wkv(l);
    for (std::size_t t = 0; t < n; ++t) {
      if (keep_states && t % kChunk == 0) std::copy(S, S + HNN, c.wkv_ckpt.data() + (t / kChunk) * HNN);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t o = t * C + h * N;
        wkv_step(S + h * N * N, &c.r[o], &c.w[o], &c.k[o], &c.v[o], &c.kk[o], &c.a[o], &c.y[o], N,
                 static_cast<T*>(nullptr));
      }
    }
  }

  // Per-head norm, bonus term, gate and output projection.
  resize(c.yhat, nc);
  resize(c.gmu, n * H);
  resize(c.grs, n * H);
  norm_rows(c.y.data(), c.yhat.data(), c.gmu.data(), c.grs.data(), n, C, N, kGroupEps);
  resize(c.o, nc);
  affine_rows(c.yhat.data(), c.o.data(), p.ptr(s.lnx_w), p.ptr(s.lnx_b), n, C);
  resize(c.rks, n * H);
  {
    const T* rk = p.ptr(s.r_k);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        T sum = 0;
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t e = t * C + h * N + j;
          sum += c.r[e] * c.k[e] * rk[h * N + j];
        }
        c.rks[t * H + h] = sum;
        for (std::size_t j = 0; j < N; ++j) c.o[t * C + h * N + j] += sum * c.v[t * C + h * N + j];
      }
  }
  resize(c.og, nc);
  for (std::size_t e = 0; e < nc; ++e) c.og[e] = c.o[e] * c.g[e];
  mm(c.og.data(), p.ptr(s.wo), x, n, C, C, true);
  c.x_mid.assign(x, x + nc);

  // Channel mix.
  resize(c.h2, nc);
  resize(c.h2hat, nc);
  resize(c.mu2, n);
  resize(c.rs2, n);
  norm_rows(x, c.h2hat.data(), c.mu2.data(), c.rs2.data(), n, C, C, kLnEps);
  affine_rows(c.h2hat.data(), c.h2.data(), p.ptr(s.ln2_w), p.ptr(s.ln2_b), n, C);
  c.shift_ffn.assign(st.ffn_shift(l), st.ffn_shift(l) + C);
  resize(c.xk2, nc);
  {
    const T* mu = p.ptr(s.f_xk);
    for (std::size_t t = 0; t < n; ++t) {
      const T* hp = t == 0 ? c.shift_ffn.data() : c.h2.data() + (t - 1) * C;
      for (std::size_t i = 0; i < C; ++i) {
        const T ht = c.h2[t * C + i];
        c.xk2[t * C + i] = ht + (hp[i] - ht) * mu[i];
      }
    }
  }
  std::copy(c.h2.end() - C, c.h2.end(), st.ffn_shift(l));
  resize(c.kpre, n * F);
  mm(c.xk2.data(), p.ptr(s.f_key), c.kpre.data(), n, C, F);
  resize(c.kf, n * F);
  for (std::size_t e = 0; e < n * F; ++e) {
    const T z = std::max(c.kpre[e], T(0));
    c.kf[e] = z * z;
  }
  mm(c.kf.data(), p.ptr(s.f_val), x, n, F, C, true);
}

template <typename T>
void check_ids(const ModelConfig& cfg, std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= cfg.vocab_size)
      throw ModelError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside the vocabulary");
}

// Embedding lookup, all blocks, final norm. Returns the normalized final
// stream (n, C) and, when caches is non-null, keeps every block's activations.
template <typename T>
void trunk_forward(const Parameters<T>& p, ModelState<T>& st, std::span<const int> ids, std::vector<T>& x,
                   std::vector<LayerCache<T>>* caches, std::vector<T>* xo_hat, std::vector<T>* mu_o,
                   std::vector<T>* rs_o) {
  const auto& cfg = p.config();
  const auto& lay = p.layout();
  const std::size_t n = ids.size(), C = cfg.d_model;
  x.assign(n * C, T(0));
  const T* emb = p.ptr(lay.emb);
  for (std::size_t t = 0; t < n; ++t)
    std::copy(emb + static_cast<std::size_t>(ids[t]) * C, emb + static_cast<std::size_t>(ids[t] + 1) * C,
              x.data() + t * C);
  std::vector<T> v_first(n * C);
  LayerCache<T> scratch;
  for (int l = 0; l < cfg.n_layers; ++l)
    layer_forward(p, l, n, x.data(), v_first.data(), st, caches ? (*caches)[l] : scratch, caches != nullptr);
  std::vector<T> hat(n * C), mu(n), rs(n);
  norm_rows(x.data(), hat.data(), mu.data(), rs.data(), n, C, C, kLnEps);
  affine_rows(hat.data(), x.data(), p.ptr(lay.ln_out_w), p.ptr(lay.ln_out_b), n, C);
  if (xo_hat) *xo_hat = std::move(hat);
  if (mu_o) *mu_o = std::move(mu);
  if (rs_o) *rs_o = std::move(rs);
}

}  // namespace

template <typename T>
std::vector<T> forward_sequence(const Parameters<T>& p, ModelState<T>& state, std::span<const int> ids) {
  const auto& cfg = p.config();
  if (!(state.config() == cfg)) throw ModelError("state shape does not match the model");
  check_ids<T>(cfg, ids);
  if (ids.empty()) return {};
  std::vector<T> x;
  trunk_forward<T>(p, state, ids, x, nullptr, nullptr, nullptr, nullptr);
  std::vector<T> logits(ids.size() * static_cast<std::size_t>(cfg.vocab_size));
  mm(x.data(), p.ptr(p.layout().head), logits.data(), ids.size(), cfg.d_model, cfg.vocab_size);
  return logits;
}

template <typename T>
std::vector<T> forward_step(const Parameters<T>& p, ModelState<T>& state, int token) {
  const int ids[1] = {token};
  return forward_sequence(p, state, std::span<const int>(ids, 1));
}

namespace {

// Masked rows of the head output: returns the loss and, when want_grad,
// the gradient w.r.t. the final normalized stream.
template <typename T>
T head_loss(const Parameters<T>& p, const std::vector<T>& xo, std::span<const int> ids,
            std::span<const uint8_t> mask, Parameters<T>* pg, std::vector<T>* dxo) {
  const auto& cfg = p.config();
  const std::size_t C = cfg.d_model, V = cfg.vocab_size, n = ids.size();
  std::vector<std::size_t> rows;
  for (std::size_t t = 1; t < n; ++t)
    if (mask[t]) rows.push_back(t - 1);
  if (rows.empty()) throw ModelError("loss mask selects no target");
  const std::size_t m = rows.size();
  std::vector<T> xs(m * C);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xo.data() + rows[i] * C, C, xs.data() + i * C);
  std::vector<T> logits(m * V);
  mm(xs.data(), p.ptr(p.layout().head), logits.data(), m, C, V);
  T loss = 0;
  const T inv = T(1) / static_cast<T>(m);
  for (std::size_t i = 0; i < m; ++i) {
    T* z = logits.data() + i * V;
    const T mx = *std::max_element(z, z + V);
    T sum = 0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(z[j] - mx);
    const int target = ids[rows[i] + 1];
    loss += (std::log(sum) + mx - z[target]) * inv;
    if (dxo) {
      for (std::size_t j = 0; j < V; ++j) z[j] = std::exp(z[j] - mx) / sum * inv;
      z[target] -= inv;
    }
  }
  if (dxo) {
    // logits now hold dlogits.
    if (pg) mm_tn(xs.data(), logits.data(), pg->ptr(p.layout().head), m, C, V);
    std::vector<T> dxs(m * C);
    mm_nt(logits.data(), p.ptr(p.layout().head), dxs.data(), m, V, C, false);
    dxo->assign(n * C, T(0));
    for (std::size_t i = 0; i < m; ++i) std::copy_n(dxs.data() + i * C, C, dxo->data() + rows[i] * C);
  }
  return loss;
}

// Token-shift mix backward: out_t = h_t + (prev_t - h_t) mu with prev_0 = shift.
// Accumulates into dh, dmu and dshift.
template <typename T>
void lerp_backward(const T* dout, const T* h, const T* shift, const T* mu, T* dh, T* dmu, T* dshift, std::size_t n,
                   std::size_t C) {
  for (std::size_t t = 0; t < n; ++t) {
    const T* hp = t == 0 ? shift : h + (t - 1) * C;
    T* dhp = t == 0 ? dshift : dh + (t - 1) * C;
    for (std::size_t i = 0; i < C; ++i) {
      const T d = dout[t * C + i];
      const T ht = h[t * C + i];
      dh[t * C + i] += d * (T(1) - mu[i]);
      if (dhp) dhp[i] += d * mu[i];
      dmu[i] += d * (hp[i] - ht);
    }
  }
}

// Block backward. dx (n, C) holds the gradient of the block output and is
// replaced by the gradient of the block input. dvf accumulates the gradient
// of v_first from layers > 0; on layer 0 it is consumed.
template <typename T>
void layer_backward(const Parameters<T>& p, int l, const LayerCache<T>& c, const T* v_first, const T* wkv0,
                    std::vector<T>& dx, std::vector<T>& dvf, Parameters<T>& g, T* dstate_layer,
                    const LossOptions& opt) {
  const auto& cfg = p.config();
  const auto& s = p.layout().layers[l];
  const std::size_t n = c.n, C = cfg.d_model, H = cfg.n_heads(), N = cfg.head_size, F = cfg.d_ffn;
  const std::size_t Dw = cfg.decay_rank(), Da = cfg.aaa_rank(), Dv = cfg.mv_rank(), Dg = cfg.gate_rank();
  const std::size_t nc = n * C;
  std::vector<T> d_att_shift(C, T(0)), d_ffn_shift(C, T(0));

  // Channel mix.
  std::vector<T> dkf(n * F);
  mm_tn(c.kf.data(), dx.data(), g.ptr(s.f_val), n, F, C);
  mm_nt(dx.data(), p.ptr(s.f_val), dkf.data(), n, C, F, false);
  for (std::size_t e = 0; e < n * F; ++e) dkf[e] *= c.kpre[e] > 0 ? T(2) * c.kpre[e] : T(0);
  mm_tn(c.xk2.data(), dkf.data(), g.ptr(s.f_key), n, C, F);
  std::vector<T> dxk2(nc), dh2(nc, T(0));
  mm_nt(dkf.data(), p.ptr(s.f_key), dxk2.data(), n, F, C, false);
  lerp_backward(dxk2.data(), c.h2.data(), c.shift_ffn.data(), p.ptr(s.f_xk), dh2.data(), g.ptr(s.f_xk),
                d_ffn_shift.data(), n, C);
  // dx becomes the gradient at x_mid (residual plus ln2 path).
  norm_backward(dh2.data(), c.h2hat.data(), c.rs2.data(), p.ptr(s.ln2_w), dx.data(), g.ptr(s.ln2_w), g.ptr(s.ln2_b),
                n, C, C);

  // Output projection and gate.
  std::vector<T> dog(nc), dout(nc), dgt(nc);
  mm_tn(c.og.data(), dx.data(), g.ptr(s.wo), n, C, C);
  mm_nt(dx.data(), p.ptr(s.wo), dog.data(), n, C, C, false);
  for (std::size_t e = 0; e < nc; ++e) {
    dout[e] = dog[e] * c.g[e];
    dgt[e] = dog[e] * c.o[e];
  }

  // Bonus term and per-head norm.
  std::vector<T> dr(nc, T(0)), dk(nc, T(0)), dv(nc, T(0)), dy(nc, T(0));
  {
    const T* rk = p.ptr(s.r_k);
    T* drk = g.ptr(s.r_k);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        T drks = 0;
        const T sum = c.rks[t * H + h];
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t e = t * C + h * N + j;
          drks += dout[e] * c.v[e];
          dv[e] += dout[e] * sum;
        }
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t e = t * C + h * N + j;
          dr[e] += drks * c.k[e] * rk[h * N + j];
          dk[e] += drks * c.r[e] * rk[h * N + j];
          drk[h * N + j] += drks * c.r[e] * c.k[e];
        }
      }
  }
  norm_backward(dout.data(), c.yhat.data(), c.grs.data(), p.ptr(s.lnx_w), dy.data(), g.ptr(s.lnx_w), g.ptr(s.lnx_b),
                n, C, N);

  // WKV recurrence, chunk by chunk from the end, recomputing states forward
  // from each stored checkpoint.
  std::vector<T> dw(nc, T(0)), dkk(nc, T(0)), da(nc, T(0));
  {
    const std::size_t NN = N * N, HNN = H * NN;
    std::vector<T> dS(HNN, T(0));
    std::vector<T> states((kChunk + 1) * HNN), sa(kChunk * H * N), ybuf(N), dsa(N);
    const std::size_t nchunks = (n + kChunk - 1) / kChunk;
    for (std::size_t ci = nchunks; ci-- > 0;) {
      const std::size_t t0 = ci * kChunk, t1 = std::min(n, t0 + kChunk);
      std::copy_n(c.wkv_ckpt.data() + ci * HNN, HNN, states.data());
      for (std::size_t t = t0; t < t1; ++t) {
        T* S = states.data() + (t - t0 + 1) * HNN;
        std::copy_n(states.data() + (t - t0) * HNN, HNN, S);
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t o = t * C + h * N;
          wkv_step(S + h * NN, &c.r[o], &c.w[o], &c.k[o], &c.v[o], &c.kk[o], &c.a[o], ybuf.data(), N,
                   sa.data() + ((t - t0) * H + h) * N);
        }
      }
      for (std::size_t t = t1; t-- > t0;) {
        const T* Sp = states.data() + (t - t0) * HNN;
        const T* Sn = states.data() + (t - t0 + 1) * HNN;
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t o = t * C + h * N;
          const T* r = &c.r[o];
          const T* w = &c.w[o];
          const T* k = &c.k[o];
          const T* v = &c.v[o];
          const T* kk = &c.kk[o];
          const T* a = &c.a[o];
          const T* dyt = &dy[o];
          const T* sah = sa.data() + ((t - t0) * H + h) * N;
          T* D = dS.data() + h * NN;
          const T* P = Sp + h * NN;
          const T* Q = Sn + h * NN;
          for (std::size_t i = 0; i < N; ++i) {
            T* Di = D + i * N;
            const T* Qi = Q + i * N;
            for (std::size_t j = 0; j < N; ++j) {
              Di[j] += dyt[i] * r[j];
              dr[o + j] += Qi[j] * dyt[i];
            }
          }
          for (std::size_t i = 0; i < N; ++i) {
            const T* Di = D + i * N;
            const T* Pi = P + i * N;
            T ds = 0, dvi = 0;
            for (std::size_t j = 0; j < N; ++j) {
              const T bb = kk[j] * a[j];
              dw[o + j] += Di[j] * Pi[j];
              ds += Di[j] * bb;
              dvi += Di[j] * k[j];
              dk[o + j] += Di[j] * v[i];
              const T dbb = Di[j] * sah[i];
              dkk[o + j] += dbb * a[j];
              da[o + j] += dbb * kk[j];
            }
            dsa[i] = ds;
            dv[o + i] += dvi;
          }
          // dS_prev = D diag(w) + dsa aa^T with aa = -kk; daa = P^T dsa.
          for (std::size_t i = 0; i < N; ++i) {
            T* Di = D + i * N;
            const T* Pi = P + i * N;
            for (std::size_t j = 0; j < N; ++j) {
              dkk[o + j] -= Pi[j] * dsa[i];
              Di[j] = Di[j] * w[j] - dsa[i] * kk[j];
            }
          }
        }
      }
    }
    if (dstate_layer && opt.wkv_state_grad) {
      T* dst = dstate_layer + 2 * C;
      for (std::size_t e = 0; e < HNN; ++e) dst[e] += dS[e];
    }
  }
  (void)wkv0;

  // k = k0 (1 + (a - 1) k_a); kk = normalize(k0 k_k).
  std::vector<T> dk0(nc, T(0));
  {
    const T* kaw = p.ptr(s.k_a);
    const T* kkw = p.ptr(s.k_k);
    T* dka = g.ptr(s.k_a);
    T* dkkw = g.ptr(s.k_k);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t i = 0; i < C; ++i) {
        const std::size_t e = t * C + i;
        dk0[e] += dk[e] * (T(1) + (c.a[e] - T(1)) * kaw[i]);
        da[e] += dk[e] * c.k0[e] * kaw[i];
        dka[i] += dk[e] * c.k0[e] * (c.a[e] - T(1));
      }
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t o = t * C + h * N;
        const T nrm = c.kkn[t * H + h];
        T dot = 0;
        for (std::size_t j = 0; j < N; ++j) dot += c.kk[o + j] * dkk[o + j];
        for (std::size_t j = 0; j < N; ++j) {
          // Below the norm floor the map is a plain scaling.
          const T draw = nrm > static_cast<T>(kNormEps) ? (dkk[o + j] - c.kk[o + j] * dot) / nrm : dkk[o + j] / nrm;
          dk0[o + j] += draw * kkw[h * N + j];
          dkkw[h * N + j] += draw * c.k0[o + j];
        }
      }
    }
  }

  std::vector<T> dxr(nc), dxw(nc), dxk(nc), dxv(nc), dxa(nc), dxg(nc);
  // Projections.
  mm_tn(c.xr.data(), dr.data(), g.ptr(s.wr), n, C, C);
  mm_nt(dr.data(), p.ptr(s.wr), dxr.data(), n, C, C, false);
  mm_tn(c.xk.data(), dk0.data(), g.ptr(s.wk), n, C, C);
  mm_nt(dk0.data(), p.ptr(s.wk), dxk.data(), n, C, C, false);

  // Decay: w = exp(-c sigmoid(w0 + tanh(xw w1) w2)).
  {
    std::vector<T> dz(nc), dwt(n * Dw);
    T* dw0 = g.ptr(s.w0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < C; ++i) {
        const std::size_t e = t * C + i;
        const T sg = c.sw[e];
        dz[e] = dw[e] * c.w[e] * (-static_cast<T>(kDecayScale)) * sg * (T(1) - sg);
        dw0[i] += dz[e];
      }
    mm_tn(c.wt.data(), dz.data(), g.ptr(s.w2), n, Dw, C);
    mm_nt(dz.data(), p.ptr(s.w2), dwt.data(), n, C, Dw, false);
    for (std::size_t e = 0; e < n * Dw; ++e) dwt[e] *= T(1) - c.wt[e] * c.wt[e];
    mm_tn(c.xw.data(), dwt.data(), g.ptr(s.w1), n, C, Dw);
    mm_nt(dwt.data(), p.ptr(s.w1), dxw.data(), n, Dw, C, false);
  }

  // Value and value residual.
  {
    std::vector<T> dvraw(nc);
    if (l == 0) {
      for (std::size_t e = 0; e < nc; ++e) dvraw[e] = dv[e] + dvf[e];
      std::fill(dxv.begin(), dxv.end(), T(0));
    } else {
      std::vector<T> dz(nc), dvl(n * Dv);
      T* dv0 = g.ptr(s.v0);
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i < C; ++i) {
          const std::size_t e = t * C + i;
          const T vg = c.vg[e];
          dvraw[e] = dv[e] * (T(1) - vg);
          dvf[e] += dv[e] * vg;
          dz[e] = dv[e] * (v_first[e] - c.vraw[e]) * vg * (T(1) - vg);
          dv0[i] += dz[e];
        }
      mm_tn(c.vl.data(), dz.data(), g.ptr(s.v2), n, Dv, C);
      mm_nt(dz.data(), p.ptr(s.v2), dvl.data(), n, C, Dv, false);
      mm_tn(c.xv.data(), dvl.data(), g.ptr(s.v1), n, C, Dv);
      mm_nt(dvl.data(), p.ptr(s.v1), dxv.data(), n, Dv, C, false);
    }
    mm_tn(c.xv.data(), dvraw.data(), g.ptr(s.wv), n, C, C);
    mm_nt(dvraw.data(), p.ptr(s.wv), dxv.data(), n, C, C, l != 0);
  }

  // In-context learning rate.
  {
    std::vector<T> dz(nc), dal(n * Da);
    T* da0 = g.ptr(s.a0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < C; ++i) {
        const std::size_t e = t * C + i;
        dz[e] = da[e] * c.a[e] * (T(1) - c.a[e]);
        da0[i] += dz[e];
      }
    mm_tn(c.al.data(), dz.data(), g.ptr(s.a2), n, Da, C);
    mm_nt(dz.data(), p.ptr(s.a2), dal.data(), n, C, Da, false);
    mm_tn(c.xa.data(), dal.data(), g.ptr(s.a1), n, C, Da);
    mm_nt(dal.data(), p.ptr(s.a1), dxa.data(), n, Da, C, false);
  }

  // Gate.
  {
    std::vector<T> dgs(n * Dg);
    mm_tn(c.gs.data(), dgt.data(), g.ptr(s.g2), n, Dg, C);
    mm_nt(dgt.data(), p.ptr(s.g2), dgs.data(), n, C, Dg, false);
    for (std::size_t e = 0; e < n * Dg; ++e) dgs[e] *= c.gs[e] * (T(1) - c.gs[e]);
    mm_tn(c.xg.data(), dgs.data(), g.ptr(s.g1), n, C, Dg);
    mm_nt(dgs.data(), p.ptr(s.g1), dxg.data(), n, Dg, C, false);
  }

  // Token-shift mixes and ln1.
  std::vector<T> dh(nc, T(0));
  const std::size_t mu_slots[6] = {s.x_r, s.x_w, s.x_k, s.x_v, s.x_a, s.x_g};
  const std::vector<T>* dmixes[6] = {&dxr, &dxw, &dxk, &dxv, &dxa, &dxg};
  for (int q = 0; q < 6; ++q)
    lerp_backward(dmixes[q]->data(), c.h.data(), c.shift_att.data(), p.ptr(mu_slots[q]), dh.data(),
                  g.ptr(mu_slots[q]), d_att_shift.data(), n, C);
  norm_backward(dh.data(), c.hhat.data(), c.rs1.data(), p.ptr(s.ln1_w), dx.data(), g.ptr(s.ln1_w), g.ptr(s.ln1_b), n,
                C, C);

  if (l == 0) {
    std::vector<T> d0(nc, T(0));
    norm_backward(dx.data(), c.x0hat.data(), c.rs0.data(), p.ptr(s.ln0_w), d0.data(), g.ptr(s.ln0_w),
                  g.ptr(s.ln0_b), n, C, C);
    dx = std::move(d0);
  }
  if (dstate_layer && opt.shift_state_grad) {
    for (std::size_t i = 0; i < C; ++i) {
      dstate_layer[i] += d_att_shift[i];
      dstate_layer[C + i] += d_ffn_shift[i];
    }
  }
}

}  // namespace

template <typename T>
T loss_and_grads(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                 std::span<const uint8_t> mask, Parameters<std::type_identity_t<T>>* param_grad,
                 ModelState<std::type_identity_t<T>>* state_grad) {
  return loss_and_grads_opt(p, state0, ids, mask, param_grad, state_grad, LossOptions{});
}

template <typename T>
T loss_and_grads_opt(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                     std::span<const uint8_t> mask, Parameters<std::type_identity_t<T>>* param_grad,
                     ModelState<std::type_identity_t<T>>* state_grad, const LossOptions& opt) {
  const auto& cfg = p.config();
  if (!(state0.config() == cfg)) throw ModelError("state shape does not match the model");
  if (mask.size() != ids.size()) throw ModelError("mask length differs from sequence length");
  check_ids<T>(cfg, ids);
  const std::size_t n = ids.size(), C = cfg.d_model;
  ModelState<T> st = state0;
  std::vector<LayerCache<T>> caches(cfg.n_layers);
  std::vector<T> x, xo_hat, mu_o, rs_o;
  trunk_forward(p, st, ids, x, &caches, &xo_hat, &mu_o, &rs_o);
  const bool want = param_grad || state_grad;
  std::vector<T> dxo;
  Parameters<T> local(p.layout_ptr());
  Parameters<T>& g = param_grad ? *param_grad : local;
  const T loss = head_loss(p, x, ids, mask, param_grad, want ? &dxo : nullptr);
  if (!want) return loss;

  std::vector<T> dx(n * C, T(0));
  norm_backward(dxo.data(), xo_hat.data(), rs_o.data(), p.ptr(p.layout().ln_out_w), dx.data(),
                g.ptr(p.layout().ln_out_w), g.ptr(p.layout().ln_out_b), n, C, C);
  std::vector<T> dvf(n * C, T(0));
  // v_first is the value of layer 0, recoverable from its cache.
  const std::vector<T>& v_first = caches[0].v;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    T* dstate = state_grad ? state_grad->att_shift(l) : nullptr;
    layer_backward(p, l, caches[l], v_first.data(), state0.wkv(l), dx, dvf, g, dstate, opt);
  }
  T* demb = g.ptr(p.layout().emb);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < C; ++i) demb[static_cast<std::size_t>(ids[t]) * C + i] += dx[t * C + i];
  return loss;
}

template <typename T>
T sequence_loss(const Parameters<T>& p, const ModelState<T>& state0, std::span<const int> ids,
                std::span<const uint8_t> mask) {
  const auto& cfg = p.config();
  if (mask.size() != ids.size()) throw ModelError("mask length differs from sequence length");
  check_ids<T>(cfg, ids);
  ModelState<T> st = state0;
  std::vector<T> x;
  trunk_forward<T>(p, st, ids, x, nullptr, nullptr, nullptr, nullptr);
  return head_loss<T>(p, x, ids, mask, nullptr, nullptr);
}

// --- counts -----------------------------------------------------------------

std::size_t count_parameters(const ModelConfig& cfg) { return Layout(cfg).total(); }

std::vector<std::string> lora_target_names(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    for (const char* m : {"att.receptance.weight", "att.key.weight", "att.value.weight", "att.output.weight",
                          "ffn.key.weight", "ffn.value.weight"})
      out.push_back(b + m);
  }
  return out;
}

std::size_t count_trainable(const ModelConfig& cfg, TrainMode mode, int lora_rank) {
  switch (mode) {
    case TrainMode::Full:
      return count_parameters(cfg);
    case TrainMode::State:
      return static_cast<std::size_t>(cfg.n_layers) * cfg.n_heads() * cfg.head_size * cfg.head_size;
    case TrainMode::Lora: {
      const Layout lay(cfg);
      std::size_t total = 0;
      for (const auto& name : lora_target_names(cfg)) {
        const auto& t = lay.tensor(lay.find(name));
        total += static_cast<std::size_t>(lora_rank) * (t.shape[0] + t.shape[1]);
      }
      return total;
    }
  }
  return 0;
}

// --- LoRA -------------------------------------------------------------------

template <typename T>
std::size_t LoraAdapter<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : targets) n += t.a.size() + t.b.size();
  return n;
}

template <typename T>
LoraAdapter<T> make_lora(const Layout& layout, int rank, double alpha, uint64_t seed) {
  if (rank < 1) throw ModelError("LoRA rank must be positive");
  LoraAdapter<T> out;
  out.rank = rank;
  out.alpha = alpha;
  Rng rng = Rng::substream(seed, {0x10A4});
  for (const auto& name : lora_target_names(layout.config())) {
    typename LoraAdapter<T>::Target t;
    t.tensor = layout.find(name);
    t.in = layout.tensor(t.tensor).shape[0];
    t.out = layout.tensor(t.tensor).shape[1];
    // Kaiming-uniform A as in the LoRA reference; B zero.
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.in));
    t.a.resize(t.in * rank);
    for (auto& e : t.a) e = static_cast<T>(rng.uniform(-bound, bound));
    t.b.assign(static_cast<std::size_t>(rank) * t.out, T(0));
    out.targets.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Parameters<T> merge_lora(const Parameters<T>& base, const LoraAdapter<T>& lora) {
  Parameters<T> out = base;
  const T sc = lora.scale();
  for (const auto& t : lora.targets) {
    Map<T> W(out.ptr(t.tensor), t.in, t.out);
    CMap<T> A(t.a.data(), t.in, lora.rank), B(t.b.data(), lora.rank, t.out);
    W.noalias() += sc * (A * B);
  }
  return out;
}

template <typename T>
void lora_backward(const LoraAdapter<T>& lora, const Parameters<T>& weight_grad, LoraAdapter<T>& grad) {
  const T sc = lora.scale();
  for (std::size_t i = 0; i < lora.targets.size(); ++i) {
    const auto& t = lora.targets[i];
    auto& gt = grad.targets[i];
    CMap<T> dW(weight_grad.ptr(t.tensor), t.in, t.out);
    CMap<T> A(t.a.data(), t.in, lora.rank), B(t.b.data(), lora.rank, t.out);
    Map<T> dA(gt.a.data(), t.in, lora.rank), dB(gt.b.data(), lora.rank, t.out);
    dA.noalias() += sc * (dW * B.transpose());
    dB.noalias() += sc * (A.transpose() * dW);
  }
}

// --- explicit instantiations ---------------------------------------------------

#define MRWKV_INSTANTIATE(T)                                                                                        \
  template class Parameters<T>;                                                                                      \
  template class ModelState<T>;                                                                                      \
  template struct LoraAdapter<T>;                                                                                    \
  template void init_parameters<T>(Parameters<T>&, uint64_t);                                                       \
  template std::vector<T> forward_step<T>(const Parameters<T>&, ModelState<T>&, int);                               \
  template std::vector<T> forward_sequence<T>(const Parameters<T>&, ModelState<T>&, std::span<const int>);          \
  template T loss_and_grads<T>(const Parameters<T>&, const ModelState<T>&, std::span<const int>,                    \
                               std::span<const uint8_t>, Parameters<T>*, ModelState<T>*);                           \
  template T loss_and_grads_opt<T>(const Parameters<T>&, const ModelState<T>&, std::span<const int>,                \
                                   std::span<const uint8_t>, Parameters<T>*, ModelState<T>*, const LossOptions&);   \
  template T sequence_loss<T>(const Parameters<T>&, const ModelState<T>&, std::span<const int>,                     \
                              std::span<const uint8_t>);                                                            \
  template LoraAdapter<T> make_lora<T>(const Layout&, int, double, uint64_t);                                       \
  template Parameters<T> merge_lora<T>(const Parameters<T>&, const LoraAdapter<T>&);                                \
  template void lora_backward<T>(const LoraAdapter<T>&, const Parameters<T>&, LoraAdapter<T>&);

MRWKV_INSTANTIATE(float)
MRWKV_INSTANTIATE(double)

}  // namespace mrwkv::model
