#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "mrwkv/model.hpp"

namespace mrwkv::model {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'W', 'K', 'V', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::vector<uint8_t>& out, U v) {
  uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <typename U>
U get(std::span<const uint8_t> bytes, std::size_t at) {
  if (at + sizeof(U) > bytes.size()) throw ModelError("checkpoint truncated");
  U v;
  std::memcpy(&v, bytes.data() + at, sizeof(U));
  return v;
}

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

}  // namespace

std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ck, bool single_precision) {
  if (ck.names.size() != ck.shapes.size() || ck.names.size() != ck.data.size())
    throw ModelError("checkpoint tensor lists differ in length");
  nlohmann::json header;
  header["kind"] = ck.kind;
  header["config"] = nlohmann::json::parse(config_to_json(ck.config));
  header["meta"] = nlohmann::json::parse(ck.meta_json);
  const std::size_t width = single_precision ? 4 : 8;
  std::size_t offset = 0;
  auto tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    if (product(ck.shapes[i]) != ck.data[i].size()) throw ModelError("tensor " + ck.names[i] + " has wrong size");
    const std::size_t nbytes = ck.data[i].size() * width;
    tensors.push_back({{"name", ck.names[i]},
                       {"dtype", single_precision ? "f32" : "f64"},
                       {"shape", ck.shapes[i]},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();
  std::vector<uint8_t> out(kMagic, kMagic + 8);
  put(out, kVersion);
  put(out, static_cast<uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& d : ck.data)
    for (double v : d) {
      if (single_precision)
        put(out, static_cast<float>(v));
      else
        put(out, v);
    }
  return out;
}

Checkpoint checkpoint_from_bytes(std::span<const uint8_t> bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ModelError("not a checkpoint file");
  const auto version = get<uint32_t>(bytes, 8);
  if (version != kVersion) throw ModelError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = get<uint64_t>(bytes, 12);
  const std::size_t base = 20 + hlen;
  if (base > bytes.size()) throw ModelError("checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + static_cast<std::ptrdiff_t>(base));
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  ck.kind = header.at("kind");
  ck.config = config_from_json(header.at("config").dump());
  ck.meta_json = header.value("meta", nlohmann::json::object()).dump();
  for (const auto& t : header.at("tensors")) {
    ck.names.push_back(t.at("name"));
    ck.shapes.push_back(t.at("shape").get<std::vector<std::size_t>>());
    const std::string dtype = t.at("dtype");
    const std::size_t off = base + t.at("offset").get<std::size_t>();
    const std::size_t n = product(ck.shapes.back());
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw ModelError("unknown dtype " + dtype);
    if (t.at("nbytes").get<std::size_t>() != n * width) throw ModelError("tensor " + ck.names.back() + " size mismatch");
    if (off + n * width > bytes.size()) throw ModelError("checkpoint truncated");
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i)
      d[i] = width == 4 ? static_cast<double>(get<float>(bytes, off + 4 * i)) : get<double>(bytes, off + 8 * i);
    ck.data.push_back(std::move(d));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck, bool single_precision) {
  const auto bytes = checkpoint_to_bytes(ck, single_precision);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ModelError("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ModelError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelError("cannot open checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

template <typename T>
Checkpoint to_checkpoint(const Parameters<T>& p) {
  Checkpoint ck;
  ck.kind = "model";
  ck.config = p.config();
  for (std::size_t i = 0; i < p.layout().tensors().size(); ++i) {
    const auto& t = p.layout().tensor(i);
    ck.names.push_back(t.name);
    ck.shapes.push_back(t.shape);
    const auto v = p.view(i);
    ck.data.emplace_back(v.begin(), v.end());
  }
  return ck;
}

template <typename T>
Checkpoint to_checkpoint(const ModelState<T>& s) {
  const auto& cfg = s.config();
  Checkpoint ck;
  ck.kind = "state";
  ck.config = cfg;
  const std::size_t C = cfg.d_model, H = cfg.n_heads(), N = cfg.head_size;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    ck.names.push_back(b + "att.shift");
    ck.shapes.push_back({C});
    ck.data.emplace_back(s.att_shift(l), s.att_shift(l) + C);
    ck.names.push_back(b + "ffn.shift");
    ck.shapes.push_back({C});
    ck.data.emplace_back(s.ffn_shift(l), s.ffn_shift(l) + C);
    ck.names.push_back(b + "att.wkv");
    ck.shapes.push_back({H, N, N});
    ck.data.emplace_back(s.wkv(l), s.wkv(l) + s.wkv_size());
  }
  return ck;
}

template <typename T>
Checkpoint to_checkpoint(const LoraAdapter<T>& lora, const Layout& layout) {
  Checkpoint ck;
  ck.kind = "lora";
  ck.config = layout.config();
  ck.meta_json = nlohmann::json{{"rank", lora.rank}, {"alpha", lora.alpha}}.dump();
  for (const auto& t : lora.targets) {
    const auto& name = layout.tensor(t.tensor).name;
    ck.names.push_back(name + ".lora_a");
    ck.shapes.push_back({t.in, static_cast<std::size_t>(lora.rank)});
    ck.data.emplace_back(t.a.begin(), t.a.end());
    ck.names.push_back(name + ".lora_b");
    ck.shapes.push_back({static_cast<std::size_t>(lora.rank), t.out});
    ck.data.emplace_back(t.b.begin(), t.b.end());
  }
  return ck;
}

namespace {

void expect_kind(const Checkpoint& ck, const std::string& kind) {
  if (ck.kind != kind) throw ModelError("expected a " + kind + " checkpoint, got " + ck.kind);
}

}  // namespace

template <typename T>
Parameters<T> parameters_from(const Checkpoint& ck) {
  expect_kind(ck, "model");
  Parameters<T> p(ck.config);
  if (ck.names.size() != p.layout().tensors().size()) throw ModelError("model checkpoint has wrong tensor count");
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    const auto idx = p.layout().find(ck.names[i]);
    if (p.layout().tensor(idx).shape != ck.shapes[i]) throw ModelError("shape mismatch for " + ck.names[i]);
    auto v = p.view(idx);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<T>(ck.data[i][j]);
  }
  return p;
}

template <typename T>
ModelState<T> state_from(const Checkpoint& ck) {
  expect_kind(ck, "state");
  ModelState<T> s(ck.config);
  const std::size_t C = ck.config.d_model;
  if (ck.names.size() != 3 * static_cast<std::size_t>(ck.config.n_layers))
    throw ModelError("state checkpoint has wrong tensor count");
  for (int l = 0; l < ck.config.n_layers; ++l) {
    const auto& shift_a = ck.data[3 * l];
    const auto& shift_f = ck.data[3 * l + 1];
    const auto& wkv = ck.data[3 * l + 2];
    if (shift_a.size() != C || shift_f.size() != C || wkv.size() != s.wkv_size())
      throw ModelError("state tensor size mismatch in layer " + std::to_string(l));
    for (std::size_t i = 0; i < C; ++i) {
      s.att_shift(l)[i] = static_cast<T>(shift_a[i]);
      s.ffn_shift(l)[i] = static_cast<T>(shift_f[i]);
    }
    for (std::size_t i = 0; i < wkv.size(); ++i) s.wkv(l)[i] = static_cast<T>(wkv[i]);
  }
  return s;
}

template <typename T>
LoraAdapter<T> lora_from(const Checkpoint& ck, const Layout& layout) {
  expect_kind(ck, "lora");
  if (!(ck.config == layout.config())) throw ModelError("adapter was trained for a different model shape");
  const auto meta = nlohmann::json::parse(ck.meta_json);
  LoraAdapter<T> out;
  out.rank = meta.at("rank");
  out.alpha = meta.at("alpha");
  if (ck.names.size() % 2 != 0) throw ModelError("adapter checkpoint is missing a factor");
  for (std::size_t i = 0; i < ck.names.size(); i += 2) {
    const std::string& na = ck.names[i];
    const std::string suffix = ".lora_a";
    if (na.size() <= suffix.size() || na.compare(na.size() - suffix.size(), suffix.size(), suffix) != 0)
      throw ModelError("unexpected adapter tensor " + na);
    typename LoraAdapter<T>::Target t;
    t.tensor = layout.find(na.substr(0, na.size() - suffix.size()));
    t.in = layout.tensor(t.tensor).shape[0];
    t.out = layout.tensor(t.tensor).shape[1];
    if (ck.data[i].size() != t.in * out.rank || ck.data[i + 1].size() != t.out * out.rank)
      throw ModelError("adapter factor size mismatch for " + na);
    for (double v : ck.data[i]) t.a.push_back(static_cast<T>(v));
    for (double v : ck.data[i + 1]) t.b.push_back(static_cast<T>(v));
    out.targets.push_back(std::move(t));
  }
  return out;
}

template <typename T>
uint64_t parameter_hash(const Parameters<T>& p) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const auto flat = p.flat();
  const auto* bytes = reinterpret_cast<const uint8_t*>(flat.data());
  for (std::size_t i = 0; i < flat.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

#define MRWKV_INSTANTIATE_CKPT(T)                                                   \
  template Checkpoint to_checkpoint<T>(const Parameters<T>&);                       \
  template Checkpoint to_checkpoint<T>(const ModelState<T>&);                       \
  template Checkpoint to_checkpoint<T>(const LoraAdapter<T>&, const Layout&);       \
  template Parameters<T> parameters_from<T>(const Checkpoint&);                     \
  template ModelState<T> state_from<T>(const Checkpoint&);                          \
  template LoraAdapter<T> lora_from<T>(const Checkpoint&, const Layout&);           \
  template uint64_t parameter_hash<T>(const Parameters<T>&);

MRWKV_INSTANTIATE_CKPT(float)
MRWKV_INSTANTIATE_CKPT(double)

}  // namespace mrwkv::model
