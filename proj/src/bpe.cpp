#include "mrwkv/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace mrwkv::tok {

using nlohmann::json;

uint64_t fnv1a(std::span<const uint8_t> bytes, uint64_t seed) {
  uint64_t h = seed;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a(const std::string& s, uint64_t seed) {
  return fnv1a(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size()), seed);
}

Vocabulary::Vocabulary(TokenizerConfig cfg) : base_(std::move(cfg)) { build_tables(); }

Vocabulary::Vocabulary(TokenizerConfig cfg, std::vector<std::pair<int, int>> merges)
    : base_(std::move(cfg)), merges_(std::move(merges)) {
  build_tables();
}

void Vocabulary::build_tables() {
  expansions_.clear();
  expansions_.reserve(size());
  for (std::size_t i = 0; i < base_.size(); ++i) expansions_.push_back({static_cast<int>(i)});
  for (std::size_t m = 0; m < merges_.size(); ++m) {
    const auto [a, b] = merges_[m];
    const int new_id = static_cast<int>(base_.size() + m);
    if (a < 0 || b < 0 || a >= new_id || b >= new_id)
      throw std::invalid_argument("merge " + std::to_string(m) + " references an id that does not exist yet");
    if (!mergeable(a) || !mergeable(b))
      throw std::invalid_argument("merge " + std::to_string(m) + " contains a structural or control token");
    std::vector<int> e = expansions_[static_cast<std::size_t>(a)];
    const auto& eb = expansions_[static_cast<std::size_t>(b)];
    e.insert(e.end(), eb.begin(), eb.end());
    expansions_.push_back(std::move(e));
  }
}

std::span<const int> Vocabulary::expansion(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= expansions_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary (size " +
                            std::to_string(size()) + ")");
  return expansions_[static_cast<std::size_t>(id)];
}

bool Vocabulary::mergeable(int id) const {
  if (id < 0) return false;
  if (static_cast<std::size_t>(id) >= base_.size()) return true;
  return is_mergeable(base_.kind(id));
}

uint64_t Vocabulary::hash() const {
  std::string bytes = tokenizer_config_to_json(config());
  for (const auto& [a, b] : merges_) {
    for (int v : {a, b})
      for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<char>((static_cast<uint32_t>(v) >> s) & 0xFF));
  }
  return fnv1a(bytes);
}

namespace {

uint64_t pair_key(int a, int b) { return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b); }
int key_left(uint64_t k) { return static_cast<int>(k >> 32); }
int key_right(uint64_t k) { return static_cast<int>(k & 0xFFFFFFFFu); }

class PairIndex {
 public:
  void add(uint64_t key, int64_t delta) {
    auto& c = counts_[key];
    if (c > 0) order_.erase({-c, key});
    c += delta;
    if (c > 0) order_.insert({-c, key});
  }
  bool empty() const { return order_.empty(); }
  std::pair<int64_t, uint64_t> best() const { return {-order_.begin()->first, order_.begin()->second}; }

 private:
  std::unordered_map<uint64_t, int64_t> counts_;
  std::set<std::pair<int64_t, uint64_t>> order_;
};

}  // namespace

Vocabulary train_bpe(std::span<const std::vector<int>> corpus, std::size_t target_size, TokenizerConfig cfg) {
  Vocabulary probe(cfg);
  const std::size_t base = probe.base_size();
  if (target_size <= base) throw std::invalid_argument("target size must exceed the base vocabulary size");

  // Linked-list view of the whole corpus; -1 ends a sequence.
  std::vector<int> id, prev, next;
  std::vector<uint8_t> can;  // mergeable flag per live node
  for (const auto& seq : corpus) {
    const int start = static_cast<int>(id.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int t = seq[i];
      if (t < 0 || static_cast<std::size_t>(t) >= base) throw std::out_of_range("corpus contains a non-base id");
      id.push_back(t);
      prev.push_back(i == 0 ? -1 : start + static_cast<int>(i) - 1);
      next.push_back(i + 1 == seq.size() ? -1 : start + static_cast<int>(i) + 1);
      can.push_back(probe.mergeable(t) ? 1 : 0);
    }
  }

  PairIndex index;
  std::unordered_map<uint64_t, std::vector<int>> where;
  for (std::size_t i = 0; i < id.size(); ++i) {
    const int j = next[i];
    if (j < 0 || !can[i] || !can[static_cast<std::size_t>(j)]) continue;
    const uint64_t k = pair_key(id[i], id[static_cast<std::size_t>(j)]);
    index.add(k, 1);
    where[k].push_back(static_cast<int>(i));
  }

  std::vector<std::pair<int, int>> merges;
  while (base + merges.size() < target_size && !index.empty()) {
    const auto [count, key] = index.best();
    if (count < 2) break;
    const int a = key_left(key), b = key_right(key);
    const int m = static_cast<int>(base + merges.size());
    merges.emplace_back(a, b);

    std::vector<int> positions = std::move(where[key]);
    where.erase(key);
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
    for (int i : positions) {
      const auto ui = static_cast<std::size_t>(i);
      if (id[ui] != a) continue;
      const int j = next[ui];
      if (j < 0 || id[static_cast<std::size_t>(j)] != b) continue;
      const auto uj = static_cast<std::size_t>(j);
      const int p = prev[ui];
      const int n = next[uj];
      if (p >= 0 && can[static_cast<std::size_t>(p)]) {
        const int ip = id[static_cast<std::size_t>(p)];
        index.add(pair_key(ip, a), -1);
        index.add(pair_key(ip, m), 1);
        where[pair_key(ip, m)].push_back(p);
      }
      if (n >= 0 && can[static_cast<std::size_t>(n)]) {
        const int in = id[static_cast<std::size_t>(n)];
        index.add(pair_key(b, in), -1);
        index.add(pair_key(m, in), 1);
        where[pair_key(m, in)].push_back(i);
      }
      index.add(key, -1);
      id[ui] = m;
      next[ui] = n;
      if (n >= 0) prev[static_cast<std::size_t>(n)] = i;
      id[uj] = -1;
    }
  }

  Vocabulary v(std::move(cfg), std::move(merges));
  v.exhausted = v.size() < target_size;
  return v;
}

std::vector<int> apply_bpe(std::span<const int> tokens, const Vocabulary& vocab) {
  std::unordered_map<uint64_t, int> rank;
  const auto& merges = vocab.merges();
  rank.reserve(merges.size() * 2);
  for (std::size_t r = 0; r < merges.size(); ++r) rank.emplace(pair_key(merges[r].first, merges[r].second), static_cast<int>(r));

  std::vector<int> cur;
  cur.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size())
      throw std::out_of_range("token id " + std::to_string(t) + " out of vocabulary");
    cur.push_back(t);
  }
  if (merges.empty()) return cur;
  const int base = static_cast<int>(vocab.base_size());
  std::vector<int> out;
  while (cur.size() > 1) {
    int best = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < cur.size(); ++i) {
      auto it = rank.find(pair_key(cur[i], cur[i + 1]));
      if (it != rank.end() && it->second < best) best = it->second;
    }
    if (best == std::numeric_limits<int>::max()) break;
    const auto [a, b] = merges[static_cast<std::size_t>(best)];
    out.clear();
    for (std::size_t i = 0; i < cur.size();) {
      if (i + 1 < cur.size() && cur[i] == a && cur[i + 1] == b) {
        out.push_back(base + best);
        i += 2;
      } else {
        out.push_back(cur[i]);
        ++i;
      }
    }
    cur.swap(out);
  }
  return cur;
}

std::vector<int> invert_bpe(std::span<const int> tokens, const Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(tokens.size() * 2);
  for (int t : tokens) {
    auto e = vocab.expansion(t);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string tokenizer_config_to_json(const TokenizerConfig& cfg) {
  json j;
  j["positions_per_quarter"] = cfg.positions_per_quarter;
  j["velocity_bins"] = cfg.velocity_bins;
  j["tempo_bins"] = cfg.tempo_bins;
  j["tempo_min"] = cfg.tempo_min;
  j["tempo_max"] = cfg.tempo_max;
  j["pitch_min"] = cfg.pitch_min;
  j["pitch_max"] = cfg.pitch_max;
  j["max_duration_bars"] = cfg.max_duration_bars;
  j["max_bar_quarters"] = cfg.max_bar_quarters;
  j["density_bins"] = cfg.density_bins;
  j["poly_max"] = cfg.poly_max;
  j["time_signatures"] = cfg.time_signatures;
  return j.dump();
}

TokenizerConfig tokenizer_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  TokenizerConfig cfg;
  cfg.positions_per_quarter = j.value("positions_per_quarter", cfg.positions_per_quarter);
  cfg.velocity_bins = j.value("velocity_bins", cfg.velocity_bins);
  cfg.tempo_bins = j.value("tempo_bins", cfg.tempo_bins);
  cfg.tempo_min = j.value("tempo_min", cfg.tempo_min);
  cfg.tempo_max = j.value("tempo_max", cfg.tempo_max);
  cfg.pitch_min = j.value("pitch_min", cfg.pitch_min);
  cfg.pitch_max = j.value("pitch_max", cfg.pitch_max);
  cfg.max_duration_bars = j.value("max_duration_bars", cfg.max_duration_bars);
  cfg.max_bar_quarters = j.value("max_bar_quarters", cfg.max_bar_quarters);
  cfg.density_bins = j.value("density_bins", cfg.density_bins);
  cfg.poly_max = j.value("poly_max", cfg.poly_max);
  if (j.contains("time_signatures")) cfg.time_signatures = j.at("time_signatures").get<std::vector<std::pair<int, int>>>();
  return cfg;
}

std::string vocabulary_to_json(const Vocabulary& vocab) {
  json j;
  j["format"] = "mrwkv-vocabulary";
  j["version"] = 1;
  j["config"] = json::parse(tokenizer_config_to_json(vocab.config()));
  json base = json::array();
  for (const auto& t : vocab.base().tokens()) base.push_back({std::string(kind_name(t.kind)), t.value});
  j["base_tokens"] = std::move(base);
  j["merges"] = vocab.merges();
  j["size"] = vocab.size();
  j["exhausted"] = vocab.exhausted;
  j["hash"] = vocab.hash();
  return j.dump(1);
}

Vocabulary vocabulary_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "mrwkv-vocabulary") throw std::invalid_argument("not a vocabulary document");
  if (j.value("version", 0) != 1) throw std::invalid_argument("unsupported vocabulary version");
  auto cfg = tokenizer_config_from_json(j.at("config").dump());
  Vocabulary v(cfg, j.at("merges").get<std::vector<std::pair<int, int>>>());
  const auto& base = j.at("base_tokens");
  if (base.size() != v.base_size()) throw std::invalid_argument("base token table does not match config");
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto k = kind_from_name(base[i].at(0).get<std::string>());
    if (!k || *k != v.base().token(static_cast<int>(i)).kind ||
        base[i].at(1).get<int>() != v.base().token(static_cast<int>(i)).value)
      throw std::invalid_argument("base token table does not match config at id " + std::to_string(i));
  }
  v.exhausted = j.value("exhausted", false);
  return v;
}

void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << vocabulary_to_json(vocab);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return vocabulary_from_json(ss.str());
}

std::vector<uint8_t> encode_sequence(std::span<const int> ids, uint64_t vocab_hash, std::size_t vocab_size) {
  const uint16_t width = vocab_size <= 65536 ? 2 : 4;
  std::vector<uint8_t> out{'M', 'R', 'T', 'K'};
  auto put = [&](uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  };
  put(1, 2);
  put(width, 2);
  put(vocab_hash, 8);
  put(ids.size(), 8);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw std::out_of_range("id out of vocabulary");
    put(static_cast<uint32_t>(id), width);
  }
  return out;
}

DecodedSequence decode_sequence(std::span<const uint8_t> bytes) {
  if (bytes.size() < 24 || bytes[0] != 'M' || bytes[1] != 'R' || bytes[2] != 'T' || bytes[3] != 'K')
    throw std::invalid_argument("not a token sequence");
  std::size_t pos = 4;
  auto get = [&](int n) {
    if (pos + static_cast<std::size_t>(n) > bytes.size()) throw std::invalid_argument("truncated token sequence");
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  };
  if (get(2) != 1) throw std::invalid_argument("unsupported token sequence version");
  const auto width = static_cast<int>(get(2));
  if (width != 2 && width != 4) throw std::invalid_argument("bad id width");
  DecodedSequence d;
  d.vocab_hash = get(8);
  const uint64_t n = get(8);
  if (n > (bytes.size() - pos) / static_cast<uint64_t>(width)) throw std::invalid_argument("truncated token sequence");
  d.ids.reserve(n);
  for (uint64_t i = 0; i < n; ++i) d.ids.push_back(static_cast<int>(get(width)));
  d.bytes_used = pos;
  return d;
}

}  // namespace mrwkv::tok
