#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mrwkv/tokenizer.hpp"

namespace mrwkv::tok {

/// Base vocabulary plus an ordered list of merges. Id i >= base size is the
/// merge merges[i - base size].
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(TokenizerConfig{}) {}
  explicit Vocabulary(TokenizerConfig cfg);
  Vocabulary(TokenizerConfig cfg, std::vector<std::pair<int, int>> merges);

  const BaseVocab& base() const { return base_; }
  const TokenizerConfig& config() const { return base_.config(); }
  std::size_t base_size() const { return base_.size(); }
  std::size_t size() const { return base_.size() + merges_.size(); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  /// Base tokens a vocabulary id stands for.
  std::span<const int> expansion(int id) const;
  /// Kind of the first base token of id.
  Kind first_kind(int id) const { return base_.kind(expansion(id).front()); }
  bool mergeable(int id) const;

  /// Stable 64-bit FNV-1a hash of the config and merge table.
  uint64_t hash() const;

  /// Set when training stopped before the requested size.
  bool exhausted = false;

 private:
  void build_tables();

  BaseVocab base_;
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::vector<int>> expansions_;
};

/// Greedy highest-count pair merging. Ties go to the lexicographically
/// smallest (left, right) pair. Pairs touching a non-mergeable token are never
/// counted.
Vocabulary train_bpe(std::span<const std::vector<int>> corpus, std::size_t target_size, TokenizerConfig cfg = {});

std::vector<int> apply_bpe(std::span<const int> tokens, const Vocabulary& vocab);
std::vector<int> invert_bpe(std::span<const int> tokens, const Vocabulary& vocab);

std::string vocabulary_to_json(const Vocabulary& vocab);
Vocabulary vocabulary_from_json(const std::string& text);
void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::filesystem::path& path);

std::string tokenizer_config_to_json(const TokenizerConfig& cfg);
TokenizerConfig tokenizer_config_from_json(const std::string& text);

/// Token sequence files: "MRTK" magic, u16 version, u16 id width (2 or 4),
/// u64 vocab hash, u64 length, then little-endian ids.
std::vector<uint8_t> encode_sequence(std::span<const int> ids, uint64_t vocab_hash, std::size_t vocab_size);
struct DecodedSequence {
  uint64_t vocab_hash = 0;
  std::vector<int> ids;
  std::size_t bytes_used = 0;
};
DecodedSequence decode_sequence(std::span<const uint8_t> bytes);

uint64_t fnv1a(std::span<const uint8_t> bytes, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t fnv1a(const std::string& s, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace mrwkv::tok
