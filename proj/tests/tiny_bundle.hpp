#pragma once

#include <filesystem>

#include "mrwkv/harness.hpp"
#include "mrwkv/synth.hpp"

namespace mrwkv::testing {

// Small random model over a BPE vocabulary learned from synthetic songs.
struct TinyBundle {
  std::vector<midi::Score> songs;
  tok::Vocabulary vocab;
  model::Parameters<double> params;

  explicit TinyBundle(std::size_t n_songs = 6, uint64_t seed = 21) : params(config(640)) {
    songs = synth::make_corpus(synth::style_a(), n_songs, 16, seed);
    const tok::RemiTokenizer tk;
    std::vector<std::vector<int>> corpus;
    for (const auto& s : songs)
      for (auto& t : tk.encode_base(s)) corpus.push_back(std::move(t));
    vocab = tok::train_bpe(corpus, 640);
    params = model::Parameters<double>(config(static_cast<int>(vocab.size())));
    model::init_parameters(params, 3);
    Rng rng(5);
    for (auto& v : params.flat()) v += rng.uniform(-0.4, 0.4);
  }

  static model::ModelConfig config(int vocab_size) {
    model::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 32;
    c.head_size = 16;
    c.d_ffn = 64;
    c.vocab_size = vocab_size;
    c.decay_lora = c.aaa_lora = c.mv_lora = c.gate_lora = 8;
    return c;
  }

  std::filesystem::path save(const std::string& name) const {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    harness::save_bundle(dir, vocab, params);
    return dir;
  }
};

}  // namespace mrwkv::testing
