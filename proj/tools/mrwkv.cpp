#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrwkv/harness.hpp"
#include "mrwkv/service.hpp"
#include "mrwkv/synth.hpp"

using namespace mrwkv;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

// Scores from a MIDI folder or the bundled synthetic styles ("a", "b", "mix").
struct CorpusArgs {
  std::string midi_dir;
  std::string synth;
  int count = 64;
  int bars = 16;
  uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--midi", midi_dir, "folder of .mid files");
    app->add_option("--synth", synth, "synthetic corpus: a, b or mix")->check(CLI::IsMember({"a", "b", "mix"}));
    app->add_option("--count", count, "synthetic songs");
    app->add_option("--song-bars", bars, "bars per synthetic song");
    app->add_option("--seed", seed, "seed");
  }

  std::vector<midi::Score> load() const {
    std::vector<midi::Score> out;
    if (!midi_dir.empty()) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(midi_dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".mid" || ext == ".midi")) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      int skipped = 0;
      for (const auto& f : files) {
        try {
          out.push_back(midi::read_midi_file(f));
        } catch (const std::exception& e) {
          std::fprintf(stderr, "skip %s: %s\n", f.c_str(), e.what());
          ++skipped;
        }
      }
      std::fprintf(stderr, "read %zu MIDI files (%d skipped)\n", out.size(), skipped);
    } else if (synth == "a" || synth == "b") {
      out = synth::make_corpus(synth == "a" ? synth::style_a() : synth::style_b(), count, bars, seed);
    } else if (synth == "mix") {
      out = synth::make_corpus(synth::style_a(), count / 2, bars, seed);
      auto b = synth::make_corpus(synth::style_b(), count - count / 2, bars, seed + 1);
      out.insert(out.end(), b.begin(), b.end());
    } else {
      throw CLI::ValidationError("corpus", "give --midi DIR or --synth a|b|mix");
    }
    if (out.empty()) throw std::runtime_error("empty corpus");
    return out;
  }
};

// Example shards: JSON lines {"ids": [...], "mask": "0011.."} plus manifest.json.
void write_shards(const fs::path& dir, const std::vector<train::Example>& ex, const tok::Vocabulary& vocab,
                  std::size_t per_shard, const json& info) {
  fs::create_directories(dir);
  json shards = json::array();
  for (std::size_t s = 0; s * per_shard < ex.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "shard-%05zu.jsonl", s);
    std::ofstream out(dir / name);
    for (std::size_t i = s * per_shard; i < std::min(ex.size(), (s + 1) * per_shard); ++i) {
      std::string mask(ex[i].mask.size(), '0');
      for (std::size_t t = 0; t < mask.size(); ++t)
        if (ex[i].mask[t]) mask[t] = '1';
      out << json{{"ids", ex[i].ids}, {"mask", mask}}.dump() << '\n';
    }
    shards.push_back(name);
  }
  json m = info;
  m["vocab_hash"] = vocab.hash();
  m["vocab_size"] = vocab.size();
  m["examples"] = ex.size();
  m["shards"] = shards;
  write_text(dir / "manifest.json", m.dump(2));
}

std::vector<train::Example> read_shards(const fs::path& dir, const tok::Vocabulary& vocab) {
  const auto m = json::parse(read_text(dir / "manifest.json"));
  if (m["vocab_hash"].get<uint64_t>() != vocab.hash())
    throw std::runtime_error("dataset was built with a different vocabulary");
  std::vector<train::Example> out;
  for (const auto& s : m["shards"]) {
    std::ifstream in(dir / s.get<std::string>());
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      train::Example e;
      e.ids = j["ids"].get<std::vector<int>>();
      for (char c : j["mask"].get<std::string>()) e.mask.push_back(c == '1');
      out.push_back(std::move(e));
    }
  }
  if (out.size() != m["examples"].get<std::size_t>()) throw std::runtime_error("dataset shards are incomplete");
  return out;
}

model::ModelConfig preset(const std::string& name, int vocab_size) {
  model::ModelConfig c = model::ModelConfig::paper();
  if (name == "tiny") {
    c.n_layers = 2;
    c.d_model = 64;
    c.head_size = 32;
    c.d_ffn = 224;
  } else if (name == "small") {
    c.n_layers = 4;
    c.d_model = 128;
    c.head_size = 64;
    c.d_ffn = 448;
  } else if (name != "paper") {
    c = model::config_from_json(read_text(name));
  }
  c.vocab_size = vocab_size;
  c.check();
  return c;
}

struct SamplerArgs {
  sample::SamplerConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--temperature", cfg.temperature);
    app->add_option("--repetition-penalty", cfg.repetition_penalty);
    app->add_option("--top-k", cfg.top_k);
    app->add_option("--top-p", cfg.top_p);
    app->add_option("--sample-seed", cfg.seed);
    app->add_option("--max-tokens", cfg.max_tokens);
  }
};

std::string checkpoint_default() {
  const char* d = std::getenv("MRWKV_CHECKPOINT_DIR");
  return d ? d : "";
}

service::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIDI infilling with RWKV-7: tokenizer, training, infilling, evaluation and service"};
  app.require_subcommand(1);

  // tokenizer
  auto* tokc = app.add_subcommand("tokenizer", "learn a BPE vocabulary over REMI tokens");
  CorpusArgs tok_corpus;
  tok_corpus.add(tokc);
  std::size_t vocab_size = 16000;
  std::string vocab_out = "vocab.json";
  tokc->add_option("--vocab-size", vocab_size, "target vocabulary size");
  tokc->add_option("--out", vocab_out, "output vocabulary");

  // dataset
  auto* datc = app.add_subcommand("dataset", "build Bar-Fill training shards");
  CorpusArgs dat_corpus;
  dat_corpus.add(datc);
  std::string dat_vocab, dat_out = "data";
  std::size_t per_score = 4, per_shard = 1024, seq_budget = 2048;
  datc->add_option("--vocab", dat_vocab, "vocabulary")->required();
  datc->add_option("--out", dat_out, "output folder");
  datc->add_option("--per-score", per_score, "examples drawn per score");
  datc->add_option("--per-shard", per_shard, "examples per shard");
  datc->add_option("--seq-budget", seq_budget, "token budget per example");
  std::string dat_export;
  datc->add_option("--export-midi", dat_export, "also write the corpus scores as .mid files here");

  // train
  auto* trc = app.add_subcommand("train", "pretrain a model");
  std::string tr_data, tr_vocab, tr_out = "checkpoint", tr_preset = "paper";
  auto tr_cfg = train::TrainConfig::defaults(train::Mode::Pretrain);
  double tr_budget = 0;
  std::string tr_log;
  trc->add_option("--data", tr_data, "dataset folder")->required();
  trc->add_option("--vocab", tr_vocab, "vocabulary")->required();
  trc->add_option("--out", tr_out, "checkpoint folder");
  trc->add_option("--preset", tr_preset, "paper, small, tiny or a config JSON file");
  trc->add_option("--epochs", tr_cfg.epochs);
  trc->add_option("--lr", tr_cfg.lr);
  trc->add_option("--weight-decay", tr_cfg.weight_decay);
  trc->add_option("--batch", tr_cfg.batch_size);
  trc->add_option("--seq-len", tr_cfg.seq_len);
  trc->add_option("--seed", tr_cfg.seed);
  trc->add_option("--time-budget", tr_budget, "seconds, 0 for none");
  trc->add_option("--log", tr_log, "JSONL training log");

  // finetune
  auto* ftc = app.add_subcommand("finetune", "state tuning or LoRA on a pretrained checkpoint");
  std::string ft_ckpt = checkpoint_default(), ft_data, ft_mode = "state", ft_log;
  int ft_epochs = 0;
  double ft_lr = 0, ft_budget = 0;
  int ft_rank = 4;
  uint64_t ft_seed = 42;
  ftc->add_option("--checkpoint", ft_ckpt, "checkpoint folder (written in place)");
  ftc->add_option("--data", ft_data, "dataset folder")->required();
  ftc->add_option("--mode", ft_mode)->check(CLI::IsMember({"state", "lora"}));
  ftc->add_option("--epochs", ft_epochs, "0 keeps the mode default");
  ftc->add_option("--lr", ft_lr, "0 keeps the mode default");
  ftc->add_option("--rank", ft_rank, "LoRA rank");
  ftc->add_option("--seed", ft_seed);
  ftc->add_option("--time-budget", ft_budget);
  ftc->add_option("--log", ft_log);

  // infill
  auto* inc = app.add_subcommand("infill", "regenerate bars of one track");
  std::string in_ckpt = checkpoint_default(), in_variant = "auto", in_midi, in_out = "infilled.mid";
  harness::InfillRequest in_req;
  SamplerArgs in_sampler;
  int in_context = -1;
  inc->add_option("--checkpoint", in_ckpt);
  inc->add_option("--variant", in_variant, "base, state, lora or auto");
  inc->add_option("--midi", in_midi, "input MIDI")->required();
  inc->add_option("--out", in_out, "output MIDI");
  inc->add_option("--track", in_req.track);
  inc->add_option("--start", in_req.start, "first bar to infill")->required();
  inc->add_option("--bars", in_req.n, "bars to infill");
  inc->add_option("--context", in_context, "context bars per side (default 4N)");
  in_sampler.add(inc);

  // eval
  auto* evc = app.add_subcommand("eval", "objective metrics");
  std::string ev_pairs, ev_report = "report.json", ev_ckpt = checkpoint_default(), ev_variant = "auto";
  CorpusArgs ev_corpus;
  std::size_t ev_bars = 2, ev_threads = 1;
  SamplerArgs ev_sampler;
  int ev_groove = 0;
  evc->add_option("--pairs", ev_pairs, "folder with pairs.json listing original/infilled files and regions");
  evc->add_option("--report", ev_report, "output report");
  evc->add_option("--checkpoint", ev_ckpt, "model to evaluate when --pairs is not given");
  evc->add_option("--variant", ev_variant);
  evc->add_option("--bars", ev_bars, "N of the task (context 4N)")->check(CLI::IsMember({2, 4, 8}));
  evc->add_option("--threads", ev_threads);
  evc->add_option("--groove-dim", ev_groove, "0: tokenizer grid, 16: compatibility grid");
  ev_corpus.add(evc);
  ev_sampler.add(evc);

  // ablate
  auto* abc = app.add_subcommand("ablate", "one-at-a-time sampler ablation");
  std::string ab_ckpt = checkpoint_default(), ab_variant = "auto", ab_out = "ablation.json";
  CorpusArgs ab_corpus;
  std::size_t ab_bars = 2, ab_threads = 1;
  abc->add_option("--checkpoint", ab_ckpt);
  abc->add_option("--variant", ab_variant);
  abc->add_option("--out", ab_out);
  abc->add_option("--bars", ab_bars)->check(CLI::IsMember({2, 4, 8}));
  abc->add_option("--threads", ab_threads);
  ab_corpus.add(abc);

  // serve
  auto* svc = app.add_subcommand("serve", "HTTP service");
  auto sv_cfg = service::ServiceConfig::from_env();
  std::string sv_dir = sv_cfg.checkpoint_dir.string();
  svc->add_option("--checkpoint", sv_dir, "checkpoint folder (default $MRWKV_CHECKPOINT_DIR)");
  svc->add_option("--variant", sv_cfg.variant);
  svc->add_option("--host", sv_cfg.host);
  svc->add_option("--port", sv_cfg.port);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tokc->parsed()) {
      const auto scores = tok_corpus.load();
      const tok::RemiTokenizer tk;
      std::vector<std::vector<int>> corpus;
      for (const auto& s : scores)
        for (auto& t : tk.encode_base(s)) corpus.push_back(std::move(t));
      const auto vocab = tok::train_bpe(corpus, vocab_size);
      tok::save_vocabulary(vocab_out, vocab);
      std::fprintf(stderr, "vocabulary %zu tokens (%zu merges)%s -> %s\n", vocab.size(), vocab.merges().size(),
                   vocab.exhausted ? ", no more pairs to merge" : "", vocab_out.c_str());
    } else if (datc->parsed()) {
      const auto vocab = tok::load_vocabulary(dat_vocab);
      const tok::RemiTokenizer tk(vocab.config());
      auto scores = dat_corpus.load();
      if (!dat_export.empty()) {
        fs::create_directories(dat_export);
        for (std::size_t i = 0; i < scores.size(); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "song-%04zu.mid", i);
          midi::write_midi_file(fs::path(dat_export) / name, scores[i]);
        }
      }
      prompt::ExampleConfig ec;
      ec.seq_budget = seq_budget;
      std::vector<midi::Score> kept;
      for (auto& s : scores)
        if (prompt::passes_corpus_filter(tk, s, ec)) kept.push_back(std::move(s));
      std::fprintf(stderr, "%zu of %zu scores pass the corpus filter\n", kept.size(), scores.size());
      const auto ex = harness::make_examples(tk, vocab, kept, per_score, dat_corpus.seed, ec);
      write_shards(dat_out, ex, vocab, per_shard,
                   {{"seed", dat_corpus.seed}, {"per_score", per_score}, {"seq_budget", seq_budget},
                    {"scores", kept.size()}});
      std::fprintf(stderr, "%zu examples -> %s\n", ex.size(), dat_out.c_str());
    } else if (trc->parsed()) {
      const auto vocab = tok::load_vocabulary(tr_vocab);
      const auto data = read_shards(tr_data, vocab);
      model::Parameters<double> p(preset(tr_preset, static_cast<int>(vocab.size())));
      model::init_parameters(p, tr_cfg.seed);
      if (tr_budget > 0) tr_cfg.time_budget = tr_budget;
      tr_cfg.log_path = tr_log;
      std::fprintf(stderr, "model %zu parameters, %zu examples\n", p.count(), data.size());
      const auto r = train::pretrain(p, train::fixed_source(data), tr_cfg);
      harness::save_bundle(tr_out, vocab, p);
      std::fprintf(stderr, "%zu steps, %d epochs%s%s, final loss %.4f -> %s\n", r.steps, r.epochs_done,
                   r.budget_hit ? ", time budget hit" : "", r.diverged ? ", diverged" : "",
                   r.log.empty() ? 0.0 : r.log.back().loss, tr_out.c_str());
    } else if (ftc->parsed()) {
      if (ft_ckpt.empty()) throw std::runtime_error("no checkpoint (use --checkpoint or MRWKV_CHECKPOINT_DIR)");
      const auto vocab = tok::load_vocabulary(fs::path(ft_ckpt) / "vocab.json");
      const auto p = model::parameters_from<double>(model::load_checkpoint(fs::path(ft_ckpt) / "model.ckpt"));
      const auto data = read_shards(ft_data, vocab);
      const auto mode = ft_mode == "state" ? train::Mode::State : train::Mode::Lora;
      auto cfg = train::TrainConfig::defaults(mode);
      if (ft_epochs > 0) cfg.epochs = ft_epochs;
      if (ft_lr > 0) cfg.lr = ft_lr;
      if (ft_budget > 0) cfg.time_budget = ft_budget;
      cfg.seed = ft_seed;
      cfg.lora_rank = ft_rank;
      cfg.lora_alpha = ft_rank;
      cfg.log_path = ft_log;
      train::TrainResult r;
      if (mode == train::Mode::State) {
        model::ModelState<double> st(p.config());
        r = train::state_tune(p, st, train::fixed_source(data), cfg);
        model::save_checkpoint(fs::path(ft_ckpt) / "state.ckpt", model::to_checkpoint(st));
      } else {
        auto lora = model::make_lora<double>(p.layout(), ft_rank, ft_rank, ft_seed);
        r = train::lora_tune(p, lora, train::fixed_source(data), cfg);
        model::save_checkpoint(fs::path(ft_ckpt) / "lora.ckpt", model::to_checkpoint(lora, p.layout()));
      }
      std::fprintf(stderr, "%s tuning: %zu steps, final loss %.4f\n", ft_mode.c_str(), r.steps,
                   r.log.empty() ? 0.0 : r.log.back().loss);
    } else if (inc->parsed()) {
      if (in_ckpt.empty()) throw std::runtime_error("no checkpoint (use --checkpoint or MRWKV_CHECKPOINT_DIR)");
      const auto b = harness::load_bundle(in_ckpt, in_variant);
      const auto score = midi::read_midi_file(in_midi);
      in_req.context = in_context < 0 ? 4 * in_req.n : static_cast<std::size_t>(in_context);
      in_req.sampler = in_sampler.cfg;
      const auto out = harness::infill_score(b, score, in_req);
      midi::write_midi_file(in_out, out.score);
      std::fprintf(stderr, "%zu bars, %zu prompt tokens, %zu generated, %.2fs -> %s\n", out.generation.bars,
                   out.prompt_tokens, out.generation.tokens.size(), out.seconds, in_out.c_str());
    } else if (evc->parsed()) {
      metrics::EvalOptions opt;
      opt.groove_dim = ev_groove;
      metrics::MetricReport report;
      if (!ev_pairs.empty()) {
        const tok::RemiTokenizer tk;
        const auto list = json::parse(read_text(fs::path(ev_pairs) / "pairs.json"));
        std::vector<metrics::ExampleMetrics> ex;
        std::size_t failures = 0;
        for (const auto& e : list) {
          try {
            const auto o = midi::read_midi_file(fs::path(ev_pairs) / e.at("original").get<std::string>());
            const auto i = midi::read_midi_file(fs::path(ev_pairs) / e.at("infilled").get<std::string>());
            ex.push_back(metrics::evaluate_example(tk, o, i, e.value("track", 0), e.at("start_bar").get<std::size_t>(),
                                                   e.at("n_bars").get<std::size_t>(), opt));
          } catch (const std::exception& err) {
            std::fprintf(stderr, "pair skipped: %s\n", err.what());
            ++failures;
          }
        }
        report = metrics::aggregate(std::move(ex));
        report.failures = failures;
      } else {
        if (ev_ckpt.empty()) throw std::runtime_error("give --pairs or a checkpoint");
        const auto b = harness::load_bundle(ev_ckpt, ev_variant);
        harness::EvalConfig cfg;
        cfg.task = harness::make_task(ev_bars);
        cfg.sampler = ev_sampler.cfg;
        cfg.seed = ev_corpus.seed;
        cfg.threads = ev_threads;
        cfg.metric_options = opt;
        const auto scores = ev_corpus.load();
        report = harness::run_objective_eval(b.tk, harness::model_infiller(b), scores, cfg);
      }
      write_text(ev_report, metrics::report_to_json(report));
      std::fprintf(stderr, "CP %.4f  GS %.4f  PCHE %.4f  F1 %.4f  (%zu examples, %zu failures) -> %s\n",
                   report.cp.mean, report.gs.mean, report.pche.mean, report.f1.mean, report.examples.size(),
                   report.failures, ev_report.c_str());
    } else if (abc->parsed()) {
      if (ab_ckpt.empty()) throw std::runtime_error("no checkpoint (use --checkpoint or MRWKV_CHECKPOINT_DIR)");
      const auto b = harness::load_bundle(ab_ckpt, ab_variant);
      harness::EvalConfig cfg;
      cfg.task = harness::make_task(ab_bars);
      cfg.seed = ab_corpus.seed;
      cfg.threads = ab_threads;
      const auto scores = ab_corpus.load();
      const auto res = harness::run_sampling_ablation(b, scores, cfg);
      write_text(ab_out, harness::ablation_to_json(res));
      for (const auto& r : res)
        std::fprintf(stderr, "%-22s CP %.4f GS %.4f PCHE %.4f F1 %.4f\n", r.run.name.c_str(), r.report.cp.mean,
                     r.report.gs.mean, r.report.pche.mean, r.report.f1.mean);
    } else if (svc->parsed()) {
      sv_cfg.checkpoint_dir = sv_dir;
      if (sv_dir.empty()) throw std::runtime_error("no checkpoint (use --checkpoint or MRWKV_CHECKPOINT_DIR)");
      service::Service s(sv_cfg);
      g_service = &s;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      s.load_async();
      std::fprintf(stderr, "listening on %s:%d (model loading from %s)\n", sv_cfg.host.c_str(), sv_cfg.port,
                   sv_dir.c_str());
      s.run();
      g_service = nullptr;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
