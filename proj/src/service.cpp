#include "mrwkv/service.hpp"

#include <openssl/evp.h>

#include <cstdlib>

#include "httplib.h"
#include "json.hpp"

namespace mrwkv::service {

using nlohmann::json;

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  if (s.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  std::vector<uint8_t> out(s.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0) throw std::invalid_argument("invalid base64");
  // DecodeBlock keeps the bytes standing for '=' padding.
  std::size_t pad = 0;
  if (!s.empty() && s.back() == '=') ++pad;
  if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig c;
  if (const char* d = std::getenv("MRWKV_CHECKPOINT_DIR")) c.checkpoint_dir = d;
  return c;
}

namespace {

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
};

[[noreturn]] void bad(const std::string& msg) { throw HttpError(400, msg); }

Response json_response(int status, const json& j) { return {status, j.dump(), "application/json"}; }
Response error_response(int status, const std::string& msg) { return json_response(status, {{"error", msg}}); }

json parse_body(const std::string& body) {
  try {
    auto j = json::parse(body);
    if (!j.is_object()) bad("request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    bad(std::string("malformed JSON: ") + e.what());
  }
}

int64_t get_int(const json& j, const char* key, std::optional<int64_t> def, int64_t lo, int64_t hi) {
  if (!j.contains(key) || j[key].is_null()) {
    if (def) return *def;
    bad(std::string("missing field '") + key + "'");
  }
  if (!j[key].is_number_integer()) bad(std::string("field '") + key + "' must be an integer");
  const auto v = j[key].get<int64_t>();
  if (v < lo || v > hi)
    bad(std::string("field '") + key + "' must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return v;
}

double get_num(const json& j, const char* key, double def) {
  if (!j.contains(key) || j[key].is_null()) return def;
  if (!j[key].is_number()) bad(std::string("field '") + key + "' must be a number");
  return j[key].get<double>();
}

midi::Score get_score(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) bad(std::string("field '") + key + "' must be a base64 string");
  std::vector<uint8_t> bytes;
  try {
    bytes = base64_decode(j[key].get<std::string>());
  } catch (const std::invalid_argument& e) {
    bad(std::string("field '") + key + "': " + e.what());
  }
  try {
    auto s = midi::read_midi(bytes);
    midi::validate(s);
    return s;
  } catch (const std::exception& e) {
    throw HttpError(422, std::string("unreadable MIDI in '") + key + "': " + e.what());
  }
}

json controls_json(const prompt::AttributeControls& c) {
  return {{"density", c.density},
          {"dur_flags", std::vector<bool>(c.dur_flags.begin(), c.dur_flags.end())},
          {"poly_min", c.poly_min},
          {"poly_max", c.poly_max}};
}

// Region fields shared by every score endpoint.
struct Region {
  std::size_t track, start, n;
};

Region get_region(const json& j, const tok::RemiTokenizer& tk, const midi::Score& score) {
  Region r;
  r.track = static_cast<std::size_t>(get_int(j, "track", 0, 0, 1 << 16));
  r.start = static_cast<std::size_t>(get_int(j, "start_bar", std::nullopt, 0, 1 << 20));
  r.n = static_cast<std::size_t>(get_int(j, "n_bars", std::nullopt, 1, 64));
  if (r.track >= score.tracks.size())
    bad("track " + std::to_string(r.track) + " out of range (" + std::to_string(score.tracks.size()) + " tracks)");
  const auto bars = prompt::prompt_bars(tk, score);
  if (r.start + r.n > bars.size())
    bad("bars " + std::to_string(r.start) + ".." + std::to_string(r.start + r.n - 1) + " outside the score (" +
        std::to_string(bars.size()) + " bars)");
  return r;
}

std::vector<std::optional<prompt::AttributeControls>> original_controls(const tok::RemiTokenizer& tk,
                                                                        const midi::Score& score, const Region& r) {
  const auto bars = prompt::prompt_bars(tk, score);
  std::vector<std::optional<prompt::AttributeControls>> out;
  for (std::size_t i = 0; i < r.n; ++i) {
    const auto notes = prompt::notes_in_bar(tk, score, r.track, bars[r.start + i]);
    if (notes.empty())
      out.push_back(std::nullopt);
    else
      out.push_back(prompt::compute_controls(notes, score.ticks_per_quarter));
  }
  return out;
}

// Per bar: fields given by the user override the ones computed from the
// original; a bar that is empty in the original needs every field.
std::vector<std::optional<prompt::AttributeControls>> merge_controls(
    const json& j, const std::vector<std::optional<prompt::AttributeControls>>& computed,
    const tok::BaseVocab& vocab) {
  std::vector<std::optional<prompt::AttributeControls>> out(computed.size());
  const bool given = j.contains("controls") && !j["controls"].is_null();
  if (given && (!j["controls"].is_array() || j["controls"].size() != computed.size()))
    bad("'controls' must be an array with one entry (object or null) per infilled bar");
  for (std::size_t i = 0; i < computed.size(); ++i) {
    const json c = given ? j["controls"][i] : json(nullptr);
    if (!c.is_null() && !c.is_object()) bad("controls[" + std::to_string(i) + "] must be an object or null");
    const bool full = c.is_object() && c.contains("density") && c.contains("dur_flags") && c.contains("poly_min") &&
                      c.contains("poly_max");
    if (!computed[i] && !full)
      bad("bar " + std::to_string(i) + " of the region is empty in the original; give all four control fields");
    prompt::AttributeControls a = computed[i] ? *computed[i] : prompt::AttributeControls{};
    if (c.is_object()) {
      a.density = static_cast<int>(get_int(c, "density", a.density, 1, prompt::AttributeControls::kDensityOver));
      a.poly_min = static_cast<int>(get_int(c, "poly_min", a.poly_min, 1, 64));
      a.poly_max = static_cast<int>(get_int(c, "poly_max", a.poly_max, 1, 64));
      if (c.contains("dur_flags")) {
        const auto& f = c["dur_flags"];
        if (!f.is_array() || f.size() != tok::kDurationClasses)
          bad("dur_flags must be an array of " + std::to_string(tok::kDurationClasses) + " booleans");
        for (std::size_t k = 0; k < tok::kDurationClasses; ++k) {
          if (!f[k].is_boolean()) bad("dur_flags entries must be booleans");
          a.dur_flags[k] = f[k].get<bool>();
        }
      }
    }
    try {
      prompt::control_tokens(a, vocab);
    } catch (const std::exception& e) {
      bad("controls[" + std::to_string(i) + "]: " + e.what());
    }
    out[i] = a;
  }
  return out;
}

sample::SamplerConfig get_sampler(const json& j) {
  sample::SamplerConfig c;
  if (!j.contains("sampler") || j["sampler"].is_null()) return c;
  const auto& s = j["sampler"];
  if (!s.is_object()) bad("'sampler' must be an object");
  c.temperature = get_num(s, "temperature", c.temperature);
  c.repetition_penalty = get_num(s, "repetition_penalty", c.repetition_penalty);
  c.top_p = get_num(s, "top_p", c.top_p);
  c.top_k = static_cast<int>(get_int(s, "top_k", c.top_k, 0, 1 << 20));
  c.seed = static_cast<uint64_t>(get_int(s, "seed", static_cast<int64_t>(c.seed), 0, INT64_MAX));
  c.max_tokens = static_cast<std::size_t>(get_int(s, "max_tokens", static_cast<int64_t>(c.max_tokens), 1, 1 << 16));
  if (s.contains("greedy")) c.greedy = s["greedy"].get<bool>();
  try {
    c.check();
  } catch (const std::exception& e) {
    bad(std::string("sampler: ") + e.what());
  }
  return c;
}

json optional_controls_json(const std::vector<std::optional<prompt::AttributeControls>>& v) {
  json a = json::array();
  for (const auto& c : v) a.push_back(c ? controls_json(*c) : json(nullptr));
  return a;
}

}  // namespace

// --- Service -----------------------------------------------------------------

struct Service::Server {
  httplib::Server http;
};

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

Service::~Service() {
  stop();
  if (loader_.joinable()) loader_.join();
}

void Service::load() {
  try {
    auto b = std::make_shared<const harness::Bundle>(harness::load_bundle(cfg_.checkpoint_dir, cfg_.variant));
    set_bundle(std::move(b));
  } catch (const std::exception& e) {
    std::lock_guard lk(mu_);
    load_error_ = e.what();
    throw;
  }
}

void Service::load_async() {
  if (loader_.joinable()) loader_.join();
  loader_ = std::thread([this] {
    try {
      load();
    } catch (const std::exception&) {
      // Reported through load_error() and 503 responses.
    }
  });
}

void Service::set_bundle(std::shared_ptr<const harness::Bundle> bundle) {
  std::lock_guard lk(mu_);
  bundle_ = std::move(bundle);
  load_error_.clear();
  ready_ = bundle_ != nullptr;
}

std::string Service::load_error() const {
  std::lock_guard lk(mu_);
  return load_error_;
}

Response Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
  static const std::map<std::string, std::string> routes{
      {"/health", "GET"}, {"/model", "GET"}, {"/infill", "POST"}, {"/controls", "POST"}, {"/metrics", "POST"}};
  const auto route = routes.find(path);
  if (route == routes.end()) return error_response(404, "no such endpoint: " + path);
  if (route->second != method) return error_response(405, path + " expects " + route->second);

  std::shared_ptr<const harness::Bundle> bundle;
  {
    std::lock_guard lk(mu_);
    bundle = bundle_;
    if (!bundle) {
      const std::string why = load_error_.empty() ? "model is loading" : "model failed to load: " + load_error_;
      return error_response(503, why);
    }
  }
  const auto& b = *bundle;
  try {
    if (path == "/health") return {200, "ok", "text/plain"};
    if (path == "/model") {
      return json_response(200, {{"config", json::parse(model::config_to_json(b.params.config()))},
                                 {"variant", b.variant},
                                 {"vocab_size", b.vocab.size()},
                                 {"vocab_hash", b.vocab.hash()},
                                 {"weights_hash", b.weights_hash},
                                 {"parameters", model::count_parameters(b.params.config())}});
    }
    const json j = parse_body(body);
    if (path == "/controls") {
      const auto score = get_score(j, "midi");
      const auto r = get_region(j, b.tk, score);
      return json_response(200, {{"controls", optional_controls_json(original_controls(b.tk, score, r))}});
    }
    if (path == "/metrics") {
      const auto original = get_score(j, "original");
      const auto infilled = get_score(j, "infilled");
      const auto r = get_region(j, b.tk, original);
      if (r.track >= infilled.tracks.size()) bad("track out of range in 'infilled'");
      metrics::EvalOptions opt;
      opt.groove_dim = static_cast<int>(get_int(j, "groove_dim", 0, 0, 1024));
      opt.f1_duration = j.value("f1_duration", false);
      auto report = metrics::aggregate({metrics::evaluate_example(b.tk, original, infilled, r.track, r.start, r.n, opt)});
      const auto requested = merge_controls(j, original_controls(b.tk, original, r), b.vocab.base());
      std::vector<prompt::AttributeControls> req;
      for (const auto& c : requested) req.push_back(*c);
      report.adherence = metrics::attribute_adherence(
          req, metrics::region_bars(b.tk, infilled, r.track, r.start, r.n), infilled.ticks_per_quarter);
      return {200, metrics::report_to_json(report), "application/json"};
    }
    // /infill
    const auto score = get_score(j, "midi");
    const auto r = get_region(j, b.tk, score);
    harness::InfillRequest req;
    req.track = r.track;
    req.start = r.start;
    req.n = r.n;
    req.context = static_cast<std::size_t>(get_int(j, "context_bars", static_cast<int64_t>(4 * r.n), 0, 1 << 12));
    req.controls = merge_controls(j, original_controls(b.tk, score, r), b.vocab.base());
    req.sampler = get_sampler(j);
    harness::InfillOutcome out;
    try {
      out = harness::infill_score(b, score, req);
    } catch (const harness::HarnessError& e) {
      // Truncation is the only failure left after validation.
      return error_response(500, e.what());
    }
    std::vector<prompt::AttributeControls> requested = out.requested;
    json reqd = json::array();
    for (const auto& c : requested) reqd.push_back(controls_json(c));
    return json_response(200, {{"midi", base64_encode(midi::write_midi(out.score))},
                               {"bars", out.generation.bars},
                               {"controls_requested", reqd},
                               {"controls_realized", optional_controls_json(out.realized)},
                               {"prompt_tokens", out.prompt_tokens},
                               {"generated_tokens", out.generation.tokens.size()},
                               {"end_retries", out.generation.end_retries},
                               {"seed", req.sampler.seed},
                               {"seconds", out.seconds}});
  } catch (const HttpError& e) {
    return error_response(e.status, e.what());
  } catch (const std::invalid_argument& e) {
    return error_response(400, e.what());
  } catch (const json::exception& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

int Service::bind_server() {
  if (server_) throw std::logic_error("service already started");
  server_ = std::make_unique<Server>();
  auto& http = server_->http;
  http.set_payload_max_length(cfg_.max_body_bytes);
  auto bind = [this](const std::string& method) {
    return [this, method](const httplib::Request& req, httplib::Response& res) {
      const auto r = handle(method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
  };
  for (const char* p : {"/health", "/model", "/infill", "/controls", "/metrics"}) {
    http.Get(p, bind("GET"));
    http.Post(p, bind("POST"));
  }
  const int port = cfg_.port == 0 ? http.bind_to_any_port(cfg_.host) : http.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
  if (port < 0) throw std::runtime_error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return port;
}

int Service::start() {
  const int port = bind_server();
  listener_ = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  return port;
}

void Service::run() {
  bind_server();
  server_->http.listen_after_bind();
}

void Service::stop() {
  if (server_) server_->http.stop();
  if (listener_.joinable()) listener_.join();
}

}  // namespace mrwkv::service
