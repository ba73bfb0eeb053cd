#include <future>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "mrwkv/service.hpp"
#include "tiny_bundle.hpp"

using namespace mrwkv;
using namespace mrwkv::service;
using nlohmann::json;

namespace {

testing::TinyBundle& fixture() {
  static testing::TinyBundle f;
  return f;
}

std::string midi_b64(const midi::Score& s) { return base64_encode(midi::write_midi(s)); }

midi::Score from_b64(const std::string& s) { return midi::read_midi(base64_decode(s)); }

std::shared_ptr<const harness::Bundle> bundle() {
  static auto b = std::make_shared<const harness::Bundle>(fixture().vocab, fixture().params);
  return b;
}

json infill_body(const midi::Score& s, std::size_t start, uint64_t seed) {
  return {{"midi", midi_b64(s)}, {"track", 0}, {"start_bar", start}, {"n_bars", 2}, {"sampler", {{"seed", seed}}}};
}

// Response without the timing field.
std::string strip_time(const std::string& body) {
  auto j = json::parse(body);
  j.erase("seconds");
  return j.dump();
}

}  // namespace

TEST_CASE("base64") {
  const std::string text = "foobar";
  for (std::size_t n = 0; n <= text.size(); ++n) {
    std::vector<uint8_t> b(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(n));
    CHECK(base64_decode(base64_encode(b)) == b);
  }
  const std::vector<uint8_t> fb(text.begin(), text.end());
  CHECK(base64_encode(fb) == "Zm9vYmFy");
  CHECK(base64_decode("Zm9vYg==") == std::vector<uint8_t>{'f', 'o', 'o', 'b'});
  CHECK_THROWS_AS(base64_decode("abc"), std::invalid_argument);
  CHECK_THROWS_AS(base64_decode("ab!d"), std::invalid_argument);
}

TEST_CASE("503 until loaded, then health and model") {
  ServiceConfig cfg;
  cfg.checkpoint_dir = "/nonexistent/mrwkv";
  Service s(cfg);
  CHECK(s.handle("GET", "/health", "").status == 503);
  CHECK_THROWS(s.load());
  CHECK_FALSE(s.load_error().empty());
  CHECK(s.handle("POST", "/infill", "{}").status == 503);

  cfg.checkpoint_dir = fixture().save("mrwkv_service_test");
  Service t(cfg);
  t.load_async();
  for (int i = 0; i < 500 && !t.ready(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  REQUIRE(t.ready());
  const auto h = t.handle("GET", "/health", "");
  CHECK(h.status == 200);
  CHECK(h.body == "ok");
  const auto m = json::parse(t.handle("GET", "/model", "").body);
  CHECK(m["variant"] == "base");
  CHECK(m["vocab_size"] == fixture().vocab.size());
  CHECK(m["vocab_hash"] == fixture().vocab.hash());
  CHECK(m["config"]["d_model"] == 32);
  CHECK(t.handle("GET", "/nope", "").status == 404);
  CHECK(t.handle("GET", "/infill", "").status == 405);
  std::filesystem::remove_all(cfg.checkpoint_dir);
}

TEST_CASE("controls endpoint delegates to compute_controls") {
  Service s(ServiceConfig{});
  s.set_bundle(bundle());
  const auto& score = fixture().songs[0];
  const json body{{"midi", midi_b64(score)}, {"track", 1}, {"start_bar", 3}, {"n_bars", 2}};
  const auto r = s.handle("POST", "/controls", body.dump());
  REQUIRE(r.status == 200);
  const auto j = json::parse(r.body);
  const auto sent = from_b64(body["midi"]);
  const auto want = prompt::region_controls(bundle()->tk, sent, 1, 3, 2);
  REQUIRE(j["controls"].size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(j["controls"][i]["density"] == want[i].density);
    CHECK(j["controls"][i]["poly_min"] == want[i].poly_min);
    CHECK(j["controls"][i]["poly_max"] == want[i].poly_max);
    for (std::size_t k = 0; k < tok::kDurationClasses; ++k)
      CHECK(j["controls"][i]["dur_flags"][k].get<bool>() == want[i].dur_flags[k]);
  }
}

TEST_CASE("infill changes only the requested bars") {
  Service s(ServiceConfig{});
  s.set_bundle(bundle());
  const auto& tk = bundle()->tk;
  for (std::size_t start : {2u, 7u, 12u}) {
    const auto body = infill_body(fixture().songs[2], start, start);
    const auto r = s.handle("POST", "/infill", body.dump());
    REQUIRE_MESSAGE(r.status == 200, r.body);
    const auto j = json::parse(r.body);
    CHECK(j["bars"] == 2);
    const auto in = from_b64(body["midi"]);
    const auto out = from_b64(j["midi"]);
    const auto bars = prompt::prompt_bars(tk, in);
    const int64_t r0 = bars[start].start, r1 = bars[start + 1].end;
    REQUIRE(in.tracks.size() == out.tracks.size());
    for (std::size_t t = 1; t < in.tracks.size(); ++t) CHECK(in.tracks[t] == out.tracks[t]);
    std::vector<midi::Note> a, b;
    for (const auto& n : in.tracks[0].notes)
      if (n.onset < r0 || n.onset >= r1) a.push_back(n);
    for (const auto& n : out.tracks[0].notes)
      if (n.onset < r0 || n.onset >= r1) b.push_back(n);
    CHECK(a == b);
    CHECK(in.tempo_map == out.tempo_map);
    CHECK(in.timesig_map == out.timesig_map);
  }
}

TEST_CASE("request errors") {
  Service s(ServiceConfig{});
  s.set_bundle(bundle());
  const auto& score = fixture().songs[0];
  auto status = [&](const json& j) { return s.handle("POST", "/infill", j.dump()).status; };
  CHECK(s.handle("POST", "/infill", "{not json").status == 400);
  CHECK(s.handle("POST", "/infill", "[1,2]").status == 400);
  auto body = infill_body(score, 2, 1);
  body.erase("start_bar");
  CHECK(status(body) == 400);
  body = infill_body(score, 500, 1);
  CHECK(status(body) == 400);
  body = infill_body(score, 2, 1);
  body["track"] = 7;
  CHECK(status(body) == 400);
  body = infill_body(score, 2, 1);
  body["controls"] = json::array({json{{"density", 40}}, nullptr});
  CHECK(status(body) == 400);
  body["controls"] = json::array({nullptr});
  CHECK(status(body) == 400);
  body["controls"] = json::array({json{{"poly_min", 4}, {"poly_max", 2}}, nullptr});
  CHECK(status(body) == 400);
  body = infill_body(score, 2, 1);
  body["sampler"]["temperature"] = 0;
  CHECK(status(body) == 400);
  body = infill_body(score, 2, 1);
  body["midi"] = "not base64!";
  CHECK(status(body) == 400);
  const std::string junk = "hello, this is not a MIDI file";
  body["midi"] = base64_encode(std::vector<uint8_t>(junk.begin(), junk.end()));
  CHECK(status(body) == 422);
  // Partial controls fill the remaining fields from the original.
  body = infill_body(score, 2, 1);
  body["controls"] = json::array({json{{"density", 5}}, nullptr});
  const auto r = s.handle("POST", "/infill", body.dump());
  REQUIRE(r.status == 200);
  const auto j = json::parse(r.body);
  CHECK(j["controls_requested"][0]["density"] == 5);
  const auto orig = prompt::region_controls(bundle()->tk, from_b64(infill_body(score, 2, 1)["midi"]), 0, 2, 2);
  CHECK(j["controls_requested"][0]["poly_max"] == orig[0].poly_max);
  CHECK(j["controls_requested"][1]["density"] == orig[1].density);
}

TEST_CASE("metrics endpoint") {
  Service s(ServiceConfig{});
  s.set_bundle(bundle());
  const auto b64 = midi_b64(fixture().songs[0]);
  const json body{{"original", b64}, {"infilled", b64}, {"track", 0}, {"start_bar", 4}, {"n_bars", 4}};
  const auto r = s.handle("POST", "/metrics", body.dump());
  REQUIRE(r.status == 200);
  const auto j = json::parse(r.body);
  CHECK(j["cp"]["mean"] == 1.0);
  CHECK(j["gs"]["mean"] == 1.0);
  CHECK(j["pche"]["mean"] == 0.0);
  CHECK(j["f1"]["mean"] == 1.0);
  CHECK(j["adherence"]["density_abs_diff"] == 0.0);
}

TEST_CASE("concurrent requests over HTTP equal serialized ones") {
  ServiceConfig cfg;
  cfg.port = 0;
  Service s(cfg);
  s.set_bundle(bundle());
  const int port = s.start();
  REQUIRE(port > 0);
  const std::vector<std::pair<std::size_t, uint64_t>> jobs{{2, 1}, {2, 2}, {6, 3}, {9, 4}, {2, 1}, {11, 5}};
  auto call = [&](std::size_t start, uint64_t seed) {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(120);
    const auto res = c.Post("/infill", infill_body(fixture().songs[3], start, seed).dump(), "application/json");
    REQUIRE(res);
    REQUIRE_MESSAGE(res->status == 200, res->body);
    return strip_time(res->body);
  };
  std::vector<std::string> serial;
  for (auto [st, sd] : jobs) serial.push_back(call(st, sd));
  std::vector<std::future<std::string>> fut;
  for (auto [st, sd] : jobs) fut.push_back(std::async(std::launch::async, call, st, sd));
  for (std::size_t i = 0; i < jobs.size(); ++i) CHECK(fut[i].get() == serial[i]);
  CHECK(serial[0] == serial[4]);
  CHECK(serial[0] != serial[1]);
  httplib::Client c("127.0.0.1", port);
  const auto h = c.Get("/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  s.stop();
}
