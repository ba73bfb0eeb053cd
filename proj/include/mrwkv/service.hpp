#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "mrwkv/harness.hpp"

namespace mrwkv::service {

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws std::invalid_argument on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

struct ServiceConfig {
  std::filesystem::path checkpoint_dir;  // defaults to $MRWKV_CHECKPOINT_DIR
  std::string variant = "auto";
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t max_body_bytes = 16 << 20;

  /// Config with checkpoint_dir taken from MRWKV_CHECKPOINT_DIR when set.
  static ServiceConfig from_env();
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// HTTP front end over one immutable model bundle. Requests share the
/// weights and nothing else: each /infill runs on its own copy of the
/// initial state with its own seeded sampler, so concurrent calls return
/// the same bytes as the same calls made one after another.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Loads the bundle from the checkpoint directory (blocking).
  void load();
  /// Loads in the background; requests get 503 until it finishes.
  void load_async();
  void set_bundle(std::shared_ptr<const harness::Bundle> bundle);
  bool ready() const { return ready_.load(); }
  /// Message of the last failed load, empty otherwise.
  std::string load_error() const;

  /// Routes one request. Errors map to 400 (bad request), 404, 405,
  /// 422 (unreadable MIDI) and 503 (model not loaded).
  Response handle(const std::string& method, const std::string& path, const std::string& body) const;

  /// Starts listening on a background thread; returns the bound port.
  int start();
  /// Serves on the calling thread until stop() is called from elsewhere.
  void run();
  void stop();

 private:
  struct Server;
  int bind_server();

  ServiceConfig cfg_;
  std::atomic<bool> ready_{false};
  mutable std::mutex mu_;
  std::shared_ptr<const harness::Bundle> bundle_;
  std::string load_error_;
  std::thread loader_, listener_;
  std::unique_ptr<Server> server_;
};

}  // namespace mrwkv::service
