#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "clickrefine/eval/benchmark.hpp"
#include "clickrefine/modulation/modulation.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace clickrefine {

// Error with an HTTP status and a short machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ServiceConfig {
  std::size_t max_side = 2048;
  std::chrono::seconds idle_ttl{30 * 60};
  ModulationParams modulation;
};

struct ClickResponse {
  std::size_t round = 0;
  std::string mask_png;  // base64, 8-bit 0/255
  std::string prob_png;  // base64, 16-bit grayscale
  std::optional<double> iou;
  std::vector<Click> clicks;

  nlohmann::json to_json() const;
};

class SessionService {
 public:
  using Clock = std::chrono::steady_clock;

  SessionService(std::shared_ptr<const Segmenter> segmenter, ServiceConfig config = {},
                 std::function<Clock::time_point()> now = [] { return Clock::now(); });

  std::string create_session(const std::vector<std::uint8_t>& image_png,
                             const std::optional<std::vector<std::uint8_t>>& gt_png = std::nullopt);
  ClickResponse apply_click(const std::string& id, int x, int y, ClickKind kind);
  nlohmann::json undo_click(const std::string& id);
  nlohmann::json state(const std::string& id);
  std::vector<std::uint8_t> mask_png(const std::string& id);
  void delete_session(const std::string& id);

  // Hash of M_prev, M_mod and the click list.
  std::uint64_t state_checksum(const std::string& id);
  std::size_t session_count();
  // Drops sessions idle longer than the TTL; returns how many were removed.
  std::size_t evict_idle();

 private:
  struct Snapshot {
    Array prev, mod;
    std::vector<Click> clicks;
  };
  struct Session {
    std::string id;
    Array image;
    std::optional<Mask> gt;
    Snapshot current;
    std::vector<Snapshot> history;
    Clock::time_point last_used;
    std::mutex op;  // held for the duration of one mutation
  };

  std::shared_ptr<Session> find(const std::string& id);

  std::shared_ptr<const Segmenter> segmenter_;
  ServiceConfig config_;
  std::function<Clock::time_point()> now_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

// REST front end. Routes:
//   POST /sessions {"image": b64 png, "gt": b64 png?}
//   POST /sessions/{id}/clicks {"x", "y", "kind"}
//   POST /sessions/{id}/undo
//   GET  /sessions/{id}, GET /sessions/{id}/mask.png, DELETE /sessions/{id}
// plus static files from static_dir when given.
class HttpFrontend {
 public:
  HttpFrontend(SessionService& service, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~HttpFrontend();

  // Blocks until stop().
  bool listen(const std::string& host, int port);
  // Binds to a free port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  SessionService& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace clickrefine
