#include "clickrefine/service/service.hpp"

#include <openssl/rand.h>

#include <cstring>

#include "clickrefine/imageio/png.hpp"
#include "httplib.h"

namespace clickrefine {
namespace {

std::string random_id() {
  unsigned char bytes[16];
  if (RAND_bytes(bytes, sizeof bytes) != 1) throw std::runtime_error("no entropy for session id");
  static const char* hex = "0123456789abcdef";
  std::string id;
  for (unsigned char b : bytes) {
    id += hex[b >> 4];
    id += hex[b & 15];
  }
  return id;
}

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}

nlohmann::json clicks_json(const std::vector<Click>& clicks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Click& c : clicks) arr.push_back(c);
  return arr;
}

}  // namespace

nlohmann::json ClickResponse::to_json() const {
  nlohmann::json j{{"round", round}, {"mask_png", mask_png}, {"prob_png", prob_png}, {"clicks", clicks_json(clicks)}};
  if (iou) j["iou"] = *iou;
  return j;
}

SessionService::SessionService(std::shared_ptr<const Segmenter> segmenter, ServiceConfig config,
                               std::function<Clock::time_point()> now)
    : segmenter_(std::move(segmenter)), config_(config), now_(std::move(now)) {
  if (!segmenter_) throw ConfigError("session service needs a segmenter");
  config_.modulation.validate();
}

std::shared_ptr<SessionService::Session> SessionService::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown_session", "no session " + id);
  it->second->last_used = now_();
  return it->second;
}

std::string SessionService::create_session(const std::vector<std::uint8_t>& image_png,
                                           const std::optional<std::vector<std::uint8_t>>& gt_png) {
  evict_idle();
  auto s = std::make_shared<Session>();
  try {
    s->image = image_to_array(decode_png_rgb(image_png));
  } catch (const std::exception& e) {
    throw ServiceError(400, "decode_error", std::string("image: ") + e.what());
  }
  const std::size_t h = s->image.dim(2), w = s->image.dim(3);
  if (h > config_.max_side || w > config_.max_side) {
    throw ServiceError(413, "image_too_large",
                       "image is " + std::to_string(w) + "x" + std::to_string(h) + ", limit " +
                           std::to_string(config_.max_side));
  }
  if (gt_png) {
    try {
      s->gt = decode_mask_png(*gt_png);
    } catch (const std::exception& e) {
      throw ServiceError(400, "decode_error", std::string("gt: ") + e.what());
    }
    if (s->gt->dim(0) != h || s->gt->dim(1) != w) throw ServiceError(400, "bad_request", "gt size differs from image");
  }
  s->current = {Array({h, w}, 0.0f), Array({h, w}, 0.0f), {}};
  s->last_used = now_();
  std::lock_guard lock(mutex_);
  do {
    s->id = random_id();
  } while (sessions_.count(s->id));
  sessions_[s->id] = s;
  return s->id;
}

ClickResponse SessionService::apply_click(const std::string& id, int x, int y, ClickKind kind) {
  auto s = find(id);
  std::unique_lock op(s->op, std::try_to_lock);
  if (!op.owns_lock()) throw ServiceError(409, "session_busy", "another request is mutating this session");
  const std::size_t h = s->image.dim(2), w = s->image.dim(3);
  const Click click{x, y, kind, static_cast<int>(s->current.clicks.size()) + 1};
  try {
    validate_click(click, h, w);
  } catch (const std::exception& e) {
    throw ServiceError(400, "invalid_click", e.what());
  }
  Snapshot next = s->current;
  next.clicks.push_back(click);
  const Mask empty_gt({h, w}, 0);
  const Array prob = segmenter_->predict({s->image, s->current.prev, s->current.mod, next.clicks,
                                         s->gt ? *s->gt : empty_gt, 0});
  next.prev = prob;
  next.mod = modulate(prob, click, next.clicks, config_.modulation);

  ClickResponse r;
  const Mask mask = binarize(prob);
  r.round = next.clicks.size();
  r.mask_png = base64_encode(encode_mask_png(mask));
  r.prob_png = base64_encode(encode_prob_png(prob));
  if (s->gt) r.iou = iou(mask, *s->gt);
  r.clicks = next.clicks;

  s->history.push_back(std::move(s->current));
  s->current = std::move(next);
  return r;
}

nlohmann::json SessionService::undo_click(const std::string& id) {
  auto s = find(id);
  std::unique_lock op(s->op, std::try_to_lock);
  if (!op.owns_lock()) throw ServiceError(409, "session_busy", "another request is mutating this session");
  if (s->history.empty()) throw ServiceError(400, "nothing_to_undo", "no clicks to undo");
  s->current = std::move(s->history.back());
  s->history.pop_back();
  return {{"round", s->current.clicks.size()}, {"clicks", clicks_json(s->current.clicks)}};
}

nlohmann::json SessionService::state(const std::string& id) {
  auto s = find(id);
  std::lock_guard op(s->op);
  return {{"id", s->id},
          {"width", s->image.dim(3)},
          {"height", s->image.dim(2)},
          {"round", s->current.clicks.size()},
          {"clicks", clicks_json(s->current.clicks)},
          {"has_gt", s->gt.has_value()}};
}

std::vector<std::uint8_t> SessionService::mask_png(const std::string& id) {
  auto s = find(id);
  std::lock_guard op(s->op);
  return encode_mask_png(binarize(s->current.prev));
}

void SessionService::delete_session(const std::string& id) {
  std::lock_guard lock(mutex_);
  if (sessions_.erase(id) == 0) throw ServiceError(404, "unknown_session", "no session " + id);
}

std::uint64_t SessionService::state_checksum(const std::string& id) {
  auto s = find(id);
  std::lock_guard op(s->op);
  std::uint64_t h = 1469598103934665603ULL;
  fnv(h, s->current.prev.data(), s->current.prev.size() * sizeof(float));
  fnv(h, s->current.mod.data(), s->current.mod.size() * sizeof(float));
  for (const Click& c : s->current.clicks) {
    const int fields[4] = {c.x, c.y, static_cast<int>(c.kind), c.ordinal};
    fnv(h, fields, sizeof fields);
  }
  return h;
}

std::size_t SessionService::session_count() {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

std::size_t SessionService::evict_idle() {
  std::lock_guard lock(mutex_);
  const auto now = now_();
  std::size_t removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_used > config_.idle_ttl) {
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", code}, {"message", message}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception&) {
    throw ServiceError(400, "bad_request", "body is not valid JSON");
  }
}

template <typename Fn>
auto guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

HttpFrontend::HttpFrontend(SessionService& service, std::optional<std::filesystem::path> static_dir)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto& svc = service_;
  server_->Post("/sessions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    svc.evict_idle();
    const nlohmann::json body = parse_body(req);
    if (!body.is_object() || !body.contains("image") || !body["image"].is_string()) {
      throw ServiceError(400, "bad_request", "expected {\"image\": base64 PNG}");
    }
    auto decode = [](const nlohmann::json& v, const char* what) {
      try {
        return base64_decode(v.get<std::string>());
      } catch (const std::exception& e) {
        throw ServiceError(400, "decode_error", std::string(what) + ": " + e.what());
      }
    };
    std::optional<std::vector<std::uint8_t>> gt;
    if (body.contains("gt") && !body["gt"].is_null()) gt = decode(body["gt"], "gt");
    const std::string id = svc.create_session(decode(body["image"], "image"), gt);
    send_json(res, svc.state(id), 201);
  }));
  server_->Post(R"(/sessions/([0-9a-f]+)/clicks)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const nlohmann::json body = parse_body(req);
    Click c;
    try {
      c = body.get<Click>();
    } catch (const std::exception& e) {
      throw ServiceError(400, "bad_request", std::string("click: ") + e.what());
    }
    send_json(res, svc.apply_click(req.matches[1], c.x, c.y, c.kind).to_json());
  }));
  server_->Post(R"(/sessions/([0-9a-f]+)/undo)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.undo_click(req.matches[1]));
  }));
  server_->Get(R"(/sessions/([0-9a-f]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, svc.state(req.matches[1]));
  }));
  server_->Get(R"(/sessions/([0-9a-f]+)/mask\.png)",
               guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                 const auto png = svc.mask_png(req.matches[1]);
                 res.set_content(std::string(png.begin(), png.end()), "image/png");
               }));
  server_->Delete(R"(/sessions/([0-9a-f]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    svc.delete_session(req.matches[1]);
    res.status = 204;
  }));
  if (static_dir) {
    if (!std::filesystem::is_directory(*static_dir)) {
      throw ConfigError("static dir " + static_dir->string() + " is not a directory");
    }
    server_->set_mount_point("/", static_dir->string());
  }
}

HttpFrontend::~HttpFrontend() { stop(); }

bool HttpFrontend::listen(const std::string& host, int port) { return server_->listen(host, port); }

int HttpFrontend::start_background(const std::string& host) {
  const int port = server_->bind_to_any_port(host);
  if (port <= 0) throw std::runtime_error("could not bind a port on " + host);
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void HttpFrontend::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace clickrefine
