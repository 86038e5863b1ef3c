/*
 * Copyright (c) 2026, The gftgcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Enrollment/verification server holding protected templates only, with a
// journaled store and a newline-delimited JSON protocol over TCP.

#pragma once

#include "gftgcn/diffusion.hpp"
#include "gftgcn/metrics.hpp"

#include <boost/asio.hpp>

#include <atomic>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <thread>

namespace gftgcn {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint16_t kDefaultPort = 7399;
inline constexpr std::size_t kMaxLineBytes = 1 << 20;

enum class ServiceErrorCode { malformed, param_mismatch, duplicate, not_enrolled };

inline const char* to_string(ServiceErrorCode c) {
  switch (c) {
    case ServiceErrorCode::malformed: return "malformed";
    case ServiceErrorCode::param_mismatch: return "param_mismatch";
    case ServiceErrorCode::duplicate: return "duplicate";
    case ServiceErrorCode::not_enrolled: return "not_enrolled";
  }
  return "unknown";
}

class ServiceError : public Error {
 public:
  ServiceError(ServiceErrorCode code, const std::string& message) : Error(message), code_(code) {}
  ServiceErrorCode code() const { return code_; }

 private:
  ServiceErrorCode code_;
};

/// Current UTC time as ISO 8601 with second resolution.
inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct EnrollmentRecord {
  std::string user_id;
  std::uint64_t key_id = 0;
  ProtectedTemplate tmpl;
  std::string enrolled_at;
};

/// Whitelisted serialisation: identifiers, the protected template and the time.
inline nlohmann::json to_json(const EnrollmentRecord& r) {
  return {{"user_id", r.user_id}, {"key_id", to_hex(r.key_id)}, {"template", to_json(r.tmpl)}, {"enrolled_at", r.enrolled_at}};
}

inline EnrollmentRecord record_from_json(const nlohmann::json& j) {
  try {
    EnrollmentRecord r;
    r.user_id = j.at("user_id").get<std::string>();
    r.key_id = parse_hex_u64(j.at("key_id").get<std::string>());
    r.tmpl = template_from_json(j.at("template"));
    r.enrolled_at = j.at("enrolled_at").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed enrollment record: ") + e.what());
  }
}

/// Append-only JSON-lines journal of enrollments and tombstones. Opening a
/// journal replays it and rewrites it with live records only. An empty path
/// keeps the store in memory.
class TemplateStore {
 public:
  explicit TemplateStore(std::filesystem::path journal = {}) : path_(std::move(journal)) {
    if (path_.empty()) return;
    replay();
    compact();
    out_.open(path_, std::ios::app);
    if (!out_) throw Error("cannot open journal " + path_.string());
  }

  void enroll(const EnrollmentRecord& r) {
    std::unique_lock lock(mutex_);
    const Key k{r.user_id, r.key_id};
    if (records_.count(k)) throw ServiceError(ServiceErrorCode::duplicate, "already enrolled: " + r.user_id);
    append({{"op", "enroll"}, {"record", to_json(r)}});
    records_.emplace(k, r);
  }

  void revoke(const std::string& user_id, std::uint64_t key_id) {
    std::unique_lock lock(mutex_);
    auto it = records_.find({user_id, key_id});
    if (it == records_.end()) throw ServiceError(ServiceErrorCode::not_enrolled, "not enrolled: " + user_id);
    append({{"op", "revoke"}, {"user_id", user_id}, {"key_id", to_hex(key_id)}});
    records_.erase(it);
  }

  std::optional<EnrollmentRecord> find(const std::string& user_id, std::uint64_t key_id) const {
    std::shared_lock lock(mutex_);
    auto it = records_.find({user_id, key_id});
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
  }

  std::vector<EnrollmentRecord> records() const {
    std::shared_lock lock(mutex_);
    std::vector<EnrollmentRecord> out;
    for (const auto& [_, r] : records_) out.push_back(r);
    return out;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  using Key = std::pair<std::string, std::uint64_t>;

  void replay() {
    std::ifstream in(path_);
    if (!in) return;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto op = j.at("op").get<std::string>();
        if (op == "enroll") {
          auto r = record_from_json(j.at("record"));
          records_[{r.user_id, r.key_id}] = std::move(r);
        } else if (op == "revoke") {
          records_.erase({j.at("user_id").get<std::string>(), parse_hex_u64(j.at("key_id").get<std::string>())});
        } else {
          throw ParseError("unknown journal op " + op);
        }
      } catch (const std::exception& e) {
        // A torn final line is the expected residue of a crash mid-append.
        warn("journal " + path_.string() + ":" + std::to_string(line_no) + " skipped: " + e.what());
      }
    }
  }

  void compact() {
    auto tmp = path_;
    tmp += ".compact";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw Error("cannot write " + tmp.string());
      for (const auto& [_, r] : records_) out << nlohmann::json{{"op", "enroll"}, {"record", to_json(r)}}.dump() << '\n';
      out.flush();
      if (!out) throw Error("failed compacting journal " + path_.string());
    }
    std::filesystem::rename(tmp, path_);
  }

  void append(const nlohmann::json& entry) {
    if (path_.empty()) return;
    out_ << entry.dump() << '\n';
    out_.flush();
    if (!out_) throw Error("journal write failed: " + path_.string());
  }

  std::filesystem::path path_;
  std::ofstream out_;
  std::map<Key, EnrollmentRecord> records_;
  mutable std::shared_mutex mutex_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
  std::string journal = "gftgcn_store.jsonl";
  std::string audit_log;
  double threshold = 0.9;
  TemplateParams params{10, 50, 64};
  int threads = 4;
};

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = nlohmann::json{{"host", c.host},
                     {"port", c.port},
                     {"journal", c.journal},
                     {"audit_log", c.audit_log},
                     {"threshold", c.threshold},
                     {"K", c.params.k},
                     {"T", c.params.t},
                     {"d", c.params.d},
                     {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
  json_field(j, "host", c.host);
  json_field(j, "port", c.port);
  json_field(j, "journal", c.journal);
  json_field(j, "audit_log", c.audit_log);
  json_field(j, "threshold", c.threshold);
  json_field(j, "K", c.params.k);
  json_field(j, "T", c.params.t);
  json_field(j, "d", c.params.d);
  json_field(j, "threads", c.threads);
}

/// Protocol logic, independent of transport. Thread-safe.
class VerificationService {
 public:
  VerificationService(ServiceConfig config, TemplateStore& store, std::ostream* audit = nullptr)
      : config_(std::move(config)), store_(store), audit_(audit) {}

  const ServiceConfig& config() const { return config_; }

  /// One request line in, one response line out (without the newline).
  std::string handle_line(const std::string& line) {
    nlohmann::json request;
    try {
      request = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      return error_response(nullptr, ServiceErrorCode::malformed, "request is not valid JSON").dump();
    }
    return handle(request).dump();
  }

  nlohmann::json handle(const nlohmann::json& request) {
    const nlohmann::json req_id = request.is_object() && request.contains("req_id") ? request["req_id"] : nlohmann::json(nullptr);
    try {
      if (!request.is_object()) throw ServiceError(ServiceErrorCode::malformed, "request must be a JSON object");
      const auto op = string_field(request, "op");
      nlohmann::json response;
      if (op == "PING") {
        response = {{"ok", true}, {"op", "PONG"}, {"protocol", kProtocolVersion}};
      } else if (op == "ENROLL") {
        response = enroll(request);
      } else if (op == "VERIFY") {
        response = verify(request);
      } else if (op == "REVOKE") {
        response = revoke(request);
      } else {
        throw ServiceError(ServiceErrorCode::malformed, "unknown op " + op);
      }
      response["req_id"] = req_id;
      return response;
    } catch (const ServiceError& e) {
      audit_event({{"event", "error"}, {"code", to_string(e.code())}});
      return error_response(req_id, e.code(), e.what());
    } catch (const Error& e) {
      return error_response(req_id, ServiceErrorCode::malformed, e.what());
    }
  }

 private:
  static std::string string_field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw ServiceError(ServiceErrorCode::malformed, std::string("missing string field ") + key);
    }
    return j[key].get<std::string>();
  }

  static std::uint64_t key_field(const nlohmann::json& j) {
    try {
      return parse_hex_u64(string_field(j, "key_id"));
    } catch (const ParseError& e) {
      throw ServiceError(ServiceErrorCode::malformed, e.what());
    }
  }

  ProtectedTemplate template_field(const nlohmann::json& j, std::uint64_t key_id) const {
    if (!j.contains("template")) throw ServiceError(ServiceErrorCode::malformed, "missing template");
    ProtectedTemplate t;
    try {
      t = template_from_json(j["template"]);
    } catch (const ParseError& e) {
      throw ServiceError(ServiceErrorCode::malformed, e.what());
    }
    const auto& p = config_.params;
    if (t.params.k != p.k || t.params.t != p.t || t.params.d != p.d) {
      throw ServiceError(ServiceErrorCode::param_mismatch,
                         "template (K, T, d) = (" + std::to_string(t.params.k) + ", " + std::to_string(t.params.t) +
                             ", " + std::to_string(t.params.d) + ") differs from server (" + std::to_string(p.k) +
                             ", " + std::to_string(p.t) + ", " + std::to_string(p.d) + ")");
    }
    if (t.key_id != key_id) throw ServiceError(ServiceErrorCode::malformed, "template key_id differs from request");
    return t;
  }

  nlohmann::json enroll(const nlohmann::json& req) {
    EnrollmentRecord r;
    r.user_id = string_field(req, "user_id");
    r.key_id = key_field(req);
    r.tmpl = template_field(req, r.key_id);
    r.enrolled_at = utc_timestamp();
    store_.enroll(r);
    audit_event({{"event", "enroll"}, {"user_id", r.user_id}, {"key_id", to_hex(r.key_id)}});
    return {{"ok", true}};
  }

  nlohmann::json verify(const nlohmann::json& req) {
    const auto user = string_field(req, "user_id");
    const auto key = key_field(req);
    const auto query = template_field(req, key);
    const auto record = store_.find(user, key);
    if (!record) throw ServiceError(ServiceErrorCode::not_enrolled, "not enrolled: " + user);
    const auto m = match(query.z_t, record->tmpl.z_t, config_.threshold);
    audit_event({{"event", "verify"},
                 {"user_id", user},
                 {"key_id", to_hex(key)},
                 {"match", m.match},
                 {"similarity", m.similarity}});
    return {{"ok", true}, {"match", m.match}, {"similarity", m.similarity}, {"threshold", config_.threshold}};
  }

  nlohmann::json revoke(const nlohmann::json& req) {
    const auto user = string_field(req, "user_id");
    const auto key = key_field(req);
    store_.revoke(user, key);
    audit_event({{"event", "revoke"}, {"user_id", user}, {"key_id", to_hex(key)}});
    return {{"ok", true}};
  }

  static nlohmann::json error_response(const nlohmann::json& req_id, ServiceErrorCode code, const std::string& msg) {
    return {{"ok", false}, {"error", {{"code", to_string(code)}, {"message", msg}}}, {"req_id", req_id}};
  }

  void audit_event(nlohmann::json event) {
    if (audit_ == nullptr) return;
    event["ts"] = utc_timestamp();
    std::lock_guard lock(audit_mutex_);
    *audit_ << event.dump() << '\n';
    audit_->flush();
  }

  ServiceConfig config_;
  TemplateStore& store_;
  std::ostream* audit_;
  std::mutex audit_mutex_;
};

/// Newline-delimited JSON over TCP. Each connection is served by a
/// read-handle-write loop on a pool of io threads.
class NdjsonServer {
 public:
  NdjsonServer(VerificationService& service, const std::string& host, std::uint16_t port)
      : service_(service), acceptor_(io_) {
    namespace ip = boost::asio::ip;
    const ip::tcp::endpoint ep(ip::make_address(host), port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(ip::tcp::acceptor::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
  }

  ~NdjsonServer() { stop(); }

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  /// Starts serving on background threads and returns.
  void start(int threads = 4) {
    accept();
    for (int i = 0; i < std::max(1, threads); ++i) pool_.emplace_back([this] { io_.run(); });
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    boost::asio::post(io_, [this] {
      boost::system::error_code ignored;
      acceptor_.close(ignored);
    });
    io_.stop();
    for (auto& t : pool_) {
      if (t.joinable() && t.get_id() != std::this_thread::get_id()) t.join();
    }
    pool_.clear();
  }

 private:
  class Session : public std::enable_shared_from_this<Session> {
   public:
    Session(boost::asio::ip::tcp::socket socket, VerificationService& service)
        : socket_(std::move(socket)), service_(service), buffer_(kMaxLineBytes) {}

    void read() {
      auto self = shared_from_this();
      boost::asio::async_read_until(socket_, buffer_, '\n', [self](boost::system::error_code ec, std::size_t n) {
        if (ec == boost::asio::error::not_found) {
          self->reply(R"({"ok":false,"error":{"code":"malformed","message":"line too long"},"req_id":null})", false);
          return;
        }
        if (ec) return;
        std::string line(boost::asio::buffers_begin(self->buffer_.data()),
                         boost::asio::buffers_begin(self->buffer_.data()) + static_cast<std::ptrdiff_t>(n) - 1);
        self->buffer_.consume(n);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
          self->read();
          return;
        }
        self->reply(self->service_.handle_line(line), true);
      });
    }

   private:
    void reply(std::string response, bool keep_open) {
      auto self = shared_from_this();
      auto out = std::make_shared<std::string>(std::move(response) + "\n");
      boost::asio::async_write(socket_, boost::asio::buffer(*out), [self, out, keep_open](boost::system::error_code ec, std::size_t) {
        if (!ec && keep_open) self->read();
      });
    }

    boost::asio::ip::tcp::socket socket_;
    VerificationService& service_;
    boost::asio::streambuf buffer_;
  };

  void accept() {
    acceptor_.async_accept([this](boost::system::error_code ec, boost::asio::ip::tcp::socket socket) {
      if (ec) return;
      std::make_shared<Session>(std::move(socket), service_)->read();
      accept();
    });
  }

  VerificationService& service_;
  boost::asio::io_context io_;
  boost::asio::ip::tcp::acceptor acceptor_;
  std::vector<std::thread> pool_;
  std::atomic<bool> stopped_{false};
};

/// Blocking client. When a transcript is given, every byte sent and received
/// is appended to it.
class NdjsonClient {
 public:
  NdjsonClient(const std::string& host, std::uint16_t port, std::string* transcript = nullptr)
      : socket_(io_), transcript_(transcript) {
    boost::asio::ip::tcp::resolver resolver(io_);
    boost::asio::connect(socket_, resolver.resolve(host, std::to_string(port)));
  }

  nlohmann::json request(const nlohmann::json& message) {
    const std::string line = message.dump() + "\n";
    boost::asio::write(socket_, boost::asio::buffer(line));
    if (transcript_ != nullptr) *transcript_ += line;
    const std::size_t n = boost::asio::read_until(socket_, buffer_, '\n');
    std::string reply(boost::asio::buffers_begin(buffer_.data()),
                      boost::asio::buffers_begin(buffer_.data()) + static_cast<std::ptrdiff_t>(n));
    buffer_.consume(n);
    if (transcript_ != nullptr) *transcript_ += reply;
    return nlohmann::json::parse(reply);
  }

 private:
  boost::asio::io_context io_;
  boost::asio::ip::tcp::socket socket_;
  boost::asio::streambuf buffer_;
  std::string* transcript_;
};

/// Request builders used by clients; only identifiers and the protected
/// template are placed on the wire.
inline nlohmann::json enroll_request(const std::string& user_id, const ProtectedTemplate& t, const nlohmann::json& req_id = nullptr) {
  return {{"op", "ENROLL"}, {"user_id", user_id}, {"key_id", to_hex(t.key_id)}, {"template", to_json(t)}, {"req_id", req_id}};
}

inline nlohmann::json verify_request(const std::string& user_id, const ProtectedTemplate& t, const nlohmann::json& req_id = nullptr) {
  return {{"op", "VERIFY"}, {"user_id", user_id}, {"key_id", to_hex(t.key_id)}, {"template", to_json(t)}, {"req_id", req_id}};
}

inline nlohmann::json revoke_request(const std::string& user_id, std::uint64_t key_id, const nlohmann::json& req_id = nullptr) {
  return {{"op", "REVOKE"}, {"user_id", user_id}, {"key_id", to_hex(key_id)}, {"req_id", req_id}};
}

}  // namespace gftgcn
