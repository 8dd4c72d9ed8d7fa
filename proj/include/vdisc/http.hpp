// Copyright 2026 The vdisc Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// HTTP front end for the engine.
//
//   GET  /v1/health
//   GET  /v1/documents/<signature>
//   POST /v1/search
//   POST /v1/object-search
//   POST /v1/lens
//   POST /v1/admin/reload
//
// Bodies are JSON. Errors come back as {"error": {"status", "message"}}.
// Latency is reported only in the X-Vdisc-Latency-Ms header so bodies stay
// byte-stable for identical requests.

#pragma once

#include <chrono>
#include <functional>
#include <string>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "vdisc/engine.hpp"

namespace vdisc::service {

inline std::string error_body(int status, const std::string& message) {
  return json{{"error", {{"status", status}, {"message", message}}}}.dump() + "\n";
}

class HttpServer {
 public:
  explicit HttpServer(Engine& engine) : engine_(engine) { routes(); }

  /// Binds and serves until stop(); port 0 picks a free port.
  bool listen(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) return false;
      return server_.listen_after_bind();
    }
    if (!server_.bind_to_port(host, port)) return false;
    port_ = port;
    return server_.listen_after_bind();
  }

  int port() const { return port_; }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  using Handler = std::function<json(const httplib::Request&)>;

  void respond(const httplib::Request& req, httplib::Response& res, const Handler& fn) {
    const auto start = std::chrono::steady_clock::now();
    int status = 200;
    std::string body;
    try {
      body = fn(req).dump() + "\n";
    } catch (const std::exception& ex) {
      status = http_status_for(ex);
      body = error_body(status, ex.what());
      if (status >= 500) spdlog::warn("{} {}: {}", req.method, req.path, ex.what());
    }
    const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start);
    res.status = status;
    res.set_header("X-Vdisc-Latency-Ms", fmt::format("{:.3f}", elapsed.count()));
    res.set_content(body, "application/json");
  }

  static json body_of(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json j = json::parse(req.body);
    if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
    return j;
  }

  void routes() {
    server_.Get("/v1/health", [this](const httplib::Request& req, httplib::Response& res) {
      respond(req, res, [this](const httplib::Request&) { return engine_.health(); });
    });
    server_.Get(R"(/v1/documents/([0-9A-Fa-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
      respond(req, res, [this](const httplib::Request& r) { return engine_.document(r.matches[1].str()); });
    });
    auto post = [this](const std::string& path, std::function<json(const json&)> fn) {
      server_.Post(path, [this, fn](const httplib::Request& req, httplib::Response& res) {
        respond(req, res, [&fn](const httplib::Request& r) { return fn(body_of(r)); });
      });
    };
    post("/v1/search", [this](const json& j) { return engine_.search(j); });
    post("/v1/object-search", [this](const json& j) { return engine_.object_search(j); });
    post("/v1/lens", [this](const json& j) { return engine_.lens(j); });
    post("/v1/admin/reload", [this](const json&) {
      const std::string gen = engine_.reload();
      return json{{"generation", gen}};
    });
  }

  Engine& engine_;
  httplib::Server server_;
  int port_ = -1;
};

}  // namespace vdisc::service
