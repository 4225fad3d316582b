#pragma once

// HTTP+JSON binding of the crowd service.
//
//   POST /api/session               {"nickname"}            -> profile + token
//   GET  /api/game/next[?seed=N]                            -> game
//   POST /api/game/{id}/hint        {"request_id"?}         -> game at next level
//   POST /api/game/{id}/guess       {"class", "request_id"?} -> result
//   POST /api/game/{id}/resign      {"request_id"?}         -> result
//   POST /api/game/{id}/labels      {"labels": [...], "request_id"?}
//   GET  /api/leaderboard[?limit=N]
//   GET  /api/image/{ref}                                   -> image/png
//   GET  /api/export/labels                                 -> line-delimited JSON
//
// The session token travels in the X-Session header. Errors are
// {"error": "..."} with 400 (invalid), 403 (forbidden), 404 (unknown),
// 409 (wrong state; "resign": true once hints run out) or 500.

#include <string>

// Must precede httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "inv/service.hpp"

#include <httplib.h>

namespace inv {

namespace detail {

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const HintsExhausted& e) {
      send_json(res, {{"error", e.what()}, {"resign", true}}, 409);
    } catch (const StateError& e) {
      send_json(res, {{"error", e.what()}}, 409);
    } catch (const NotFoundError& e) {
      send_json(res, {{"error", e.what()}}, 404);
    } catch (const ForbiddenError& e) {
      send_json(res, {{"error", e.what()}}, 403);
    } catch (const ValidationError& e) {
      send_json(res, {{"error", e.what()}}, 400);
    } catch (const json::exception& e) {
      send_json(res, {{"error", std::string("malformed request: ") + e.what()}}, 400);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

inline json body_of(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  auto j = json::parse(req.body);
  if (!j.is_object()) throw ValidationError("request body must be a JSON object");
  return j;
}

inline std::optional<std::string> request_id(const json& body) {
  if (!body.contains("request_id") || body.at("request_id").is_null()) return std::nullopt;
  return body.at("request_id").get<std::string>();
}

inline std::string session(const httplib::Request& req) { return req.get_header_value("X-Session"); }

}  // namespace detail

inline void mount_api(httplib::Server& server, CrowdService& svc) {
  using detail::guarded;
  using detail::send_json;
  server.Post("/api/session", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::body_of(req);
                send_json(res, svc.create_session(body.value("nickname", std::string())), 201);
              }));
  server.Get("/api/game/next", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               std::optional<std::uint64_t> seed;
               if (req.has_param("seed")) {
                 try {
                   seed = std::stoull(req.get_param_value("seed"));
                 } catch (...) {
                   throw ValidationError("seed must be a non-negative integer");
                 }
               }
               send_json(res, svc.next_game(detail::session(req), seed));
             }));
  server.Post(R"(/api/game/([^/]+)/(hint|guess|resign|labels))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                const std::string game = req.matches[1], op = req.matches[2];
                const auto body = detail::body_of(req);
                const auto token = detail::session(req);
                const auto rid = detail::request_id(body);
                if (op == "hint") {
                  send_json(res, svc.request_hint(token, game, rid));
                } else if (op == "guess") {
                  if (!body.contains("class")) throw ValidationError("guess needs a class");
                  send_json(res, svc.submit_guess(token, game, body.at("class").get<std::string>(), rid));
                } else if (op == "resign") {
                  send_json(res, svc.resign(token, game, rid));
                } else {
                  if (!body.contains("labels") || !body.at("labels").is_array()) throw ValidationError("labels must be a list");
                  send_json(res, svc.submit_labels(token, game, body.at("labels").get<std::vector<std::string>>(), rid), 201);
                }
              }));
  server.Get("/api/leaderboard", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               std::size_t limit = 10;
               if (req.has_param("limit")) {
                 try {
                   limit = std::stoul(req.get_param_value("limit"));
                 } catch (...) {
                   throw ValidationError("limit must be a non-negative integer");
                 }
               }
               send_json(res, svc.leaderboard(limit));
             }));
  server.Get(R"(/api/image/([A-Za-z0-9_-]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               const auto png = svc.image(req.matches[1]);
               res.set_content(std::string(png.begin(), png.end()), "image/png");
               res.set_header("Cache-Control", "no-store");
             }));
  server.Get("/api/export/labels", guarded([&svc](const httplib::Request&, httplib::Response& res) {
               res.set_content(svc.export_labels(), "application/x-ndjson");
             }));
}

}  // namespace inv
