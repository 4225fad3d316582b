#pragma once

// Deep Reveal game server core: sessions, game issuance, the hint ladder,
// guesses, labels, screening-based trust and the leaderboard.
//
// Every mutation is an event. A command validates against the current
// state, makes any random choices, writes the resulting event (choices
// included) and then applies it; replay applies the same events, so the
// log alone rebuilds the state exactly. All mutations are serialized by one
// writer lock; reads share a lock and see a consistent state.
//
// Persistence (optional): <data dir>/events.jsonl, one event per line, and
// <data dir>/snapshot.json, the full state as of some sequence number.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "inv/error.hpp"
#include "inv/hash.hpp"
#include "inv/image.hpp"
#include "inv/labels.hpp"
#include "inv/mask.hpp"
#include "inv/random.hpp"
#include "inv/store.hpp"

namespace inv {

class NotFoundError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ForbiddenError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Raised on a hint request past the last level; the game can still be resigned.
class HintsExhausted : public StateError {
 public:
  using StateError::StateError;
};

using json = nlohmann::json;

struct ServiceConfig {
  int base_points = 100;
  int hint_penalty = 15;
  std::size_t option_count = 5;
  std::size_t screening_every = 6;
  std::size_t screening_warmup = 2;
  int screening_max_hints = 2;
  std::size_t trust_min_screenings = 2;
  double trust_pass_rate = 0.8;
  std::vector<double> ladder = kDefaultLadder;
  std::string bind_address = "127.0.0.1";
  int port = 8080;
  std::uint64_t seed = 0;
  std::size_t snapshot_every = 100;

  json to_json() const {
    return {{"base_points", base_points},
            {"hint_penalty", hint_penalty},
            {"option_count", option_count},
            {"screening_every", screening_every},
            {"screening_warmup", screening_warmup},
            {"screening_max_hints", screening_max_hints},
            {"trust_min_screenings", trust_min_screenings},
            {"trust_pass_rate", trust_pass_rate},
            {"ladder", ladder},
            {"bind_address", bind_address},
            {"port", port},
            {"seed", seed},
            {"snapshot_every", snapshot_every}};
  }

  static ServiceConfig from_json(const json& j) {
    ServiceConfig c;
    const json defaults = c.to_json();
    for (const auto& [k, _] : j.items()) {
      if (!defaults.contains(k)) throw ValidationError("unknown service config key '" + k + "'");
    }
    try {
      c.base_points = j.value("base_points", c.base_points);
      c.hint_penalty = j.value("hint_penalty", c.hint_penalty);
      c.option_count = j.value("option_count", c.option_count);
      c.screening_every = j.value("screening_every", c.screening_every);
      c.screening_warmup = j.value("screening_warmup", c.screening_warmup);
      c.screening_max_hints = j.value("screening_max_hints", c.screening_max_hints);
      c.trust_min_screenings = j.value("trust_min_screenings", c.trust_min_screenings);
      c.trust_pass_rate = j.value("trust_pass_rate", c.trust_pass_rate);
      c.ladder = j.value("ladder", c.ladder);
      c.bind_address = j.value("bind_address", c.bind_address);
      c.port = j.value("port", c.port);
      c.seed = j.value("seed", c.seed);
      c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("bad service config: ") + e.what());
    }
    validate_ladder(c.ladder);
    if (c.option_count < 2) throw ValidationError("option_count must be at least 2");
    if (c.screening_every == 0) throw ValidationError("screening_every must be positive");
    if (c.base_points < 0 || c.hint_penalty < 0) throw ValidationError("scoring constants must be non-negative");
    if (c.trust_pass_rate < 0.0 || c.trust_pass_rate > 1.0) throw ValidationError("trust_pass_rate must lie in [0, 1]");
    return c;
  }
};

// ---- game pool ----------------------------------------------------------------

struct PoolItem {
  std::string map_ref;
  std::string true_class;
  bool screening = false;  // operator-curated easy item
  RgbImage image;
  ClusterMap map;
};

struct GamePool {
  std::vector<std::string> classes;
  std::vector<PoolItem> items;

  void validate() const {
    if (classes.size() < 2) throw ValidationError("a game pool needs at least two classes");
    std::set<std::string> refs;
    for (const auto& it : items) {
      if (std::find(classes.begin(), classes.end(), it.true_class) == classes.end()) {
        throw ValidationError("pool item " + it.map_ref + " has unknown class '" + it.true_class + "'");
      }
      if (!refs.insert(it.map_ref).second) throw ValidationError("duplicate pool item " + it.map_ref);
    }
  }
};

// pool.json:
//   {"version": 1, "classes": [...], "store": "<cluster store dir>",
//    "items": [{"map": "<map ref>", "image": "<file.ppm>", "class": "...", "screening": false}]}
// Relative paths resolve against the pool file's directory.
inline GamePool load_pool(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read game pool " + path.string());
  GamePool pool;
  try {
    const auto doc = json::parse(in);
    if (doc.value("version", 0) != 1) throw ValidationError("unsupported game pool version");
    const auto base = path.parent_path();
    pool.classes = doc.at("classes").get<std::vector<std::string>>();
    const auto store = base / doc.at("store").get<std::string>();
    for (const auto& j : doc.at("items")) {
      PoolItem it;
      it.map_ref = j.at("map").get<std::string>();
      it.true_class = j.at("class").get<std::string>();
      it.screening = j.value("screening", false);
      it.image = read_ppm(base / j.at("image").get<std::string>());
      it.map = load_map(store, it.map_ref);
      pool.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed game pool " + path.string() + ": " + e.what());
  }
  pool.validate();
  return pool;
}

// ---- state --------------------------------------------------------------------

inline constexpr int kMaxHintLevel = 5;
inline constexpr std::size_t kMaxNickname = 32;
inline constexpr std::size_t kMaxLabels = 5;
inline constexpr std::size_t kMaxLabelChars = 64;

struct PlayerProfile {
  std::string id;
  std::string token;
  std::string nickname;
  long score = 0;
  std::size_t games_played = 0;
  std::size_t games_issued = 0;
  std::size_t screening_passed = 0;
  std::size_t screening_failed = 0;
  bool trusted = false;
  std::uint64_t created_seq = 0;
  std::set<std::size_t> served;
  std::string open_game;
};

enum class GameState { kOpen, kGuessed, kResigned };

inline const char* state_name(GameState s) {
  switch (s) {
    case GameState::kOpen: return "open";
    case GameState::kGuessed: return "guessed";
    case GameState::kResigned: return "resigned";
  }
  return "?";
}

inline GameState parse_state(const std::string& s) {
  if (s == "open") return GameState::kOpen;
  if (s == "guessed") return GameState::kGuessed;
  if (s == "resigned") return GameState::kResigned;
  throw ValidationError("unknown game state '" + s + "'");
}

struct GameInstance {
  std::string id;
  std::string player;
  std::size_t item = 0;
  std::string map_ref;
  std::string true_class;
  std::vector<std::string> options;
  int hint_level = 0;
  GameState state = GameState::kOpen;
  bool screening = false;
  std::optional<std::string> guess;
  bool correct = false;
  int points = 0;
  std::vector<std::string> labels;
  bool trusted_at_labeling = false;
};

struct ServiceState {
  std::uint64_t seq = 0;
  std::size_t player_counter = 0;
  std::size_t game_counter = 0;
  std::map<std::string, PlayerProfile> players;
  std::map<std::string, std::string> tokens;  // token -> player id
  std::vector<std::string> player_order;
  std::map<std::string, GameInstance> games;
  std::vector<std::string> game_order;
  std::map<std::string, json> responses;  // idempotency key -> original response
};

inline bool evaluate_trust(const PlayerProfile& p, const ServiceConfig& cfg) {
  const std::size_t n = p.screening_passed + p.screening_failed;
  if (n < cfg.trust_min_screenings || n == 0) return false;
  return static_cast<double>(p.screening_passed) >= cfg.trust_pass_rate * static_cast<double>(n) - 1e-12;
}

inline int guess_points(bool correct, int hints, const ServiceConfig& cfg) {
  return correct ? std::max(0, cfg.base_points - cfg.hint_penalty * hints) : 0;
}

// Game g (1-based, per player) is a screening game during the warmup and on
// every `screening_every`-th game after that.
inline bool wants_screening(std::size_t g, const ServiceConfig& cfg) {
  return g <= cfg.screening_warmup || g % cfg.screening_every == 0;
}

// The true class plus K-1 distinct others drawn uniformly, in shuffled order.
inline std::vector<std::string> sample_options(Rng& rng, const std::vector<std::string>& classes, const std::string& truth, std::size_t k) {
  std::vector<std::string> others;
  for (const auto& c : classes) {
    if (c != truth) others.push_back(c);
  }
  k = std::min(k, others.size() + 1);
  for (std::size_t i = 0; i + 1 < k; ++i) std::swap(others[i], others[i + rng.below(others.size() - i)]);
  std::vector<std::string> out(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k - 1));
  out.push_back(truth);
  rng.shuffle(out);
  return out;
}

inline std::string image_ref(const std::string& game, int level) { return game + "-" + std::to_string(level); }

inline json game_json(const GameInstance& g) {
  json j{{"game", g.id},
         {"state", state_name(g.state)},
         {"options", g.options},
         {"hint_level", g.hint_level},
         {"max_hint_level", kMaxHintLevel},
         {"image", image_ref(g.id, g.hint_level)}};
  if (g.state != GameState::kOpen) {
    j["correct"] = g.correct;
    j["points"] = g.points;
    j["true_class"] = g.true_class;
    j["labels_submitted"] = !g.labels.empty();
  }
  return j;
}

inline json profile_json(const PlayerProfile& p) {
  return {{"player", p.id},
          {"nickname", p.nickname},
          {"score", p.score},
          {"games_played", p.games_played},
          {"screening_passed", p.screening_passed},
          {"screening_failed", p.screening_failed},
          {"trusted", p.trusted}};
}

// Full state as JSON; equal states serialize to identical text.
inline json state_to_json(const ServiceState& s) {
  json players = json::array();
  for (const auto& id : s.player_order) {
    const auto& p = s.players.at(id);
    players.push_back({{"id", p.id},
                       {"token", p.token},
                       {"nickname", p.nickname},
                       {"score", p.score},
                       {"games_played", p.games_played},
                       {"games_issued", p.games_issued},
                       {"screening_passed", p.screening_passed},
                       {"screening_failed", p.screening_failed},
                       {"trusted", p.trusted},
                       {"created_seq", p.created_seq},
                       {"served", p.served},
                       {"open_game", p.open_game}});
  }
  json games = json::array();
  for (const auto& id : s.game_order) {
    const auto& g = s.games.at(id);
    games.push_back({{"id", g.id},
                     {"player", g.player},
                     {"item", g.item},
                     {"map_ref", g.map_ref},
                     {"true_class", g.true_class},
                     {"options", g.options},
                     {"hint_level", g.hint_level},
                     {"state", state_name(g.state)},
                     {"screening", g.screening},
                     {"guess", g.guess ? json(*g.guess) : json(nullptr)},
                     {"correct", g.correct},
                     {"points", g.points},
                     {"labels", g.labels},
                     {"trusted_at_labeling", g.trusted_at_labeling}});
  }
  return {{"seq", s.seq},
          {"player_counter", s.player_counter},
          {"game_counter", s.game_counter},
          {"players", players},
          {"games", games},
          {"responses", s.responses}};
}

inline ServiceState state_from_json(const json& j) {
  ServiceState s;
  s.seq = j.at("seq").get<std::uint64_t>();
  s.player_counter = j.at("player_counter").get<std::size_t>();
  s.game_counter = j.at("game_counter").get<std::size_t>();
  for (const auto& jp : j.at("players")) {
    PlayerProfile p;
    p.id = jp.at("id").get<std::string>();
    p.token = jp.at("token").get<std::string>();
    p.nickname = jp.at("nickname").get<std::string>();
    p.score = jp.at("score").get<long>();
    p.games_played = jp.at("games_played").get<std::size_t>();
    p.games_issued = jp.at("games_issued").get<std::size_t>();
    p.screening_passed = jp.at("screening_passed").get<std::size_t>();
    p.screening_failed = jp.at("screening_failed").get<std::size_t>();
    p.trusted = jp.at("trusted").get<bool>();
    p.created_seq = jp.at("created_seq").get<std::uint64_t>();
    p.served = jp.at("served").get<std::set<std::size_t>>();
    p.open_game = jp.at("open_game").get<std::string>();
    s.tokens[p.token] = p.id;
    s.player_order.push_back(p.id);
    s.players[p.id] = std::move(p);
  }
  for (const auto& jg : j.at("games")) {
    GameInstance g;
    g.id = jg.at("id").get<std::string>();
    g.player = jg.at("player").get<std::string>();
    g.item = jg.at("item").get<std::size_t>();
    g.map_ref = jg.at("map_ref").get<std::string>();
    g.true_class = jg.at("true_class").get<std::string>();
    g.options = jg.at("options").get<std::vector<std::string>>();
    g.hint_level = jg.at("hint_level").get<int>();
    g.state = parse_state(jg.at("state").get<std::string>());
    g.screening = jg.at("screening").get<bool>();
    if (!jg.at("guess").is_null()) g.guess = jg.at("guess").get<std::string>();
    g.correct = jg.at("correct").get<bool>();
    g.points = jg.at("points").get<int>();
    g.labels = jg.at("labels").get<std::vector<std::string>>();
    g.trusted_at_labeling = jg.at("trusted_at_labeling").get<bool>();
    s.game_order.push_back(g.id);
    s.games[g.id] = std::move(g);
  }
  s.responses = j.at("responses").get<std::map<std::string, json>>();
  return s;
}

// Applies one event and returns the response it produces. Events are
// trusted: all validation happened when the command created them.
inline json apply_event(ServiceState& s, const json& ev, const ServiceConfig& cfg) {
  const auto seq = ev.at("seq").get<std::uint64_t>();
  if (seq != s.seq + 1) {
    throw ValidationError("event sequence gap: expected " + std::to_string(s.seq + 1) + ", got " + std::to_string(seq));
  }
  s.seq = seq;
  const auto type = ev.at("type").get<std::string>();
  json response;
  if (type == "session") {
    PlayerProfile p;
    p.id = ev.at("player").get<std::string>();
    p.token = ev.at("token").get<std::string>();
    p.nickname = ev.at("nickname").get<std::string>();
    p.created_seq = seq;
    ++s.player_counter;
    s.tokens[p.token] = p.id;
    s.player_order.push_back(p.id);
    response = profile_json(p);
    response["token"] = p.token;
    s.players[p.id] = std::move(p);
    return response;
  }
  if (type == "game") {
    GameInstance g;
    g.id = ev.at("game").get<std::string>();
    g.player = ev.at("player").get<std::string>();
    g.item = ev.at("item").get<std::size_t>();
    g.map_ref = ev.at("map_ref").get<std::string>();
    g.true_class = ev.at("true_class").get<std::string>();
    g.options = ev.at("options").get<std::vector<std::string>>();
    g.screening = ev.at("screening").get<bool>();
    auto& p = s.players.at(g.player);
    p.served.insert(g.item);
    ++p.games_issued;
    p.open_game = g.id;
    ++s.game_counter;
    s.game_order.push_back(g.id);
    response = game_json(g);
    s.games[g.id] = std::move(g);
    return response;
  }
  auto& g = s.games.at(ev.at("game").get<std::string>());
  auto& p = s.players.at(g.player);
  if (type == "hint") {
    g.hint_level = ev.at("level").get<int>();
    response = game_json(g);
  } else if (type == "guess" || type == "resign") {
    if (type == "guess") {
      g.state = GameState::kGuessed;
      g.guess = ev.at("class").get<std::string>();
      g.correct = *g.guess == g.true_class;
      g.points = guess_points(g.correct, g.hint_level, cfg);
    } else {
      g.state = GameState::kResigned;
    }
    p.score += g.points;
    ++p.games_played;
    p.open_game.clear();
    if (g.screening) {
      const bool pass = g.correct && g.hint_level <= cfg.screening_max_hints;
      ++(pass ? p.screening_passed : p.screening_failed);
    }
    p.trusted = evaluate_trust(p, cfg);
    response = game_json(g);
    response["score"] = p.score;
    response["trusted"] = p.trusted;
  } else if (type == "labels") {
    g.labels = ev.at("labels").get<std::vector<std::string>>();
    g.trusted_at_labeling = p.trusted;
    response = {{"game", g.id}, {"stored", g.labels.size()}, {"labels", g.labels}};
  } else {
    throw ValidationError("unknown event type '" + type + "'");
  }
  if (ev.contains("request_id")) s.responses[ev.at("request_key").get<std::string>()] = response;
  return response;
}

inline ServiceState replay_events(const std::vector<json>& events, const ServiceConfig& cfg, ServiceState start = {}) {
  for (const auto& e : events) {
    if (e.at("seq").get<std::uint64_t>() <= start.seq) continue;
    apply_event(start, e, cfg);
  }
  return start;
}

inline std::vector<json> read_event_log(const std::filesystem::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  std::uint64_t last = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception&) {
      // A torn final line from a crash mid-write is dropped; anything else is corruption.
      if (in.peek() == EOF) break;
      throw ValidationError("corrupt event log line " + std::to_string(lineno));
    }
    const auto seq = out.back().at("seq").get<std::uint64_t>();
    if (seq <= last) throw ValidationError("event log sequence numbers are not increasing at line " + std::to_string(lineno));
    last = seq;
  }
  return out;
}

// ---- service ------------------------------------------------------------------

class CrowdService {
 public:
  using Clock = std::function<std::int64_t()>;  // milliseconds since epoch

  CrowdService(GamePool pool, ServiceConfig cfg, std::filesystem::path data_dir = {}, Clock clock = {})
      : pool_(std::move(pool)), cfg_(std::move(cfg)), dir_(std::move(data_dir)), clock_(std::move(clock)) {
    pool_.validate();
    validate_ladder(cfg_.ladder);
    if (!clock_) {
      clock_ = [] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch()).count();
      };
    }
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      if (std::filesystem::exists(dir_ / "snapshot.json")) {
        std::ifstream in(dir_ / "snapshot.json");
        try {
          state_ = state_from_json(json::parse(in));
        } catch (const json::exception& e) {
          throw ValidationError(std::string("corrupt snapshot: ") + e.what());
        }
      }
      state_ = replay_events(read_event_log(dir_ / "events.jsonl"), cfg_, std::move(state_));
      log_.open(dir_ / "events.jsonl", std::ios::app);
      if (!log_) throw ValidationError("cannot open event log in " + dir_.string());
    }
  }

  const ServiceConfig& config() const { return cfg_; }
  const GamePool& pool() const { return pool_; }

  json create_session(const std::string& nickname) {
    std::unique_lock lock(mu_);
    const auto trimmed = normalize_space(nickname);
    if (trimmed.empty()) throw ValidationError("nickname must not be empty");
    if (trimmed.size() > kMaxNickname) throw ValidationError("nickname must be at most 32 characters");
    std::random_device rd;
    const std::uint64_t r = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    json ev{{"type", "session"},
            {"player", "p" + std::to_string(state_.player_counter + 1)},
            {"nickname", trimmed},
            {"token", hex64(r ^ fnv1a64(std::to_string(state_.seq) + trimmed))}};
    return commit(std::move(ev));
  }

  // An open game is returned as is, so a reload resumes it.
  json next_game(const std::string& token, std::optional<std::uint64_t> seed = std::nullopt) {
    std::unique_lock lock(mu_);
    const auto& p = player_by_token(token);
    if (!p.open_game.empty()) return game_json(state_.games.at(p.open_game));
    const std::size_t g = p.games_issued + 1;
    std::vector<std::size_t> screening, regular;
    for (std::size_t i = 0; i < pool_.items.size(); ++i) {
      if (!p.served.count(i)) (pool_.items[i].screening ? screening : regular).push_back(i);
    }
    auto* pick = wants_screening(g, cfg_) ? &screening : &regular;
    if (pick->empty()) pick = pick == &screening ? &regular : &screening;
    if (pick->empty()) throw StateError("no games left");
    Rng rng(seed.value_or(fnv1a64("game|" + std::to_string(cfg_.seed) + "|" + std::to_string(state_.game_counter + 1))));
    const std::size_t item = (*pick)[rng.below(pick->size())];
    const auto& it = pool_.items[item];
    json ev{{"type", "game"},
            {"game", "g" + std::to_string(state_.game_counter + 1)},
            {"player", p.id},
            {"item", item},
            {"map_ref", it.map_ref},
            {"true_class", it.true_class},
            {"options", sample_options(rng, pool_.classes, it.true_class, cfg_.option_count)},
            {"screening", it.screening}};
    return commit(std::move(ev));
  }

  json request_hint(const std::string& token, const std::string& game, std::optional<std::string> request_id = std::nullopt) {
    std::unique_lock lock(mu_);
    auto [g, key] = own_game(token, game, "hint", request_id);
    if (auto r = replayed(key)) return *r;
    if (g->state != GameState::kOpen) throw StateError("game " + game + " is closed");
    if (g->hint_level >= kMaxHintLevel) throw HintsExhausted("no hints left in game " + game + "; guess or resign");
    json ev{{"type", "hint"}, {"game", game}, {"level", g->hint_level + 1}};
    return commit(with_request(std::move(ev), key, request_id));
  }

  json submit_guess(const std::string& token, const std::string& game, const std::string& cls,
                    std::optional<std::string> request_id = std::nullopt) {
    std::unique_lock lock(mu_);
    auto [g, key] = own_game(token, game, "guess", request_id);
    if (auto r = replayed(key)) return *r;
    if (g->state != GameState::kOpen) throw StateError("game " + game + " is closed");
    if (std::find(g->options.begin(), g->options.end(), cls) == g->options.end()) {
      throw ValidationError("'" + cls + "' is not one of the options for game " + game);
    }
    json ev{{"type", "guess"}, {"game", game}, {"class", cls}};
    return commit(with_request(std::move(ev), key, request_id));
  }

  json resign(const std::string& token, const std::string& game, std::optional<std::string> request_id = std::nullopt) {
    std::unique_lock lock(mu_);
    auto [g, key] = own_game(token, game, "resign", request_id);
    if (auto r = replayed(key)) return *r;
    if (g->state != GameState::kOpen) throw StateError("game " + game + " is closed");
    json ev{{"type", "resign"}, {"game", game}};
    return commit(with_request(std::move(ev), key, request_id));
  }

  json submit_labels(const std::string& token, const std::string& game, const std::vector<std::string>& labels,
                     std::optional<std::string> request_id = std::nullopt) {
    std::unique_lock lock(mu_);
    auto [g, key] = own_game(token, game, "labels", request_id);
    if (auto r = replayed(key)) return *r;
    if (g->state == GameState::kOpen) throw StateError("labels are accepted only after a guess or resign");
    if (!g->labels.empty()) throw StateError("labels already submitted for game " + game);
    if (labels.empty() || labels.size() > kMaxLabels) throw ValidationError("submit between 1 and 5 labels");
    std::vector<std::string> clean;
    for (const auto& l : labels) {
      auto t = normalize_space(l);
      if (t.empty() || t.size() > kMaxLabelChars) throw ValidationError("each label must be 1 to 64 characters");
      clean.push_back(std::move(t));
    }
    json ev{{"type", "labels"}, {"game", game}, {"labels", clean}};
    return commit(with_request(std::move(ev), key, request_id));
  }

  json leaderboard(std::size_t limit = 10) const {
    std::shared_lock lock(mu_);
    std::vector<const PlayerProfile*> ps;
    for (const auto& id : state_.player_order) ps.push_back(&state_.players.at(id));
    std::stable_sort(ps.begin(), ps.end(), [](const PlayerProfile* a, const PlayerProfile* b) {
      if (a->score != b->score) return a->score > b->score;
      return a->created_seq < b->created_seq;
    });
    json out = json::array();
    for (std::size_t i = 0; i < std::min(limit, ps.size()); ++i) {
      out.push_back({{"rank", i + 1}, {"player", ps[i]->id}, {"nickname", ps[i]->nickname}, {"score", ps[i]->score},
                     {"games_played", ps[i]->games_played}});
    }
    return out;
  }

  json profile(const std::string& token) const {
    std::shared_lock lock(mu_);
    return profile_json(player_by_token(token));
  }

  // PNG of a revealed ladder level; ref is "<game>-<level>".
  std::vector<std::uint8_t> image(const std::string& ref) const {
    std::size_t item = 0;
    int level = 0;
    {
      std::shared_lock lock(mu_);
      const auto dash = ref.rfind('-');
      if (dash == std::string::npos) throw NotFoundError("unknown image " + ref);
      auto it = state_.games.find(ref.substr(0, dash));
      try {
        level = std::stoi(ref.substr(dash + 1));
      } catch (...) {
        throw NotFoundError("unknown image " + ref);
      }
      if (it == state_.games.end() || level < 0 || level > kMaxHintLevel || std::to_string(level) != ref.substr(dash + 1)) {
        throw NotFoundError("unknown image " + ref);
      }
      if (level > it->second.hint_level) throw ForbiddenError("image " + ref + " has not been revealed");
      item = it->second.item;
    }
    return composites(item).at(static_cast<std::size_t>(level));
  }

  // One line per labeled non-screening game; `trusted` is the player's
  // current trust evaluation.
  std::string export_labels() const {
    std::shared_lock lock(mu_);
    std::string out;
    for (const auto& id : state_.game_order) {
      const auto& g = state_.games.at(id);
      if (g.labels.empty() || g.screening) continue;
      out += label_export_line(g.player, g.map_ref, g.guess, g.true_class, g.correct, g.hint_level, g.labels, state_.players.at(g.player).trusted)
                 .dump() +
             "\n";
    }
    return out;
  }

  json state_json() const {
    std::shared_lock lock(mu_);
    return state_to_json(state_);
  }

  ServiceState state() const {
    std::shared_lock lock(mu_);
    return state_;
  }

  void snapshot() {
    std::unique_lock lock(mu_);
    write_snapshot();
  }

 private:
  static std::string normalize_space(const std::string& s) {
    std::string out;
    std::istringstream in(s);
    for (std::string w; in >> w;) out += (out.empty() ? "" : " ") + w;
    return out;
  }

  const PlayerProfile& player_by_token(const std::string& token) const {
    auto it = state_.tokens.find(token);
    if (it == state_.tokens.end()) throw ForbiddenError("unknown session");
    return state_.players.at(it->second);
  }

  std::pair<const GameInstance*, std::string> own_game(const std::string& token, const std::string& game, const std::string& op,
                                                       const std::optional<std::string>& request_id) const {
    const auto& p = player_by_token(token);
    auto it = state_.games.find(game);
    if (it == state_.games.end()) throw NotFoundError("unknown game " + game);
    if (it->second.player != p.id) throw ForbiddenError("game " + game + " belongs to another player");
    return {&it->second, request_id ? p.id + "|" + op + "|" + game + "|" + *request_id : std::string()};
  }

  std::optional<json> replayed(const std::string& key) const {
    if (key.empty()) return std::nullopt;
    auto it = state_.responses.find(key);
    if (it == state_.responses.end()) return std::nullopt;
    return it->second;
  }

  static json with_request(json ev, const std::string& key, const std::optional<std::string>& request_id) {
    if (request_id) {
      ev["request_id"] = *request_id;
      ev["request_key"] = key;
    }
    return ev;
  }

  json commit(json ev) {
    ev["seq"] = state_.seq + 1;
    ev["ts"] = clock_();
    if (log_.is_open()) {
      log_ << ev.dump() << "\n";
      log_.flush();
      if (!log_) throw std::runtime_error("event log write failed");
    }
    auto response = apply_event(state_, ev, cfg_);
    if (log_.is_open() && cfg_.snapshot_every && state_.seq % cfg_.snapshot_every == 0) write_snapshot();
    return response;
  }

  void write_snapshot() {
    if (dir_.empty()) return;
    const auto tmp = dir_ / "snapshot.json.tmp";
    std::ofstream(tmp) << state_to_json(state_).dump() << "\n";
    std::filesystem::rename(tmp, dir_ / "snapshot.json");
  }

  const std::vector<std::vector<std::uint8_t>>& composites(std::size_t item) const {
    std::lock_guard lock(cache_mu_);
    auto it = cache_.find(item);
    if (it != cache_.end()) return it->second;
    const auto& p = pool_.items.at(item);
    const auto series = masked_series(p.image, p.map, cfg_.ladder);
    std::vector<std::vector<std::uint8_t>> pngs;
    for (const auto& c : series.composites) pngs.push_back(encode_png(c));
    return cache_.emplace(item, std::move(pngs)).first->second;
  }

  GamePool pool_;
  ServiceConfig cfg_;
  std::filesystem::path dir_;
  Clock clock_;
  ServiceState state_;
  std::ofstream log_;
  mutable std::shared_mutex mu_;
  mutable std::mutex cache_mu_;
  mutable std::map<std::size_t, std::vector<std::vector<std::uint8_t>>> cache_;
};

}  // namespace inv
