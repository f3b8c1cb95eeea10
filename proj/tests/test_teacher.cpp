#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

// must match the library build of httplib
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <thread>

#include "telldrive/errors.hpp"
#include "telldrive/teacher/teacher.hpp"

using namespace telldrive;
using namespace telldrive::teacher;
using sim::Maneuver;
using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("telldrive_test_teacher_" + name);
}

sim::Observation empty_obs(double speed, int slots = 6) {
  sim::Observation obs;
  obs.ego = {50.0, -4.0, speed, 0.0, 1.0, 0.0};
  obs.neighbors.assign(static_cast<std::size_t>(slots), sim::FeatureColumn{});
  return obs;
}

void add_neighbor(sim::Observation& obs, int id, double dx, double dy, double dvx, double dvy = 0.0,
                  double heading = 0.0) {
  obs.neighbors.at(static_cast<std::size_t>(obs.neighbor_count++)) = {dx, dy, dvx, dvy, std::cos(heading),
                                                                        std::sin(heading)};
  obs.neighbor_ids.push_back(id);
}

risk::ConflictAssessment assessment_with(int id, double tau, sim::Vec2 rel, double rel_heading) {
  risk::ConflictAssessment a;
  risk::VehicleConflict c;
  c.vehicle_id = id;
  c.tau = tau;
  c.relative_position = rel;
  c.relative_heading = rel_heading;
  a.per_vehicle.push_back(c);
  a.tau_min = tau;
  a.risky = tau < 6.0;
  return a;
}

MemoryEntry entry_with(std::vector<double> z, double ret = 0.0, Maneuver a = Maneuver::Cruise) {
  MemoryEntry e;
  e.z = std::move(z);
  e.episode_return = ret;
  e.action = a;
  return e;
}

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

/// Replies from a fixed script, then repeats the last one.
class FakeBackend : public ChatBackend {
 public:
  explicit FakeBackend(std::vector<std::string> replies, std::string name = "fake")
      : replies_(std::move(replies)), name_(std::move(name)) {}
  std::string chat(const ChatRequest& request) override {
    last_request = request;
    const auto& r = replies_.at(std::min(calls++, replies_.size() - 1));
    if (r == "<timeout>") throw BackendError("timed out");
    if (r == "<throw>") throw std::runtime_error("unexpected");
    return r;
  }
  std::string name() const override { return name_; }
  std::size_t calls = 0;
  ChatRequest last_request;

 private:
  std::vector<std::string> replies_;
  std::string name_;
};

Prompt merge_prompt(std::uint64_t seed, const std::vector<ConstraintRule>& rules = {}) {
  auto [state, obs] = sim::reset(sim::ScenarioConfig::merge_lite(), seed);
  const auto a = risk::assess(state, state.risk);
  return build_prompt(encode_state(obs, a, state.risk.horizon), obs, a, {}, make_context(state, rules));
}

}  // namespace

// ---------------------------------------------------------------- state vector

TEST_CASE("encode_state with no neighbors is ego block, zeros and a horizon-filled tau block") {
  const auto obs = empty_obs(20.0);
  const auto z = encode_state(obs, {}, 6.0);
  REQUIRE(z.z.size() == 36u);
  CHECK(StateVector::dimension(6) == 36);
  for (int i = 0; i < 6; ++i) CHECK(z.z[i] == obs.ego[i]);
  for (int i = 6; i < 30; ++i) CHECK(z.z[i] == 0.0);
  for (int i = 30; i < 36; ++i) CHECK(z.z[i] == 6.0);
}

TEST_CASE("encode_state layout round-trips observation positions and tau on simulated states") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [state, obs] = sim::reset(sim::ScenarioConfig::preset(sim::ScenarioKind::Highway), seed);
    for (int t = 0; t < 5 && !state.terminal; ++t) {
      const auto a = risk::assess(state, state.risk);
      const auto z = encode_state(obs, a, state.risk.horizon);
      CHECK(encode_state(obs, a, state.risk.horizon).z == z.z);
      for (int k = 0; k < obs.neighbor_count; ++k) {
        const auto& col = obs.neighbors[static_cast<std::size_t>(k)];
        // layout oracle: slot k's block starts at 6 + 4k, its tau at 6 + 4N + k
        CHECK(z.z[6 + 4 * k + 0] == col[0]);
        CHECK(z.z[6 + 4 * k + 1] == col[1]);
        CHECK(z.z[6 + 4 * k + 2] == col[2]);
        CHECK(z.z[6 + 4 * k + 3] == col[3]);
        double tau = state.risk.horizon;
        for (const auto& c : a.per_vehicle)
          if (c.vehicle_id == obs.neighbor_ids[static_cast<std::size_t>(k)]) tau = std::min(c.tau, tau);
        CHECK(z.z[6 + 4 * obs.slots() + k] == tau);
      }
      for (double v : z.z) CHECK(std::isfinite(v));
      obs = sim::step(state, Maneuver::Cruise).observation;
    }
  }
}

// ---------------------------------------------------------------- retrieval

TEST_CASE("cosine similarity conventions") {
  CHECK(cosine_similarity({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));
  CHECK(cosine_similarity({1, 0}, {0, 5}) == 0.0);
  CHECK(cosine_similarity({0, 0}, {1, 1}) == 0.0);
  CHECK(cosine_similarity({1, 1}, {0, 0}) == 0.0);
  CHECK_THROWS_AS(cosine_similarity({1, 1}, {1, 1, 1}), ShapeError);
}

TEST_CASE("retrieve examples") {
  MemoryRepository mem;
  mem.insert(entry_with({1, 0, 0}));
  mem.insert(entry_with({0, 1, 0}));
  mem.insert(entry_with({0.5, 0.5, 0}));
  auto r = retrieve({0, 1, 0}, mem, 1);
  REQUIRE(r.size() == 1u);
  CHECK(r[0].index == 1u);
  CHECK(r[0].similarity == doctest::Approx(1.0));

  r = retrieve({0, 0, 1}, mem, 3);
  REQUIRE(r.size() == 3u);
  for (const auto& x : r) CHECK(x.similarity == 0.0);
  // all tied: most recent first
  CHECK(r[0].index == 2u);
  CHECK(r[1].index == 1u);
  CHECK(r[2].index == 0u);

  CHECK(retrieve({1, 0, 0}, mem, 10).size() == 3u);
  CHECK_THROWS_AS(retrieve({1, 0, 0}, mem, 0), UsageError);
  CHECK(retrieve({1, 0, 0}, MemoryRepository{}, 3).empty());
}

TEST_CASE("retrieve equals the exhaustive cosine argsort on 1000 random repositories") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    MemoryRepository mem;
    const std::size_t n = 1 + rng() % 20;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = random_vector(rng, 36);
      if (rng() % 10 == 0) v.assign(36, 0.0);               // zero-norm entries
      if (rng() % 10 == 0 && i > 0) v = mem.at(rng() % i).z;  // exact ties
      mem.insert(entry_with(v));
    }
    auto z = random_vector(rng, 36);
    if (trial % 50 == 0) z.assign(36, 0.0);
    const std::size_t k = 1 + rng() % 5;

    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t i = 0; i < mem.size(); ++i) {
      const auto& e = mem.at(i).z;
      const double dot = std::inner_product(z.begin(), z.end(), e.begin(), 0.0);
      const double na = std::sqrt(std::inner_product(z.begin(), z.end(), z.begin(), 0.0));
      const double nb = std::sqrt(std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
      oracle.emplace_back(na == 0.0 || nb == 0.0 ? 0.0 : dot / (na * nb), i);
    }
    std::sort(oracle.begin(), oracle.end(), [](auto& a, auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second > b.second;
    });
    const auto got = retrieve(z, mem, k);
    REQUIRE(got.size() == std::min(k, mem.size()));
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].index == oracle[i].second);
      CHECK(got[i].similarity == doctest::Approx(oracle[i].first).epsilon(1e-12));
    }
  }
}

// ---------------------------------------------------------------- memory

TEST_CASE("memory capacity and eviction priority") {
  MemoryRepository mem;
  mem.insert(entry_with({1}));
  CHECK(mem.size() == 1u);

  MemoryRepository full;
  MemoryEntry lesson = entry_with({0.0}, 0.0);  // lowest |return| of all
  lesson.lesson = "slow down earlier";
  full.insert(lesson);
  for (int i = 1; i < 20; ++i) full.insert(entry_with({double(i)}, 1.0 + i));
  REQUIRE(full.size() == 20u);
  full.insert(entry_with({99.0}, 50.0));
  CHECK(full.size() == 20u);
  CHECK(full.at(0).lesson == "slow down earlier");
  // the evicted entry is the non-lesson one with the smallest |return| (2.0, z = 1)
  for (const auto& e : full.entries()) CHECK(e.z != std::vector<double>{1.0});

  // ties on |return| evict the oldest
  MemoryRepository tied(3);
  tied.insert(entry_with({1}, -2.0));
  tied.insert(entry_with({2}, 2.0));
  tied.insert(entry_with({3}, 5.0));
  tied.insert(entry_with({4}, 9.0));
  CHECK(tied.at(0).z == std::vector<double>{2});

  // all lessons: oldest goes
  MemoryRepository lessons(2);
  for (int i = 0; i < 3; ++i) {
    auto e = entry_with({double(i)});
    e.lesson = "l" + std::to_string(i);
    lessons.insert(e);
  }
  CHECK(lessons.at(0).lesson == "l1");
  CHECK(lessons.at(1).lesson == "l2");
}

TEST_CASE("memory matches a reference eviction model over random insert streams") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    MemoryRepository mem;
    std::vector<MemoryEntry> model;
    for (int i = 0; i < 60; ++i) {
      auto e = entry_with({double(i)}, std::round(std::uniform_real_distribution<double>(-3, 3)(rng)));
      if (rng() % 4 == 0) e.lesson = "lesson";
      if (model.size() == 20) {
        std::size_t victim = model.size();
        for (std::size_t j = 0; j < model.size(); ++j) {
          if (model[j].is_lesson()) continue;
          if (victim == model.size() || std::abs(model[j].episode_return) < std::abs(model[victim].episode_return))
            victim = j;
        }
        if (victim == model.size()) victim = 0;
        model.erase(model.begin() + static_cast<long>(victim));
      }
      model.push_back(e);
      mem.insert(e);
      REQUIRE(mem.size() <= 20u);
      REQUIRE(mem.size() == model.size());
      for (std::size_t j = 0; j < model.size(); ++j) REQUIRE(mem.at(j).z == model[j].z);
    }
  }
}

TEST_CASE("lessons are truncated to 2000 characters") {
  MemoryRepository mem;
  auto e = entry_with({1});
  e.lesson = std::string(5000, 'x');
  mem.insert(e);
  CHECK(mem.at(0).lesson.size() == kMaxLessonChars);
}

TEST_CASE("memory persistence round-trip and schema checks") {
  MemoryRepository mem;
  auto e = entry_with({1.5, -2.25, 1e-17}, -0.75, Maneuver::TurnLeft);
  e.scenario_kind = sim::ScenarioKind::Intersection;
  e.outcome = Outcome::Collision;
  e.lesson = "yield to crossing traffic";
  e.constraints.push_back({sim::ScenarioKind::Intersection, Maneuver::SpeedUp,
                           {{GuardField::TauMin, Comparison::Less, 0.8}, {GuardField::EgoSpeed, Comparison::Greater, 10}}});
  mem.insert(e);
  mem.insert(entry_with({3.0}, 2.0));

  const auto path = temp_path("memory.json");
  mem.save(path);
  const auto back = MemoryRepository::load(path);
  CHECK(back.to_json() == mem.to_json());
  REQUIRE(back.size() == 2u);
  CHECK(back.at(0).z == e.z);
  CHECK(back.at(0).constraints == e.constraints);
  CHECK(back.active_constraints() == e.constraints);

  auto j = mem.to_json();
  CHECK(j.at("schema_version") == kMemorySchemaVersion);
  j["schema_version"] = 99;
  CHECK_THROWS_AS(MemoryRepository::from_json(j), ConfigError);
  CHECK_THROWS_AS(MemoryRepository::load(temp_path("does_not_exist.json")), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("constraint rule schema") {
  const ConstraintRule rule{sim::ScenarioKind::Merge, Maneuver::SpeedUp, {{GuardField::TauMin, Comparison::Less, 0.8}}};
  CHECK(constraint_from_json(to_json(rule)) == rule);
  CHECK(rule.applies(sim::ScenarioKind::Merge, 0.5, 20));
  CHECK_FALSE(rule.applies(sim::ScenarioKind::Merge, 0.8, 20));
  CHECK_FALSE(rule.applies(sim::ScenarioKind::Highway, 0.5, 20));
  CHECK_FALSE(rule.applies(sim::ScenarioKind::Merge, kInf, 20));
  CHECK_THROWS(constraint_from_json(json{{"scenario", "merge"}, {"forbidden_action", "fly"}, {"guard", json::array()}}));
  CHECK_THROWS(constraint_from_json(json{{"scenario", "merge"},
                                         {"forbidden_action", "cruise"},
                                         {"guard", {{{"field", "lane"}, {"op", "<"}, {"threshold", 1}}}}}));
}

// ---------------------------------------------------------------- prompt

TEST_CASE("build_prompt without exemplars is complete") {
  const auto p = merge_prompt(3);
  REQUIRE(p.messages.size() == 2u);
  CHECK(p.messages[0].role == "system");
  CHECK(p.messages[1].role == "user");
  const auto& sys = p.messages[0].content;
  for (const char* token : {"slow_down", "cruise", "speed_up", "turn_left", "turn_right", "\"action\"", "step by step"})
    CHECK(sys.find(token) != std::string::npos);
  const auto& user = p.messages[1].content;
  CHECK(user.find("Similar past situations") == std::string::npos);
  CHECK(user.find("Example 1") == std::string::npos);
  CHECK(user.find("acceleration lane") != std::string::npos);
  CHECK(user.find("Risk summary: tau_min = ") != std::string::npos);
  CHECK(extract_data_block(user).has_value());
  CHECK(p.estimated_tokens <= kMaxPromptTokens);
}

TEST_CASE("build_prompt prints tau_min literally") {
  auto obs = empty_obs(20.0);
  add_neighbor(obs, 4, 15.0, 0.0, -8.0);
  const auto a = assessment_with(4, 1.2, {15.0, 0.0}, 0.0);
  DecisionContext ctx;
  const auto p = build_prompt(encode_state(obs, a, 6.0), obs, a, {}, ctx);
  CHECK(p.messages[1].content.find("tau_min = 1.2 s") != std::string::npos);
  CHECK(p.data.at("tau_min").get<double>() == 1.2);
}

TEST_CASE("build_prompt renders exemplars in the given similarity order") {
  MemoryRepository mem;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) mem.insert(entry_with(random_vector(rng, 36), 0.1 * i, sim::kAllManeuvers[i % 5]));
  const auto obs = empty_obs(20.0);
  const auto z = encode_state(obs, {}, 6.0);
  std::vector<RetrievedEntry> shots;
  for (const auto& r : retrieve(z.z, mem, 3)) shots.push_back({mem.at(r.index), r.similarity});
  REQUIRE(shots.size() == 3u);
  const auto p = build_prompt(z, obs, {}, shots, DecisionContext{});
  const auto& user = p.messages[1].content;
  std::vector<std::size_t> at;
  for (int k = 1; k <= 3; ++k) {
    const auto pos = user.find("Example " + std::to_string(k) + " (similarity ");
    REQUIRE(pos != std::string::npos);
    at.push_back(pos);
  }
  CHECK(user.find("Example 4") == std::string::npos);
  CHECK(std::is_sorted(at.begin(), at.end()));
  std::vector<double> sims;
  for (auto pos : at) sims.push_back(std::stod(user.substr(user.find("similarity ", pos) + 11)));
  CHECK(sims[0] >= sims[1]);
  CHECK(sims[1] >= sims[2]);
}

TEST_CASE("build_prompt lists active constraints and stays within the token budget") {
  const ConstraintRule rule{sim::ScenarioKind::Merge, Maneuver::SpeedUp, {{GuardField::TauMin, Comparison::Less, 0.8}}};
  const auto p = merge_prompt(1, {rule});
  CHECK(p.messages[0].content.find(rule.describe()) != std::string::npos);
  CHECK(p.data.at("constraints").size() == 1u);

  auto obs = empty_obs(20.0);
  for (int k = 0; k < 6; ++k) add_neighbor(obs, k + 1, 10.0 * (k + 1), 0.0, 0.0);
  std::vector<std::string> lessons(10, std::string(1990, 'l'));
  const auto big = build_prompt(encode_state(obs, {}, 6.0), obs, {}, {}, DecisionContext{}, lessons);
  CHECK(big.estimated_tokens <= kMaxPromptTokens);
  CHECK(big.vehicles_listed == 0);  // vehicles go before lessons
  CHECK(big.data.at("neighbors").empty());

  std::vector<std::string> one(1, std::string(500, 'l'));
  const auto small = build_prompt(encode_state(obs, {}, 6.0), obs, {}, {}, DecisionContext{}, one);
  CHECK(small.vehicles_listed == 6);
}

// ---------------------------------------------------------------- decide

TEST_CASE("parse_decision examples") {
  auto d = parse_decision("I think we should slow down.\n{\"action\": \"slow_down\", \"reason\": \"car ahead\"}");
  REQUIRE(d);
  CHECK(d->first == Maneuver::SlowDown);
  CHECK(d->second == "car ahead");

  d = parse_decision("{\"action\":\"cruise\"} then later {\"action\":\"turn_left\",\"reason\":\"gap {open}\"}");
  REQUIRE(d);
  CHECK(d->first == Maneuver::TurnLeft);
  CHECK(d->second == "gap {open}");

  d = parse_decision("{\"action\":\"speed_up\"}\n{\"note\": 1}\n{broken");
  REQUIRE(d);
  CHECK(d->first == Maneuver::SpeedUp);

  CHECK_FALSE(parse_decision(""));
  CHECK_FALSE(parse_decision("no json here"));
  CHECK_FALSE(parse_decision("{\"action\": \"fly\"}"));
  CHECK_FALSE(parse_decision("{\"action\": 3}"));
}

TEST_CASE("decide: well-formed reply is an llm decision") {
  FakeBackend backend({"Step 1: vehicle ahead is slow.\n{\"action\":\"slow_down\",\"reason\":\"slow lead\"}"});
  const auto d = decide(merge_prompt(0), backend, Maneuver::Cruise);
  CHECK(d.action == Maneuver::SlowDown);
  CHECK(d.source == DecisionSource::Llm);
  CHECK(d.attempts == 1);
  CHECK(d.latency >= 0.0);
}

TEST_CASE("decide: three unparseable replies fall back to the scripted action") {
  FakeBackend backend({"hmm", "{\"action\":\"hover\"}", "still thinking"});
  const auto d = decide(merge_prompt(0), backend, Maneuver::SpeedUp);
  CHECK(backend.calls == 3u);
  CHECK(d.attempts == 3);
  CHECK(d.action == Maneuver::SpeedUp);
  CHECK(d.source == DecisionSource::Fallback);
}

TEST_CASE("decide: a retry can recover") {
  FakeBackend backend({"garbage", "{\"action\":\"turn_right\"}"});
  const auto d = decide(merge_prompt(0), backend, Maneuver::Cruise);
  CHECK(d.action == Maneuver::TurnRight);
  CHECK(d.attempts == 2);
  CHECK(d.source == DecisionSource::Llm);
}

TEST_CASE("decide: backend failure falls back without retrying") {
  FakeBackend backend({"<timeout>"});
  const auto d = decide(merge_prompt(0), backend, Maneuver::SlowDown);
  CHECK(backend.calls == 1u);
  CHECK(d.action == Maneuver::SlowDown);
  CHECK(d.source == DecisionSource::Fallback);
  CHECK(d.rationale.find("timed out") != std::string::npos);
}

TEST_CASE("decide always yields a valid maneuver under injected faults") {
  const std::vector<std::string> faults = {"<timeout>", "<throw>", "", "   ", "{", "}{", "{\"action\":null}",
                                           "{\"action\":\"\"}", std::string(10000, '{'), "\xff\xfe{\"action\""};
  const std::vector<std::string> good = {"{\"action\":\"cruise\"}", "ok {\"action\":\"turn_left\",\"reason\":\"x\"}"};
  std::mt19937_64 rng(3);
  int fallbacks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> script;
    for (int i = 0; i < 3; ++i) {
      script.push_back(rng() % 4 == 0 ? good[rng() % good.size()] : faults[rng() % faults.size()]);
    }
    FakeBackend backend(script);
    const auto fallback = sim::kAllManeuvers[rng() % 5];
    TeacherDecision d;
    REQUIRE_NOTHROW(d = decide(merge_prompt(trial % 5), backend, fallback));
    CHECK(sim::to_index(d.action) >= 0);
    CHECK(sim::to_index(d.action) < sim::kNumManeuvers);
    CHECK(d.attempts >= 1);
    CHECK(d.attempts <= 3);
    if (d.source == DecisionSource::Fallback) {
      CHECK(d.action == fallback);
      ++fallbacks;
    }
  }
  CHECK(fallbacks > 0);
}

TEST_CASE("scripted backend answers decision prompts with the rule cascade") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [state, obs] = sim::reset(sim::ScenarioConfig::merge_lite(), seed);
    const auto a = risk::assess(state, state.risk);
    const auto ctx = make_context(state, {});
    const auto p = build_prompt(encode_state(obs, a, state.risk.horizon), obs, a, {}, ctx);
    ScriptedBackend backend;
    const auto d = decide(p, backend, Maneuver::Cruise);
    CHECK(d.source == DecisionSource::Scripted);
    CHECK(d.action == scripted_decide(obs, a, ctx));
  }
  ScriptedBackend backend;
  CHECK_THROWS_AS(backend.chat({{{"user", "no data here"}}, 0.0, 10}), BackendError);
}

TEST_CASE("recorded transcript replays to identical decisions") {
  const auto path = temp_path("transcript.jsonl");
  std::vector<TeacherDecision> live;
  {
    RecordingBackend rec(std::make_unique<ScriptedBackend>(), path);
    for (std::uint64_t s = 0; s < 5; ++s) live.push_back(decide(merge_prompt(s), rec, Maneuver::Cruise));
  }
  for (int run = 0; run < 2; ++run) {
    ReplayBackend replay(path);
    CHECK(replay.remaining() == 5u);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto d = decide(merge_prompt(s), replay, Maneuver::Cruise);
      CHECK(d.action == live[s].action);
      CHECK(d.rationale == live[s].rationale);
      CHECK(d.source == live[s].source);
    }
    CHECK(replay.remaining() == 0u);
    // past the end: fallback, not a throw
    CHECK(decide(merge_prompt(0), replay, Maneuver::SlowDown).source == DecisionSource::Fallback);
  }
  ReplayBackend replay(path);
  CHECK(decide(merge_prompt(4), replay, Maneuver::SlowDown).source == DecisionSource::Fallback);  // mismatch
  std::filesystem::remove(path);
}

TEST_CASE("remote backend speaks chat completions to a local server") {
  httplib::Server server;
  json seen;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "fine {\"action\":\"speed_up\"}"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("boom", "text/plain");
  });
  server.Post("/slow", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    res.set_content("{}", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  RemoteBackend remote({base + "/v1/chat/completions", "test-model", "secret", std::chrono::milliseconds(5000)});
  const auto prompt = merge_prompt(2);
  const auto d = decide(prompt, remote, Maneuver::Cruise, {2, 0.3, 256});
  CHECK(d.action == Maneuver::SpeedUp);
  CHECK(d.source == DecisionSource::Llm);
  CHECK(seen.at("model") == "test-model");
  CHECK(seen.at("temperature").get<double>() == 0.3);
  CHECK(seen.at("max_tokens") == 256);
  CHECK(seen.at("messages").size() == 2u);
  CHECK(seen.at("messages")[1].at("content") == prompt.messages[1].content);
  CHECK(auth == "Bearer secret");

  RemoteBackend broken({base + "/broken", "m", "", std::chrono::milliseconds(5000)});
  CHECK_THROWS_AS(broken.chat({prompt.messages, 0.0, 10}), BackendError);
  CHECK(decide(prompt, broken, Maneuver::TurnLeft).action == Maneuver::TurnLeft);

  RemoteBackend slow({base + "/slow", "m", "", std::chrono::milliseconds(100)});
  const auto ds = decide(prompt, slow, Maneuver::SlowDown);
  CHECK(ds.source == DecisionSource::Fallback);
  CHECK(ds.attempts == 1);

  server.stop();
  thread.join();

  CHECK_THROWS_AS(RemoteBackend({"localhost/path", "m", "", std::chrono::milliseconds(10)}), ConfigError);
  CHECK_THROWS_AS(RemoteBackend({base + "/x", "", "", std::chrono::milliseconds(10)}), ConfigError);
}

// ---------------------------------------------------------------- scripted rules

TEST_CASE("scripted_decide examples") {
  DecisionContext ctx;
  ctx.kind = sim::ScenarioKind::Intersection;
  ctx.desired_speed = 20.0;

  auto crossing = empty_obs(15.0);
  add_neighbor(crossing, 2, 20.0, -20.0, -15.0, 15.0, 1.5707963);
  CHECK(scripted_decide(crossing, assessment_with(2, 1.0, {20.0, -20.0}, 1.5707963), ctx) == Maneuver::SlowDown);

  CHECK(scripted_decide(empty_obs(10.0), {}, ctx) == Maneuver::SpeedUp);
  CHECK(scripted_decide(empty_obs(20.0), {}, ctx) == Maneuver::Cruise);

  // urgent tau from a vehicle behind on the same heading does not brake the ego
  auto behind = empty_obs(20.0);
  add_neighbor(behind, 3, -8.0, 0.0, 5.0);
  CHECK(scripted_decide(behind, assessment_with(3, 1.0, {-8.0, 0.0}, 0.0), ctx) == Maneuver::Cruise);

  // merge from the ramp: the target lane is one lane width to the left
  DecisionContext merge;
  merge.kind = sim::ScenarioKind::Merge;
  merge.desired_speed = 25.0;
  merge.goal_lane_change = +1;
  auto open_gap = empty_obs(22.0);
  add_neighbor(open_gap, 5, 60.0, sim::kLaneWidth, 0.0);
  add_neighbor(open_gap, 6, -60.0, sim::kLaneWidth, 0.0);
  CHECK(lane_change_gap_safe(open_gap, +1, 25.0));
  CHECK(scripted_decide(open_gap, {}, merge) == Maneuver::TurnLeft);

  merge.goal_lane_change = -1;
  CHECK(scripted_decide(empty_obs(22.0), {}, merge) == Maneuver::TurnRight);
  merge.goal_lane_change = +1;

  // blocked by a vehicle alongside in the target lane: drop back
  auto alongside = empty_obs(22.0);
  add_neighbor(alongside, 7, 3.0, sim::kLaneWidth, 0.0);
  CHECK_FALSE(lane_change_gap_safe(alongside, +1, 25.0));
  CHECK(scripted_decide(alongside, {}, merge) == Maneuver::SlowDown);

  // blocked by a close follower: pull ahead
  auto follower = empty_obs(22.0);
  add_neighbor(follower, 8, -7.0, sim::kLaneWidth, 2.0);
  CHECK_FALSE(lane_change_gap_safe(follower, +1, 25.0));
  CHECK(scripted_decide(follower, {}, merge) == Maneuver::SpeedUp);

  // a fast closing follower makes an otherwise long gap unsafe
  auto closing = empty_obs(20.0);
  add_neighbor(closing, 9, -25.0, sim::kLaneWidth, 12.0);
  CHECK_FALSE(lane_change_gap_safe(closing, +1, 25.0));
}

TEST_CASE("active constraints are never violated by scripted_decide") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int substitutions = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto obs = empty_obs(30.0 * u(rng));
    const int n = static_cast<int>(rng() % 7);
    risk::ConflictAssessment a;
    for (int k = 0; k < n; ++k) {
      const double dx = 120.0 * u(rng) - 60.0, dy = 16.0 * u(rng) - 8.0;
      add_neighbor(obs, k + 1, dx, dy, 20.0 * u(rng) - 10.0, 2.0 * u(rng) - 1.0, 0.6 * u(rng) - 0.3);
      risk::VehicleConflict c;
      c.vehicle_id = k + 1;
      c.tau = u(rng) < 0.5 ? kInf : 6.0 * u(rng);
      c.relative_position = {dx, dy};
      a.per_vehicle.push_back(c);
      a.tau_min = std::min(a.tau_min, c.tau);
    }
    DecisionContext ctx;
    ctx.kind = static_cast<sim::ScenarioKind>(rng() % 3);
    ctx.goal_lane_change = static_cast<int>(rng() % 3) - 1;
    const int n_rules = static_cast<int>(rng() % 5);
    for (int r = 0; r < n_rules; ++r) {
      ConstraintRule rule;
      rule.scenario_kind = u(rng) < 0.8 ? ctx.kind : static_cast<sim::ScenarioKind>(rng() % 3);
      rule.forbidden_action = sim::kAllManeuvers[rng() % 5];
      rule.guard.push_back({GuardField::TauMin, Comparison::Less, 8.0 * u(rng)});
      if (u(rng) < 0.3) rule.guard.push_back({GuardField::EgoSpeed, Comparison::Greater, 30.0 * u(rng)});
      ctx.constraints.push_back(rule);
    }
    const double speed = std::hypot(obs.ego[2], obs.ego[3]);
    bool all_forbidden = true;
    for (auto m : sim::kAllManeuvers)
      all_forbidden = all_forbidden && forbidden(ctx.constraints, m, ctx.kind, a.tau_min, speed);
    const auto chosen = scripted_decide(obs, a, ctx);
    if (!all_forbidden) CHECK_FALSE(forbidden(ctx.constraints, chosen, ctx.kind, a.tau_min, speed));
    DecisionContext free_ctx = ctx;
    free_ctx.constraints.clear();
    substitutions += chosen != scripted_decide(obs, a, free_ctx);
  }
  CHECK(substitutions > 0);
}

// ---------------------------------------------------------------- reflection

TEST_CASE("scripted reflection forbids the flagged action below the observed tau") {
  ReflectionInput in;
  in.kind = sim::ScenarioKind::Merge;
  in.events = {"collision"};
  in.segments = {{{3, Maneuver::Cruise, 2.5, 0.4, 20.0}, {4, Maneuver::SpeedUp, 0.8, 1.25, 22.0}}};
  ScriptedBackend backend;
  const auto out = reflect(in, backend);
  CHECK(out.ok);
  REQUIRE(out.constraint_delta.size() == 1u);
  const auto& r = out.constraint_delta[0];
  CHECK(r.scenario_kind == sim::ScenarioKind::Merge);
  CHECK(r.forbidden_action == Maneuver::SpeedUp);
  REQUIRE(r.guard.size() == 1u);
  CHECK(r.guard[0].field == GuardField::TauMin);
  CHECK(r.guard[0].op == Comparison::Less);
  CHECK(r.guard[0].threshold == 0.8);
  CHECK_FALSE(out.policy_delta.empty());
  CHECK_FALSE(out.prompt_delta.empty());

  // infinite or zero tau at the worst step
  in.segments = {{{0, Maneuver::TurnLeft, kInf, 10.0, 20.0}}};
  CHECK(canonical_rule(in).guard[0].threshold == in.horizon);
  in.segments = {{{0, Maneuver::TurnLeft, 0.0, 1000.0, 20.0}}};
  CHECK(canonical_rule(in).guard[0].threshold == kMinGuardTau);

  in.segments.clear();
  CHECK_THROWS_AS(reflect(in, backend), UsageError);
}

TEST_CASE("malformed constraint JSON keeps the text deltas") {
  const std::string broken =
      "Analysis...\n{\"policy_delta\": \"brake \\\"earlier\\\"\", \"prompt_delta\": \"watch the ramp end\", "
      "\"constraints\": [{\"scenario\": \"merge\", \"forbidden_action\": ";
  auto out = parse_reflection(broken);
  CHECK(out.ok);
  CHECK(out.policy_delta == "brake \"earlier\"");
  CHECK(out.prompt_delta == "watch the ramp end");
  CHECK(out.constraint_delta.empty());

  const std::string one_bad =
      R"({"policy_delta":"p","prompt_delta":"q","constraints":[)"
      R"({"scenario":"merge","forbidden_action":"teleport","guard":[]},)"
      R"({"scenario":"highway","forbidden_action":"turn_left","guard":[{"field":"tau_min","op":"<","threshold":1.5}]}]})";
  out = parse_reflection(one_bad);
  CHECK(out.policy_delta == "p");
  REQUIRE(out.constraint_delta.size() == 1u);
  CHECK(out.constraint_delta[0].forbidden_action == Maneuver::TurnLeft);

  FakeBackend failing({"<timeout>"});
  ReflectionInput in;
  in.segments = {{{0, Maneuver::Cruise, 1.0, 1.0, 10.0}}};
  const auto empty = reflect(in, failing);
  CHECK_FALSE(empty.ok);
  CHECK(empty.policy_delta.empty());
  CHECK(empty.constraint_delta.empty());
}

// ---------------------------------------------------------------- orchestrator

namespace {

struct EpisodeRun {
  std::vector<Maneuver> actions;
  json memory;
  std::size_t queries = 0;
  std::size_t reflections = 0;
};

EpisodeRun run_teacher_episodes(int episodes) {
  Teacher teacher(std::make_unique<ScriptedBackend>(), MemoryRepository{}, TeacherOptions{});
  EpisodeRun out;
  for (int ep = 0; ep < episodes; ++ep) {
    auto [state, obs] = sim::reset(sim::ScenarioConfig::merge_lite(), 500 + static_cast<std::uint64_t>(ep));
    std::vector<risk::EpisodeStep> steps;
    double ret = 0.0;
    sim::EventSet events;
    while (!state.terminal) {
      const auto d = teacher.decide_step(state, obs);
      out.actions.push_back(d.action);
      risk::EpisodeStep s{state, d.action, {}, {}};
      const auto o = sim::step(state, d.action);
      s.next = state;
      s.events = o.events;
      steps.push_back(std::move(s));
      ret += o.reward;
      events = o.events;
      obs = o.observation;
    }
    teacher.end_episode(steps, ret, events);
  }
  out.memory = teacher.memory().to_json();
  out.queries = teacher.query_count();
  out.reflections = teacher.reflection_count();
  return out;
}

}  // namespace

TEST_CASE("scripted teacher pipeline is deterministic and learns constraints from risky episodes") {
  const auto a = run_teacher_episodes(8);
  const auto b = run_teacher_episodes(8);
  CHECK(a.actions == b.actions);
  CHECK(a.memory == b.memory);
  CHECK(a.queries == a.actions.size());
  CHECK(a.memory.at("entries").size() <= 20u);
  CHECK(a.memory.at("entries").size() >= 8u);
  if (a.reflections > 0) {
    bool has_constraint = false;
    for (const auto& e : a.memory.at("entries")) has_constraint = has_constraint || !e.at("constraints").empty();
    CHECK(has_constraint);
  }
}

TEST_CASE("end_episode reflects on a collision") {
  // Keep accelerating on the highway until something is hit.
  Teacher teacher(std::make_unique<ScriptedBackend>(), MemoryRepository{}, TeacherOptions{});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto [state, obs] = sim::reset(sim::ScenarioConfig::preset(sim::ScenarioKind::Highway), seed);
    std::vector<risk::EpisodeStep> steps;
    sim::EventSet events;
    double ret = 0.0;
    while (!state.terminal) {
      risk::EpisodeStep s{state, Maneuver::SpeedUp, {}, {}};
      const auto o = sim::step(state, Maneuver::SpeedUp);
      s.next = state;
      s.events = o.events;
      steps.push_back(std::move(s));
      events = o.events;
      ret += o.reward;
    }
    if (!events.has(sim::Event::Collision)) continue;
    const auto before = teacher.memory().size();
    const auto outcome = teacher.end_episode(steps, ret, events);
    REQUIRE(outcome.has_value());
    CHECK(outcome->ok);
    REQUIRE(outcome->constraint_delta.size() == 1u);
    CHECK(outcome->constraint_delta[0].forbidden_action == Maneuver::SpeedUp);
    CHECK(teacher.memory().size() == before + 2);
    CHECK(teacher.memory().entries().back().is_lesson());
    CHECK(teacher.memory().entries()[before].outcome == Outcome::Collision);
    CHECK(teacher.reflection_count() == 1u);
    // the learned rule now shows up in the next prompt
    auto [s2, o2] = sim::reset(sim::ScenarioConfig::preset(sim::ScenarioKind::Highway), seed);
    const auto p = teacher.prompt_for(s2, o2);
    CHECK(p.messages[0].content.find(outcome->constraint_delta[0].describe()) != std::string::npos);
    return;
  }
  FAIL("no colliding speed-up episode found in 50 highway seeds");
}
