#include "telldrive/trainer/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "telldrive/errors.hpp"

namespace telldrive::trainer {

using nlohmann::json;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::VPpo: return "v-ppo";
    case Variant::APpo: return "a-ppo";
    case Variant::LaPpo: return "la-ppo";
  }
  return "?";
}

std::optional<Variant> variant_from_string(std::string_view s) {
  for (auto v : {Variant::VPpo, Variant::APpo, Variant::LaPpo})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

std::int64_t TrainConfig::window_steps() const {
  return static_cast<std::int64_t>(teacher_window_fraction * static_cast<double>(total_steps));
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) throw ConfigError(std::string("train.") + field, msg);
  };
  require(total_steps >= 1, "total_steps", "must be >= 1");
  require(eval_interval >= 1, "eval_interval", "must be >= 1");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  // 1600 / 128 leaves a short final minibatch of 64 rows; allowed
  require(rollout_size >= batch_size, "rollout_size", "must be >= batch_size");
  require(lr > 0.0, "lr", "must be > 0");
  require(gamma > 0.0 && gamma <= 1.0, "gamma", "must be in (0, 1]");
  require(gae_lambda >= 0.0 && gae_lambda <= 1.0, "gae_lambda", "must be in [0, 1]");
  require(clip_initial > 0.0 && clip_initial < 1.0, "clip_initial", "must be in (0, 1)");
  require(clip_floor > 0.0 && clip_floor <= clip_initial, "clip_floor", "must be in (0, clip_initial]");
  require(epochs >= 1, "epochs", "must be >= 1");
  require(teacher_window_fraction > 0.0 && teacher_window_fraction < 1.0, "teacher_window_fraction",
          "must be in (0, 1)");
  require(sigma_initial >= 0.0, "sigma_initial", "must be >= 0");
  require(sigma_final >= sigma_initial, "sigma_final", "must be >= sigma_initial");
  require(kl_lambda >= 0.0, "kl_lambda", "must be >= 0");
  require(value_coef >= 0.0, "value_coef", "must be >= 0");
  require(distill_coef >= 0.0, "distill_coef", "must be >= 0");
  require(entropy_coef >= 0.0, "entropy_coef", "must be >= 0");
  require(eval_episodes >= 1, "eval_episodes", "must be >= 1");
  require(checkpoint_every_evals >= 1, "checkpoint_every_evals", "must be >= 1");
  require(hidden >= 1, "hidden", "must be >= 1");
  require(heads >= 1, "heads", "must be >= 1");
  require(timing == "off" || timing == "wall", "timing", "must be \"off\" or \"wall\"");
}

void GlobalConfig::validate() const {
  scenario.validate();
  train.validate();
  risk.validate();
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  if (!train.uses_teacher()) return;
  const auto& t = teacher;
  if (t.backend != "scripted" && t.backend != "remote")
    throw ConfigError("teacher.backend", "must be \"scripted\" or \"remote\"");
  if (t.backend == "remote" && t.replay.empty() && t.endpoint.empty())
    throw ConfigError("teacher.endpoint", "required for the remote backend");
  if (t.timeout_s <= 0.0) throw ConfigError("teacher.timeout_s", "must be > 0");
  if (t.n_shot < 0) throw ConfigError("teacher.n_shot", "must be >= 0");
  if (t.memory_capacity < 1) throw ConfigError("teacher.memory_capacity", "must be >= 1");
  if (t.max_retries < 0) throw ConfigError("teacher.max_retries", "must be >= 0");
  if (t.max_tokens < 1) throw ConfigError("teacher.max_tokens", "must be >= 1");
  if (t.temperature < 0.0) throw ConfigError("teacher.temperature", "must be >= 0");
  if (!t.replay.empty() && !std::filesystem::exists(t.replay))
    throw ConfigError("teacher.replay", "file not found: " + t.replay);
}

std::vector<std::string> preset_names() { return {"merge-lite", "merge", "highway", "intersection"}; }

sim::ScenarioConfig scenario_preset(const std::string& name) {
  if (name == "merge-lite") return sim::ScenarioConfig::merge_lite();
  if (name == "merge") return sim::ScenarioConfig::preset(sim::ScenarioKind::Merge);
  if (name == "highway") return sim::ScenarioConfig::preset(sim::ScenarioKind::Highway);
  if (name == "intersection") return sim::ScenarioConfig::preset(sim::ScenarioKind::Intersection);
  throw ConfigError("scenario.preset", "unknown preset '" + name + "' (merge-lite|merge|highway|intersection)");
}

json to_json(const GlobalConfig& c) {
  const auto& s = c.scenario;
  const auto& t = c.train;
  const auto& k = c.teacher;
  return {
      {"scenario",
       {{"preset", c.scenario_preset},
        {"n_background", s.n_background},
        {"spawn_speed_mean", s.spawn_speed_mean},
        {"spawn_speed_std", s.spawn_speed_std},
        {"disturbance_fraction", s.disturbance_fraction},
        {"dt_physics", s.dt_physics},
        {"decision_period", s.decision_period},
        {"horizon", s.horizon},
        {"success_region",
         {{"lanes", s.success_region.lanes},
          {"axis", s.success_region.axis == sim::Axis::X ? "x" : "y"},
          {"threshold", s.success_region.threshold}}},
        {"reward",
         {{"v_lo", s.reward.v_lo},
          {"v_hi", s.reward.v_hi},
          {"w_speed", s.reward.w_speed},
          {"w_collision", s.reward.w_collision},
          {"w_off_road", s.reward.w_off_road},
          {"w_success", s.reward.w_success}}},
        {"ego_initial_speed", s.ego_initial_speed},
        {"desired_speed", s.desired_speed},
        {"neighbor_slots", s.neighbor_slots},
        {"sensing_radius", s.sensing_radius}}},
      {"train",
       {{"total_steps", t.total_steps},
        {"eval_interval", t.eval_interval},
        {"rollout_size", t.rollout_size},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"gamma", t.gamma},
        {"gae_lambda", t.gae_lambda},
        {"clip_initial", t.clip_initial},
        {"clip_floor", t.clip_floor},
        {"epochs", t.epochs},
        {"teacher_window_fraction", t.teacher_window_fraction},
        {"sigma_initial", t.sigma_initial},
        {"sigma_final", t.sigma_final},
        {"kl_lambda", t.kl_lambda},
        {"value_coef", t.value_coef},
        {"distill_coef", t.distill_coef},
        {"entropy_coef", t.entropy_coef},
        {"eval_episodes", t.eval_episodes},
        {"eval_seed", t.eval_seed},
        {"checkpoint_every_evals", t.checkpoint_every_evals},
        {"seed", t.seed},
        {"variant", std::string(to_string(t.variant))},
        {"hidden", t.hidden},
        {"heads", t.heads},
        {"timing", t.timing}}},
      {"risk",
       {{"beta", c.risk.beta},
        {"delta", c.risk.delta},
        {"conflict_radius", c.risk.conflict_radius},
        {"horizon", c.risk.horizon}}},
      {"teacher",
       {{"backend", k.backend},
        {"endpoint", k.endpoint},
        {"model", k.model},
        {"temperature", k.temperature},
        {"timeout_s", k.timeout_s},
        {"n_shot", k.n_shot},
        {"memory_capacity", k.memory_capacity},
        {"memory_file", k.memory_file},
        {"max_retries", k.max_retries},
        {"max_tokens", k.max_tokens},
        {"record", k.record},
        {"replay", k.replay}}},
      {"output_dir", c.output_dir}};
}

namespace {

// Strict reader over one JSON object: each read marks the key as known and
// finish() rejects whatever is left.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, int& out) {
    std::int64_t tmp = out;
    read(key, tmp);
    out = static_cast<int>(tmp);
  }
  void read(const std::string& key, std::int64_t& out) {
    if (const auto* v = find(key)) {
      if (v->is_number_integer()) {
        out = v->get<std::int64_t>();
      } else if (v->is_number_float() && v->get<double>() == static_cast<double>(static_cast<std::int64_t>(v->get<double>()))) {
        out = static_cast<std::int64_t>(v->get<double>());  // accept 1e5
      } else {
        throw ConfigError(field(key), "expected an integer");
      }
    }
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        throw ConfigError(field(key), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<int>& out) {
    if (const auto* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) throw ConfigError(field(key), "expected an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }

  std::optional<Section> child(const std::string& key) {
    if (const auto* v = find(key)) return Section(*v, field(key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!known_.count(key)) throw ConfigError(field(key), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

void read_scenario(Section& s, GlobalConfig& c) {
  s.read("preset", c.scenario_preset);
  auto& sc = c.scenario;
  sc = scenario_preset(c.scenario_preset);
  s.read("n_background", sc.n_background);
  s.read("spawn_speed_mean", sc.spawn_speed_mean);
  s.read("spawn_speed_std", sc.spawn_speed_std);
  s.read("disturbance_fraction", sc.disturbance_fraction);
  s.read("dt_physics", sc.dt_physics);
  s.read("decision_period", sc.decision_period);
  s.read("horizon", sc.horizon);
  if (auto r = s.child("success_region")) {
    r->read("lanes", sc.success_region.lanes);
    std::string axis = sc.success_region.axis == sim::Axis::X ? "x" : "y";
    r->read("axis", axis);
    if (axis != "x" && axis != "y") throw ConfigError(r->field("axis"), "must be \"x\" or \"y\"");
    sc.success_region.axis = axis == "x" ? sim::Axis::X : sim::Axis::Y;
    r->read("threshold", sc.success_region.threshold);
    r->finish();
  }
  if (auto r = s.child("reward")) {
    r->read("v_lo", sc.reward.v_lo);
    r->read("v_hi", sc.reward.v_hi);
    r->read("w_speed", sc.reward.w_speed);
    r->read("w_collision", sc.reward.w_collision);
    r->read("w_off_road", sc.reward.w_off_road);
    r->read("w_success", sc.reward.w_success);
    r->finish();
  }
  s.read("ego_initial_speed", sc.ego_initial_speed);
  s.read("desired_speed", sc.desired_speed);
  s.read("neighbor_slots", sc.neighbor_slots);
  s.read("sensing_radius", sc.sensing_radius);
  s.finish();
}

void read_train(Section& s, TrainConfig& t) {
  s.read("total_steps", t.total_steps);
  s.read("eval_interval", t.eval_interval);
  s.read("rollout_size", t.rollout_size);
  s.read("batch_size", t.batch_size);
  s.read("lr", t.lr);
  s.read("gamma", t.gamma);
  s.read("gae_lambda", t.gae_lambda);
  s.read("clip_initial", t.clip_initial);
  s.read("clip_floor", t.clip_floor);
  s.read("epochs", t.epochs);
  s.read("teacher_window_fraction", t.teacher_window_fraction);
  s.read("sigma_initial", t.sigma_initial);
  s.read("sigma_final", t.sigma_final);
  s.read("kl_lambda", t.kl_lambda);
  s.read("value_coef", t.value_coef);
  s.read("distill_coef", t.distill_coef);
  s.read("entropy_coef", t.entropy_coef);
  s.read("eval_episodes", t.eval_episodes);
  s.read("eval_seed", t.eval_seed);
  s.read("checkpoint_every_evals", t.checkpoint_every_evals);
  s.read("seed", t.seed);
  std::string variant(to_string(t.variant));
  s.read("variant", variant);
  const auto v = variant_from_string(variant);
  if (!v) throw ConfigError(s.field("variant"), "unknown variant '" + variant + "' (v-ppo|a-ppo|la-ppo)");
  t.variant = *v;
  s.read("hidden", t.hidden);
  s.read("heads", t.heads);
  s.read("timing", t.timing);
  s.finish();
}

}  // namespace

GlobalConfig parse_config(const json& doc) {
  GlobalConfig c;
  Section root(doc, "");
  if (auto s = root.child("scenario")) read_scenario(*s, c);
  if (auto s = root.child("train")) read_train(*s, c.train);
  if (auto s = root.child("risk")) {
    s->read("beta", c.risk.beta);
    s->read("delta", c.risk.delta);
    s->read("conflict_radius", c.risk.conflict_radius);
    s->read("horizon", c.risk.horizon);
    s->finish();
  }
  if (auto s = root.child("teacher")) {
    auto& t = c.teacher;
    s->read("backend", t.backend);
    s->read("endpoint", t.endpoint);
    s->read("model", t.model);
    s->read("temperature", t.temperature);
    s->read("timeout_s", t.timeout_s);
    s->read("n_shot", t.n_shot);
    s->read("memory_capacity", t.memory_capacity);
    s->read("memory_file", t.memory_file);
    s->read("max_retries", t.max_retries);
    s->read("max_tokens", t.max_tokens);
    s->read("record", t.record);
    s->read("replay", t.replay);
    s->finish();
  }
  root.read("output_dir", c.output_dir);
  root.finish();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError(path, "empty component in override key");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError(path, "'" + parts[i] + "' is not a section");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError(path, "parent is not a section");
  (*node)[parts.back()] = value;
}

json read_config_document(const std::filesystem::path& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string(), "config file is not valid JSON: " + path.string());
  return doc;
}

GlobalConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = read_config_document(path);
  for (const auto& o : overrides) apply_override(doc, o);
  auto c = parse_config(doc);
  c.validate();
  return c;
}

}  // namespace telldrive::trainer
