#include "telldrive/cli/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "telldrive/errors.hpp"
#include "telldrive/sim/trace.hpp"

namespace telldrive::cli {

using nlohmann::json;
using trainer::GlobalConfig;

namespace {

/// Flags shared by the subcommands that build a GlobalConfig.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string scenario;
  std::string out_dir;
  std::string record;
  std::string replay;
  std::vector<std::string> sets;
  bool verbose = false;
};

void add_config_flags(CLI::App* app, ConfigFlags& f, bool with_variant = true) {
  app->add_option("--config", f.config_path, "JSON config file");
  app->add_option("--seed", f.seed, "run seed");
  if (with_variant) app->add_option("--variant", f.variant, "v-ppo | a-ppo | la-ppo");
  app->add_option("--scenario", f.scenario, "scenario preset: merge-lite | merge | highway | intersection");
  app->add_option("--out", f.out_dir, "output directory");
  app->add_option("--record", f.record, "record the teacher transcript to this JSONL file");
  app->add_option("--replay", f.replay, "serve teacher replies from this JSONL transcript");
  app->add_option("--set", f.sets, "dotted override, e.g. train.total_steps=2000 (repeatable)");
  app->add_flag("--verbose", f.verbose, "print more detail");
}

json replace_scenario(json doc, const std::string& preset) {
  trainer::scenario_preset(preset);  // rejects unknown names with a ConfigError
  doc["scenario"] = {{"preset", preset}};
  return doc;
}

GlobalConfig build_config(const ConfigFlags& f) {
  auto doc = trainer::read_config_document(f.config_path);
  if (!doc.is_object()) throw ConfigError(f.config_path, "config root must be an object");
  for (const auto& s : f.sets) trainer::apply_override(doc, s);
  if (!f.scenario.empty()) doc = replace_scenario(doc, f.scenario);
  if (f.seed) trainer::apply_override(doc, "train.seed=" + std::to_string(*f.seed));
  if (!f.variant.empty()) {
    if (!trainer::variant_from_string(f.variant))
      throw ConfigError("--variant", "unknown variant '" + f.variant + "' (v-ppo|a-ppo|la-ppo)");
    doc["train"]["variant"] = f.variant;
  }
  if (!f.out_dir.empty()) doc["output_dir"] = f.out_dir;
  if (!f.record.empty()) doc["teacher"]["record"] = f.record;
  if (!f.replay.empty()) doc["teacher"]["replay"] = f.replay;
  auto c = trainer::parse_config(doc);
  c.validate();
  return c;
}

std::string describe(const trainer::EvalReport& r, bool with_time) {
  std::ostringstream os;
  os << std::setprecision(6) << "step=" << r.step << " episodes=" << r.episodes << " success_rate=" << r.success_rate
     << " eval_reward=" << r.eval_reward << " avg_speed=" << r.avg_speed << " delta_ttcp=" << r.delta_ttcp;
  if (with_time) os << " decision_time_s=" << r.decision_time;
  return os.str();
}

teacher::Teacher make_teacher(const GlobalConfig& c, const trainer::BackendFactory& factory) {
  const auto& t = c.teacher;
  teacher::MemoryRepository memory(t.memory_capacity);
  if (!t.memory_file.empty() && std::filesystem::exists(t.memory_file))
    memory = teacher::MemoryRepository::load(t.memory_file);
  teacher::TeacherOptions options;
  options.n_shot = t.n_shot;
  options.decide.max_retries = t.max_retries;
  options.decide.temperature = t.temperature;
  options.decide.max_tokens = t.max_tokens;
  options.risk = c.risk;
  return teacher::Teacher(factory(t), std::move(memory), options);
}

void print_decision(std::ostream& out, const teacher::TeacherDecision& d) {
  out << "action: " << sim::to_token(d.action) << '\n'
      << "source: " << teacher::to_string(d.source) << '\n'
      << "attempts: " << d.attempts << '\n'
      << "rationale: " << d.rationale << '\n';
}

void print_prompt(std::ostream& out, const teacher::Prompt& p) {
  for (const auto& m : p.messages) out << "[" << m.role << "]\n" << m.content << '\n';
}

// ---------------------------------------------------------------------------

int cmd_train(const ConfigFlags& f, const std::string& resume, std::optional<std::int64_t> stop_after,
              std::ostream& out, const trainer::BackendFactory& factory) {
  auto tr = resume.empty() ? trainer::Trainer(build_config(f), factory)
                           : trainer::Trainer::resume(resume, f.out_dir, factory);
  const auto& c = tr.config();
  out << "training " << trainer::to_string(c.train.variant) << " on " << c.scenario_preset << " seed "
      << c.train.seed << " for " << c.train.total_steps << " steps -> " << c.output_dir << '\n';
  const auto last = tr.run(stop_after);
  if (f.verbose)
    for (const auto& r : tr.evals()) out << "eval " << describe(r, true) << '\n';
  if (last) out << "final eval: " << describe(*last, f.verbose) << '\n';
  if (tr.teacher_constructed())
    out << "teacher queries: " << tr.teacher_queries() << " (window decisions " << tr.window_decisions() << ")\n";
  return kOk;
}

int cmd_eval(const ConfigFlags& f, const std::string& checkpoint, std::optional<int> episodes, std::ostream& out) {
  auto side = std::filesystem::path(checkpoint);
  side.replace_extension(".json");
  GlobalConfig c;
  if (f.config_path.empty() && std::filesystem::exists(side)) {
    std::ifstream in(side);
    const auto state = json::parse(in, nullptr, false);
    if (state.is_discarded() || !state.contains("config"))
      throw CheckpointError("checkpoint state file is not valid: " + side.string());
    auto doc = state["config"];
    if (!f.scenario.empty()) doc = replace_scenario(doc, f.scenario);
    if (!f.out_dir.empty()) doc["output_dir"] = f.out_dir;
    if (!f.variant.empty()) doc["train"]["variant"] = f.variant;
    for (const auto& s : f.sets) trainer::apply_override(doc, s);
    c = trainer::parse_config(doc);
    c.validate();
  } else {
    c = build_config(f);
  }
  policy::FusionPolicyNet net(trainer::net_config(c), c.train.seed);
  tensor::load_checkpoint(checkpoint, net.params(), net.arch_hash());

  const int n = episodes.value_or(c.train.eval_episodes);
  const auto seed_base = f.seed.value_or(c.train.eval_seed);
  auto report = trainer::evaluate(net, c.scenario, c.risk, n, seed_base);
  // Report the checkpoint's training step when the sidecar knows it.
  if (std::filesystem::exists(side)) {
    std::ifstream in(side);
    const auto state = json::parse(in, nullptr, false);
    if (!state.is_discarded() && state.contains("step")) report.step = state["step"].get<std::int64_t>();
  }
  out << "eval " << c.scenario_preset << " " << trainer::to_string(c.train.variant) << ": "
      << describe(report, f.verbose) << '\n';

  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "eval.csv");
  csv << trainer::metrics_header() << '\n'
      << trainer::metrics_row(report, c.train.variant, c.scenario_preset, seed_base, true) << '\n';
  if (!csv) throw std::runtime_error("cannot write " + (dir / "eval.csv").string());
  return kOk;
}

int cmd_teacher(const ConfigFlags& f, const std::string& state_file, int line_no, std::optional<int> live,
                std::ostream& out, const trainer::BackendFactory& factory) {
  if (state_file.empty() == !live) throw ConfigError("teacher", "give exactly one of --state FILE or --live STEPS");
  auto c = build_config(f);
  auto teacher = make_teacher(c, factory);

  if (!live) {
    std::ifstream in(state_file);
    if (!in) throw ConfigError("--state", "cannot open state file " + state_file);
    std::vector<json> records;
    std::string text;
    int n = 0;
    while (std::getline(in, text)) {
      ++n;
      if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto rec = json::parse(text, nullptr, false);
      if (rec.is_discarded() || !rec.is_object())
        throw ConfigError(state_file + ":" + std::to_string(n), "line " + std::to_string(n) + " is not a JSON object");
      try {
        if (static_cast<int>(records.size()) + 1 == line_no) sim::state_from_trace(rec, c.scenario);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(state_file + ":" + std::to_string(n), "line " + std::to_string(n) + ": " + e.what());
      }
      records.push_back(std::move(rec));
    }
    if (line_no < 1 || line_no > static_cast<int>(records.size()))
      throw ConfigError("--line", "state file has " + std::to_string(records.size()) + " records");
    auto st = sim::state_from_trace(records[static_cast<std::size_t>(line_no - 1)], c.scenario);
    st.risk = c.risk;
    const auto obs = sim::observe(st);
    if (f.verbose) print_prompt(out, teacher.prompt_for(st, obs));
    print_decision(out, teacher.decide_step(st, obs));
    return kOk;
  }

  auto [st, obs] = sim::reset(c.scenario, c.train.seed);
  st.risk = c.risk;
  sim::EventSet events;
  for (int i = 0; i < *live && !st.terminal; ++i) {
    if (f.verbose) print_prompt(out, teacher.prompt_for(st, obs));
    const auto d = teacher.decide_step(st, obs);
    out << "step " << st.step_count << " x=" << st.ego().position.x << " y=" << st.ego().position.y
        << " speed=" << st.ego().speed << '\n';
    print_decision(out, d);
    auto outcome = sim::step(st, d.action);
    obs = std::move(outcome.observation);
    events = outcome.events;
  }
  out << "episode: steps=" << st.step_count << " events=" << json(events.names()).dump() << '\n';
  return kOk;
}

int cmd_ablate(const ConfigFlags& f, const std::vector<std::uint64_t>& seeds_flag, std::ostream& out,
               std::ostream& err, const trainer::BackendFactory& factory) {
  const auto base = build_config(f);
  std::vector<std::uint64_t> seeds = seeds_flag;
  if (seeds.empty()) {
    const auto s0 = f.seed.value_or(1);
    seeds = {s0, s0 + 1, s0 + 2};
  }
  const std::vector<trainer::Variant> variants{trainer::Variant::VPpo, trainer::Variant::APpo,
                                               trainer::Variant::LaPpo};
  const std::filesystem::path dir = base.output_dir;
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "ablation.csv");
  csv << trainer::metrics_header() << '\n';
  const bool wall = base.train.timing == "wall";

  std::map<trainer::Variant, std::vector<std::vector<trainer::EvalReport>>> results;
  bool failed = false;
  for (const auto seed : seeds) {
    for (const auto v : variants) {
      auto c = base;
      c.train.variant = v;
      c.train.seed = seed;
      c.output_dir = (dir / std::string(trainer::to_string(v)) / ("seed_" + std::to_string(seed))).string();
      try {
        trainer::Trainer tr(c, factory);
        tr.run();
        for (const auto& r : tr.evals())
          csv << trainer::metrics_row(r, v, c.scenario_preset, seed, wall) << '\n';
        csv.flush();
        results[v].push_back(tr.evals());
        out << "done " << trainer::to_string(v) << " seed " << seed;
        if (!tr.evals().empty()) out << ": " << describe(tr.evals().back(), false);
        out << '\n';
      } catch (const std::exception& e) {
        failed = true;
        err << "run " << trainer::to_string(v) << " seed " << seed << " failed: " << e.what() << '\n';
      }
    }
  }

  std::ofstream md(dir / "summary.md");
  md << "| scenario | variant | runs | final_return | final_success | auc_return |\n"
     << "|---|---|---|---|---|---|\n";
  for (const auto v : variants) {
    const auto& runs = results[v];
    double final_return = 0.0, final_success = 0.0, auc = 0.0;
    std::size_t used = 0;
    // mean learning curve over the runs, on the grid they share
    std::vector<double> steps, mean;
    if (!runs.empty()) {
      std::size_t len = runs.front().size();
      for (const auto& r : runs) len = std::min(len, r.size());
      for (std::size_t i = 0; i < len; ++i) {
        double sum = 0.0;
        for (const auto& r : runs) sum += r[i].eval_reward;
        steps.push_back(static_cast<double>(runs.front()[i].step));
        mean.push_back(sum / static_cast<double>(runs.size()));
      }
      for (const auto& r : runs) {
        if (r.empty()) continue;
        final_return += r.back().eval_reward;
        final_success += r.back().success_rate;
        ++used;
      }
      if (used) {
        final_return /= static_cast<double>(used);
        final_success /= static_cast<double>(used);
      }
      if (!steps.empty()) auc = normalized_auc(steps, mean);
    }
    md << "| " << base.scenario_preset << " | " << trainer::to_string(v) << " | " << runs.size() << " | "
       << std::setprecision(4) << final_return << " | " << final_success << " | " << auc << " |\n";
  }
  out << "wrote " << (dir / "ablation.csv").string() << " and " << (dir / "summary.md").string() << '\n';
  return failed ? kRuntimeError : kOk;
}

}  // namespace

double normalized_auc(const std::vector<double>& steps, const std::vector<double>& values) {
  if (steps.size() != values.size() || steps.empty()) throw UsageError("normalized_auc: need matching, nonempty series");
  if (steps.size() == 1) return values.front();
  double area = 0.0;
  for (std::size_t i = 1; i < steps.size(); ++i) area += 0.5 * (values[i] + values[i - 1]) * (steps[i] - steps[i - 1]);
  const double span = steps.back() - steps.front();
  return span > 0.0 ? area / span : values.back();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, trainer::BackendFactory factory) {
  CLI::App app{"LLM-guided attention PPO for autonomous driving: training, evaluation and teacher tools"};
  app.name(args.empty() ? "telldrive" : args.front());
  app.require_subcommand(1);

  ConfigFlags train_flags, eval_flags, teacher_flags, ablate_flags;
  std::string resume;
  std::optional<std::int64_t> stop_after;
  auto* train = app.add_subcommand("train", "train one variant on one scenario");
  add_config_flags(train, train_flags);
  train->add_option("--resume", resume, "continue from a checkpoint (.tdck) written by an earlier run");
  train->add_option("--stop-after", stop_after, "stop at the first update boundary at or after this step");

  std::string checkpoint;
  std::optional<int> episodes;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint greedily");
  add_config_flags(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (.tdck)")->required();
  eval->add_option("-n,--episodes", episodes, "number of evaluation episodes");

  std::string state_file;
  int line_no = 1;
  std::optional<int> live;
  auto* teach = app.add_subcommand("teacher", "ask the teacher for one decision or drive an episode with it");
  add_config_flags(teach, teacher_flags, false);
  teach->add_option("--state", state_file, "episode trace JSONL; the record at --line is used");
  teach->add_option("--line", line_no, "1-based record number in the state file");
  teach->add_option("--live", live, "drive a fresh episode for this many steps");

  std::vector<std::uint64_t> seeds;
  auto* ablate = app.add_subcommand("ablate", "run v-ppo, a-ppo and la-ppo on shared seeds");
  add_config_flags(ablate, ablate_flags, false);
  ablate->add_option("--seeds", seeds, "seeds to run (default: --seed and the next two)")->delimiter(',');

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return cmd_train(train_flags, resume, stop_after, out, factory);
    if (*eval) return cmd_eval(eval_flags, checkpoint, episodes, out);
    if (*teach) return cmd_teacher(teacher_flags, state_file, line_no, live, out, factory);
    if (*ablate) return cmd_ablate(ablate_flags, seeds, out, err, factory);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kArtifactMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}

}  // namespace telldrive::cli
