// Command-line front end: train, audit, oracle, heatmap, gain.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "empower/agents.hpp"
#include "empower/checkpoint.hpp"
#include "empower/config.hpp"
#include "empower/envs.hpp"
#include "empower/errors.hpp"
#include "empower/harness.hpp"
#include "empower/oracle.hpp"

using nlohmann::json;
using namespace empower;

namespace {

enum Exit { ok = 0, other = 1, config = 2, parse = 3, numeric = 4 };

struct Common {
  std::string world;
  std::string world_file;
  std::string algo;
  std::optional<int> tmax;
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--world", c.world, "world name");
  app->add_option("--algo", c.algo, "vic, alg1, alg2 or random");
  app->add_option("--tmax", c.tmax, "override T_max");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--config", c.config, "config file (key = value lines)");
  app->add_option("--out", c.out, "output path");
}

TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : read_config(c.config);
  if (!c.world.empty()) cfg.world = c.world;
  if (!c.algo.empty()) cfg.algo = parse_algo(c.algo);
  if (c.tmax) cfg.t_max = *c.tmax;
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

WorldSpec resolve_world(const Common& c) {
  if (!c.world_file.empty()) {
    WorldSpec w = load_world_file(c.world_file);
    if (c.tmax) w.t_max = *c.tmax;
    w.validate();
    return w;
  }
  WorldOverrides ov;
  ov.t_max = c.tmax;
  try {
    return make_world(c.world.empty() ? "det-1d" : c.world, ov);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << body;
}

void emit_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(path, j.dump(2) + "\n");
  }
}

std::string trace_text(const WorldSpec& w, const Trajectory& t) {
  std::ostringstream out;
  out << t.start.index;
  for (const auto& s : t.steps) out << ' ' << w.action_name(s.action) << ' ' << s.next.index;
  return out.str();
}

int cmd_train(const Common& c, int repetitions, int batches, int warmup, unsigned threads) {
  TrainConfig cfg = resolve_config(c);
  if (repetitions > 0) cfg.repetitions = repetitions;
  if (batches >= 0) cfg.total_batches = batches;
  if (warmup >= 0) cfg.warmup_batches = warmup;
  cfg.validate();
  const std::string dir = c.out.empty() ? "run" : c.out;
  std::filesystem::create_directories(dir);
  RunOptions opts;
  opts.out_dir = cfg.checkpoint_every > 0 ? dir : "";
  const ExperimentReport rep = run_experiment(cfg, opts, threads);
  write_text(dir + "/log.csv", rep.csv());
  write_text(dir + "/config.ini", config_to_text(cfg));
  const WorldSpec world = make_world(cfg.world, cfg.overrides());
  std::vector<double> pooled(static_cast<std::size_t>(world.num_states()), 0.0);
  json runs = json::array();
  for (const auto& r : rep.runs) {
    for (std::size_t i = 0; i < pooled.size(); ++i) pooled[i] += r.final_distribution[i] / cfg.repetitions;
    runs.push_back({{"run_id", r.run_id}, {"seed", r.seed}, {"final_i_hat", r.final_i_hat}});
    save_bundle(dir + "/run" + std::to_string(r.run_id) + ".ckpt", *r.bundle);
  }
  if (world.dim <= 2) emit_heatmap(world, pooled, dir + "/heatmap");
  const double ceiling = std::log(static_cast<double>(reachable_final_states(world, world.start_states[0]).size()));
  json report = {{"algo", algo_name(cfg.algo)},
                 {"world", cfg.world},
                 {"final_mean_i_hat", rep.final_mean_i_hat},
                 {"ceiling", ceiling},
                 {"runs", runs}};
  write_text(dir + "/report.json", report.dump(2) + "\n");
  std::cout << "final mean i_hat " << rep.final_mean_i_hat << " nats (ceiling " << ceiling << ")\n";
  return ok;
}

int cmd_audit(const Common& c, const std::string& policy_path, std::vector<double> sigmas, int max_options) {
  const WorldSpec world = resolve_world(c);
  TabularPolicy policy = policy_path.empty() ? TabularPolicy{} : load_policy_file(world, policy_path);
  const StateId start = world.start_states.at(0);
  const ExactAnalysis an = analyze(world, policy, start);

  json options = json::array();
  double total = 0.0;
  for (const auto& o : an.options) {
    total += o.prob;
    if (static_cast<int>(options.size()) < max_options) {
      options.push_back({{"trace", trace_text(world, o.omega)},
                         {"prob", o.prob},
                         {"bias", exact_bias(an, o.omega)},
                         {"policy_reward", exact_policy_reward(an, o.omega)}});
    }
  }
  json post_action = json::array();
  json post_trans = json::array();
  for (const auto& [key, node] : an.prefixes) {
    if (static_cast<int>(post_action.size()) >= max_options) break;
    for (std::size_t sf = 0; sf < node.finals.size(); ++sf) {
      if (node.finals[sf] <= 0.0) continue;
      const StateId f{static_cast<int>(sf)};
      json probs = json::object();
      for (std::size_t a = 0; a < node.policy.size(); ++a) {
        const ActionId act{static_cast<int>(a)};
        const double p = an.posterior_action(node.prefix, act, f);
        if (p > 0.0) probs[world.action_name(act)] = p;
        if (world.is_terminate(act) || node.policy[a] <= 0.0 || node.finals_after[a][sf] <= 0.0) continue;
        json row = json::object();
        for (const auto& o : world.table.row(node.prefix.current(), act)) {
          row[std::to_string(o.next.index)] = an.posterior_trans(node.prefix, act, o.next, f);
        }
        post_trans.push_back({{"prefix", trace_text(world, node.prefix)},
                              {"action", world.action_name(act)},
                              {"sf", sf},
                              {"probs", row}});
      }
      post_action.push_back({{"prefix", trace_text(world, node.prefix)}, {"sf", sf}, {"probs", probs}});
    }
  }
  ExactModels exact(an);
  const VariationalEstimate ve = exact_ive_and_uve(an, exact);
  json bounds = json::array();
  for (double s : sigmas) {
    const SmoothingBounds b = smoothing_bound_check(an, s);
    ExactModels smoothed(an, s);
    const SmoothedEstimate se = exact_smoothed_estimate(an, smoothed);
    bounds.push_back({{"sigma", s},
                      {"difference", b.difference},
                      {"lower", b.lower},
                      {"upper", b.upper},
                      {"lower_mean", b.lower_mean},
                      {"upper_mean", b.upper_mean},
                      {"t_bar", b.t_bar},
                      {"t_max", b.t_max},
                      {"p_min", b.p_min},
                      {"p_min_f", b.p_min_f},
                      {"d_min", b.d_min},
                      {"holds", b.holds},
                      {"i_ve_sigma", se.i_ve_sigma},
                      {"u_sigma_1", se.u_sigma_1},
                      {"u_sigma_2", se.u_sigma_2}});
  }
  json report = {{"world", world.name},
                 {"start", start.index},
                 {"t_max", world.t_max},
                 {"num_options", an.options.size()},
                 {"total_probability", total},
                 {"I", an.mutual_information},
                 {"H_sf", exact_mutual_information(an)},
                 {"I_from_rewards", mutual_information_from_rewards(an)},
                 {"final_marginal", an.final_marginal},
                 {"options", options},
                 {"posterior_action", post_action},
                 {"posterior_trans", post_trans},
                 {"i_ve", ve.i_ve},
                 {"u_ve", ve.u_ve},
                 {"smoothing", bounds}};
  emit_json(report, c.out);
  return ok;
}

int cmd_oracle(const Common& c, bool dump_world) {
  const WorldSpec world = resolve_world(c);
  if (dump_world) {
    std::cout << world_to_text(world);
    return ok;
  }
  json starts = json::array();
  for (auto s : world.start_states) {
    const auto reach = reachable_final_states(world, s);
    json entry = {{"start", s.index},
                  {"reachable", reach.size()},
                  {"ceiling", std::log(static_cast<double>(reach.size()))}};
    try {
      // Large worlds are reported without I rather than enumerated for minutes.
      const ExactAnalysis an = analyze(world, TabularPolicy{}, s, 100000);
      entry["uniform_policy_I"] = an.mutual_information;
      entry["num_options"] = an.options.size();
    } catch (const std::length_error&) {
      entry["uniform_policy_I"] = nullptr;
    }
    starts.push_back(entry);
  }
  emit_json({{"world", world.name}, {"t_max", world.t_max}, {"states", world.num_states()}, {"starts", starts}},
            c.out);
  return ok;
}

int cmd_heatmap(Common c, const std::string& checkpoint, int episodes) {
  if (c.algo.empty()) {
    // Take the algorithm from the checkpoint manifest.
    const std::string manifest = read_checkpoint_manifest(checkpoint);
    if (manifest.rfind("algo=", 0) == 0) c.algo = manifest.substr(5, manifest.find(';') - 5);
  }
  const TrainConfig cfg = resolve_config(c);
  const WorldSpec world = make_world(cfg.world, cfg.overrides());
  Rng init(0);
  AgentBundle bundle(cfg.algo, world, cfg.model(), init, cfg.init_std);
  load_bundle(checkpoint, bundle);
  Rng rng = Rng::stream(cfg.seed, {7});
  const EvalResult ev = evaluate_policy(bundle, world, rng, episodes);
  emit_heatmap(world, ev.final_distribution, c.out.empty() ? "heatmap" : c.out);
  std::cout << "i_hat " << entropy_nats(ev.final_distribution) << " nats over " << episodes << " episodes\n";
  return ok;
}

double read_estimate(const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  std::ifstream in(v);
  if (!in) throw std::runtime_error("'" + v + "' is neither a number nor a readable report");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report ") + v + ": " + e.what(), 1);
  }
  if (!j.contains("final_mean_i_hat")) throw ParseError("report " + v + " has no final_mean_i_hat", 1);
  return j.at("final_mean_i_hat").get<double>();
}

int cmd_gain(const std::string& alg, const std::string& vic) {
  const double a = read_estimate(alg);
  const double b = read_estimate(vic);
  const Gain g = compute_gain(a, b);
  std::cout << json({{"i_alg", a}, {"i_vic", b}, {"gain_percent", g.percent}, {"ratio", g.ratio}}).dump(2) << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"empowerment agents and exact oracle"};
  app.require_subcommand(1);

  Common train_c, audit_c, oracle_c, heat_c;
  int reps = 0, batches = -1, warmup = -1;
  unsigned threads = 0;
  auto* train = app.add_subcommand("train", "train agents and write log.csv, report.json, heatmap and checkpoints");
  add_common(train, train_c);
  train->add_option("--repetitions", reps, "override repetitions");
  train->add_option("--batches", batches, "override total_batches");
  train->add_option("--warmup", warmup, "override warmup_batches");
  train->add_option("--threads", threads, "worker threads (0 = all cores)");

  std::string policy_path;
  std::vector<double> sigmas{0.1, 0.25};
  int max_options = 1000;
  auto* audit = app.add_subcommand("audit", "exact analysis of a world and tabular policy as JSON");
  add_common(audit, audit_c);
  audit->add_option("--world-file", audit_c.world_file, "world in flat text form");
  audit->add_option("--policy", policy_path, "tabular policy file (uniform if absent)");
  audit->add_option("--sigma", sigmas, "smoothing widths for the bound check");
  audit->add_option("--max-listed", max_options, "cap on listed options and prefixes");

  bool dump_world = false;
  auto* oracle = app.add_subcommand("oracle", "reachable finals, ceiling and uniform-policy I");
  add_common(oracle, oracle_c);
  oracle->add_option("--world-file", oracle_c.world_file, "world in flat text form");
  oracle->add_flag("--dump-world", dump_world, "print the world in flat text form");

  std::string checkpoint;
  int episodes = 10000;
  auto* heat = app.add_subcommand("heatmap", "final-state heatmap of a trained policy");
  add_common(heat, heat_c);
  heat->add_option("--checkpoint", checkpoint, "bundle checkpoint")->required();
  heat->add_option("--episodes", episodes, "evaluation episodes");

  std::string alg_v, vic_v;
  auto* gain = app.add_subcommand("gain", "empowerment gain of an algorithm over vic");
  gain->add_option("--alg", alg_v, "estimate or report.json")->required();
  gain->add_option("--vic", vic_v, "estimate or report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config;
  }

  try {
    if (*train) return cmd_train(train_c, reps, batches, warmup, threads);
    if (*audit) return cmd_audit(audit_c, policy_path, sigmas, max_options);
    if (*oracle) return cmd_oracle(oracle_c, dump_world);
    if (*heat) return cmd_heatmap(heat_c, checkpoint, episodes);
    if (*gain) return cmd_gain(alg_v, vic_v);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return parse;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return other;
  }
  return other;
}
