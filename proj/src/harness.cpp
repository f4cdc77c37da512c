#include "empower/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "empower/errors.hpp"

namespace empower {

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

EmpowermentEstimator::EmpowermentEstimator(int num_states, double decay)
    : dist_(static_cast<std::size_t>(num_states), 0.0), decay_(decay) {
  if (num_states < 1) throw std::invalid_argument("estimator: need at least one state");
  if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("estimator: decay must lie in (0, 1)");
}

double EmpowermentEstimator::update(std::span<const StateId> batch_finals) {
  if (batch_finals.empty()) throw std::invalid_argument("estimator: empty batch");
  std::vector<double> emp(dist_.size(), 0.0);
  const double w = 1.0 / static_cast<double>(batch_finals.size());
  for (auto s : batch_finals) emp.at(static_cast<std::size_t>(s.index)) += w;
  if (!initialized_) {
    dist_ = std::move(emp);
    initialized_ = true;
  } else {
    for (std::size_t i = 0; i < dist_.size(); ++i) dist_[i] = decay_ * dist_[i] + (1.0 - decay_) * emp[i];
  }
  return value();
}

double EmpowermentEstimator::value() const { return entropy_nats(dist_); }

void EmpowermentEstimator::set_distribution(std::vector<double> dist) {
  if (dist.size() != dist_.size()) throw std::invalid_argument("estimator: distribution has the wrong size");
  dist_ = std::move(dist);
  initialized_ = true;
}

ConditionalEstimator::ConditionalEstimator(const WorldSpec& world, double decay)
    : world_(&world), starts_(world.start_states) {
  for (std::size_t i = 0; i < starts_.size(); ++i) per_start_.emplace_back(world.num_states(), decay);
}

double ConditionalEstimator::update(std::span<const Trajectory> batch) {
  for (std::size_t k = 0; k < starts_.size(); ++k) {
    std::vector<StateId> finals;
    for (const auto& t : batch) {
      if (t.start == starts_[k]) finals.push_back(t.final_state(*world_));
    }
    if (!finals.empty()) per_start_[k].update(finals);
  }
  return value();
}

double ConditionalEstimator::value() const {
  double sum = 0.0;
  for (const auto& e : per_start_) sum += e.value();
  return sum / static_cast<double>(per_start_.size());
}

const EmpowermentEstimator& ConditionalEstimator::at(StateId start) const {
  for (std::size_t k = 0; k < starts_.size(); ++k) {
    if (starts_[k] == start) return per_start_[k];
  }
  throw std::invalid_argument("estimator: not a start state");
}

std::vector<double> ConditionalEstimator::pooled() const {
  std::vector<double> out(static_cast<std::size_t>(world_->num_states()), 0.0);
  for (const auto& e : per_start_) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += e.distribution()[i] / static_cast<double>(per_start_.size());
  }
  return out;
}

const char* csv_header() {
  return "run_id,algo,world,seed,batch,episodes,i_hat,policy_term,transition_term,external_term,baseline,wall_ms";
}

std::string csv_line(const RunRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%s,%s,%llu,%d,%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f", r.run_id,
                algo_name(r.algo), r.world.c_str(), static_cast<unsigned long long>(r.seed), r.batch,
                static_cast<long long>(r.episodes), r.i_hat, r.policy_term, r.transition_term, r.external_term,
                r.baseline, r.wall_ms);
  return buf;
}

std::uint64_t run_seed(std::uint64_t master, int run_id) {
  return Rng::stream(master, {static_cast<std::uint64_t>(run_id)}).key();
}

RunResult run_single(const TrainConfig& cfg, int run_id, const RunOptions& opts) {
  cfg.validate();
  const WorldSpec world = make_world(cfg.world, cfg.overrides());
  RunResult res;
  res.run_id = run_id;
  res.seed = run_seed(cfg.seed, run_id);
  Rng init_rng = Rng::stream(res.seed, {0});
  res.bundle = std::make_unique<AgentBundle>(cfg.algo, world, cfg.model(), init_rng, cfg.init_std);
  AgentBundle& bundle = *res.bundle;

  ConditionalEstimator est(world, cfg.ema_decay);
  const auto t0 = std::chrono::steady_clock::now();
  const int total = cfg.warmup_batches + cfg.total_batches;
  std::int64_t episodes = 0;

  auto checkpoint = [&](const std::string& tag) {
    if (opts.out_dir.empty()) return;
    std::filesystem::create_directories(opts.out_dir);
    save_bundle(opts.out_dir + "/run" + std::to_string(run_id) + "_" + tag + ".ckpt", bundle);
  };

  for (int b = 0; b < total; ++b) {
    Rng batch_rng = Rng::stream(res.seed, {1, static_cast<std::uint64_t>(b)});
    BatchResult br;
    try {
      br = train_batch(bundle, world, cfg, batch_rng, b >= cfg.warmup_batches);
    } catch (const NumericError&) {
      checkpoint("abort");
      throw;
    }
    episodes += static_cast<std::int64_t>(br.episodes.size());
    const double i_hat = est.update(br.episodes);
    const bool last = b + 1 == total;
    const bool stop = opts.stop_at_i_hat && b >= cfg.warmup_batches && i_hat >= *opts.stop_at_i_hat;
    if ((b + 1) % cfg.log_every == 0 || last || stop) {
      RunRecord r;
      r.run_id = run_id;
      r.algo = cfg.algo;
      r.world = cfg.world;
      r.seed = res.seed;
      r.batch = b + 1;
      r.episodes = episodes;
      r.i_hat = i_hat;
      const double n = static_cast<double>(br.rewards.size());
      for (std::size_t i = 0; i < br.rewards.size(); ++i) {
        r.policy_term += br.rewards[i].policy_term / n;
        r.transition_term += br.rewards[i].transition_term / n;
        r.external_term += br.rewards[i].external_term / n;
        r.baseline += br.rewards[i].baseline / n;
      }
      if (cfg.record_wall_time) {
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      res.records.push_back(std::move(r));
    }
    if (cfg.checkpoint_every > 0 && (b + 1) % cfg.checkpoint_every == 0) checkpoint("b" + std::to_string(b + 1));
    if (stop) break;
  }
  res.final_distribution = est.pooled();
  res.final_i_hat = est.value();
  return res;
}

std::string ExperimentReport::csv() const {
  std::string out = csv_header();
  out += '\n';
  for (const auto& run : runs) {
    for (const auto& r : run.records) {
      out += csv_line(r);
      out += '\n';
    }
  }
  return out;
}

ExperimentReport run_experiment(const TrainConfig& cfg, const RunOptions& opts, unsigned threads) {
  cfg.validate();
  ExperimentReport rep;
  rep.config = cfg;
  const int n = cfg.repetitions;
  rep.runs.resize(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(n));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int i = next++; i < n; i = next++) {
      try {
        rep.runs[static_cast<std::size_t>(i)] = run_single(cfg, i, opts);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // Pointwise mean over repetitions; a run that stopped early holds its last value.
  std::map<int, int> index;
  for (const auto& run : rep.runs) {
    for (const auto& r : run.records) index.emplace(r.batch, 0);
  }
  for (auto& [batch, i] : index) {
    i = static_cast<int>(rep.batches.size());
    rep.batches.push_back(batch);
  }
  rep.mean_i_hat.assign(rep.batches.size(), 0.0);
  for (const auto& run : rep.runs) {
    std::size_t k = 0;
    double last = 0.0;
    for (std::size_t j = 0; j < rep.batches.size(); ++j) {
      while (k < run.records.size() && run.records[k].batch <= rep.batches[j]) last = run.records[k++].i_hat;
      rep.mean_i_hat[j] += last / n;
    }
  }
  for (const auto& run : rep.runs) rep.final_mean_i_hat += run.final_i_hat / n;
  return rep;
}

EvalResult evaluate_policy(AgentBundle& bundle, const WorldSpec& world, Rng& rng, int episodes) {
  if (episodes < 1) throw std::invalid_argument("evaluate_policy: need at least one episode");
  EvalResult res;
  res.episodes = episodes;
  res.final_distribution.assign(static_cast<std::size_t>(world.num_states()), 0.0);
  const auto batch = sample_batch(bundle, world, rng, episodes);
  for (const auto& t : batch) {
    const StateId sf = t.final_state(world);
    res.mean_external += external_reward(world, t) / episodes;
    if (world.room(sf) == RoomKind::special) ++res.special_hits;
    res.final_distribution[static_cast<std::size_t>(sf.index)] += 1.0 / episodes;
  }
  return res;
}

namespace {

void check_dist(const WorldSpec& world, std::span<const double> dist) {
  if (static_cast<int>(dist.size()) != world.num_states()) {
    throw std::invalid_argument("heatmap: distribution size does not match the world");
  }
  if (world.dim < 1 || world.dim > 2) throw std::invalid_argument("heatmap: needs a 1D or 2D world");
}

}  // namespace

std::string heatmap_csv(const WorldSpec& world, std::span<const double> dist) {
  check_dist(world, dist);
  std::ostringstream out;
  out << (world.dim == 1 ? "x" : "x,y") << ",probability\n";
  char buf[40];
  for (std::size_t s = 0; s < dist.size(); ++s) {
    for (int c : world.coords[s]) out << c << ',';
    std::snprintf(buf, sizeof buf, "%.12g", dist[s]);
    out << buf << '\n';
  }
  return out.str();
}

std::string heatmap_pgm(const WorldSpec& world, std::span<const double> dist) {
  check_dist(world, dist);
  int min_x = 0, max_x = 0, min_y = 0, max_y = 0;
  bool first = true;
  for (const auto& c : world.coords) {
    const int x = c[0];
    const int y = world.dim == 2 ? c[1] : 0;
    if (first) {
      min_x = max_x = x;
      min_y = max_y = y;
      first = false;
    }
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  // Tree coordinates are (depth, index): draw depth as the row.
  const bool tree = world.name.find("tree") != std::string::npos;
  const int width = tree ? max_y - min_y + 1 : max_x - min_x + 1;
  const int height = tree ? max_x - min_x + 1 : max_y - min_y + 1;
  const double peak = *std::max_element(dist.begin(), dist.end());
  std::vector<unsigned char> pixels(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), 0);
  for (std::size_t s = 0; s < dist.size(); ++s) {
    const int x = world.coords[s][0] - min_x;
    const int y = world.dim == 2 ? world.coords[s][1] - min_y : 0;
    const int col = tree ? y : x;
    const int row = tree ? x : y;
    const double v = peak > 0.0 ? dist[s] / peak : 0.0;
    pixels[static_cast<std::size_t>(row) * static_cast<std::size_t>(width) + static_cast<std::size_t>(col)] =
        static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
  }
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

void emit_heatmap(const WorldSpec& world, std::span<const double> dist, const std::string& base) {
  const std::string csv = heatmap_csv(world, dist);
  const std::string pgm = heatmap_pgm(world, dist);
  for (const auto& [path, body] : {std::pair{base + ".csv", &csv}, std::pair{base + ".pgm", &pgm}}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << *body;
    if (!out) throw std::runtime_error("failed writing " + path);
  }
}

Gain compute_gain(double i_alg, double i_vic) {
  if (i_vic == 0.0) throw std::domain_error("gain: baseline estimate is zero");
  const double ratio = i_alg / i_vic;
  return {100.0 * (ratio - 1.0), ratio};
}

}  // namespace empower
