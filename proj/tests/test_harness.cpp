#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "empower/config.hpp"
#include "empower/errors.hpp"
#include "empower/harness.hpp"
#include "empower/oracle.hpp"

using namespace empower;

namespace {

std::vector<StateId> repeat(std::initializer_list<std::pair<int, int>> counts) {
  std::vector<StateId> out;
  for (auto [s, n] : counts) out.insert(out.end(), static_cast<std::size_t>(n), StateId{s});
  return out;
}

TrainConfig tiny(Algo algo) {
  TrainConfig c;
  c.algo = algo;
  c.world = "stoch-1d";
  c.t_max = 2;
  c.hidden = 8;
  c.batch_size = 16;
  c.t_smooth = 4;
  c.n_gmm = 2;
  c.warmup_batches = 2;
  c.total_batches = 4;
  c.repetitions = 2;
  c.seed = 7;
  return c;
}

}  // namespace

TEST(Estimator, UniformOverFour) {
  EmpowermentEstimator e(11);
  EXPECT_FALSE(e.initialized());
  EXPECT_NEAR(e.update(repeat({{0, 32}, {1, 32}, {2, 32}, {3, 32}})), std::log(4.0), 1e-12);
  EXPECT_TRUE(e.initialized());
}

TEST(Estimator, SkewedPair) {
  EmpowermentEstimator e(2);
  e.set_distribution({0.99, 0.01});
  EXPECT_NEAR(e.value(), 0.0560, 1e-4);
}

TEST(Estimator, EmaDecaysTowardPointMass) {
  EmpowermentEstimator e(4, 0.9);
  e.update(repeat({{0, 1}, {1, 1}, {2, 1}, {3, 1}}));
  double prev = e.value();
  for (int i = 0; i < 300; ++i) {
    const double v = e.update(repeat({{2, 8}}));
    EXPECT_LE(v, prev + 1e-15);
    prev = v;
  }
  EXPECT_LT(prev, 1e-9);
  // Closed form of the EMA after k point-mass batches.
  EmpowermentEstimator f(2, 0.5);
  f.update(repeat({{0, 1}, {1, 1}}));
  f.update(repeat({{0, 4}}));
  EXPECT_NEAR(f.distribution()[0], 0.75, 1e-15);
  EXPECT_NEAR(f.distribution()[1], 0.25, 1e-15);
}

TEST(Estimator, RejectsBadInput) {
  EXPECT_THROW(EmpowermentEstimator(0), std::invalid_argument);
  EXPECT_THROW(EmpowermentEstimator(3, 1.5), std::invalid_argument);
  EmpowermentEstimator e(3);
  EXPECT_THROW(e.update(repeat({{5, 1}})), std::out_of_range);
  EXPECT_THROW(e.set_distribution({0.5, 0.5}), std::invalid_argument);
}

TEST(Estimator, ExactMarginalMatchesOracle) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 3});
  Rng rng(1);
  const ExactAnalysis an = analyze(w, random_tabular_policy(w, w.start_states[0], rng, 1.0), w.start_states[0]);
  EmpowermentEstimator e(w.num_states());
  e.set_distribution(an.final_marginal);
  EXPECT_NEAR(e.value(), an.mutual_information, 1e-12);
}

TEST(Estimator, SampledFinalsConverge) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 3});
  Rng prng(2);
  const TabularPolicy p = random_tabular_policy(w, w.start_states[0], prng, 1.0);
  const ExactAnalysis an = analyze(w, p, w.start_states[0]);
  EmpowermentEstimator e(w.num_states(), 0.999);
  Rng rng(3);
  for (int b = 0; b < 400; ++b) {
    std::vector<StateId> finals;
    for (int i = 0; i < 128; ++i) finals.push_back(sample_tabular(w, p, w.start_states[0], rng).final_state(w));
    e.update(finals);
  }
  EXPECT_NEAR(e.value(), an.mutual_information, 0.02);
}

TEST(Estimator, ConditionalAveragesStarts) {
  WorldSpec w = make_world("det-1d", {.size = 5, .t_max = 1});
  w.start_states = {StateId{1}, StateId{3}};
  ConditionalEstimator c(w, 0.99);
  std::vector<Trajectory> batch;
  const ActionId left = *w.find_action("left");
  // Start 1 ends in two places, start 3 always in one.
  batch.push_back({StateId{1}, {{left, StateId{0}}, {w.terminate(), StateId{0}}}});
  batch.push_back({StateId{1}, {{w.terminate(), StateId{1}}}});
  batch.push_back({StateId{3}, {{w.terminate(), StateId{3}}}});
  batch.push_back({StateId{3}, {{w.terminate(), StateId{3}}}});
  EXPECT_NEAR(c.update(batch), 0.5 * std::log(2.0), 1e-12);
  EXPECT_NEAR(c.at(StateId{3}).value(), 0.0, 1e-15);
  const auto pooled = c.pooled();
  EXPECT_NEAR(pooled[0], 0.25, 1e-15);
  EXPECT_NEAR(pooled[3], 0.5, 1e-15);
}

TEST(Entropy, Basics) {
  const std::vector<double> u(8, 0.125);
  EXPECT_NEAR(entropy_nats(u), std::log(8.0), 1e-15);
  const std::vector<double> pm{0, 1, 0};
  EXPECT_EQ(entropy_nats(pm), 0.0);
}

TEST(Config, EmptyGivesDefaults) {
  const TrainConfig c = parse_config_text("");
  const TrainConfig d;
  EXPECT_EQ(config_to_text(c), config_to_text(d));
  EXPECT_EQ(c.batch_size, 128);
  EXPECT_EQ(c.sigma, 0.25);
  EXPECT_EQ(c.n_gmm, 10);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_config_text("sigma = -1\n"), ConfigError);
  // Overrides may repair a combination, so the unvalidated reader accepts it.
  EXPECT_EQ(read_config_text("alpha = 30\n").alpha, 30.0);
  EXPECT_THROW(parse_config_text("alpha = 30\n"), ConfigError);
  EXPECT_THROW(parse_config_text("algo = alg3\n"), ParseError);
  EXPECT_THROW(parse_config_text("batch_size = many\n"), ParseError);
  try {
    parse_config_text("# header\nalgo = alg1\n\ncolour = blue\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4);
  }
  try {
    parse_config_text("lr = 0.1\nlr = 0.2\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(Config, RoundTrip) {
  TrainConfig c;
  c.algo = Algo::alg2;
  c.world = "rooms-35";
  c.world_size = 15;
  c.t_max = 25;
  c.lr = 1.25e-4;
  c.alpha = 0.3;
  c.seed = 123456789012345ULL;
  c.record_wall_time = true;
  const std::string text = config_to_text(c);
  EXPECT_EQ(config_to_text(parse_config_text(text)), text);
  const TrainConfig back = parse_config_text(text);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(*back.lr, *c.lr);
}

TEST(Config, FileAccess) {
  EXPECT_THROW(parse_config("/nonexistent/empower.ini"), std::runtime_error);
  const auto path = std::filesystem::temp_directory_path() / "empower_cfg_test.ini";
  std::ofstream(path) << "world = stoch-2d  # a comment\nt_max = 3\n";
  const TrainConfig c = parse_config(path.string());
  EXPECT_EQ(c.world, "stoch-2d");
  EXPECT_EQ(*c.t_max, 3);
  std::filesystem::remove(path);
}

TEST(Heatmap, UniformIsAllWhite) {
  const WorldSpec w = make_world("det-2d");
  const std::vector<double> u(static_cast<std::size_t>(w.num_states()), 1.0 / w.num_states());
  const std::string pgm = heatmap_pgm(w, u);
  const std::string header = "P5\n5 5\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 25);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < pgm.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(pgm[i]), 255);
}

TEST(Heatmap, PointMass) {
  const WorldSpec w = make_world("det-1d");
  std::vector<double> d(11, 0.0);
  d[3] = 1.0;
  const std::string pgm = heatmap_pgm(w, d);
  const std::string header = "P5\n11 1\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 11);
  for (int i = 0; i < 11; ++i) EXPECT_EQ(static_cast<unsigned char>(pgm[header.size() + i]), i == 3 ? 255 : 0);
}

TEST(Heatmap, CsvSumsToOne) {
  const WorldSpec w = make_world("stoch-1d", {.t_max = 3});
  Rng rng(4);
  const ExactAnalysis an = analyze(w, random_tabular_policy(w, w.start_states[0], rng, 1.0), w.start_states[0]);
  std::istringstream in(heatmap_csv(w, an.final_marginal));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "x,probability");
  double total = 0;
  int rows = 0;
  while (std::getline(in, line)) {
    total += std::stod(line.substr(line.rfind(',') + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 11);
  EXPECT_NEAR(total, 1.0, 1e-10);
  const std::vector<double> wrong(3, 1.0 / 3);
  EXPECT_THROW(heatmap_csv(w, wrong), std::invalid_argument);
}

TEST(Heatmap, EmitWritesBothFiles) {
  const WorldSpec w = make_world("det-tree", {.size = 2});
  const std::vector<double> u(7, 1.0 / 7);
  const auto base = (std::filesystem::temp_directory_path() / "empower_heat_test").string();
  emit_heatmap(w, u, base);
  EXPECT_TRUE(std::filesystem::exists(base + ".csv"));
  EXPECT_TRUE(std::filesystem::exists(base + ".pgm"));
  std::filesystem::remove(base + ".csv");
  std::filesystem::remove(base + ".pgm");
  EXPECT_THROW(emit_heatmap(w, u, "/nonexistent/dir/heat"), std::runtime_error);
}

TEST(Gain, Examples) {
  EXPECT_NEAR(compute_gain(2.0, 2.0).percent, 0.0, 1e-12);
  EXPECT_NEAR(compute_gain(4.0, 2.0).percent, 100.0, 1e-12);
  EXPECT_NEAR(compute_gain(4.0, 2.0).ratio, 2.0, 1e-12);
  // Unit-free: the same in bits and nats.
  const double k = 1 / std::log(2.0);
  EXPECT_NEAR(compute_gain(3.1 * k, 1.7 * k).percent, compute_gain(3.1, 1.7).percent, 1e-9);
  EXPECT_THROW(compute_gain(1.0, 0.0), std::domain_error);
}

TEST(Csv, HeaderAndLine) {
  EXPECT_STREQ(csv_header(),
               "run_id,algo,world,seed,batch,episodes,i_hat,policy_term,transition_term,external_term,baseline,wall_ms");
  RunRecord r;
  r.run_id = 1;
  r.algo = Algo::alg1;
  r.world = "det-1d";
  r.seed = 9;
  r.batch = 3;
  r.episodes = 512;
  r.i_hat = 0.5;
  EXPECT_EQ(csv_line(r), "1,alg1,det-1d,9,3,512,0.5,0,0,0,0,0.000");
}

TEST(Experiment, DeterministicAcrossThreadCounts) {
  for (Algo a : {Algo::vic, Algo::alg1, Algo::alg2}) {
    const TrainConfig c = tiny(a);
    const ExperimentReport one = run_experiment(c, {}, 1);
    const ExperimentReport two = run_experiment(c, {}, 2);
    EXPECT_EQ(one.csv(), two.csv()) << algo_name(a);
    ASSERT_EQ(one.runs.size(), 2u);
    EXPECT_EQ(one.runs[0].records.size(), 6u);
    EXPECT_NE(one.runs[0].seed, one.runs[1].seed);
    EXPECT_EQ(one.batches.size(), one.mean_i_hat.size());
    const double mean = 0.5 * (one.runs[0].final_i_hat + one.runs[1].final_i_hat);
    EXPECT_NEAR(one.final_mean_i_hat, mean, 1e-12);
  }
}

TEST(Experiment, SingleRepetitionAndRunSeed) {
  TrainConfig c = tiny(Algo::vic);
  c.repetitions = 1;
  const ExperimentReport rep = run_experiment(c);
  ASSERT_EQ(rep.runs.size(), 1u);
  EXPECT_EQ(rep.runs[0].seed, run_seed(7, 0));
  EXPECT_EQ(rep.final_mean_i_hat, rep.runs[0].final_i_hat);
  EXPECT_EQ(run_seed(7, 0), run_seed(7, 0));
  EXPECT_NE(run_seed(7, 0), run_seed(8, 0));
}

TEST(Experiment, EarlyStopAfterWarmup) {
  TrainConfig c = tiny(Algo::vic);
  c.total_batches = 50;
  RunOptions o;
  o.stop_at_i_hat = 0.0;
  const RunResult r = run_single(c, 0, o);
  // Stops at the first joint batch, never during warm-up.
  EXPECT_EQ(r.records.size(), 3u);
}

TEST(Experiment, EvaluateRandomPolicyOnRooms) {
  TrainConfig c;
  c.algo = Algo::random;
  c.world = "rooms-35";
  c.alpha = 1.0;
  c.hidden = 8;
  const WorldSpec w = make_world(c.world);
  Rng init(5);
  AgentBundle b(Algo::random, w, c.model(), init, c.init_std);
  Rng rng(6);
  const EvalResult e = evaluate_policy(b, w, rng, 200);
  EXPECT_EQ(e.episodes, 200);
  double total = 0;
  for (double p : e.final_distribution) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_GE(e.special_hits, 0);
  EXPECT_LE(e.mean_external, 100.0);
}
