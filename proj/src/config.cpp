#include "empower/config.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "empower/errors.hpp"

namespace empower {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v, const std::string& key, int line) {
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
    throw ParseError("key '" + key + "' expects a real number, got '" + v + "'", line);
  }
  return d;
}

long long to_integer(const std::string& v, const std::string& key, int line) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ParseError("key '" + key + "' expects an integer, got '" + v + "'", line);
  }
  return out;
}

int to_int(const std::string& v, const std::string& key, int line) {
  const long long x = to_integer(v, key, line);
  if (x < -2147483647LL || x > 2147483647LL) throw ParseError("key '" + key + "' is out of range", line);
  return static_cast<int>(x);
}

bool to_bool(const std::string& v, const std::string& key, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParseError("key '" + key + "' expects true or false, got '" + v + "'", line);
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

using Setter = std::function<void(TrainConfig&, const std::string&, int)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> m;
    m["algo"] = [](TrainConfig& c, const std::string& v, int line) {
      try {
        c.algo = parse_algo(v);
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), line);
      }
    };
    m["world"] = [](TrainConfig& c, const std::string& v, int) { c.world = v; };
    m["world_size"] = [](TrainConfig& c, const std::string& v, int l) { c.world_size = to_int(v, "world_size", l); };
    m["t_max"] = [](TrainConfig& c, const std::string& v, int l) { c.t_max = to_int(v, "t_max", l); };
    m["lr"] = [](TrainConfig& c, const std::string& v, int l) { c.lr = to_double(v, "lr", l); };
    m["beta1"] = [](TrainConfig& c, const std::string& v, int l) { c.beta1 = to_double(v, "beta1", l); };
    m["beta2"] = [](TrainConfig& c, const std::string& v, int l) { c.beta2 = to_double(v, "beta2", l); };
    m["adam_eps"] = [](TrainConfig& c, const std::string& v, int l) { c.adam_eps = to_double(v, "adam_eps", l); };
    m["batch_size"] = [](TrainConfig& c, const std::string& v, int l) { c.batch_size = to_int(v, "batch_size", l); };
    m["t_smooth"] = [](TrainConfig& c, const std::string& v, int l) { c.t_smooth = to_int(v, "t_smooth", l); };
    m["sigma"] = [](TrainConfig& c, const std::string& v, int l) { c.sigma = to_double(v, "sigma", l); };
    m["n_gmm"] = [](TrainConfig& c, const std::string& v, int l) { c.n_gmm = to_int(v, "n_gmm", l); };
    m["hidden"] = [](TrainConfig& c, const std::string& v, int l) { c.hidden = to_int(v, "hidden", l); };
    m["init_std"] = [](TrainConfig& c, const std::string& v, int l) { c.init_std = to_double(v, "init_std", l); };
    m["warmup_batches"] = [](TrainConfig& c, const std::string& v, int l) {
      c.warmup_batches = to_int(v, "warmup_batches", l);
    };
    m["alpha"] = [](TrainConfig& c, const std::string& v, int l) { c.alpha = to_double(v, "alpha", l); };
    m["entropy_coef"] = [](TrainConfig& c, const std::string& v, int l) {
      c.entropy_coef = to_double(v, "entropy_coef", l);
    };
    m["baseline_lr"] = [](TrainConfig& c, const std::string& v, int l) { c.baseline_lr = to_double(v, "baseline_lr", l); };
    m["total_batches"] = [](TrainConfig& c, const std::string& v, int l) {
      c.total_batches = to_int(v, "total_batches", l);
    };
    m["seed"] = [](TrainConfig& c, const std::string& v, int l) {
      const long long s = to_integer(v, "seed", l);
      if (s < 0) throw ParseError("seed must be non-negative", l);
      c.seed = static_cast<std::uint64_t>(s);
    };
    m["repetitions"] = [](TrainConfig& c, const std::string& v, int l) { c.repetitions = to_int(v, "repetitions", l); };
    m["ema_decay"] = [](TrainConfig& c, const std::string& v, int l) { c.ema_decay = to_double(v, "ema_decay", l); };
    m["log_every"] = [](TrainConfig& c, const std::string& v, int l) { c.log_every = to_int(v, "log_every", l); };
    m["checkpoint_every"] = [](TrainConfig& c, const std::string& v, int l) {
      c.checkpoint_every = to_int(v, "checkpoint_every", l);
    };
    m["record_wall_time"] = [](TrainConfig& c, const std::string& v, int l) {
      c.record_wall_time = to_bool(v, "record_wall_time", l);
    };
    return m;
  }();
  return table;
}

}  // namespace

TrainConfig read_config_text(std::string_view text) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string body = trim(raw);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line);
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ParseError("unknown key '" + key + "'", line);
    if (!seen.insert(key).second) throw ParseError("duplicate key '" + key + "'", line);
    it->second(cfg, value, line);
  }
  return cfg;
}

TrainConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return read_config_text(buf.str());
}

TrainConfig parse_config_text(std::string_view text) {
  TrainConfig cfg = read_config_text(text);
  cfg.validate();
  return cfg;
}

TrainConfig parse_config(const std::string& path) {
  TrainConfig cfg = read_config(path);
  cfg.validate();
  return cfg;
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream out;
  out << "algo = " << algo_name(c.algo) << '\n';
  out << "world = " << c.world << '\n';
  if (c.world_size) out << "world_size = " << *c.world_size << '\n';
  if (c.t_max) out << "t_max = " << *c.t_max << '\n';
  if (c.lr) out << "lr = " << fmt(*c.lr) << '\n';
  out << "beta1 = " << fmt(c.beta1) << '\n';
  out << "beta2 = " << fmt(c.beta2) << '\n';
  out << "adam_eps = " << fmt(c.adam_eps) << '\n';
  out << "batch_size = " << c.batch_size << '\n';
  out << "t_smooth = " << c.t_smooth << '\n';
  out << "sigma = " << fmt(c.sigma) << '\n';
  out << "n_gmm = " << c.n_gmm << '\n';
  out << "hidden = " << c.hidden << '\n';
  out << "init_std = " << fmt(c.init_std) << '\n';
  out << "warmup_batches = " << c.warmup_batches << '\n';
  out << "alpha = " << fmt(c.alpha) << '\n';
  out << "entropy_coef = " << fmt(c.entropy_coef) << '\n';
  out << "baseline_lr = " << fmt(c.baseline_lr) << '\n';
  out << "total_batches = " << c.total_batches << '\n';
  out << "seed = " << c.seed << '\n';
  out << "repetitions = " << c.repetitions << '\n';
  out << "ema_decay = " << fmt(c.ema_decay) << '\n';
  out << "log_every = " << c.log_every << '\n';
  out << "checkpoint_every = " << c.checkpoint_every << '\n';
  out << "record_wall_time = " << (c.record_wall_time ? "true" : "false") << '\n';
  return out.str();
}

}  // namespace empower
