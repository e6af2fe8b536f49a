#pragma once

// INI experiment configuration. Every section is optional; every key read
// is validated, and keys the schema does not know are rejected before any
// compute.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "infoflow/data/grid_series.hpp"
#include "infoflow/data/synthetic.hpp"
#include "infoflow/dimred/reducer.hpp"
#include "infoflow/flow/train.hpp"
#include "infoflow/forecast/calibration.hpp"
#include "json.hpp"

namespace infoflow {

/// Flat section -> key -> raw string view of an INI file.
using IniValues = std::map<std::string, std::map<std::string, std::string>>;

inline IniValues parse_ini_text(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  IniValues out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' appears outside any section");
    auto& dst = out[section];
    for (const auto& [key, value] : body) {
      if (!value.empty()) throw ConfigError("config: nested key in [" + section + "] " + key);
      dst[key] = value.data();
    }
  }
  return out;
}

/// Reads typed values and records every key consumed; finish() rejects the
/// rest.
class ConfigReader {
 public:
  explicit ConfigReader(IniValues values) : values_(std::move(values)) {}

  std::string str(const std::string& section, const std::string& key, const std::string& def) {
    const auto raw = take(section, key);
    const std::string v = raw ? trimmed(*raw) : def;
    echo_[section][key] = v;
    return v;
  }

  template <typename T>
  T num(const std::string& section, const std::string& key, T def) {
    const auto raw = take(section, key);
    T v = def;
    if (raw) v = parse<T>(section, key, trimmed(*raw));
    echo_[section][key] = v;
    return v;
  }

  template <typename T>
  std::vector<T> list(const std::string& section, const std::string& key, const std::vector<T>& def) {
    const auto raw = take(section, key);
    std::vector<T> v = def;
    if (raw) {
      v.clear();
      std::string item;
      std::istringstream in(*raw);
      while (std::getline(in, item, ',')) {
        item = trimmed(item);
        if (item.empty()) throw ConfigError("config: [" + section + "] " + key + " has an empty list item");
        if constexpr (std::is_same_v<T, std::string>)
          v.push_back(item);
        else
          v.push_back(parse<T>(section, key, item));
      }
    }
    echo_[section][key] = v;
    return v;
  }

  bool has_section(const std::string& section) const { return values_.count(section) != 0; }

  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [section, keys] : values_)
      for (const auto& [key, value] : keys)
        if (!consumed_.count(section + "." + key)) unknown.push_back("[" + section + "] " + key);
    if (!unknown.empty()) {
      std::string msg = "config: unknown key";
      msg += unknown.size() > 1 ? "s " : " ";
      for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
      throw ConfigError(msg);
    }
  }

  /// Resolved values, defaults included, by section.
  const nlohmann::json& echo() const { return echo_; }

  [[noreturn]] static void fail(const std::string& section, const std::string& key, const std::string& why) {
    throw ConfigError("config: [" + section + "] " + key + ": " + why);
  }

 private:
  std::optional<std::string> take(const std::string& section, const std::string& key) {
    consumed_.insert(section + "." + key);
    const auto s = values_.find(section);
    if (s == values_.end()) return std::nullopt;
    const auto k = s->second.find(key);
    if (k == s->second.end()) return std::nullopt;
    return k->second;
  }

  static std::string trimmed(const std::string& s) { return std::string(detail::trim(s)); }

  template <typename T>
  static T parse(const std::string& section, const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true") return true;
      if (text == "false") return false;
      fail(section, key, "expected true|false, got '" + text + "'");
    } else {
      T v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size())
        fail(section, key, "cannot parse '" + text + "' as a number");
      if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(v)) fail(section, key, "must be finite");
      return v;
    }
  }

  IniValues values_;
  std::set<std::string> consumed_;
  nlohmann::json echo_ = nlohmann::json::object();
};

/// Everything any verb may read from one config file.
struct Config {
  std::filesystem::path base_dir;  // relative paths resolve against this

  // [data]
  std::string data_path;
  int lags = 3;
  int center_row = -1;  // -1: lattice centre
  int center_col = -1;

  // [splits]
  int test_year = 0;
  Season test_season = Season::Q1;
  int prior_years = 10;
  std::array<double, 3> fractions = {0.4, 0.4, 0.2};

  // [reducer]
  Index m = 2;
  ReducerTrainConfig reducer;

  // [flow]
  FlowTrainConfig flow;

  // [forecast]
  Index grid_cells = 128;
  double grid_expand = 0.25;
  CalibrationWeights weights;
  Index selection_examples = 600;  // 0 scores the whole validation split

  // [eval]
  int bootstrap_resamples = 2000;
  double bootstrap_level = 0.95;

  // [experiment]
  std::string name;
  std::vector<std::string> reducers = {"information", "grid-pick", "pca"};
  std::uint64_t seed = 0;

  // [synthetic]
  SyntheticConfig synthetic;
  std::uint64_t synthetic_seed = 0;
  std::string synthetic_output = "series.csv";

  // [query]
  std::string query_run;
  std::string query_reducer = "information";
  std::vector<double> query_t;  // reduced conditioning vector
  std::vector<double> query_x;  // or a raw predictor row
  std::string query_checkpoint = "selected";

  // [report]
  std::vector<std::string> report_runs;

  nlohmann::json echo;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

inline const std::vector<std::string>& known_reducer_names() {
  static const std::vector<std::string> names = {"information", "grid-pick", "pca"};
  return names;
}

inline Config parse_config(const IniValues& values, const std::filesystem::path& base_dir = ".") {
  static const std::set<std::string> sections = {"data", "splits", "reducer", "flow", "forecast",
                                                 "eval", "experiment", "synthetic", "query", "report"};
  for (const auto& [section, keys] : values)
    if (!sections.count(section)) throw ConfigError("config: unknown section [" + section + "]");

  ConfigReader r(values);
  Config c;
  c.base_dir = base_dir;

  c.data_path = r.str("data", "path", "");
  c.lags = r.num("data", "lags", 3);
  c.center_row = r.num("data", "center_row", -1);
  c.center_col = r.num("data", "center_col", -1);
  if (c.lags < 0) ConfigReader::fail("data", "lags", "must be >= 0");

  c.test_year = r.num("splits", "test_year", 0);
  try {
    c.test_season = parse_season(r.str("splits", "test_season", "Q1"));
  } catch (const ParseError& e) {
    ConfigReader::fail("splits", "test_season", e.what());
  }
  c.prior_years = r.num("splits", "prior_years", 10);
  c.fractions[0] = r.num("splits", "dr_train_fraction", 0.4);
  c.fractions[1] = r.num("splits", "jm_train_fraction", 0.4);
  c.fractions[2] = r.num("splits", "validation_fraction", 0.2);
  if (c.prior_years < 1) ConfigReader::fail("splits", "prior_years", "must be >= 1");
  for (double f : c.fractions)
    if (!(f > 0.0 && f < 1.0)) ConfigReader::fail("splits", "fractions", "each fraction must lie in (0, 1)");
  if (std::abs(c.fractions[0] + c.fractions[1] + c.fractions[2] - 1.0) > 1e-9)
    ConfigReader::fail("splits", "fractions", "must sum to 1");

  c.m = r.num<Index>("reducer", "m", 2);
  if (c.m < 1) ConfigReader::fail("reducer", "m", "must be >= 1");
  try {
    c.reducer.kind = parse_reducer_kind(r.str("reducer", "architecture", "shallow-net"));
    c.reducer.activation = parse_activation(r.str("reducer", "activation", "tanh"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: [reducer] ") + e.what());
  }
  if (c.reducer.kind != ReducerKind::Affine && c.reducer.kind != ReducerKind::ShallowNet)
    ConfigReader::fail("reducer", "architecture", "must be affine or shallow-net");
  c.reducer.hidden = r.num("reducer", "hidden", 64);
  c.reducer.iterations = r.num("reducer", "iterations", 2000);
  c.reducer.learning_rate = r.num("reducer", "learning_rate", 0.01);
  c.reducer.beta1 = r.num("reducer", "beta1", 0.99);
  c.reducer.beta2 = r.num("reducer", "beta2", 0.99);
  c.reducer.jitter = r.num("reducer", "jitter", 1e-6);
  c.reducer.full_batch_limit = r.num<Index>("reducer", "full_batch_limit", 20000);
  c.reducer.minibatch = r.num<Index>("reducer", "minibatch", 2048);
  c.reducer.eval_every = r.num("reducer", "eval_every", 100);
  if (c.reducer.hidden < 1) ConfigReader::fail("reducer", "hidden", "must be >= 1");
  if (c.reducer.iterations < 1) ConfigReader::fail("reducer", "iterations", "must be >= 1");
  if (!(c.reducer.learning_rate > 0.0)) ConfigReader::fail("reducer", "learning_rate", "must be > 0");
  if (!(c.reducer.jitter >= 0.0)) ConfigReader::fail("reducer", "jitter", "must be >= 0");
  if (c.reducer.minibatch < 1 || c.reducer.eval_every < 1)
    ConfigReader::fail("reducer", "minibatch", "minibatch and eval_every must be >= 1");

  c.flow.steps = r.num("flow", "steps", 1200);
  c.flow.batch = r.num<Index>("flow", "batch", 150);
  c.flow.learning_rate = r.num("flow", "learning_rate", 0.01);
  c.flow.beta1 = r.num("flow", "beta1", 0.99);
  c.flow.beta2 = r.num("flow", "beta2", 0.99);
  c.flow.warmup = r.num("flow", "warmup", 300);
  c.flow.checkpoint_every = r.num("flow", "checkpoint_every", 100);
  c.flow.max_rollbacks = r.num("flow", "max_rollbacks", 2);
  c.flow.init.depth = r.num("flow", "depth", 7);
  c.flow.init.width = r.num("flow", "width", 32);
  c.flow.init.components = r.num("flow", "components", 5);
  c.flow.init.pairs = r.num("flow", "coupling_pairs", 1);
  c.flow.init.head_sd = r.num("flow", "head_init_sd", 0.01);
  c.flow.init.latent_mean_sd = r.num("flow", "latent_mean_init_sd", 0.5);
  if (c.flow.steps < 1 || c.flow.batch < 1 || c.flow.checkpoint_every < 1 || c.flow.warmup < 0)
    ConfigReader::fail("flow", "steps", "steps, batch and checkpoint_every must be >= 1, warmup >= 0");
  if (c.flow.warmup >= c.flow.steps) ConfigReader::fail("flow", "warmup", "must be below steps");
  if (!(c.flow.learning_rate > 0.0)) ConfigReader::fail("flow", "learning_rate", "must be > 0");
  if (c.flow.init.depth < 1 || c.flow.init.width < 1 || c.flow.init.components < 1 || c.flow.init.pairs < 1)
    ConfigReader::fail("flow", "depth", "depth, width, components and coupling_pairs must be >= 1");
  if (c.flow.max_rollbacks < 0) ConfigReader::fail("flow", "max_rollbacks", "must be >= 0");

  c.grid_cells = r.num<Index>("forecast", "grid_cells", 128);
  c.grid_expand = r.num("forecast", "grid_expand", 0.25);
  c.weights.nominal[0] = r.num("forecast", "nominal_inner", 0.683);
  c.weights.nominal[1] = r.num("forecast", "nominal_outer", 0.954);
  c.weights.weight_num[0] = r.num<std::uint32_t>("forecast", "weight_inner", 13);
  c.weights.weight_num[1] = r.num<std::uint32_t>("forecast", "weight_outer", 10);
  c.weights.weight_den = r.num<std::uint32_t>("forecast", "weight_denominator", 23);
  c.selection_examples = r.num<Index>("forecast", "selection_examples", 600);
  if (c.grid_cells < 2) ConfigReader::fail("forecast", "grid_cells", "must be >= 2");
  if (!(c.grid_expand >= 0.0)) ConfigReader::fail("forecast", "grid_expand", "must be >= 0");
  if (!(c.weights.nominal[0] > 0.0 && c.weights.nominal[0] < c.weights.nominal[1] && c.weights.nominal[1] < 1.0))
    ConfigReader::fail("forecast", "nominal_inner", "need 0 < nominal_inner < nominal_outer < 1");
  if (c.weights.weight_den == 0) ConfigReader::fail("forecast", "weight_denominator", "must be > 0");
  if (c.selection_examples < 0) ConfigReader::fail("forecast", "selection_examples", "must be >= 0");

  c.bootstrap_resamples = r.num("eval", "bootstrap_resamples", 2000);
  c.bootstrap_level = r.num("eval", "bootstrap_level", 0.95);
  if (c.bootstrap_resamples < 1) ConfigReader::fail("eval", "bootstrap_resamples", "must be >= 1");
  if (!(c.bootstrap_level > 0.0 && c.bootstrap_level < 1.0))
    ConfigReader::fail("eval", "bootstrap_level", "must lie in (0, 1)");

  c.name = r.str("experiment", "name", "");
  c.reducers = r.list<std::string>("experiment", "reducers", c.reducers);
  c.seed = r.num<std::uint64_t>("experiment", "seed", 0);
  {
    std::set<std::string> seen;
    for (const auto& n : c.reducers) {
      if (std::find(known_reducer_names().begin(), known_reducer_names().end(), n) == known_reducer_names().end())
        ConfigReader::fail("experiment", "reducers", "unknown reducer '" + n + "' (expected information|grid-pick|pca)");
      if (!seen.insert(n).second) ConfigReader::fail("experiment", "reducers", "duplicate reducer '" + n + "'");
    }
    if (c.reducers.empty()) ConfigReader::fail("experiment", "reducers", "need at least one reducer");
  }

  SyntheticConfig& s = c.synthetic;
  try {
    s.family = parse_process_family(r.str("synthetic", "family", "gaussian-var"));
  } catch (const ConfigError& e) {
    ConfigReader::fail("synthetic", "family", e.what());
  }
  s.rows = r.num("synthetic", "rows", s.rows);
  s.cols = r.num("synthetic", "cols", s.cols);
  s.first_year = r.num("synthetic", "first_year", s.first_year);
  s.years = r.num("synthetic", "years", s.years);
  {
    std::vector<std::string> names;
    for (Season x : s.seasons) names.emplace_back(to_string(x));
    names = r.list<std::string>("synthetic", "seasons", names);
    s.seasons.clear();
    for (const auto& n : names) {
      try {
        s.seasons.push_back(parse_season(n));
      } catch (const ParseError& e) {
        ConfigReader::fail("synthetic", "seasons", e.what());
      }
    }
  }
  s.steps_per_slice = r.num("synthetic", "steps_per_slice", s.steps_per_slice);
  s.spectral_radius = r.num("synthetic", "spectral_radius", s.spectral_radius);
  s.length_scale = r.num("synthetic", "length_scale", s.length_scale);
  s.rotation = r.num("synthetic", "rotation", s.rotation);
  s.noise_sd = r.num("synthetic", "noise_sd", s.noise_sd);
  s.noise_length_scale = r.num("synthetic", "noise_length_scale", s.noise_length_scale);
  s.noise_uv_corr = r.num("synthetic", "noise_uv_corr", s.noise_uv_corr);
  s.ring_radius = r.num("synthetic", "ring_radius", s.ring_radius);
  s.radial_sd = r.num("synthetic", "radial_sd", s.radial_sd);
  s.angular_drift = r.num("synthetic", "angular_drift", s.angular_drift);
  s.angular_sd = r.num("synthetic", "angular_sd", s.angular_sd);
  s.phase_gradient = r.num("synthetic", "phase_gradient", s.phase_gradient);
  s.cell_noise = r.num("synthetic", "cell_noise", s.cell_noise);
  s.factor_sd = r.num("synthetic", "factor_sd", s.factor_sd);
  s.factor_phi = r.num("synthetic", "factor_phi", s.factor_phi);
  s.signal_cells = r.num("synthetic", "signal_cells", s.signal_cells);
  s.signal_strength = r.num("synthetic", "signal_strength", s.signal_strength);
  c.synthetic_seed = r.num<std::uint64_t>("synthetic", "seed", 0);
  c.synthetic_output = r.str("synthetic", "output", "series.csv");
  try {
    detail::validate_synthetic(s);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: [synthetic] ") + e.what());
  }

  c.query_run = r.str("query", "run", "");
  c.query_reducer = r.str("query", "reducer", "information");
  c.query_t = r.list<double>("query", "t", {});
  c.query_x = r.list<double>("query", "x", {});
  if (!c.query_t.empty() && !c.query_x.empty()) ConfigReader::fail("query", "t", "give t or x, not both");
  c.query_checkpoint = r.str("query", "checkpoint", "selected");

  c.report_runs = r.list<std::string>("report", "runs", {});

  r.finish();
  c.echo = r.echo();
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(parse_ini_text(ss.str()), path.parent_path().empty() ? "." : path.parent_path());
}

/// The sections that determine experiment results, as canonical JSON.
inline nlohmann::json experiment_echo(const Config& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const char* s : {"data", "splits", "reducer", "flow", "forecast", "eval", "experiment"})
    if (c.echo.contains(s)) j[s] = c.echo.at(s);
  return j;
}

inline std::string hex64(std::uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, x >>= 4) s[static_cast<std::size_t>(i)] = digits[x & 0xf];
  return s;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace infoflow
