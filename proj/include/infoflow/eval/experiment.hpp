#pragma once

// End-to-end experiment: splits, reduction, flow training, checkpoint
// selection, test calibration and pairwise entropy games, with artifacts
// and a versioned JSON report.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "infoflow/data/examples.hpp"
#include "infoflow/data/splits.hpp"
#include "infoflow/eval/config.hpp"
#include "infoflow/eval/entropy_game.hpp"
#include "infoflow/flow/train.hpp"
#include "infoflow/forecast/forecast.hpp"

namespace infoflow {

namespace fs = std::filesystem;

/// A pipeline failure, tagged with the stage (and reducer, if any) it
/// happened in.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string reducer, const std::string& cause)
      : Error("stage " + stage + (reducer.empty() ? "" : " [" + reducer + "]") + ": " + cause),
        stage_(std::move(stage)),
        reducer_(std::move(reducer)) {}
  const std::string& stage() const noexcept { return stage_; }
  const std::string& reducer() const noexcept { return reducer_; }

 private:
  std::string stage_, reducer_;
};

// --- artifacts -------------------------------------------------------------------

inline nlohmann::json load_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw Error("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  out.flush();
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline void save_model(const fs::path& path, const Reducer& r) { write_json_file(path, reducer_to_json(r)); }
inline void save_model(const fs::path& path, const FlowModel& f) { write_json_file(path, flow_to_json(f)); }
inline Reducer load_reducer(const fs::path& path) { return reducer_from_json(load_json_file(path)); }
inline FlowModel load_flow(const fs::path& path) { return flow_from_json(load_json_file(path)); }

// --- experiment ------------------------------------------------------------------

struct ReducerRun {
  std::string name;
  Reducer reducer;
  bool cache_hit = false;
  std::vector<FlowCheckpoint> checkpoints;
  int rollbacks = 0;
  CheckpointSelection selection;
  FlowModel model;  // selected checkpoint
  CalibrationReport test;
};

struct ExperimentResult {
  std::string name;
  SliceLabel test_slice;
  GridSpec grid;
  std::vector<ReducerRun> runs;
  std::vector<EntropyGameResult> games;  // every ordered pair
  nlohmann::json body;                   // deterministic part of report.json
  nlohmann::json provenance;             // timestamps, cache use
};

namespace detail {

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

template <typename F>
auto stage(const std::string& name, const std::string& reducer, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, reducer, e.what());
  }
}

inline std::uint64_t hash_array(const Array& a, std::uint64_t h) {
  const Matrix& m = a.mat();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size()), h);
}

inline nlohmann::json report_json(const CalibrationReport& r) {
  return {{"n", r.n},         {"skipped", r.skipped}, {"hits683", r.hits683}, {"hits954", r.hits954},
          {"hr683", r.hr683}, {"hr954", r.hr954},     {"sc", r.sc},           {"floored", r.floored()},
          {"mean_log_q", r.mean_log_q()}};
}

inline nlohmann::json game_json(const EntropyGameResult& g, double level, int resamples) {
  return {{"a", g.a},         {"b", g.b},         {"score", g.score},         {"mean", g.mean()},
          {"n", g.n()},       {"ci_lo", g.ci_lo}, {"ci_hi", g.ci_hi},         {"level", level},
          {"resamples", resamples}, {"floored_a", g.floored_a}, {"floored_b", g.floored_b}, {"dropped", g.dropped}};
}

}  // namespace detail

/// Fails with ConfigError if the config lacks what `run` needs.
inline void require_run_config(const Config& c, bool need_data_path = true) {
  if (need_data_path && c.data_path.empty()) throw ConfigError("config: [data] path is required");
  if (c.test_year == 0) throw ConfigError("config: [splits] test_year is required");
}

inline std::string experiment_name(const Config& c) {
  return c.name.empty() ? to_string(SliceLabel{c.test_year, c.test_season}) : c.name;
}

/// Runs every configured reducer through the pipeline and writes artifacts
/// under out_dir as it goes; a cached reducer artifact with a matching key
/// is reused.
inline ExperimentResult run_experiment(const Config& cfg, const GridSeries& series, const fs::path& out_dir,
                                       std::ostream* log = nullptr) {
  require_run_config(cfg, false);
  const auto started = std::chrono::steady_clock::now();
  ExperimentResult res;
  res.name = experiment_name(cfg);
  res.test_slice = {cfg.test_year, cfg.test_season};
  res.provenance["started"] = detail::utc_now();
  const auto say = [&](const std::string& s) {
    if (log) *log << "[" << res.name << "] " << s << std::endl;
  };

  std::map<std::string, std::uint64_t> seeds;
  seeds["split"] = derive_seed(cfg.seed, "split");
  for (const auto& r : cfg.reducers) {
    seeds["reducer/" + r] = derive_seed(cfg.seed, "reducer/" + r);
    seeds["flow/" + r] = derive_seed(cfg.seed, "flow/" + r);
  }

  const ExampleSet examples = detail::stage("examples", "", [&] {
    const int row = cfg.center_row < 0 ? series.rows() / 2 : cfg.center_row;
    const int col = cfg.center_col < 0 ? series.cols() / 2 : cfg.center_col;
    return build_examples(series, cfg.lags, row, col);
  });
  const Splits splits = detail::stage("splits", "", [&] {
    SplitSpec s;
    s.test_year = cfg.test_year;
    s.test_season = cfg.test_season;
    s.prior_years = cfg.prior_years;
    s.fractions = cfg.fractions;
    s.seed = seeds["split"];
    s.response_dim = static_cast<int>(examples.response_dim());
    s.reduced_dim = static_cast<int>(cfg.m);
    return make_splits(examples, s);
  });
  res.grid = detail::stage("grid", "", [&] {
    return default_grid_spec(splits.jm_train.responses, cfg.grid_cells, cfg.grid_expand);
  });
  const ExampleSet selection_set = [&] {
    const Index k = cfg.selection_examples == 0 ? splits.validation.size()
                                                : std::min(cfg.selection_examples, splits.validation.size());
    std::vector<Index> idx(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
    return splits.validation.subset(idx);
  }();
  say("examples " + std::to_string(examples.size()) + ", test " + std::to_string(splits.test.size()));

  std::uint64_t data_hash = 0xcbf29ce484222325ULL;
  data_hash = detail::hash_array(splits.dr_train.predictors, data_hash);
  data_hash = detail::hash_array(splits.dr_train.responses, data_hash);

  for (const auto& name : cfg.reducers) {
    ReducerRun run;
    run.name = name;
    const fs::path reducer_path = out_dir / "reducers" / (name + ".json");

    // Everything the reducer depends on goes into its cache key.
    nlohmann::json key_src = {{"name", name}, {"m", cfg.m}, {"seed", seeds["reducer/" + name]},
                              {"data", hex64(data_hash)}};
    if (name == "information") key_src["reducer"] = cfg.echo.value("reducer", nlohmann::json::object());
    const std::string cache_key = hex64(fnv1a(key_src.dump()));

    run.reducer = detail::stage("reducer", name, [&] {
      std::error_code ec;
      if (fs::exists(reducer_path, ec)) {
        try {
          const nlohmann::json j = load_json_file(reducer_path);
          if (j.value("cache_key", std::string()) == cache_key) {
            run.cache_hit = true;
            return reducer_from_json(j.at("reducer"));
          }
        } catch (const Error&) {
          // unreadable cache entries are rebuilt
        }
      }
      Reducer r;
      if (name == "information") {
        ReducerTrainConfig rc = cfg.reducer;
        rc.seed = seeds["reducer/" + name];
        try {
          r = train_reducer(splits.dr_train, cfg.m, rc);
        } catch (const ReducerDivergedError& e) {
          say("reducer diverged, keeping best iterate: " + std::string(e.what()));
          r = e.best();
        }
      } else if (name == "grid-pick") {
        r = gridpoint_reducer(splits.dr_train, cfg.m);
      } else {
        r = pca_reducer(splits.dr_train, cfg.m);
      }
      write_json_file(reducer_path, {{"cache_key", cache_key}, {"reducer", reducer_to_json(r)}});
      return r;
    });
    say(name + ": reducer " + (run.cache_hit ? "loaded from cache" : "fitted"));

    detail::stage("train_flow", name, [&] {
      FlowTrainConfig fc = cfg.flow;
      fc.seed = seeds["flow/" + name];
      FlowTrainResult tr = train_flow(splits.jm_train, splits.validation, run.reducer, fc);
      run.checkpoints = std::move(tr.checkpoints);
      run.rollbacks = tr.rollbacks;
      if (run.checkpoints.empty()) {
        FlowCheckpoint last;
        last.step = tr.model.step;
        last.model = std::move(tr.model);
        run.checkpoints.push_back(std::move(last));
      }
      for (const auto& c : run.checkpoints)
        save_model(out_dir / "flows" / name / ("checkpoint-" + std::to_string(c.step) + ".json"), c.model);
    });
    say(name + ": flow trained, " + std::to_string(run.checkpoints.size()) + " checkpoints");

    detail::stage("select_checkpoint", name, [&] {
      run.selection = select_checkpoint(run.checkpoints, run.reducer, selection_set, res.grid, cfg.weights);
      run.model = run.checkpoints[run.selection.index].model;
      save_model(out_dir / "flows" / name / "selected.json", run.model);
    });
    say(name + ": selected step " + std::to_string(run.model.step));

    run.test = detail::stage("hit_rate", name, [&] {
      return hit_rate(run.model, run.reducer, splits.test, res.grid, cfg.weights);
    });
    say(name + ": test hit rates " + detail::format_double(run.test.hr683) + " / " +
        detail::format_double(run.test.hr954) + ", mean log q " + detail::format_double(run.test.mean_log_q()));
    res.runs.push_back(std::move(run));
  }

  detail::stage("entropy_game", "", [&] {
    for (std::size_t i = 0; i < res.runs.size(); ++i)
      for (std::size_t j = i + 1; j < res.runs.size(); ++j) {
        const auto& a = res.runs[i];
        const auto& b = res.runs[j];
        EntropyGameResult g = entropy_game(a.name, a.test, b.name, b.test);
        const std::string label = "bootstrap/" + a.name + "/" + b.name;
        seeds[label] = derive_seed(cfg.seed, label);
        std::tie(g.ci_lo, g.ci_hi) =
            bootstrap_interval(g.differences, cfg.bootstrap_level, cfg.bootstrap_resamples, seeds[label]);
        res.games.push_back(g);
        res.games.push_back(reversed(g));
      }
  });

  nlohmann::json& body = res.body;
  body["version"] = "report-v1";
  body["experiment"] = res.name;
  body["test_slice"] = to_string(res.test_slice);
  body["config"] = experiment_echo(cfg);
  body["config_hash"] = hex64(fnv1a(body["config"].dump()));
  body["seeds"] = nlohmann::json::object();
  body["seeds"]["master"] = cfg.seed;
  for (const auto& [k, v] : seeds) body["seeds"][k] = v;
  body["data"] = {{"examples", examples.size()},
                  {"predictor_dim", examples.predictor_dim()},
                  {"lattice", {series.rows(), series.cols()}},
                  {"center", {examples.center_row, examples.center_col}},
                  {"lags", examples.lags},
                  {"splits",
                   {{"dr_train", splits.dr_train.size()},
                    {"jm_train", splits.jm_train.size()},
                    {"validation", splits.validation.size()},
                    {"test", splits.test.size()}}},
                  {"selection_examples", selection_set.size()}};
  body["grid"] = nlohmann::json::array();
  for (const auto& a : res.grid.axes) body["grid"].push_back({{"lo", a.lo}, {"hi", a.hi}, {"cells", a.cells}});
  body["reducers"] = nlohmann::json::array();
  for (const auto& run : res.runs) {
    nlohmann::json r;
    r["name"] = run.name;
    r["kind"] = to_string(run.reducer.kind);
    r["selected_step"] = run.model.step;
    r["rollbacks"] = run.rollbacks;
    r["checkpoints"] = nlohmann::json::array();
    for (std::size_t k = 0; k < run.checkpoints.size(); ++k)
      r["checkpoints"].push_back({{"step", run.checkpoints[k].step},
                                  {"validation_loglik", run.checkpoints[k].validation_loglik},
                                  {"selection", detail::report_json(run.selection.reports[k])}});
    r["test"] = detail::report_json(run.test);
    r["mean_test_loglik"] = run.test.mean_log_q();
    body["reducers"].push_back(std::move(r));
  }
  body["entropy_games"] = nlohmann::json::array();
  for (const auto& g : res.games)
    body["entropy_games"].push_back(detail::game_json(g, cfg.bootstrap_level, cfg.bootstrap_resamples));

  res.provenance["finished"] = detail::utc_now();
  res.provenance["elapsed_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  for (const auto& run : res.runs) res.provenance["reducer_cache"][run.name] = run.cache_hit ? "hit" : "miss";
  return res;
}

// --- report files ----------------------------------------------------------------

/// Plot-ready CSVs built from one or more report bodies.
inline void write_report_csvs(const std::vector<nlohmann::json>& bodies, const fs::path& dir) {
  using detail::format_double;
  std::ostringstream hr, ll, eg;
  hr << "experiment,test_slice,reducer,nominal,hits,n,hit_rate\n";
  ll << "experiment,test_slice,reducer,mean_test_loglik,n,floored\n";
  eg << "experiment,test_slice,a,b,score,mean,n,ci_lo,ci_hi,level,floored_a,floored_b,dropped\n";
  for (const auto& b : bodies) {
    try {
      const std::string exp = b.at("experiment").get<std::string>();
      const std::string slice = b.at("test_slice").get<std::string>();
      const auto& fc = b.at("config").at("forecast");
      const double nominal[2] = {fc.at("nominal_inner").get<double>(), fc.at("nominal_outer").get<double>()};
      for (const auto& r : b.at("reducers")) {
        const auto& t = r.at("test");
        const std::string name = r.at("name").get<std::string>();
        const auto n = t.at("n").get<std::uint64_t>();
        const std::uint64_t hits[2] = {t.at("hits683").get<std::uint64_t>(), t.at("hits954").get<std::uint64_t>()};
        const double rates[2] = {t.at("hr683").get<double>(), t.at("hr954").get<double>()};
        for (int c = 0; c < 2; ++c)
          hr << exp << ',' << slice << ',' << name << ',' << format_double(nominal[c]) << ',' << hits[c] << ',' << n
             << ',' << format_double(rates[c]) << '\n';
        ll << exp << ',' << slice << ',' << name << ',' << format_double(r.at("mean_test_loglik").get<double>())
           << ',' << n << ',' << t.at("floored").get<std::uint64_t>() << '\n';
      }
      for (const auto& g : b.at("entropy_games"))
        eg << exp << ',' << slice << ',' << g.at("a").get<std::string>() << ',' << g.at("b").get<std::string>()
           << ',' << format_double(g.at("score").get<double>()) << ',' << format_double(g.at("mean").get<double>())
           << ',' << g.at("n").get<std::uint64_t>() << ',' << format_double(g.at("ci_lo").get<double>()) << ','
           << format_double(g.at("ci_hi").get<double>()) << ',' << format_double(g.at("level").get<double>())
           << ',' << g.at("floored_a").get<std::uint64_t>() << ',' << g.at("floored_b").get<std::uint64_t>()
           << ',' << g.at("dropped").get<std::uint64_t>() << '\n';
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("report: malformed report body: ") + e.what());
    }
  }
  write_text_file(dir / "hitrates.csv", hr.str());
  write_text_file(dir / "likelihoods.csv", ll.str());
  write_text_file(dir / "entropy_games.csv", eg.str());
}

inline void emit_report(const ExperimentResult& res, const fs::path& dir) {
  nlohmann::json full = res.body;
  full["provenance"] = res.provenance;
  write_json_file(dir / "report.json", full);
  write_report_csvs({res.body}, dir);
}

/// Drops the provenance block, leaving what is reproducible from (config,
/// seed).
inline nlohmann::json report_body(nlohmann::json report) {
  report.erase("provenance");
  return report;
}

inline nlohmann::json load_report(const fs::path& path) {
  nlohmann::json j = load_json_file(path);
  if (!j.is_object()) throw ParseError("report: '" + path.string() + "' is not a JSON object");
  const std::string v = j.value("version", std::string("<missing>"));
  if (v != "report-v1") throw ParseError("report: version mismatch: expected report-v1, found " + v);
  return j;
}

/// Concatenates the CSVs of many runs and writes per-reducer means.
inline nlohmann::json aggregate_reports(const std::vector<nlohmann::json>& reports, const fs::path& dir) {
  std::vector<nlohmann::json> bodies;
  for (const auto& r : reports) bodies.push_back(report_body(r));
  write_report_csvs(bodies, dir);

  struct Acc {
    int runs = 0;
    double hr683 = 0, hr954 = 0, sc = 0, loglik = 0;
  };
  std::map<std::string, Acc> acc;
  std::map<std::string, std::pair<double, std::uint64_t>> games;
  nlohmann::json summary;
  summary["version"] = "summary-v1";
  summary["experiments"] = nlohmann::json::array();
  for (const auto& b : bodies) {
    summary["experiments"].push_back(b.at("experiment"));
    for (const auto& r : b.at("reducers")) {
      Acc& a = acc[r.at("name").get<std::string>()];
      ++a.runs;
      a.hr683 += r.at("test").at("hr683").get<double>();
      a.hr954 += r.at("test").at("hr954").get<double>();
      a.sc += r.at("test").at("sc").get<double>();
      a.loglik += r.at("mean_test_loglik").get<double>();
    }
    for (const auto& g : b.at("entropy_games")) {
      auto& [score, n] = games[g.at("a").get<std::string>() + " vs " + g.at("b").get<std::string>()];
      score += g.at("score").get<double>();
      n += g.at("n").get<std::uint64_t>();
    }
  }
  for (const auto& [name, a] : acc)
    summary["reducers"][name] = {{"runs", a.runs},
                                 {"mean_hr683", a.hr683 / a.runs},
                                 {"mean_hr954", a.hr954 / a.runs},
                                 {"mean_sc", a.sc / a.runs},
                                 {"mean_test_loglik", a.loglik / a.runs}};
  for (const auto& [pair, s] : games) summary["entropy_games"][pair] = {{"score", s.first}, {"n", s.second}};
  write_json_file(dir / "summary.json", summary);
  return summary;
}

}  // namespace infoflow
