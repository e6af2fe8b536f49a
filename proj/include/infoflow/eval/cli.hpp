#pragma once

// forecastctl: ingest | synth | run | forecast | report.
// Exit codes: 0 success, 2 config or usage error, 1 anything else.

#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "infoflow/data/synthetic.hpp"
#include "infoflow/eval/experiment.hpp"

namespace infoflow {

namespace cli {

struct Options {
  std::string verb;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

inline GridSeries load_data(const Config& c) {
  if (c.data_path.empty()) throw ConfigError("config: [data] path is required");
  return load_grid_series(c.resolve(c.data_path).string());
}

inline int ingest(const Config& c, const Options& o, std::ostream& out) {
  const GridSeries s = load_data(c);
  std::vector<std::string> slices;
  std::map<std::string, std::size_t> steps;
  for (const auto& l : s.labels()) {
    const std::string name = to_string(l);
    if (!steps.count(name)) slices.push_back(name);
    ++steps[name];
  }
  nlohmann::json j = {{"lattice", {s.rows(), s.cols()}}, {"steps", s.length()}, {"slices", nlohmann::json::array()}};
  for (const auto& name : slices) j["slices"].push_back({{"label", name}, {"steps", steps[name]}});
  if (c.test_year != 0) {
    // Also check that the configured experiment can be split.
    const int row = c.center_row < 0 ? s.rows() / 2 : c.center_row;
    const int col = c.center_col < 0 ? s.cols() / 2 : c.center_col;
    const ExampleSet ex = build_examples(s, c.lags, row, col);
    SplitSpec spec;
    spec.test_year = c.test_year;
    spec.test_season = c.test_season;
    spec.prior_years = c.prior_years;
    spec.fractions = c.fractions;
    spec.reduced_dim = static_cast<int>(c.m);
    const Splits sp = make_splits(ex, spec);
    j["examples"] = ex.size();
    j["splits"] = {{"dr_train", sp.dr_train.size()},
                   {"jm_train", sp.jm_train.size()},
                   {"validation", sp.validation.size()},
                   {"test", sp.test.size()}};
  }
  out << j.dump(2) << '\n';
  if (!o.out.empty()) write_json_file(fs::path(o.out) / "ingest.json", j);
  return 0;
}

inline int synth(const Config& c, const Options& o, std::ostream& out) {
  const std::uint64_t seed = o.seed.value_or(c.synthetic_seed);
  const GridSeries s = gen_synthetic(c.synthetic, seed);
  const fs::path path = o.out.empty() ? c.resolve(c.synthetic_output) : fs::path(o.out) / c.synthetic_output;
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  save_grid_series(path.string(), s);
  out << "wrote " << s.length() << " steps to " << path.string() << '\n';
  return 0;
}

inline int run(Config c, const Options& o, std::ostream& out, std::ostream& err) {
  if (o.seed) c.seed = *o.seed, c.echo["experiment"]["seed"] = *o.seed;
  require_run_config(c);
  const GridSeries s = load_data(c);
  const fs::path dir = o.out.empty() ? fs::path("run") : fs::path(o.out);
  const ExperimentResult res = run_experiment(c, s, dir, &err);
  emit_report(res, dir);
  for (const auto& r : res.runs)
    out << r.name << ": hr683 " << detail::format_double(r.test.hr683) << ", hr954 "
        << detail::format_double(r.test.hr954) << ", mean log-likelihood " << detail::format_double(r.test.mean_log_q())
        << '\n';
  out << "report written to " << (dir / "report.json").string() << '\n';
  return 0;
}

inline int forecast(const Config& c, const Options& o, std::ostream& out) {
  if (c.query_run.empty()) throw ConfigError("config: [query] run is required");
  if (c.query_t.empty() && c.query_x.empty()) throw ConfigError("config: [query] needs t or x");
  const fs::path run_dir = c.resolve(c.query_run);
  const nlohmann::json report = load_report(run_dir / "report.json");
  GridSpec spec;
  try {
    const auto& g = report.at("grid");
    for (std::size_t a = 0; a < 2; ++a)
      spec.axes[a] = {g.at(a).at("lo").get<double>(), g.at(a).at("hi").get<double>(), g.at(a).at("cells").get<Index>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report: malformed grid: ") + e.what());
  }
  const nlohmann::json cached = load_json_file(run_dir / "reducers" / (c.query_reducer + ".json"));
  const Reducer reducer = reducer_from_json(cached.at("reducer"));
  const std::string ckpt = c.query_checkpoint == "selected" ? "selected" : "checkpoint-" + c.query_checkpoint;
  const FlowModel model = load_flow(run_dir / "flows" / c.query_reducer / (ckpt + ".json"));

  Eigen::RowVectorXd t;
  if (!c.query_x.empty()) {
    if (static_cast<Index>(c.query_x.size()) != reducer.input_dim)
      throw ConfigError("config: [query] x has " + std::to_string(c.query_x.size()) + " values, the reducer takes " +
                        std::to_string(reducer.input_dim));
    const Eigen::RowVectorXd x = Eigen::Map<const Eigen::RowVectorXd>(c.query_x.data(), c.query_x.size());
    t = reducer.apply(Array(Matrix(x))).mat().row(0);
  } else {
    if (static_cast<Index>(c.query_t.size()) != model.m)
      throw ConfigError("config: [query] t has " + std::to_string(c.query_t.size()) + " values, the model takes " +
                        std::to_string(model.m));
    t = Eigen::Map<const Eigen::RowVectorXd>(c.query_t.data(), c.query_t.size());
  }
  const DensityGrid g = conditional_density(model, t, spec);
  const ContourLevels levels = contour_levels(g, c.weights);
  const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
  export_density_grid(g, levels, dir / "density.csv", dir / "density.json");
  out << "density grid written to " << (dir / "density.csv").string() << '\n';
  return 0;
}

inline int report(const Config& c, const Options& o, std::ostream& out) {
  if (c.report_runs.empty()) throw ConfigError("config: [report] runs is required");
  std::vector<nlohmann::json> reports;
  for (const auto& r : c.report_runs) {
    fs::path p = c.resolve(r);
    if (fs::is_directory(p)) p /= "report.json";
    reports.push_back(load_report(p));
  }
  const fs::path dir = o.out.empty() ? fs::path("summary") : fs::path(o.out);
  aggregate_reports(reports, dir);
  out << "aggregated " << reports.size() << " runs into " << dir.string() << '\n';
  return 0;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  cli::Options o;
  CLI::App app{"Probabilistic wind forecasts from information-preserving reductions and normalizing flows",
               "forecastctl"};
  app.add_option("verb", o.verb, "ingest | synth | run | forecast | report")
      ->required()
      ->check(CLI::IsMember({"ingest", "synth", "run", "forecast", "report"}));
  app.add_option("--config", o.config, "INI experiment configuration")->required();
  app.add_option("--out", o.out, "output directory");
  app.add_option("--seed", o.seed, "master seed, overriding the config");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    const Config c = load_config(o.config);
    if (o.verb == "ingest") return cli::ingest(c, o, out);
    if (o.verb == "synth") return cli::synth(c, o, out);
    if (o.verb == "run") return cli::run(c, o, out, err);
    if (o.verb == "forecast") return cli::forecast(c, o, out);
    return cli::report(c, o, out);
  } catch (const ConfigError& e) {
    err << "forecastctl: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "forecastctl: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace infoflow
