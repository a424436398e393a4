#include "flowcast/cli.hpp"

#include "flowcast/checkpoint.hpp"
#include "flowcast/config.hpp"
#include "flowcast/metrics.hpp"
#include "flowcast/scenario.hpp"
#include "flowcast/streamer.hpp"
#include "flowcast/svgplot.hpp"
#include "flowcast/textio.hpp"
#include "flowcast/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace flowcast::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct HorizonFlag {
  bool set = false;
  HorizonConfig value;
};

/// `--horizon tau_h,tau_f,K`
HorizonConfig parse_horizon(const std::string& text) {
  const std::vector<std::string> parts = textio::split_csv(text);
  if (parts.size() != 3)
    throw CLI::ValidationError("--horizon", "expected tau_h,tau_f,K");
  HorizonConfig h;
  try {
    h.tau_h = static_cast<int>(textio::parse_long(parts[0], 0, "tau_h"));
    h.tau_f = static_cast<int>(textio::parse_long(parts[1], 0, "tau_f"));
    h.num_modes = static_cast<int>(textio::parse_long(parts[2], 0, "K"));
  } catch (const std::exception& e) {
    throw CLI::ValidationError("--horizon", e.what());
  }
  h.validate();
  return h;
}

std::vector<std::string> list_scenario_files(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw std::runtime_error("scenario directory not found: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".log")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .log scenario files in " + dir);
  return files;
}

std::vector<scenario::Scenario> load_scenarios(const std::vector<std::string>& files) {
  std::vector<scenario::Scenario> out;
  out.reserve(files.size());
  for (const std::string& f : files) {
    try {
      out.push_back(scenario::read_log_file(f));
    } catch (const std::exception& e) {
      throw std::runtime_error(f + ": " + e.what());
    }
  }
  return out;
}

void write_loss_csv(const std::string& path, const train::TrainResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < result.epoch_losses.size(); ++i)
    out << i << ',' << textio::format_double(result.epoch_losses[i]) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

// -------------------------------------------------------------------------
// generate
// -------------------------------------------------------------------------

struct GenerateArgs {
  std::string out_dir;
  std::string config_path;
  std::uint64_t seed = 0;
  int count = 10;
};

int cmd_generate(const GenerateArgs& args, std::ostream& out) {
  config::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = config::load_config_file(args.config_path);
  if (args.count < 1) throw std::runtime_error("generate: --count must be >= 1");
  fs::create_directories(args.out_dir);

  std::vector<std::string> names;
  for (int i = 0; i < args.count; ++i) {
    const std::uint64_t seed = args.seed + static_cast<std::uint64_t>(i);
    const scenario::Scenario scn = scenario::generate_scenario(seed, cfg.generator);
    std::ostringstream name;
    name << "scenario_" << std::setw(5) << std::setfill('0') << seed << ".log";
    scenario::write_log_file(scn, (fs::path(args.out_dir) / name.str()).string());
    names.push_back(name.str());
  }

  json manifest;
  manifest["version"] = 1;
  manifest["config_hash"] = config::config_hash(cfg);
  manifest["generator"] = json::parse(config::canonical_dump(cfg))["generator"];
  manifest["seed_start"] = args.seed;
  manifest["count"] = args.count;
  manifest["files"] = names;
  {
    const std::string path = (fs::path(args.out_dir) / "manifest.json").string();
    std::ofstream mf(path, std::ios::binary);
    if (!mf) throw std::runtime_error("cannot open for writing: " + path);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("write failed: " + path);
  }
  out << "generated " << args.count << " scenarios in " << args.out_dir << " (config "
      << config::config_hash(cfg) << ")\n";
  return 0;
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string data_dir;
  std::string in_path;
  std::string out_path;
  std::string config_path;
  std::string loss_csv;
  HorizonFlag horizon;
  std::uint64_t seed = 1;
  int epochs_override = -1;
};

int cmd_train(const TrainArgs& args, std::ostream& out) {
  config::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = config::load_config_file(args.config_path);

  const std::vector<scenario::Scenario> scenarios =
      load_scenarios(list_scenario_files(args.data_dir));
  const std::string loss_path =
      args.loss_csv.empty() ? args.out_path + ".loss.csv" : args.loss_csv;

  train::TrainResult result;
  if (args.stage == "pretrain") {
    if (!args.in_path.empty())
      throw std::runtime_error("train: pretrain starts from scratch, --in not accepted");
    const HorizonConfig horizon = args.horizon.set ? args.horizon.value : cfg.horizon;
    forecast::LearnedForecaster model(horizon, cfg.forecaster.feature_size,
                                      cfg.forecaster.hidden);
    std::mt19937_64 rng(args.seed);
    model.init(rng);

    train::DatasetConfig dataset;
    const std::vector<train::SampleGroup> groups =
        train::build_snapshot_dataset(scenarios, horizon, dataset);
    train::TrainConfig tc = train::pretrain_config();
    tc.adam.lr = cfg.training.pretrain_lr;
    tc.adam.weight_decay = cfg.training.weight_decay;
    tc.epochs = args.epochs_override >= 0 ? args.epochs_override : cfg.training.pretrain_epochs;
    tc.huber_delta = cfg.training.huber_delta;
    tc.conf_weight = cfg.training.conf_weight;
    tc.single_weight = cfg.training.single_weight;
    tc.seed = args.seed;
    result = train::train_snapshot(model, groups, tc);
    ckpt::write_checkpoint_file(ckpt::snapshot(model, ckpt::Stage::kPretrained), args.out_path);
  } else if (args.stage == "finetune") {
    if (args.in_path.empty())
      throw std::runtime_error("train: finetune requires --in with a pretrained checkpoint");
    const ckpt::Checkpoint base = ckpt::read_checkpoint_file(args.in_path);
    if (base.stage != ckpt::Stage::kPretrained)
      throw std::runtime_error(std::string("train: stage order violated, finetune needs a "
                                           "pretrained checkpoint, got ") +
                               ckpt::to_string(base.stage));
    if (args.horizon.set && !(args.horizon.value == base.horizon))
      throw std::runtime_error("train: --horizon does not match the checkpoint");
    const std::unique_ptr<forecast::LearnedForecaster> model = ckpt::make_forecaster(base);

    train::DatasetConfig dataset;
    dataset.group_size = cfg.training.finetune_group;
    const std::vector<train::SampleGroup> groups =
        train::build_snapshot_dataset(scenarios, base.horizon, dataset);
    train::TrainConfig tc = train::finetune_config();
    tc.adam.lr = cfg.training.finetune_lr;
    tc.adam.weight_decay = cfg.training.weight_decay;
    tc.epochs = args.epochs_override >= 0 ? args.epochs_override : cfg.training.finetune_epochs;
    tc.huber_delta = cfg.training.huber_delta;
    tc.conf_weight = cfg.training.conf_weight;
    tc.single_weight = cfg.training.single_weight;
    tc.seed = args.seed;
    result = train::train_snapshot(*model, groups, tc);
    ckpt::write_checkpoint_file(ckpt::snapshot(*model, ckpt::Stage::kFinetuned), args.out_path);
  } else if (args.stage == "stream") {
    if (args.in_path.empty())
      throw std::runtime_error("train: stream requires --in with a finetuned checkpoint");
    const ckpt::Checkpoint base = ckpt::read_checkpoint_file(args.in_path);
    if (base.stage != ckpt::Stage::kFinetuned)
      throw std::runtime_error(std::string("train: stage order violated, stream needs a "
                                           "finetuned checkpoint, got ") +
                               ckpt::to_string(base.stage));
    if (args.horizon.set && !(args.horizon.value == base.horizon))
      throw std::runtime_error("train: --horizon does not match the checkpoint");
    const std::unique_ptr<forecast::LearnedForecaster> model = ckpt::make_forecaster(base);

    df::CovarianceNet net(model->feature_size(), cfg.dfilter.hidden, base.horizon.tau_f);
    std::mt19937_64 rng(args.seed);
    net.init(rng, cfg.dfilter.output_bias);

    df::RefinerConfig rc;
    rc.q = cfg.dfilter.q;
    rc.sigma0 = cfg.dfilter.sigma0;
    train::StreamingTrainConfig sc = train::streaming_config();
    sc.adam.lr = cfg.training.stream_lr;
    sc.adam.weight_decay = cfg.training.weight_decay;
    sc.epochs = args.epochs_override >= 0 ? args.epochs_override : cfg.training.stream_epochs;
    sc.window = cfg.training.stream_window;
    sc.huber_delta = cfg.training.huber_delta;
    result = train::streaming_train(*model, net, rc, scenarios, sc);
    ckpt::write_checkpoint_file(ckpt::snapshot(*model, net, ckpt::Stage::kStreamed),
                                args.out_path);
  } else {
    throw std::runtime_error("train: unknown stage '" + args.stage + "'");
  }

  write_loss_csv(loss_path, result);
  out << "stage " << args.stage << ": " << result.steps << " steps";
  if (!result.epoch_losses.empty())
    out << ", final epoch loss " << textio::format_double(result.epoch_losses.back());
  out << "\ncheckpoint: " << args.out_path << "\nloss curve: " << loss_path << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// evaluate
// -------------------------------------------------------------------------

struct EvaluateArgs {
  std::string data_dir;
  std::string checkpoint;
  std::string config_path;
  std::string report_path = "report.csv";
  std::string summary_path;
  std::string policy = "multi";
  std::string refiner = "none";
  HorizonFlag horizon;
  int k_eval = 0;  // 0 = both
  double mr_threshold = std::numeric_limits<double>::quiet_NaN();
  bool ablation = false;
};

struct EvalCell {
  std::string label;
  stream::OcclusionPolicy policy;
  std::string refiner;  // df | none | kf
};

metrics::MetricsReport run_suite(const std::vector<scenario::Scenario>& scenarios,
                                 const std::vector<scenario::QuerySchedule>& schedules,
                                 const forecast::LearnedForecaster& model,
                                 const ckpt::Checkpoint& checkpoint,
                                 const config::ExperimentConfig& cfg, const EvalCell& cell) {
  std::unique_ptr<df::CovarianceNet> net;
  std::optional<df::Refiner> refiner;
  if (cell.refiner == "df") {
    if (!checkpoint.has_covariance_net())
      throw std::runtime_error(
          "evaluate: refiner 'df' needs a streamed checkpoint with covariance-net parameters");
    net = ckpt::make_covariance_net(checkpoint);
    df::RefinerConfig rc;
    rc.q = cfg.dfilter.q;
    rc.sigma0 = cfg.dfilter.sigma0;
    refiner.emplace(rc, net.get());
  } else if (cell.refiner == "kf") {
    df::RefinerConfig rc;
    rc.q = cfg.dfilter.q;
    rc.sigma0 = cfg.dfilter.sigma0;
    rc.fixed_r = cfg.dfilter.fixed_r_variance;
    refiner.emplace(rc, nullptr);
  } else if (cell.refiner != "none") {
    throw std::runtime_error("evaluate: unknown refiner '" + cell.refiner + "'");
  }

  metrics::MetricsAccumulator acc(checkpoint.horizon, cfg.metrics);
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const stream::StreamResult result =
        stream::run_stream(scenarios[i], schedules[i], model, cell.policy,
                           refiner ? &*refiner : nullptr, cfg.kalman);
    acc.add_scenario(scenarios[i], schedules[i], result.log);
  }
  return acc.report();
}

void append_ablation_rows(std::ostream& out, const std::string& run, int k,
                          const metrics::MetricsReport& report) {
  auto cell = [](const std::optional<double>& v) {
    return v ? textio::format_double(*v) : std::string();
  };
  const auto& mv = report.subset(Subset::kMovingVisible);
  const auto& mo = report.subset(Subset::kMovingOccluded);
  const auto& sv = report.subset(Subset::kStaticVisible);
  const auto& so = report.subset(Subset::kStaticOccluded);
  const bool k6 = k == 6;
  out << run << ',' << k << ',' << cell(k6 ? mv.min_fde_k6 : mv.min_fde_k1) << ','
      << cell(k6 ? mo.min_fde_k6 : mo.min_fde_k1) << ','
      << cell(k6 ? sv.min_fde_k6 : sv.min_fde_k1) << ','
      << cell(k6 ? so.min_fde_k6 : so.min_fde_k1) << ','
      << cell(k6 ? report.overall_min_fde_k6 : report.overall_min_fde_k1) << ','
      << cell(k6 ? report.overall_min_ade_k6 : report.overall_min_ade_k1) << ','
      << cell(k6 ? report.overall_mr_k6 : report.overall_mr_k1) << ','
      << cell(report.overall_fluct) << "\n";
}

int cmd_evaluate(const EvaluateArgs& args, std::ostream& out) {
  config::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = config::load_config_file(args.config_path);
  if (!std::isnan(args.mr_threshold)) cfg.metrics.mr_threshold = args.mr_threshold;
  cfg.metrics.validate();

  const ckpt::Checkpoint checkpoint = ckpt::read_checkpoint_file(args.checkpoint);
  if (args.horizon.set && !(args.horizon.value == checkpoint.horizon))
    throw std::runtime_error("evaluate: --horizon does not match the checkpoint");
  const std::unique_ptr<forecast::LearnedForecaster> model = ckpt::make_forecaster(checkpoint);

  const std::vector<scenario::Scenario> scenarios =
      load_scenarios(list_scenario_files(args.data_dir));
  std::vector<scenario::QuerySchedule> schedules;
  schedules.reserve(scenarios.size());
  for (const scenario::Scenario& scn : scenarios)
    schedules.push_back(scenario::build_schedule(scn, checkpoint.horizon));

  if (args.ablation) {
    const std::vector<EvalCell> cells = {
        {"baseline", stream::OcclusionPolicy::kKalmanBaseline, "none"},
        {"+OCC", stream::OcclusionPolicy::kMultiModal, "none"},
        {"+OCC+DF", stream::OcclusionPolicy::kMultiModal, "df"},
    };
    std::vector<int> ks;
    if (args.k_eval == 0)
      ks = {1, 6};
    else
      ks = {args.k_eval};

    std::vector<metrics::MetricsReport> reports;
    reports.reserve(cells.size());
    for (const EvalCell& cell : cells)
      reports.push_back(run_suite(scenarios, schedules, *model, checkpoint, cfg, cell));

    std::ostringstream body;
    body << "run,k_eval,min_fde_moving_visible,min_fde_moving_occluded,min_fde_static_visible,"
            "min_fde_static_occluded,min_fde_overall,min_ade_overall,mr_overall,fluctuation\n";
    for (int k : ks)
      for (std::size_t i = 0; i < cells.size(); ++i)
        append_ablation_rows(body, cells[i].label, k, reports[i]);
    std::ofstream rf(args.report_path, std::ios::binary);
    if (!rf) throw std::runtime_error("cannot open for writing: " + args.report_path);
    rf << body.str();
    if (!rf) throw std::runtime_error("write failed: " + args.report_path);
    out << body.str();
    return 0;
  }

  stream::OcclusionPolicy policy = stream::policy_from_string(args.policy);
  EvalCell cell{"run", policy, args.refiner};
  const metrics::MetricsReport report =
      run_suite(scenarios, schedules, *model, checkpoint, cfg, cell);

  std::ofstream rf(args.report_path, std::ios::binary);
  if (!rf) throw std::runtime_error("cannot open for writing: " + args.report_path);
  metrics::write_report_csv(rf, report);
  if (!rf) throw std::runtime_error("write failed: " + args.report_path);

  const std::string text = metrics::report_text(report);
  if (!args.summary_path.empty()) {
    std::ofstream sf(args.summary_path, std::ios::binary);
    if (!sf) throw std::runtime_error("cannot open for writing: " + args.summary_path);
    sf << text;
    if (!sf) throw std::runtime_error("write failed: " + args.summary_path);
  }
  out << text;
  return 0;
}

// -------------------------------------------------------------------------
// plot
// -------------------------------------------------------------------------

struct ParsedReport {
  std::string name;
  /// Rows: the four subsets in declaration order plus overall as index 4.
  /// Columns mirror the report CSV: subset,queries,agents,min_fde_k6,
  /// min_ade_k6,mr_k6,min_fde_k1,min_ade_k1,mr_k1,fluctuation.
  std::array<std::array<double, 10>, 5> table;
};

ParsedReport parse_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report: " + path);
  ParsedReport parsed;
  parsed.name = fs::path(path).stem().string();
  for (auto& row : parsed.table) row.fill(std::numeric_limits<double>::quiet_NaN());

  std::string line;
  long line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = textio::split_csv(line);
    if (!header_seen) {
      if (f.empty() || f[0] != "subset")
        throw std::runtime_error(path + ": not a metrics report (missing header)");
      header_seen = true;
      continue;
    }
    if (f.size() != 10) textio::parse_fail(line_no, "report row needs 10 columns");
    int row;
    if (f[0] == "overall") {
      row = 4;
    } else {
      const std::optional<Subset> s = subset_from_string(f[0]);
      if (!s) textio::parse_fail(line_no, "unknown subset '" + f[0] + "'");
      row = static_cast<int>(*s);
    }
    for (int c = 3; c < 10; ++c) {
      if (f[static_cast<std::size_t>(c)].empty()) continue;
      parsed.table[static_cast<std::size_t>(row)][static_cast<std::size_t>(c)] =
          textio::parse_double(f[static_cast<std::size_t>(c)], line_no, "metric value");
    }
  }
  if (!header_seen) throw std::runtime_error(path + ": empty report");
  return parsed;
}

struct PlotArgs {
  std::vector<std::string> reports;
  std::string out_path;
};

int cmd_plot(const PlotArgs& args, std::ostream& out) {
  if (args.reports.empty()) throw std::runtime_error("plot: no report files given");
  std::vector<ParsedReport> parsed;
  for (const std::string& p : args.reports) parsed.push_back(parse_report_csv(p));

  const std::vector<std::string> groups = {"moving_visible", "moving_occluded", "static_visible",
                                           "static_occluded", "overall"};
  svg::BarChart fde;
  fde.title = "minFDE (K=6) by subset";
  fde.y_label = "minFDE [m]";
  fde.group_labels = groups;
  svg::BarChart fluct;
  fluct.title = "Fluctuation by subset";
  fluct.y_label = "fluctuation [m/frame]";
  fluct.group_labels = groups;
  for (const ParsedReport& r : parsed) {
    svg::BarSeries fde_series{r.name, {}};
    svg::BarSeries fluct_series{r.name, {}};
    for (int row = 0; row < 5; ++row) {
      fde_series.values.push_back(r.table[static_cast<std::size_t>(row)][3]);
      fluct_series.values.push_back(r.table[static_cast<std::size_t>(row)][9]);
    }
    fde.series.push_back(std::move(fde_series));
    fluct.series.push_back(std::move(fluct_series));
  }
  svg::write_charts_file({fde, fluct}, args.out_path);
  out << "wrote " << args.out_path << "\n";
  return 0;
}

}  // namespace

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"streaming motion-forecasting engine"};
  app.require_subcommand(1);

  GenerateArgs gen;
  CLI::App* generate = app.add_subcommand("generate", "generate synthetic scenario logs");
  generate->add_option("--out", gen.out_dir, "output directory")->required();
  generate->add_option("--seed", gen.seed, "first seed");
  generate->add_option("--count", gen.count, "number of scenarios");
  generate->add_option("--config", gen.config_path, "experiment config file");

  TrainArgs tr;
  std::string tr_horizon;
  CLI::App* train_cmd = app.add_subcommand("train", "run one training stage");
  train_cmd->add_option("--stage", tr.stage, "pretrain | finetune | stream")
      ->required()
      ->check(CLI::IsMember({"pretrain", "finetune", "stream"}));
  train_cmd->add_option("--data", tr.data_dir, "scenario log directory")->required();
  train_cmd->add_option("--in", tr.in_path, "input checkpoint (finetune, stream)");
  train_cmd->add_option("--out", tr.out_path, "output checkpoint")->required();
  train_cmd->add_option("--config", tr.config_path, "experiment config file");
  train_cmd->add_option("--loss-csv", tr.loss_csv, "loss curve output (default <out>.loss.csv)");
  train_cmd->add_option("--seed", tr.seed, "training seed");
  train_cmd->add_option("--epochs", tr.epochs_override, "override the stage's epoch count");
  train_cmd->add_option("--horizon", tr_horizon, "tau_h,tau_f,K (pretrain only)");

  EvaluateArgs ev;
  std::string ev_horizon;
  CLI::App* evaluate = app.add_subcommand("evaluate", "stream scenarios and report metrics");
  evaluate->add_option("--data", ev.data_dir, "scenario log directory")->required();
  evaluate->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")->required();
  evaluate->add_option("--config", ev.config_path, "experiment config file");
  evaluate->add_option("--report", ev.report_path, "report CSV output path");
  evaluate->add_option("--summary", ev.summary_path, "text summary output path");
  evaluate->add_option("--policy", ev.policy, "occlusion policy")
      ->check(CLI::IsMember({"multi", "single", "kf"}));
  evaluate->add_option("--refiner", ev.refiner, "prediction refiner")
      ->check(CLI::IsMember({"df", "none", "kf"}));
  evaluate->add_option("--k-eval", ev.k_eval, "confidence modes scored in the ablation CSV")
      ->check(CLI::IsMember({1, 6}));
  evaluate->add_option("--mr-threshold", ev.mr_threshold, "miss-rate threshold in meters");
  evaluate->add_option("--horizon", ev_horizon, "tau_h,tau_f,K cross-check");
  evaluate->add_flag("--ablation", ev.ablation,
                     "run the baseline / +OCC / +OCC+DF grid in one invocation");

  PlotArgs pl;
  CLI::App* plot = app.add_subcommand("plot", "render metric bar charts to SVG");
  plot->add_option("reports", pl.reports, "metrics report CSV files")->required();
  plot->add_option("--out", pl.out_path, "SVG output path")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*generate) return cmd_generate(gen, out);
    if (*train_cmd) {
      if (!tr_horizon.empty()) {
        tr.horizon.value = parse_horizon(tr_horizon);
        tr.horizon.set = true;
      }
      return cmd_train(tr, out);
    }
    if (*evaluate) {
      if (!ev_horizon.empty()) {
        ev.horizon.value = parse_horizon(ev_horizon);
        ev.horizon.set = true;
      }
      return cmd_evaluate(ev, out);
    }
    if (*plot) return cmd_plot(pl, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no subcommand\n";
  return 1;
}

}  // namespace flowcast::cli
