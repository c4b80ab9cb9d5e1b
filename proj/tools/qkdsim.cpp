#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qkd/qkd.hpp"

namespace {

enum ExitCode : int { kOk = 0, kConfigError = 2, kSyncFailure = 3, kIoError = 4 };

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 1;
  std::vector<std::string> overrides;
  std::optional<double> duration;
  bool hour = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "Configuration file (key = value lines)");
  cmd->add_option("--seed", a.seed, "Run seed");
  cmd->add_option("--set", a.overrides, "Override a configuration key, e.g. --set channel_loss_db=12");
  cmd->add_option("--duration", a.duration, "Simulated duration in seconds");
  cmd->add_flag("--hour", a.hour, "Hour-scale run (duration = key_block_duration)");
}

qkd::ProtocolParams load_params(const CommonArgs& a) {
  qkd::ProtocolParams p;
  if (!a.config.empty()) p = qkd::load_config(a.config, p);
  for (const auto& o : a.overrides) {
    std::istringstream line(o);
    p = qkd::parse_config(line, p);
  }
  if (a.hour) p.duration = p.key_block_duration;
  if (a.duration) p.duration = *a.duration;
  return p;
}

std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw qkd::IoError("cannot create '" + dir + "': " + ec.message());
  return dir;
}

int cmd_simulate(const CommonArgs& a, const std::string& out, bool truth, std::uint64_t dump) {
  const auto params = qkd::validate_params(load_params(a));
  qkd::RunOptions opt;
  opt.seed = a.seed;
  opt.out_dir = out;
  opt.write_truth_csv = truth;
  opt.dump_pulses = dump;
  const auto r = qkd::run_simulation(params, opt);
  qkd::write_summary(std::cout, r);
  return kOk;
}

int cmd_analyze(const CommonArgs& a, const std::string& in, const std::string& out) {
  const auto params = qkd::validate_params(load_params(a));
  const auto r = qkd::run_analysis(params, a.seed, in, std::filesystem::path(out));
  qkd::write_summary(std::cout, r);
  return kOk;
}

int cmd_sweep(const CommonArgs& a, double lo, double hi, double step, unsigned workers, const std::string& out) {
  const auto base = load_params(a);
  qkd::validate_params(base);
  const auto grid = qkd::loss_grid(lo, hi, step);
  const auto points = qkd::run_sweep(base, grid, a.seed, workers);
  for (const auto& pt : points)
    if (!pt.synchronized) std::cerr << "loss " << pt.loss_db << " dB: " << pt.message << '\n';
  const auto dir = ensure_dir(out);
  std::ofstream csv(dir / "sweep.csv");
  if (!csv) throw qkd::IoError("cannot write sweep.csv");
  qkd::write_sweep_csv(csv, points);
  qkd::write_sweep_csv(std::cout, points);
  return kOk;
}

int cmd_sync_test(const CommonArgs& a, const qkd::SyncTrialOptions& base_opt, const std::string& out) {
  const auto p = load_params(a);
  qkd::validate_params(p);
  auto opt = base_opt;
  opt.seed = a.seed;
  const auto s = qkd::run_sync_test(p, opt);
  std::ostringstream table;
  table << "trial,drift_ppm,offset_s,events,period_error,offset_pulses,period_ok,offset_ok,success\n";
  table << std::setprecision(10);
  for (const auto& t : s.trials)
    table << t.trial << ',' << t.drift_ppm << ',' << t.offset << ',' << t.events << ',' << t.period_error
          << ',' << t.offset_pulses << ',' << t.period_ok << ',' << t.offset_ok << ',' << t.success << '\n';
  if (!out.empty()) {
    const auto dir = ensure_dir(out);
    std::ofstream f(dir / "sync_test.csv");
    if (!f) throw qkd::IoError("cannot write sync_test.csv");
    f << table.str();
  }
  std::cout << table.str();
  for (const auto& t : s.trials)
    if (!t.success) std::cerr << "trial " << t.trial << ": " << t.failure << '\n';
  std::cout << "success " << s.successes << '/' << s.trials.size() << " (" << 100.0 * s.success_rate() << "%)\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoy-state three-state BB84 link simulator and finite-key post-processing"};
  app.require_subcommand(1);

  CommonArgs sim_args, ana_args, sweep_args, sync_args;
  std::string sim_out = "run";
  bool sim_truth = false;
  std::uint64_t sim_dump = 0;
  auto* sim = app.add_subcommand("simulate", "Simulate a link run and post-process it");
  add_common(sim, sim_args);
  sim->add_option("--out", sim_out, "Output directory");
  sim->add_flag("--truth", sim_truth, "Write truth.csv with per-event labels");
  sim->add_option("--dump-pulses", sim_dump, "Write the first N pulses to pulses.csv");

  std::string ana_in, ana_out = "analysis";
  auto* ana = app.add_subcommand("analyze", "Post-process stored timestamps and Alice records");
  add_common(ana, ana_args);
  ana->add_option("--in", ana_in, "Directory with events.bin and alice_records.bin")->required();
  ana->add_option("--out", ana_out, "Output directory");

  double loss_min = 0.0, loss_max = 30.0, loss_step = 1.0;
  unsigned workers = 1;
  std::string sweep_out = "sweep";
  auto* sweep = app.add_subcommand("sweep", "Simulate a range of channel losses");
  add_common(sweep, sweep_args);
  sweep->add_option("--loss-min", loss_min, "First loss point (dB)");
  sweep->add_option("--loss-max", loss_max, "Last loss point (dB)");
  sweep->add_option("--step", loss_step, "Loss step (dB)");
  sweep->add_option("--workers", workers, "Concurrent sweep points");
  sweep->add_option("--out", sweep_out, "Output directory");

  qkd::SyncTrialOptions sync_opt;
  std::optional<double> sync_offset;
  std::string sync_out;
  auto* sync = app.add_subcommand("sync-test", "Repeated synchronization trials");
  add_common(sync, sync_args);
  sync->add_option("--drift", sync_opt.drift_ppm, "Clock drift (ppm)");
  sync->add_option("--offset", sync_offset, "Clock offset (s); random per trial when omitted");
  sync->add_option("--trials", sync_opt.trials, "Number of trials");
  sync->add_option("--trial-duration", sync_opt.duration, "Simulated seconds per trial");
  sync->add_option("--out", sync_out, "Output directory for sync_test.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*sim) return cmd_simulate(sim_args, sim_out, sim_truth, sim_dump);
    if (*ana) return cmd_analyze(ana_args, ana_in, ana_out);
    if (*sweep) return cmd_sweep(sweep_args, loss_min, loss_max, loss_step, workers, sweep_out);
    if (*sync) {
      sync_opt.offset = sync_offset;
      if (sync_args.duration) sync_opt.duration = *sync_args.duration;
      return cmd_sync_test(sync_args, sync_opt, sync_out);
    }
  } catch (const qkd::SyncFailure& e) {
    std::cerr << "error: " << e.what() << '\n';
    std::cerr << "folded histogram (bin_center_ps,count):\n";
    for (std::size_t b = 0; b < e.histogram.bins.size(); ++b)
      std::cerr << e.histogram.bin_center(b) * 1e12 << ',' << e.histogram.bins[b] << '\n';
    return kSyncFailure;
  } catch (const qkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const qkd::ParamError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const qkd::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  }
  return kOk;
}
