#include "cli.hpp"

#include "surftrap/cli_io.hpp"
#include "surftrap/csv.hpp"
#include "surftrap/trap_analysis.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace surftrap {

namespace {

struct Flags {
  std::string config;
  std::string layout;
  std::vector<double> vrf;
  std::optional<double> freq;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::optional<unsigned> workers;
  std::string out;
  std::optional<double> short_us;
  std::string recovery;
  std::optional<double> p_min;
  std::string cache_dir;
  std::vector<std::string> files;
};

RunConfig resolve(const Flags& f, const std::string& command) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (!f.layout.empty()) c.layout = f.layout;
  if (!f.cache_dir.empty()) c.cache_dir = f.cache_dir;
  if (!f.vrf.empty()) {
    if (command == "sweep") {
      c.sweep_amplitudes = f.vrf;
    } else if (command == "load") {
      c.load.rf_amplitudes = f.vrf;
    } else {
      if (f.vrf.size() != 1) throw Error(ErrorKind::usage, "--vrf takes one value for " + command);
      c.drive.rf_amplitude = f.vrf.front();
    }
  }
  if (f.freq) c.drive.rf_angular_frequency = 2.0 * constants::pi * *f.freq;
  if (f.seed) c.load.seed = *f.seed;
  if (f.trials) c.load.trials = *f.trials;
  if (f.workers) c.load.workers = *f.workers;
  if (f.short_us) c.timeline.short_duration = *f.short_us * 1e-6;
  if (!f.recovery.empty()) c.timeline.recovery = parse_recovery(f.recovery, c.timeline.time_constant);
  if (f.p_min) c.p_min = *f.p_min;
  c.validate();
  return c;
}

struct Trap {
  TrapLayout layout;
  std::string key;
  std::shared_ptr<const BasisSolution> basis;
  PseudoField field;
};

Trap build_trap(const RunConfig& c) {
  TrapLayout layout = c.layout.empty() ? default_layout() : load_layout(c.layout);
  SolveOptions solve;
  solve.workers = c.load.workers;
  auto basis = std::make_shared<const BasisSolution>(solve_cached(layout, c.mesh, solve, c.cache_dir));
  const DriveConfig drive = normalize_drive(c.drive, layout);
  std::string key = basis_cache_key(layout, c.mesh);
  PseudoField field(basis, drive, c.species());
  return Trap{std::move(layout), std::move(key), std::move(basis), std::move(field)};
}

std::string fmt3(const Vec3& v) {
  return csv::format(v.x()) + " " + csv::format(v.y()) + " " + csv::format(v.z());
}

void solve_command(const RunConfig& c, std::ostream& out) {
  const Trap t = build_trap(c);
  const auto& info = t.basis->info();
  csv::write_comment_block(out, config_echo(c));
  out << "cache_key = " << t.key << '\n';
  out << "patches = " << t.basis->mesh().size() << '\n';
  out << "electrodes = " << t.basis->electrodes().size() << '\n';
  out << "max_residual_V = " << csv::format(info.max_residual) << '\n';
  out << "rcond = " << csv::format(info.rcond) << '\n';
}

void analyze_command(const RunConfig& c, std::ostream& out) {
  const Trap t = build_trap(c);
  const TrapAnalysis a = analyze(t.field, c.guess);
  csv::write_comment_block(out, config_echo(c));
  out << "vrf_V = " << csv::format(c.drive.rf_amplitude) << '\n';
  out << "minimum_m = " << fmt3(a.minimum_position) << '\n';
  out << "height_mm = " << csv::format(a.minimum_position.z() * 1e3) << '\n';
  const auto& f = a.modes.frequencies_hz;
  out << "secular_Hz = " << csv::format(f[0]) << ' ' << csv::format(f[1]) << ' ' << csv::format(f[2]) << '\n';
  out << "mathieu_q = " << csv::format(a.mathieu_q[0]) << ' ' << csv::format(a.mathieu_q[1]) << ' '
      << csv::format(a.mathieu_q[2]) << '\n';
  out << "stable = " << (a.stable ? "true" : "false") << '\n';
  out << "depth_eV = " << csv::format(a.depth_ev) << '\n';
  out << "escape_m = " << fmt3(a.escape_position) << '\n';
  if (!a.barrier_found) out << "diagnostic = " << a.diagnostic << '\n';
}

void sweep_command(const RunConfig& c, std::ostream& out) {
  const Trap t = build_trap(c);
  const auto rows = sweep_depth(t.field, c.sweep_amplitudes, c.guess, c.load.workers);
  write_sweep_csv(out, rows, config_echo(c));
}

void load_command(const RunConfig& c, const std::string& loader, std::ostream& out) {
  const Trap t = build_trap(c);
  const auto grid = cached_grid(t.field, t.key, c.load.integrator.escape_box, c.grid_spacing, c.cache_dir, c.load.workers);
  const LoadResult r = loader == "ablation" ? run_ablation_load(t.field, *grid, c.plume, c.timeline, c.load)
                                            : run_eimpact_load(t.field, *grid, c.thermal, c.load);
  write_load_csv(out, r, config_echo(c));
}

LoadResult read_load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  return read_load_csv(in);
}

void threshold_command(const RunConfig& c, const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty() || files.size() > 2) throw Error(ErrorKind::usage, "threshold takes ABLATION.csv [EIMPACT.csv]");
  std::vector<LoadResult> results;
  for (const auto& f : files) results.push_back(read_load_file(f));
  out << "p_min = " << csv::format(c.p_min) << '\n';
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto d = min_loadable_depth(results[i], c.p_min);
    const std::string name = results[i].loader.empty() ? "file" + std::to_string(i + 1) : results[i].loader;
    out << name << "_min_depth_eV = " << (d ? csv::format(*d) : std::string("none")) << '\n';
  }
  if (results.size() == 2) {
    out.flush();
    out << "ratio = " << csv::format(threshold_ratio(results[0], results[1], c.p_min)) << '\n';
  }
}

void fit_command(const RunConfig& c, const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty()) throw Error(ErrorKind::usage, "fit-targets takes one or more shot-series CSV files");
  std::vector<ShotSeries> series;
  std::vector<DecayFit> fits;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + f + "'");
    series.push_back(read_shot_series(in, std::filesystem::path(f).stem().string()));
    fits.push_back(fit_target_decay(series.back()));
  }
  write_fit_csv(out, series, fits, config_echo(c));
}

void export_command(const RunConfig& c, std::ostream& out) {
  const Trap t = build_trap(c);
  std::map<std::string, double> voltages = t.field.drive().dc_voltages;
  for (const auto& e : t.basis->electrodes()) {
    if (e.role == Role::rf) voltages[e.name] = c.drive.rf_amplitude;
  }
  csv::write_comment_block(out, config_echo(c));
  export_grid(*t.basis, voltages, c.export_box, c.export_spacing, out);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Surface ion trap field solver, trap analysis and loading simulator", "surftrap"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("--layout", f.layout, "geometry file (default: bundled layout)");
  app.add_option("--vrf", f.vrf, "rf amplitude in volts; a comma list for sweep and load")
      ->delimiter(',')
      ->allow_extra_args(false);
  app.add_option("--freq", f.freq, "rf drive frequency in Hz");
  app.add_option("--seed", f.seed, "master seed");
  app.add_option("--trials", f.trials, "ions per amplitude");
  app.add_option("--workers", f.workers, "worker threads (0 = all cores)");
  app.add_option("--out", f.out, "output file (default: stdout)");
  app.add_option("--short-us", f.short_us, "electrode short duration in microseconds");
  app.add_option("--recovery", f.recovery, "step or exp:TAU_US");
  app.add_option("--p-min", f.p_min, "capture probability threshold");
  app.add_option("--cache-dir", f.cache_dir, "basis and grid cache directory");

  app.add_subcommand("solve", "mesh and solve the electrode basis, filling the cache");
  app.add_subcommand("analyze", "minimum, secular frequencies, q and depth for one drive");
  app.add_subcommand("sweep", "depth table over rf amplitudes");
  auto* load = app.add_subcommand("load", "Monte Carlo loading");
  load->require_subcommand(1);
  load->add_subcommand("ablation", "ablation plume with electrode shorting");
  load->add_subcommand("eimpact", "electron impact ionization in the trap");
  app.add_subcommand("threshold", "minimum loadable depth and ratio")->add_option("files", f.files, "load CSV files");
  app.add_subcommand("fit-targets", "fit shot series decays")->add_option("files", f.files, "shot series CSV files");
  app.add_subcommand("export-field", "potential and field on a grid");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    const auto extra = app.remaining();
    if (app.get_subcommands().empty() && !extra.empty()) msg = "unknown subcommand '" + extra.front() + "'";
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "usage: " << msg << '\n' << app.help();
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig c = resolve(f, command);
    std::ofstream file;
    if (!f.out.empty()) {
      file.open(f.out);
      if (!file) throw Error(ErrorKind::io, "cannot write '" + f.out + "'");
    }
    std::ostream& sink = f.out.empty() ? out : file;
    if (command == "solve") {
      solve_command(c, sink);
    } else if (command == "analyze") {
      analyze_command(c, sink);
    } else if (command == "sweep") {
      sweep_command(c, sink);
    } else if (command == "load") {
      load_command(c, load->get_subcommands().front()->get_name(), sink);
    } else if (command == "threshold") {
      threshold_command(c, f.files, sink);
    } else if (command == "fit-targets") {
      fit_command(c, f.files, sink);
    } else {
      export_command(c, sink);
    }
    sink.flush();
    if (!sink) throw Error(ErrorKind::io, "write failed");
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << to_string(e.kind()) << ": " << msg << '\n';
    return e.kind() == ErrorKind::usage ? 2 : 1;
  } catch (const std::exception& e) {
    err << "internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace surftrap
