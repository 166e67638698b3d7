#include "surftrap/loading.hpp"

#include "surftrap/csv.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace surftrap {

void PlumeModel::validate() const {
  if (!(drift_speed >= 0.0) || !std::isfinite(drift_speed)) throw Error(ErrorKind::validation, "plume: drift_speed must be >= 0");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw Error(ErrorKind::validation, "plume: temperature must be >= 0");
  if (!(cone_half_angle > 0.0 && cone_half_angle <= constants::pi / 2.0)) {
    throw Error(ErrorKind::validation, "plume: cone_half_angle must be in (0, pi/2]");
  }
  if (ions_per_pulse < 1) throw Error(ErrorKind::validation, "plume: ions_per_pulse must be >= 1");
  if (!(emission_spread >= 0.0)) throw Error(ErrorKind::validation, "plume: emission_spread must be >= 0");
  if (!(axis.norm() > 0.0) || !axis.allFinite()) throw Error(ErrorKind::validation, "plume: axis must be a nonzero vector");
  if (!source_position.allFinite()) throw Error(ErrorKind::validation, "plume: source_position must be finite");
}

std::vector<PlumeIon> sample_plume(const PlumeModel& model, double mass, std::mt19937_64& rng) {
  model.validate();
  const Vec3 axis = model.axis.normalized();
  const double sigma = std::sqrt(constants::boltzmann * model.temperature / mass);
  const double cos_cone = std::cos(model.cone_half_angle);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<PlumeIon> ions;
  ions.reserve(static_cast<std::size_t>(model.ions_per_pulse));
  for (int i = 0; i < model.ions_per_pulse; ++i) {
    PlumeIon ion;
    ion.position = model.source_position;
    for (long attempt = 0;; ++attempt) {
      if (attempt == 1000000) throw Error(ErrorKind::domain, "plume: cone acceptance too low to sample");
      Vec3 v = model.drift_speed * axis;
      if (sigma > 0.0) v += sigma * Vec3(normal(rng), normal(rng), normal(rng));
      if (v.dot(axis) >= v.norm() * cos_cone) {
        ion.velocity = v;
        break;
      }
    }
    ion.emission_time = model.emission_spread * uniform(rng);
    ions.push_back(ion);
  }
  return ions;
}

void ThermalSource::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error(ErrorKind::validation, "thermal source: temperature must be > 0");
  if (!(half_size.minCoeff() >= 0.0) || !half_size.allFinite()) {
    throw Error(ErrorKind::validation, "thermal source: half_size must be >= 0");
  }
  if (events < 1) throw Error(ErrorKind::validation, "thermal source: events must be >= 1");
}

IntegratorConfig loading_integrator() {
  IntegratorConfig c;
  c.capture_periods = 500;
  c.max_rf_periods = 2000;
  return c;
}

std::vector<double> default_load_amplitudes() {
  std::vector<double> v;
  for (int i = 0; i < 10; ++i) v.push_back(100.0 * std::pow(6.0, i / 9.0));
  v.back() = 600.0;
  return v;
}

void LoadConfig::validate() const {
  if (rf_amplitudes.empty()) throw Error(ErrorKind::validation, "load: no rf amplitudes");
  for (std::size_t i = 0; i < rf_amplitudes.size(); ++i) {
    if (!(rf_amplitudes[i] > 0.0)) throw Error(ErrorKind::validation, "load: rf amplitudes must be positive");
    if (i > 0 && !(rf_amplitudes[i] > rf_amplitudes[i - 1])) {
      throw Error(ErrorKind::validation, "load: rf amplitudes must be ascending");
    }
  }
  if (trials < 1) throw Error(ErrorKind::validation, "load: trials must be >= 1");
  if (!(prescreen_margin >= 0.0)) throw Error(ErrorKind::validation, "load: prescreen margin must be >= 0");
  integrator.validate();
}

Interval wilson_interval(long k, long n, double z) {
  if (n <= 0 || k < 0 || k > n) throw Error(ErrorKind::domain, "wilson interval needs 0 <= k <= n, n > 0");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  Interval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
  // Keep p_hat inside the interval against rounding at k = 0 and k = n.
  ci.lo = std::min(ci.lo, p);
  ci.hi = std::max(ci.hi, p);
  return ci;
}

LoadRow make_row(double rf_amplitude, double depth_ev, long trials, long captured) {
  LoadRow row;
  row.rf_amplitude = rf_amplitude;
  row.depth_ev = depth_ev;
  row.trials = trials;
  row.captured = captured;
  if (trials > 0) {
    row.p_hat = static_cast<double>(captured) / static_cast<double>(trials);
    const auto ci = wilson_interval(captured, trials);
    row.ci_lo = ci.lo;
    row.ci_hi = ci.hi;
  } else {
    row.p_hat = std::numeric_limits<double>::quiet_NaN();
    row.ci_lo = 0.0;
    row.ci_hi = 1.0;
  }
  return row;
}

std::vector<LoadPoint> prepare_load(const PseudoField& field, const TrapFields& fields, const LoadConfig& cfg,
                                    std::vector<std::string>& notes) {
  std::vector<LoadPoint> points;
  for (double v : cfg.rf_amplitudes) {
    const PseudoField f = field.with_rf_amplitude(v);
    try {
      const TrapAnalysis a = analyze(f, cfg.guess);
      if (!a.barrier_found) {
        notes.push_back("Vrf " + csv::format(v) + " skipped: " + a.diagnostic);
        continue;
      }
      points.push_back(LoadPoint{v, f, a, f.psi(fields.at(a.minimum_position))});
    } catch (const Error& e) {
      notes.push_back("Vrf " + csv::format(v) + " skipped: " + std::string(to_string(e.kind())) + ": " + e.what());
    }
  }
  return points;
}

std::mt19937_64 trial_stream(std::uint64_t seed, std::uint64_t depth_index, std::uint64_t trial_index) {
  // splitmix64 finalizer over the three indices
  const auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  const std::uint64_t key = mix(mix(mix(seed) ^ depth_index) ^ trial_index);
  std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
  return std::mt19937_64(seq);
}

namespace {

enum class TrialOutcome { captured, escaped, prescreened, undecided, failed };

struct TrialResult {
  std::vector<TrialOutcome> ions;
  std::string error;  // first integrator failure
};

double secular_at(const State& s, const LoadPoint& point, const TrapFields& fields) {
  return secular_energy(s, point.field, fields, point.psi_min);
}

TrialOutcome run_ion(const State& start, double t_start, double rf_phase, const LoadPoint& point,
                     const TrapFields& fields, const VoltageTimeline& timeline, const LoadConfig& cfg,
                     std::string& error) {
  if (cfg.prescreen_margin > 0.0 && timeline.multiplier(t_start) == 1.0 &&
      secular_at(start, point, fields) > cfg.prescreen_margin * point.analysis.depth_ev) {
    return TrialOutcome::prescreened;
  }
  TrajectorySetup setup;
  setup.field = &point.field;
  setup.fields = &fields;
  setup.timeline = timeline;
  setup.config = cfg.integrator;
  setup.config.record_trace = false;
  setup.config.record_secular_energy = false;
  setup.trap_center = point.analysis.minimum_position;
  setup.psi_min = point.psi_min;
  setup.rf_phase = rf_phase;
  try {
    const auto out = integrate(start, t_start, setup);
    switch (out.classification) {
      case Classification::captured: return TrialOutcome::captured;
      case Classification::escaped: return TrialOutcome::escaped;
      case Classification::undecided: return TrialOutcome::undecided;
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::integrator) throw;
    if (error.empty()) error = e.what();
  }
  return TrialOutcome::failed;
}

/// Times [t_in, t_out] (t >= t_from) when p + v (t - t_from) is inside the box; false if never.
bool box_window(const Box3& box, const Vec3& p, const Vec3& v, double t_from, double& t_in, double& t_out) {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (v[a] == 0.0) {
      if (p[a] < box.lo[a] || p[a] > box.hi[a]) return false;
      continue;
    }
    double t1 = (box.lo[a] - p[a]) / v[a];
    double t2 = (box.hi[a] - p[a]) / v[a];
    if (t1 > t2) std::swap(t1, t2);
    lo = std::max(lo, t1);
    hi = std::min(hi, t2);
  }
  if (!(lo <= hi)) return false;
  t_in = t_from + lo;
  t_out = t_from + hi;
  return true;
}

LoadRow tally(const LoadPoint& point, const std::vector<TrialResult>& trials, std::vector<std::string>& notes) {
  long n = 0, captured = 0, failed = 0, undecided = 0, prescreened = 0;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    for (TrialOutcome o : trials[t].ions) {
      switch (o) {
        case TrialOutcome::captured: ++captured; ++n; break;
        case TrialOutcome::escaped: ++n; break;
        case TrialOutcome::prescreened: ++prescreened; ++n; break;
        case TrialOutcome::undecided: ++undecided; ++n; break;
        case TrialOutcome::failed: ++failed; break;
      }
    }
    if (!trials[t].error.empty()) {
      notes.push_back("Vrf " + csv::format(point.rf_amplitude) + " trial " + std::to_string(t) +
                      " integrator: " + trials[t].error);
    }
  }
  LoadRow row = make_row(point.rf_amplitude, point.analysis.depth_ev, n, captured);
  row.failed = failed;
  row.undecided = undecided;
  row.prescreened = prescreened;
  return row;
}

std::string fmt_vec(const Vec3& v) {
  return csv::format(v.x()) + " " + csv::format(v.y()) + " " + csv::format(v.z());
}

void common_parameters(LoadResult& r, const PseudoField& field, const LoadConfig& cfg) {
  auto& p = r.parameters;
  p.emplace_back("species.mass_kg", csv::format(field.species().mass));
  p.emplace_back("species.charge_e", std::to_string(field.species().charge));
  p.emplace_back("drive.rf_frequency_hz", csv::format(field.drive().rf_frequency_hz()));
  for (const auto& [name, v] : field.drive().dc_voltages) p.emplace_back("drive.dc." + name, csv::format(v));
  p.emplace_back("load.trials", std::to_string(cfg.trials));
  p.emplace_back("load.prescreen_margin", csv::format(cfg.prescreen_margin));
  p.emplace_back("integrator.steps_per_rf_period", std::to_string(cfg.integrator.steps_per_rf_period));
  p.emplace_back("integrator.max_rf_periods", std::to_string(cfg.integrator.max_rf_periods));
  p.emplace_back("integrator.capture_periods", std::to_string(cfg.integrator.capture_periods));
  p.emplace_back("integrator.capture_radius_m", csv::format(cfg.integrator.capture_radius));
  p.emplace_back("integrator.damping_rate_per_s", csv::format(cfg.integrator.damping_rate));
  p.emplace_back("integrator.escape_box_lo_m", fmt_vec(cfg.integrator.escape_box.lo));
  p.emplace_back("integrator.escape_box_hi_m", fmt_vec(cfg.integrator.escape_box.hi));
}

}  // namespace

LoadResult run_ablation_load(const PseudoField& field, const TrapFields& fields, const PlumeModel& plume,
                             const VoltageTimeline& timeline, const LoadConfig& cfg) {
  plume.validate();
  timeline.validate();
  cfg.validate();
  LoadResult result;
  result.loader = "ablation";
  result.seed = cfg.seed;
  auto& p = result.parameters;
  p.emplace_back("plume.source_position_m", fmt_vec(plume.source_position));
  p.emplace_back("plume.axis", fmt_vec(plume.axis));
  p.emplace_back("plume.drift_speed_mps", csv::format(plume.drift_speed));
  p.emplace_back("plume.temperature_K", csv::format(plume.temperature));
  p.emplace_back("plume.cone_half_angle_rad", csv::format(plume.cone_half_angle));
  p.emplace_back("plume.ions_per_pulse", std::to_string(plume.ions_per_pulse));
  p.emplace_back("plume.emission_spread_s", csv::format(plume.emission_spread));
  p.emplace_back("timeline.t0_s", csv::format(timeline.t0));
  p.emplace_back("timeline.short_duration_s", csv::format(timeline.short_duration));
  p.emplace_back("timeline.recovery", recovery_to_string(timeline));
  common_parameters(result, field, cfg);

  const auto points = prepare_load(field, fields, cfg, result.notes);
  const std::size_t trials = static_cast<std::size_t>(cfg.trials);
  std::vector<TrialResult> out(points.size() * trials);
  const Box3& box = cfg.integrator.escape_box;
  const double t_on = timeline.t0 + timeline.short_duration;
  const double mass = field.species().mass;

  parallel_for(out.size(), cfg.workers, [&](std::size_t job) {
    const std::size_t d = job / trials;
    const std::size_t t = job % trials;
    auto rng = trial_stream(cfg.seed, d, t);
    const double phase = 2.0 * constants::pi * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto ions = sample_plume(plume, mass, rng);
    TrialResult& r = out[job];
    for (const auto& ion : ions) {
      double t_in = 0.0, t_out = 0.0;
      if (!box_window(box, ion.position, ion.velocity, ion.emission_time, t_in, t_out)) {
        r.ions.push_back(TrialOutcome::escaped);
        continue;
      }
      double t_start = t_in;
      if (t_in >= timeline.t0 && t_in < t_on) {
        if (t_out <= t_on) {  // crossed the box while the electrodes were shorted
          r.ions.push_back(TrialOutcome::escaped);
          continue;
        }
        t_start = t_on;
      }
      const State start{ion.position + ion.velocity * (t_start - ion.emission_time), ion.velocity};
      r.ions.push_back(run_ion(start, t_start, phase, points[d], fields, timeline, cfg, r.error));
    }
  });

  for (std::size_t d = 0; d < points.size(); ++d) {
    const std::vector<TrialResult> slice(out.begin() + static_cast<long>(d * trials),
                                         out.begin() + static_cast<long>((d + 1) * trials));
    result.rows.push_back(tally(points[d], slice, result.notes));
  }
  return result;
}

LoadResult run_eimpact_load(const PseudoField& field, const TrapFields& fields, const ThermalSource& source,
                            const LoadConfig& cfg) {
  source.validate();
  cfg.validate();
  LoadResult result;
  result.loader = "eimpact";
  result.seed = cfg.seed;
  result.parameters.emplace_back("thermal.temperature_K", csv::format(source.temperature));
  result.parameters.emplace_back("thermal.half_size_m", fmt_vec(source.half_size));
  result.parameters.emplace_back("thermal.events", std::to_string(source.events));
  common_parameters(result, field, cfg);

  const auto points = prepare_load(field, fields, cfg, result.notes);
  for (const auto& point : points) {
    const Vec3& c = point.analysis.minimum_position;
    if (!cfg.integrator.escape_box.contains(c - source.half_size) ||
        !cfg.integrator.escape_box.contains(c + source.half_size)) {
      throw Error(ErrorKind::validation, "thermal source: ionization volume at Vrf " + csv::format(point.rf_amplitude) +
                                             " leaves the escape box");
    }
  }
  const std::size_t trials = static_cast<std::size_t>(cfg.trials);
  std::vector<TrialResult> out(points.size() * trials);
  const double sigma = std::sqrt(constants::boltzmann * source.temperature / field.species().mass);
  const VoltageTimeline steady = VoltageTimeline::none();

  parallel_for(out.size(), cfg.workers, [&](std::size_t job) {
    const std::size_t d = job / trials;
    const std::size_t t = job % trials;
    auto rng = trial_stream(cfg.seed, d, t);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    TrialResult& r = out[job];
    for (int e = 0; e < source.events; ++e) {
      const double phase = 2.0 * constants::pi * uniform(rng);
      State s;
      const Vec3 u(uniform(rng), uniform(rng), uniform(rng));
      s.position = points[d].analysis.minimum_position + source.half_size.cwiseProduct(2.0 * u - Vec3::Ones());
      s.velocity = sigma * Vec3(normal(rng), normal(rng), normal(rng));
      r.ions.push_back(run_ion(s, 0.0, phase, points[d], fields, steady, cfg, r.error));
    }
  });

  for (std::size_t d = 0; d < points.size(); ++d) {
    const std::vector<TrialResult> slice(out.begin() + static_cast<long>(d * trials),
                                         out.begin() + static_cast<long>((d + 1) * trials));
    result.rows.push_back(tally(points[d], slice, result.notes));
  }
  return result;
}

std::optional<double> min_loadable_depth(const LoadResult& result, double p_min) {
  if (result.rows.size() < 2) throw Error(ErrorKind::domain, "min_loadable_depth needs at least 2 rows");
  std::vector<const LoadRow*> rows;
  for (const auto& r : result.rows) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const LoadRow* a, const LoadRow* b) { return a->depth_ev < b->depth_ev; });
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]->ci_lo < p_min) continue;
    if (i == 0) return rows[0]->depth_ev;
    const LoadRow& a = *rows[i - 1];
    const LoadRow& b = *rows[i];
    const double f = (p_min - a.ci_lo) / (b.ci_lo - a.ci_lo);
    return a.depth_ev + f * (b.depth_ev - a.depth_ev);
  }
  return std::nullopt;
}

double threshold_ratio(const LoadResult& ablation, const LoadResult& eimpact, double p_min) {
  const auto a = min_loadable_depth(ablation, p_min);
  const auto e = min_loadable_depth(eimpact, p_min);
  if (!a) throw Error(ErrorKind::domain, "ablation never reaches the loading threshold");
  if (!e) throw Error(ErrorKind::domain, "electron impact never reaches the loading threshold");
  return *e / *a;
}

int monotonicity_violations(const LoadResult& result) {
  int n = 0;
  for (const auto& a : result.rows) {
    for (const auto& b : result.rows) {
      if (a.depth_ev < b.depth_ev && b.p_hat < a.p_hat && b.ci_hi < a.ci_lo) ++n;
    }
  }
  return n;
}

void write_load_csv(std::ostream& out, const LoadResult& result, const std::string& extra_header) {
  std::ostringstream head;
  if (!extra_header.empty()) {
    head << extra_header;
    if (extra_header.back() != '\n') head << '\n';
  }
  head << "loader = " << result.loader << '\n';
  head << "seed = " << result.seed << '\n';
  for (const auto& [k, v] : result.parameters) head << "param " << k << " = " << v << '\n';
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& r = result.rows[i];
    head << "row " << i << " failed=" << r.failed << " undecided=" << r.undecided << " prescreened=" << r.prescreened
         << '\n';
  }
  for (const auto& note : result.notes) head << "note " << note << '\n';
  csv::write_comment_block(out, head.str());
  out << "Vrf_V,depth_eV,trials,captured,p_hat,ci_lo,ci_hi\n";
  for (const auto& r : result.rows) {
    out << csv::format(r.rf_amplitude) << ',' << csv::format(r.depth_ev) << ',' << r.trials << ',' << r.captured << ','
        << csv::format(r.p_hat) << ',' << csv::format(r.ci_lo) << ',' << csv::format(r.ci_hi) << '\n';
  }
}

LoadResult read_load_csv(std::istream& in) {
  const csv::Table table = csv::read(in);
  const std::vector<std::string> expected{"Vrf_V", "depth_eV", "trials", "captured", "p_hat", "ci_lo", "ci_hi"};
  if (table.header != expected) throw Error(ErrorKind::parse, "not a load result table");
  LoadResult r;
  const auto to_long = [](const std::string& s) {
    try {
      std::size_t used = 0;
      const long v = std::stol(s, &used);
      if (used != s.size()) throw Error(ErrorKind::parse, "bad integer '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::parse, "bad integer '" + s + "'");
    }
  };
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    LoadRow row;
    row.rf_amplitude = table.number(i, 0);
    row.depth_ev = table.number(i, 1);
    row.trials = to_long(table.rows[i][2]);
    row.captured = to_long(table.rows[i][3]);
    row.p_hat = table.number(i, 4);
    row.ci_lo = table.number(i, 5);
    row.ci_hi = table.number(i, 6);
    r.rows.push_back(row);
  }
  for (const auto& line : table.comments) {
    if (line.rfind("loader = ", 0) == 0) {
      r.loader = line.substr(9);
    } else if (line.rfind("seed = ", 0) == 0) {
      r.seed = std::stoull(line.substr(7));
    } else if (line.rfind("param ", 0) == 0) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw Error(ErrorKind::parse, "bad parameter line '" + line + "'");
      r.parameters.emplace_back(line.substr(6, eq - 6), line.substr(eq + 3));
    } else if (line.rfind("row ", 0) == 0) {
      std::istringstream ls(line.substr(4));
      std::size_t idx = 0;
      std::string f, u, p;
      ls >> idx >> f >> u >> p;
      if (!ls || idx >= r.rows.size() || f.rfind("failed=", 0) != 0 || u.rfind("undecided=", 0) != 0 ||
          p.rfind("prescreened=", 0) != 0) {
        throw Error(ErrorKind::parse, "bad row count line '" + line + "'");
      }
      r.rows[idx].failed = to_long(f.substr(7));
      r.rows[idx].undecided = to_long(u.substr(10));
      r.rows[idx].prescreened = to_long(p.substr(12));
    } else if (line.rfind("note ", 0) == 0) {
      r.notes.push_back(line.substr(5));
    }
  }
  return r;
}

std::vector<PlumeVariant> default_plume_grid() {
  std::vector<PlumeVariant> grid;
  for (double speed : {250.0, 500.0, 1000.0, 4000.0}) {
    for (double temperature : {1e3, 1e4}) {
      for (double tau : {10e-6, 30e-6, 100e-6}) grid.push_back({speed, temperature, tau});
    }
  }
  return grid;
}

}  // namespace surftrap
