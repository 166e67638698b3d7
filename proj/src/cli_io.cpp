#include "surftrap/cli_io.hpp"

#include "surftrap/csv.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

namespace surftrap {

using nlohmann::json;

void ShotSeries::validate() const {
  if (shots.size() != signal.size()) throw Error(ErrorKind::validation, "shot series: column lengths differ");
  for (std::size_t i = 0; i < shots.size(); ++i) {
    if (i > 0 && shots[i] <= shots[i - 1]) {
      throw Error(ErrorKind::validation, "shot series: shot numbers must strictly increase (row " + std::to_string(i) + ")");
    }
    if (!std::isfinite(signal[i]) || signal[i] < 0.0) {
      throw Error(ErrorKind::validation, "shot series: signal must be finite and >= 0 (row " + std::to_string(i) + ")");
    }
  }
}

ShotSeries read_shot_series(std::istream& in, std::string label) {
  const csv::Table table = csv::read(in);
  if (table.header != std::vector<std::string>{"shot", "signal_photons_per_ms"}) {
    throw Error(ErrorKind::parse, "shot series: expected header shot,signal_photons_per_ms");
  }
  ShotSeries s;
  s.label = std::move(label);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const double shot = table.number(i, 0);
    if (shot != std::floor(shot) || std::abs(shot) > 9e15) {
      throw Error(ErrorKind::parse, "shot series: shot '" + table.rows[i][0] + "' is not an integer");
    }
    s.shots.push_back(static_cast<long>(shot));
    s.signal.push_back(table.number(i, 1));
  }
  s.validate();
  return s;
}

void write_shot_series(std::ostream& out, const ShotSeries& series) {
  if (!series.label.empty()) csv::write_comment_block(out, "target = " + series.label);
  out << "shot,signal_photons_per_ms\n";
  for (std::size_t i = 0; i < series.shots.size(); ++i) {
    out << series.shots[i] << ',' << csv::format(series.signal[i]) << '\n';
  }
}

namespace {

struct Fit {
  Eigen::Vector3d p = Eigen::Vector3d::Zero();  // A, ln n0, C
  double cost = std::numeric_limits<double>::infinity();
};

double cost_of(const Eigen::Vector3d& p, const std::vector<double>& n, const std::vector<double>& s) {
  const double n0 = std::exp(p[1]);
  double c = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double r = p[0] * std::exp(-n[i] / n0) + p[2] - s[i];
    c += r * r;
  }
  return c;
}

Fit levenberg_marquardt(Eigen::Vector3d p, const std::vector<double>& n, const std::vector<double>& s) {
  const double max_log = std::log(1e12);
  double cost = cost_of(p, n, s);
  double lambda = 1e-3;
  for (int iter = 0; iter < 500; ++iter) {
    const double n0 = std::exp(p[1]);
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n.size(); ++i) {
      const double e = std::exp(-n[i] / n0);
      const Eigen::Vector3d j(e, p[0] * e * n[i] / n0, 1.0);
      const double r = p[0] * e + p[2] - s[i];
      jtj += j * j.transpose();
      jtr += j * r;
    }
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      Eigen::Matrix3d a = jtj;
      for (int k = 0; k < 3; ++k) a(k, k) += lambda * std::max(jtj(k, k), 1e-300);
      const Eigen::Vector3d step = a.ldlt().solve(-jtr);
      Eigen::Vector3d trial = p + step;
      trial[1] = std::min(trial[1], max_log);
      const double c = step.allFinite() ? cost_of(trial, n, s) : std::numeric_limits<double>::infinity();
      if (c < cost) {
        const double gain = cost - c;
        p = trial;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (gain <= 1e-14 * cost) return {p, c};
        cost = c;
      } else {
        lambda *= 4.0;
      }
    }
    if (!accepted) break;
  }
  return {p, cost};
}

}  // namespace

DecayFit fit_target_decay(const ShotSeries& series) {
  series.validate();
  const std::size_t m = series.shots.size();
  if (m < 5) throw Error(ErrorKind::domain, "fit: under-determined, need at least 5 rows (got " + std::to_string(m) + ")");
  const auto& s = series.signal;
  if (std::all_of(s.begin(), s.end(), [](double v) { return v == 0.0; })) {
    throw Error(ErrorKind::domain, "fit: signal is zero everywhere");
  }
  std::vector<double> n(series.shots.begin(), series.shots.end());
  const double span = std::max(n.back() - n.front(), 1.0);
  const auto [lo_it, hi_it] = std::minmax_element(s.begin(), s.end());
  const double range = *hi_it - *lo_it;
  const std::size_t tail = std::max<std::size_t>(2, m / 5);
  double tail_mean = 0.0;
  for (std::size_t i = m - tail; i < m; ++i) tail_mean += s[i];
  tail_mean /= static_cast<double>(tail);
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(m);

  std::vector<Eigen::Vector3d> starts;
  const double a0 = std::abs(s.front() - tail_mean) > 0.0 ? s.front() - tail_mean : range;
  starts.emplace_back(a0 * std::exp(n.front() / (span / 3.0)), std::log(span / 3.0), tail_mean);
  {
    // log-linear fit above a floor just under the minimum
    const double floor = *lo_it - 0.01 * range;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double y = std::log(std::max(s[i] - floor, 1e-300));
      sx += n[i];
      sy += y;
      sxx += n[i] * n[i];
      sxy += n[i] * y;
    }
    const double mm = static_cast<double>(m);
    const double slope = (mm * sxy - sx * sy) / std::max(mm * sxx - sx * sx, 1e-300);
    const double n0 = slope < 0.0 ? -1.0 / slope : span;
    const double intercept = (sy - slope * sx) / mm;
    starts.emplace_back(slope < 0.0 ? std::exp(intercept) : range, std::log(n0), floor);
  }
  starts.emplace_back(s.front() * std::exp(n.front() / span), std::log(span), 0.0);

  Fit best;
  int best_start = 0;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const Fit f = levenberg_marquardt(starts[k], n, s);
    if (f.cost < best.cost) {
      best = f;
      best_start = static_cast<int>(k);
    }
  }

  DecayFit out;
  out.start = best_start;
  double constant_cost = 0.0;
  for (double v : s) constant_cost += (v - mean) * (v - mean);
  if (!(best.cost < constant_cost * (1.0 - 1e-9))) {
    out.amplitude = 0.0;
    out.durability = std::numeric_limits<double>::infinity();
    out.baseline = mean;
    out.residual_rms = std::sqrt(constant_cost / static_cast<double>(m));
    out.non_decaying = true;
    return out;
  }
  out.amplitude = best.p[0];
  out.durability = std::exp(best.p[1]);
  out.baseline = best.p[2];
  out.residual_rms = std::sqrt(best.cost / static_cast<double>(m));
  out.non_decaying = out.durability > non_decaying_durability;
  return out;
}

void write_fit_csv(std::ostream& out, const std::vector<ShotSeries>& series, const std::vector<DecayFit>& fits,
                   const std::string& comment) {
  if (series.size() != fits.size()) throw Error(ErrorKind::domain, "fit table: series and fits differ in length");
  if (!comment.empty()) csv::write_comment_block(out, comment);
  out << "target,A_photons_per_ms,n0_shots,C_photons_per_ms,rms_photons_per_ms,ions,non_decaying\n";
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const auto& f = fits[i];
    out << series[i].label << ',' << csv::format(f.amplitude) << ',' << csv::format(f.durability) << ','
        << csv::format(f.baseline) << ',' << csv::format(f.residual_rms) << ',' << csv::format(f.estimated_ions())
        << ',' << (f.non_decaying ? 1 : 0) << '\n';
  }
}

std::vector<DecayFit> read_fit_csv(std::istream& in, std::vector<std::string>& labels) {
  const csv::Table table = csv::read(in);
  const std::vector<std::string> expected{"target", "A_photons_per_ms", "n0_shots", "C_photons_per_ms",
                                          "rms_photons_per_ms", "ions", "non_decaying"};
  if (table.header != expected) throw Error(ErrorKind::parse, "not a fit table");
  std::vector<DecayFit> fits;
  labels.clear();
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    DecayFit f;
    labels.push_back(table.rows[i][0]);
    f.amplitude = table.number(i, 1);
    f.durability = table.number(i, 2);
    f.baseline = table.number(i, 3);
    f.residual_rms = table.number(i, 4);
    const std::string& flag = table.rows[i][6];
    if (flag != "0" && flag != "1") throw Error(ErrorKind::parse, "fit table: non_decaying must be 0 or 1");
    f.non_decaying = flag == "1";
    fits.push_back(f);
  }
  return fits;
}

// ---------------------------------------------------------------------------------------------

RunConfig::RunConfig() {
  for (int i = 0; i < 10; ++i) sweep_amplitudes.push_back(200.0 + 400.0 * i / 9.0);
  load.rf_amplitudes = default_load_amplitudes();
}

void RunConfig::validate() const {
  (void)species();
  if (!(drive.rf_angular_frequency > 0.0)) throw Error(ErrorKind::validation, "config: rf frequency must be positive");
  if (!(drive.rf_amplitude >= 0.0)) throw Error(ErrorKind::validation, "config: rf amplitude must be >= 0");
  if (mesh.resolution < 1) throw Error(ErrorKind::validation, "config: mesh resolution must be >= 1");
  for (std::size_t i = 0; i < sweep_amplitudes.size(); ++i) {
    if (!(sweep_amplitudes[i] > 0.0) || (i > 0 && !(sweep_amplitudes[i] > sweep_amplitudes[i - 1]))) {
      throw Error(ErrorKind::validation, "config: sweep amplitudes must be positive and ascending");
    }
  }
  load.validate();
  if (!(p_min > 0.0 && p_min < 1.0)) throw Error(ErrorKind::validation, "config: p_min must be in (0, 1)");
  plume.validate();
  thermal.validate();
  try {
    timeline.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::validation, std::string("config: ") + e.what());
  }
  if (!(grid_spacing > 0.0)) throw Error(ErrorKind::validation, "config: grid spacing must be positive");
  if (!(export_spacing > 0.0)) throw Error(ErrorKind::validation, "config: export spacing must be positive");
}

namespace {

[[noreturn]] void config_fail(const std::string& msg) { throw Error(ErrorKind::parse, "config: " + msg); }

/// Object view that remembers which keys were read and rejects the rest.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) config_fail("'" + path_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!used_.count(it.key())) config_fail("unknown key '" + where(it.key()) + "'");
    }
  }

  const json* get(const std::string& key) {
    used_.insert(key);
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }
  void number(const std::string& key, double& v) {
    if (const json* j = get(key)) {
      if (!j->is_number()) config_fail("'" + where(key) + "' must be a number");
      v = j->get<double>();
    }
  }
  template <class Int>
  void integer(const std::string& key, Int& v) {
    if (const json* j = get(key)) {
      if (!j->is_number_integer()) config_fail("'" + where(key) + "' must be an integer");
      if constexpr (std::is_unsigned_v<Int>) {
        if (j->is_number_unsigned()) {
          v = j->get<Int>();
        } else if (j->get<long long>() >= 0) {
          v = static_cast<Int>(j->get<long long>());
        } else {
          config_fail("'" + where(key) + "' must be >= 0");
        }
      } else {
        v = j->get<Int>();
      }
    }
  }
  void string(const std::string& key, std::string& v) {
    if (const json* j = get(key)) {
      if (!j->is_string()) config_fail("'" + where(key) + "' must be a string");
      v = j->get<std::string>();
    }
  }
  void vec3(const std::string& key, Vec3& v) {
    if (const json* j = get(key)) {
      if (!j->is_array() || j->size() != 3 || !std::all_of(j->begin(), j->end(), [](const json& x) { return x.is_number(); })) {
        config_fail("'" + where(key) + "' must be an array of 3 numbers");
      }
      v = Vec3((*j)[0].get<double>(), (*j)[1].get<double>(), (*j)[2].get<double>());
    }
  }
  void numbers(const std::string& key, std::vector<double>& v) {
    if (const json* j = get(key)) {
      if (!j->is_array() || !std::all_of(j->begin(), j->end(), [](const json& x) { return x.is_number(); })) {
        config_fail("'" + where(key) + "' must be an array of numbers");
      }
      v.clear();
      for (const auto& x : *j) v.push_back(x.get<double>());
    }
  }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> used_;
};

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

RunConfig run_config_from_json(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  root.string("layout", c.layout);
  root.string("cache_dir", c.cache_dir);
  if (const json* j = root.get("mesh")) {
    Section s(*j, "mesh");
    s.integer("resolution", c.mesh.resolution);
    s.integer("grading_levels", c.mesh.grading_levels);
    s.number("max_aspect", c.mesh.max_aspect);
    s.integer("max_patches", c.mesh.max_patches);
  }
  if (const json* j = root.get("drive")) c.drive = drive_from_json(*j);
  if (const json* j = root.get("species")) {
    Section s(*j, "species");
    s.number("mass_u", c.mass_u);
    s.integer("charge", c.charge);
  }
  root.vec3("guess_m", c.guess);
  if (const json* j = root.get("sweep")) {
    Section s(*j, "sweep");
    s.numbers("rf_amplitudes_volts", c.sweep_amplitudes);
  }
  if (const json* j = root.get("load")) {
    Section s(*j, "load");
    s.numbers("rf_amplitudes_volts", c.load.rf_amplitudes);
    s.integer("trials", c.load.trials);
    s.integer("seed", c.load.seed);
    s.integer("workers", c.load.workers);
    s.number("prescreen_margin", c.load.prescreen_margin);
    s.number("p_min", c.p_min);
  }
  if (const json* j = root.get("plume")) {
    Section s(*j, "plume");
    s.vec3("source_position_m", c.plume.source_position);
    s.vec3("axis", c.plume.axis);
    s.number("drift_speed_mps", c.plume.drift_speed);
    s.number("temperature_K", c.plume.temperature);
    double deg = c.plume.cone_half_angle * 180.0 / constants::pi;
    s.number("cone_half_angle_deg", deg);
    c.plume.cone_half_angle = deg * constants::pi / 180.0;
    s.integer("ions_per_pulse", c.plume.ions_per_pulse);
    s.number("emission_spread_s", c.plume.emission_spread);
  }
  if (const json* j = root.get("thermal")) {
    Section s(*j, "thermal");
    s.number("temperature_K", c.thermal.temperature);
    s.vec3("half_size_m", c.thermal.half_size);
    s.integer("events", c.thermal.events);
  }
  if (const json* j = root.get("timeline")) {
    Section s(*j, "timeline");
    s.number("t0_s", c.timeline.t0);
    double short_us = to_microseconds(c.timeline.short_duration);
    s.number("short_us", short_us);
    c.timeline.short_duration = short_us * 1e-6;
    std::string recovery = recovery_to_string(c.timeline);
    s.string("recovery", recovery);
    try {
      c.timeline.recovery = parse_recovery(recovery, c.timeline.time_constant);
    } catch (const Error& e) {
      config_fail(e.what());
    }
  }
  if (const json* j = root.get("integrator")) {
    Section s(*j, "integrator");
    auto& g = c.load.integrator;
    s.integer("steps_per_rf_period", g.steps_per_rf_period);
    s.integer("max_rf_periods", g.max_rf_periods);
    s.integer("capture_periods", g.capture_periods);
    s.number("damping_rate_per_s", g.damping_rate);
    s.number("capture_radius_m", g.capture_radius);
    s.vec3("escape_box_lo_m", g.escape_box.lo);
    s.vec3("escape_box_hi_m", g.escape_box.hi);
  }
  if (const json* j = root.get("grid")) {
    Section s(*j, "grid");
    s.number("spacing_m", c.grid_spacing);
  }
  if (const json* j = root.get("export")) {
    Section s(*j, "export");
    s.vec3("box_lo_m", c.export_box.lo);
    s.vec3("box_hi_m", c.export_box.hi);
    s.number("spacing_m", c.export_spacing);
  }
  return c;
}

json run_config_to_json(const RunConfig& c) {
  const auto& g = c.load.integrator;
  return {
      {"layout", c.layout},
      {"cache_dir", c.cache_dir},
      {"mesh",
       {{"resolution", c.mesh.resolution},
        {"grading_levels", c.mesh.grading_levels},
        {"max_aspect", c.mesh.max_aspect},
        {"max_patches", c.mesh.max_patches}}},
      {"drive", drive_to_json(c.drive)},
      {"species", {{"mass_u", c.mass_u}, {"charge", c.charge}}},
      {"guess_m", vec_json(c.guess)},
      {"sweep", {{"rf_amplitudes_volts", c.sweep_amplitudes}}},
      {"load",
       {{"rf_amplitudes_volts", c.load.rf_amplitudes},
        {"trials", c.load.trials},
        {"seed", c.load.seed},
        {"workers", c.load.workers},
        {"prescreen_margin", c.load.prescreen_margin},
        {"p_min", c.p_min}}},
      {"plume",
       {{"source_position_m", vec_json(c.plume.source_position)},
        {"axis", vec_json(c.plume.axis)},
        {"drift_speed_mps", c.plume.drift_speed},
        {"temperature_K", c.plume.temperature},
        {"cone_half_angle_deg", c.plume.cone_half_angle * 180.0 / constants::pi},
        {"ions_per_pulse", c.plume.ions_per_pulse},
        {"emission_spread_s", c.plume.emission_spread}}},
      {"thermal",
       {{"temperature_K", c.thermal.temperature},
        {"half_size_m", vec_json(c.thermal.half_size)},
        {"events", c.thermal.events}}},
      {"timeline",
       {{"t0_s", c.timeline.t0},
        {"short_us", to_microseconds(c.timeline.short_duration)},
        {"recovery", recovery_to_string(c.timeline)}}},
      {"integrator",
       {{"steps_per_rf_period", g.steps_per_rf_period},
        {"max_rf_periods", g.max_rf_periods},
        {"capture_periods", g.capture_periods},
        {"damping_rate_per_s", g.damping_rate},
        {"capture_radius_m", g.capture_radius},
        {"escape_box_lo_m", vec_json(g.escape_box.lo)},
        {"escape_box_hi_m", vec_json(g.escape_box.hi)}}},
      {"grid", {{"spacing_m", c.grid_spacing}}},
      {"export",
       {{"box_lo_m", vec_json(c.export_box.lo)},
        {"box_hi_m", vec_json(c.export_box.hi)},
        {"spacing_m", c.export_spacing}}},
  };
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, "config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(doc);
}

std::string config_echo(const RunConfig& config) { return "config\n" + run_config_to_json(config).dump(2); }

}  // namespace surftrap
