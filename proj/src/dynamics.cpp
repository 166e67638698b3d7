#include "surftrap/dynamics.hpp"

#include "surftrap/csv.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <unistd.h>

namespace surftrap {

double VoltageTimeline::multiplier(double t) const {
  if (t < t0) return 1.0;
  const double end = t0 + short_duration;
  if (t < end) return 0.0;
  if (recovery == Recovery::step) return 1.0;
  return -std::expm1(-(t - end) / time_constant);
}

double VoltageTimeline::recovered_at() const {
  if (recovery == Recovery::step && short_duration == 0.0) return -std::numeric_limits<double>::infinity();
  const double end = t0 + short_duration;
  if (recovery == Recovery::step) return end;
  return end + time_constant * std::log(1e6);
}

void VoltageTimeline::validate() const {
  if (!(short_duration >= 0.0) || !std::isfinite(short_duration)) {
    throw Error(ErrorKind::domain, "short duration must be a finite non-negative time");
  }
  if (!std::isfinite(t0)) throw Error(ErrorKind::domain, "timeline start must be finite");
  if (recovery == Recovery::exponential && !(time_constant > 0.0 && std::isfinite(time_constant))) {
    throw Error(ErrorKind::domain, "exponential recovery needs a positive time constant");
  }
}

Recovery parse_recovery(const std::string& text, double& time_constant) {
  if (text == "step") {
    time_constant = 0.0;
    return Recovery::step;
  }
  if (text.rfind("exp:", 0) == 0) {
    double tau_us = 0.0;
    try {
      tau_us = csv::parse_double(text.substr(4));
    } catch (const Error&) {
      throw Error(ErrorKind::usage, "bad recovery '" + text + "': expected step or exp:TAU_US");
    }
    if (!(tau_us > 0.0)) throw Error(ErrorKind::usage, "recovery time constant must be positive");
    time_constant = tau_us * 1e-6;
    return Recovery::exponential;
  }
  throw Error(ErrorKind::usage, "bad recovery '" + text + "': expected step or exp:TAU_US");
}

std::string recovery_to_string(const VoltageTimeline& timeline) {
  if (timeline.recovery == Recovery::step) return "step";
  return "exp:" + csv::format(to_microseconds(timeline.time_constant));
}

double to_microseconds(double seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", seconds * 1e6);
  return std::strtod(buf, nullptr);
}

// ---------------------------------------------------------------------------------------------

GridFields::GridFields(const PseudoField& field, const Box3& box, double spacing, unsigned workers)
    : box_(box), spacing_(spacing) {
  if (!(spacing > 0.0)) throw Error(ErrorKind::domain, "grid spacing must be positive");
  for (int a = 0; a < 3; ++a) {
    const double size = box.hi[a] - box.lo[a];
    if (!(size > 0.0)) throw Error(ErrorKind::domain, "grid box must have positive size");
    n_[a] = std::max(4, static_cast<int>(std::ceil(size / spacing - 1e-9)) + 1);
  }
  values_.resize(static_cast<std::size_t>(n_[0]) * n_[1] * n_[2]);
  parallel_for(values_.size(), workers, [&](std::size_t idx) {
    const int i = static_cast<int>(idx % n_[0]);
    const int j = static_cast<int>((idx / n_[0]) % n_[1]);
    const int k = static_cast<int>(idx / (static_cast<std::size_t>(n_[0]) * n_[1]));
    const Vec3 p = box_.lo + spacing_ * Vec3(i, j, k);
    const FieldSample s = field.sample(p);
    values_[idx] = {s.rf_field.x(), s.rf_field.y(), s.rf_field.z(), s.dc_potential,
                    s.dc_field.x(), s.dc_field.y(), s.dc_field.z()};
  });
}

namespace {

void lagrange_weights(double t, double w[4]) {
  w[0] = -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0;
  w[1] = t * (t - 2.0) * (t - 3.0) / 2.0;
  w[2] = -t * (t - 1.0) * (t - 3.0) / 2.0;
  w[3] = t * (t - 1.0) * (t - 2.0) / 6.0;
}

}  // namespace

FieldSample GridFields::at(const Vec3& point) const {
  int base[3];
  double w[3][4];
  for (int a = 0; a < 3; ++a) {
    const double u = (point[a] - box_.lo[a]) / spacing_;
    int b = static_cast<int>(std::floor(u)) - 1;
    b = std::clamp(b, 0, n_[a] - 4);
    base[a] = b;
    lagrange_weights(u - b, w[a]);
  }
  double acc[components] = {0, 0, 0, 0, 0, 0, 0};
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 4; ++j) {
      const double wjk = w[1][j] * w[2][k];
      const std::size_t row = index(base[0], base[1] + j, base[2] + k);
      for (int i = 0; i < 4; ++i) {
        const double wi = w[0][i] * wjk;
        const auto& v = values_[row + i];
        for (int c = 0; c < components; ++c) acc[c] += wi * v[c];
      }
    }
  }
  FieldSample s;
  s.rf_field = Vec3(acc[0], acc[1], acc[2]);
  s.dc_potential = acc[3];
  s.dc_field = Vec3(acc[4], acc[5], acc[6]);
  return s;
}

namespace {
constexpr char grid_magic[8] = {'S', 'T', 'G', 'R', 'I', 'D', '0', '1'};
}

void GridFields::save(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp" + std::to_string(static_cast<long>(::getpid())) + "-" +
                   std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp);
    out.write(grid_magic, sizeof grid_magic);
    const double header[7] = {box_.lo.x(), box_.lo.y(), box_.lo.z(), box_.hi.x(), box_.hi.y(), box_.hi.z(), spacing_};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    out.write(reinterpret_cast<const char*>(n_.data()), sizeof(int) * 3);
    out.write(reinterpret_cast<const char*>(values_.data()),
              static_cast<std::streamsize>(values_.size() * sizeof(values_[0])));
    if (!out) throw Error(ErrorKind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

GridFields GridFields::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, grid_magic, sizeof magic) != 0) {
    throw Error(ErrorKind::parse, path.string() + " is not a field grid file");
  }
  GridFields g;
  double header[7];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  in.read(reinterpret_cast<char*>(g.n_.data()), sizeof(int) * 3);
  if (!in || g.n_[0] < 4 || g.n_[1] < 4 || g.n_[2] < 4) throw Error(ErrorKind::parse, "corrupt grid header");
  g.box_.lo = Vec3(header[0], header[1], header[2]);
  g.box_.hi = Vec3(header[3], header[4], header[5]);
  g.spacing_ = header[6];
  g.values_.resize(static_cast<std::size_t>(g.n_[0]) * g.n_[1] * g.n_[2]);
  in.read(reinterpret_cast<char*>(g.values_.data()), static_cast<std::streamsize>(g.values_.size() * sizeof(g.values_[0])));
  if (!in) throw Error(ErrorKind::parse, "truncated grid file " + path.string());
  return g;
}

std::string grid_cache_key(const std::string& source_key, const PseudoField& field, const Box3& box, double spacing) {
  std::ostringstream d;
  d << "grid-v1|" << source_key << "|";
  for (const auto& [name, v] : field.drive().dc_voltages) d << name << "=" << csv::format(v) << ";";
  d << "|";
  for (int a = 0; a < 3; ++a) d << csv::format(box.lo[a]) << "," << csv::format(box.hi[a]) << ",";
  d << csv::format(spacing);
  return fnv1a_hex(d.str());
}

std::shared_ptr<const GridFields> cached_grid(const PseudoField& field, const std::string& source_key,
                                              const Box3& box, double spacing, const std::filesystem::path& cache_dir,
                                              unsigned workers) {
  if (cache_dir.empty() || source_key.empty()) {
    return std::make_shared<const GridFields>(field, box, spacing, workers);
  }
  const auto file = cache_dir / ("grid-" + grid_cache_key(source_key, field, box, spacing) + ".bin");
  if (std::filesystem::exists(file)) {
    try {
      return std::make_shared<const GridFields>(GridFields::load(file));
    } catch (const Error&) {
      // fall through and rebuild a damaged cache entry
    }
  }
  auto grid = std::make_shared<const GridFields>(field, box, spacing, workers);
  std::filesystem::create_directories(cache_dir);
  grid->save(file);
  return grid;
}

// ---------------------------------------------------------------------------------------------

void IntegratorConfig::validate() const {
  if (steps_per_rf_period < 50) throw Error(ErrorKind::domain, "steps_per_rf_period must be at least 50");
  if (max_rf_periods < 1) throw Error(ErrorKind::domain, "max_rf_periods must be positive");
  if (capture_periods < 1) throw Error(ErrorKind::domain, "capture_periods must be positive");
  if (!(damping_rate >= 0.0)) throw Error(ErrorKind::domain, "damping rate must be non-negative");
  if (!(capture_radius > 0.0)) throw Error(ErrorKind::domain, "capture radius must be positive");
  const Vec3 size = escape_box.size();
  if (!(size.minCoeff() > 0.0)) throw Error(ErrorKind::domain, "escape box must have positive size");
  if (!(capture_radius < size.maxCoeff())) throw Error(ErrorKind::domain, "capture radius must be below the escape box extent");
}

std::string_view to_string(Classification c) {
  switch (c) {
    case Classification::captured: return "captured";
    case Classification::escaped: return "escaped";
    case Classification::undecided: return "undecided";
  }
  return "unknown";
}

namespace {

struct Derivative {
  Vec3 dr;
  Vec3 dv;
};

class Equations {
 public:
  explicit Equations(const TrajectorySetup& s)
      : fields_(*s.fields),
        timeline_(s.timeline),
        q_over_m_(s.field->species().charge_coulomb() / s.field->species().mass),
        v_rf_(s.field->drive().rf_amplitude),
        omega_(s.field->drive().rf_angular_frequency),
        phase_(s.rf_phase),
        gamma_(s.config.damping_rate) {}

  Derivative operator()(double t, const Vec3& r, const Vec3& v) const {
    const double s = timeline_.multiplier(t);
    Vec3 a = -gamma_ * v;
    if (s != 0.0) {
      const FieldSample f = fields_.at(r);
      a += q_over_m_ * s * (v_rf_ * std::cos(omega_ * t + phase_) * f.rf_field + f.dc_field);
    }
    return {v, a};
  }

 private:
  const TrapFields& fields_;
  VoltageTimeline timeline_;
  double q_over_m_;
  double v_rf_;
  double omega_;
  double phase_;
  double gamma_;
};

State rk4_step(const Equations& f, double t, double dt, const State& y) {
  const Derivative k1 = f(t, y.position, y.velocity);
  const Derivative k2 = f(t + 0.5 * dt, y.position + 0.5 * dt * k1.dr, y.velocity + 0.5 * dt * k1.dv);
  const Derivative k3 = f(t + 0.5 * dt, y.position + 0.5 * dt * k2.dr, y.velocity + 0.5 * dt * k2.dv);
  const Derivative k4 = f(t + dt, y.position + dt * k3.dr, y.velocity + dt * k3.dv);
  State out;
  out.position = y.position + dt / 6.0 * (k1.dr + 2.0 * k2.dr + 2.0 * k3.dr + k4.dr);
  out.velocity = y.velocity + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv);
  return out;
}

std::string describe(const State& s, double t) {
  std::ostringstream o;
  o << "t = " << t << " s, r = (" << s.position.x() << ", " << s.position.y() << ", " << s.position.z()
    << ") m, v = (" << s.velocity.x() << ", " << s.velocity.y() << ", " << s.velocity.z() << ") m/s";
  return o.str();
}

void check_setup(const TrajectorySetup& setup) {
  if (!setup.field || !setup.fields) throw Error(ErrorKind::domain, "trajectory setup needs a field and fields");
  setup.timeline.validate();
  setup.config.validate();
}

}  // namespace

TrajectoryOutcome integrate(const State& initial, double t_start, const TrajectorySetup& setup) {
  check_setup(setup);
  const auto& cfg = setup.config;
  const Equations f(setup);
  const double period = 2.0 * constants::pi / setup.field->drive().rf_angular_frequency;
  const double dt = period / cfg.steps_per_rf_period;
  const double t_recovered = setup.timeline.recovered_at();
  const double r2_capture = cfg.capture_radius * cfg.capture_radius;

  TrajectoryOutcome out;
  State y = initial;
  double t = t_start;
  out.final_state = y;
  out.final_time = t;
  if (!cfg.escape_box.contains(y.position)) {
    out.classification = Classification::escaped;
    out.escape_time = t;
    return out;
  }

  int stride = cfg.trace_stride;
  if (cfg.record_trace) {
    const double total = static_cast<double>(cfg.max_rf_periods) * cfg.steps_per_rf_period;
    const int min_stride = static_cast<int>(std::ceil(total / static_cast<double>(cfg.max_trace_rows)));
    stride = std::max({1, stride, min_stride});
    out.trace.push_back({t, y});
  }

  int qualifying = 0;
  long step_index = 0;
  struct PeriodSums {
    Vec3 flat;    // sum of positions after each step
    Vec3 rising;  // the same weighted by (step within period) / steps
    Vec3 trapezoid;
  };
  std::optional<PeriodSums> previous;
  for (int p = 0; p < cfg.max_rf_periods; ++p) {
    const double period_start = t;
    bool inside = true;
    PeriodSums sums{Vec3::Zero(), Vec3::Zero(), 0.5 * y.position};
    for (int s = 0; s < cfg.steps_per_rf_period; ++s) {
      const State next = rk4_step(f, t, dt, y);
      if (!next.position.allFinite() || !next.velocity.allFinite()) {
        throw Error(ErrorKind::integrator, "non-finite state after last finite state " + describe(y, t));
      }
      y = next;
      ++step_index;
      t = t_start + dt * static_cast<double>(step_index);
      if (cfg.record_trace && step_index % stride == 0 && out.trace.size() < cfg.max_trace_rows) {
        out.trace.push_back({t, y});
      }
      if (!cfg.escape_box.contains(y.position)) {
        out.classification = Classification::escaped;
        out.escape_time = t;
        out.final_state = y;
        out.final_time = t;
        return out;
      }
      if ((y.position - setup.trap_center).squaredNorm() > r2_capture) inside = false;
      sums.flat += y.position;
      sums.rising += (static_cast<double>(s + 1) / cfg.steps_per_rf_period) * y.position;
    }
    sums.trapezoid += sums.flat - 0.5 * y.position;
    const bool recovered = period_start >= t_recovered;
    if (cfg.record_secular_energy) {
      if (recovered && previous) {
        const double n = cfg.steps_per_rf_period;
        State secular;
        secular.position = (previous->rising + sums.flat - sums.rising) / n;
        secular.velocity = (sums.trapezoid - previous->trapezoid) / (n * period);
        out.secular_energy_ev.push_back(secular_energy(secular, *setup.field, *setup.fields, setup.psi_min));
      }
      if (recovered) previous = sums;
    }
    qualifying = (recovered && inside) ? qualifying + 1 : 0;
    if (cfg.stop_on_capture && qualifying >= cfg.capture_periods) break;
  }
  out.final_state = y;
  out.final_time = t;
  out.classification = qualifying >= cfg.capture_periods ? Classification::captured : Classification::undecided;
  return out;
}

State propagate(const State& initial, double t_start, double t_end, int steps, const TrajectorySetup& setup) {
  check_setup(setup);
  if (steps <= 0) throw Error(ErrorKind::domain, "propagate needs a positive step count");
  const Equations f(setup);
  const double dt = (t_end - t_start) / steps;
  State y = initial;
  for (int i = 0; i < steps; ++i) {
    const double t = t_start + dt * i;
    y = rk4_step(f, t, dt, y);
    if (!y.position.allFinite() || !y.velocity.allFinite()) {
      throw Error(ErrorKind::integrator, "non-finite state at step " + std::to_string(i));
    }
  }
  return y;
}

double secular_energy(const State& state, const PseudoField& field, const TrapFields& fields, double psi_min) {
  const double kinetic = 0.5 * field.species().mass * state.velocity.squaredNorm();
  return joule_to_ev(kinetic + field.psi(fields.at(state.position)) - psi_min);
}

double averaged_secular_energy(const std::vector<TraceRow>& one_period, const PseudoField& field,
                               const TrapFields& fields, double psi_min) {
  if (one_period.empty()) throw Error(ErrorKind::domain, "averaging needs at least one sample");
  State avg;
  for (const auto& row : one_period) {
    avg.position += row.state.position;
    avg.velocity += row.state.velocity;
  }
  avg.position /= static_cast<double>(one_period.size());
  avg.velocity /= static_cast<double>(one_period.size());
  return secular_energy(avg, field, fields, psi_min);
}

// ---------------------------------------------------------------------------------------------

namespace {
std::mutex fftw_planner_mutex;  // FFTW planning is not thread safe
}

std::array<double, 3> spectral_secular_frequency(const std::vector<TraceRow>& trace, const Mat3& axes,
                                                 double rf_period) {
  if (!(rf_period > 0.0)) throw Error(ErrorKind::domain, "rf period must be positive");
  if (trace.size() < 16) throw Error(ErrorKind::domain, "trace too short for spectral analysis");
  const std::size_t n = trace.size();
  const double dt = (trace.back().t - trace.front().t) / static_cast<double>(n - 1);
  if (trace.back().t - trace.front().t < min_spectral_periods * rf_period * (1.0 - 1e-9)) {
    throw Error(ErrorKind::domain, "trace spans fewer than " + std::to_string(min_spectral_periods) + " rf periods");
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (std::abs(trace[i].t - trace[i - 1].t - dt) > 1e-6 * dt) {
      throw Error(ErrorKind::domain, "trace is not uniformly sampled");
    }
  }

  const std::size_t bins = n / 2 + 1;
  std::vector<double> in(n);
  std::vector<fftw_complex> spectrum(bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), spectrum.data(), FFTW_ESTIMATE);
  }

  const double f_limit = std::min(1.0 / rf_period, 0.5 / dt);
  std::array<double, 3> result{};
  for (int axis = 0; axis < 3; ++axis) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += trace[i].state.position.dot(axes.col(axis));
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * constants::pi * static_cast<double>(i) / static_cast<double>(n - 1));
      in[i] = hann * (trace[i].state.position.dot(axes.col(axis)) - mean);
    }
    fftw_execute(plan);
    std::vector<double> mag(bins);
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(spectrum[k][0], spectrum[k][1]);

    const double df = 1.0 / (static_cast<double>(n) * dt);
    const auto k_max = std::min<std::size_t>(bins - 2, static_cast<std::size_t>(f_limit / df));
    std::size_t peak = 0;
    for (std::size_t k = 2; k <= k_max; ++k) {
      if (peak == 0 || mag[k] > mag[peak]) peak = k;
    }
    std::vector<double> sorted(mag.begin() + 1, mag.begin() + static_cast<long>(k_max) + 1);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
    const double median = sorted[sorted.size() / 2];
    if (peak == 0 || !(mag[peak] > 10.0 * median)) {
      std::lock_guard lock(fftw_planner_mutex);
      fftw_destroy_plan(plan);
      throw Error(ErrorKind::domain, "no spectral peak above the noise floor along axis " + std::to_string(axis));
    }
    const double a = std::log(mag[peak - 1]);
    const double b = std::log(mag[peak]);
    const double c = std::log(mag[peak + 1]);
    const double denom = a - 2.0 * b + c;
    const double delta = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
    result[axis] = (static_cast<double>(peak) + delta) * df;
  }
  {
    std::lock_guard lock(fftw_planner_mutex);
    fftw_destroy_plan(plan);
  }
  return result;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace, const std::string& comment) {
  if (!comment.empty()) csv::write_comment_block(out, comment);
  out << "t_s,x_m,y_m,z_m,vx_mps,vy_mps,vz_mps\n";
  for (const auto& row : trace) {
    const auto& s = row.state;
    csv::write_row(out, {row.t, s.position.x(), s.position.y(), s.position.z(), s.velocity.x(), s.velocity.y(),
                         s.velocity.z()});
  }
}

}  // namespace surftrap
