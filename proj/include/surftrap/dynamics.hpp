#pragma once

#include "surftrap/core.hpp"
#include "surftrap/trap_analysis.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace surftrap {

enum class Recovery { step, exponential };

/// Every electrode voltage is multiplied by s(t): 1 before t0, 0 on [t0, t0 + short_duration),
/// then 1 (step) or 1 - exp(-(t - t0 - short_duration) / time_constant) (exponential).
struct VoltageTimeline {
  double t0 = 0.0;
  double short_duration = 0.0;
  Recovery recovery = Recovery::step;
  double time_constant = 0.0;  // s, exponential recovery only

  static VoltageTimeline none() { return {}; }

  double multiplier(double t) const;
  /// Time after which s(t) is within 1e-6 of 1; -inf for a zero-length step short (no event).
  double recovered_at() const;
  /// Throws Error(domain) for a negative duration or a non-positive exponential time constant.
  void validate() const;
};

/// Parses "step" or "exp:TAU_US" (time constant in microseconds).
Recovery parse_recovery(const std::string& text, double& time_constant);
std::string recovery_to_string(const VoltageTimeline& timeline);

/// Seconds to microseconds, rounded to 12 significant digits so 12.5e-6 prints as 12.5.
double to_microseconds(double seconds);

/// Fields the integrator needs at a point: rf field per volt, dc potential and field.
class TrapFields {
 public:
  virtual ~TrapFields() = default;
  virtual FieldSample at(const Vec3& point) const = 0;
};

/// Evaluates the pseudopotential's field source directly.
class DirectFields final : public TrapFields {
 public:
  explicit DirectFields(PseudoField field) : field_(std::move(field)) {}
  FieldSample at(const Vec3& point) const override { return field_.sample(point); }

 private:
  PseudoField field_;
};

/// rf field and dc potential/field sampled on a regular grid and interpolated with tricubic
/// Lagrange stencils. rf_potential is not stored and reads as 0. Points outside the box use the
/// nearest edge stencil.
class GridFields final : public TrapFields {
 public:
  GridFields(const PseudoField& field, const Box3& box, double spacing, unsigned workers = 0);

  FieldSample at(const Vec3& point) const override;
  const Box3& box() const { return box_; }
  double spacing() const { return spacing_; }
  std::array<int, 3> shape() const { return n_; }

  void save(const std::filesystem::path& path) const;
  static GridFields load(const std::filesystem::path& path);

 private:
  GridFields() = default;
  static constexpr int components = 7;  // rf Ex Ey Ez, dc phi Ex Ey Ez
  std::size_t index(int i, int j, int k) const { return (static_cast<std::size_t>(k) * n_[1] + j) * n_[0] + i; }

  Box3 box_;
  double spacing_ = 0.0;
  std::array<int, 3> n_{};
  std::vector<std::array<double, components>> values_;
};

/// Content key of a grid: field source hash, dc voltages, box and spacing.
std::string grid_cache_key(const std::string& source_key, const PseudoField& field, const Box3& box, double spacing);

/// Loads `<cache_dir>/grid-<key>.bin` or builds and writes it. An empty cache_dir disables caching.
std::shared_ptr<const GridFields> cached_grid(const PseudoField& field, const std::string& source_key,
                                              const Box3& box, double spacing, const std::filesystem::path& cache_dir,
                                              unsigned workers = 0);

struct IntegratorConfig {
  int steps_per_rf_period = 200;
  int max_rf_periods = 400;
  double damping_rate = 0.0;  // 1/s
  double capture_radius = 2e-3;
  Box3 escape_box{Vec3(-3e-3, -2.5e-3, 0.05e-3), Vec3(3e-3, 2.5e-3, 3.5e-3)};
  int capture_periods = 100;
  bool stop_on_capture = true;  // end the run once capture_periods qualifying periods have passed
  bool record_trace = false;
  int trace_stride = 0;  // steps between trace rows; 0 picks the smallest stride within the row cap
  std::size_t max_trace_rows = 100000;
  bool record_secular_energy = false;

  /// Throws Error(domain) when the invariants fail.
  void validate() const;
};

struct State {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
};

struct TraceRow {
  double t = 0.0;
  State state;
};

enum class Classification { captured, escaped, undecided };
std::string_view to_string(Classification c);

struct TrajectoryOutcome {
  Classification classification = Classification::undecided;
  double escape_time = 0.0;  // s, when escaped
  State final_state;
  double final_time = 0.0;
  /// When recorded: one value per rf period boundary after recovery. Position is the triangular
  /// (two rf period) weighted mean, velocity the difference of the adjacent one-period mean
  /// positions over T_rf, which is the same weighted mean of the velocity.
  std::vector<double> secular_energy_ev;
  std::vector<TraceRow> trace;
};

/// Everything integrate() needs besides the initial state.
struct TrajectorySetup {
  const PseudoField* field = nullptr;  // drive, species, and Psi for secular energies
  const TrapFields* fields = nullptr;
  VoltageTimeline timeline;
  IntegratorConfig config;
  Vec3 trap_center = Vec3::Zero();  // capture_radius is measured from here
  double psi_min = 0.0;             // Psi at trap_center, J
  double rf_phase = 0.0;            // rad, E_rf(t) = V cos(Omega t + phase)
};

/// m r'' = Q E(r, t) - m gamma r' with E = s(t) [V cos(Omega t + phase) E_rf(r) + E_dc(r)], fixed-step
/// RK4 with dt = T_rf / steps_per_rf_period from t_start. Escaped: outside the escape box. Captured:
/// inside capture_radius for the last capture_periods rf periods of the run, all after recovery.
/// Throws Error(integrator) on a non-finite state, naming the last finite one.
TrajectoryOutcome integrate(const State& initial, double t_start, const TrajectorySetup& setup);

/// Plain RK4 from t_start to t_end with n steps (n > 0; t_end may precede t_start). No
/// classification; used for reversibility checks.
State propagate(const State& initial, double t_start, double t_end, int steps, const TrajectorySetup& setup);

/// 0.5 m |v|^2 + Psi(r) - psi_min in eV, with the drive at full voltage.
double secular_energy(const State& state, const PseudoField& field, const TrapFields& fields, double psi_min);

/// secular_energy of the mean state over the given samples, which should span whole rf periods.
double averaged_secular_energy(const std::vector<TraceRow>& one_period, const PseudoField& field,
                               const TrapFields& fields, double psi_min);

/// Dominant spectral peak below the drive frequency 1/rf_period (and the Nyquist frequency) of the
/// trace's displacement along each axis (columns of `axes`), in Hz. Hann window, parabolic
/// interpolation of the log magnitude. Throws Error(domain) for traces shorter than 512 rf periods
/// or unevenly sampled, and when no peak stands 10x above the median magnitude.
std::array<double, 3> spectral_secular_frequency(const std::vector<TraceRow>& trace, const Mat3& axes,
                                                 double rf_period);
inline constexpr int min_spectral_periods = 512;

/// CSV t_s,x_m,y_m,z_m,vx_mps,vy_mps,vz_mps.
void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace, const std::string& comment = {});

}  // namespace surftrap
