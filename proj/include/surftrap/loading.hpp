#pragma once

#include "surftrap/core.hpp"
#include "surftrap/dynamics.hpp"
#include "surftrap/trap_analysis.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace surftrap {

/// Ablation plume ions leave the target at source_position heading along `axis`.
struct PlumeModel {
  Vec3 source_position = Vec3(-25e-3, 0.0, 0.8e-3);
  Vec3 axis = Vec3(1.0, 0.0, 0.0);
  double drift_speed = 4e3;                               // m/s
  double temperature = 1e4;                               // K
  double cone_half_angle = 10.0 * constants::pi / 180.0;  // rad
  int ions_per_pulse = 1;
  double emission_spread = 1e-6;                          // s

  /// Throws Error(validation).
  void validate() const;
};

struct PlumeIon {
  Vec3 position;
  Vec3 velocity;
  double emission_time = 0.0;
};

/// ions_per_pulse ions of the given mass. velocity = drift_speed * axis + Maxwellian(temperature),
/// redrawn until it lies inside the cone. Emission times are uniform in [0, emission_spread].
std::vector<PlumeIon> sample_plume(const PlumeModel& model, double mass, std::mt19937_64& rng);

/// In-trap ionization of a thermal beam: uniform positions in a box of half size `half_size`
/// centered on the trap minimum, Maxwellian velocities, uniform rf phase. `events` ions per trial.
struct ThermalSource {
  double temperature = 650.0;  // K
  Vec3 half_size = Vec3(0.5e-3, 0.5e-3, 0.5e-3);
  int events = 1;

  void validate() const;
};

/// Integrator settings for loading runs: 500 capture periods out of at most 2000.
IntegratorConfig loading_integrator();

struct LoadConfig {
  std::vector<double> rf_amplitudes;  // V, ascending
  int trials = 500;                   // ions per amplitude (ablation: pulses, each ions_per_pulse ions)
  std::uint64_t seed = 1;
  unsigned workers = 0;
  IntegratorConfig integrator = loading_integrator();
  /// An ion whose secular energy at full voltage exceeds margin x depth is counted as escaped
  /// without integration. 0 disables.
  double prescreen_margin = 3.0;
  Vec3 guess = Vec3(0.0, 0.0, 0.7e-3);  // minimum search start

  void validate() const;
};

/// Wilson score interval for k successes in n trials.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};
inline constexpr double z95 = 1.959963984540054;

/// Capture probability that defines the minimum loadable depth unless overridden.
inline constexpr double default_p_min = 0.01;

/// 10 amplitudes from 100 V to 600 V, geometric (depth about 12 to 430 meV on the default layout).
std::vector<double> default_load_amplitudes();
Interval wilson_interval(long k, long n, double z = z95);

struct LoadRow {
  double rf_amplitude = 0.0;
  double depth_ev = 0.0;
  long trials = 0;  // ions simulated
  long captured = 0;
  double p_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  long failed = 0;       // integrator errors, excluded from trials
  long undecided = 0;    // neither captured nor escaped by max_rf_periods, counted as not captured
  long prescreened = 0;  // escaped by the energy prescreen
};

struct LoadResult {
  std::string loader;  // "ablation" or "eimpact"
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> parameters;  // snapshot, in order
  std::vector<LoadRow> rows;
  std::vector<std::string> notes;  // integrator failures and skipped amplitudes
};

/// Fills p_hat and the Wilson interval from trials and captured.
LoadRow make_row(double rf_amplitude, double depth_ev, long trials, long captured);

/// Trap prepared for loading at one rf amplitude.
struct LoadPoint {
  double rf_amplitude = 0.0;
  PseudoField field;
  TrapAnalysis analysis;
  double psi_min = 0.0;  // Psi at the minimum through `fields`
};

/// Analyzes the trap at each amplitude of cfg.rf_amplitudes. Amplitudes whose analysis fails or has
/// no barrier are skipped and reported in `notes`.
std::vector<LoadPoint> prepare_load(const PseudoField& field, const TrapFields& fields, const LoadConfig& cfg,
                                    std::vector<std::string>& notes);

/// Per-trial stream from (master seed, depth index, trial index).
std::mt19937_64 trial_stream(std::uint64_t seed, std::uint64_t depth_index, std::uint64_t trial_index);

/// Ablation loading: per pulse, electrode voltages short at t0 = 0 for timeline.short_duration. Ions
/// fly field-free until they enter the escape box or the short ends, whichever is later, and are
/// integrated from there. rf phase is random per pulse.
LoadResult run_ablation_load(const PseudoField& field, const TrapFields& fields, const PlumeModel& plume,
                             const VoltageTimeline& timeline, const LoadConfig& cfg);

/// Electron-impact loading at steady voltages. Throws Error(validation) when the ionization volume
/// around a minimum leaves the escape box.
LoadResult run_eimpact_load(const PseudoField& field, const TrapFields& fields, const ThermalSource& source,
                            const LoadConfig& cfg);

/// Smallest depth whose Wilson lower bound reaches p_min, interpolated linearly in the lower bound
/// between the bracketing rows. nullopt when never reached. Throws Error(domain) for < 2 rows.
std::optional<double> min_loadable_depth(const LoadResult& result, double p_min);

/// min_loadable_depth(eimpact) / min_loadable_depth(ablation). Throws Error(domain) when either is none.
double threshold_ratio(const LoadResult& ablation, const LoadResult& eimpact, double p_min);

/// Pairs of rows (shallower, deeper) where p_hat falls with depth and the intervals do not overlap.
int monotonicity_violations(const LoadResult& result);

/// CSV Vrf_V,depth_eV,trials,captured,p_hat,ci_lo,ci_hi preceded by a '#' block with the loader,
/// seed, parameters, per-row failure counts and notes. `extra_header` lines go first.
void write_load_csv(std::ostream& out, const LoadResult& result, const std::string& extra_header = {});
LoadResult read_load_csv(std::istream& in);

/// Plume settings of the documented sensitivity grid.
struct PlumeVariant {
  double drift_speed = 0.0;
  double temperature = 0.0;
  double short_duration = 0.0;
};
std::vector<PlumeVariant> default_plume_grid();

}  // namespace surftrap
