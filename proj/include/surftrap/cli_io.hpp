#pragma once

#include "surftrap/core.hpp"
#include "surftrap/dynamics.hpp"
#include "surftrap/fieldsolver.hpp"
#include "surftrap/geometry.hpp"
#include "surftrap/loading.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace surftrap {

/// Photons per ms one trapped ion scatters into the detector.
inline constexpr double photons_per_ms_per_ion = 2.5;

/// Trapped-ion signal after each ablation shot on one target.
struct ShotSeries {
  std::string label;
  std::vector<long> shots;
  std::vector<double> signal;  // photons/ms

  /// Throws Error(validation) unless shots strictly increase and signals are finite and >= 0.
  void validate() const;
};

/// CSV with header shot,signal_photons_per_ms. Throws Error(parse) or Error(validation).
ShotSeries read_shot_series(std::istream& in, std::string label = {});
void write_shot_series(std::ostream& out, const ShotSeries& series);

/// s(n) = A exp(-n / n0) + C.
struct DecayFit {
  double amplitude = 0.0;   // A, photons/ms
  double durability = 0.0;  // n0, shots; +inf when a constant fits as well
  double baseline = 0.0;    // C, photons/ms
  double residual_rms = 0.0;
  bool non_decaying = false;  // n0 above 1e6 or no decay at all
  int start = 0;              // index of the winning start

  double estimated_ions() const { return amplitude / photons_per_ms_per_ion; }
};

inline constexpr double non_decaying_durability = 1e6;

/// Levenberg-Marquardt on (A, ln n0, C) from three starts; the lowest residual wins.
/// Throws Error(domain) for fewer than 5 rows or an all-zero signal.
DecayFit fit_target_decay(const ShotSeries& series);

/// CSV target,A_photons_per_ms,n0_shots,C_photons_per_ms,rms_photons_per_ms,ions,non_decaying.
void write_fit_csv(std::ostream& out, const std::vector<ShotSeries>& series, const std::vector<DecayFit>& fits,
                   const std::string& comment = {});
/// Reads write_fit_csv output back; labels go into `labels`.
std::vector<DecayFit> read_fit_csv(std::istream& in, std::vector<std::string>& labels);

/// Everything a CLI run needs. Flags override the file; the resolved config is echoed into outputs.
struct RunConfig {
  std::string layout;  // geometry file; empty selects the bundled layout
  std::string cache_dir = "basis-cache";
  MeshOptions mesh;
  DriveConfig drive = DriveConfig::from_frequency_hz(400.0, 8e6);
  double mass_u = 87.9056;
  int charge = 1;
  Vec3 guess = Vec3(0.0, 0.0, 0.7e-3);
  std::vector<double> sweep_amplitudes;  // default 200..600 V, 10 points
  LoadConfig load;                       // rf_amplitudes default_load_amplitudes()
  double p_min = default_p_min;
  PlumeModel plume;
  ThermalSource thermal;
  VoltageTimeline timeline{0.0, 10e-6, Recovery::step, 0.0};
  double grid_spacing = 1e-4;  // m, integrator field grid
  Box3 export_box = IntegratorConfig{}.escape_box;
  double export_spacing = 2.5e-4;

  RunConfig();

  Species species() const { return Species::from_amu(mass_u, charge); }
  /// Throws Error(validation).
  void validate() const;
};

/// Unknown keys throw Error(parse) so typos do not pass silently.
RunConfig run_config_from_json(const nlohmann::json& doc);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// "config" followed by the indented JSON, for output comment headers.
std::string config_echo(const RunConfig& config);

}  // namespace surftrap
