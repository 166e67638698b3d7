#pragma once

#include "surftrap/core.hpp"
#include "surftrap/fieldsolver.hpp"
#include "surftrap/geometry.hpp"

#include <array>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace surftrap {

/// Fields of a drive at one point: rf per volt of amplitude, dc at the drive's dc voltages.
struct FieldSample {
  double rf_potential = 0.0;  // V per V_rf
  Vec3 rf_field = Vec3::Zero();
  double dc_potential = 0.0;  // V
  Vec3 dc_field = Vec3::Zero();
};

/// Secular potential Psi(r) = Q^2 V^2 |E_rf(r)|^2 / (4 m Omega^2) + Q Phi_dc(r), in joules, where
/// E_rf is the field of all rf-role electrodes at 1 V.
class PseudoField {
 public:
  PseudoField(std::shared_ptr<const FieldSource> source, DriveConfig drive, Species species);

  const FieldSource& source() const { return *source_; }
  std::shared_ptr<const FieldSource> source_ptr() const { return source_; }
  const DriveConfig& drive() const { return drive_; }
  const Species& species() const { return species_; }

  /// Same source and dc voltages, different rf amplitude.
  PseudoField with_rf_amplitude(double volts) const;

  FieldSample sample(const Vec3& point) const;
  double psi(const Vec3& point) const;
  double psi(const FieldSample& s) const;

  /// Central differences of Psi with the given step.
  Vec3 gradient(const Vec3& point, double step) const;
  Mat3 hessian(const Vec3& point, double step) const;
  /// Central-difference Hessian of the rf potential per volt.
  Mat3 rf_hessian(const Vec3& point, double step) const;

 private:
  std::shared_ptr<const FieldSource> source_;
  DriveConfig drive_;
  Species species_;
  std::shared_ptr<const Superposition> rf_;
  std::shared_ptr<const Superposition> dc_;
};

/// Step of every finite-difference derivative of Psi around a point at height z.
double derivative_step(const Vec3& point);

struct MinimizeOptions {
  int max_simplex_iterations = 4000;
  int max_newton_iterations = 30;
  double initial_simplex = 0.05;  // relative to the guess height
};

/// Nelder-Mead descent on Psi followed by Newton polish on the finite-difference Hessian.
/// Throws Error(convergence) when either stage runs out of iterations and Error(saddle) when the
/// Hessian at the result is not positive definite.
Vec3 find_minimum(const PseudoField& field, const Vec3& guess, const MinimizeOptions& options = {});

/// Lowest point of Psi on the vertical line above (x, y), scanned over (0, z_top].
Vec3 vertical_guess(const PseudoField& field, double x, double y, double z_top, int points = 200);

struct SecularModes {
  std::array<double, 3> frequencies_hz{};  // ascending
  Mat3 axes = Mat3::Identity();             // column i is the axis of frequencies_hz[i]
  std::array<double, 3> curvatures{};       // Hessian eigenvalues, J/m^2
};

/// Eigen-decomposition of the Psi Hessian at `minimum`. Degenerate eigenvalues are ordered by
/// their axes' alignment with x, y, z. Throws Error(saddle) for a non-positive eigenvalue.
SecularModes secular_frequencies(const PseudoField& field, const Vec3& minimum);

/// q_i = 2 Q V_rf (a_i . H_rf a_i) / (m Omega^2) along each axis column.
std::array<double, 3> mathieu_q(const PseudoField& field, const Vec3& minimum, const Mat3& axes);
inline constexpr double mathieu_stability_limit = 0.908;

struct DepthOptions {
  double scan_top_factor = 6.0;  // scan the vertical ray up to this multiple of the ion height
  int scan_points = 240;
  int max_newton_iterations = 40;
};

struct DepthResult {
  double depth_ev = 0.0;
  Vec3 escape_position = Vec3::Zero();
  bool barrier_found = false;
  std::string diagnostic;
};

/// Barrier height from the minimum to the escape saddle. The vertical ray above the minimum is
/// scanned for the first maximum of Psi, then refined by Newton on the gradient to a critical point
/// with exactly one negative Hessian eigenvalue. Without a barrier the depth is 0 and the diagnostic
/// says why. Throws Error(saddle) when refinement fails.
DepthResult trap_depth(const PseudoField& field, const Vec3& minimum, const DepthOptions& options = {});

struct TrapAnalysis {
  Vec3 minimum_position = Vec3::Zero();
  SecularModes modes;
  std::array<double, 3> mathieu_q{};
  bool stable = true;  // every |q| below the stability limit
  double depth_ev = 0.0;
  Vec3 escape_position = Vec3::Zero();
  bool barrier_found = false;
  std::string diagnostic;
  double gradient_norm = 0.0;  // |grad Psi| at the minimum, J/m
};

TrapAnalysis analyze(const PseudoField& field, const Vec3& guess, const MinimizeOptions& minimize = {},
                     const DepthOptions& depth = {});

struct SweepRow {
  double rf_amplitude = 0.0;
  std::optional<TrapAnalysis> analysis;
  std::string error;  // set when analysis is empty
};

/// analyze() at each amplitude, all from the same guess. Rows keep the input order; a failing
/// row carries its error instead of aborting the sweep.
std::vector<SweepRow> sweep_depth(const PseudoField& field, const std::vector<double>& amplitudes,
                                  const Vec3& guess, unsigned workers = 0,
                                  const MinimizeOptions& minimize = {}, const DepthOptions& depth = {});

/// CSV with header Vrf_V,depth_eV,fx_Hz,fy_Hz,fz_Hz,qmax,esc_x_m,esc_y_m,esc_z_m. Failed rows hold
/// nan and are listed in the comment block.
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows, const std::string& comment = {});

/// Ideal quadrupole about `center`: electrode "rf" has Phi = ((x-cx)^2 - (y-cy)^2) / (2 r0^2) per
/// volt and electrode "endcap" has Phi = (2 (z-cz)^2 - (x-cx)^2 - (y-cy)^2) / (2 r0^2) per volt.
std::shared_ptr<AnalyticBasis> ideal_quadrupole(double r0, const Vec3& center);

}  // namespace surftrap
