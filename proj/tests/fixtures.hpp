#pragma once

#include "surftrap/dynamics.hpp"
#include "surftrap/fieldsolver.hpp"
#include "surftrap/trap_analysis.hpp"

#include <filesystem>
#include <memory>

namespace fixtures {

/// Basis of the default layout at the default resolution, solved once per process and cached
/// on disk for the other test binaries.
inline std::shared_ptr<const surftrap::BasisSolution> default_basis() {
  static const auto basis = std::make_shared<const surftrap::BasisSolution>(surftrap::solve_cached(
      surftrap::default_layout(), {}, {}, std::filesystem::path(SURFTRAP_TEST_CACHE_DIR)));
  return basis;
}

inline surftrap::DriveConfig rf_drive(double volts, double frequency_hz = 8e6) {
  return surftrap::normalize_drive(surftrap::DriveConfig::from_frequency_hz(volts, frequency_hz),
                                   surftrap::default_layout());
}

inline surftrap::PseudoField default_field(double volts) {
  return surftrap::PseudoField(default_basis(), rf_drive(volts), surftrap::strontium88());
}

inline surftrap::Vec3 default_guess() { return surftrap::Vec3(0.0, 0.0, 0.7e-3); }

/// Pure-rf fields of the default layout on the default escape box at 0.1 mm spacing, cached on disk.
inline std::shared_ptr<const surftrap::GridFields> default_grid() {
  static const auto grid = surftrap::cached_grid(
      default_field(400.0), surftrap::basis_cache_key(surftrap::default_layout(), {}),
      surftrap::IntegratorConfig{}.escape_box, 1e-4, std::filesystem::path(SURFTRAP_TEST_CACHE_DIR));
  return grid;
}

}  // namespace fixtures
