#pragma once

#include "surftrap/core.hpp"
#include "surftrap/geometry.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace surftrap {

/// Axis-aligned rectangle in the z = 0 plane.
struct Rect {
  Vec2 center = Vec2::Zero();
  Vec2 half = Vec2::Zero();  // half widths

  double area() const { return 4.0 * half.x() * half.y(); }
};

struct Patch {
  Rect rect;
  std::size_t electrode = 0;
};

struct ElectrodeInfo {
  std::string name;
  Role role = Role::dc;
};

/// Rectangular tiling of every electrode. Patches of electrode e occupy ranges[e].
struct PatchMesh {
  std::vector<ElectrodeInfo> electrodes;
  std::vector<Patch> patches;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) per electrode

  std::size_t size() const { return patches.size(); }
};

struct MeshOptions {
  int resolution = 8;          // cells across each polygon's bounding box dimension
  int grading_levels = 3;      // 2:1 halvings toward each electrode boundary
  double max_aspect = 8.0;     // cap on patch aspect ratio
  std::size_t max_patches = 6000;
  double area_tolerance = 5e-3;  // relative, per polygon
  bool staircase = true;         // approximate slanted edges by steps; otherwise reject them
};

/// Tiles each polygon by horizontal slabs (breaks at every vertex y), chords taken at the row
/// mid-height, graded toward polygon boundaries. Rectilinear polygons are tiled exactly; slanted
/// edges become staircases whose tiled area still equals the polygon area.
/// Throws Error(mesh) naming the electrode when a polygon is not rectilinear and staircasing is
/// off, or the tiling misses the area tolerance; and when the patch count exceeds the cap.
PatchMesh mesh(const TrapLayout& layout, const MeshOptions& options = {});

struct PotentialField {
  double potential = 0.0;  // V
  Vec3 field = Vec3::Zero();  // V/m
};

/// Potential and field at `point` of `rect` carrying unit surface charge density (1 C/m^2).
/// Closed form; far points use a quadrupole expansion accurate to ~(size/distance)^4.
PotentialField patch_potential_field(const Rect& rect, const Vec3& point);
double patch_potential(const Rect& rect, const Vec3& point);
Vec3 patch_field(const Rect& rect, const Vec3& point);

/// A fixed linear combination of electrode solutions, evaluable anywhere in space.
class Superposition {
 public:
  virtual ~Superposition() = default;
  virtual PotentialField at(const Vec3& point) const = 0;
};

/// Unit-voltage solutions of a set of electrodes. Any electrode-voltage assignment is the
/// weighted sum of them.
class FieldSource {
 public:
  virtual ~FieldSource() = default;
  virtual const std::vector<ElectrodeInfo>& electrodes() const = 0;
  /// weights[e] is the voltage on electrode e.
  virtual std::shared_ptr<const Superposition> superpose(std::span<const double> weights) const = 0;

  std::size_t index_of(std::string_view name) const;  // throws Error(domain)
  /// Voltage map to a dense weight vector. Unknown names throw Error(domain).
  std::vector<double> weights(const std::map<std::string, double>& voltages) const;

  double potential(const std::map<std::string, double>& voltages, const Vec3& point) const;
  Vec3 field(const std::map<std::string, double>& voltages, const Vec3& point) const;
};

struct SolveOptions {
  double tolerance = 1e-4;         // V, boundary residual bound
  std::size_t max_patches = 6000;
  double min_rcond = 1e-13;        // reciprocal condition estimate floor
  unsigned workers = 0;
};

struct SolverInfo {
  double max_residual = 0.0;  // V
  double rcond = 0.0;
  double tolerance = 0.0;
  std::string layout_hash;
};

class BasisSolution final : public FieldSource {
 public:
  BasisSolution(PatchMesh mesh, std::vector<Eigen::VectorXd> sigma, SolverInfo info);

  const std::vector<ElectrodeInfo>& electrodes() const override { return mesh_.electrodes; }
  std::shared_ptr<const Superposition> superpose(std::span<const double> weights) const override;

  const PatchMesh& mesh() const { return mesh_; }
  /// Surface charge density per patch (C/m^2) with 1 V on electrode e and 0 V elsewhere.
  const Eigen::VectorXd& sigma(std::size_t electrode) const { return sigma_[electrode]; }
  const SolverInfo& info() const { return info_; }
  SolverInfo& info() { return info_; }

  /// Total induced charge (C) of electrode e's unit-voltage solution.
  double total_charge(std::size_t electrode) const;

  /// Largest |phi(centroid) - assigned voltage| over all collocation points and bases.
  double boundary_residual() const;

 private:
  PatchMesh mesh_;
  std::vector<Eigen::VectorXd> sigma_;
  SolverInfo info_;
};

/// Collocation matrix A_ij = potential at centroid i from unit density on patch j.
Eigen::MatrixXd collocation_matrix(const PatchMesh& mesh, unsigned workers = 0);

/// Solves the unit-voltage problem of every electrode. Throws Error(solver) if the mesh is over
/// the dense-solve cap, the system is ill-conditioned, or the residual misses the tolerance.
BasisSolution solve_basis(const PatchMesh& mesh, const SolveOptions& options = {});

/// Content hash of (layout, mesh options), used as the cache key.
std::string basis_cache_key(const TrapLayout& layout, const MeshOptions& options);

void save_basis(const BasisSolution& basis, const std::filesystem::path& path);
BasisSolution load_basis(const std::filesystem::path& path);

/// Loads `<cache_dir>/basis-<key>.json` when present and matching, otherwise meshes, solves
/// and writes it. An empty cache_dir disables caching.
BasisSolution solve_cached(const TrapLayout& layout, const MeshOptions& mesh_options,
                           const SolveOptions& solve_options, const std::filesystem::path& cache_dir);

/// Closed-form electrode solutions, for synthetic traps and tests.
class AnalyticBasis final : public FieldSource {
 public:
  using Function = std::function<PotentialField(const Vec3&)>;

  void add(std::string name, Role role, Function unit_solution);

  const std::vector<ElectrodeInfo>& electrodes() const override { return info_; }
  std::shared_ptr<const Superposition> superpose(std::span<const double> weights) const override;

 private:
  std::vector<ElectrodeInfo> info_;
  std::vector<Function> functions_;
};

/// Writes x_m,y_m,z_m,phi_V,Ex_Vpm,Ey_Vpm,Ez_Vpm rows for grid points lo + k * spacing inside
/// the box. A box with lo > hi on any axis yields only the header.
void export_grid(const FieldSource& source, const std::map<std::string, double>& voltages, const Box3& box,
                 double spacing, std::ostream& out);

}  // namespace surftrap
