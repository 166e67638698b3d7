#include "surftrap/fieldsolver.hpp"

#include "surftrap/csv.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include <unistd.h>

namespace surftrap {

namespace {

using nlohmann::json;

// Breakpoints of [a, b] in cells of size <= h, with the end cells halved `levels` times at the
// graded ends (adjacent cells differ by at most 2:1).
std::vector<double> graded_breaks(double a, double b, double h, int levels, bool grade_lo, bool grade_hi) {
  const double len = b - a;
  int n = std::max(1, static_cast<int>(std::ceil(len / h - 1e-9)));
  if (grade_lo && grade_hi && levels > 0) n = std::max(n, 2);
  std::vector<double> uniform(n + 1);
  for (int i = 0; i <= n; ++i) uniform[i] = a + len * i / n;
  uniform[n] = b;

  std::vector<double> out;
  out.push_back(a);
  const double cell = len / n;
  if (grade_lo) {
    for (int k = levels; k >= 1; --k) out.push_back(a + cell / std::ldexp(1.0, k));
  }
  for (int i = 1; i < n; ++i) out.push_back(uniform[i]);
  if (grade_hi) {
    for (int k = 1; k <= levels; ++k) out.push_back(b - cell / std::ldexp(1.0, k));
  }
  out.push_back(b);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct BBox {
  double xmin, xmax, ymin, ymax;
};

BBox bounds(const Polygon& poly) {
  BBox b{poly[0].x(), poly[0].x(), poly[0].y(), poly[0].y()};
  for (const auto& v : poly) {
    b.xmin = std::min(b.xmin, v.x());
    b.xmax = std::max(b.xmax, v.x());
    b.ymin = std::min(b.ymin, v.y());
    b.ymax = std::max(b.ymax, v.y());
  }
  return b;
}

std::vector<Rect> tile_polygon(const Polygon& poly, const MeshOptions& opt) {
  const BBox bb = bounds(poly);
  const double w = bb.xmax - bb.xmin;
  const double h = bb.ymax - bb.ymin;
  const double scale = std::max(w, h);
  double hx = w / opt.resolution;
  double hy = h / opt.resolution;
  hx = std::min(hx, opt.max_aspect * hy);
  hy = std::min(hy, opt.max_aspect * hx);

  const double tol = 1e-12 * scale;
  std::vector<double> ys;
  for (const auto& v : poly) ys.push_back(v.y());
  std::sort(ys.begin(), ys.end());
  std::vector<double> levels;
  for (double y : ys) {
    if (levels.empty() || y - levels.back() > tol) levels.push_back(y);
  }

  const std::size_t n = poly.size();
  auto horizontal_edge_at = [&](double y) {
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2& a = poly[i];
      const Vec2& b = poly[(i + 1) % n];
      if (std::abs(a.y() - y) <= tol && std::abs(b.y() - y) <= tol) return true;
    }
    return false;
  };

  std::vector<Rect> rects;
  for (std::size_t s = 0; s + 1 < levels.size(); ++s) {
    const double y0 = levels[s];
    const double y1 = levels[s + 1];
    const auto rows = graded_breaks(y0, y1, hy, opt.grading_levels, horizontal_edge_at(y0) || s == 0,
                                    horizontal_edge_at(y1) || s + 2 == levels.size());
    for (std::size_t r = 0; r + 1 < rows.size(); ++r) {
      const double r0 = rows[r];
      const double r1 = rows[r + 1];
      const double ym = 0.5 * (r0 + r1);
      std::vector<double> xs;
      for (std::size_t i = 0; i < n; ++i) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[(i + 1) % n];
        if ((a.y() > ym) != (b.y() > ym)) {
          xs.push_back(a.x() + (ym - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
        }
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        const double xl = xs[k];
        const double xr = xs[k + 1];
        if (xr - xl <= tol) continue;
        const auto cols = graded_breaks(xl, xr, hx, opt.grading_levels, true, true);
        for (std::size_t c = 0; c + 1 < cols.size(); ++c) {
          Rect rect;
          rect.center = Vec2(0.5 * (cols[c] + cols[c + 1]), ym);
          rect.half = Vec2(0.5 * (cols[c + 1] - cols[c]), 0.5 * (r1 - r0));
          rects.push_back(rect);
        }
      }
    }
  }
  return rects;
}

// ln(v + sqrt(u^2 + v^2 + z^2)) without cancellation for negative v. rho2 = u^2 + z^2.
double log_plus(double v, double r, double rho2) {
  if (v >= 0.0) return std::log(v + r);
  return std::log(rho2) - std::log(r - v);
}

PotentialField exact_kernel(const Rect& rect, const Vec3& p) {
  const double z = std::abs(p.z());
  const double z2 = z * z;
  const double us[2] = {rect.center.x() - rect.half.x() - p.x(), rect.center.x() + rect.half.x() - p.x()};
  const double vs[2] = {rect.center.y() - rect.half.y() - p.y(), rect.center.y() + rect.half.y() - p.y()};

  double phi = 0.0;
  double ex = 0.0;
  double ey = 0.0;
  double ez = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double u = us[i];
      const double v = vs[j];
      const double sign = (i == j) ? 1.0 : -1.0;
      const double r = std::sqrt(u * u + v * v + z2);
      const double ru2 = u * u + z2;  // distance^2 from the line x' = x + u
      const double rv2 = v * v + z2;
      // Terms multiplied by a zero coordinate vanish; skip them to avoid log(0).
      const double lv = (ru2 > 0.0 || v > 0.0) ? log_plus(v, r, ru2) : 0.0;
      const double lu = (rv2 > 0.0 || u > 0.0) ? log_plus(u, r, rv2) : 0.0;
      const double at = (z > 0.0) ? std::atan(u * v / (z * r)) : 0.0;
      double f = -z * at;
      if (u != 0.0) f += u * lv;
      if (v != 0.0) f += v * lu;
      phi += sign * f;
      ex += sign * lv;
      ey += sign * lu;
      ez += sign * at;
    }
  }
  const double k = constants::coulomb_k;
  PotentialField out;
  out.potential = k * phi;
  out.field = Vec3(k * ex, k * ey, (p.z() < 0.0 ? -1.0 : 1.0) * k * ez);
  return out;
}

PotentialField multipole_kernel(const Rect& rect, const Vec3& p) {
  const double a2 = rect.half.x() * rect.half.x();
  const double b2 = rect.half.y() * rect.half.y();
  const double area = rect.area();
  const Vec3 d(p.x() - rect.center.x(), p.y() - rect.center.y(), p.z());
  const double r2 = d.squaredNorm();
  const double r = std::sqrt(r2);
  const double qxx = area * (2.0 * a2 - b2) / 3.0;
  const double qyy = area * (2.0 * b2 - a2) / 3.0;
  const double qzz = -area * (a2 + b2) / 3.0;
  const double q = qxx * d.x() * d.x() + qyy * d.y() * d.y() + qzz * d.z() * d.z();
  const double r5 = r2 * r2 * r;
  const double r7 = r5 * r2;
  const double phi = area / r + q / (2.0 * r5);
  const Vec3 grad_q(2.0 * qxx * d.x(), 2.0 * qyy * d.y(), 2.0 * qzz * d.z());
  const Vec3 grad = -area * d / (r2 * r) + grad_q / (2.0 * r5) - 2.5 * q * d / r7;
  const double k = constants::coulomb_k;
  return {k * phi, -k * grad};
}

class MeshSuperposition final : public Superposition {
 public:
  MeshSuperposition(std::vector<Rect> rects, std::vector<double> sigma)
      : rects_(std::move(rects)), sigma_(std::move(sigma)) {}

  PotentialField at(const Vec3& point) const override {
    PotentialField sum;
    for (std::size_t i = 0; i < rects_.size(); ++i) {
      if (sigma_[i] == 0.0) continue;
      const auto pf = patch_potential_field(rects_[i], point);
      sum.potential += sigma_[i] * pf.potential;
      sum.field += sigma_[i] * pf.field;
    }
    return sum;
  }

 private:
  std::vector<Rect> rects_;
  std::vector<double> sigma_;
};

class AnalyticSuperposition final : public Superposition {
 public:
  AnalyticSuperposition(std::vector<AnalyticBasis::Function> fns, std::vector<double> w)
      : fns_(std::move(fns)), w_(std::move(w)) {}

  PotentialField at(const Vec3& point) const override {
    PotentialField sum;
    for (std::size_t i = 0; i < fns_.size(); ++i) {
      const auto pf = fns_[i](point);
      sum.potential += w_[i] * pf.potential;
      sum.field += w_[i] * pf.field;
    }
    return sum;
  }

 private:
  std::vector<AnalyticBasis::Function> fns_;
  std::vector<double> w_;
};


constexpr const char* kBasisFormat = "surftrap-basis";
constexpr int kBasisVersion = 1;

}  // namespace

PatchMesh mesh(const TrapLayout& layout, const MeshOptions& options) {
  if (options.resolution < 2) throw Error(ErrorKind::mesh, "mesh resolution must be >= 2");
  if (auto violations = validate(layout); !violations.empty()) {
    throw Error(ErrorKind::validation, "cannot mesh invalid layout: " + violations.front().message);
  }
  PatchMesh out;
  for (std::size_t e = 0; e < layout.electrodes.size(); ++e) {
    const auto& electrode = layout.electrodes[e];
    out.electrodes.push_back({electrode.name, electrode.role});
    const std::size_t begin = out.patches.size();
    for (const auto& poly : electrode.polygons) {
      if (!options.staircase) {
        for (std::size_t i = 0; i < poly.size(); ++i) {
          const Vec2 d = poly[(i + 1) % poly.size()] - poly[i];
          if (d.x() != 0.0 && d.y() != 0.0) {
            throw Error(ErrorKind::mesh, "electrode '" + electrode.name +
                                             "': polygon not representable by the rectangle tiler (slanted edge)");
          }
        }
      }
      const auto rects = tile_polygon(poly, options);
      double tiled = 0.0;
      for (const auto& r : rects) {
        tiled += r.area();
        out.patches.push_back({r, e});
      }
      const double exact = area(poly);
      if (std::abs(tiled - exact) > options.area_tolerance * exact) {
        std::ostringstream msg;
        msg << "electrode '" << electrode.name << "': polygon not representable by the rectangle tiler "
            << "(tiled area off by " << 100.0 * std::abs(tiled - exact) / exact << "%)";
        throw Error(ErrorKind::mesh, msg.str());
      }
    }
    out.ranges.emplace_back(begin, out.patches.size());
  }
  if (out.patches.size() > options.max_patches) {
    const double shrink = std::sqrt(static_cast<double>(options.max_patches) / out.patches.size());
    const int suggested = std::max(2, static_cast<int>(std::floor(options.resolution * shrink)));
    throw Error(ErrorKind::mesh, "mesh has " + std::to_string(out.patches.size()) + " patches, cap is " +
                                     std::to_string(options.max_patches) + "; try resolution " +
                                     std::to_string(suggested));
  }
  return out;
}

PotentialField patch_potential_field(const Rect& rect, const Vec3& point) {
  const double dx = point.x() - rect.center.x();
  const double dy = point.y() - rect.center.y();
  const double dist2 = dx * dx + dy * dy + point.z() * point.z();
  const double size2 = rect.half.squaredNorm();
  if (dist2 > 3600.0 * size2) return multipole_kernel(rect, point);
  return exact_kernel(rect, point);
}

double patch_potential(const Rect& rect, const Vec3& point) { return patch_potential_field(rect, point).potential; }

Vec3 patch_field(const Rect& rect, const Vec3& point) { return patch_potential_field(rect, point).field; }

std::size_t FieldSource::index_of(std::string_view name) const {
  const auto& infos = electrodes();
  for (std::size_t i = 0; i < infos.size(); ++i) {
    if (infos[i].name == name) return i;
  }
  throw Error(ErrorKind::domain, "unknown electrode '" + std::string(name) + "'");
}

std::vector<double> FieldSource::weights(const std::map<std::string, double>& voltages) const {
  std::vector<double> w(electrodes().size(), 0.0);
  for (const auto& [name, volts] : voltages) w[index_of(name)] = volts;
  return w;
}

double FieldSource::potential(const std::map<std::string, double>& voltages, const Vec3& point) const {
  return superpose(weights(voltages))->at(point).potential;
}

Vec3 FieldSource::field(const std::map<std::string, double>& voltages, const Vec3& point) const {
  return superpose(weights(voltages))->at(point).field;
}

BasisSolution::BasisSolution(PatchMesh mesh, std::vector<Eigen::VectorXd> sigma, SolverInfo info)
    : mesh_(std::move(mesh)), sigma_(std::move(sigma)), info_(std::move(info)) {
  if (sigma_.size() != mesh_.electrodes.size()) throw Error(ErrorKind::solver, "basis/electrode count mismatch");
  for (const auto& s : sigma_) {
    if (static_cast<std::size_t>(s.size()) != mesh_.size()) throw Error(ErrorKind::solver, "basis/patch count mismatch");
  }
}

std::shared_ptr<const Superposition> BasisSolution::superpose(std::span<const double> weights) const {
  if (weights.size() != sigma_.size()) throw Error(ErrorKind::domain, "weight count does not match electrodes");
  std::vector<double> combined(mesh_.size(), 0.0);
  for (std::size_t e = 0; e < sigma_.size(); ++e) {
    if (weights[e] == 0.0) continue;
    for (std::size_t i = 0; i < combined.size(); ++i) combined[i] += weights[e] * sigma_[e][i];
  }
  std::vector<Rect> rects;
  rects.reserve(mesh_.size());
  for (const auto& p : mesh_.patches) rects.push_back(p.rect);
  return std::make_shared<MeshSuperposition>(std::move(rects), std::move(combined));
}

double BasisSolution::total_charge(std::size_t electrode) const {
  double q = 0.0;
  for (std::size_t i = 0; i < mesh_.size(); ++i) q += sigma_[electrode][i] * mesh_.patches[i].rect.area();
  return q;
}

double BasisSolution::boundary_residual() const {
  const Eigen::MatrixXd a = collocation_matrix(mesh_);
  double worst = 0.0;
  for (std::size_t e = 0; e < sigma_.size(); ++e) {
    const Eigen::VectorXd phi = a * sigma_[e];
    for (std::size_t i = 0; i < mesh_.size(); ++i) {
      const double target = mesh_.patches[i].electrode == e ? 1.0 : 0.0;
      worst = std::max(worst, std::abs(phi[i] - target));
    }
  }
  return worst;
}

Eigen::MatrixXd collocation_matrix(const PatchMesh& mesh, unsigned workers) {
  const std::size_t n = mesh.size();
  Eigen::MatrixXd a(n, n);
  parallel_for(n, workers, [&](std::size_t i) {
    const Vec3 c(mesh.patches[i].rect.center.x(), mesh.patches[i].rect.center.y(), 0.0);
    for (std::size_t j = 0; j < n; ++j) a(i, j) = patch_potential(mesh.patches[j].rect, c);
  });
  return a;
}

BasisSolution solve_basis(const PatchMesh& mesh, const SolveOptions& options) {
  const std::size_t n = mesh.size();
  if (n == 0) throw Error(ErrorKind::solver, "empty mesh");
  if (n > options.max_patches) {
    throw Error(ErrorKind::solver, "mesh has " + std::to_string(n) + " patches, dense-solve cap is " +
                                       std::to_string(options.max_patches) + "; use a coarser resolution");
  }
  const Eigen::MatrixXd a = collocation_matrix(mesh, options.workers);
  const std::size_t ne = mesh.electrodes.size();
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, ne);
  for (std::size_t e = 0; e < ne; ++e) {
    for (std::size_t i = mesh.ranges[e].first; i < mesh.ranges[e].second; ++i) rhs(i, e) = 1.0;
  }

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  const double rcond = lu.rcond();
  if (!(rcond > options.min_rcond)) {
    std::ostringstream msg;
    msg << "collocation system is ill-conditioned (rcond " << rcond
        << "); refine the mesh or merge degenerate patches";
    throw Error(ErrorKind::solver, msg.str());
  }
  const Eigen::MatrixXd x = lu.solve(rhs);
  const double residual = (a * x - rhs).cwiseAbs().maxCoeff();
  if (!(residual <= options.tolerance)) {
    std::ostringstream msg;
    msg << "boundary residual " << residual << " V exceeds tolerance " << options.tolerance << " V";
    throw Error(ErrorKind::solver, msg.str());
  }

  std::vector<Eigen::VectorXd> sigma;
  for (std::size_t e = 0; e < ne; ++e) sigma.emplace_back(x.col(e));
  SolverInfo info;
  info.max_residual = residual;
  info.rcond = rcond;
  info.tolerance = options.tolerance;
  return BasisSolution(mesh, std::move(sigma), info);
}

std::string basis_cache_key(const TrapLayout& layout, const MeshOptions& options) {
  std::ostringstream desc;
  desc << layout_to_json(layout).dump() << "|res=" << options.resolution << "|grade=" << options.grading_levels
       << "|aspect=" << csv::format(options.max_aspect) << "|areatol=" << csv::format(options.area_tolerance)
       << "|v" << kBasisVersion;
  return fnv1a_hex(desc.str());
}

void save_basis(const BasisSolution& basis, const std::filesystem::path& path) {
  json doc;
  doc["format"] = kBasisFormat;
  doc["version"] = kBasisVersion;
  doc["layout_hash"] = basis.info().layout_hash;
  doc["tolerance_V"] = basis.info().tolerance;
  doc["max_residual_V"] = basis.info().max_residual;
  doc["rcond"] = basis.info().rcond;
  json electrodes = json::array();
  for (std::size_t e = 0; e < basis.electrodes().size(); ++e) {
    const auto& info = basis.electrodes()[e];
    std::vector<double> s(basis.sigma(e).data(), basis.sigma(e).data() + basis.sigma(e).size());
    electrodes.push_back({{"name", info.name},
                          {"role", std::string(to_string(info.role))},
                          {"range", {basis.mesh().ranges[e].first, basis.mesh().ranges[e].second}},
                          {"sigma", s}});
  }
  doc["electrodes"] = std::move(electrodes);
  json patches = json::array();
  for (const auto& p : basis.mesh().patches) {
    patches.push_back({p.rect.center.x(), p.rect.center.y(), p.rect.half.x(), p.rect.half.y(), p.electrode});
  }
  doc["patches"] = std::move(patches);

  const auto tmp = path.string() + ".tmp" +
                   std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()) ^
                                  static_cast<std::size_t>(::getpid()));
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp);
    out << doc.dump() << "\n";
    if (!out) throw Error(ErrorKind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

BasisSolution load_basis(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
    if (doc.at("format") != kBasisFormat || doc.at("version") != kBasisVersion) {
      throw Error(ErrorKind::parse, path.string() + ": unsupported basis file format");
    }
    PatchMesh m;
    for (const auto& jp : doc.at("patches")) {
      Patch p;
      p.rect.center = Vec2(jp.at(0).get<double>(), jp.at(1).get<double>());
      p.rect.half = Vec2(jp.at(2).get<double>(), jp.at(3).get<double>());
      p.electrode = jp.at(4).get<std::size_t>();
      m.patches.push_back(p);
    }
    std::vector<Eigen::VectorXd> sigma;
    for (const auto& je : doc.at("electrodes")) {
      m.electrodes.push_back({je.at("name").get<std::string>(), role_from_string(je.at("role").get<std::string>())});
      m.ranges.emplace_back(je.at("range").at(0).get<std::size_t>(), je.at("range").at(1).get<std::size_t>());
      const auto s = je.at("sigma").get<std::vector<double>>();
      sigma.emplace_back(Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size())));
    }
    SolverInfo info;
    info.layout_hash = doc.at("layout_hash").get<std::string>();
    info.tolerance = doc.at("tolerance_V").get<double>();
    info.max_residual = doc.at("max_residual_V").get<double>();
    info.rcond = doc.at("rcond").get<double>();
    return BasisSolution(std::move(m), std::move(sigma), info);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

BasisSolution solve_cached(const TrapLayout& layout, const MeshOptions& mesh_options,
                           const SolveOptions& solve_options, const std::filesystem::path& cache_dir) {
  const std::string key = basis_cache_key(layout, mesh_options);
  std::filesystem::path file;
  if (!cache_dir.empty()) {
    file = cache_dir / ("basis-" + key + ".json");
    if (std::filesystem::exists(file)) {
      auto cached = load_basis(file);
      if (cached.info().layout_hash == key) return cached;
    }
  }
  auto basis = solve_basis(mesh(layout, mesh_options), solve_options);
  basis.info().layout_hash = key;
  if (!file.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_basis(basis, file);
  }
  return basis;
}

void AnalyticBasis::add(std::string name, Role role, Function unit_solution) {
  info_.push_back({std::move(name), role});
  functions_.push_back(std::move(unit_solution));
}

std::shared_ptr<const Superposition> AnalyticBasis::superpose(std::span<const double> weights) const {
  if (weights.size() != functions_.size()) throw Error(ErrorKind::domain, "weight count does not match electrodes");
  std::vector<Function> fns;
  std::vector<double> w;
  for (std::size_t i = 0; i < functions_.size(); ++i) {
    if (weights[i] == 0.0) continue;
    fns.push_back(functions_[i]);
    w.push_back(weights[i]);
  }
  return std::make_shared<AnalyticSuperposition>(std::move(fns), std::move(w));
}

void export_grid(const FieldSource& source, const std::map<std::string, double>& voltages, const Box3& box,
                 double spacing, std::ostream& out) {
  if (!(spacing > 0.0)) throw Error(ErrorKind::domain, "grid spacing must be positive");
  out << "x_m,y_m,z_m,phi_V,Ex_Vpm,Ey_Vpm,Ez_Vpm\n";
  if ((box.lo.array() > box.hi.array()).any()) return;
  if (box.lo.z() < 0.0) throw Error(ErrorKind::domain, "grid box must lie in the upper half-space");
  const auto sup = source.superpose(source.weights(voltages));
  int counts[3];
  for (int a = 0; a < 3; ++a) counts[a] = static_cast<int>(std::floor((box.hi[a] - box.lo[a]) / spacing + 1e-9)) + 1;
  for (int i = 0; i < counts[0]; ++i) {
    for (int j = 0; j < counts[1]; ++j) {
      for (int k = 0; k < counts[2]; ++k) {
        const Vec3 p = box.lo + spacing * Vec3(i, j, k);
        const auto pf = sup->at(p);
        csv::write_row(out, {p.x(), p.y(), p.z(), pf.potential, pf.field.x(), pf.field.y(), pf.field.z()});
      }
    }
  }
  if (!out) throw Error(ErrorKind::io, "grid export write failed");
}

}  // namespace surftrap
