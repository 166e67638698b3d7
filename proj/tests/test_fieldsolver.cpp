#include <doctest.h>

#include "surftrap/csv.hpp"
#include "surftrap/fieldsolver.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

using namespace surftrap;

namespace {

// Independent oracle: nested adaptive Gauss-Kronrod of k * dA / |r - r'| over the rectangle.
double quadrature_potential(const Rect& r, const Vec3& p) {
  using boost::math::quadrature::gauss_kronrod;
  auto inner = [&](double x) {
    auto f = [&](double y) {
      const double dx = p.x() - x;
      const double dy = p.y() - y;
      return 1.0 / std::sqrt(dx * dx + dy * dy + p.z() * p.z());
    };
    return gauss_kronrod<double, 61>::integrate(f, r.center.y() - r.half.y(), r.center.y() + r.half.y(), 10, 1e-11);
  };
  return constants::coulomb_k *
         gauss_kronrod<double, 61>::integrate(inner, r.center.x() - r.half.x(), r.center.x() + r.half.x(), 10, 1e-11);
}

Vec3 quadrature_field(const Rect& r, const Vec3& p) {
  using boost::math::quadrature::gauss_kronrod;
  Vec3 out;
  for (int axis = 0; axis < 3; ++axis) {
    auto inner = [&](double x) {
      auto f = [&](double y) {
        const Vec3 d(p.x() - x, p.y() - y, p.z());
        return d[axis] / std::pow(d.norm(), 3);
      };
      return gauss_kronrod<double, 61>::integrate(f, r.center.y() - r.half.y(), r.center.y() + r.half.y(), 10,
                                                  1e-11);
    };
    out[axis] = constants::coulomb_k * gauss_kronrod<double, 61>::integrate(inner, r.center.x() - r.half.x(),
                                                                            r.center.x() + r.half.x(), 10, 1e-11);
  }
  return out;
}

Polygon regular_polygon(int sides, double radius) {
  Polygon p;
  for (int k = 0; k < sides; ++k) {
    const double t = 2.0 * constants::pi * (k + 0.5) / sides;
    p.emplace_back(radius * std::cos(t), radius * std::sin(t));
  }
  return p;
}

Polygon square(double x0, double y0, double w, double h) {
  return {Vec2(x0, y0), Vec2(x0 + w, y0), Vec2(x0 + w, y0 + h), Vec2(x0, y0 + h)};
}

TrapLayout single(const Polygon& poly) {
  TrapLayout l;
  l.extent = {-2, 2, -2, 2};
  l.electrodes.push_back({"disk", Role::rf, {poly}});
  return l;
}

bool rect_inside_polygon(const Rect& r, const Polygon& poly) {
  const double x0 = r.center.x() - r.half.x(), x1 = r.center.x() + r.half.x();
  const double y0 = r.center.y() - r.half.y(), y1 = r.center.y() + r.half.y();
  double bx0 = poly[0].x(), bx1 = bx0, by0 = poly[0].y(), by1 = by0;
  for (const auto& v : poly) {
    bx0 = std::min(bx0, v.x());
    bx1 = std::max(bx1, v.x());
    by0 = std::min(by0, v.y());
    by1 = std::max(by1, v.y());
  }
  // Default-layout polygons are axis-aligned rectangles.
  const double tol = 1e-15;
  return x0 >= bx0 - tol && x1 <= bx1 + tol && y0 >= by0 - tol && y1 <= by1 + tol;
}

}  // namespace

TEST_CASE("patch potential matches 2D quadrature") {
  const Rect sq{Vec2::Zero(), Vec2(0.5e-3, 0.5e-3)};
  for (double z : {0.05e-3, 0.3e-3, 1e-3, 5e-3}) {
    const Vec3 p(0, 0, z);
    CHECK(patch_potential(sq, p) == doctest::Approx(quadrature_potential(sq, p)).epsilon(1e-6));
  }
  const Rect rect{Vec2(0.2e-3, -0.1e-3), Vec2(0.7e-3, 0.15e-3)};
  for (const Vec3& p : {Vec3(1e-3, 0.4e-3, 0.2e-3), Vec3(-0.3e-3, 0.0, 0.05e-3), Vec3(1.2e-3, -0.4e-3, 0.0)}) {
    CHECK(patch_potential(rect, p) == doctest::Approx(quadrature_potential(rect, p)).epsilon(1e-6));
  }
}

TEST_CASE("patch field matches quadrature of the field integrand") {
  const Rect rect{Vec2(0.2e-3, -0.1e-3), Vec2(0.7e-3, 0.15e-3)};
  for (const Vec3& p : {Vec3(1e-3, 0.4e-3, 0.2e-3), Vec3(-0.3e-3, 0.0, 0.5e-3), Vec3(0.1e-3, 0.05e-3, 0.3e-3)}) {
    const Vec3 e = patch_field(rect, p);
    const Vec3 q = quadrature_field(rect, p);
    CHECK((e - q).norm() <= 1e-6 * q.norm());
  }
}

TEST_CASE("patch potential monopole limit and symmetry") {
  const Rect sq{Vec2::Zero(), Vec2(1e-4, 1e-4)};
  const double q = sq.area();
  for (double d : {2e-3, 1e-2, 1e-1}) {
    const Vec3 p(d * 0.6, d * 0.0, d * 0.8);
    const double mono = constants::coulomb_k * q / d;
    const double rel = (sq.half.norm() / d) * (sq.half.norm() / d);
    CHECK(std::abs(patch_potential(sq, p) - mono) <= rel * mono);
  }
  const Rect r{Vec2(1e-3, 2e-3), Vec2(0.3e-3, 0.1e-3)};
  for (double dx : {0.1e-3, 0.4e-3, 2e-3}) {
    const Vec3 a(1e-3 + dx, 2.05e-3, 0.3e-3);
    const Vec3 b(1e-3 - dx, 2.05e-3, 0.3e-3);
    CHECK(patch_potential(r, a) == doctest::Approx(patch_potential(r, b)).epsilon(1e-13));
  }
  // Continuity across z -> 0 off the patch.
  const Vec3 off(2e-3, 0, 0);
  CHECK(patch_potential(sq, off + Vec3(0, 0, 1e-12)) == doctest::Approx(patch_potential(sq, off)).epsilon(1e-12));
}

TEST_CASE("exact kernel and multipole expansion agree at the switch-over distance") {
  const Rect r{Vec2(0, 0), Vec2(1e-4, 0.3e-4)};
  const double d = 60.0 * r.half.norm();
  for (const Vec3& dir : {Vec3(0.6, 0, 0.8), Vec3(0, 1, 0), Vec3(0.48, 0.6, 0.64)}) {
    const auto a = patch_potential_field(r, d * (1 - 1e-9) * dir);
    const auto b = patch_potential_field(r, d * (1 + 1e-9) * dir);
    CHECK(a.potential == doctest::Approx(b.potential).epsilon(1e-8));
    CHECK((a.field - b.field).norm() <= 1e-7 * b.field.norm());
  }
}

TEST_CASE("mesh tiles a unit square") {
  TrapLayout l;
  l.extent = {-1, 2, -1, 2};
  l.electrodes.push_back({"sq", Role::rf, {square(0, 0, 1, 1)}});
  MeshOptions opt;
  opt.resolution = 4;
  const auto m = mesh(l, opt);
  CHECK(m.size() >= 16);
  double total = 0.0;
  for (const auto& p : m.patches) total += p.rect.area();
  CHECK(total == doctest::Approx(1.0).epsilon(5e-3));
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = i + 1; j < m.size(); ++j) {
      const auto& a = m.patches[i].rect;
      const auto& b = m.patches[j].rect;
      const double ox = std::min(a.center.x() + a.half.x(), b.center.x() + b.half.x()) -
                        std::max(a.center.x() - a.half.x(), b.center.x() - b.half.x());
      const double oy = std::min(a.center.y() + a.half.y(), b.center.y() + b.half.y()) -
                        std::max(a.center.y() - a.half.y(), b.center.y() - b.half.y());
      CHECK_FALSE((ox > 1e-12 && oy > 1e-12));
    }
  }
  // Grading: the smallest patch sits at a corner and adjacent cells differ by at most 2:1.
  double smallest = 1.0;
  for (const auto& p : m.patches) smallest = std::min(smallest, 2 * p.rect.half.x());
  CHECK(smallest == doctest::Approx(0.25 / 8));
}

TEST_CASE("default layout mesh: every patch inside exactly its electrode") {
  const auto layout = default_layout();
  MeshOptions opt;
  opt.resolution = 8;
  const auto m = mesh(layout, opt);
  for (const auto& p : m.patches) {
    int inside = 0;
    bool in_own = false;
    for (std::size_t e = 0; e < layout.electrodes.size(); ++e) {
      for (const auto& poly : layout.electrodes[e].polygons) {
        if (rect_inside_polygon(p.rect, poly)) {
          ++inside;
          if (e == p.electrode) in_own = true;
        }
      }
    }
    CHECK(inside == 1);
    CHECK(in_own);
  }
  for (std::size_t e = 0; e < layout.electrodes.size(); ++e) {
    double tiled = 0.0;
    for (std::size_t i = m.ranges[e].first; i < m.ranges[e].second; ++i) {
      CHECK(m.patches[i].electrode == e);
      tiled += m.patches[i].rect.area();
    }
    CHECK(tiled == doctest::Approx(layout.electrodes[e].total_area()).epsilon(1e-12));
  }
}

TEST_CASE("24-gon tiling conserves the shoelace area") {
  const auto poly = regular_polygon(24, 1.0);
  // Shoelace oracle for a regular n-gon: (n/2) r^2 sin(2 pi / n).
  const double oracle = 12.0 * std::sin(2.0 * constants::pi / 24.0);
  CHECK(area(poly) == doctest::Approx(oracle).epsilon(1e-13));
  MeshOptions opt;
  opt.resolution = 8;
  const auto m = mesh(single(poly), opt);
  double total = 0.0;
  for (const auto& p : m.patches) total += p.rect.area();
  CHECK(std::abs(total - oracle) <= 5e-3 * oracle);
}

TEST_CASE("mesh errors name the electrode or suggest a resolution") {
  MeshOptions opt;
  opt.resolution = 2;
  opt.staircase = false;
  try {
    mesh(single(regular_polygon(7, 1.0)), opt);
    FAIL("expected mesh error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::mesh);
    CHECK(std::string(e.what()).find("disk") != std::string::npos);
  }
  MeshOptions big;
  big.resolution = 40;
  big.max_patches = 500;
  try {
    mesh(default_layout(), big);
    FAIL("expected mesh error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::mesh);
    CHECK(std::string(e.what()).find("try resolution") != std::string::npos);
  }
  CHECK_THROWS_AS(mesh(default_layout(), MeshOptions{1}), Error);
}

TEST_CASE("collocation reciprocity: equal patches give a symmetric pair") {
  const auto m = mesh(default_layout(), MeshOptions{4});
  const auto a = collocation_matrix(m);
  int checked = 0;
  double worst_weighted = 0.0;
  for (std::size_t i = 0; i < m.size(); i += 7) {
    for (std::size_t j = 0; j < m.size(); j += 5) {
      const auto& ri = m.patches[i].rect;
      const auto& rj = m.patches[j].rect;
      if (ri.half == rj.half) {
        CHECK(a(i, j) == doctest::Approx(a(j, i)).epsilon(1e-9));
        ++checked;
      } else if (i != j) {
        const double dist = (ri.center - rj.center).norm();
        if (dist > 10 * std::max(ri.half.norm(), rj.half.norm())) {
          // Area-weighted form is symmetric up to the multipole error of the far pair.
          const double lhs = a(i, j) * rj.area() == 0 ? 0 : a(i, j) / rj.area();
          const double rhs = a(j, i) / ri.area();
          worst_weighted = std::max(worst_weighted, std::abs(lhs - rhs) / std::abs(lhs));
        }
      }
    }
  }
  CHECK(checked > 20);
  CHECK(worst_weighted < 2e-2);
}

TEST_CASE("two-electrode superposition equals the merged solve") {
  TrapLayout two;
  two.extent = {-2e-3, 2e-3, -2e-3, 2e-3};
  two.electrodes.push_back({"left", Role::rf, {square(-1e-3, -0.5e-3, 1e-3, 1e-3)}});
  two.electrodes.push_back({"right", Role::dc, {square(0.0, -0.5e-3, 1e-3, 1e-3)}});
  TrapLayout merged;
  merged.extent = two.extent;
  merged.electrodes.push_back(
      {"both", Role::rf, {square(-1e-3, -0.5e-3, 1e-3, 1e-3), square(0.0, -0.5e-3, 1e-3, 1e-3)}});
  const auto b2 = solve_basis(mesh(two, MeshOptions{8}));
  const auto bm = solve_basis(mesh(merged, MeshOptions{8}));
  CHECK(b2.boundary_residual() <= 1e-4);
  for (const Vec3& p : {Vec3(0, 0, 0.3e-3), Vec3(0.4e-3, 0.2e-3, 1e-3), Vec3(-1.5e-3, 0, 0.2e-3)}) {
    const double sum = b2.potential({{"left", 1.0}, {"right", 1.0}}, p);
    const double direct = bm.potential({{"both", 1.0}}, p);
    CHECK(sum == doctest::Approx(direct).epsilon(1e-4));
  }
}

TEST_CASE("potential is linear in the voltages") {
  const auto basis = solve_basis(mesh(default_layout(), MeshOptions{4}));
  const Vec3 p(0.1e-3, 0.2e-3, 0.7e-3);
  std::map<std::string, double> zero;
  for (const auto& e : basis.electrodes()) zero[e.name] = 0.0;
  CHECK(basis.potential(zero, p) == 0.0);
  CHECK(basis.field(zero, p).norm() == 0.0);

  std::map<std::string, double> v{{"rf", 1.3}, {"center", -0.7}, {"dc_p2", 2.1}};
  std::map<std::string, double> v2;
  for (const auto& [k, x] : v) v2[k] = 2.0 * x;
  CHECK(basis.potential(v2, p) == 2.0 * basis.potential(v, p));
  CHECK(basis.field(v2, p) == 2.0 * basis.field(v, p));
  std::map<std::string, double> v3;
  for (const auto& [k, x] : v) v3[k] = 3.7 * x;
  CHECK(basis.potential(v3, p) == doctest::Approx(3.7 * basis.potential(v, p)).epsilon(1e-13));
  CHECK_THROWS_AS(basis.potential({{"missing", 1.0}}, p), Error);
}

TEST_CASE("analytic field agrees with finite differences above the default layout") {
  const auto basis = solve_basis(mesh(default_layout(), MeshOptions{6}));
  const std::map<std::string, double> v{{"rf", 1.0}, {"center", 0.3}, {"dc_p1", -1.0}, {"dc_m3", 2.0}};
  const auto sup = basis.superpose(basis.weights(v));
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ux(-3e-3, 3e-3), uz(0.2e-3, 3e-3);
  const double h = 1e-6;
  int failures = 0;
  for (int n = 0; n < 100; ++n) {
    const Vec3 p(ux(rng), ux(rng), uz(rng));
    const Vec3 e = sup->at(p).field;
    Vec3 fd;
    for (int a = 0; a < 3; ++a) {
      Vec3 dp = Vec3::Zero();
      dp[a] = h;
      fd[a] = -(sup->at(p + dp).potential - sup->at(p - dp).potential) / (2 * h);
    }
    if ((e - fd).norm() > 1e-3 * e.norm()) ++failures;
  }
  CHECK(failures == 0);
}

TEST_CASE("conducting disk on-axis potential matches (2/pi) atan(R/z)") {
  const double radius = 1e-3;
  MeshOptions opt;
  opt.resolution = 40;
  const auto basis = solve_basis(mesh(single(regular_polygon(96, radius)), opt));
  CHECK(basis.mesh().size() <= 4000);
  CHECK(basis.info().max_residual <= 1e-4);
  for (double zr : {0.1, 0.2, 0.5, 1.0, 2.0, 5.0}) {
    const double exact = 2.0 / constants::pi * std::atan(1.0 / zr);
    const double phi = basis.potential({{"disk", 1.0}}, Vec3(0, 0, zr * radius));
    CHECK(phi == doctest::Approx(exact).epsilon(1e-2));
  }
}

TEST_CASE("disk potential converges under resolution doubling") {
  const double radius = 1e-3;
  const auto poly = regular_polygon(96, radius);
  MeshOptions coarse;
  coarse.resolution = 16;
  MeshOptions fine;
  fine.resolution = 32;
  const auto a = solve_basis(mesh(single(poly), coarse)).potential({{"disk", 1.0}}, Vec3(0, 0, radius));
  const auto b = solve_basis(mesh(single(poly), fine)).potential({{"disk", 1.0}}, Vec3(0, 0, radius));
  CHECK(std::abs(a - b) / b < 5e-3);
}

TEST_CASE("far field approaches the total induced charge") {
  const auto layout = default_layout();
  const auto basis = solve_basis(mesh(layout, MeshOptions{6}));
  const double extent = std::max(layout.extent.width(), layout.extent.height());
  const std::size_t rf = basis.index_of("rf");
  const double q = basis.total_charge(rf);
  CHECK(q > 0.0);
  for (const Vec3& dir : {Vec3(0, 0, 1), Vec3(0.6, 0, 0.8), Vec3(0, 1, 0)}) {
    const Vec3 p = 20.0 * extent * dir;
    const double phi = basis.potential({{"rf", 1.0}}, p);
    CHECK(phi == doctest::Approx(constants::coulomb_k * q / p.norm()).epsilon(2e-2));
  }
}

TEST_CASE("fully tiled plane: summed bases equal the direct solve of the merged plate") {
  // 4 x 4 tiles of 1 mm.
  TrapLayout tiled;
  tiled.extent = {-2.5e-3, 2.5e-3, -2.5e-3, 2.5e-3};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      tiled.electrodes.push_back({"t" + std::to_string(i) + std::to_string(j), i + j == 0 ? Role::rf : Role::dc,
                                  {square(-2e-3 + 1e-3 * i, -2e-3 + 1e-3 * j, 1e-3, 1e-3)}});
    }
  }
  TrapLayout plate;
  plate.extent = tiled.extent;
  plate.electrodes.push_back({"plate", Role::rf, {square(-2e-3, -2e-3, 4e-3, 4e-3)}});
  const auto bt = solve_basis(mesh(tiled, MeshOptions{6}));
  const auto bp = solve_basis(mesh(plate, MeshOptions{24}));
  std::map<std::string, double> all;
  for (const auto& e : bt.electrodes()) all[e.name] = 1.0;
  const Vec3 p(0, 0, 0.1 * 4e-3);
  CHECK(bt.potential(all, p) == doctest::Approx(bp.potential({{"plate", 1.0}}, p)).epsilon(2e-2));
}

TEST_CASE("ill-conditioned collocation systems are reported") {
  PatchMesh m;
  m.electrodes.push_back({"a", Role::rf});
  const Rect r{Vec2::Zero(), Vec2(1e-3, 1e-3)};
  m.patches = {{r, 0}, {r, 0}};
  m.ranges = {{0, 2}};
  try {
    solve_basis(m);
    FAIL("expected solver error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::solver);
    CHECK(std::string(e.what()).find("ill-conditioned") != std::string::npos);
  }
  SolveOptions capped;
  capped.max_patches = 1;
  CHECK_THROWS_AS(solve_basis(mesh(default_layout(), MeshOptions{4}), capped), Error);
}

TEST_CASE("basis cache round trip is exact and keyed by content") {
  const auto layout = default_layout();
  const MeshOptions opt{4};
  const auto dir = std::filesystem::temp_directory_path() / "surftrap_cache_test";
  std::filesystem::remove_all(dir);
  const auto first = solve_cached(layout, opt, {}, dir);
  const auto second = solve_cached(layout, opt, {}, dir);
  REQUIRE(second.mesh().size() == first.mesh().size());
  for (std::size_t e = 0; e < first.electrodes().size(); ++e) CHECK(second.sigma(e) == first.sigma(e));
  CHECK(second.info().layout_hash == basis_cache_key(layout, opt));
  CHECK(basis_cache_key(layout, MeshOptions{5}) != basis_cache_key(layout, opt));
  auto moved = layout;
  moved.electrodes[0].polygons[0][0].x() += 1e-9;
  CHECK(basis_cache_key(moved, opt) != basis_cache_key(layout, opt));
}

TEST_CASE("grid export") {
  AnalyticBasis src;
  src.add("e", Role::rf, [](const Vec3& p) { return PotentialField{p.z(), Vec3(0, 0, -1)}; });
  std::ostringstream empty;
  export_grid(src, {{"e", 1.0}}, Box3{Vec3(0, 0, 1), Vec3(-1, 0, 1)}, 0.1, empty);
  CHECK(empty.str() == "x_m,y_m,z_m,phi_V,Ex_Vpm,Ey_Vpm,Ez_Vpm\n");

  std::ostringstream one;
  export_grid(src, {{"e", 2.0}}, Box3{Vec3(0.5, 0.25, 1), Vec3(0.5, 0.25, 1)}, 0.1, one);
  std::istringstream in(one.str());
  const auto table = csv::read(in);
  REQUIRE(table.rows.size() == 1);
  CHECK(table.number(0, table.column("phi_V")) == 2.0);
  CHECK(table.number(0, table.column("Ez_Vpm")) == -2.0);

  std::ostringstream zeros;
  export_grid(src, {{"e", 0.0}}, Box3{Vec3(0, 0, 0), Vec3(0.2, 0.2, 0.2)}, 0.1, zeros);
  std::istringstream zin(zeros.str());
  const auto zt = csv::read(zin);
  CHECK(zt.rows.size() == 27);
  for (std::size_t r = 0; r < zt.rows.size(); ++r) CHECK(zt.number(r, zt.column("phi_V")) == 0.0);

  std::ostringstream below;
  CHECK_THROWS_AS(export_grid(src, {{"e", 1.0}}, Box3{Vec3(0, 0, -1), Vec3(0, 0, 1)}, 0.5, below), Error);
}
