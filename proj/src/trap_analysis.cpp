#include "surftrap/trap_analysis.hpp"

#include "surftrap/csv.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace surftrap {

namespace {

std::vector<double> role_weights(const FieldSource& source, Role role) {
  std::vector<double> w(source.electrodes().size(), 0.0);
  for (std::size_t e = 0; e < w.size(); ++e) {
    if (source.electrodes()[e].role == role) w[e] = 1.0;
  }
  return w;
}

std::string format_point(const Vec3& p) {
  std::ostringstream s;
  s << "(" << p.x() << ", " << p.y() << ", " << p.z() << ") m";
  return s.str();
}

// Nelder-Mead in coordinates scaled by `scale` around `origin`.
Vec3 nelder_mead(const std::function<double(const Vec3&)>& f, const Vec3& origin, double scale, double initial,
                 int max_iterations) {
  std::array<Vec3, 4> x;
  std::array<double, 4> fx;
  x[0] = Vec3::Zero();
  for (int i = 0; i < 3; ++i) {
    x[i + 1] = Vec3::Zero();
    x[i + 1][i] = initial;
  }
  auto eval = [&](const Vec3& u) { return f(origin + scale * u); };
  for (int i = 0; i < 4; ++i) fx[i] = eval(x[i]);

  for (int iter = 0; iter < max_iterations; ++iter) {
    std::array<int, 4> order{0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fx[a] < fx[b]; });
    std::array<Vec3, 4> xs;
    std::array<double, 4> fs;
    for (int i = 0; i < 4; ++i) {
      xs[i] = x[order[i]];
      fs[i] = fx[order[i]];
    }
    x = xs;
    fx = fs;

    double diameter = 0.0;
    for (int i = 1; i < 4; ++i) diameter = std::max(diameter, (x[i] - x[0]).norm());
    if (diameter < 1e-7) return origin + scale * x[0];

    const Vec3 centroid = (x[0] + x[1] + x[2]) / 3.0;
    const Vec3 xr = centroid + (centroid - x[3]);
    const double fr = eval(xr);
    if (fr < fx[0]) {
      const Vec3 xe = centroid + 2.0 * (centroid - x[3]);
      const double fe = eval(xe);
      if (fe < fr) {
        x[3] = xe;
        fx[3] = fe;
      } else {
        x[3] = xr;
        fx[3] = fr;
      }
    } else if (fr < fx[2]) {
      x[3] = xr;
      fx[3] = fr;
    } else {
      const bool outside = fr < fx[3];
      const Vec3 xc = outside ? Vec3(centroid + 0.5 * (xr - centroid)) : Vec3(centroid + 0.5 * (x[3] - centroid));
      const double fc = eval(xc);
      if (fc < (outside ? fr : fx[3])) {
        x[3] = xc;
        fx[3] = fc;
      } else {
        for (int i = 1; i < 4; ++i) {
          x[i] = x[0] + 0.5 * (x[i] - x[0]);
          fx[i] = eval(x[i]);
        }
      }
    }
  }
  throw Error(ErrorKind::convergence, "simplex search did not converge in " + std::to_string(max_iterations) +
                                          " iterations near " + format_point(origin));
}

// Eigenvalues ascending; degenerate ones (relative 1e-9) ordered by the dominant coordinate of
// their eigenvector, and each axis signed so its dominant coordinate is positive.
SecularModes decompose(const Mat3& hessian) {
  Eigen::SelfAdjointEigenSolver<Mat3> eig(0.5 * (hessian + hessian.transpose()));
  const Vec3 values = eig.eigenvalues();
  const Mat3 vectors = eig.eigenvectors();
  auto dominant = [&](int i) {
    int k = 0;
    vectors.col(i).cwiseAbs().maxCoeff(&k);
    return k;
  };
  const double scale = values.cwiseAbs().maxCoeff();
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (std::abs(values[a] - values[b]) > 1e-9 * scale) return values[a] < values[b];
    return dominant(a) < dominant(b);
  });
  SecularModes m;
  for (int i = 0; i < 3; ++i) {
    Vec3 axis = vectors.col(order[i]);
    if (axis[dominant(order[i])] < 0) axis = -axis;
    m.axes.col(i) = axis;
    m.curvatures[i] = values[order[i]];
  }
  return m;
}

std::string eigen_list(const SecularModes& m) {
  std::ostringstream s;
  s << m.curvatures[0] << ", " << m.curvatures[1] << ", " << m.curvatures[2];
  return s.str();
}

}  // namespace

PseudoField::PseudoField(std::shared_ptr<const FieldSource> source, DriveConfig drive, Species species)
    : source_(std::move(source)), drive_(std::move(drive)), species_(species) {
  if (!source_) throw Error(ErrorKind::domain, "pseudopotential needs a field source");
  if (!(drive_.rf_angular_frequency > 0.0)) throw Error(ErrorKind::domain, "rf angular frequency must be positive");
  if (!(drive_.rf_amplitude >= 0.0)) throw Error(ErrorKind::domain, "rf amplitude must be non-negative");
  if (!(species_.mass > 0.0) || species_.charge == 0) throw Error(ErrorKind::domain, "invalid species");
  rf_ = source_->superpose(role_weights(*source_, Role::rf));
  std::vector<double> dc(source_->electrodes().size(), 0.0);
  for (const auto& [name, volts] : drive_.dc_voltages) {
    const std::size_t e = source_->index_of(name);
    if (source_->electrodes()[e].role == Role::rf) {
      throw Error(ErrorKind::domain, "dc voltage given for rf electrode '" + name + "'");
    }
    dc[e] = volts;
  }
  dc_ = source_->superpose(dc);
}

PseudoField PseudoField::with_rf_amplitude(double volts) const {
  PseudoField copy = *this;
  if (!(volts >= 0.0)) throw Error(ErrorKind::domain, "rf amplitude must be non-negative");
  copy.drive_.rf_amplitude = volts;
  return copy;
}

FieldSample PseudoField::sample(const Vec3& point) const {
  const auto rf = rf_->at(point);
  const auto dc = dc_->at(point);
  return {rf.potential, rf.field, dc.potential, dc.field};
}

double PseudoField::psi(const FieldSample& s) const {
  const double q = species_.charge_coulomb();
  const double omega = drive_.rf_angular_frequency;
  const double v = drive_.rf_amplitude;
  return q * q * v * v * s.rf_field.squaredNorm() / (4.0 * species_.mass * omega * omega) + q * s.dc_potential;
}

double PseudoField::psi(const Vec3& point) const { return psi(sample(point)); }

Vec3 PseudoField::gradient(const Vec3& p, double h) const {
  Vec3 g;
  for (int i = 0; i < 3; ++i) {
    Vec3 a = p;
    Vec3 b = p;
    a[i] += h;
    b[i] -= h;
    g[i] = (psi(a) - psi(b)) / (2.0 * h);
  }
  return g;
}

namespace {

template <class F>
Mat3 central_hessian(const F& f, const Vec3& p, double h) {
  Mat3 hm;
  const double f0 = f(p);
  for (int i = 0; i < 3; ++i) {
    Vec3 a = p;
    Vec3 b = p;
    a[i] += h;
    b[i] -= h;
    hm(i, i) = (f(a) - 2.0 * f0 + f(b)) / (h * h);
    for (int j = i + 1; j < 3; ++j) {
      Vec3 pp = p, pm = p, mp = p, mm = p;
      pp[i] += h, pp[j] += h;
      pm[i] += h, pm[j] -= h;
      mp[i] -= h, mp[j] += h;
      mm[i] -= h, mm[j] -= h;
      hm(i, j) = hm(j, i) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
    }
  }
  return hm;
}

}  // namespace

Mat3 PseudoField::hessian(const Vec3& p, double h) const {
  return central_hessian([this](const Vec3& x) { return psi(x); }, p, h);
}

Mat3 PseudoField::rf_hessian(const Vec3& p, double h) const {
  return central_hessian([this](const Vec3& x) { return rf_->at(x).potential; }, p, h);
}

double derivative_step(const Vec3& point) { return 1e-3 * std::max(std::abs(point.z()), 1e-6); }

Vec3 find_minimum(const PseudoField& field, const Vec3& guess, const MinimizeOptions& options) {
  if (!(guess.z() > 0.0)) throw Error(ErrorKind::domain, "minimum search must start above the electrode plane");
  const double scale = guess.z();
  auto objective = [&](const Vec3& p) {
    if (!(p.z() > 0.0)) return std::numeric_limits<double>::infinity();
    return field.psi(p);
  };
  Vec3 x = nelder_mead(objective, guess, scale, options.initial_simplex, options.max_simplex_iterations);

  bool converged = false;
  for (int iter = 0; iter < options.max_newton_iterations; ++iter) {
    const double h = derivative_step(x);
    const Vec3 g = field.gradient(x, h);
    const Mat3 hm = field.hessian(x, h);
    Eigen::LDLT<Mat3> ldlt(hm);
    Vec3 step = -ldlt.solve(g);
    if (!step.allFinite()) break;
    const double limit = 0.1 * x.z();
    if (step.norm() > limit) step *= limit / step.norm();
    x += step;
    if (step.norm() < 1e-8 * x.z()) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw Error(ErrorKind::convergence, "Newton polish of the minimum did not converge near " + format_point(x));
  }
  const SecularModes m = decompose(field.hessian(x, derivative_step(x)));
  if (!(m.curvatures[0] > 0.0)) {
    throw Error(ErrorKind::saddle, "critical point at " + format_point(x) +
                                       " is not a minimum (Hessian eigenvalues " + eigen_list(m) + ")");
  }
  return x;
}

Vec3 vertical_guess(const PseudoField& field, double x, double y, double z_top, int points) {
  if (!(z_top > 0.0) || points < 3) throw Error(ErrorKind::domain, "vertical scan needs z_top > 0 and >= 3 points");
  std::vector<double> zs(points);
  std::vector<double> f(points);
  for (int i = 0; i < points; ++i) {
    zs[i] = z_top * (i + 1) / points;
    f[i] = field.psi(Vec3(x, y, zs[i]));
  }
  int best = -1;
  for (int i = 1; i + 1 < points; ++i) {
    if (f[i] <= f[i - 1] && f[i] <= f[i + 1] && (best < 0 || f[i] < f[best])) best = i;
  }
  if (best < 0) {
    throw Error(ErrorKind::convergence, "no local minimum of the secular potential on the vertical line below z = " +
                                            std::to_string(z_top) + " m");
  }
  return Vec3(x, y, zs[best]);
}

SecularModes secular_frequencies(const PseudoField& field, const Vec3& minimum) {
  SecularModes m = decompose(field.hessian(minimum, derivative_step(minimum)));
  if (!(m.curvatures[0] > 0.0)) {
    throw Error(ErrorKind::saddle, "non-positive secular curvature at " + format_point(minimum) + " (eigenvalues " +
                                       eigen_list(m) + ")");
  }
  const double mass = field.species().mass;
  for (int i = 0; i < 3; ++i) m.frequencies_hz[i] = std::sqrt(m.curvatures[i] / mass) / (2.0 * constants::pi);
  return m;
}

std::array<double, 3> mathieu_q(const PseudoField& field, const Vec3& minimum, const Mat3& axes) {
  const Mat3 h = field.rf_hessian(minimum, derivative_step(minimum));
  const double omega = field.drive().rf_angular_frequency;
  const double pre = 2.0 * field.species().charge_coulomb() * field.drive().rf_amplitude /
                     (field.species().mass * omega * omega);
  std::array<double, 3> q{};
  for (int i = 0; i < 3; ++i) q[i] = pre * axes.col(i).dot(h * axes.col(i));
  return q;
}

DepthResult trap_depth(const PseudoField& field, const Vec3& minimum, const DepthOptions& options) {
  DepthResult out;
  const double z0 = minimum.z();
  const double top = options.scan_top_factor * z0;
  const int n = options.scan_points;
  const double psi0 = field.psi(minimum);

  std::vector<double> f(n + 1);
  f[0] = psi0;
  int bracket = -1;
  for (int i = 1; i <= n; ++i) {
    f[i] = field.psi(Vec3(minimum.x(), minimum.y(), z0 + (top - z0) * i / n));
    if (i >= 2 && f[i - 1] > f[i - 2] && f[i - 1] >= f[i]) {
      bracket = i - 1;
      break;
    }
  }
  if (bracket < 0) {
    out.diagnostic = "no barrier on the vertical ray up to z = " + csv::format(top) + " m";
    return out;
  }

  Vec3 x(minimum.x(), minimum.y(), z0 + (top - z0) * bracket / n);
  bool converged = false;
  for (int iter = 0; iter < options.max_newton_iterations; ++iter) {
    const double h = derivative_step(x);
    const Vec3 g = field.gradient(x, h);
    const Mat3 hm = field.hessian(x, h);
    Vec3 step = -hm.fullPivLu().solve(g);
    if (!step.allFinite()) break;
    const double limit = 0.1 * z0;
    if (step.norm() > limit) step *= limit / step.norm();
    x += step;
    if (!(x.z() > 0.0)) break;
    if (step.norm() < 1e-8 * z0) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw Error(ErrorKind::saddle, "saddle refinement did not converge from the barrier bracket near " +
                                       format_point(x));
  }
  const SecularModes m = decompose(field.hessian(x, derivative_step(x)));
  const int negative = static_cast<int>(std::count_if(m.curvatures.begin(), m.curvatures.end(),
                                                      [](double v) { return v < 0.0; }));
  if (negative != 1) {
    throw Error(ErrorKind::saddle, "escape point at " + format_point(x) + " has " + std::to_string(negative) +
                                       " negative Hessian eigenvalues (" + eigen_list(m) + ")");
  }
  out.barrier_found = true;
  out.escape_position = x;
  out.depth_ev = std::max(0.0, joule_to_ev(field.psi(x) - psi0));
  return out;
}

TrapAnalysis analyze(const PseudoField& field, const Vec3& guess, const MinimizeOptions& minimize,
                     const DepthOptions& depth) {
  TrapAnalysis a;
  a.minimum_position = find_minimum(field, guess, minimize);
  a.modes = secular_frequencies(field, a.minimum_position);
  a.mathieu_q = mathieu_q(field, a.minimum_position, a.modes.axes);
  a.stable = std::all_of(a.mathieu_q.begin(), a.mathieu_q.end(),
                         [](double q) { return std::abs(q) < mathieu_stability_limit; });
  const auto d = trap_depth(field, a.minimum_position, depth);
  a.depth_ev = d.depth_ev;
  a.escape_position = d.escape_position;
  a.barrier_found = d.barrier_found;
  a.diagnostic = d.diagnostic;
  a.gradient_norm = field.gradient(a.minimum_position, derivative_step(a.minimum_position)).norm();
  return a;
}

std::vector<SweepRow> sweep_depth(const PseudoField& field, const std::vector<double>& amplitudes, const Vec3& guess,
                                  unsigned workers, const MinimizeOptions& minimize, const DepthOptions& depth) {
  for (std::size_t i = 0; i < amplitudes.size(); ++i) {
    if (!(amplitudes[i] > 0.0)) throw Error(ErrorKind::domain, "sweep amplitudes must be positive");
    if (i > 0 && !(amplitudes[i] > amplitudes[i - 1])) {
      throw Error(ErrorKind::domain, "sweep amplitudes must be ascending");
    }
  }
  std::vector<SweepRow> rows(amplitudes.size());
  parallel_for(amplitudes.size(), workers, [&](std::size_t i) {
    rows[i].rf_amplitude = amplitudes[i];
    try {
      rows[i].analysis = analyze(field.with_rf_amplitude(amplitudes[i]), guess, minimize, depth);
    } catch (const Error& e) {
      rows[i].error = std::string(to_string(e.kind())) + ": " + e.what();
    }
  });
  return rows;
}

namespace {

// Mode index to report as x, y and z: the assignment maximizing total axis alignment.
std::array<int, 3> axis_assignment(const Mat3& axes) {
  std::array<int, 3> perm{0, 1, 2};
  std::array<int, 3> best = perm;
  double best_score = -1.0;
  do {
    double score = 0.0;
    for (int c = 0; c < 3; ++c) score += std::abs(axes(c, perm[c]));
    if (score > best_score + 1e-12) {
      best_score = score;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows, const std::string& comment) {
  std::string block = comment;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].analysis) {
      if (!block.empty() && block.back() != '\n') block += '\n';
      block += "row " + std::to_string(i) + " failed: " + rows[i].error;
    }
  }
  if (!block.empty()) csv::write_comment_block(out, block);
  out << "Vrf_V,depth_eV,fx_Hz,fy_Hz,fz_Hz,qmax,esc_x_m,esc_y_m,esc_z_m\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : rows) {
    if (!row.analysis) {
      csv::write_row(out, {row.rf_amplitude, nan, nan, nan, nan, nan, nan, nan, nan});
      continue;
    }
    const auto& a = *row.analysis;
    const auto idx = axis_assignment(a.modes.axes);
    double qmax = 0.0;
    for (double q : a.mathieu_q) qmax = std::max(qmax, std::abs(q));
    const Vec3 esc = a.barrier_found ? a.escape_position : Vec3::Constant(nan);
    csv::write_row(out, {row.rf_amplitude, a.depth_ev, a.modes.frequencies_hz[idx[0]], a.modes.frequencies_hz[idx[1]],
                         a.modes.frequencies_hz[idx[2]], qmax, esc.x(), esc.y(), esc.z()});
  }
}

std::shared_ptr<AnalyticBasis> ideal_quadrupole(double r0, const Vec3& center) {
  if (!(r0 > 0.0)) throw Error(ErrorKind::domain, "quadrupole radius must be positive");
  auto basis = std::make_shared<AnalyticBasis>();
  const double k = 1.0 / (2.0 * r0 * r0);
  basis->add("rf", Role::rf, [=](const Vec3& p) {
    const Vec3 d = p - center;
    return PotentialField{k * (d.x() * d.x() - d.y() * d.y()), Vec3(-2.0 * k * d.x(), 2.0 * k * d.y(), 0.0)};
  });
  basis->add("endcap", Role::dc, [=](const Vec3& p) {
    const Vec3 d = p - center;
    return PotentialField{k * (2.0 * d.z() * d.z() - d.x() * d.x() - d.y() * d.y()),
                          Vec3(2.0 * k * d.x(), 2.0 * k * d.y(), -4.0 * k * d.z())};
  });
  return basis;
}

}  // namespace surftrap
