#include <doctest.h>

#include "corpus.hpp"
#include "fixtures.hpp"
#include "surftrap/csv.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

using namespace surftrap;

namespace {

constexpr double rf_hz = 8e6;
constexpr double rf_period = 1.0 / rf_hz;
const Vec3 quad_center(0.0, 0.0, 1e-3);
constexpr double quad_r0 = 2e-3;

double volts_for_q(double q) {
  const auto sr = strontium88();
  const double omega = 2.0 * constants::pi * rf_hz;
  return q * sr.mass * omega * omega * quad_r0 * quad_r0 / (2.0 * sr.charge_coulomb());
}

PseudoField quadrupole(double q, double endcap = 5.0) {
  return PseudoField(ideal_quadrupole(quad_r0, quad_center),
                     DriveConfig::from_frequency_hz(volts_for_q(q), rf_hz, {{"endcap", endcap}}), strontium88());
}

// Static well Phi = sum k_i d_i^2 / 2 per volt, with k_i set by the requested frequencies.
PseudoField dc_well(const Vec3& freqs_hz) {
  const auto sr = strontium88();
  Vec3 k;
  for (int a = 0; a < 3; ++a) {
    const double w = 2.0 * constants::pi * freqs_hz[a];
    k[a] = sr.mass * w * w / sr.charge_coulomb();
  }
  auto basis = std::make_shared<AnalyticBasis>();
  basis->add("rf", Role::rf, [](const Vec3&) { return PotentialField{0.0, Vec3::Zero()}; });
  basis->add("well", Role::dc, [k](const Vec3& p) {
    const Vec3 d = p - quad_center;
    return PotentialField{0.5 * d.dot(k.asDiagonal() * d), -(k.asDiagonal() * d).eval()};
  });
  return PseudoField(basis, DriveConfig::from_frequency_hz(0.0, rf_hz, {{"well", 1.0}}), sr);
}

TrajectorySetup setup_for(const PseudoField& field, const TrapFields& fields, const Vec3& center) {
  TrajectorySetup s;
  s.field = &field;
  s.fields = &fields;
  s.trap_center = center;
  s.psi_min = field.psi(center);
  return s;
}

State at_rest(const Vec3& p) { return State{p, Vec3::Zero()}; }

}  // namespace

TEST_CASE("timeline multiplier") {
  VoltageTimeline t{2e-6, 10e-6, Recovery::step, 0.0};
  CHECK(t.multiplier(0.0) == 1.0);
  CHECK(t.multiplier(2e-6) == 0.0);
  CHECK(t.multiplier(11.9e-6) == 0.0);
  CHECK(t.multiplier(12e-6) == 1.0);
  CHECK(t.recovered_at() == doctest::Approx(12e-6));

  VoltageTimeline e{0.0, 5e-6, Recovery::exponential, 1e-6};
  CHECK(e.multiplier(5e-6) == 0.0);
  CHECK(e.multiplier(6e-6) == doctest::Approx(1.0 - std::exp(-1.0)));
  CHECK(e.multiplier(5e-6 + 1e-12) < 1e-5);
  CHECK(e.multiplier(e.recovered_at()) == doctest::Approx(1.0 - 1e-6).epsilon(1e-9));

  CHECK(VoltageTimeline::none().multiplier(0.0) == 1.0);
  CHECK_THROWS_AS((VoltageTimeline{0, -1e-6, Recovery::step, 0}).validate(), Error);
  CHECK_THROWS_AS((VoltageTimeline{0, 1e-6, Recovery::exponential, 0}).validate(), Error);
}

TEST_CASE("recovery strings") {
  double tc = 0.0;
  CHECK(parse_recovery("step", tc) == Recovery::step);
  CHECK(parse_recovery("exp:2.5", tc) == Recovery::exponential);
  CHECK(tc == doctest::Approx(2.5e-6));
  VoltageTimeline t{0, 1e-5, Recovery::exponential, tc};
  CHECK(recovery_to_string(t) == "exp:2.5");
  for (const char* bad : {"exp", "exp:", "exp:-1", "linear", "exp:abc"}) {
    try {
      parse_recovery(bad, tc);
      FAIL("accepted " << bad);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::usage);
    }
  }
}

TEST_CASE("integrator config invariants") {
  IntegratorConfig c;
  CHECK_NOTHROW(c.validate());
  c.steps_per_rf_period = 49;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.capture_radius = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("grid interpolation reproduces cubic fields exactly") {
  auto basis = std::make_shared<AnalyticBasis>();
  basis->add("rf", Role::rf, [](const Vec3& p) {
    const double x = p.x() * 1e3, y = p.y() * 1e3, z = p.z() * 1e3;
    return PotentialField{0.0, Vec3(x * x * y - z * z * z, y * z + 2.0 * x * x * x, x * y * z)};
  });
  basis->add("dc", Role::dc, [](const Vec3& p) {
    const double x = p.x() * 1e3, y = p.y() * 1e3, z = p.z() * 1e3;
    return PotentialField{x * y * y + z * z * z - 3.0 * x, Vec3(z * z, -x * x * y, 4.0 * x * y * z)};
  });
  const PseudoField field(basis, DriveConfig::from_frequency_hz(1.0, rf_hz, {{"dc", 1.0}}), strontium88());
  const Box3 box{Vec3(-1e-3, -1e-3, 0.2e-3), Vec3(1e-3, 1e-3, 2e-3)};
  const GridFields grid(field, box, 2.5e-4);
  CHECK(grid.shape() == std::array<int, 3>{9, 9, 9});
  for (const Vec3& p : {Vec3(0.13e-3, -0.71e-3, 0.97e-3), Vec3(-0.99e-3, 0.99e-3, 0.21e-3), Vec3(0.5e-3, 0.0, 1.9e-3)}) {
    const auto direct = field.sample(p);
    const auto interp = grid.at(p);
    CHECK((interp.rf_field - direct.rf_field).norm() < 1e-10);
    CHECK((interp.dc_field - direct.dc_field).norm() < 1e-10);
    CHECK(interp.dc_potential == doctest::Approx(direct.dc_potential).epsilon(1e-10));
  }
}

TEST_CASE("grid save and load round trip") {
  const auto field = quadrupole(0.2);
  const Box3 box{Vec3(-1e-3, -1e-3, 0.2e-3), Vec3(1e-3, 1e-3, 2e-3)};
  const GridFields grid(field, box, 2e-4);
  const auto dir = std::filesystem::temp_directory_path() / "surftrap-grid-test";
  std::filesystem::create_directories(dir);
  grid.save(dir / "g.bin");
  const auto back = GridFields::load(dir / "g.bin");
  CHECK(back.shape() == grid.shape());
  const Vec3 p(0.1e-3, 0.3e-3, 0.8e-3);
  CHECK(back.at(p).rf_field == grid.at(p).rf_field);
  CHECK(back.at(p).dc_potential == grid.at(p).dc_potential);

  const auto a = cached_grid(field, "quad", box, 2e-4, dir);
  const auto b = cached_grid(field, "quad", box, 2e-4, dir);
  CHECK(a->at(p).dc_field == b->at(p).dc_field);
  CHECK(grid_cache_key("quad", field, box, 2e-4) != grid_cache_key("quad", field.with_rf_amplitude(1.0), box, 1e-4));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(GridFields::load(dir / "missing.bin"), Error);
}

TEST_CASE("default grid tracks the solved fields near the trap") {
  const auto field = fixtures::default_field(400.0);
  const auto grid = fixtures::default_grid();
  for (const Vec3& p : {Vec3(0.05e-3, 0.1e-3, 0.9e-3), Vec3(-0.3e-3, 0.2e-3, 1.3e-3), Vec3(0.7e-3, -0.4e-3, 0.6e-3)}) {
    const auto direct = field.sample(p);
    const auto interp = grid->at(p);
    CHECK((interp.rf_field - direct.rf_field).norm() < 1e-3 * direct.rf_field.norm() + 1e-2);
  }
}

TEST_CASE("static dc well conserves energy over 1e4 periods") {
  const auto field = dc_well(Vec3(300e3, 400e3, 500e3));
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  const State s0{quad_center + Vec3(50e-6, -30e-6, 20e-6), Vec3(10.0, 5.0, -8.0)};
  const auto energy = [&](const State& s) {
    return 0.5 * field.species().mass * s.velocity.squaredNorm() + field.psi(s.position);
  };
  const int periods = 10000;
  const State s1 = propagate(s0, 0.0, periods * rf_period, periods * setup.config.steps_per_rf_period, setup);
  CHECK(std::abs(energy(s1) - energy(s0)) <= 1e-6 * energy(s0));
}

TEST_CASE("ion at rest at the minimum stays captured") {
  const auto field = fixtures::default_field(400.0);
  const auto grid = fixtures::default_grid();
  const Vec3 m = find_minimum(field, fixtures::default_guess());
  auto setup = setup_for(field, *grid, m);
  setup.config.max_rf_periods = 100;
  const auto out = integrate(at_rest(m), 0.0, setup);
  CHECK(out.classification == Classification::captured);
  CHECK((out.final_state.position - m).norm() < 5e-6);
}

TEST_CASE("micromotion amplitude follows q over 2 times the secular displacement") {
  const double q = 0.2;
  const auto field = quadrupole(q);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  setup.config.max_rf_periods = 60;
  setup.config.stop_on_capture = false;
  setup.config.record_trace = true;
  setup.config.trace_stride = 1;
  const auto out = integrate(at_rest(quad_center + Vec3(10e-6, 0, 0)), 0.0, setup);
  const int n = setup.config.steps_per_rf_period;
  const auto& tr = out.trace;
  REQUIRE(tr.size() > static_cast<std::size_t>(4 * n));
  // Secular part as the centered one-period moving average of x.
  double max_secular = 0.0, max_micro = 0.0;
  for (std::size_t i = n; i + n < tr.size(); ++i) {
    double avg = 0.0;
    for (int j = -n / 2; j < n / 2; ++j) avg += tr[i + j].state.position.x() - quad_center.x();
    avg /= n;
    max_secular = std::max(max_secular, std::abs(avg));
    max_micro = std::max(max_micro, std::abs(tr[i].state.position.x() - quad_center.x() - avg));
  }
  MESSAGE("micromotion/secular ratio " << max_micro / max_secular);
  // q/2 is the first-order amplitude; the one-period average leaks about 1% of the secular motion
  // and the 2 Omega term adds q^2/32.
  CHECK(max_micro > 0.5 * q / 2.0 * max_secular);
  CHECK(max_micro <= 1.1 * q / 2.0 * max_secular);
}

TEST_CASE("ion with 3x the depth along the escape direction escapes") {
  const auto field = fixtures::default_field(400.0);
  const auto grid = fixtures::default_grid();
  const auto a = analyze(field, fixtures::default_guess());
  REQUIRE(a.barrier_found);
  const Vec3 dir = (a.escape_position - a.minimum_position).normalized();
  auto setup = setup_for(field, *grid, a.minimum_position);
  setup.config.max_rf_periods = 100;
  const auto launch = [&](double multiple) {
    const double v = std::sqrt(2.0 * multiple * ev_to_joule(a.depth_ev) / field.species().mass);
    return integrate(State{a.minimum_position, v * dir}, 0.0, setup);
  };
  const auto fast = launch(3.0);
  CHECK(fast.classification == Classification::escaped);
  CHECK_FALSE(setup.config.escape_box.contains(fast.final_state.position));
  CHECK(launch(0.3).classification == Classification::captured);
}

TEST_CASE("secular energy at the minimum and the saddle") {
  const auto field = fixtures::default_field(400.0);
  const DirectFields fields(field);
  const auto a = analyze(field, fixtures::default_guess());
  const double psi_min = field.psi(a.minimum_position);
  CHECK(secular_energy(at_rest(a.minimum_position), field, fields, psi_min) == 0.0);
  CHECK(secular_energy(at_rest(a.escape_position), field, fields, psi_min) ==
        doctest::Approx(a.depth_ev).epsilon(0.01));
}

TEST_CASE("secular energy is an adiabatic invariant at q = 0.2") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  setup.config.max_rf_periods = 100;
  setup.config.record_secular_energy = true;
  const auto out = integrate(at_rest(quad_center + Vec3(60e-6, -40e-6, 30e-6)), 0.0, setup);
  REQUIRE(out.secular_energy_ev.size() == 99);
  const auto [lo, hi] = std::minmax_element(out.secular_energy_ev.begin(), out.secular_energy_ev.end());
  MESSAGE("secular energy spread " << (*hi - *lo) / *hi);
  CHECK(*hi - *lo <= 0.02 * *hi);

  std::vector<TraceRow> one(1, TraceRow{0.0, at_rest(quad_center)});
  CHECK(averaged_secular_energy(one, field, fields, setup.psi_min) == 0.0);
}

TEST_CASE("spectral frequency of a synthetic quadrupole at q = 0.2 matches the Hessian") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  const auto modes = secular_frequencies(field, quad_center);
  auto setup = setup_for(field, fields, quad_center);
  setup.config.max_rf_periods = 600;
  setup.config.stop_on_capture = false;
  setup.config.record_trace = true;
  setup.config.trace_stride = 10;
  const auto out = integrate(at_rest(quad_center + Vec3(20e-6, 15e-6, 10e-6)), 0.0, setup);
  CHECK(out.classification == Classification::captured);
  const auto f = spectral_secular_frequency(out.trace, modes.axes, rf_period);
  for (int i = 0; i < 3; ++i) CHECK(f[i] == doctest::Approx(modes.frequencies_hz[i]).epsilon(0.02));
}

TEST_CASE("spectral frequency of a static well is exact") {
  const Vec3 freqs(300e3, 400e3, 500e3);
  const auto field = dc_well(freqs);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  setup.config.max_rf_periods = 1024;
  setup.config.stop_on_capture = false;
  setup.config.record_trace = true;
  setup.config.trace_stride = 20;
  const auto out = integrate(at_rest(quad_center + Vec3(20e-6, 15e-6, 10e-6)), 0.0, setup);
  const auto f = spectral_secular_frequency(out.trace, Mat3::Identity(), rf_period);
  for (int i = 0; i < 3; ++i) CHECK(f[i] == doctest::Approx(freqs[i]).epsilon(1e-3));
}

TEST_CASE("damping broadens but does not move the spectral peak") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  const auto modes = secular_frequencies(field, quad_center);
  auto setup = setup_for(field, fields, quad_center);
  setup.config.damping_rate = 0.05 * 2.0 * constants::pi * modes.frequencies_hz[0];
  setup.config.max_rf_periods = 600;
  setup.config.stop_on_capture = false;
  setup.config.record_trace = true;
  setup.config.trace_stride = 10;
  const auto out = integrate(at_rest(quad_center + Vec3(20e-6, 15e-6, 10e-6)), 0.0, setup);
  const auto f = spectral_secular_frequency(out.trace, modes.axes, rf_period);
  for (int i = 0; i < 3; ++i) CHECK(f[i] == doctest::Approx(modes.frequencies_hz[i]).epsilon(0.02));
}

TEST_CASE("spectral analysis rejects short or flat traces") {
  std::vector<TraceRow> short_trace;
  for (int i = 0; i < 1000; ++i) short_trace.push_back({i * rf_period / 10, at_rest(Vec3::Zero())});
  CHECK_THROWS_AS(spectral_secular_frequency(short_trace, Mat3::Identity(), rf_period), Error);
  std::vector<TraceRow> flat;
  for (int i = 0; i < 6000; ++i) flat.push_back({i * rf_period / 10, at_rest(Vec3::Zero())});
  CHECK_THROWS_AS(spectral_secular_frequency(flat, Mat3::Identity(), rf_period), Error);
}

TEST_CASE("forward then backward integration returns to the start") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  setup.rf_phase = 0.7;
  const State s0{quad_center + Vec3(30e-6, -20e-6, 10e-6), Vec3(3.0, 1.0, -2.0)};
  const double t1 = 50 * rf_period;
  const State s1 = propagate(s0, 0.0, t1, 50 * 200, setup);
  const State back = propagate(s1, t1, 0.0, 50 * 200, setup);
  CHECK((back.position - s0.position).norm() <= 1e-6 * (s0.position - quad_center).norm());
  CHECK((back.velocity - s0.velocity).norm() <= 1e-6 * s0.velocity.norm());
}

TEST_CASE("zero-length short is identical to no event") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  auto a = setup_for(field, fields, quad_center);
  a.config.max_rf_periods = 150;
  a.config.record_trace = true;
  auto b = a;
  b.timeline = VoltageTimeline{7 * rf_period, 0.0, Recovery::step, 0.0};
  const State s0{quad_center + Vec3(30e-6, 0, 0), Vec3(0, 2.0, 0)};
  const auto oa = integrate(s0, 0.0, a);
  const auto ob = integrate(s0, 0.0, b);
  CHECK(oa.classification == ob.classification);
  CHECK(oa.final_state.position == ob.final_state.position);
  CHECK(oa.final_state.velocity == ob.final_state.velocity);
  REQUIRE(oa.trace.size() == ob.trace.size());
  for (std::size_t i = 0; i < oa.trace.size(); ++i) CHECK_EQ(oa.trace[i].state.position, ob.trace[i].state.position);
}

TEST_CASE("a short turns the trap off and the ion drifts") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  setup.timeline = VoltageTimeline{0.0, 10e-6, Recovery::step, 0.0};
  setup.config.max_rf_periods = 2;
  const State s0{quad_center + Vec3(30e-6, 0, 0), Vec3(5.0, 0, 0)};
  const auto out = integrate(s0, 0.0, setup);
  CHECK(out.final_state.velocity == s0.velocity);
  CHECK(out.final_state.position.x() == doctest::Approx(s0.position.x() + 5.0 * 2 * rf_period));
  CHECK(out.classification == Classification::undecided);
}

TEST_CASE("damping makes the period-averaged secular energy non-increasing") {
  // Largest relative rise between consecutive samples.
  const auto max_rise = [](const PseudoField& field, double gamma) {
    const DirectFields fields(field);
    auto setup = setup_for(field, fields, quad_center);
    setup.config.damping_rate = gamma;
    setup.config.max_rf_periods = 200;
    setup.config.stop_on_capture = false;
    setup.config.record_secular_energy = true;
    const auto out = integrate(at_rest(quad_center + Vec3(60e-6, -40e-6, 30e-6)), 0.0, setup);
    const auto& e = out.secular_energy_ev;
    REQUIRE(e.size() == 199);
    CHECK(e.back() < 0.8 * e.front());
    double rise = -1.0;
    for (std::size_t i = 1; i < e.size(); ++i) rise = std::max(rise, (e[i] - e[i - 1]) / e[i - 1]);
    return rise;
  };
  // Static well: the averaged energy is exact, so it never rises.
  CHECK(max_rise(dc_well(Vec3(300e3, 400e3, 500e3)), 2e4) <= 0.0);
  // rf well: the secular energy itself ripples by under 1% at q = 0.2 without damping; rises stay
  // inside that ripple.
  CHECK(max_rise(quadrupole(0.2), 2e4) < 0.01);
}

TEST_CASE("starting outside the box is an immediate escape and blow-ups are reported") {
  const auto field = quadrupole(0.2);
  const DirectFields fields(field);
  auto setup = setup_for(field, fields, quad_center);
  const auto out = integrate(at_rest(Vec3(0, 0, 10e-3)), 0.0, setup);
  CHECK(out.classification == Classification::escaped);

  auto basis = std::make_shared<AnalyticBasis>();
  basis->add("rf", Role::rf, [](const Vec3&) { return PotentialField{0.0, Vec3::Zero()}; });
  basis->add("bad", Role::dc, [](const Vec3&) {
    return PotentialField{0.0, Vec3(std::nan(""), 0.0, 0.0)};
  });
  const PseudoField bad(basis, DriveConfig::from_frequency_hz(0.0, rf_hz, {{"bad", 1.0}}), strontium88());
  const DirectFields bad_fields(bad);
  auto bad_setup = setup_for(bad, bad_fields, quad_center);
  try {
    integrate(at_rest(quad_center), 0.0, bad_setup);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::integrator);
    CHECK(std::string(e.what()).find("last finite state") != std::string::npos);
  }
}

TEST_CASE("step halving rarely changes classifications") {
  const auto report = fixtures::step_halving();
  MESSAGE("flips " << report.flips << " of " << report.trajectories << ", max energy change "
                   << report.max_energy_change << " over " << report.compared_energies);
  CHECK(report.flips * 100 < report.trajectories);
  CHECK(report.compared_energies > 10);
  CHECK(report.max_energy_change < 0.01);
}

TEST_CASE("trace csv round trip") {
  std::vector<TraceRow> tr{{0.0, State{Vec3(1e-3, 2e-3, 3e-3), Vec3(1, 2, 3)}},
                           {1.25e-7, State{Vec3(0.1 / 3, -2e-3, 1e-9), Vec3(-4, 5.5, 6e3)}}};
  std::ostringstream out;
  write_trace_csv(out, tr, "trace of a test");
  std::istringstream in(out.str());
  const auto table = csv::read(in);
  CHECK(table.comments.at(0) == "trace of a test");
  REQUIRE(table.rows.size() == 2);
  CHECK(table.header.at(0) == "t_s");
  CHECK(table.number(1, table.column("x_m")) == tr[1].state.position.x());
  CHECK(table.number(1, table.column("vz_mps")) == tr[1].state.velocity.z());
}
