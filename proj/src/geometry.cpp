#include "surftrap/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace surftrap {

namespace {

using nlohmann::json;

double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Orientation of c relative to segment ab, with a relative tolerance.
int orientation(const Vec2& a, const Vec2& b, const Vec2& c, double tol) {
  const double v = cross(b - a, c - a);
  if (std::abs(v) <= tol) return 0;
  return v > 0 ? 1 : -1;
}

// True when segments ab and cd cross at a point interior to both (no touching, no collinear overlap).
bool proper_crossing(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d, double tol) {
  const int o1 = orientation(a, b, c, tol);
  const int o2 = orientation(a, b, d, tol);
  const int o3 = orientation(c, d, a, tol);
  const int o4 = orientation(c, d, b, tol);
  return o1 * o2 < 0 && o3 * o4 < 0;
}

bool on_segment(const Vec2& p, const Vec2& a, const Vec2& b, double tol) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0.0) return (p - a).norm() <= tol;
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (a + t * ab - p).norm() <= tol;
}

// Any shared point between closed segments, including touching and collinear overlap.
bool segments_touch(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d, double tol) {
  if (proper_crossing(a, b, c, d, tol * tol)) return true;
  return on_segment(c, a, b, tol) || on_segment(d, a, b, tol) || on_segment(a, c, d, tol) ||
         on_segment(b, c, d, tol);
}

bool on_boundary(const Vec2& p, const Polygon& poly, double tol) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    if (on_segment(p, poly[i], poly[(i + 1) % poly.size()], tol)) return true;
  }
  return false;
}

bool strictly_inside(const Vec2& p, const Polygon& poly, double tol) {
  if (on_boundary(p, poly, tol)) return false;
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (p.x() < x) inside = !inside;
    }
  }
  return inside;
}

double polygon_scale(const Polygon& poly) {
  double s = 0.0;
  for (const auto& v : poly) s = std::max({s, std::abs(v.x()), std::abs(v.y())});
  for (std::size_t i = 0; i < poly.size(); ++i) s = std::max(s, (poly[(i + 1) % poly.size()] - poly[i]).norm());
  return s;
}

std::string simple_polygon_problem(const Polygon& poly) {
  if (poly.size() < 3) return "polygon has " + std::to_string(poly.size()) + " vertices (need at least 3)";
  for (const auto& v : poly) {
    if (!std::isfinite(v.x()) || !std::isfinite(v.y())) return "polygon has a non-finite vertex";
  }
  const double tol = 1e-12 * polygon_scale(poly);
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    if ((poly[(i + 1) % n] - poly[i]).norm() <= tol) return "polygon has repeated consecutive vertices";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      const Vec2& c = poly[j];
      const Vec2& d = poly[(j + 1) % n];
      if (adjacent) {
        // Adjacent edges may only share their common vertex.
        const Vec2& shared = (j == i + 1) ? b : a;
        const Vec2& other_end = (j == i + 1) ? d : c;
        const Vec2& own_end = (j == i + 1) ? a : b;
        if (orientation(own_end, shared, other_end, tol * tol) == 0 &&
            (other_end - shared).dot(own_end - shared) > 0) {
          return "polygon folds back on itself";
        }
        continue;
      }
      if (segments_touch(a, b, c, d, tol)) return "polygon is not simple (edges intersect)";
    }
  }
  if (area(poly) <= tol * tol) return "polygon has zero area";
  return {};
}

// Interiors of two simple polygons intersect. Shared edges and touching vertices are allowed.
bool interiors_overlap(const Polygon& p, const Polygon& q) {
  const double scale = std::max(polygon_scale(p), polygon_scale(q));
  const double tol = 1e-12 * scale;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < q.size(); ++j) {
      if (proper_crossing(p[i], p[(i + 1) % p.size()], q[j], q[(j + 1) % q.size()], tol * tol)) return true;
    }
  }
  // Probe points just inside each edge midpoint and the vertices themselves.
  auto probes_inside = [&](const Polygon& a, const Polygon& b) {
    const double sign = signed_area(a) > 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Vec2& u = a[i];
      const Vec2& v = a[(i + 1) % a.size()];
      if (strictly_inside(u, b, tol)) return true;
      const Vec2 mid = 0.5 * (u + v);
      if (strictly_inside(mid, b, tol)) return true;
      const Vec2 edge = v - u;
      const Vec2 inward = sign * Vec2(-edge.y(), edge.x()).normalized();
      const Vec2 probe = mid + 1e-6 * std::min(edge.norm(), scale) * inward;
      if (strictly_inside(probe, b, tol)) return true;
    }
    return false;
  };
  return probes_inside(p, q) || probes_inside(q, p);
}

Polygon rectangle(double x0, double x1, double y0, double y1) {
  return {Vec2(x0, y0), Vec2(x1, y0), Vec2(x1, y1), Vec2(x0, y1)};
}

[[noreturn]] void parse_fail(const std::string& msg) { throw Error(ErrorKind::parse, msg); }

double require_number(const json& j, const char* key, const std::string& context) {
  if (!j.contains(key)) parse_fail(context + ": missing key '" + key + "'");
  if (!j.at(key).is_number()) parse_fail(context + ": key '" + key + "' must be a number");
  return j.at(key).get<double>();
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    parse_fail(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::rf: return "rf";
    case Role::dc: return "dc";
    case Role::ground: return "ground";
  }
  return "dc";
}

Role role_from_string(std::string_view text) {
  if (text == "rf") return Role::rf;
  if (text == "dc") return Role::dc;
  if (text == "ground") return Role::ground;
  parse_fail("unknown electrode role '" + std::string(text) + "'");
}

double signed_area(const Polygon& polygon) {
  double twice = 0.0;
  for (std::size_t i = 0; i < polygon.size(); ++i) {
    twice += cross(polygon[i], polygon[(i + 1) % polygon.size()]);
  }
  return 0.5 * twice;
}

double area(const Polygon& polygon) { return std::abs(signed_area(polygon)); }

double Electrode::total_area() const {
  double a = 0.0;
  for (const auto& p : polygons) a += area(p);
  return a;
}

const Electrode* TrapLayout::find(std::string_view electrode_name) const {
  for (const auto& e : electrodes) {
    if (e.name == electrode_name) return &e;
  }
  return nullptr;
}

std::size_t TrapLayout::index_of(std::string_view electrode_name) const {
  for (std::size_t i = 0; i < electrodes.size(); ++i) {
    if (electrodes[i].name == electrode_name) return i;
  }
  throw Error(ErrorKind::domain, "unknown electrode '" + std::string(electrode_name) + "'");
}

std::vector<Violation> validate(const TrapLayout& layout) {
  std::vector<Violation> out;
  std::set<std::string> names;
  bool has_rf = false;
  for (const auto& e : layout.electrodes) {
    if (e.name.empty()) out.push_back({e.name, "electrode name is empty"});
    if (!names.insert(e.name).second) out.push_back({e.name, "duplicate electrode name"});
    if (e.role == Role::rf) has_rf = true;
    if (e.polygons.empty()) out.push_back({e.name, "electrode has no polygons"});
    for (std::size_t k = 0; k < e.polygons.size(); ++k) {
      const auto& poly = e.polygons[k];
      if (auto problem = simple_polygon_problem(poly); !problem.empty()) {
        out.push_back({e.name, "polygon " + std::to_string(k) + ": " + problem});
        continue;
      }
      for (const auto& v : poly) {
        if (!layout.extent.contains(v)) {
          out.push_back({e.name, "polygon " + std::to_string(k) + " extends outside the layout extent"});
          break;
        }
      }
    }
  }
  if (!has_rf) out.push_back({"", "layout has no rf electrode"});
  if (!(layout.extent.width() > 0.0) || !(layout.extent.height() > 0.0)) {
    out.push_back({"", "layout extent is empty"});
  }

  // Pairwise interior overlap, skipping polygons already reported as malformed.
  struct Item {
    std::size_t electrode;
    std::size_t polygon;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < layout.electrodes.size(); ++i) {
    for (std::size_t k = 0; k < layout.electrodes[i].polygons.size(); ++k) {
      if (simple_polygon_problem(layout.electrodes[i].polygons[k]).empty()) items.push_back({i, k});
    }
  }
  auto bbox_disjoint = [](const Polygon& a, const Polygon& b) {
    auto lo = [](const Polygon& p, int axis) {
      double v = p[0][axis];
      for (const auto& q : p) v = std::min(v, q[axis]);
      return v;
    };
    auto hi = [](const Polygon& p, int axis) {
      double v = p[0][axis];
      for (const auto& q : p) v = std::max(v, q[axis]);
      return v;
    };
    for (int axis = 0; axis < 2; ++axis) {
      if (hi(a, axis) < lo(b, axis) || hi(b, axis) < lo(a, axis)) return true;
    }
    return false;
  };
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      const auto& ea = layout.electrodes[items[a].electrode];
      const auto& eb = layout.electrodes[items[b].electrode];
      const auto& pa = ea.polygons[items[a].polygon];
      const auto& pb = eb.polygons[items[b].polygon];
      if (bbox_disjoint(pa, pb) || !interiors_overlap(pa, pb)) continue;
      if (items[a].electrode == items[b].electrode) {
        out.push_back({ea.name, "polygons " + std::to_string(items[a].polygon) + " and " +
                                    std::to_string(items[b].polygon) + " overlap"});
      } else {
        out.push_back({ea.name + "," + eb.name, "electrodes '" + ea.name + "' and '" + eb.name + "' overlap"});
      }
    }
  }
  return out;
}

TrapLayout layout_from_json(const json& doc) {
  if (!doc.is_object()) parse_fail("geometry document must be an object");
  TrapLayout layout;
  layout.name = doc.value("name", std::string{});
  if (!doc.contains("extent") || !doc.at("extent").is_object()) parse_fail("geometry: missing object 'extent'");
  const auto& ext = doc.at("extent");
  layout.extent = {require_number(ext, "xmin", "extent"), require_number(ext, "xmax", "extent"),
                   require_number(ext, "ymin", "extent"), require_number(ext, "ymax", "extent")};
  if (!doc.contains("electrodes") || !doc.at("electrodes").is_array()) {
    parse_fail("geometry: missing array 'electrodes'");
  }
  for (const auto& je : doc.at("electrodes")) {
    Electrode e;
    if (!je.is_object() || !je.contains("name") || !je.at("name").is_string()) {
      parse_fail("geometry: electrode without a string 'name'");
    }
    e.name = je.at("name").get<std::string>();
    const std::string ctx = "electrode '" + e.name + "'";
    if (!je.contains("role") || !je.at("role").is_string()) parse_fail(ctx + ": missing string 'role'");
    try {
      e.role = role_from_string(je.at("role").get<std::string>());
    } catch (const Error& err) {
      parse_fail(ctx + ": " + err.what());
    }
    if (!je.contains("polygons") || !je.at("polygons").is_array()) parse_fail(ctx + ": missing array 'polygons'");
    for (const auto& jp : je.at("polygons")) {
      if (!jp.is_array()) parse_fail(ctx + ": polygon must be an array of [x, y] pairs");
      Polygon poly;
      for (const auto& jv : jp) {
        if (!jv.is_array() || jv.size() != 2 || !jv[0].is_number() || !jv[1].is_number()) {
          parse_fail(ctx + ": vertex must be an [x, y] number pair");
        }
        poly.emplace_back(jv[0].get<double>(), jv[1].get<double>());
      }
      e.polygons.push_back(std::move(poly));
    }
    layout.electrodes.push_back(std::move(e));
  }
  return layout;
}

json layout_to_json(const TrapLayout& layout) {
  json doc;
  doc["name"] = layout.name;
  doc["extent"] = {{"xmin", layout.extent.xmin},
                   {"xmax", layout.extent.xmax},
                   {"ymin", layout.extent.ymin},
                   {"ymax", layout.extent.ymax}};
  json electrodes = json::array();
  for (const auto& e : layout.electrodes) {
    json polys = json::array();
    for (const auto& poly : e.polygons) {
      json jp = json::array();
      for (const auto& v : poly) jp.push_back({v.x(), v.y()});
      polys.push_back(std::move(jp));
    }
    electrodes.push_back({{"name", e.name}, {"role", std::string(to_string(e.role))}, {"polygons", std::move(polys)}});
  }
  doc["electrodes"] = std::move(electrodes);
  return doc;
}

TrapLayout load_layout(const std::filesystem::path& path) {
  TrapLayout layout = layout_from_json(read_json_file(path));
  if (auto violations = validate(layout); !violations.empty()) {
    std::ostringstream msg;
    msg << path.string() << ": ";
    for (std::size_t i = 0; i < violations.size(); ++i) {
      if (i) msg << "; ";
      if (!violations[i].electrode.empty()) msg << "[" << violations[i].electrode << "] ";
      msg << violations[i].message;
    }
    throw Error(ErrorKind::validation, msg.str());
  }
  return layout;
}

void save_layout(const TrapLayout& layout, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << layout_to_json(layout).dump(2) << "\n";
}

DriveConfig DriveConfig::from_frequency_hz(double amplitude, double frequency_hz, std::map<std::string, double> dc) {
  return {amplitude, 2.0 * constants::pi * frequency_hz, std::move(dc)};
}

DriveConfig normalize_drive(const DriveConfig& drive, const TrapLayout& layout) {
  if (!(drive.rf_angular_frequency > 0.0) || !std::isfinite(drive.rf_angular_frequency)) {
    throw Error(ErrorKind::validation, "drive: rf frequency must be positive");
  }
  if (!(drive.rf_amplitude >= 0.0) || !std::isfinite(drive.rf_amplitude)) {
    throw Error(ErrorKind::validation, "drive: rf amplitude must be non-negative");
  }
  DriveConfig out = drive;
  for (const auto& [name, volts] : drive.dc_voltages) {
    const Electrode* e = layout.find(name);
    if (!e) throw Error(ErrorKind::validation, "drive: unknown electrode '" + name + "'");
    if (e->role != Role::dc) throw Error(ErrorKind::validation, "drive: electrode '" + name + "' is not a dc electrode");
    if (!std::isfinite(volts)) throw Error(ErrorKind::validation, "drive: non-finite voltage on '" + name + "'");
  }
  for (const auto& e : layout.electrodes) {
    if (e.role == Role::dc) out.dc_voltages.try_emplace(e.name, 0.0);
  }
  return out;
}

DriveConfig drive_from_json(const json& doc) {
  if (!doc.is_object()) parse_fail("drive config must be an object");
  DriveConfig drive;
  drive.rf_amplitude = require_number(doc, "rf_amplitude_volts", "drive");
  drive.rf_angular_frequency = 2.0 * constants::pi * require_number(doc, "rf_frequency_hz", "drive");
  if (doc.contains("dc_voltages")) {
    const auto& dc = doc.at("dc_voltages");
    if (!dc.is_object()) parse_fail("drive: 'dc_voltages' must be an object");
    for (auto it = dc.begin(); it != dc.end(); ++it) {
      if (!it.value().is_number()) parse_fail("drive: dc voltage for '" + it.key() + "' must be a number");
      drive.dc_voltages[it.key()] = it.value().get<double>();
    }
  }
  return drive;
}

json drive_to_json(const DriveConfig& drive) {
  json dc = json::object();
  for (const auto& [name, v] : drive.dc_voltages) dc[name] = v;
  return {{"rf_amplitude_volts", drive.rf_amplitude},
          {"rf_frequency_hz", drive.rf_frequency_hz()},
          {"dc_voltages", std::move(dc)}};
}

DriveConfig load_drive(const std::filesystem::path& path) { return drive_from_json(read_json_file(path)); }

Species Species::from_amu(double mass_u, int charge_number) {
  if (!(mass_u > 0.0)) throw Error(ErrorKind::validation, "species: mass must be positive");
  if (charge_number == 0) throw Error(ErrorKind::validation, "species: charge must be non-zero");
  return {mass_u * constants::atomic_mass_unit, charge_number};
}

Species strontium88() { return Species::from_amu(87.9056, 1); }

FiveWireParams default_five_wire_params() {
  FiveWireParams p;
  p.center_width = 0.785e-3;
  p.rf_pitch = 2.0e-3;
  p.gap = 0.1e-3;
  p.rail_length = 5.0e-3;
  p.dc_width = 1.5e-3;
  p.dc_length = 5.0e-3;
  p.dc_segments_per_side = 5;
  p.margin = 0.5e-3;
  return p;
}

TrapLayout five_wire_layout(const FiveWireParams& p, std::string name) {
  const double y_center = 0.5 * p.center_width;
  const double y_rf_in = y_center + p.gap;
  const double y_rf_out = p.rf_pitch - y_rf_in;  // rail centred at rf_pitch / 2
  if (!(y_rf_out > y_rf_in)) throw Error(ErrorKind::validation, "five-wire: center strip too wide for rf pitch");
  const double y_dc_in = y_rf_out + p.gap;
  const double y_dc_out = y_dc_in + p.dc_width;
  const double half_rail = 0.5 * p.rail_length;
  const double half_dc = 0.5 * p.dc_length;

  TrapLayout layout;
  layout.name = std::move(name);
  layout.electrodes.push_back({"center", Role::dc, {rectangle(-half_rail, half_rail, -y_center, y_center)}});
  layout.electrodes.push_back({"rf",
                               Role::rf,
                               {rectangle(-half_rail, half_rail, y_rf_in, y_rf_out),
                                rectangle(-half_rail, half_rail, -y_rf_out, -y_rf_in)}});

  const int n = p.dc_segments_per_side;
  const double seg = (p.dc_length - (n - 1) * p.gap) / n;
  for (int side = 0; side < 2; ++side) {
    for (int k = 0; k < n; ++k) {
      const double x0 = -half_dc + k * (seg + p.gap);
      const double x1 = (k == n - 1) ? half_dc : x0 + seg;
      const std::string ename = std::string(side == 0 ? "dc_p" : "dc_m") + std::to_string(k + 1);
      const Polygon poly = side == 0 ? rectangle(x0, x1, y_dc_in, y_dc_out) : rectangle(x0, x1, -y_dc_out, -y_dc_in);
      layout.electrodes.push_back({ename, Role::dc, {poly}});
    }
  }
  const double xe = std::max(half_rail, half_dc) + p.margin;
  const double ye = y_dc_out + p.margin;
  layout.extent = {-xe, xe, -ye, ye};
  return layout;
}

TrapLayout default_layout() { return five_wire_layout(default_five_wire_params(), "default-five-wire"); }

}  // namespace surftrap
