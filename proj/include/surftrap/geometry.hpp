#pragma once

#include "surftrap/core.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace surftrap {

enum class Role { rf, dc, ground };

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);

/// Simple planar polygon in the z = 0 plane, vertices in meters. Orientation is not significant.
using Polygon = std::vector<Vec2>;

/// Signed shoelace area (positive for counter-clockwise vertex order).
double signed_area(const Polygon& polygon);
double area(const Polygon& polygon);

struct Electrode {
  std::string name;
  Role role = Role::dc;
  std::vector<Polygon> polygons;

  double total_area() const;
};

struct Extent {
  double xmin = 0.0;
  double xmax = 0.0;
  double ymin = 0.0;
  double ymax = 0.0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  bool contains(const Vec2& p) const { return p.x() >= xmin && p.x() <= xmax && p.y() >= ymin && p.y() <= ymax; }
};

struct TrapLayout {
  std::string name;
  Extent extent;
  std::vector<Electrode> electrodes;

  const Electrode* find(std::string_view electrode_name) const;
  std::size_t index_of(std::string_view electrode_name) const;  // throws Error(domain) if absent
};

struct Violation {
  std::string electrode;  // offending electrode(s), comma separated
  std::string message;
};

/// Checks every layout invariant. Violations are data, never thrown.
std::vector<Violation> validate(const TrapLayout& layout);

TrapLayout layout_from_json(const nlohmann::json& doc);
nlohmann::json layout_to_json(const TrapLayout& layout);

/// Parses and validates a geometry file. Throws Error(parse) or Error(validation).
TrapLayout load_layout(const std::filesystem::path& path);
void save_layout(const TrapLayout& layout, const std::filesystem::path& path);

/// RF drive and static electrode voltages.
struct DriveConfig {
  double rf_amplitude = 0.0;          // V, zero-to-peak
  double rf_angular_frequency = 0.0;  // rad/s
  std::map<std::string, double> dc_voltages;

  static DriveConfig from_frequency_hz(double amplitude, double frequency_hz,
                                       std::map<std::string, double> dc = {});
  double rf_frequency_hz() const { return rf_angular_frequency / (2.0 * constants::pi); }
};

/// Fills missing dc entries with 0 V and checks the drive against the layout.
/// Throws Error(validation) for unknown or non-dc electrode names and bad rf parameters.
DriveConfig normalize_drive(const DriveConfig& drive, const TrapLayout& layout);

DriveConfig drive_from_json(const nlohmann::json& doc);
nlohmann::json drive_to_json(const DriveConfig& drive);
DriveConfig load_drive(const std::filesystem::path& path);

struct Species {
  double mass = 0.0;  // kg
  int charge = 1;     // multiples of e

  static Species from_amu(double mass_u, int charge_number);
  double charge_coulomb() const { return charge * constants::elementary_charge; }
};

/// 88Sr+ (87.9056 u, +1 e).
Species strontium88();

/// Parameters of the five-wire surface trap. Long axis is x; the layout is mirror
/// symmetric about y = 0.
struct FiveWireParams {
  double center_width = 0.0;    // center strip (rf ground, optional dc offset)
  double rf_pitch = 0.0;        // center-to-center separation of the two rf rails
  double gap = 0.0;             // vacuum gap between neighbouring electrodes
  double rail_length = 0.0;     // x extent of center strip and rf rails
  double dc_width = 0.0;        // y extent of each dc side segment
  double dc_length = 0.0;       // total x extent of each row of dc segments
  int dc_segments_per_side = 0;
  double margin = 0.0;          // extent padding beyond the outermost electrode
};

/// Calibrated parameters of the bundled layout (see data/default_layout.json).
FiveWireParams default_five_wire_params();

TrapLayout five_wire_layout(const FiveWireParams& params, std::string name = "five-wire");

/// The bundled surface trap: center strip, two rf rails 2 mm apart center-to-center, and
/// segmented dc electrodes on both sides, with widths calibrated for a 0.8 mm rf-null height.
TrapLayout default_layout();

}  // namespace surftrap
