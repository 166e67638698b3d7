#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace surftrap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

namespace constants {
  inline constexpr double pi = 3.14159265358979323846;
  inline constexpr double elementary_charge = 1.602176634e-19;  // C
  inline constexpr double epsilon0 = 8.8541878128e-12;          // F/m
  inline constexpr double coulomb_k = 1.0 / (4.0 * pi * epsilon0);
  inline constexpr double atomic_mass_unit = 1.66053906660e-27;  // kg
  inline constexpr double boltzmann = 1.380649e-23;              // J/K
}  // namespace constants

inline double joule_to_ev(double joules) { return joules / constants::elementary_charge; }
inline double ev_to_joule(double ev) { return ev * constants::elementary_charge; }

/// Failure categories. The CLI prints the category name as the first token of its error line.
enum class ErrorKind {
  parse,
  validation,
  mesh,
  solver,
  convergence,
  saddle,
  integrator,
  io,
  usage,
  domain,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Axis-aligned box.
struct Box3 {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();

  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
  Vec3 size() const { return hi - lo; }
  Vec3 center() const { return 0.5 * (lo + hi); }
};

/// 64-bit FNV-1a of the bytes, as 16 hex digits. Used for cache keys.
std::string fnv1a_hex(std::string_view data);

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is visited exactly once, so
/// results written to slot i are independent of the worker count.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body);

/// Worker count used when the caller passes 0.
unsigned default_workers();

}  // namespace surftrap
