#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Geometry>

#include "festa/errors.hpp"
#include "festa/geometry.hpp"
#include "festa/kv.hpp"
#include "festa/random.hpp"

namespace festa {

enum class Primitive : int { sphere = 0, box = 1, cylinder = 2, torus = 3, cone = 4 };
inline constexpr int kPrimitiveCount = 5;

inline const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::sphere: return "sphere";
    case Primitive::box: return "box";
    case Primitive::cylinder: return "cylinder";
    case Primitive::torus: return "torus";
    case Primitive::cone: return "cone";
  }
  return "?";
}

inline std::optional<Primitive> primitive_from_string(std::string_view s) {
  for (int i = 0; i < kPrimitiveCount; ++i) {
    if (s == to_string(static_cast<Primitive>(i))) return static_cast<Primitive>(i);
  }
  return std::nullopt;
}

using Mat3 = Eigen::Matrix3d;

struct SceneSpec {
  std::size_t min_objects = 3;
  std::size_t max_objects = 6;
  double container_radius = 3.0;
  double object_radius = 1.2;
  double min_separation = 2.0;
  std::size_t points = 4096;

  void validate() const {
    if (min_objects == 0 || max_objects < min_objects) throw InvalidArgument("scene spec: bad object count range");
    if (!(object_radius > 0.0)) throw InvalidArgument("scene spec: object radius must be positive");
    if (!(min_separation > 0.0)) throw InvalidArgument("scene spec: separation must be positive");
    if (!(container_radius >= 0.0)) throw InvalidArgument("scene spec: container radius must be non-negative");
    if (points == 0) throw InvalidArgument("scene spec: points must be positive");
  }

  // Every generated point lies within this distance of the origin.
  double bound() const { return container_radius + object_radius; }

  bool apply(const KeyValue& kv) {
    if (kv.key == "min_objects") min_objects = parse_unsigned(kv);
    else if (kv.key == "max_objects") max_objects = parse_unsigned(kv);
    else if (kv.key == "container_radius") container_radius = parse_real(kv);
    else if (kv.key == "object_radius") object_radius = parse_real(kv);
    else if (kv.key == "min_separation") min_separation = parse_real(kv);
    else if (kv.key == "scene_points") points = parse_unsigned(kv);
    else return false;
    return true;
  }

  std::string echo() const {
    return "min_objects=" + std::to_string(min_objects) + " max_objects=" + std::to_string(max_objects) +
           " container_radius=" + format_real(container_radius) + " object_radius=" + format_real(object_radius) +
           " min_separation=" + format_real(min_separation) + " scene_points=" + std::to_string(points);
  }
};

struct SceneObject {
  Primitive kind = Primitive::sphere;
  Vec3 center = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  double radius = 1.0;
};

struct Scene {
  PointCloud cloud;  // labels are object ids
  std::vector<SceneObject> objects;
  SceneSpec spec;
  std::uint64_t seed = 0;

  // Primitive kind of every point.
  std::vector<int> kind_labels() const {
    std::vector<int> out;
    out.reserve(cloud.size());
    for (int id : *cloud.labels) out.push_back(static_cast<int>(objects.at(static_cast<std::size_t>(id)).kind));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Surface sampling. Every primitive fits exactly inside a ball of radius R.

namespace detail {

inline Vec3 unit_vector(Rng& rng) {
  Vec3 v(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  double n = v.norm();
  while (n < 1e-12) {
    v = Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    n = v.norm();
  }
  return v / n;
}

inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline Mat3 axis_angle(const Vec3& axis, double angle) { return Eigen::AngleAxisd(angle, axis).toRotationMatrix(); }

inline Vec3 sample_sphere(double r, Rng& rng) { return r * unit_vector(rng); }

inline Vec3 sample_box(double r, Rng& rng) {
  const double a = r / std::sqrt(3.0);
  const auto face = uniform_index(rng, 6);
  const double u = uniform(rng, -a, a);
  const double v = uniform(rng, -a, a);
  const double s = face % 2 == 0 ? a : -a;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

inline Vec3 sample_cylinder(double r, Rng& rng) {
  const double rho = r / std::sqrt(2.0);
  const double half = rho;
  const double side = 2.0 * std::numbers::pi * rho * 2.0 * half;
  const double caps = 2.0 * std::numbers::pi * rho * rho;
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (uniform01(rng) * (side + caps) < side) {
    return {rho * std::cos(phi), rho * std::sin(phi), uniform(rng, -half, half)};
  }
  const double rr = rho * std::sqrt(uniform01(rng));
  return {rr * std::cos(phi), rr * std::sin(phi), uniform01(rng) < 0.5 ? half : -half};
}

inline Vec3 sample_torus(double r, Rng& rng) {
  const double a = 0.7 * r, b = 0.3 * r;
  double theta = 0.0;
  // Area element is proportional to (a + b cos theta).
  do {
    theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  } while (uniform01(rng) * (a + b) > a + b * std::cos(theta));
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double w = a + b * std::cos(theta);
  return {w * std::cos(phi), w * std::sin(phi), b * std::sin(theta)};
}

inline Vec3 sample_cone(double r, Rng& rng) {
  const double rho = r * std::sqrt(3.0) / 2.0;
  const double apex = r, base = -0.5 * r;
  const double h = apex - base;
  const double lateral = std::numbers::pi * rho * std::sqrt(rho * rho + h * h);
  const double disc = std::numbers::pi * rho * rho;
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (uniform01(rng) * (lateral + disc) < lateral) {
    const double t = std::sqrt(uniform01(rng));
    return {t * rho * std::cos(phi), t * rho * std::sin(phi), apex - t * h};
  }
  const double rr = rho * std::sqrt(uniform01(rng));
  return {rr * std::cos(phi), rr * std::sin(phi), base};
}

inline double surface_area(Primitive p, double r) {
  constexpr double pi = std::numbers::pi;
  switch (p) {
    case Primitive::sphere: return 4.0 * pi * r * r;
    case Primitive::box: {
      const double a = 2.0 * r / std::sqrt(3.0);
      return 6.0 * a * a;
    }
    case Primitive::cylinder: {
      const double rho = r / std::sqrt(2.0);
      return 2.0 * pi * rho * 2.0 * rho + 2.0 * pi * rho * rho;
    }
    case Primitive::torus: return 4.0 * pi * pi * (0.7 * r) * (0.3 * r);
    case Primitive::cone: {
      const double rho = r * std::sqrt(3.0) / 2.0, h = 1.5 * r;
      return pi * rho * std::sqrt(rho * rho + h * h) + pi * rho * rho;
    }
  }
  return 0.0;
}

}  // namespace detail

/// A point on the object's surface in world coordinates.
inline Vec3 sample_surface(const SceneObject& o, Rng& rng) {
  Vec3 local = Vec3::Zero();
  switch (o.kind) {
    case Primitive::sphere: local = detail::sample_sphere(o.radius, rng); break;
    case Primitive::box: local = detail::sample_box(o.radius, rng); break;
    case Primitive::cylinder: local = detail::sample_cylinder(o.radius, rng); break;
    case Primitive::torus: local = detail::sample_torus(o.radius, rng); break;
    case Primitive::cone: local = detail::sample_cone(o.radius, rng); break;
  }
  return o.center + o.rotation * local;
}

/// `count` points spread over the objects in proportion to surface area.
inline PointCloud sample_objects(const std::vector<SceneObject>& objects, std::size_t count, Rng& rng) {
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& o : objects) {
    total += detail::surface_area(o.kind, o.radius);
    cumulative.push_back(total);
  }
  PointCloud c;
  c.points.reserve(count);
  c.labels.emplace();
  c.labels->reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double u = uniform01(rng) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const auto id = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                                       static_cast<std::ptrdiff_t>(objects.size()) - 1));
    c.points.push_back(sample_surface(objects[id], rng));
    c.labels->push_back(static_cast<int>(id));
  }
  return c;
}

inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(split_seed(seed, 0x5ce));
  const auto count = spec.min_objects + uniform_index(rng, spec.max_objects - spec.min_objects + 1);
  constexpr int kTriesPerObject = 1000;
  constexpr int kRestarts = 50;
  std::vector<Vec3> centers;
  for (int attempt = 0; attempt < kRestarts && centers.size() < count; ++attempt) {
    centers.clear();
    for (std::size_t o = 0; o < count; ++o) {
      bool placed = false;
      for (int t = 0; t < kTriesPerObject && !placed; ++t) {
        const Vec3 c = spec.container_radius * std::cbrt(uniform01(rng)) * detail::unit_vector(rng);
        placed = std::all_of(centers.begin(), centers.end(),
                             [&](const Vec3& q) { return (c - q).norm() >= spec.min_separation; });
        if (placed) centers.push_back(c);
      }
      if (!placed) break;
    }
  }
  if (centers.size() < count) {
    throw GenerationError("cannot place " + std::to_string(count) + " object centers at separation >= " +
                          format_real(spec.min_separation) + " inside container radius " +
                          format_real(spec.container_radius));
  }
  Scene s;
  s.spec = spec;
  s.seed = seed;
  for (const auto& c : centers) {
    SceneObject o;
    o.kind = static_cast<Primitive>(uniform_index(rng, kPrimitiveCount));
    o.center = c;
    o.rotation = detail::random_rotation(rng);
    o.radius = spec.object_radius;
    s.objects.push_back(o);
  }
  s.cloud = sample_objects(s.objects, spec.points, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Flow pairs

struct PairOptions {
  double motion_scale = 0.5;
  double max_rotation_deg = 30.0;
  double dropout = 0.1;
};

/// Rigid motion of one object: p -> rotation (p - center) + center + translation.
struct ObjectMotion {
  Vec3 center = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  bool dropped = false;

  Vec3 apply(const Vec3& p) const { return rotation * (p - center) + center + translation; }
};

struct ScenePair {
  PointCloud cloud1, cloud2;
  std::vector<Vec3> gt_flow;
  std::vector<std::uint8_t> gt_mask;
  std::vector<ObjectMotion> transforms;
  std::vector<Primitive> kinds;
  std::uint64_t seed = 0;
  std::string spec;  // free-form echo of the generating settings
};

/// Builds a pair from explicit motions; cloud2 is an independent resampling.
inline ScenePair make_pair(const Scene& scene, const std::vector<ObjectMotion>& motions, std::uint64_t seed) {
  if (motions.size() != scene.objects.size()) {
    throw InvalidArgument("make_pair: " + std::to_string(motions.size()) + " motions for " +
                          std::to_string(scene.objects.size()) + " objects");
  }
  if (!scene.cloud.has_labels()) throw InvalidArgument("make_pair: scene cloud is unlabeled");
  const double bound = scene.spec.bound();
  ScenePair p;
  p.seed = seed;
  p.transforms = motions;
  p.cloud1 = scene.cloud;
  for (const auto& o : scene.objects) p.kinds.push_back(o.kind);
  const auto& labels = *scene.cloud.labels;
  p.gt_flow.reserve(scene.cloud.size());
  p.gt_mask.reserve(scene.cloud.size());
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    const ObjectMotion& m = motions.at(static_cast<std::size_t>(labels[i]));
    const Vec3& a = scene.cloud.points[i];
    const Vec3 b = m.apply(a);
    p.gt_flow.push_back(b - a);
    p.gt_mask.push_back(!m.dropped && b.norm() <= bound ? 1 : 0);
  }
  Rng rng(split_seed(seed, 0xc2));
  PointCloud fresh = sample_objects(scene.objects, scene.cloud.size(), rng);
  p.cloud2.labels.emplace();
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    const int id = (*fresh.labels)[i];
    const ObjectMotion& m = motions[static_cast<std::size_t>(id)];
    if (m.dropped) continue;
    const Vec3 q = m.apply(fresh.points[i]);
    if (q.norm() > bound) continue;
    p.cloud2.points.push_back(q);
    p.cloud2.labels->push_back(id);
  }
  if (p.cloud2.empty()) throw GenerationError("second cloud is empty after dropout and container removal");
  return p;
}

inline std::vector<ObjectMotion> random_motions(const Scene& scene, const PairOptions& opt, Rng& rng) {
  if (!(opt.motion_scale >= 0.0)) throw InvalidArgument("generate_pair: motion scale must be non-negative");
  if (!(opt.dropout >= 0.0 && opt.dropout <= 1.0)) throw InvalidArgument("generate_pair: dropout must be in [0, 1]");
  const double max_angle = opt.max_rotation_deg * std::numbers::pi / 180.0 * std::min(1.0, opt.motion_scale);
  std::vector<ObjectMotion> out;
  for (const auto& o : scene.objects) {
    ObjectMotion m;
    m.center = o.center;
    m.translation = uniform(rng, 0.0, opt.motion_scale) * detail::unit_vector(rng);
    m.rotation = detail::axis_angle(detail::unit_vector(rng), uniform(rng, 0.0, max_angle));
    m.dropped = uniform01(rng) < opt.dropout;
    out.push_back(m);
  }
  return out;
}

inline ScenePair generate_pair(const Scene& scene, const PairOptions& opt, std::uint64_t seed) {
  Rng rng(split_seed(seed, 0x9a1));
  ScenePair p = make_pair(scene, random_motions(scene, opt, rng), seed);
  p.spec = scene.spec.echo() + " motion_scale=" + format_real(opt.motion_scale) +
           " max_rotation_deg=" + format_real(opt.max_rotation_deg) + " dropout=" + format_real(opt.dropout);
  return p;
}

inline ScenePair generate_pair(const Scene& scene, double motion_scale, std::uint64_t seed) {
  PairOptions opt;
  opt.motion_scale = motion_scale;
  return generate_pair(scene, opt, seed);
}

// ---------------------------------------------------------------------------
// FPCP/1 pair files
//
//   FPCP/1
//   seed <u64>
//   spec <free text>
//   counts cloud1=<N> cloud2=<M> objects=<K>
//   object <id> <kind> <dropped 0|1> <center xyz> <rotation 9, row-major> <translation xyz>   (K lines)
//   cloud1 <N>      then N lines: x y z label
//   cloud2 <M>      then M lines: x y z label
//   flow <N>        then N lines: dx dy dz
//   mask <N>        then N lines: 0|1
//   end
//
// Reals are written with 9 significant digits.

namespace detail {

inline void put_reals(std::ostream& os, std::initializer_list<double> v) {
  char buf[32];
  bool first = true;
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%.9g", x);
    if (!first) os << ' ';
    os << buf;
    first = false;
  }
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  // Next line, or nullopt at end of input.
  std::optional<std::string> next() {
    std::string s;
    if (!std::getline(in_, s)) return std::nullopt;
    ++line_;
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
  }

  std::string expect(const std::string& what) {
    auto s = next();
    if (!s) throw FormatError(line_ + 1, "unexpected end of file, expected " + what);
    return *s;
  }

  std::size_t line() const noexcept { return line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
};

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string t;
  while (ss >> t) out.push_back(t);
  return out;
}

inline double real_at(const std::string& tok, std::size_t line) {
  KeyValue kv{"value", tok, line};
  const double v = parse_real(kv);
  if (!std::isfinite(v)) throw FormatError(line, "non-finite value '" + tok + "'");
  return v;
}

inline std::uint64_t uint_at(const std::string& tok, std::size_t line) { return parse_unsigned({"value", tok, line}); }

// "name <count>" section header.
inline std::size_t section(LineReader& r, const std::string& name) {
  auto s = r.next();
  if (!s) throw FormatError(r.line() + 1, "missing section '" + name + "'");
  const auto tok = split_ws(*s);
  if (tok.size() != 2 || tok[0] != name) {
    throw FormatError(r.line(), "expected section '" + name + " <count>', got '" + *s + "'");
  }
  return static_cast<std::size_t>(uint_at(tok[1], r.line()));
}

inline void check_count(LineReader& r, const std::string& name, std::size_t got, const std::string& ref,
                        std::size_t want) {
  if (got != want) {
    throw FormatError(r.line(), name + " count " + std::to_string(got) + " does not match " + ref + " count " +
                                    std::to_string(want));
  }
}

inline std::vector<std::string> record(LineReader& r, const std::string& section, std::size_t fields,
                                       std::size_t index, std::size_t total) {
  auto s = r.next();
  if (!s) {
    throw FormatError(r.line() + 1, "truncated section '" + section + "': expected " + std::to_string(total) +
                                        " records, got " + std::to_string(index));
  }
  auto tok = split_ws(*s);
  if (tok.size() != fields) {
    throw FormatError(r.line(), section + " record has " + std::to_string(tok.size()) + " fields, expected " +
                                    std::to_string(fields));
  }
  return tok;
}

inline void write_labeled(std::ostream& os, const char* name, const PointCloud& c) {
  os << name << ' ' << c.size() << '\n';
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.points[i];
    put_reals(os, {p.x(), p.y(), p.z()});
    os << ' ' << (c.labels ? (*c.labels)[i] : 0) << '\n';
  }
}

inline PointCloud read_labeled(LineReader& r, const std::string& name, std::size_t n, std::size_t n_objects) {
  PointCloud c;
  c.labels.emplace();
  c.points.reserve(n);
  c.labels->reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto tok = record(r, name, 4, i, n);
    c.points.emplace_back(real_at(tok[0], r.line()), real_at(tok[1], r.line()), real_at(tok[2], r.line()));
    const auto label = uint_at(tok[3], r.line());
    if (n_objects != 0 && label >= n_objects) {
      throw FormatError(r.line(), "label " + std::to_string(label) + " out of range for " +
                                      std::to_string(n_objects) + " objects");
    }
    c.labels->push_back(static_cast<int>(label));
  }
  return c;
}

inline void expect_magic(LineReader& r, const std::string& family) {
  auto s = r.next();
  if (!s) throw FormatError(1, "empty file, expected " + family + "/1");
  if (s->rfind(family + "/", 0) != 0) throw FormatError(1, "bad magic '" + *s + "', expected " + family + "/1");
  if (*s != family + "/1") throw FormatError(1, "unsupported version '" + *s + "', expected " + family + "/1");
}

inline std::string keyed_line(LineReader& r, const std::string& key) {
  const std::string s = r.expect("'" + key + "'");
  if (s.rfind(key + " ", 0) != 0 && s != key) {
    throw FormatError(r.line(), "expected '" + key + "' line, got '" + s + "'");
  }
  return s.size() > key.size() ? s.substr(key.size() + 1) : std::string();
}

inline void expect_end(LineReader& r) {
  auto s = r.next();
  if (!s) throw FormatError(r.line() + 1, "missing section 'end'");
  if (trim(*s) != "end") throw FormatError(r.line(), "expected 'end', got '" + *s + "'");
}

}  // namespace detail

inline void write_pair(std::ostream& os, const ScenePair& p) {
  os << "FPCP/1\n";
  os << "seed " << p.seed << '\n';
  os << "spec " << p.spec << '\n';
  os << "counts cloud1=" << p.cloud1.size() << " cloud2=" << p.cloud2.size() << " objects=" << p.transforms.size()
     << '\n';
  for (std::size_t i = 0; i < p.transforms.size(); ++i) {
    const auto& m = p.transforms[i];
    const Primitive kind = i < p.kinds.size() ? p.kinds[i] : Primitive::sphere;
    os << "object " << i << ' ' << to_string(kind) << ' ' << (m.dropped ? 1 : 0) << ' ';
    const auto& r = m.rotation;
    detail::put_reals(os, {m.center.x(), m.center.y(), m.center.z(), r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1),
                           r(1, 2), r(2, 0), r(2, 1), r(2, 2), m.translation.x(), m.translation.y(),
                           m.translation.z()});
    os << '\n';
  }
  detail::write_labeled(os, "cloud1", p.cloud1);
  detail::write_labeled(os, "cloud2", p.cloud2);
  os << "flow " << p.gt_flow.size() << '\n';
  for (const auto& f : p.gt_flow) {
    detail::put_reals(os, {f.x(), f.y(), f.z()});
    os << '\n';
  }
  os << "mask " << p.gt_mask.size() << '\n';
  for (auto m : p.gt_mask) os << (m ? 1 : 0) << '\n';
  os << "end\n";
}

inline ScenePair read_pair(std::istream& in) {
  detail::LineReader r(in);
  detail::expect_magic(r, "FPCP");
  ScenePair p;
  const std::string seed = detail::keyed_line(r, "seed");
  p.seed = detail::uint_at(seed, r.line());
  p.spec = detail::keyed_line(r, "spec");

  const auto counts = detail::split_ws(detail::keyed_line(r, "counts"));
  std::size_t n1 = 0, n2 = 0, k = 0;
  if (counts.size() != 3) throw FormatError(r.line(), "counts line needs cloud1=, cloud2= and objects=");
  for (const auto& tok : counts) {
    const auto eq = tok.find('=');
    const std::string key = tok.substr(0, eq);
    const std::size_t v = eq == std::string::npos ? 0 : detail::uint_at(tok.substr(eq + 1), r.line());
    if (key == "cloud1") n1 = v;
    else if (key == "cloud2") n2 = v;
    else if (key == "objects") k = v;
    else throw FormatError(r.line(), "unknown count '" + tok + "'");
  }
  for (std::size_t i = 0; i < k; ++i) {
    auto tok = detail::record(r, "object", 19, i, k);
    if (tok[0] != "object") throw FormatError(r.line(), "expected object record, got '" + tok[0] + "'");
    if (detail::uint_at(tok[1], r.line()) != i) throw FormatError(r.line(), "object ids must be consecutive");
    auto kind = primitive_from_string(tok[2]);
    if (!kind) throw FormatError(r.line(), "unknown primitive '" + tok[2] + "'");
    ObjectMotion m;
    const auto dropped = detail::uint_at(tok[3], r.line());
    if (dropped > 1) throw FormatError(r.line(), "dropped flag must be 0 or 1");
    m.dropped = dropped == 1;
    double v[15];
    for (int j = 0; j < 15; ++j) v[j] = detail::real_at(tok[4 + static_cast<std::size_t>(j)], r.line());
    m.center = Vec3(v[0], v[1], v[2]);
    m.rotation << v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11];
    m.translation = Vec3(v[12], v[13], v[14]);
    p.transforms.push_back(m);
    p.kinds.push_back(*kind);
  }
  std::size_t got = detail::section(r, "cloud1");
  detail::check_count(r, "cloud1", got, "header cloud1", n1);
  p.cloud1 = detail::read_labeled(r, "cloud1", n1, k);
  got = detail::section(r, "cloud2");
  detail::check_count(r, "cloud2", got, "header cloud2", n2);
  p.cloud2 = detail::read_labeled(r, "cloud2", n2, k);
  got = detail::section(r, "flow");
  detail::check_count(r, "flow", got, "cloud1", n1);
  for (std::size_t i = 0; i < n1; ++i) {
    auto tok = detail::record(r, "flow", 3, i, n1);
    p.gt_flow.emplace_back(detail::real_at(tok[0], r.line()), detail::real_at(tok[1], r.line()),
                           detail::real_at(tok[2], r.line()));
  }
  got = detail::section(r, "mask");
  detail::check_count(r, "mask", got, "cloud1", n1);
  for (std::size_t i = 0; i < n1; ++i) {
    auto tok = detail::record(r, "mask", 1, i, n1);
    if (tok[0] != "0" && tok[0] != "1") throw FormatError(r.line(), "mask value must be 0 or 1, got '" + tok[0] + "'");
    p.gt_mask.push_back(tok[0] == "1" ? 1 : 0);
  }
  detail::expect_end(r);
  return p;
}

inline void save_pair(const std::string& path, const ScenePair& p) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_pair(os, p);
  if (!os) throw Error("write failed: " + path);
}

inline ScenePair load_pair(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_pair(in);
}

// ---------------------------------------------------------------------------
// FPCS/1 scene files
//
//   FPCS/1
//   seed <u64>
//   spec <SceneSpec echo>
//   objects <K>     then K lines: <kind> <radius> <center xyz> <rotation 9>
//   points <N>      then N lines: x y z label
//   end

inline void write_scene(std::ostream& os, const Scene& s) {
  os << "FPCS/1\n";
  os << "seed " << s.seed << '\n';
  os << "spec " << s.spec.echo() << '\n';
  os << "objects " << s.objects.size() << '\n';
  for (const auto& o : s.objects) {
    const auto& r = o.rotation;
    os << to_string(o.kind) << ' ';
    detail::put_reals(os, {o.radius, o.center.x(), o.center.y(), o.center.z(), r(0, 0), r(0, 1), r(0, 2), r(1, 0),
                           r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)});
    os << '\n';
  }
  detail::write_labeled(os, "points", s.cloud);
  os << "end\n";
}

inline Scene read_scene(std::istream& in) {
  detail::LineReader r(in);
  detail::expect_magic(r, "FPCS");
  Scene s;
  const std::string seed = detail::keyed_line(r, "seed");
  s.seed = detail::uint_at(seed, r.line());
  for (const auto& tok : detail::split_ws(detail::keyed_line(r, "spec"))) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError(r.line(), "malformed spec entry '" + tok + "'");
    KeyValue kv{tok.substr(0, eq), tok.substr(eq + 1), r.line()};
    if (!s.spec.apply(kv)) throw FormatError(r.line(), "unknown spec key '" + kv.key + "'");
  }
  const std::size_t k = detail::section(r, "objects");
  for (std::size_t i = 0; i < k; ++i) {
    auto tok = detail::record(r, "objects", 14, i, k);
    auto kind = primitive_from_string(tok[0]);
    if (!kind) throw FormatError(r.line(), "unknown primitive '" + tok[0] + "'");
    double v[13];
    for (int j = 0; j < 13; ++j) v[j] = detail::real_at(tok[1 + static_cast<std::size_t>(j)], r.line());
    SceneObject o;
    o.kind = *kind;
    o.radius = v[0];
    o.center = Vec3(v[1], v[2], v[3]);
    o.rotation << v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12];
    s.objects.push_back(o);
  }
  const std::size_t n = detail::section(r, "points");
  s.cloud = detail::read_labeled(r, "points", n, k);
  detail::expect_end(r);
  return s;
}

inline void save_scene(const std::string& path, const Scene& s) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_scene(os, s);
  if (!os) throw Error("write failed: " + path);
}

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_scene(in);
}

// ---------------------------------------------------------------------------
// Manifests: one record per line, space-separated key=value tokens, e.g.
//   pair=pairs/000.fpcp seed=17 motion_scale=0.5 object_radius=1.2

struct ManifestEntry {
  std::string path;
  std::vector<std::pair<std::string, std::string>> fields;
  std::size_t line = 0;

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : fields)
      if (k == key) return &v;
    return nullptr;
  }
};

inline std::vector<ManifestEntry> read_manifest(std::istream& in, const std::string& path_key) {
  std::vector<ManifestEntry> out;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto s = trim(raw);
    if (s.empty() || s.front() == '#') continue;
    ManifestEntry e;
    e.line = line;
    for (const auto& tok : detail::split_ws(std::string(s))) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) throw FormatError(line, "expected key=value, got '" + tok + "'");
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == path_key) e.path = v;
      else e.fields.emplace_back(k, v);
    }
    if (e.path.empty()) throw FormatError(line, "record lacks '" + path_key + "='");
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_manifest_line(std::ostream& os, const std::string& path_key, const std::string& path,
                                const std::vector<std::pair<std::string, std::string>>& fields) {
  os << path_key << '=' << path;
  for (const auto& [k, v] : fields) os << ' ' << k << '=' << v;
  os << '\n';
}

}  // namespace festa
