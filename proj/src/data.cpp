#include "fp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fp/binio.hpp"

namespace fp {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'F', 'D'};
constexpr std::uint32_t kVersion = 1;

struct Frame {
  Vec3 centre, tangent, normal, binormal;
};

// Local frame of the centreline at arclength s, before rigid placement.
// Curved centrelines are planar arcs, so the binormal is constant.
Frame local_frame(const TubeSpec& spec, double s) {
  Frame f;
  if (spec.curvature == 0.0) {
    f.centre = {0.0, 0.0, s - spec.length / 2.0};
    f.tangent = {0.0, 0.0, 1.0};
    f.normal = {1.0, 0.0, 0.0};
    f.binormal = {0.0, 1.0, 0.0};
    return f;
  }
  const double rc = 1.0 / spec.curvature;
  const double theta = spec.curvature * (s - spec.length / 2.0);
  f.centre = {rc * (1.0 - std::cos(theta)), 0.0, rc * std::sin(theta)};
  f.tangent = {std::sin(theta), 0.0, std::cos(theta)};
  f.normal = {std::cos(theta), 0.0, -std::sin(theta)};
  f.binormal = {0.0, 1.0, 0.0};
  return f;
}

Vec3 place(const TubeSpec& spec, const Vec3& local) {
  return mat3_apply(spec.orientation, local) + spec.origin;
}

// Canonical cylindrical draws; realised against a radius profile so an
// edit pair can push one set of draws through two geometries.
struct Draw {
  double s;     // arclength
  double f;     // radial fraction in [0, 1]; 1 = on the wall
  double phi;   // angle
  bool wall;
};

std::vector<Draw> sample_draws(const TubeSpec& spec, Rng& rng) {
  spec.validate();
  const auto n_wall = static_cast<std::int64_t>(
      std::llround(spec.wall_fraction * static_cast<double>(spec.n_points)));
  const std::int64_t n_interior = spec.n_points - n_wall;

  double r_max = spec.radius;
  for (int i = 0; i <= 200; ++i)
    r_max = std::max(r_max, spec.radius_at(spec.length * i / 200.0));

  std::vector<Draw> draws;
  draws.reserve(static_cast<std::size_t>(spec.n_points));
  // Interior: s weighted by cross-section area, radius by sqrt for uniform
  // density in the disc.
  while (static_cast<std::int64_t>(draws.size()) < n_interior) {
    const double s = rng.uniform(0.0, spec.length);
    const double r = spec.radius_at(s);
    if (rng.uniform() >= (r * r) / (r_max * r_max)) continue;
    Draw d;
    d.s = s;
    d.f = std::sqrt(rng.uniform());
    d.phi = rng.uniform(0.0, 2.0 * M_PI);
    d.wall = false;
    draws.push_back(d);
  }
  // Wall points: s weighted by circumference.
  while (static_cast<std::int64_t>(draws.size()) < spec.n_points) {
    const double s = rng.uniform(0.0, spec.length);
    if (rng.uniform() >= spec.radius_at(s) / r_max) continue;
    Draw d;
    d.s = s;
    d.f = 1.0;
    d.phi = rng.uniform(0.0, 2.0 * M_PI);
    d.wall = true;
    draws.push_back(d);
  }
  return draws;
}

SampleRecord realise(const TubeSpec& spec, const std::vector<Draw>& draws) {
  SampleRecord rec;
  rec.mass_flow = spec.mass_flow;
  auto& field = rec.field;
  field.positions.reserve(draws.size());
  field.velocities.reserve(draws.size());
  field.wall_distance.reserve(draws.size());

  const double q_vol = spec.mass_flow / spec.density;
  for (const Draw& d : draws) {
    const Frame fr = local_frame(spec, d.s);
    const double r_here = spec.radius_at(d.s);
    const double rho = d.f * r_here;
    const Vec3 radial_dir =
        std::cos(d.phi) * fr.normal + std::sin(d.phi) * fr.binormal;
    field.positions.push_back(place(spec, fr.centre + rho * radial_dir));

    const double profile = 1.0 - d.f * d.f;
    const double v_axial = 2.0 * q_vol / (M_PI * r_here * r_here) * profile;
    // Radial component from continuity for a varying radius; zero on the
    // axis and on the wall.
    const double slope = spec.radius_slope_at(d.s);
    const double v_radial =
        2.0 * q_vol * slope / (M_PI * r_here * r_here) * d.f * profile;
    const Vec3 v_local = v_axial * fr.tangent + v_radial * radial_dir;
    field.velocities.push_back(mat3_apply(spec.orientation, v_local));

    field.wall_distance.push_back(r_here - rho);
  }
  rec.inlet = place(spec, local_frame(spec, 0.0).centre);
  rec.outlet = place(spec, local_frame(spec, spec.length).centre);
  rec.geometry_hash = geometry_hash(field);
  return rec;
}

}  // namespace

void TubeSpec::validate() const {
  if (radius <= 0.0 || length <= 0.0) throw ConfigError("tube: radius and length must be positive");
  if (n_points < 8) throw ConfigError("tube: too few points");
  if (wall_fraction < 0.0 || wall_fraction > 0.9)
    throw ConfigError("tube: wall fraction out of range");
  if (mass_flow <= 0.0 || density <= 0.0)
    throw ConfigError("tube: mass flow and density must be positive");
  if (bulge_amplitude < 0.0 || bulge_amplitude > 2.0)
    throw ConfigError("tube: bulge amplitude out of range");
  if (bulge_amplitude > 0.0) {
    if (bulge_halfwidth <= 0.0 || bulge_halfwidth >= 0.3)
      throw ConfigError("tube: bulge support must stay below 30% of the centreline");
    if (bulge_centre - bulge_halfwidth <= 0.0 ||
        bulge_centre + bulge_halfwidth >= 1.0)
      throw ConfigError("tube: bulge overlaps inlet or outlet");
  }
  if (std::abs(curvature) * length >= M_PI)
    throw ConfigError("tube: centreline bends too far");
}

double TubeSpec::radius_at(double s) const {
  if (bulge_amplitude == 0.0) return radius;
  const double tau = (s / length - bulge_centre) / bulge_halfwidth;
  if (std::abs(tau) >= 1.0) return radius;
  const double bump = 0.5 * (1.0 + std::cos(M_PI * tau));
  return radius * (1.0 + bulge_amplitude * bump);
}

double TubeSpec::radius_slope_at(double s) const {
  if (bulge_amplitude == 0.0) return 0.0;
  const double tau = (s / length - bulge_centre) / bulge_halfwidth;
  if (std::abs(tau) >= 1.0) return 0.0;
  const double dbump = -0.5 * M_PI * std::sin(M_PI * tau);
  return radius * bulge_amplitude * dbump / (length * bulge_halfwidth);
}

SampleRecord generate_tube_flow(const TubeSpec& spec, Rng& rng) {
  const auto draws = sample_draws(spec, rng);
  return realise(spec, draws);
}

EditPair generate_edit_pair(const TubeSpec& base, double bulge_amplitude,
                            Rng& rng, double dilation) {
  if (bulge_amplitude < 0.0)
    throw ConfigError("edit pair: bulge amplitude must be non-negative");
  TubeSpec source_spec = base;
  source_spec.bulge_amplitude = 0.0;
  TubeSpec target_spec = base;
  target_spec.bulge_amplitude = bulge_amplitude;
  target_spec.validate();

  const auto draws = sample_draws(source_spec, rng);
  EditPair pair;
  pair.source = realise(source_spec, draws);
  pair.target = realise(target_spec, draws);

  pair.edit_region.assign(draws.size(), 0);
  if (bulge_amplitude > 0.0) {
    const double lo = (base.bulge_centre - base.bulge_halfwidth - dilation) *
                      base.length;
    const double hi = (base.bulge_centre + base.bulge_halfwidth + dilation) *
                      base.length;
    for (std::size_t i = 0; i < draws.size(); ++i)
      if (draws[i].s > lo && draws[i].s < hi) pair.edit_region[i] = 1;
  }
  pair.source.edit_region = pair.edit_region;
  pair.target.edit_region = pair.edit_region;
  return pair;
}

void split_sequential(std::vector<SampleRecord>& records, double test_fraction,
                      double val_fraction, double train_fraction) {
  if (std::abs(test_fraction + val_fraction + train_fraction - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  const auto n = static_cast<std::int64_t>(records.size());
  const auto n_test = static_cast<std::int64_t>(
      std::llround(test_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::int64_t>(
      std::llround(val_fraction * static_cast<double>(n)));
  for (std::int64_t i = 0; i < n; ++i) {
    auto& r = records[static_cast<std::size_t>(i)];
    r.split = i < n_test ? "test" : (i < n_test + n_val ? "val" : "train");
  }
}

void split_by_flow(std::vector<SampleRecord>& records,
                   const std::vector<double>& train_flows,
                   const std::vector<double>& test_flows,
                   double val_fraction_within_train) {
  auto contains = [](const std::vector<double>& xs, double v) {
    for (double x : xs)
      if (std::abs(x - v) < 1e-9) return true;
    return false;
  };
  std::int64_t n_train_like = 0;
  for (const auto& r : records)
    if (!contains(test_flows, r.mass_flow)) ++n_train_like;
  const auto n_val = static_cast<std::int64_t>(std::llround(
      val_fraction_within_train * static_cast<double>(n_train_like)));
  std::int64_t seen = 0;
  for (auto& r : records) {
    if (contains(test_flows, r.mass_flow)) {
      r.split = "test";
      continue;
    }
    if (!contains(train_flows, r.mass_flow))
      throw ConfigError("split_by_flow: flow " + std::to_string(r.mass_flow) +
                        " is in neither flow list");
    r.split = seen < n_val ? "val" : "train";
    ++seen;
  }
}

void centre_of_mass_centring(SampleRecord& record) {
  Vec3 com{0.0, 0.0, 0.0};
  for (const auto& p : record.field.positions) com = com + p;
  com = (1.0 / static_cast<double>(record.field.size())) * com;
  for (auto& p : record.field.positions) p = p - com;
  if (record.inlet) *record.inlet = *record.inlet - com;
  if (record.outlet) *record.outlet = *record.outlet - com;
}

void augment_rigid(SampleRecord& record, Rng& rng, double translation_sigma) {
  centre_of_mass_centring(record);
  const Mat3 rot = rng.rotation_matrix();
  const Vec3 shift{rng.normal(0.0, translation_sigma),
                   rng.normal(0.0, translation_sigma),
                   rng.normal(0.0, translation_sigma)};
  for (auto& p : record.field.positions) p = mat3_apply(rot, p) + shift;
  for (auto& v : record.field.velocities) v = mat3_apply(rot, v);
  if (record.inlet) *record.inlet = mat3_apply(rot, *record.inlet) + shift;
  if (record.outlet) *record.outlet = mat3_apply(rot, *record.outlet) + shift;
}

std::uint64_t geometry_hash(const PointCloudField& field) {
  // FNV-1a over the f32-encoded positions: hashes match across writes.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : field.positions)
    for (double c : p) mix(static_cast<float>(c));
  return h;
}

std::string meta_path_for(const std::string& sample_path) {
  const auto dotpos = sample_path.rfind('.');
  const std::string stem =
      dotpos == std::string::npos ? sample_path : sample_path.substr(0, dotpos);
  return stem + ".meta.json";
}

void write_sample(const std::string& path, const SampleRecord& record) {
  record.field.validate();
  atomic_write_file(path, [&](std::ostream& os) {
    BinWriter w(os);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(kByteOrderMarker);
    const auto n = static_cast<std::uint64_t>(record.field.size());
    w.u64(n);
    w.f32_array(&record.field.positions[0][0], 3 * n);
    w.f32_array(&record.field.velocities[0][0], 3 * n);
    w.f32_array(record.field.wall_distance.data(), n);
  });

  nlohmann::json meta;
  meta["sample_id"] = record.sample_id;
  meta["mass_flow"] = record.mass_flow;
  meta["split"] = record.split;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(record.geometry_hash));
  meta["geometry_hash"] = hex;
  if (record.inlet) meta["inlet"] = {(*record.inlet)[0], (*record.inlet)[1], (*record.inlet)[2]};
  if (record.outlet) meta["outlet"] = {(*record.outlet)[0], (*record.outlet)[1], (*record.outlet)[2]};
  if (!record.edit_region.empty()) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < record.edit_region.size(); ++i)
      if (record.edit_region[i]) idx.push_back(static_cast<int>(i));
    meta["edit_region"] = idx;
  }
  atomic_write_file(meta_path_for(path),
                    [&](std::ostream& os) { os << meta.dump(2) << "\n"; });
}

SampleRecord read_sample(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open sample: " + path);
  BinReader r(is, path);
  r.expect_magic(kMagic, "FPFD sample");
  r.expect_version(kVersion);
  r.expect_byte_order();
  const std::uint64_t n = r.u64();
  if (n == 0 || n > (1ULL << 32)) throw DataError(path + ": point count corrupt");

  SampleRecord rec;
  rec.field.positions.resize(n);
  rec.field.velocities.resize(n);
  rec.field.wall_distance.resize(n);
  r.f32_array(&rec.field.positions[0][0], 3 * n);
  r.f32_array(&rec.field.velocities[0][0], 3 * n);
  r.f32_array(rec.field.wall_distance.data(), n);

  std::ifstream ms(meta_path_for(path));
  if (ms) {
    nlohmann::json meta;
    try {
      ms >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(meta_path_for(path) + ": invalid JSON: " + e.what());
    }
    rec.sample_id = meta.value("sample_id", 0);
    rec.mass_flow = meta.value("mass_flow", 0.0);
    rec.split = meta.value("split", "");
    if (meta.contains("geometry_hash"))
      rec.geometry_hash = std::stoull(meta["geometry_hash"].get<std::string>(),
                                      nullptr, 16);
    if (meta.contains("inlet")) {
      const auto& a = meta["inlet"];
      rec.inlet = Vec3{a[0], a[1], a[2]};
    }
    if (meta.contains("outlet")) {
      const auto& a = meta["outlet"];
      rec.outlet = Vec3{a[0], a[1], a[2]};
    }
    if (meta.contains("edit_region")) {
      rec.edit_region.assign(n, 0);
      for (const auto& i : meta["edit_region"])
        rec.edit_region[i.get<std::size_t>()] = 1;
    }
  }
  return rec;
}

nlohmann::json manifest_entry(const SampleRecord& record,
                              const std::string& file) {
  nlohmann::json j;
  j["sample_id"] = record.sample_id;
  j["file"] = file;
  j["mass_flow"] = record.mass_flow;
  j["split"] = record.split;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(record.geometry_hash));
  j["geometry_hash"] = hex;
  j["n_points"] = record.field.size();
  return j;
}

SampleRecord convert_external_sample(const std::string&) {
  // Mapping for external aneurysm datasets: read the vendor mesh, average
  // transient steps to a steady field, scale velocities by
  // kExternalVelocityScale when per-sample mass flows are missing, and emit
  // an FPFD sample. Not implemented; the synthetic generator stands in.
  throw ConfigError(
      "external dataset conversion is documented but not implemented");
}

}  // namespace fp
