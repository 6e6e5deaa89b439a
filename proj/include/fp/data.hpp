#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fp/pointcloud.hpp"
#include "fp/rng.hpp"

#include "json.hpp"

namespace fp {

// Analytic laminar tube: a straight or gently curved centreline with a
// radius profile that may carry one smooth, compactly supported bulge.
// The velocity field is the parabolic profile with the exact radial
// component required by continuity for a varying radius, so straight tubes
// are divergence-free to machine precision.
struct TubeSpec {
  double radius = 1.0;            // base radius R0 [m]
  double length = 8.0;            // centreline arclength [m]
  double curvature = 0.0;         // [1/m]; 0 = straight
  double bulge_amplitude = 0.0;   // fractional radius increase at the peak
  double bulge_centre = 0.5;      // arclength fraction of the bulge centre
  double bulge_halfwidth = 0.15;  // arclength fraction; support is +- this
  std::int64_t n_points = 2000;
  double wall_fraction = 0.15;    // fraction of points placed on the wall
  double mass_flow = 3.0;         // [g/s] in consistent units
  double density = 1.0;           // rho
  Mat3 orientation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 origin{0.0, 0.0, 0.0};

  void validate() const;
  double radius_at(double s) const;        // R(s)
  double radius_slope_at(double s) const;  // dR/ds
};

struct SampleRecord {
  PointCloudField field;
  std::int64_t sample_id = 0;
  double mass_flow = 0.0;
  std::string split;  // "test" | "val" | "train" | ""
  std::uint64_t geometry_hash = 0;
  // Tube port positions; mask sweeps anchor the known set here.
  std::optional<Vec3> inlet;
  std::optional<Vec3> outlet;
  // For edit pairs: 1 where the geometry was edited.
  std::vector<std::uint8_t> edit_region;
};

SampleRecord generate_tube_flow(const TubeSpec& spec, Rng& rng);

// Deforms one set of draws through both radius profiles, so outside the
// bulge support the two records agree point for point. The returned mask
// flags points within `dilation` (arclength fraction) of the support.
struct EditPair {
  SampleRecord source;  // base geometry
  SampleRecord target;  // bulged geometry
  std::vector<std::uint8_t> edit_region;
};

EditPair generate_edit_pair(const TubeSpec& base, double bulge_amplitude,
                            Rng& rng, double dilation = 0.05);

// Contiguous ranges in order: test, validation, train.
void split_sequential(std::vector<SampleRecord>& records, double test_fraction,
                      double val_fraction, double train_fraction);

// Mass-flow holdout: flows listed in test_flows go to test; the rest must
// appear in train_flows and are split train/val sequentially.
void split_by_flow(std::vector<SampleRecord>& records,
                   const std::vector<double>& train_flows,
                   const std::vector<double>& test_flows,
                   double val_fraction_within_train);

// Centre-of-mass centring, then a uniform SO(3) rotation of positions and
// velocities together, then a small N(0, sigma) translation. Wall distances
// are rigid invariants and stay untouched.
void augment_rigid(SampleRecord& record, Rng& rng,
                   double translation_sigma = 0.05);
void centre_of_mass_centring(SampleRecord& record);

std::uint64_t geometry_hash(const PointCloudField& field);

// Sample file: magic "FPFD", version u32, byte-order marker u32, N u64,
// then positions/velocities/wall distances as little-endian f32. Metadata
// lives in a "<stem>.meta.json" sidecar.
void write_sample(const std::string& path, const SampleRecord& record);
SampleRecord read_sample(const std::string& path);
std::string meta_path_for(const std::string& sample_path);

nlohmann::json manifest_entry(const SampleRecord& record,
                              const std::string& file);

// Velocity scale estimate used when converting external datasets that lack
// per-sample mass flows. The converter itself is not implemented; this
// records the documented mapping for a future importer.
constexpr double kExternalVelocityScale = 86.97;
SampleRecord convert_external_sample(const std::string& path);

}  // namespace fp
