#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "usplat/image.hpp"
#include "usplat/model.hpp"
#include "usplat/rasterizer.hpp"

namespace usplat {

/// D x H x W grid (z-major), isotropic spacing, centred on the world origin with axes
/// aligned to the world frame. Voxel (x, y, z) sits at ((x - (W-1)/2) s, (y - (H-1)/2) s, (z - (D-1)/2) s).
struct Volume {
  int depth = 0, height = 0, width = 0;
  double spacing = 1.0;
  std::vector<float> voxels;

  Volume() = default;
  Volume(int d, int h, int w, double s, float fill = 0.f)
      : depth(d), height(h), width(w), spacing(s), voxels(static_cast<std::size_t>(d) * h * w, fill) {}

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * height + y) * width + x;
  }
  float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }

  Vec3d voxel_to_world(double x, double y, double z) const;
  Vec3d world_to_voxel(const Vec3d& p) const;
  /// Full extent in mm (dims x spacing) per axis (x, y, z).
  Vec3d extent_mm() const { return Vec3d(width, height, depth) * spacing; }

  /// Throws InvalidParameter on bad dims/spacing or voxels outside [0, 1].
  void validate() const;
};

struct WorldBounds {
  Vec3d lo = Vec3d::Zero();
  Vec3d hi = Vec3d::Zero();
  Vec3d center() const { return 0.5 * (lo + hi); }
  Vec3d size() const { return hi - lo; }
  bool degenerate() const { return !((hi.array() > lo.array()).all()) || !lo.allFinite() || !hi.allFinite(); }
};

/// +- half the extent around the origin.
WorldBounds world_bounds(const Volume& volume);

/// `stem` may name `<stem>`, `<stem>.raw` or `<stem>.json`.
void save_volume(const Volume& volume, const std::filesystem::path& stem);
Volume load_volume(const std::filesystem::path& stem);

enum class PhantomKind { Shells, Blobs, Checker };
PhantomKind parse_phantom_kind(const std::string& name);
std::string to_string(PhantomKind kind);

struct PhantomOptions {
  PhantomKind kind = PhantomKind::Shells;
  int dims = 64;  // cubic grid
  double spacing = 0.6;
  std::uint64_t seed = 0;
  int blob_count = 24;
  double speckle = 0.15;  // multiplicative speckle amplitude for shells
};

Volume make_phantom(const PhantomOptions& options);

/// The Gaussians the "blobs" phantom is rendered from (length_scale 1, mm units).
GaussianCloudD blob_cloud(const PhantomOptions& options);

/// Untruncated mixture value at a world point: (sum a_i c_i + a_BG c_BG) / (sum a_i + a_BG).
double evaluate_cloud_at(const GaussianCloudD& cloud, const Vec3d& world_point);

/// Trilinear resampling of the volume on the probe plane; samples outside the grid are 0.
SliceImage sample_slice(const Volume& volume, const SliceSpec& spec);

enum class Split : std::uint8_t { Train, Test };

struct SliceDataset {
  std::vector<SliceImage> slices;
  std::vector<Split> split;  // parallel to slices

  std::vector<SliceImage> subset(Split which) const;
  std::size_t count(Split which) const;
};

enum class ViewFamily { Axial, Coronal, Sagittal };
std::string to_string(ViewFamily family);

/// Pose of the plane through voxel plane `index` of the given family.
/// Axial planes are normal to world z, coronal to y, sagittal to x.
SliceSpec orthogonal_view(const Volume& volume, ViewFamily family, int index);

/// Voxel plane indices for n linearly spaced views over `planes` planes: floor(i * planes / n).
std::vector<int> linear_plane_indices(int planes, int n);

/// n axial slices through linearly spaced voxel planes, each tilted by independent
/// U(-perturb_deg, +perturb_deg) rotations about its in-plane x and y axes.
SliceDataset make_axial_stack(const Volume& volume, int n, double perturb_deg, std::uint64_t seed);

/// Freehand-style sweep: plane centres progress along world z through the central 80% of
/// the volume, with random tilts about x and y, in-plane rotation, and lateral jitter.
SliceDataset make_random_sweep(const Volume& volume, int n, double max_tilt_deg, std::uint64_t seed);

/// Uniform random partition with floor(n (1 - train_fraction)) test slices.
SliceDataset split_dataset(const SliceDataset& dataset, double train_fraction, std::uint64_t seed);

/// Directory of slice_%04d.raw files plus manifest.json.
void save_dataset(const SliceDataset& dataset, const std::filesystem::path& dir);
SliceDataset load_dataset(const std::filesystem::path& dir);

/// Axis-aligned box around every slice's four corners.
WorldBounds bounds_from_slices(const std::vector<SliceImage>& slices);

namespace io {
void write_f32_le(std::ostream& out, const float* data, std::size_t count);
void read_f32_le(std::istream& in, float* data, std::size_t count);
std::vector<float> read_f32_file(const std::filesystem::path& path, std::size_t expected_count);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
}  // namespace io

}  // namespace usplat
