#include "usplat/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Geometry>
#include <json.hpp>

#include "usplat/errors.hpp"

namespace usplat {

using nlohmann::json;
namespace fs = std::filesystem;

namespace io {

void write_f32_le(std::ostream& out, const float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t v = __builtin_bswap32(std::bit_cast<std::uint32_t>(data[i]));
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

void read_f32_le(std::istream& in, float* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(data[i])));
    }
  }
}

std::vector<float> read_f32_file(const fs::path& path, std::size_t expected_count) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw FormatError("cannot read " + path.string() + ": " + ec.message());
  const std::uintmax_t expected = expected_count * sizeof(float);
  if (bytes != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes));
  }
  std::ifstream in(path, std::ios::binary);
  std::vector<float> out(expected_count);
  read_f32_le(in, out.data(), expected_count);
  if (!in) throw FormatError("short read from " + path.string());
  for (float v : out) {
    if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite sample");
  }
  return out;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace io

namespace {

constexpr const char* kVolumeFormat = "usplat-volume";
constexpr const char* kDatasetFormat = "usplat-dataset";
constexpr int kFormatVersion = 1;

std::string f32_bytes(const std::vector<float>& v) {
  std::ostringstream out(std::ios::binary);
  io::write_f32_le(out, v.data(), v.size());
  return std::move(out).str();
}

fs::path strip_stem(const fs::path& p) {
  if (p.extension() == ".raw" || p.extension() == ".json") {
    fs::path s = p;
    return s.replace_extension();
  }
  return p;
}

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  fs::path p = stem;
  p += suffix;
  return p;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Snap coordinates that sit on a grid plane up to rounding so aligned slices are exact.
double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < 1e-9 ? r : x;
}

}  // namespace

Vec3d Volume::voxel_to_world(double x, double y, double z) const {
  return {(x - 0.5 * (width - 1)) * spacing, (y - 0.5 * (height - 1)) * spacing,
          (z - 0.5 * (depth - 1)) * spacing};
}

Vec3d Volume::world_to_voxel(const Vec3d& p) const {
  return {snap(p[0] / spacing + 0.5 * (width - 1)), snap(p[1] / spacing + 0.5 * (height - 1)),
          snap(p[2] / spacing + 0.5 * (depth - 1))};
}

void Volume::validate() const {
  if (depth < 1 || height < 1 || width < 1) throw InvalidParameter("volume dims must be >= 1");
  if (!(spacing > 0.0) || !std::isfinite(spacing)) throw InvalidParameter("volume spacing must be > 0");
  if (voxels.size() != static_cast<std::size_t>(depth) * height * width) {
    throw InvalidParameter("voxel count does not match dims");
  }
  for (float v : voxels) {
    if (!(v >= 0.f && v <= 1.f)) throw InvalidParameter("voxel values must be finite and in [0, 1]");
  }
}

WorldBounds world_bounds(const Volume& volume) {
  const Vec3d half = 0.5 * volume.extent_mm();
  return {-half, half};
}

void save_volume(const Volume& volume, const fs::path& stem_in) {
  volume.validate();
  const fs::path stem = strip_stem(stem_in);
  const json meta = {{"format", kVolumeFormat},
                     {"version", kFormatVersion},
                     {"dims", {volume.depth, volume.height, volume.width}},
                     {"spacing", volume.spacing},
                     {"dtype", "float32-le"}};
  io::write_file_atomic(with_suffix(stem, ".raw"), f32_bytes(volume.voxels));
  io::write_file_atomic(with_suffix(stem, ".json"), meta.dump(2) + "\n");
}

Volume load_volume(const fs::path& stem_in) {
  const fs::path stem = strip_stem(stem_in);
  const json meta = read_json(with_suffix(stem, ".json"));
  if (meta.value("format", "") != kVolumeFormat) throw FormatError("bad volume magic in " + stem.string() + ".json");
  if (meta.value("version", 0) != kFormatVersion) throw FormatError("unsupported volume version");
  Volume v;
  try {
    const auto dims = meta.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw FormatError("volume dims must have 3 entries");
    v.depth = dims[0];
    v.height = dims[1];
    v.width = dims[2];
    v.spacing = meta.at("spacing").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("volume header: ") + e.what());
  }
  if (v.depth < 1 || v.height < 1 || v.width < 1 || !(v.spacing > 0)) throw FormatError("invalid volume header");
  v.voxels = io::read_f32_file(with_suffix(stem, ".raw"),
                               static_cast<std::size_t>(v.depth) * v.height * v.width);
  try {
    v.validate();
  } catch (const InvalidParameter& e) {
    throw FormatError(e.what());
  }
  return v;
}

PhantomKind parse_phantom_kind(const std::string& name) {
  if (name == "shells") return PhantomKind::Shells;
  if (name == "blobs") return PhantomKind::Blobs;
  if (name == "checker") return PhantomKind::Checker;
  throw InvalidParameter("unknown phantom kind '" + name + "' (shells|blobs|checker)");
}

std::string to_string(PhantomKind kind) {
  switch (kind) {
    case PhantomKind::Shells: return "shells";
    case PhantomKind::Blobs: return "blobs";
    case PhantomKind::Checker: return "checker";
  }
  return "?";
}

double evaluate_cloud_at(const GaussianCloudD& cloud, const Vec3d& p) {
  double num = cloud.bg_alpha() * cloud.bg_color();
  double den = cloud.bg_alpha();
  const double inv_s2 = 1.0 / (cloud.length_scale * cloud.length_scale);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3d d = p - cloud.mean(i);
    const Mat3d l = cloud.factor(i).matrix();
    const Vec3d w = l.transpose() * d;
    const double a = cloud.alpha(i) * std::exp(-0.5 * w.squaredNorm() * inv_s2);
    num += a * cloud.color(i);
    den += a;
  }
  return num / den;
}

namespace {

Mat3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

void check_phantom_options(const PhantomOptions& o) {
  if (o.dims < 8) throw InvalidParameter("phantom dims must be >= 8 (got " + std::to_string(o.dims) + ")");
  if (!(o.spacing > 0.0)) throw InvalidParameter("phantom spacing must be > 0");
}

// Gaussian-smoothed white noise normalized to zero mean and unit standard deviation.
std::vector<float> smooth_noise(int n, double sigma_vox, std::mt19937_64& rng) {
  const std::size_t total = static_cast<std::size_t>(n) * n * n;
  std::normal_distribution<float> normal(0.f, 1.f);
  std::vector<float> a(total);
  for (float& x : a) x = normal(rng);
  const int radius = static_cast<int>(std::ceil(3 * sigma_vox));
  std::vector<float> taps(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) taps[k + radius] = float(std::exp(-0.5 * k * k / (sigma_vox * sigma_vox)));
  std::vector<float> b(total);
  const std::size_t strides[3] = {1, static_cast<std::size_t>(n), static_cast<std::size_t>(n) * n};
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t st = strides[axis];
    for (std::size_t idx = 0; idx < total; ++idx) {
      const int c = static_cast<int>((idx / st) % n);
      float acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        const int j = std::clamp(c + k, 0, n - 1);
        acc += taps[k + radius] * a[idx + (static_cast<std::ptrdiff_t>(j) - c) * static_cast<std::ptrdiff_t>(st)];
      }
      b[idx] = acc;
    }
    std::swap(a, b);
  }
  double mean = 0, sq = 0;
  for (float x : a) mean += x;
  mean /= double(total);
  for (float x : a) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / double(total));
  for (float& x : a) x = float((x - mean) / sd);
  return a;
}

double smooth_step(double x) { return 0.5 * (1.0 + std::tanh(x)); }

// 1 inside [lo, hi] on the normalized radius, with tanh edges of width w.
double band(double rho, double lo, double hi, double w) {
  return smooth_step((rho - lo) / w) * (1.0 - smooth_step((rho - hi) / w));
}

Volume make_shells(const PhantomOptions& o) {
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  const int n = o.dims;
  Volume v(n, n, n, o.spacing);
  const double half = 0.5 * n * o.spacing;
  const Vec3d radii = half * Vec3d(0.80 + jitter(rng), 0.70 + jitter(rng), 0.75 + jitter(rng));
  const Vec3d center = half * Vec3d(jitter(rng), jitter(rng), jitter(rng));
  const Mat3d rot = Eigen::AngleAxisd(jitter(rng) * 4, Vec3d::UnitZ()).toRotationMatrix() *
                    Eigen::AngleAxisd(jitter(rng) * 4, Vec3d::UnitX()).toRotationMatrix();
  const Vec3d inner_radii = radii.cwiseProduct(Vec3d(0.28 + jitter(rng), 0.18 + jitter(rng), 0.35 + jitter(rng)));
  const Vec3d inner_center = center + half * Vec3d(0.1 * jitter(rng), 0.1 * jitter(rng), 0.1 * jitter(rng));
  // Edge softness of about 1.5 voxels in normalized-radius units.
  const double w = 1.5 * o.spacing / radii.mean();
  const double wi = 1.5 * o.spacing / inner_radii.mean();
  const std::vector<float> noise = smooth_noise(n, 1.5, rng);

  for (int z = 0; z < n; ++z) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const Vec3d p = rot.transpose() * (v.voxel_to_world(x, y, z) - center);
        const double rho = p.cwiseQuotient(radii).norm();
        const double rho_in = (rot.transpose() * (v.voxel_to_world(x, y, z) - inner_center)).cwiseQuotient(inner_radii).norm();
        double value = 0.04;
        value += 0.26 * band(rho, -1.0, 0.94, w);           // tissue
        value += 0.60 * band(rho, 0.94, 1.0, w * 0.5);      // outer bright shell
        value += 0.30 * band(rho, 0.55, 0.60, w * 0.5);     // inner shell
        value -= 0.20 * band(rho_in, -1.0, 1.0, wi);        // dark core
        const std::size_t idx = v.index(x, y, z);
        value *= 1.0 + o.speckle * noise[idx];
        v.voxels[idx] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return v;
}

Volume make_checker(const PhantomOptions& o) {
  const int n = o.dims;
  const int block = std::max(2, n / 8);
  Volume v(n, n, n, o.spacing);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) v.at(x, y, z) = ((x / block + y / block + z / block) % 2) ? 0.8f : 0.2f;
  return v;
}

}  // namespace

GaussianCloudD blob_cloud(const PhantomOptions& o) {
  check_phantom_options(o);
  if (o.blob_count < 1) throw InvalidParameter("blob count must be >= 1");
  std::mt19937_64 rng(o.seed);
  const double half = 0.5 * o.dims * o.spacing;
  // Standard deviations scale with the grid so blob smoothness is resolution-independent.
  const double sigma_lo = 0.10 * half, sigma_hi = 0.22 * half;
  std::uniform_real_distribution<double> pos(-0.6 * half, 0.6 * half);
  std::uniform_real_distribution<double> sig(sigma_lo, sigma_hi);
  std::uniform_real_distribution<double> col(0.35, 0.95);
  std::uniform_real_distribution<double> opa(0.5, 0.95);

  GaussianCloudD cloud;
  cloud.length_scale = 1.0;
  cloud.bg_intensity_raw = logit(0.08);
  cloud.bg_opacity_raw = -4.0;
  for (int k = 0; k < o.blob_count; ++k) {
    const Vec3d mean(pos(rng), pos(rng), pos(rng));
    const Vec3d sigma(sig(rng), sig(rng), sig(rng));
    const Mat3d q = random_rotation(rng);
    const Mat3d precision = q * sigma.cwiseInverse().cwiseAbs2().asDiagonal() * q.transpose();
    const Mat3d l = Eigen::LLT<Mat3d>(precision).matrixL();
    const std::array<double, 6> raw = raw_from_L<double>(l, cloud.beta);
    cloud.push_back(mean, std::span<const double, 6>(raw), logit(col(rng)), logit(opa(rng)));
  }
  return cloud;
}

Volume make_phantom(const PhantomOptions& o) {
  check_phantom_options(o);
  switch (o.kind) {
    case PhantomKind::Shells: return make_shells(o);
    case PhantomKind::Checker: return make_checker(o);
    case PhantomKind::Blobs: {
      const GaussianCloudD cloud = blob_cloud(o);
      Volume v(o.dims, o.dims, o.dims, o.spacing);
      for (int z = 0; z < o.dims; ++z)
        for (int y = 0; y < o.dims; ++y)
          for (int x = 0; x < o.dims; ++x)
            v.at(x, y, z) = static_cast<float>(evaluate_cloud_at(cloud, v.voxel_to_world(x, y, z)));
      return v;
    }
  }
  throw InvalidParameter("unknown phantom kind");
}

SliceImage sample_slice(const Volume& volume, const SliceSpec& spec) {
  spec.validate();
  SliceImage img(spec.width, spec.height, spec.spacing, spec.pose);
  const double cu = 0.5 * (spec.width - 1), cv = 0.5 * (spec.height - 1);
  const int W = volume.width, H = volume.height, D = volume.depth;
  for (int v = 0; v < spec.height; ++v) {
    for (int u = 0; u < spec.width; ++u) {
      const Vec3d world = spec.pose.apply(Vec3d((u - cu) * spec.spacing, (v - cv) * spec.spacing, 0.0));
      const Vec3d g = volume.world_to_voxel(world);
      if (!(g[0] >= 0 && g[0] <= W - 1 && g[1] >= 0 && g[1] <= H - 1 && g[2] >= 0 && g[2] <= D - 1)) {
        img.at(u, v) = 0.f;
        continue;
      }
      const int x0 = std::min(static_cast<int>(g[0]), std::max(W - 2, 0));
      const int y0 = std::min(static_cast<int>(g[1]), std::max(H - 2, 0));
      const int z0 = std::min(static_cast<int>(g[2]), std::max(D - 2, 0));
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1), z1 = std::min(z0 + 1, D - 1);
      const double fx = g[0] - x0, fy = g[1] - y0, fz = g[2] - z0;
      auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
      const double c00 = lerp(volume.at(x0, y0, z0), volume.at(x1, y0, z0), fx);
      const double c10 = lerp(volume.at(x0, y1, z0), volume.at(x1, y1, z0), fx);
      const double c01 = lerp(volume.at(x0, y0, z1), volume.at(x1, y0, z1), fx);
      const double c11 = lerp(volume.at(x0, y1, z1), volume.at(x1, y1, z1), fx);
      const double c0 = lerp(c00, c10, fy), c1 = lerp(c01, c11, fy);
      img.at(u, v) = static_cast<float>(lerp(c0, c1, fz));
    }
  }
  return img;
}

std::vector<SliceImage> SliceDataset::subset(Split which) const {
  std::vector<SliceImage> out;
  for (std::size_t i = 0; i < slices.size(); ++i)
    if (split[i] == which) out.push_back(slices[i]);
  return out;
}

std::size_t SliceDataset::count(Split which) const {
  return static_cast<std::size_t>(std::count(split.begin(), split.end(), which));
}

std::string to_string(ViewFamily family) {
  switch (family) {
    case ViewFamily::Axial: return "axial";
    case ViewFamily::Coronal: return "coronal";
    case ViewFamily::Sagittal: return "sagittal";
  }
  return "?";
}

SliceSpec orthogonal_view(const Volume& volume, ViewFamily family, int index) {
  SliceSpec spec;
  spec.spacing = volume.spacing;
  Mat3d r;
  switch (family) {
    case ViewFamily::Axial:
      if (index < 0 || index >= volume.depth) throw ContractViolation("axial plane index out of range");
      r.setIdentity();
      spec.width = volume.width;
      spec.height = volume.height;
      spec.pose = ProbePose(r, Vec3d(0, 0, volume.voxel_to_world(0, 0, index)[2]));
      break;
    case ViewFamily::Coronal:
      if (index < 0 || index >= volume.height) throw ContractViolation("coronal plane index out of range");
      r << 1, 0, 0, 0, 0, -1, 0, 1, 0;  // probe x -> world x, probe y -> world z
      spec.width = volume.width;
      spec.height = volume.depth;
      spec.pose = ProbePose(r, Vec3d(0, volume.voxel_to_world(0, index, 0)[1], 0));
      break;
    case ViewFamily::Sagittal:
      if (index < 0 || index >= volume.width) throw ContractViolation("sagittal plane index out of range");
      r << 0, 0, 1, 1, 0, 0, 0, 1, 0;  // probe x -> world y, probe y -> world z
      spec.width = volume.height;
      spec.height = volume.depth;
      spec.pose = ProbePose(r, Vec3d(volume.voxel_to_world(index, 0, 0)[0], 0, 0));
      break;
  }
  return spec;
}

std::vector<int> linear_plane_indices(int planes, int n) {
  if (planes < 1 || n < 1) throw InvalidParameter("plane and view counts must be >= 1");
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = static_cast<int>((static_cast<long long>(i) * planes) / n);
  return out;
}

SliceDataset make_axial_stack(const Volume& volume, int n, double perturb_deg, std::uint64_t seed) {
  if (n < 1) throw InvalidParameter("slice count must be >= 1");
  if (!(perturb_deg >= 0.0)) throw InvalidParameter("perturbation half-range must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-perturb_deg, perturb_deg);
  SliceDataset ds;
  for (int k : linear_plane_indices(volume.depth, n)) {
    SliceSpec spec = orthogonal_view(volume, ViewFamily::Axial, k);
    if (perturb_deg > 0.0) {
      const double ax = angle(rng), ay = angle(rng);
      spec.pose = ProbePose(spec.pose.rotation() * rotation_x_deg(ax) * rotation_y_deg(ay), spec.pose.translation());
    }
    ds.slices.push_back(sample_slice(volume, spec));
    ds.split.push_back(Split::Train);
  }
  return ds;
}

SliceDataset make_random_sweep(const Volume& volume, int n, double max_tilt_deg, std::uint64_t seed) {
  if (n < 1) throw InvalidParameter("slice count must be >= 1");
  if (!(max_tilt_deg >= 0.0)) throw InvalidParameter("tilt half-range must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> tilt(-max_tilt_deg, max_tilt_deg);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const Vec3d ext = volume.extent_mm();
  SliceDataset ds;
  for (int i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.5 : double(i) / (n - 1);
    const double z = (-0.4 + 0.8 * f) * ext[2];
    const Vec3d t(0.05 * ext[0] * unit(rng), 0.05 * ext[1] * unit(rng), z);
    const Mat3d r = rotation_z_deg(tilt(rng)) * rotation_x_deg(tilt(rng)) * rotation_y_deg(tilt(rng));
    SliceSpec spec{volume.width, volume.height, volume.spacing, ProbePose(r, t)};
    ds.slices.push_back(sample_slice(volume, spec));
    ds.split.push_back(Split::Train);
  }
  return ds;
}

SliceDataset split_dataset(const SliceDataset& dataset, double train_fraction, std::uint64_t seed) {
  const std::size_t n = dataset.slices.size();
  if (n < 2) throw InvalidParameter("splitting needs at least 2 slices");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidParameter("train fraction must lie in (0, 1)");
  const auto n_test = static_cast<std::size_t>(std::floor(double(n) * (1.0 - train_fraction) + 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SliceDataset out = dataset;
  out.split.assign(n, Split::Train);
  for (std::size_t k = 0; k < n_test; ++k) out.split[order[k]] = Split::Test;
  return out;
}

void save_dataset(const SliceDataset& dataset, const fs::path& dir) {
  if (dataset.split.size() != dataset.slices.size()) throw ContractViolation("split labels do not match slices");
  fs::create_directories(dir);
  json slices = json::array();
  for (std::size_t i = 0; i < dataset.slices.size(); ++i) {
    const SliceImage& s = dataset.slices[i];
    char name[32];
    std::snprintf(name, sizeof name, "slice_%04zu.raw", i);
    io::write_file_atomic(dir / name, f32_bytes(s.pixels));
    const auto a = s.pose.to_array();
    slices.push_back({{"file", name},
                      {"dims", {s.height, s.width}},
                      {"spacing", s.spacing},
                      {"pose", {{"rotation", std::vector<double>(a.begin(), a.begin() + 9)},
                                {"translation", std::vector<double>(a.begin() + 9, a.end())}}},
                      {"split", dataset.split[i] == Split::Train ? "train" : "test"}});
  }
  const json manifest = {{"format", kDatasetFormat}, {"version", kFormatVersion}, {"slices", slices}};
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

SliceDataset load_dataset(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != kDatasetFormat) throw FormatError("bad dataset magic in manifest.json");
  if (manifest.value("version", 0) != kFormatVersion) throw FormatError("unsupported dataset version");
  SliceDataset ds;
  try {
    for (const json& e : manifest.at("slices")) {
      const auto dims = e.at("dims").get<std::vector<int>>();
      if (dims.size() != 2 || dims[0] < 1 || dims[1] < 1) throw FormatError("slice dims must be [height, width]");
      const auto rot = e.at("pose").at("rotation").get<std::vector<double>>();
      const auto tr = e.at("pose").at("translation").get<std::vector<double>>();
      if (rot.size() != 9 || tr.size() != 3) throw FormatError("pose needs 9 rotation and 3 translation values");
      std::array<double, 12> a{};
      std::copy(rot.begin(), rot.end(), a.begin());
      std::copy(tr.begin(), tr.end(), a.begin() + 9);
      ProbePose pose;
      try {
        pose = ProbePose::from_array(a);
      } catch (const InvalidParameter& err) {
        throw FormatError(std::string("slice pose: ") + err.what());
      }
      SliceImage s(dims[1], dims[0], e.at("spacing").get<double>(), pose);
      s.pixels = io::read_f32_file(dir / e.at("file").get<std::string>(), s.pixels.size());
      const std::string split = e.at("split").get<std::string>();
      if (split != "train" && split != "test") throw FormatError("split must be train or test");
      ds.slices.push_back(std::move(s));
      ds.split.push_back(split == "train" ? Split::Train : Split::Test);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  return ds;
}

WorldBounds bounds_from_slices(const std::vector<SliceImage>& slices) {
  if (slices.empty()) throw InvalidParameter("no slices to bound");
  WorldBounds b{Vec3d::Constant(std::numeric_limits<double>::infinity()),
                Vec3d::Constant(-std::numeric_limits<double>::infinity())};
  for (const SliceImage& s : slices) {
    const double hx = 0.5 * (s.width - 1) * s.spacing, hy = 0.5 * (s.height - 1) * s.spacing;
    for (double x : {-hx, hx}) {
      for (double y : {-hy, hy}) {
        const Vec3d p = s.pose.apply(Vec3d(x, y, 0));
        b.lo = b.lo.cwiseMin(p);
        b.hi = b.hi.cwiseMax(p);
      }
    }
  }
  return b;
}

}  // namespace usplat
