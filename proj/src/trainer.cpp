#include "usplat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "usplat/errors.hpp"
#include "usplat/metrics.hpp"
#include "usplat/rasterizer.hpp"

namespace usplat {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidParameter(std::string(name) + " must be > 0");
  };
  if (n_gaussians < 1) throw InvalidParameter("n_gaussians must be >= 1");
  if (iterations < 1) throw InvalidParameter("iterations must be >= 1");
  positive(lr_general, "lr_general");
  positive(lr_means_start, "lr_means_start");
  positive(lr_means_final, "lr_means_final");
  if (!(ssim_loss_weight >= 0.0 && ssim_loss_weight <= 1.0)) throw InvalidParameter("ssim_loss_weight must lie in [0, 1]");
  if (heuristic_interval < 1) throw InvalidParameter("heuristic_interval must be >= 1");
  if (!(densify_grad_threshold >= 0.0)) throw InvalidParameter("densify_grad_threshold must be >= 0");
  if (!(densify_percentile > 0.0 && densify_percentile < 1.0)) throw InvalidParameter("densify_percentile must lie in (0, 1)");
  positive(split_sigma_fraction, "split_sigma_fraction");
  if (!(split_shrink >= 1.0)) throw InvalidParameter("split_shrink must be >= 1");
  if (!(prune_alpha_threshold >= 0.0 && prune_alpha_threshold < 1.0)) throw InvalidParameter("prune_alpha_threshold must lie in [0, 1)");
  if (!(p_mass > 0.0 && p_mass < 1.0)) throw InvalidParameter("p_mass must lie in (0, 1)");
  if (batch < 1) throw InvalidParameter("batch must be >= 1");
  if (threads < 0) throw InvalidParameter("threads must be >= 0");
  if (!(time_budget_s >= 0.0)) throw InvalidParameter("time_budget_s must be >= 0");
  if (log_interval < 1) throw InvalidParameter("log_interval must be >= 1");
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  if (name == "20K") c.n_gaussians = 20000;
  else if (name == "100K") c.n_gaussians = 100000;
  else if (name == "200K") c.n_gaussians = 200000;
  else if (name == "300K") c.n_gaussians = 300000;
  else if (name == "2M") c.n_gaussians = 2000000;
  else throw InvalidParameter("unknown preset '" + name + "' (20K|100K|200K|300K|2M)");
  return c;
}

namespace {

json config_json(const TrainConfig& c) {
  return {{"n_gaussians", c.n_gaussians},
          {"iterations", c.iterations},
          {"lr_general", c.lr_general},
          {"lr_means_start", c.lr_means_start},
          {"lr_means_final", c.lr_means_final},
          {"ssim_loss_weight", c.ssim_loss_weight},
          {"loss", c.loss == LossKind::L2 ? "l2" : "l1_ssim"},
          {"heuristic_interval", c.heuristic_interval},
          {"densify_from", c.densify_from},
          {"densify_until", c.densify_until},
          {"densify_grad_threshold", c.densify_grad_threshold},
          {"densify_percentile", c.densify_percentile},
          {"split_sigma_fraction", c.split_sigma_fraction},
          {"split_shrink", c.split_shrink},
          {"prune_alpha_threshold", c.prune_alpha_threshold},
          {"p_mass", c.p_mass},
          {"seed", c.seed},
          {"batch", c.batch},
          {"sequential", c.execution == Execution::Sequential},
          {"threads", c.threads},
          {"time_budget_s", c.time_budget_s},
          {"log_interval", c.log_interval}};
}

TrainConfig config_of(const json& j) {
  TrainConfig c;
  c.n_gaussians = j.value("n_gaussians", c.n_gaussians);
  c.iterations = j.value("iterations", c.iterations);
  c.lr_general = j.value("lr_general", c.lr_general);
  c.lr_means_start = j.value("lr_means_start", c.lr_means_start);
  c.lr_means_final = j.value("lr_means_final", c.lr_means_final);
  c.ssim_loss_weight = j.value("ssim_loss_weight", c.ssim_loss_weight);
  c.loss = j.value("loss", std::string("l1_ssim")) == "l2" ? LossKind::L2 : LossKind::L1Ssim;
  c.heuristic_interval = j.value("heuristic_interval", c.heuristic_interval);
  c.densify_from = j.value("densify_from", c.densify_from);
  c.densify_until = j.value("densify_until", c.densify_until);
  c.densify_grad_threshold = j.value("densify_grad_threshold", c.densify_grad_threshold);
  c.densify_percentile = j.value("densify_percentile", c.densify_percentile);
  c.split_sigma_fraction = j.value("split_sigma_fraction", c.split_sigma_fraction);
  c.split_shrink = j.value("split_shrink", c.split_shrink);
  c.prune_alpha_threshold = j.value("prune_alpha_threshold", c.prune_alpha_threshold);
  c.p_mass = j.value("p_mass", c.p_mass);
  c.seed = j.value("seed", c.seed);
  c.batch = j.value("batch", c.batch);
  c.execution = j.value("sequential", false) ? Execution::Sequential : Execution::Parallel;
  c.threads = j.value("threads", c.threads);
  c.time_budget_s = j.value("time_budget_s", c.time_budget_s);
  c.log_interval = j.value("log_interval", c.log_interval);
  return c;
}

}  // namespace

std::string config_to_json(const TrainConfig& config) { return config_json(config).dump(2); }

TrainConfig config_from_json(const std::string& text) {
  try {
    return config_of(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
}

void AdamState::resize(std::size_t n) {
  means.resize(3 * n);
  l_raw.resize(6 * n);
  intensity.resize(n);
  opacity.resize(n);
  background.resize(2);
}

double decayed_rate(double lr_start, double lr_final, long t, long total) {
  const double f = total <= 0 ? 1.0 : std::clamp(double(t) / double(total), 0.0, 1.0);
  return lr_start * std::pow(lr_final / lr_start, f);
}

GroupRates rates_at(const TrainConfig& config, long t, double length_scale) {
  GroupRates r;
  r.means = length_scale * decayed_rate(config.lr_means_start, config.lr_means_final, t, config.iterations);
  r.l_raw = r.intensity = r.opacity = r.background = config.lr_general;
  return r;
}

void adam_update(std::span<float> params, std::span<const float> grads, AdamMoments& moments, double lr, long t) {
  if (grads.size() != params.size() || moments.m.size() != params.size() || moments.v.size() != params.size()) {
    throw ContractViolation("Adam parameter, gradient and moment shapes differ");
  }
  if (t < 1) throw ContractViolation("Adam step counter is 1-based");
  const double c1 = 1.0 - std::pow(AdamState::beta1, double(t));
  const double c2 = 1.0 - std::pow(AdamState::beta2, double(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = AdamState::beta1 * moments.m[i] + (1.0 - AdamState::beta1) * g;
    const double v = AdamState::beta2 * moments.v[i] + (1.0 - AdamState::beta2) * g * g;
    moments.m[i] = float(m);
    moments.v[i] = float(v);
    params[i] = float(params[i] - lr * (m / c1) / (std::sqrt(v / c2) + AdamState::eps));
  }
}

void adam_step(AdamState& state, GaussianCloud& cloud, const ParamGradients<float>& grads, const GroupRates& rates) {
  if (grads.size() != cloud.size() || state.size() != cloud.size()) {
    throw ContractViolation("Adam state, gradients and cloud disagree on the Gaussian count");
  }
  const long t = ++state.step;
  adam_update(cloud.means, grads.d_means, state.means, rates.means, t);
  adam_update(cloud.l_raw, grads.d_l_raw, state.l_raw, rates.l_raw, t);
  adam_update(cloud.intensity_raw, grads.d_intensity_raw, state.intensity, rates.intensity, t);
  adam_update(cloud.opacity_raw, grads.d_opacity_raw, state.opacity, rates.opacity, t);
  float bg[2] = {cloud.bg_intensity_raw, cloud.bg_opacity_raw};
  const float dbg[2] = {grads.d_bg_intensity_raw, grads.d_bg_opacity_raw};
  adam_update(bg, dbg, state.background, rates.background, t);
  cloud.bg_intensity_raw = bg[0];
  cloud.bg_opacity_raw = bg[1];
}

LossResult compute_loss(std::span<const float> pred, const SliceImage& target, double lambda, LossKind kind) {
  const std::size_t n = target.pixels.size();
  if (pred.size() != n) throw InvalidParameter("prediction and target dimensions differ");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidParameter("SSIM loss weight must lie in [0, 1]");
  LossResult r;
  r.d_pixels.assign(n, 0.f);
  const double inv_n = 1.0 / double(n);
  if (kind == LossKind::L2) {
    double se = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = double(pred[i]) - target.pixels[i];
      se += d * d;
      r.d_pixels[i] = float(2.0 * d * inv_n);
    }
    r.value = se * inv_n;
    if (target.width >= kSsimWindow && target.height >= kSsimWindow) {
      r.ssim = ssim(pred, target.pixels, target.width, target.height);
    }
    return r;
  }
  double l1 = 0;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = double(pred[i]) - target.pixels[i];
    l1 += std::abs(diff);
    d[i] = (1.0 - lambda) * inv_n * double((diff > 0) - (diff < 0));
  }
  r.l1 = l1 * inv_n;
  r.value = (1.0 - lambda) * r.l1;
  const bool windowed = target.width >= kSsimWindow && target.height >= kSsimWindow;
  if (lambda > 0.0) {
    if (!windowed) throw InvalidParameter("SSIM loss needs slices of at least 11x11 pixels");
    std::vector<double> ds;
    r.ssim = ssim_with_grad(pred, target.pixels, target.width, target.height, ds);
    r.value += lambda * (1.0 - r.ssim);
    for (std::size_t i = 0; i < n; ++i) d[i] -= lambda * ds[i];
  } else if (windowed) {
    r.ssim = ssim(pred, target.pixels, target.width, target.height);
  }
  for (std::size_t i = 0; i < n; ++i) r.d_pixels[i] = float(d[i]);
  return r;
}

GaussianCloud init_cloud(const TrainConfig& config, const WorldBounds& bounds, std::mt19937_64& rng) {
  if (bounds.degenerate()) throw InvalidParameter("initialization bounds must have positive finite extent");
  if (config.n_gaussians < 1) throw InvalidParameter("n_gaussians must be >= 1");
  GaussianCloud cloud;
  cloud.length_scale = float(0.5 * bounds.size().maxCoeff());
  const std::size_t n = config.n_gaussians;
  cloud.means.resize(3 * n);
  cloud.l_raw.resize(6 * n);
  cloud.intensity_raw.assign(n, 0.f);
  cloud.opacity_raw.assign(n, 1.f);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<float> raw(4.f, 5.f);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) {
      cloud.means[3 * i + k] = float(bounds.lo[k] + unit(rng) * (bounds.hi[k] - bounds.lo[k]));
    }
    for (int k = 0; k < 6; ++k) cloud.l_raw[6 * i + k] = raw(rng);
  }
  return cloud;
}

void DensifyStats::accumulate(const ParamGradients<float>& grads, std::span<const std::uint32_t> accepted) {
  for (std::uint32_t i : accepted) {
    const double gx = grads.d_means[3 * i], gy = grads.d_means[3 * i + 1], gz = grads.d_means[3 * i + 2];
    grad_norm_sum[i] += std::sqrt(gx * gx + gy * gy + gz * gz);
    ++visible[i];
  }
}

std::vector<double> DensifyStats::averages() const {
  std::vector<double> out(grad_norm_sum.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (visible[i] > 0) out[i] = grad_norm_sum[i] / visible[i];
  return out;
}

double densify_threshold_from(const DensifyStats& stats, double percentile) {
  std::vector<double> seen;
  const std::vector<double> avg = stats.averages();
  for (std::size_t i = 0; i < avg.size(); ++i)
    if (stats.visible[i] > 0) seen.push_back(avg[i]);
  if (seen.empty()) return std::numeric_limits<double>::infinity();
  const std::size_t rank = std::min(seen.size() - 1, static_cast<std::size_t>(std::ceil(percentile * seen.size())) - 1);
  std::nth_element(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(rank), seen.end());
  return seen[rank];
}

namespace {

double max_sigma_model(const GaussianCloud& cloud, std::size_t i) {
  const TriangularPrecision<double> l(cloud.factor(i).matrix().cast<double>());
  const Eigen::SelfAdjointEigenSolver<Mat3d> es(covariance_from_L(l), Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

// Appends row i of every per-Gaussian group of `src` (and its Adam rows, or zeros) to `dst`.
void append_row(GaussianCloud& dst, AdamState& dst_adam, const GaussianCloud& src, const AdamState* src_adam,
                std::size_t i) {
  auto copy = [i](std::vector<float>& to, const std::vector<float>& from, std::size_t width) {
    to.insert(to.end(), from.begin() + static_cast<std::ptrdiff_t>(width * i),
              from.begin() + static_cast<std::ptrdiff_t>(width * (i + 1)));
  };
  auto moments = [&](AdamMoments& to, const AdamMoments* from, std::size_t width) {
    if (from) {
      copy(to.m, from->m, width);
      copy(to.v, from->v, width);
    } else {
      to.m.insert(to.m.end(), width, 0.f);
      to.v.insert(to.v.end(), width, 0.f);
    }
  };
  copy(dst.means, src.means, 3);
  copy(dst.l_raw, src.l_raw, 6);
  copy(dst.intensity_raw, src.intensity_raw, 1);
  copy(dst.opacity_raw, src.opacity_raw, 1);
  moments(dst_adam.means, src_adam ? &src_adam->means : nullptr, 3);
  moments(dst_adam.l_raw, src_adam ? &src_adam->l_raw : nullptr, 6);
  moments(dst_adam.intensity, src_adam ? &src_adam->intensity : nullptr, 1);
  moments(dst_adam.opacity, src_adam ? &src_adam->opacity : nullptr, 1);
}

}  // namespace

HeuristicSummary densify_prune_resample(GaussianCloud& cloud, AdamState& adam, DensifyStats& stats,
                                        const TrainConfig& config, double threshold, std::mt19937_64& rng) {
  const std::size_t n = cloud.size();
  if (adam.size() != n || stats.visible.size() != n) throw ContractViolation("heuristic state does not match the cloud");
  HeuristicSummary summary;
  summary.threshold = threshold;

  std::vector<std::uint8_t> pruned(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (cloud.alpha(i) < float(config.prune_alpha_threshold)) {
      pruned[i] = 1;
      ++summary.pruned;
    }
  }
  const std::vector<double> avg = stats.averages();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i)
    if (!pruned[i] && stats.visible[i] > 0 && avg[i] > threshold) candidates.push_back(i);
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) { return avg[a] > avg[b]; });
  const std::size_t cap = 2 * config.n_gaussians;
  const std::size_t survivors = n - summary.pruned;
  // Both a clone and a split add exactly one Gaussian.
  const std::size_t room = cap > survivors ? cap - survivors : 0;
  if (candidates.size() > room) candidates.resize(room);
  std::sort(candidates.begin(), candidates.end());

  std::vector<std::uint8_t> action(n, 0);  // 1 clone, 2 split
  for (std::size_t i : candidates) action[i] = max_sigma_model(cloud, i) > config.split_sigma_fraction ? 2 : 1;

  if (summary.pruned == 0 && candidates.empty()) {
    stats.resize(n);
    return summary;
  }

  GaussianCloud out;
  out.bg_intensity_raw = cloud.bg_intensity_raw;
  out.bg_opacity_raw = cloud.bg_opacity_raw;
  out.beta = cloud.beta;
  out.length_scale = cloud.length_scale;
  AdamState out_adam(0);
  out_adam.step = adam.step;
  out_adam.background = adam.background;
  for (std::size_t i = 0; i < n; ++i)
    if (!pruned[i] && action[i] != 2) append_row(out, out_adam, cloud, &adam, i);
  for (std::size_t i : candidates) {
    if (action[i] != 1) continue;
    append_row(out, out_adam, cloud, nullptr, i);
    ++summary.cloned;
  }
  std::normal_distribution<float> normal(0.f, 1.f);
  for (std::size_t i : candidates) {
    if (action[i] != 2) continue;
    const TriangularPrecision<float> l = cloud.factor(i);
    const auto child_raw = raw_from_L<float>(l.matrix() * float(config.split_shrink), cloud.beta);
    for (int c = 0; c < 2; ++c) {
      const Vec3<float> z(normal(rng), normal(rng), normal(rng));
      const Vec3<float> mean = sample_gaussian(cloud.mean(i), l, z, cloud.length_scale);
      append_row(out, out_adam, cloud, nullptr, i);
      const std::size_t k = out.size() - 1;
      for (int d = 0; d < 3; ++d) out.means[3 * k + d] = mean[d];
      std::copy(child_raw.begin(), child_raw.end(), out.l_raw.begin() + static_cast<std::ptrdiff_t>(6 * k));
    }
    ++summary.split;
  }
  cloud = std::move(out);
  adam = std::move(out_adam);
  stats.resize(cloud.size());
  return summary;
}

std::string TrainLogEntry::to_json() const {
  nlohmann::ordered_json j = {{"iter", iter},
                              {"wall_ms", wall_ms},
                              {"loss", loss},
                              {"train_ssim", train_ssim},
                              {"n_gaussians", n_gaussians}};
  return j.dump();
}

namespace {

constexpr char kMagic[4] = {'U', 'G', 'S', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= std::uint32_t(static_cast<unsigned char>(in[pos + k])) << (8 * k);
  pos += 4;
  return v;
}

void put_f32(std::string& out, std::span<const float> values) {
  std::ostringstream s(std::ios::binary);
  io::write_f32_le(s, values.data(), values.size());
  out += std::move(s).str();
}

void get_f32(const std::string& in, std::size_t& pos, std::span<float> values) {
  const std::size_t bytes = values.size() * sizeof(float);
  if (pos + bytes > in.size()) throw FormatError("checkpoint truncated");
  std::istringstream s(in.substr(pos, bytes), std::ios::binary);
  io::read_f32_le(s, values.data(), values.size());
  pos += bytes;
}

json bounds_json(const WorldBounds& b) {
  return {{"lo", {b.lo[0], b.lo[1], b.lo[2]}}, {"hi", {b.hi[0], b.hi[1], b.hi[2]}}};
}

WorldBounds pad_degenerate(WorldBounds b) {
  const double span = std::max(b.size().maxCoeff(), 1e-3);
  for (int k = 0; k < 3; ++k) {
    if (b.hi[k] - b.lo[k] < 1e-6 * span) {
      b.lo[k] -= 0.05 * span;
      b.hi[k] += 0.05 * span;
    }
  }
  return b;
}

bool all_finite(const GaussianCloud& c) {
  auto ok = [](const std::vector<float>& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
  };
  return ok(c.means) && ok(c.l_raw) && ok(c.intensity_raw) && ok(c.opacity_raw) && std::isfinite(c.bg_intensity_raw) &&
         std::isfinite(c.bg_opacity_raw);
}


std::string checkpoint_bytes(const GaussianCloud& cloud, const CheckpointMeta& meta) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  put_f32(out, cloud.means);
  put_f32(out, cloud.l_raw);
  put_f32(out, cloud.intensity_raw);
  put_f32(out, cloud.opacity_raw);
  const float tail[3] = {cloud.bg_intensity_raw, cloud.bg_opacity_raw, cloud.beta};
  put_f32(out, tail);
  json trailer = {{"format", "usplat-checkpoint"}, {"iteration", meta.iteration}, {"length_scale_mm", cloud.length_scale}};
  if (meta.config) trailer["config"] = config_json(*meta.config);
  if (meta.bounds) trailer["bounds_mm"] = bounds_json(*meta.bounds);
  const std::string text = trailer.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& path, const GaussianCloud& cloud, const CheckpointMeta& meta) {
  cloud.validate();
  io::write_file_atomic(path, checkpoint_bytes(cloud, meta));
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  std::size_t pos = 4;
  if (get_u32(bytes, pos) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::size_t n = get_u32(bytes, pos);
  const std::size_t need = 12 + (11 * n + 3) * sizeof(float) + 4;
  if (bytes.size() < need) {
    throw FormatError("checkpoint truncated: expected at least " + std::to_string(need) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  Checkpoint ck;
  GaussianCloud& c = ck.cloud;
  c.resize(n);
  get_f32(bytes, pos, c.means);
  get_f32(bytes, pos, c.l_raw);
  get_f32(bytes, pos, c.intensity_raw);
  get_f32(bytes, pos, c.opacity_raw);
  float tail[3];
  get_f32(bytes, pos, tail);
  c.bg_intensity_raw = tail[0];
  c.bg_opacity_raw = tail[1];
  c.beta = tail[2];
  const std::uint32_t len = get_u32(bytes, pos);
  if (pos + len != bytes.size()) throw FormatError("checkpoint trailer length does not match the file size");
  try {
    const json t = json::parse(bytes.substr(pos));
    if (t.value("format", "") != "usplat-checkpoint") throw FormatError("bad checkpoint trailer");
    c.length_scale = t.at("length_scale_mm").get<float>();
    ck.meta.iteration = t.value("iteration", 0);
    if (t.contains("config")) ck.meta.config = config_of(t.at("config"));
    if (t.contains("bounds_mm")) {
      const auto lo = t.at("bounds_mm").at("lo").get<std::vector<double>>();
      const auto hi = t.at("bounds_mm").at("hi").get<std::vector<double>>();
      if (lo.size() != 3 || hi.size() != 3) throw FormatError("bounds need 3 values");
      ck.meta.bounds = WorldBounds{Vec3d(lo[0], lo[1], lo[2]), Vec3d(hi[0], hi[1], hi[2])};
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint trailer: ") + e.what());
  }
  if (!all_finite(c)) throw FormatError("checkpoint contains non-finite parameters");
  try {
    c.validate();
  } catch (const InvalidParameter& e) {
    throw FormatError(e.what());
  }
  return ck;
}

TrainResult train(const std::vector<SliceImage>& slices, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (slices.empty()) throw InvalidParameter("training needs at least one slice");
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainResult result;
  result.bounds = pad_degenerate(options.bounds ? *options.bounds : bounds_from_slices(slices));
  std::mt19937_64 rng(config.seed);
  GaussianCloud cloud = init_cloud(config, result.bounds, rng);
  AdamState adam(cloud.size());
  DensifyStats stats;
  stats.resize(cloud.size());
  double threshold = config.densify_grad_threshold;

  std::ofstream log_file;
  if (!options.log_path.empty()) {
    log_file.open(options.log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot open log file " + options.log_path.string());
  }

  RenderOptions ro;
  ro.p_mass = config.p_mass;
  ro.execution = config.execution;
  ro.threads = config.threads;

  std::vector<std::size_t> order(slices.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  auto diverge = [&](int it, const std::string& why) {
    fs::path snap = options.snapshot_dir / ("diverged_iter" + std::to_string(it) + ".ugsc");
    std::string where;
    try {
      fs::create_directories(options.snapshot_dir);
      // The snapshot may hold non-finite values, so it skips validation.
      io::write_file_atomic(snap, checkpoint_bytes(cloud, CheckpointMeta{it, config, result.bounds}));
      where = snap.string();
    } catch (const std::exception&) {
      where.clear();
    }
    throw TrainingDiverged(why + " at iteration " + std::to_string(it) + (where.empty() ? "" : "; snapshot " + where),
                           where);
  };

  double window_loss = 0, window_ssim = 0;
  int window_count = 0;
  auto emit = [&](int it) {
    TrainLogEntry e{it, elapsed_ms(), window_count ? window_loss / window_count : 0.0,
                    window_count ? window_ssim / window_count : 0.0, cloud.size()};
    result.log.push_back(e);
    if (log_file) log_file << e.to_json() << '\n' << std::flush;
    if (options.on_log) options.on_log(e);
    window_loss = window_ssim = 0;
    window_count = 0;
  };

  for (int it = 1; it <= config.iterations; ++it) {
    ParamGradients<float> acc(cloud.size());
    const float inv_batch = 1.f / float(config.batch);
    for (int b = 0; b < config.batch; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const SliceImage& target = slices[order[cursor++]];
      const SliceSpec spec{target.width, target.height, target.spacing, target.pose};
      const RenderBuffers<float> buf = rasterize(cloud, spec, ro);
      const LossResult loss = compute_loss(buf.pixels(), target, config.ssim_loss_weight, config.loss);
      if (!std::isfinite(loss.value)) diverge(it, "non-finite loss");
      const ParamGradients<float> g = backward<float>(cloud, spec, buf, loss.d_pixels, ro);
      stats.accumulate(g, buf.accepted);
      for (std::size_t k = 0; k < acc.d_means.size(); ++k) acc.d_means[k] += inv_batch * g.d_means[k];
      for (std::size_t k = 0; k < acc.d_l_raw.size(); ++k) acc.d_l_raw[k] += inv_batch * g.d_l_raw[k];
      for (std::size_t k = 0; k < acc.size(); ++k) {
        acc.d_intensity_raw[k] += inv_batch * g.d_intensity_raw[k];
        acc.d_opacity_raw[k] += inv_batch * g.d_opacity_raw[k];
      }
      acc.d_bg_intensity_raw += inv_batch * g.d_bg_intensity_raw;
      acc.d_bg_opacity_raw += inv_batch * g.d_bg_opacity_raw;
      window_loss += loss.value / config.batch;
      window_ssim += loss.ssim / config.batch;
    }
    ++window_count;

    adam_step(adam, cloud, acc, rates_at(config, it, cloud.length_scale));
    if (!all_finite(cloud)) diverge(it, "non-finite parameter");

    if (it % config.heuristic_interval == 0) {
      if (it >= config.densify_from && it <= config.densify_end()) {
        if (threshold <= 0.0) threshold = densify_threshold_from(stats, config.densify_percentile);
        result.heuristics.push_back(densify_prune_resample(cloud, adam, stats, config, threshold, rng));
      } else {
        stats.resize(cloud.size());
      }
    }

    result.iterations_run = it;
    const bool out_of_time = config.time_budget_s > 0.0 && elapsed_ms() >= 1000.0 * config.time_budget_s;
    if (it % config.log_interval == 0 || it == config.iterations || out_of_time) emit(it);
    if (out_of_time) {
      result.stopped_by_budget = it < config.iterations;
      break;
    }
  }
  result.cloud = std::move(cloud);
  return result;
}

}  // namespace usplat
