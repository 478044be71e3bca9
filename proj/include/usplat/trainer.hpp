#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "usplat/data.hpp"
#include "usplat/gradients.hpp"
#include "usplat/image.hpp"
#include "usplat/model.hpp"
#include "usplat/parallel.hpp"

namespace usplat {

enum class LossKind { L1Ssim, L2 };

struct TrainConfig {
  std::size_t n_gaussians = 20000;
  int iterations = 3000;
  double lr_general = 0.05;
  /// Mean rates are in units of the scene length scale, decayed exponentially over `iterations`.
  double lr_means_start = 1.6e-4;
  double lr_means_final = 1.6e-6;
  double ssim_loss_weight = 0.2;
  LossKind loss = LossKind::L1Ssim;
  int heuristic_interval = 100;
  int densify_from = 500;
  int densify_until = -1;  // -1: iterations / 2
  /// 0 selects the adaptive threshold: `densify_percentile` of the first heuristic window.
  double densify_grad_threshold = 0.0;
  double densify_percentile = 0.9;
  /// Split instead of clone when the largest standard deviation exceeds this fraction of the length scale.
  double split_sigma_fraction = 0.05;
  double split_shrink = 1.6;
  double prune_alpha_threshold = 0.01;
  double p_mass = 0.95;
  std::uint64_t seed = 0;
  int batch = 1;
  Execution execution = Execution::Parallel;
  int threads = 0;
  double time_budget_s = 0.0;  // 0: unlimited
  int log_interval = 100;

  /// Throws InvalidParameter naming the first offending field.
  void validate() const;
  int densify_end() const { return densify_until < 0 ? iterations / 2 : densify_until; }
};

/// Named model sizes: "20K" (desk default), "100K", "200K", "300K", "2M".
TrainConfig preset(const std::string& name);

std::string config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& text);

struct AdamMoments {
  std::vector<float> m, v;
  void resize(std::size_t n) {
    m.assign(n, 0.f);
    v.assign(n, 0.f);
  }
};

struct AdamState {
  static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-15;
  long step = 0;
  AdamMoments means, l_raw, intensity, opacity, background;

  explicit AdamState(std::size_t n = 0) { resize(n); }
  /// Zeroes every moment and resets the shapes to n Gaussians.
  void resize(std::size_t n);
  std::size_t size() const { return intensity.m.size(); }
};

struct GroupRates {
  double means = 0, l_raw = 0, intensity = 0, opacity = 0, background = 0;
};

/// lr_start * (lr_final / lr_start)^(t / T), with t clamped to [0, T].
double decayed_rate(double lr_start, double lr_final, long t, long total);

/// Rates for step t (1-based) of a run: mean rates scaled by the cloud's length scale.
GroupRates rates_at(const TrainConfig& config, long t, double length_scale);

/// One bias-corrected Adam update over a flat parameter array. `t` is 1-based.
void adam_update(std::span<float> params, std::span<const float> grads, AdamMoments& moments, double lr, long t);

/// Increments state.step and updates every parameter group.
void adam_step(AdamState& state, GaussianCloud& cloud, const ParamGradients<float>& grads, const GroupRates& rates);

struct LossResult {
  double value = 0, l1 = 0, ssim = 0;
  std::vector<float> d_pixels;
};

/// (1 - lambda) mean|p - t| + lambda (1 - SSIM) for L1Ssim; mean (p - t)^2 for L2.
LossResult compute_loss(std::span<const float> pred, const SliceImage& target, double lambda,
                        LossKind kind = LossKind::L1Ssim);

/// Means ~ U(bounds), c = 0.5, alpha = sigmoid(1), l_raw ~ U[4, 5), length scale = half the
/// largest bounds extent.
GaussianCloud init_cloud(const TrainConfig& config, const WorldBounds& bounds, std::mt19937_64& rng);

/// Accumulated world-space mean-gradient norms between heuristic applications.
struct DensifyStats {
  std::vector<double> grad_norm_sum;
  std::vector<int> visible;
  void resize(std::size_t n) {
    grad_norm_sum.assign(n, 0.0);
    visible.assign(n, 0);
  }
  void accumulate(const ParamGradients<float>& grads, std::span<const std::uint32_t> accepted);
  std::vector<double> averages() const;
};

struct HeuristicSummary {
  std::size_t pruned = 0, cloned = 0, split = 0;
  double threshold = 0;
};

/// Threshold-th quantile (nearest rank) of the averages of Gaussians seen at least once.
double densify_threshold_from(const DensifyStats& stats, double percentile);

/// Prunes alpha < threshold, then clones or splits the highest-gradient survivors above
/// `threshold` up to a total of 2 * config.n_gaussians. New Adam rows start at zero and `stats`
/// is reset to the new size.
HeuristicSummary densify_prune_resample(GaussianCloud& cloud, AdamState& adam, DensifyStats& stats,
                                        const TrainConfig& config, double threshold, std::mt19937_64& rng);

struct TrainLogEntry {
  int iter = 0;
  double wall_ms = 0;
  double loss = 0;
  double train_ssim = 0;
  std::size_t n_gaussians = 0;
  std::string to_json() const;
};

struct TrainOptions {
  std::optional<WorldBounds> bounds;  // defaults to the slices' bounding box
  std::filesystem::path log_path;     // JSON lines; empty disables
  std::filesystem::path snapshot_dir = ".";
  std::function<void(const TrainLogEntry&)> on_log;
};

struct TrainResult {
  GaussianCloud cloud;
  std::vector<TrainLogEntry> log;
  int iterations_run = 0;
  bool stopped_by_budget = false;
  WorldBounds bounds;
  std::vector<HeuristicSummary> heuristics;
};

/// Throws TrainingDiverged (after writing a snapshot) on a non-finite loss or parameter.
TrainResult train(const std::vector<SliceImage>& slices, const TrainConfig& config, const TrainOptions& options = {});

struct CheckpointMeta {
  int iteration = 0;
  std::optional<TrainConfig> config;
  std::optional<WorldBounds> bounds;
};

struct Checkpoint {
  GaussianCloud cloud;
  CheckpointMeta meta;
};

/// "UGSC", u32 version, u32 N, little-endian float32 arrays (means, l_raw, intensity_raw,
/// opacity_raw, bg_intensity_raw, bg_opacity_raw, beta), u32 trailer length, JSON trailer.
/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const GaussianCloud& cloud, const CheckpointMeta& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace usplat
