#pragma once

#include <span>
#include <string>
#include <vector>

#include "usplat/data.hpp"
#include "usplat/image.hpp"
#include "usplat/model.hpp"
#include "usplat/rasterizer.hpp"

namespace usplat {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 1e-4;  // (0.01 * 1)^2
inline constexpr double kSsimC2 = 9e-4;  // (0.03 * 1)^2

/// Mean SSIM over every fully covered 11x11 Gaussian window (no padding). Range-1 images.
double ssim(const SliceImage& a, const SliceImage& b);
double ssim(std::span<const float> a, std::span<const float> b, int width, int height);

/// Same value as ssim(); also writes d ssim / d a into `d_a` (resized to width * height).
double ssim_with_grad(std::span<const float> a, std::span<const float> b, int width, int height,
                      std::vector<double>& d_a);

/// 10 log10(1 / MSE); +infinity when the images are identical.
double psnr(const SliceImage& a, const SliceImage& b);
double psnr(std::span<const float> a, std::span<const float> b);

struct FamilyStats {
  ViewFamily family = ViewFamily::Axial;
  int count = 0;
  double ssim_mean = 0, ssim_std = 0;
  /// Over finite values only; `psnr_infinite` counts exact matches.
  double psnr_mean = 0, psnr_std = 0;
  int psnr_infinite = 0;
};

struct EvalReport {
  std::vector<FamilyStats> families;
  std::string timestamp;  // ISO 8601 UTC

  const FamilyStats& family(ViewFamily f) const;
  /// Unweighted mean of the per-family SSIM means.
  double mean_ssim() const;
  std::string to_json() const;
};

struct EvalOptions {
  std::vector<ViewFamily> families{ViewFamily::Axial, ViewFamily::Coronal, ViewFamily::Sagittal};
  RenderOptions render{};
};

/// Renders n linearly spaced planes per family and scores them against sample_slice.
EvalReport evaluate_views(const GaussianCloud& cloud, const Volume& volume, int n_per_axis,
                          const EvalOptions& options = {});

/// Scores a cloud against a list of reference slices at their own poses.
FamilyStats evaluate_slices(const GaussianCloud& cloud, const std::vector<SliceImage>& references,
                            const RenderOptions& options = {});

}  // namespace usplat
