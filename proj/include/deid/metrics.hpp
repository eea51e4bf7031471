#pragma once

#include <cstddef>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "deid/imagecore.hpp"

namespace deid {

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SsimConstants {
    double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    double c2 = (0.03 * 255.0) * (0.03 * 255.0);
};

enum class SsimMode { Global, Windowed };

// Luminance on the 8-bit scale; 3-channel images use 0.299 R + 0.587 G + 0.114 B.
std::vector<double> luminance255(const Image& img);

// Single-window SSIM over the whole image (means, variances and covariance of
// all pixels). Windowed mode averages an 11x11, sigma 1.5 Gaussian-window SSIM
// over every fully contained window; images smaller than the window fall back
// to the global statistic.
double ssim(const Image& x, const Image& y, SsimConstants k = {}, SsimMode mode = SsimMode::Global);

// Mean squared error on the 8-bit scale, over all pixels and channels.
double mse255(const Image& x, const Image& y);

// 10 log10(255^2 / MSE); +infinity when the images are identical.
double psnr(const Image& x, const Image& y);

double attack_success_rate(std::size_t successes, std::size_t total);

struct MetricReport {
    double ssim = 0.0;
    double psnr = 0.0;  // +inf marker for identical images
    double mse = 0.0;
};

MetricReport compare_images(const Image& x, const Image& y, SsimConstants k = {},
                            SsimMode mode = SsimMode::Global);

// PSNR is written as the string "inf" when infinite.
nlohmann::json to_json(const MetricReport& r);
std::string format_psnr(double psnr);

}  // namespace deid
