#pragma once

// Independent reference implementations used as test oracles. They favour
// plain loops and different summation strategies over speed.

#include <cstdint>
#include <functional>
#include <vector>

#include "deid/blend.hpp"
#include "deid/diffmodel.hpp"
#include "deid/facemask.hpp"
#include "deid/imagecore.hpp"

namespace oracle {

// Uniform random image in [0,1] from a seeded std::mt19937_64.
deid::Image random_image(int h, int w, int c, std::uint64_t seed);
// Random image snapped to the 8-bit grid.
deid::Image random_quantized_image(int h, int w, int c, std::uint64_t seed);

// Single-pass raw-moment SSIM in long double over luminance.
double ssim(const deid::Image& x, const deid::Image& y);
double psnr(const deid::Image& x, const deid::Image& y);

// Kernel of the Gaussian transfer function computed by an explicit inverse DFT.
std::vector<double> discrete_gaussian_kernel(int h, int w, double sigma);
// Continuous Gaussian sampled on the integer grid and wrapped onto an h x w torus.
std::vector<double> sampled_gaussian_kernel(int h, int w, double sigma);
// Direct circular convolution of every channel with a kernel laid out as h x w.
deid::Image circular_convolve(const deid::Image& img, const std::vector<double>& kernel);
// Gaussian filter by direct convolution with the discrete kernel.
deid::Image gaussian_filter(const deid::Image& img, double sigma);

// The band-merge pseudocode executed one statement at a time with direct-convolution filters.
deid::Image merge_straight_line(const deid::Image& a, const deid::Image& b, const deid::BlendMask& m,
                                const std::vector<double>& sigmas);

// Central finite differences of f around x with step h.
std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, double h);
double relative_error(const std::vector<double>& a, const std::vector<double>& b);
double rms_difference(const deid::Image& a, const deid::Image& b);
double max_abs_difference(const deid::Image& a, const deid::Image& b);

// Explicit dense Jacobian of a toy generator by matrix products of its weights.
std::vector<std::vector<double>> toy_generator_jacobian(const deid::ToyGenerator& g, const std::vector<double>& z);
std::vector<std::vector<double>> toy_extractor_jacobian(const deid::ToyExtractor& e, const deid::Image& img);

// Number of scores strictly below tau.
std::size_t count_below(const std::vector<double>& scores, double tau);

// Per-channel CDF of an image counted on the 8-bit grid.
std::vector<std::vector<double>> cdf(const deid::Image& img);
double max_cdf_distance(const deid::Image& a, const deid::Image& b);

// Synthetic face: elliptical skin region with eyes and mouth on a noisy background,
// plus generic landmarks with explicit anchors.
struct SyntheticFace {
    deid::Image image;
    deid::LandmarkSet landmarks;
};
SyntheticFace synthetic_face(std::uint64_t seed, int size = 32, int channels = 3);

}  // namespace oracle
