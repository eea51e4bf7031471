#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deid {

struct ImageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense raster, row-major, channel-interleaved. Intensities nominally in [0,1];
// intermediate results (band images, gradients) may leave that range.
class Image {
public:
    Image() = default;
    Image(int height, int width, int channels, double fill = 0.0);
    Image(int height, int width, int channels, std::vector<double> data);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Image& other) const {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    // Extract channel c as a single-channel image.
    Image channel(int c) const;
    void set_channel(int c, const Image& plane);

    friend bool operator==(const Image&, const Image&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

std::string shape_string(const Image& img);

Image clamp01(Image img);

// Quantize to the 8-bit grid: round(clamp(v)*255) with round-half-up.
std::uint8_t quantize(double v);

// PNG (8-bit gray/RGB, alpha dropped) and PNM (P2/P3/P5/P6, maxval 255).
Image load_image(const std::filesystem::path& path);

// Writes PNG for .png, binary PGM/PPM for .pgm/.ppm/.pnm (P5 for 1 channel, P6 for 3).
void save_image(const Image& img, const std::filesystem::path& path);

struct Histogram {
    static constexpr int kBins = 256;
    int channels = 0;
    std::size_t total = 0;
    std::vector<std::array<std::size_t, kBins>> counts;
    std::vector<std::array<double, kBins>> cdf;
};

// Bins each channel on the 8-bit grid (same rule as quantize()).
Histogram compute_histogram(const Image& img);

// Per-channel remap of `source` so its 256-bin CDF approximates `reference`'s.
// Each source bin goes to the nonempty reference bin whose CDF is nearest to the
// source CDF (ties to the lower bin); results are clamped to the reference range.
Image histogram_match(const Image& source, const Image& reference);

// Bilinear resampling with pixel-center alignment and edge clamping. Linear in
// the image, so resize_bilinear_adjoint is its exact transpose.
Image resize_bilinear(const Image& img, int height, int width);
Image resize_bilinear_adjoint(const Image& grad, int src_height, int src_width);

// Bilinear sample at continuous coordinates; zero outside the image.
double sample_bilinear(const Image& img, double x, double y, int c);

}  // namespace deid
