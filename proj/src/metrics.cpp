#include "deid/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

namespace deid {

namespace {

void check_dims(const Image& x, const Image& y) {
    if (!x.same_shape(y))
        throw MetricError("image dimensions differ: " + shape_string(x) + " vs " + shape_string(y));
    if (x.empty()) throw MetricError("empty image");
}

double ssim_formula(double mx, double my, double vx, double vy, double cxy, const SsimConstants& k) {
    return ((2 * mx * my + k.c1) * (2 * cxy + k.c2)) / ((mx * mx + my * my + k.c1) * (vx + vy + k.c2));
}

double global_ssim(const std::vector<double>& a, const std::vector<double>& b, const SsimConstants& k) {
    const double n = static_cast<double>(a.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mx += a[i], my += b[i];
    mx /= n, my /= n;
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double dx = a[i] - mx, dy = b[i] - my;
        vx += dx * dx, vy += dy * dy, cxy += dx * dy;
    }
    return ssim_formula(mx, my, vx / n, vy / n, cxy / n, k);
}

double windowed_ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                     const SsimConstants& k) {
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    if (h < kWin || w < kWin) return global_ssim(a, b, k);
    double win[kWin * kWin];
    double total = 0;
    for (int j = 0; j < kWin; ++j)
        for (int i = 0; i < kWin; ++i) {
            const double dy = j - kWin / 2, dx = i - kWin / 2;
            total += win[j * kWin + i] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
        }
    for (double& v : win) v /= total;

    double acc = 0;
    std::size_t count = 0;
    for (int y0 = 0; y0 + kWin <= h; ++y0)
        for (int x0 = 0; x0 + kWin <= w; ++x0) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int j = 0; j < kWin; ++j)
                for (int i = 0; i < kWin; ++i) {
                    const double g = win[j * kWin + i];
                    const std::size_t p = static_cast<std::size_t>(y0 + j) * w + (x0 + i);
                    mx += g * a[p], my += g * b[p];
                    sxx += g * a[p] * a[p], syy += g * b[p] * b[p], sxy += g * a[p] * b[p];
                }
            acc += ssim_formula(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my, k);
            ++count;
        }
    return acc / static_cast<double>(count);
}

}  // namespace

std::vector<double> luminance255(const Image& img) {
    std::vector<double> out(img.pixel_count());
    const auto& v = img.values();
    if (img.channels() == 1) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * 255.0;
    } else {
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = (0.299 * v[3 * i] + 0.587 * v[3 * i + 1] + 0.114 * v[3 * i + 2]) * 255.0;
    }
    return out;
}

double ssim(const Image& x, const Image& y, SsimConstants k, SsimMode mode) {
    check_dims(x, y);
    if (!(k.c1 > 0) || !(k.c2 > 0)) throw MetricError("SSIM constants must be positive");
    const auto a = luminance255(x);
    const auto b = luminance255(y);
    if (mode == SsimMode::Windowed) return windowed_ssim(a, b, x.height(), x.width(), k);
    return global_ssim(a, b, k);
}

double mse255(const Image& x, const Image& y) {
    check_dims(x, y);
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = (x.values()[i] - y.values()[i]) * 255.0;
        acc += d * d;
    }
    return acc / static_cast<double>(x.size());
}

double psnr(const Image& x, const Image& y) {
    const double mse = mse255(x, y);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double attack_success_rate(std::size_t successes, std::size_t total) {
    if (total == 0) throw MetricError("attack success rate needs at least one test image");
    if (successes > total) throw MetricError("more successes than test images");
    return static_cast<double>(successes) / static_cast<double>(total);
}

MetricReport compare_images(const Image& x, const Image& y, SsimConstants k, SsimMode mode) {
    MetricReport r;
    r.ssim = ssim(x, y, k, mode);
    r.mse = mse255(x, y);
    r.psnr = r.mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(255.0 * 255.0 / r.mse);
    return r;
}

std::string format_psnr(double p) {
    if (std::isinf(p)) return "inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", p);
    return buf;
}

nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    j["ssim"] = r.ssim;
    j["mse"] = r.mse;
    if (std::isinf(r.psnr)) j["psnr"] = "inf";
    else j["psnr"] = r.psnr;
    return j;
}

}  // namespace deid
