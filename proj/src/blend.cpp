#include "deid/blend.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>

namespace deid {

FilterBank FilterBank::standard(int levels) {
    FilterBank bank;
    bank.levels = levels;
    bank.sigmas.resize(std::max(levels, 0));
    for (int l = 2; l <= levels; ++l) bank.sigmas[l - 1] = std::ldexp(1.0, l - 2);
    bank.validate();
    return bank;
}

void FilterBank::validate() const {
    if (levels < 2) throw BlendError("filter bank needs at least 2 levels");
    if (static_cast<int>(sigmas.size()) != levels) throw BlendError("filter bank sigma count mismatch");
    if (sigmas[0] < 0) throw BlendError("negative sigma");
    for (int l = 2; l < levels; ++l)
        if (!(sigmas[l] > sigmas[l - 1])) throw BlendError("filter bank sigmas must increase");
}

std::string to_string(MaskRole role) {
    return role == MaskRole::SelectsGenerated ? "generated" : "input";
}

MaskRole parse_mask_role(const std::string& s) {
    if (s == "generated") return MaskRole::SelectsGenerated;
    if (s == "input") return MaskRole::SelectsInput;
    throw BlendError("unknown mask role '" + s + "' (expected generated|input)");
}

namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

class Plane2d {
public:
    Plane2d(int height, int width)
        : h_(height), w_(width), wc_(width / 2 + 1),
          real_(fftw_alloc_real(static_cast<std::size_t>(height) * width)),
          spec_(fftw_alloc_complex(static_cast<std::size_t>(height) * wc_)) {
        std::lock_guard lock(planner_mutex());
        fwd_ = fftw_plan_dft_r2c_2d(h_, w_, real_, spec_, FFTW_ESTIMATE);
        inv_ = fftw_plan_dft_c2r_2d(h_, w_, spec_, real_, FFTW_ESTIMATE);
    }
    ~Plane2d() {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(inv_);
        fftw_free(real_);
        fftw_free(spec_);
    }
    Plane2d(const Plane2d&) = delete;
    Plane2d& operator=(const Plane2d&) = delete;

    std::vector<std::complex<double>> forward(const Image& img, int c) {
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) real_[static_cast<std::size_t>(y) * w_ + x] = img.at(y, x, c);
        fftw_execute(fwd_);
        std::vector<std::complex<double>> out(static_cast<std::size_t>(h_) * wc_);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = {spec_[i][0], spec_[i][1]};
        return out;
    }

    void filtered_inverse(const std::vector<std::complex<double>>& spectrum, double sigma, Image& dst, int c) {
        const double k = -2.0 * std::numbers::pi * std::numbers::pi * sigma * sigma;
        for (int j = 0; j < h_; ++j) {
            const double v = (j <= h_ / 2 ? j : j - h_) / static_cast<double>(h_);
            for (int i = 0; i < wc_; ++i) {
                const double u = i / static_cast<double>(w_);
                const double gain = std::exp(k * (u * u + v * v));
                const std::size_t idx = static_cast<std::size_t>(j) * wc_ + i;
                spec_[idx][0] = spectrum[idx].real() * gain;
                spec_[idx][1] = spectrum[idx].imag() * gain;
            }
        }
        fftw_execute(inv_);
        const double norm = 1.0 / (static_cast<double>(h_) * w_);
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) dst.at(y, x, c) = real_[static_cast<std::size_t>(y) * w_ + x] * norm;
    }

private:
    int h_, w_, wc_;
    double* real_;
    fftw_complex* spec_;
    fftw_plan fwd_{};
    fftw_plan inv_{};
};

void check_same_dims(const Image& a, const Image& b, const BlendMask& m) {
    if (!a.same_shape(b))
        throw BlendError("merge inputs differ in shape: " + shape_string(a) + " vs " + shape_string(b));
    if (m.height != a.height() || m.width != a.width())
        throw BlendError("blend mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                         " but images are " + shape_string(a));
}

// out += w * x + (1 - w) * y, with the single-channel weight broadcast.
void accumulate_mix(Image& out, const Image& w, const Image& x, const Image& y) {
    const int ch = out.channels();
    for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        const double wp = w.values()[p];
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = p * ch + c;
            out.values()[i] += wp * x.values()[i] + (1.0 - wp) * y.values()[i];
        }
    }
}

Image difference(const Image& a, const Image& b) {
    Image d = a;
    for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] -= b.values()[i];
    return d;
}

}  // namespace

std::vector<Image> gaussian_stack(const Image& img, const std::vector<double>& sigmas) {
    std::vector<Image> out;
    out.reserve(sigmas.size());
    for (double s : sigmas) {
        if (!(s >= 0) || !std::isfinite(s)) throw BlendError("sigma must be finite and non-negative");
        out.emplace_back(img.height(), img.width(), img.channels());
    }
    Plane2d plane(img.height(), img.width());
    for (int c = 0; c < img.channels(); ++c) {
        const auto spectrum = plane.forward(img, c);
        for (std::size_t l = 0; l < sigmas.size(); ++l) {
            if (sigmas[l] == 0.0) {
                out[l].set_channel(c, img.channel(c));
                continue;
            }
            plane.filtered_inverse(spectrum, sigmas[l], out[l], c);
        }
    }
    return out;
}

Image gaussian_filter(const Image& img, double sigma) {
    if (!(sigma >= 0)) throw BlendError("sigma must be non-negative");
    if (sigma == 0.0) return img;
    return gaussian_stack(img, {sigma}).front();
}

Image merge_literal(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank) {
    check_same_dims(a, b, m);
    bank.validate();
    const auto ga = gaussian_stack(a, bank.sigmas);
    const auto gb = gaussian_stack(b, bank.sigmas);
    const auto gm = gaussian_stack(m.as_image(), bank.sigmas);

    Image result(a.height(), a.width(), a.channels(), 0.0);
    for (int l = 2; l <= bank.levels; ++l) {
        const Image la = difference(ga[l - 1], ga[l - 2]);
        const Image lb = difference(gb[l - 1], gb[l - 2]);
        accumulate_mix(result, gm[l - 2], la, lb);
    }
    return result;
}

Image base_band(const Image& face, const Image& back, const BlendMask& m, const FilterBank& bank) {
    check_same_dims(face, back, m);
    bank.validate();
    const double coarsest = bank.sigmas.back();
    Image out(face.height(), face.width(), face.channels(), 0.0);
    accumulate_mix(out, gaussian_filter(m.as_image(), coarsest), gaussian_filter(face, coarsest),
                   gaussian_filter(back, coarsest));
    return out;
}

Image merge_complete(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank,
                     MaskRole role) {
    check_same_dims(a, b, m);
    bank.validate();
    const Image& face = role == MaskRole::SelectsGenerated ? b : a;
    const Image& back = role == MaskRole::SelectsGenerated ? a : b;
    const auto gf = gaussian_stack(face, bank.sigmas);
    const auto gk = gaussian_stack(back, bank.sigmas);
    const auto gm = gaussian_stack(m.as_image(), bank.sigmas);

    Image result(a.height(), a.width(), a.channels(), 0.0);
    for (int l = 2; l <= bank.levels; ++l)
        accumulate_mix(result, gm[l - 2], difference(gf[l - 2], gf[l - 1]), difference(gk[l - 2], gk[l - 1]));
    const int n = bank.levels - 1;
    accumulate_mix(result, gm[n], gf[n], gk[n]);
    return result;
}

Image merge_and_match(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank,
                      MaskRole role) {
    return clamp01(histogram_match(merge_complete(a, b, m, bank, role), a));
}

}  // namespace deid
