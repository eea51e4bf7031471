#include "deid/imagecore.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace deid {

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
    if (height <= 0 || width <= 0)
        throw ImageError("image dimensions must be positive");
    if (channels != 1 && channels != 3)
        throw ImageError("image must have 1 or 3 channels, got " + std::to_string(channels));
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image::Image(int height, int width, int channels, std::vector<double> data)
    : Image(height, width, channels) {
    if (data.size() != data_.size())
        throw ImageError("image data length " + std::to_string(data.size()) + " does not match " +
                         std::to_string(data_.size()));
    data_ = std::move(data);
}

Image Image::channel(int c) const {
    Image out(height_, width_, 1);
    for (std::size_t i = 0; i < pixel_count(); ++i) out.data_[i] = data_[i * channels_ + c];
    return out;
}

void Image::set_channel(int c, const Image& plane) {
    if (plane.height_ != height_ || plane.width_ != width_ || plane.channels_ != 1)
        throw ImageError("set_channel: plane shape mismatch");
    for (std::size_t i = 0; i < pixel_count(); ++i) data_[i * channels_ + c] = plane.data_[i];
}

std::string shape_string(const Image& img) {
    std::ostringstream os;
    os << img.height() << "x" << img.width() << "x" << img.channels();
    return os.str();
}

Image clamp01(Image img) {
    for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

std::uint8_t quantize(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

namespace {

std::string lower_ext(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return ext;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image load_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ImageError("cannot open " + path.string());

    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw ImageError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError("libpng initialization failed");
    }
    std::vector<png_byte> buffer;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError("corrupt PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (depth != 8 && !(color == PNG_COLOR_TYPE_PALETTE || (color == PNG_COLOR_TYPE_GRAY && depth < 8))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError("unsupported PNG bit depth " + std::to_string(depth) + ": " + path.string());
    }
    if (width == 0 || height == 0) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError("zero-dimension image: " + path.string());
    }
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(static_cast<int>(height), static_cast<int>(width), channels);
    for (png_uint_32 y = 0; y < height; ++y)
        for (png_uint_32 x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(static_cast<int>(y), static_cast<int>(x), c) =
                    rows[y][x * channels + c] / 255.0;
    return img;
}

void save_png(const Image& img, const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ImageError("cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw ImageError("libpng initialization failed");
    }
    std::vector<png_byte> buffer(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) buffer[i] = quantize(img.values()[i]);
    std::vector<png_bytep> rows(img.height());
    const std::size_t stride = static_cast<std::size_t>(img.width()) * img.channels();
    for (int y = 0; y < img.height(); ++y) rows[y] = buffer.data() + y * stride;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageError("PNG write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width(), img.height(), 8,
                 img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

int pnm_int(std::istream& in, const std::filesystem::path& path) {
    std::string tok = pnm_token(in);
    try {
        std::size_t used = 0;
        int v = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ImageError("malformed PNM header in " + path.string());
    }
}

Image load_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open " + path.string());
    const std::string magic = pnm_token(in);
    int channels = 0;
    bool ascii = false;
    if (magic == "P2") channels = 1, ascii = true;
    else if (magic == "P3") channels = 3, ascii = true;
    else if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw ImageError("unsupported PNM magic '" + magic + "' in " + path.string());

    const int width = pnm_int(in, path);
    const int height = pnm_int(in, path);
    const int maxval = pnm_int(in, path);
    if (width <= 0 || height <= 0) throw ImageError("zero-dimension image: " + path.string());
    if (maxval != 255)
        throw ImageError("unsupported bit depth (maxval " + std::to_string(maxval) + "): " +
                         path.string());

    Image img(height, width, channels);
    auto& v = img.values();
    if (ascii) {
        for (double& px : v) {
            int s = pnm_int(in, path);
            if (s < 0 || s > 255) throw ImageError("PNM sample out of range in " + path.string());
            px = s / 255.0;
        }
    } else {
        std::vector<unsigned char> raw(v.size());
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (in.gcount() != static_cast<std::streamsize>(raw.size()))
            throw ImageError("truncated PNM payload in " + path.string());
        for (std::size_t i = 0; i < raw.size(); ++i) v[i] = raw[i] / 255.0;
    }
    return img;
}

void save_pnm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot write " + path.string());
    out << (img.channels() == 1 ? "P5" : "P6") << "\n"
        << img.width() << " " << img.height() << "\n255\n";
    std::vector<unsigned char> raw(img.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = quantize(img.values()[i]);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw ImageError("write failed: " + path.string());
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw ImageError("cannot open " + path.string());
    char head[2] = {0, 0};
    probe.read(head, 2);
    probe.close();
    if (static_cast<unsigned char>(head[0]) == 0x89 && head[1] == 'P') return load_png(path);
    if (head[0] == 'P') return load_pnm(path);
    throw ImageError("unsupported image format: " + path.string());
}

void save_image(const Image& img, const std::filesystem::path& path) {
    if (img.empty()) throw ImageError("cannot save an empty image");
    const std::string ext = lower_ext(path);
    if (ext == ".png") return save_png(img, path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return save_pnm(img, path);
    throw ImageError("unsupported output extension '" + ext + "'");
}

Histogram compute_histogram(const Image& img) {
    Histogram h;
    h.channels = img.channels();
    h.total = img.pixel_count();
    h.counts.assign(h.channels, {});
    h.cdf.assign(h.channels, {});
    for (std::size_t i = 0; i < img.pixel_count(); ++i)
        for (int c = 0; c < h.channels; ++c)
            ++h.counts[c][quantize(img.values()[i * h.channels + c])];
    for (int c = 0; c < h.channels; ++c) {
        std::size_t acc = 0;
        for (int b = 0; b < Histogram::kBins; ++b) {
            acc += h.counts[c][b];
            h.cdf[c][b] = h.total ? static_cast<double>(acc) / static_cast<double>(h.total) : 0.0;
        }
    }
    return h;
}

Image histogram_match(const Image& source, const Image& reference) {
    if (source.empty() || reference.empty()) throw ImageError("histogram_match: empty image");
    if (source.channels() != reference.channels())
        throw ImageError("histogram_match: channel mismatch (" + std::to_string(source.channels()) +
                         " vs " + std::to_string(reference.channels()) + ")");
    const Histogram hs = compute_histogram(source);
    const Histogram hr = compute_histogram(reference);
    const int channels = source.channels();

    Image out = source;
    for (int c = 0; c < channels; ++c) {
        std::vector<int> nonempty;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (int b = 0; b < Histogram::kBins; ++b)
            if (hr.counts[c][b] > 0) nonempty.push_back(b);
        for (std::size_t i = 0; i < reference.pixel_count(); ++i) {
            const double v = reference.values()[i * channels + c];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }

        std::array<double, Histogram::kBins> level{};
        for (int b = 0; b < Histogram::kBins; ++b) {
            // nonempty reference CDF values are strictly increasing, so the
            // first strict improvement wins and ties stay on the lower bin.
            int best = nonempty.front();
            double best_dist = std::abs(hr.cdf[c][best] - hs.cdf[c][b]);
            for (int r : nonempty) {
                const double d = std::abs(hr.cdf[c][r] - hs.cdf[c][b]);
                if (d < best_dist) best = r, best_dist = d;
            }
            level[b] = std::clamp(best / 255.0, lo, hi);
        }
        for (std::size_t i = 0; i < source.pixel_count(); ++i) {
            double& v = out.values()[i * channels + c];
            v = level[quantize(v)];
        }
    }
    return out;
}

namespace {

struct Tap {
    int i0, i1;
    double w0, w1;
};

// Pixel-center aligned source coordinate for each destination index.
std::vector<Tap> resize_taps(int src, int dst) {
    std::vector<Tap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        const double f = s - i0;
        taps[d] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

}  // namespace

Image resize_bilinear(const Image& img, int height, int width) {
    if (img.height() == height && img.width() == width) return img;
    Image out(height, width, img.channels());
    const auto ty = resize_taps(img.height(), height);
    const auto tx = resize_taps(img.width(), width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < img.channels(); ++c) {
                const Tap& a = ty[y];
                const Tap& b = tx[x];
                out.at(y, x, c) = a.w0 * (b.w0 * img.at(a.i0, b.i0, c) + b.w1 * img.at(a.i0, b.i1, c)) +
                                  a.w1 * (b.w0 * img.at(a.i1, b.i0, c) + b.w1 * img.at(a.i1, b.i1, c));
            }
    return out;
}

Image resize_bilinear_adjoint(const Image& grad, int src_height, int src_width) {
    if (grad.height() == src_height && grad.width() == src_width) return grad;
    Image out(src_height, src_width, grad.channels());
    const auto ty = resize_taps(src_height, grad.height());
    const auto tx = resize_taps(src_width, grad.width());
    for (int y = 0; y < grad.height(); ++y)
        for (int x = 0; x < grad.width(); ++x)
            for (int c = 0; c < grad.channels(); ++c) {
                const Tap& a = ty[y];
                const Tap& b = tx[x];
                const double g = grad.at(y, x, c);
                out.at(a.i0, b.i0, c) += a.w0 * b.w0 * g;
                out.at(a.i0, b.i1, c) += a.w0 * b.w1 * g;
                out.at(a.i1, b.i0, c) += a.w1 * b.w0 * g;
                out.at(a.i1, b.i1, c) += a.w1 * b.w1 * g;
            }
    return out;
}

double sample_bilinear(const Image& img, double x, double y, int c) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0;
    const double fy = y - y0;
    auto px = [&](int yy, int xx) {
        if (xx < 0 || yy < 0 || xx >= img.width() || yy >= img.height()) return 0.0;
        return img.at(yy, xx, c);
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

}  // namespace deid
