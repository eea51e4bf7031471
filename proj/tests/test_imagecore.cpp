#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "deid/imagecore.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace deid;

namespace {

const std::filesystem::path kFixtures = DEID_FIXTURE_DIR;

// Largest bin population of one channel, counted independently of the library.
std::size_t max_bin_count(const Image& img, int c) {
    std::vector<std::size_t> counts(256, 0);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            counts[static_cast<int>(std::floor(std::clamp(img.at(y, x, c), 0.0, 1.0) * 255 + 0.5))]++;
    return *std::max_element(counts.begin(), counts.end());
}

}  // namespace

TEST_CASE("image construction checks shape") {
    CHECK_THROWS_AS(Image(0, 4, 1), ImageError);
    CHECK_THROWS_AS(Image(4, 4, 2), ImageError);
    CHECK_THROWS_AS(Image(2, 2, 1, std::vector<double>(3)), ImageError);
    const Image img(3, 5, 3, 0.25);
    CHECK(img.size() == 45);
    CHECK(img.values()[img.index(2, 4, 2)] == 0.25);
}

TEST_CASE("quantize rounds half up") {
    CHECK(quantize(0.0) == 0);
    CHECK(quantize(1.0) == 255);
    CHECK(quantize(0.5) == 128);
    CHECK(quantize(-0.3) == 0);
    CHECK(quantize(1.7) == 255);
    CHECK(quantize(10.0 / 255.0) == 10);
}

TEST_CASE("ascii PPM of 255 loads as ones") {
    const Image img = load_image(kFixtures / "white_2x2.ppm");
    CHECK(img.height() == 2);
    CHECK(img.width() == 2);
    CHECK(img.channels() == 3);
    for (double v : img.values()) CHECK(v == 1.0);
}

TEST_CASE("PNG pixel 128 loads as 128/255") {
    const Image img = load_image(kFixtures / "rgb128_1x1.png");
    REQUIRE(img.size() == 3);
    for (double v : img.values()) CHECK(v == 128.0 / 255.0);
    const Image gray = load_image(kFixtures / "gray_2x1.png");
    CHECK(gray.channels() == 1);
    CHECK(gray.at(0, 0, 0) == 0.0);
    CHECK(gray.at(0, 1, 0) == 1.0);
}

TEST_CASE("load errors") {
    testutil::TempDir dir;
    CHECK_THROWS_AS(load_image(dir / "missing.png"), ImageError);
    CHECK_THROWS_AS(load_image(kFixtures / "gray16_1x1.png"), ImageError);
    testutil::write_text(dir / "deep.pgm", "P2\n1 1\n65535\n1000\n");
    CHECK_THROWS_AS(load_image(dir / "deep.pgm"), ImageError);
    testutil::write_text(dir / "zero.pgm", "P2\n0 3\n255\n");
    CHECK_THROWS_AS(load_image(dir / "zero.pgm"), ImageError);
    testutil::write_text(dir / "junk.png", "not an image");
    CHECK_THROWS_AS(load_image(dir / "junk.png"), ImageError);
    CHECK_THROWS_AS(save_image(Image(2, 2, 1), dir / "nodir" / "x.png"), ImageError);
    CHECK_THROWS_AS(save_image(Image(2, 2, 1), dir / "x.bmp"), ImageError);
}

TEST_CASE("save writes round(v*255)") {
    testutil::TempDir dir;
    save_image(Image(2, 3, 1, 0.0), dir / "zero.pgm");
    const auto bytes = testutil::read_bytes(dir / "zero.pgm");
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
    for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);

    save_image(Image(1, 1, 3, 0.5), dir / "half.ppm");
    const auto half = testutil::read_bytes(dir / "half.ppm");
    CHECK(half.back() == 128);
}

TEST_CASE("round trip is byte exact for quantized images") {
    testutil::TempDir dir;
    for (const char* ext : {".png", ".ppm"}) {
        const Image img = oracle::random_quantized_image(8, 8, 3, 11);
        const auto first = dir / (std::string("a") + ext);
        const auto second = dir / (std::string("b") + ext);
        save_image(img, first);
        const Image back = load_image(first);
        CHECK(back == img);
        save_image(back, second);
        CHECK(testutil::read_bytes(first) == testutil::read_bytes(second));
    }
    const Image gray = oracle::random_quantized_image(5, 7, 1, 12);
    save_image(gray, dir / "g.png");
    CHECK(load_image(dir / "g.png") == gray);
}

TEST_CASE("reload of an arbitrary image is within half a level") {
    testutil::TempDir dir;
    const Image img = oracle::random_image(8, 8, 3, 5);
    save_image(img, dir / "r.png");
    const Image back = load_image(dir / "r.png");
    CHECK(oracle::max_abs_difference(img, back) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("histogram CDF is monotone and ends at one") {
    const Image img = oracle::random_image(9, 7, 3, 3);
    const Histogram h = compute_histogram(img);
    CHECK(h.channels == 3);
    CHECK(h.total == 63);
    for (int c = 0; c < 3; ++c) {
        for (int b = 1; b < Histogram::kBins; ++b) CHECK(h.cdf[c][b] >= h.cdf[c][b - 1]);
        CHECK(std::abs(h.cdf[c][255] - 1.0) <= 1e-9);
    }
    const auto ref = oracle::cdf(img);
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < 256; ++b) CHECK(h.cdf[c][b] == doctest::Approx(ref[c][b]).epsilon(1e-12));
}

TEST_CASE("histogram match of an image to itself") {
    const Image img = oracle::random_image(16, 16, 3, 21);
    const Image out = histogram_match(img, img);
    CHECK(oracle::max_abs_difference(img, out) <= 1.0 / 255.0);
}

TEST_CASE("constant source maps to the constant reference level") {
    const Image out = histogram_match(Image(4, 4, 1, 0.2), Image(5, 3, 1, 0.8));
    for (double v : out.values()) CHECK(v == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("matched CDF stays within the bin granularity bound") {
    // The output CDF at a level can miss the reference CDF by at most one
    // reference bin (nearest lookup) or one source bin (the next source level).
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Image src = oracle::random_image(16, 16, 3, 100 + seed);
        const Image ref = oracle::random_image(16, 16, 3, 200 + seed);
        const Image out = histogram_match(src, ref);
        const auto co = oracle::cdf(out), cr = oracle::cdf(ref);
        for (int c = 0; c < 3; ++c) {
            const double bound =
                static_cast<double>(std::max(max_bin_count(ref, c), max_bin_count(src, c))) / 256.0;
            double worst = 0;
            for (int b = 0; b < 256; ++b) worst = std::max(worst, std::abs(co[c][b] - cr[c][b]));
            CHECK(worst <= bound + 1e-12);
        }
    }
}

TEST_CASE("matched CDF within 2/256 on a 64x64 pair") {
    const Image src = oracle::random_image(64, 64, 3, 7);
    const Image ref = oracle::random_image(64, 64, 3, 8);
    CHECK(oracle::max_cdf_distance(histogram_match(src, ref), ref) <= 2.0 / 256.0);
}

TEST_CASE("histogram match is idempotent and stays in the reference range") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Image src = oracle::random_image(12, 12, 3, 300 + seed);
        Image ref = oracle::random_image(12, 12, 3, 400 + seed);
        for (double& v : ref.values()) v = 0.3 + 0.4 * v;
        const Image once = histogram_match(src, ref);
        const Image twice = histogram_match(once, ref);
        CHECK(once == twice);
        for (int c = 0; c < 3; ++c) {
            double lo = 1, hi = 0;
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x) lo = std::min(lo, ref.at(y, x, c)), hi = std::max(hi, ref.at(y, x, c));
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x) {
                    CHECK(once.at(y, x, c) >= lo);
                    CHECK(once.at(y, x, c) <= hi);
                }
        }
    }
}

TEST_CASE("histogram match rejects mismatched inputs") {
    CHECK_THROWS_AS(histogram_match(Image(2, 2, 1), Image(2, 2, 3)), ImageError);
    CHECK_THROWS_AS(histogram_match(Image(), Image(2, 2, 1)), ImageError);
}

TEST_CASE("bilinear resize adjoint is the transpose") {
    const Image x = oracle::random_image(7, 5, 3, 1);
    const Image g = oracle::random_image(11, 13, 3, 2);
    const Image ax = resize_bilinear(x, 11, 13);
    const Image atg = resize_bilinear_adjoint(g, 7, 5);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < ax.size(); ++i) lhs += ax.values()[i] * g.values()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * atg.values()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    CHECK(resize_bilinear(x, 7, 5) == x);
}

TEST_CASE("clamp01 bounds values") {
    const Image img = clamp01(Image(1, 3, 1, std::vector<double>{-0.5, 0.4, 1.5}));
    CHECK(img.values() == std::vector<double>{0.0, 0.4, 1.0});
}
