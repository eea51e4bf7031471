#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deid/imagecore.hpp"

namespace deid {

struct MaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

enum class LandmarkSchema { Generic, Pt68 };

std::string to_string(LandmarkSchema schema);

struct FaceAnchors {
    Point2 left_eye;
    Point2 right_eye;
    Point2 mouth;
};

struct LandmarkSet {
    std::vector<Point2> points;
    LandmarkSchema schema = LandmarkSchema::Generic;
    std::optional<FaceAnchors> anchors;  // explicit anchors from the file, if any
};

struct Dims {
    int height = 0;
    int width = 0;
};

// Half-open integer bounds [x0,x1) x [y0,y1).
struct FaceRect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    friend bool operator==(const FaceRect&, const FaceRect&) = default;
};

// Single-channel weights in [0,1]; 1 selects the face.
struct BlendMask {
    int height = 0;
    int width = 0;
    std::vector<double> weights;

    double at(int y, int x) const { return weights[static_cast<std::size_t>(y) * width + x]; }
    Image as_image() const { return Image(height, width, 1, weights); }
};

// Accepts either {"schema": ..., "points": [[x,y],...], "anchors": {...}} or a bare
// array of points. When `bounds` is given every point must lie inside it.
LandmarkSet parse_landmarks(const std::string& json_text, std::optional<Dims> bounds = {});
LandmarkSet load_landmarks(const std::filesystem::path& path, std::optional<Dims> bounds = {});
void validate_landmarks(const LandmarkSet& lm, std::optional<Dims> bounds);

// Bounding box of the points (inclusive pixels), grown by margin*size per side
// (rounded inward to whole pixels), then clamped to the image.
FaceRect face_rect(const LandmarkSet& lm, double margin, Dims image);
FaceRect face_rect_unclamped(const LandmarkSet& lm, double margin);

Image apply_face_mask(const Image& img, const FaceRect& rect);
Image crop_image(const Image& img, const FaceRect& rect);

// Weight 1 inside the rect, 0 outside. With feather f > 0 the outer f pixel rings
// inside the rect ramp as (d+1)/(f+1), d being the distance to the rect border.
BlendMask build_blend_mask(const FaceRect& rect, Dims dims, int feather = 0);
BlendMask full_mask(Dims dims, double value);

struct SimilarityTransform {
    double scale = 1.0;
    double rotation = 0.0;  // radians, counter-clockwise in x-right/y-down pixel space
    double tx = 0.0;
    double ty = 0.0;

    Point2 apply(Point2 p) const;
    Point2 invert(Point2 q) const;
};

struct AlignTemplate {
    FaceAnchors anchors;
    int height = 0;
    int width = 0;

    static AlignTemplate canonical(int size);
};

struct AlignedFace {
    Image image;
    SimilarityTransform transform;  // source -> aligned coordinates
};

// Left-eye/right-eye/mouth anchors of a landmark set: explicit anchors if
// present, otherwise the 68-point eye and mouth centroids.
FaceAnchors face_anchors(const LandmarkSet& lm);

// Least-squares similarity (rotation, uniform scale, translation) taking `from` onto `to`.
SimilarityTransform fit_similarity(const FaceAnchors& from, const FaceAnchors& to);

AlignedFace align_face(const Image& img, const LandmarkSet& lm, const AlignTemplate& tmpl);

// Resamples an aligned-frame image back into the source frame.
Image warp_to_source(const Image& aligned, const SimilarityTransform& t, Dims source);
LandmarkSet transform_landmarks(const LandmarkSet& lm, const SimilarityTransform& t);

}  // namespace deid
