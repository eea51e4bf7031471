#include "deid/facemask.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace deid {

using nlohmann::json;

std::string to_string(LandmarkSchema schema) {
    return schema == LandmarkSchema::Pt68 ? "68pt" : "generic";
}

namespace {

Point2 parse_point(const json& j, std::size_t index) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        throw MaskError("malformed landmark at index " + std::to_string(index));
    Point2 p{j[0].get<double>(), j[1].get<double>()};
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw MaskError("non-finite landmark at index " + std::to_string(index));
    return p;
}

Point2 centroid(const std::vector<Point2>& pts, std::size_t first, std::size_t last) {
    Point2 c;
    for (std::size_t i = first; i <= last; ++i) c.x += pts[i].x, c.y += pts[i].y;
    const double n = static_cast<double>(last - first + 1);
    return {c.x / n, c.y / n};
}

double cross(Point2 o, Point2 a, Point2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

double dist(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

LandmarkSet parse_landmarks(const std::string& json_text, std::optional<Dims> bounds) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw MaskError(std::string("malformed landmark file: ") + e.what());
    }

    LandmarkSet lm;
    const json* points = nullptr;
    std::optional<std::string> schema_tag;
    if (doc.is_array()) {
        points = &doc;
    } else if (doc.is_object() && doc.contains("points")) {
        points = &doc["points"];
        if (doc.contains("schema")) {
            if (!doc["schema"].is_string()) throw MaskError("malformed landmark file: schema");
            schema_tag = doc["schema"].get<std::string>();
        }
    } else {
        throw MaskError("malformed landmark file: expected a point array or {\"points\": [...]}");
    }
    if (!points->is_array()) throw MaskError("malformed landmark file: points must be an array");

    for (std::size_t i = 0; i < points->size(); ++i) lm.points.push_back(parse_point((*points)[i], i));
    if (lm.points.size() < 3)
        throw MaskError("insufficient landmarks: need at least 3, got " +
                        std::to_string(lm.points.size()));

    if (schema_tag) {
        if (*schema_tag == "68pt") lm.schema = LandmarkSchema::Pt68;
        else if (*schema_tag == "generic") lm.schema = LandmarkSchema::Generic;
        else throw MaskError("unknown landmark schema '" + *schema_tag + "'");
    } else {
        lm.schema = lm.points.size() == 68 ? LandmarkSchema::Pt68 : LandmarkSchema::Generic;
    }
    if (lm.schema == LandmarkSchema::Pt68 && lm.points.size() != 68)
        throw MaskError("68pt schema requires 68 points, got " + std::to_string(lm.points.size()));

    if (doc.is_object() && doc.contains("anchors")) {
        const json& a = doc["anchors"];
        if (!a.is_object() || !a.contains("left_eye") || !a.contains("right_eye") || !a.contains("mouth"))
            throw MaskError("malformed landmark file: anchors need left_eye, right_eye, mouth");
        lm.anchors = FaceAnchors{parse_point(a["left_eye"], 0), parse_point(a["right_eye"], 1),
                                 parse_point(a["mouth"], 2)};
    }
    validate_landmarks(lm, bounds);
    return lm;
}

LandmarkSet load_landmarks(const std::filesystem::path& path, std::optional<Dims> bounds) {
    std::ifstream in(path);
    if (!in) throw MaskError("cannot open landmark file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_landmarks(ss.str(), bounds);
}

void validate_landmarks(const LandmarkSet& lm, std::optional<Dims> bounds) {
    if (lm.points.size() < 3)
        throw MaskError("insufficient landmarks: need at least 3, got " +
                        std::to_string(lm.points.size()));
    if (!bounds) return;
    for (std::size_t i = 0; i < lm.points.size(); ++i) {
        const Point2& p = lm.points[i];
        if (p.x < 0 || p.y < 0 || p.x >= bounds->width || p.y >= bounds->height) {
            std::ostringstream os;
            os << "landmark " << i << " at (" << p.x << ", " << p.y << ") is outside the "
               << bounds->width << "x" << bounds->height << " image";
            throw MaskError(os.str());
        }
    }
}

FaceRect face_rect_unclamped(const LandmarkSet& lm, double margin) {
    if (lm.points.empty()) throw MaskError("face_rect: no landmarks");
    if (margin < 0) throw MaskError("face_rect: negative margin");
    double minx = lm.points[0].x, maxx = minx, miny = lm.points[0].y, maxy = miny;
    for (const Point2& p : lm.points) {
        minx = std::min(minx, p.x), maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y), maxy = std::max(maxy, p.y);
    }
    // the pixel holding the extreme point is part of the box
    const double bx0 = std::floor(minx), bx1 = std::floor(maxx) + 1.0;
    const double by0 = std::floor(miny), by1 = std::floor(maxy) + 1.0;
    const double gx = margin * (bx1 - bx0), gy = margin * (by1 - by0);
    FaceRect r;
    r.x0 = static_cast<int>(std::ceil(bx0 - gx));
    r.x1 = static_cast<int>(std::floor(bx1 + gx));
    r.y0 = static_cast<int>(std::ceil(by0 - gy));
    r.y1 = static_cast<int>(std::floor(by1 + gy));
    return r;
}

FaceRect face_rect(const LandmarkSet& lm, double margin, Dims image) {
    FaceRect r = face_rect_unclamped(lm, margin);
    r.x0 = std::clamp(r.x0, 0, image.width);
    r.x1 = std::clamp(r.x1, 0, image.width);
    r.y0 = std::clamp(r.y0, 0, image.height);
    r.y1 = std::clamp(r.y1, 0, image.height);
    if (r.x0 >= r.x1 || r.y0 >= r.y1) throw MaskError("degenerate face rectangle");
    return r;
}

namespace {

void check_rect(const FaceRect& rect, Dims dims) {
    if (rect.x0 >= rect.x1 || rect.y0 >= rect.y1)
        throw MaskError("face rectangle has zero area");
    if (rect.x0 < 0 || rect.y0 < 0 || rect.x1 > dims.width || rect.y1 > dims.height)
        throw MaskError("face rectangle lies outside the image");
}

}  // namespace

Image apply_face_mask(const Image& img, const FaceRect& rect) {
    check_rect(rect, {img.height(), img.width()});
    Image out(img.height(), img.width(), img.channels());
    for (int y = rect.y0; y < rect.y1; ++y)
        for (int x = rect.x0; x < rect.x1; ++x)
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y, x, c);
    return out;
}

Image crop_image(const Image& img, const FaceRect& rect) {
    check_rect(rect, {img.height(), img.width()});
    Image out(rect.height(), rect.width(), img.channels());
    for (int y = 0; y < rect.height(); ++y)
        for (int x = 0; x < rect.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                out.at(y, x, c) = img.at(rect.y0 + y, rect.x0 + x, c);
    return out;
}

BlendMask build_blend_mask(const FaceRect& rect, Dims dims, int feather) {
    check_rect(rect, dims);
    if (feather < 0) throw MaskError("feather must be non-negative");
    if (2 * feather >= std::min(rect.width(), rect.height()))
        throw MaskError("feather " + std::to_string(feather) +
                        " must be less than half the rectangle's smaller side");
    BlendMask m{dims.height, dims.width,
                std::vector<double>(static_cast<std::size_t>(dims.height) * dims.width, 0.0)};
    for (int y = rect.y0; y < rect.y1; ++y)
        for (int x = rect.x0; x < rect.x1; ++x) {
            const int d = std::min({x - rect.x0, rect.x1 - 1 - x, y - rect.y0, rect.y1 - 1 - y});
            m.weights[static_cast<std::size_t>(y) * dims.width + x] =
                feather == 0 ? 1.0 : std::min(1.0, (d + 1.0) / (feather + 1.0));
        }
    return m;
}

BlendMask full_mask(Dims dims, double value) {
    return {dims.height, dims.width,
            std::vector<double>(static_cast<std::size_t>(dims.height) * dims.width, value)};
}

Point2 SimilarityTransform::apply(Point2 p) const {
    const double c = scale * std::cos(rotation), s = scale * std::sin(rotation);
    return {c * p.x - s * p.y + tx, s * p.x + c * p.y + ty};
}

Point2 SimilarityTransform::invert(Point2 q) const {
    const double c = std::cos(rotation) / scale, s = std::sin(rotation) / scale;
    const double x = q.x - tx, y = q.y - ty;
    return {c * x + s * y, -s * x + c * y};
}

AlignTemplate AlignTemplate::canonical(int size) {
    const double s = size;
    return {{{0.35 * s, 0.40 * s}, {0.65 * s, 0.40 * s}, {0.50 * s, 0.75 * s}}, size, size};
}

FaceAnchors face_anchors(const LandmarkSet& lm) {
    if (lm.anchors) return *lm.anchors;
    if (lm.schema != LandmarkSchema::Pt68)
        throw MaskError("alignment needs a 68pt landmark set or explicit anchors");
    // 68-point layout: 36-41 left eye, 42-47 right eye, 48-67 mouth
    return {centroid(lm.points, 36, 41), centroid(lm.points, 42, 47), centroid(lm.points, 48, 67)};
}

SimilarityTransform fit_similarity(const FaceAnchors& from, const FaceAnchors& to) {
    const Point2 p[3] = {from.left_eye, from.right_eye, from.mouth};
    const Point2 q[3] = {to.left_eye, to.right_eye, to.mouth};

    const double extent = std::max({dist(p[0], p[1]), dist(p[1], p[2]), dist(p[0], p[2])});
    const double tol = 1e-9 * std::max(1.0, extent);
    if (dist(p[0], p[1]) <= tol || dist(p[1], p[2]) <= tol || dist(p[0], p[2]) <= tol)
        throw MaskError("degenerate anchors: coincident points");
    if (std::abs(cross(p[0], p[1], p[2])) <= tol * extent)
        throw MaskError("degenerate anchors: collinear points");

    Point2 pc{(p[0].x + p[1].x + p[2].x) / 3, (p[0].y + p[1].y + p[2].y) / 3};
    Point2 qc{(q[0].x + q[1].x + q[2].x) / 3, (q[0].y + q[1].y + q[2].y) / 3};
    double a = 0, b = 0, norm = 0;
    for (int i = 0; i < 3; ++i) {
        const double px = p[i].x - pc.x, py = p[i].y - pc.y;
        const double qx = q[i].x - qc.x, qy = q[i].y - qc.y;
        a += px * qx + py * qy;
        b += px * qy - py * qx;
        norm += px * px + py * py;
    }
    const double sc = a / norm, ss = b / norm;
    SimilarityTransform t;
    t.scale = std::hypot(sc, ss);
    if (t.scale <= 0) throw MaskError("degenerate anchors: zero scale");
    t.rotation = std::atan2(ss, sc);
    t.tx = qc.x - (sc * pc.x - ss * pc.y);
    t.ty = qc.y - (ss * pc.x + sc * pc.y);
    return t;
}

AlignedFace align_face(const Image& img, const LandmarkSet& lm, const AlignTemplate& tmpl) {
    const SimilarityTransform t = fit_similarity(face_anchors(lm), tmpl.anchors);
    Image out(tmpl.height, tmpl.width, img.channels());
    for (int y = 0; y < tmpl.height; ++y)
        for (int x = 0; x < tmpl.width; ++x) {
            const Point2 src = t.invert({static_cast<double>(x), static_cast<double>(y)});
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = sample_bilinear(img, src.x, src.y, c);
        }
    return {std::move(out), t};
}

Image warp_to_source(const Image& aligned, const SimilarityTransform& t, Dims source) {
    Image out(source.height, source.width, aligned.channels());
    for (int y = 0; y < source.height; ++y)
        for (int x = 0; x < source.width; ++x) {
            const Point2 q = t.apply({static_cast<double>(x), static_cast<double>(y)});
            for (int c = 0; c < aligned.channels(); ++c) out.at(y, x, c) = sample_bilinear(aligned, q.x, q.y, c);
        }
    return out;
}

LandmarkSet transform_landmarks(const LandmarkSet& lm, const SimilarityTransform& t) {
    LandmarkSet out = lm;
    for (Point2& p : out.points) p = t.apply(p);
    if (out.anchors) {
        out.anchors->left_eye = t.apply(out.anchors->left_eye);
        out.anchors->right_eye = t.apply(out.anchors->right_eye);
        out.anchors->mouth = t.apply(out.anchors->mouth);
    }
    return out;
}

}  // namespace deid
