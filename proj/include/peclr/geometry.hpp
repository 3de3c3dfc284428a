#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "peclr/tensor.hpp"

namespace peclr {

struct Vec2 {
    double x = 0, y = 0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::hypot(x, y); }
};

struct Vec3 {
    double x = 0, y = 0, z = 0;
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return {x / n, y / n, z / n};
    }
};

struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
    double& operator()(int r, int c) { return m[std::size_t(r * 3 + c)]; }
    double operator()(int r, int c) const { return m[std::size_t(r * 3 + c)]; }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Vec2 apply(Vec2 p) const {
        return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
    }
};

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

// 2D similarity transform: scale and rotation about `center`, then
// translation. Exact closed-form inverse.
struct AffineTransform2D {
    double rotation_deg = 0.0;
    Vec2 translation{0, 0};
    double scale = 1.0;
    Vec2 center{0, 0};

    Mat3 to_matrix() const {
        double r = deg_to_rad(rotation_deg);
        double c = std::cos(r) * scale, s = std::sin(r) * scale;
        Mat3 m;
        m(0, 0) = c;
        m(0, 1) = -s;
        m(0, 2) = center.x - c * center.x + s * center.y + translation.x;
        m(1, 0) = s;
        m(1, 1) = c;
        m(1, 2) = center.y - s * center.x - c * center.y + translation.y;
        return m;
    }

    Vec2 apply(Vec2 p) const {
        if (rotation_deg == 0.0 && scale == 1.0) return p + translation;  // pivot is moot
        double r = deg_to_rad(rotation_deg);
        double c = std::cos(r), s = std::sin(r);
        Vec2 d = p - center;
        return Vec2{scale * (c * d.x - s * d.y), scale * (s * d.x + c * d.y)} + center + translation;
    }

    AffineTransform2D inverse() const {
        if (scale <= 0) throw std::invalid_argument("AffineTransform2D: scale must be > 0");
        double r = deg_to_rad(-rotation_deg);
        double c = std::cos(r), s = std::sin(r);
        Vec2 v{-translation.x / scale, -translation.y / scale};
        AffineTransform2D inv;
        inv.rotation_deg = -rotation_deg;
        inv.scale = 1.0 / scale;
        inv.center = center;
        inv.translation = {c * v.x - s * v.y, s * v.x + c * v.y};
        return inv;
    }

    // a after b (a ∘ b), expressed with pivot at the origin.
    static AffineTransform2D compose(const AffineTransform2D& a, const AffineTransform2D& b) {
        Mat3 m = a.to_matrix() * b.to_matrix();
        AffineTransform2D r;
        r.rotation_deg = a.rotation_deg + b.rotation_deg;
        r.scale = a.scale * b.scale;
        r.center = {0, 0};
        r.translation = {m(0, 2), m(1, 2)};
        return r;
    }

    bool is_identity_rotation_translation() const {
        return rotation_deg == 0.0 && translation.x == 0.0 && translation.y == 0.0;
    }
};

inline std::vector<Vec2> apply_to_points(const AffineTransform2D& t, std::span<const Vec2> pts) {
    std::vector<Vec2> out;
    out.reserve(pts.size());
    for (Vec2 p : pts) out.push_back(t.apply(p));
    return out;
}

// A projection vector z of length 2m viewed as m points in the plane; the
// object the latent-space inverses act on.
struct LatentProjection {
    std::vector<Vec2> points;

    LatentProjection() = default;
    explicit LatentProjection(std::vector<Vec2> pts) : points(std::move(pts)) {
        if (points.size() < 2) throw std::invalid_argument("LatentProjection: need m >= 2 points");
    }

    static LatentProjection from_flat(std::span<const double> flat) {
        if (flat.size() % 2 || flat.size() < 4)
            throw std::invalid_argument("LatentProjection: flat length must be even and >= 4");
        std::vector<Vec2> pts(flat.size() / 2);
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {flat[2 * i], flat[2 * i + 1]};
        return LatentProjection(std::move(pts));
    }

    std::vector<double> to_flat() const {
        std::vector<double> out(points.size() * 2);
        for (std::size_t i = 0; i < points.size(); ++i) {
            out[2 * i] = points[i].x;
            out[2 * i + 1] = points[i].y;
        }
        return out;
    }

    Vec2 centroid() const {
        Vec2 c{0, 0};
        for (Vec2 p : points) c = c + p;
        return c * (1.0 / double(points.size()));
    }

    // max(z) - min(z) over all 2m coordinates jointly
    double coordinate_span() const {
        double lo = points[0].x, hi = points[0].x;
        for (Vec2 p : points) {
            lo = std::min({lo, p.x, p.y});
            hi = std::max({hi, p.x, p.y});
        }
        return hi - lo;
    }
};

// v_hat = (v / L) * L_z. A constant projection (L_z == 0) degenerates to zero
// translation rather than erroring; it occurs transiently at initialization.
inline Vec2 normalize_translation(Vec2 v, double image_side, const LatentProjection& z) {
    if (image_side <= 0) throw std::invalid_argument("normalize_translation: image side must be > 0");
    double span = z.coordinate_span();
    if (span == 0.0) return {0, 0};
    return v * (span / image_side);
}

// Undo a geometric image transform on a latent projection: remove the
// (normalized) translation, then rotate back about the centroid of the
// translation-removed point set. Scale never enters: cosine similarity makes
// the loss invariant to it.
//
// Equivalently z~_k = R(-theta) (z_k - c) + c - v_hat with c = centroid(z);
// that form is what the differentiable loss path replicates.
inline LatentProjection invert_in_latent(const AffineTransform2D& t_g, const LatentProjection& z,
                                         double image_side, bool normalize = true) {
    if (t_g.is_identity_rotation_translation()) return z;  // scale alone is a no-op
    Vec2 v_hat = normalize ? normalize_translation(t_g.translation, image_side, z) : t_g.translation;
    Vec2 c = z.centroid();
    double r = deg_to_rad(-t_g.rotation_deg);
    double cs = std::cos(r), sn = std::sin(r);
    std::vector<Vec2> out(z.points.size());
    for (std::size_t i = 0; i < z.points.size(); ++i) {
        Vec2 d = z.points[i] - c;
        out[i] = Vec2{cs * d.x - sn * d.y, sn * d.x + cs * d.y} + c - v_hat;
    }
    return LatentProjection(std::move(out));
}

// Bilinear inverse warp of an [H,W,3] image; samples outside the source take
// `fill`. Pixel (row, col) maps to the point (x=col, y=row).
inline Tensor apply_to_image(const AffineTransform2D& t, const Tensor& img, double fill) {
    if (img.rank() != 3 || img.dim(2) != 3)
        throw std::invalid_argument("apply_to_image: expected [H,W,3], got " + shape_str(img.shape()));
    std::size_t H = img.dim(0), W = img.dim(1);
    if (H < 8 || W < 8) throw std::invalid_argument("apply_to_image: image must be at least 8x8");
    AffineTransform2D inv = t.inverse();
    Tensor out(img.shape());
    const double* src = img.data();
    double* dst = out.data();
    for (std::size_t row = 0; row < H; ++row) {
        for (std::size_t col = 0; col < W; ++col) {
            Vec2 s = inv.apply({double(col), double(row)});
            double fx = std::floor(s.x), fy = std::floor(s.y);
            long x0 = long(fx), y0 = long(fy);
            double ax = s.x - fx, ay = s.y - fy;
            auto tap = [&](long yy, long xx) -> const double* {
                if (xx < 0 || yy < 0 || xx >= long(W) || yy >= long(H)) return nullptr;
                return src + (std::size_t(yy) * W + std::size_t(xx)) * 3;
            };
            const double* p00 = tap(y0, x0);
            const double* p01 = tap(y0, x0 + 1);
            const double* p10 = tap(y0 + 1, x0);
            const double* p11 = tap(y0 + 1, x0 + 1);
            double* o = dst + (row * W + col) * 3;
            for (int ch = 0; ch < 3; ++ch) {
                double v00 = p00 ? p00[ch] : fill;
                double v01 = p01 ? p01[ch] : fill;
                double v10 = p10 ? p10[ch] : fill;
                double v11 = p11 ? p11[ch] : fill;
                o[ch] = (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11);
            }
        }
    }
    return out;
}

}  // namespace peclr
