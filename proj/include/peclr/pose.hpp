#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "peclr/errors.hpp"
#include "peclr/geometry.hpp"
#include "peclr/synthhand.hpp"
#include "peclr/tensor.hpp"

namespace peclr {

using Joints3 = std::array<Vec3, kNumJoints>;
using Joints2 = std::array<Vec2, kNumJoints>;
using JointDepths = std::array<double, kNumJoints>;

// 2D keypoints plus root-relative depths; d_r[root] == 0 by convention in
// ground truth.
struct Pose25D {
    Joints2 j2d{};
    JointDepths dr{};

    // network head output layout: 21*(x,y) then 21 depths
    static Pose25D from_flat(std::span<const double> v) {
        if (v.size() != kNumJoints * 3) throw std::invalid_argument("Pose25D: expected 63 values");
        Pose25D p;
        for (int j = 0; j < kNumJoints; ++j)
            p.j2d[std::size_t(j)] = {v[std::size_t(2 * j)], v[std::size_t(2 * j + 1)]};
        for (int j = 0; j < kNumJoints; ++j) p.dr[std::size_t(j)] = v[std::size_t(2 * kNumJoints + j)];
        return p;
    }

    std::vector<double> to_flat() const {
        std::vector<double> v(kNumJoints * 3);
        for (int j = 0; j < kNumJoints; ++j) {
            v[std::size_t(2 * j)] = j2d[std::size_t(j)].x;
            v[std::size_t(2 * j + 1)] = j2d[std::size_t(j)].y;
            v[std::size_t(2 * kNumJoints + j)] = dr[std::size_t(j)];
        }
        return v;
    }
};

struct PoseLosses {
    double l_j2d = 0;  // mean |pred - gt| over joints and coordinates, px
    double l_dr = 0;   // mean |pred - gt| over joints, cm
    double total() const { return l_j2d + l_dr; }
};

inline PoseLosses pose_losses(const Pose25D& pred, const Pose25D& gt) {
    PoseLosses l;
    for (int j = 0; j < kNumJoints; ++j) {
        l.l_j2d += std::abs(pred.j2d[std::size_t(j)].x - gt.j2d[std::size_t(j)].x);
        l.l_j2d += std::abs(pred.j2d[std::size_t(j)].y - gt.j2d[std::size_t(j)].y);
        l.l_dr += std::abs(pred.dr[std::size_t(j)] - gt.dr[std::size_t(j)]);
    }
    l.l_j2d /= double(kNumJoints * 2);
    l.l_dr /= double(kNumJoints);
    return l;
}

// Exact subgradient of pose_losses().total() w.r.t. the flat prediction
// vector (sign at 0 taken as 0); this is the seed fed back into the network.
inline std::vector<double> pose_loss_grad(const Pose25D& pred, const Pose25D& gt) {
    auto sgn = [](double v) { return v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0; };
    std::vector<double> g(kNumJoints * 3);
    for (int j = 0; j < kNumJoints; ++j) {
        g[std::size_t(2 * j)] =
            sgn(pred.j2d[std::size_t(j)].x - gt.j2d[std::size_t(j)].x) / double(kNumJoints * 2);
        g[std::size_t(2 * j + 1)] =
            sgn(pred.j2d[std::size_t(j)].y - gt.j2d[std::size_t(j)].y) / double(kNumJoints * 2);
        g[std::size_t(2 * kNumJoints + j)] =
            sgn(pred.dr[std::size_t(j)] - gt.dr[std::size_t(j)]) / double(kNumJoints);
    }
    return g;
}

// Absolute root depth from one bone of known length: with rays
// x = K^-1(u,v,1) and depths d + t, solve ||x_n(d_n+t) - x_m(d_m+t)|| =
// ref_len for t and keep the larger (physical) root.
inline double recover_root_depth(const Joints2& j2d, const JointDepths& dr, const CameraK& K,
                                 int joint_n = kWrist, int joint_m = kMiddleMcp,
                                 double ref_len = 0.0) {
    if (ref_len <= 0) throw std::invalid_argument("recover_root_depth: ref_len must be > 0");
    Vec3 an = K.ray(j2d[std::size_t(joint_n)]);
    Vec3 am = K.ray(j2d[std::size_t(joint_m)]);
    double dn = dr[std::size_t(joint_n)], dm = dr[std::size_t(joint_m)];
    Vec3 p = an * dn - am * dm;
    Vec3 q = an - am;
    double A = q.dot(q);
    double B = 2.0 * p.dot(q);
    double C = p.dot(p) - ref_len * ref_len;
    if (A < 1e-14) {
        if (std::abs(B) < 1e-14) throw NumericError("recover_root_depth: degenerate reference bone");
        double t = -C / B;
        if (t <= 0) throw NumericError("recover_root_depth: no positive root");
        return t;
    }
    double disc = B * B - 4.0 * A * C;
    if (disc < 0) throw NumericError("recover_root_depth: negative discriminant (inconsistent inputs)");
    double t = (-B + std::sqrt(disc)) / (2.0 * A);
    if (t <= 0) throw NumericError("recover_root_depth: no positive root");
    return t;
}

// J3D_j = K^-1 (u,v,1) * (d_r_j + d_root)
inline Joints3 lift_to_3d(const Joints2& j2d, const JointDepths& dr, double d_root, const CameraK& K) {
    Joints3 out;
    for (int j = 0; j < kNumJoints; ++j) {
        double z = dr[std::size_t(j)] + d_root;
        if (z <= 0) throw NumericError("lift_to_3d: nonpositive absolute depth at joint " + std::to_string(j));
        out[std::size_t(j)] = K.ray(j2d[std::size_t(j)]) * z;
    }
    return out;
}

namespace detail {

// Jacobi eigendecomposition of a symmetric n x n matrix (n <= 4). Columns of
// V are eigenvectors.
template <int N>
inline void jacobi_eigen(std::array<std::array<double, N>, N> a, std::array<double, N>& evals,
                         std::array<std::array<double, N>, N>& V) {
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) V[i][j] = i == j ? 1.0 : 0.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < N; ++p)
            for (int q = p + 1; q < N; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-26) break;
        for (int p = 0; p < N; ++p)
            for (int q = p + 1; q < N; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < N; ++k) {
                    double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (int k = 0; k < N; ++k) {
                    double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (int k = 0; k < N; ++k) {
                    double vkp = V[k][p], vkq = V[k][q];
                    V[k][p] = c * vkp - s * vkq;
                    V[k][q] = s * vkp + c * vkq;
                }
            }
    }
    for (int i = 0; i < N; ++i) evals[i] = a[i][i];
}

}  // namespace detail

struct SimilarityTransform {
    double rotation[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    double scale = 1.0;
    Vec3 translation{0, 0, 0};

    Vec3 apply(const Vec3& p) const {
        Vec3 r{rotation[0][0] * p.x + rotation[0][1] * p.y + rotation[0][2] * p.z,
               rotation[1][0] * p.x + rotation[1][1] * p.y + rotation[1][2] * p.z,
               rotation[2][0] * p.x + rotation[2][1] * p.y + rotation[2][2] * p.z};
        return r * scale + translation;
    }
};

// Least-squares similarity (proper rotation + scale + translation) mapping
// `src` onto `dst`, via Horn's quaternion method. The quaternion
// parameterization only reaches SO(3), so det(R) = +1 by construction.
inline SimilarityTransform procrustes_fit(std::span<const Vec3> src, std::span<const Vec3> dst) {
    if (src.size() != dst.size() || src.size() < 3)
        throw std::invalid_argument("procrustes_fit: need >= 3 point pairs");
    std::size_t n = src.size();
    Vec3 cs{0, 0, 0}, cd{0, 0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        cs = cs + src[i];
        cd = cd + dst[i];
    }
    cs = cs * (1.0 / double(n));
    cd = cd * (1.0 / double(n));

    double S[3][3] = {};
    double src_ss = 0;
    double moment[3][3] = {};
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 x = src[i] - cs, y = dst[i] - cd;
        double xv[3] = {x.x, x.y, x.z}, yv[3] = {y.x, y.y, y.z};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                S[r][c] += xv[r] * yv[c];
                moment[r][c] += xv[r] * xv[c];
            }
        src_ss += x.dot(x);
    }
    // rank check on the source configuration: collinear or coincident points
    // leave the rotation underdetermined
    {
        std::array<std::array<double, 3>, 3> m{};
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) m[std::size_t(r)][std::size_t(c)] = moment[r][c];
        std::array<double, 3> ev{};
        std::array<std::array<double, 3>, 3> V{};
        detail::jacobi_eigen<3>(m, ev, V);
        std::sort(ev.begin(), ev.end());
        if (ev[2] <= 0 || ev[1] / ev[2] < 1e-12)
            throw std::invalid_argument("procrustes_fit: degenerate (rank-deficient) configuration");
    }

    std::array<std::array<double, 4>, 4> N{};
    N[0] = {S[0][0] + S[1][1] + S[2][2], S[1][2] - S[2][1], S[2][0] - S[0][2], S[0][1] - S[1][0]};
    N[1] = {S[1][2] - S[2][1], S[0][0] - S[1][1] - S[2][2], S[0][1] + S[1][0], S[2][0] + S[0][2]};
    N[2] = {S[2][0] - S[0][2], S[0][1] + S[1][0], -S[0][0] + S[1][1] - S[2][2], S[1][2] + S[2][1]};
    N[3] = {S[0][1] - S[1][0], S[2][0] + S[0][2], S[1][2] + S[2][1], -S[0][0] - S[1][1] + S[2][2]};
    std::array<double, 4> ev{};
    std::array<std::array<double, 4>, 4> V{};
    detail::jacobi_eigen<4>(N, ev, V);
    int best = 0;
    for (int i = 1; i < 4; ++i)
        if (ev[std::size_t(i)] > ev[std::size_t(best)]) best = i;
    double w = V[0][std::size_t(best)], x = V[1][std::size_t(best)], y = V[2][std::size_t(best)],
           z = V[3][std::size_t(best)];

    SimilarityTransform t;
    t.rotation[0][0] = 1 - 2 * (y * y + z * z);
    t.rotation[0][1] = 2 * (x * y - w * z);
    t.rotation[0][2] = 2 * (x * z + w * y);
    t.rotation[1][0] = 2 * (x * y + w * z);
    t.rotation[1][1] = 1 - 2 * (x * x + z * z);
    t.rotation[1][2] = 2 * (y * z - w * x);
    t.rotation[2][0] = 2 * (x * z - w * y);
    t.rotation[2][1] = 2 * (y * z + w * x);
    t.rotation[2][2] = 1 - 2 * (x * x + y * y);

    auto rot = [&](const Vec3& p) {
        return Vec3{t.rotation[0][0] * p.x + t.rotation[0][1] * p.y + t.rotation[0][2] * p.z,
                    t.rotation[1][0] * p.x + t.rotation[1][1] * p.y + t.rotation[1][2] * p.z,
                    t.rotation[2][0] * p.x + t.rotation[2][1] * p.y + t.rotation[2][2] * p.z};
    };
    double dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += rot(src[i] - cs).dot(dst[i] - cd);
    t.scale = dot / src_ss;
    t.translation = cd - rot(cs) * t.scale;
    return t;
}

inline Joints3 procrustes_align(const Joints3& pred, const Joints3& gt) {
    SimilarityTransform t = procrustes_fit(pred, gt);
    Joints3 out;
    for (int j = 0; j < kNumJoints; ++j) out[std::size_t(j)] = t.apply(pred[std::size_t(j)]);
    return out;
}

inline double epe_3d(const Joints3& a, const Joints3& b) {
    double s = 0;
    for (int j = 0; j < kNumJoints; ++j) s += (a[std::size_t(j)] - b[std::size_t(j)]).norm();
    return s / double(kNumJoints);
}

inline double epe_2d(const Joints2& a, const Joints2& b) {
    double s = 0;
    for (int j = 0; j < kNumJoints; ++j) s += (a[std::size_t(j)] - b[std::size_t(j)]).norm();
    return s / double(kNumJoints);
}

inline constexpr std::size_t kPckThresholds = 100;
inline constexpr double kPckMaxCm = 5.0;

// thresholds exclude 0 so a perfect prediction scores PCK 1 everywhere under
// the strict less-than convention
inline double pck_threshold(std::size_t k) { return kPckMaxCm * double(k + 1) / double(kPckThresholds); }

struct MetricReport {
    double epe = 0;      // 3D, cm
    double pa_epe = 0;   // 3D after procrustes, cm
    double auc = 0;      // mean of the pck values
    std::array<double, kPckThresholds> pck{};
    double epe_2d = 0;   // px
    bool aligned = false;
    std::size_t samples = 0;
    std::size_t root_recovery_failures = 0;
};

struct PoseEvalSample {
    Joints3 pred3d{}, gt3d{};
    Joints2 pred2d{}, gt2d{};
};

// Dataset-level metrics; the PCK/AUC distances come from the aligned
// predictions when `aligned` is set, from the raw ones otherwise.
inline MetricReport metrics(std::span<const PoseEvalSample> samples, bool aligned) {
    if (samples.empty()) throw std::invalid_argument("metrics: empty sample set");
    MetricReport r;
    r.aligned = aligned;
    r.samples = samples.size();
    std::vector<double> pck_dists;
    pck_dists.reserve(samples.size() * kNumJoints);
    for (const auto& s : samples) {
        Joints3 pa = procrustes_align(s.pred3d, s.gt3d);
        r.epe += epe_3d(s.pred3d, s.gt3d);
        r.pa_epe += epe_3d(pa, s.gt3d);
        r.epe_2d += epe_2d(s.pred2d, s.gt2d);
        const Joints3& basis = aligned ? pa : s.pred3d;
        for (int j = 0; j < kNumJoints; ++j)
            pck_dists.push_back((basis[std::size_t(j)] - s.gt3d[std::size_t(j)]).norm());
    }
    r.epe /= double(samples.size());
    r.pa_epe /= double(samples.size());
    r.epe_2d /= double(samples.size());
    for (std::size_t k = 0; k < kPckThresholds; ++k) {
        double thr = pck_threshold(k);
        std::size_t hits = 0;
        for (double d : pck_dists) hits += d < thr ? 1 : 0;
        r.pck[k] = double(hits) / double(pck_dists.size());
        r.auc += r.pck[k];
    }
    r.auc /= double(kPckThresholds);
    return r;
}

// ---- equivariance deviations ----

using KeypointPredictor = std::function<Joints2(const Tensor& image)>;

// L_equiv(I) = || t^g f(I) - f(t^g I) ||_2 over the flattened keypoints.
inline double equivariance_error(const KeypointPredictor& f, const Tensor& image,
                                 const AffineTransform2D& t_g) {
    Joints2 base = f(image);
    std::vector<Vec2> moved = apply_to_points(t_g, std::span<const Vec2>(base.data(), base.size()));
    Joints2 warped_pred = f(apply_to_image(t_g, image, 0.0));
    double s = 0;
    for (int j = 0; j < kNumJoints; ++j) {
        Vec2 d = moved[std::size_t(j)] - warped_pred[std::size_t(j)];
        s += d.x * d.x + d.y * d.y;
    }
    return std::sqrt(s);
}

struct EquivGridPoint {
    AffineTransform2D transform;
    double mean_equiv_a = 0;   // reference model (the denominator)
    double mean_equiv_b = 0;
    double mean_improv = 0;    // mean over images of (a - b) / a
    std::size_t counted = 0;
    std::size_t skipped = 0;   // images where the reference error < 1e-9
};

inline std::vector<EquivGridPoint> equivariance_improvement(const KeypointPredictor& model_a,
                                                            const KeypointPredictor& model_b,
                                                            std::span<const Tensor> images,
                                                            std::span<const AffineTransform2D> grid) {
    std::vector<EquivGridPoint> out;
    out.reserve(grid.size());
    for (const auto& t : grid) {
        EquivGridPoint gp;
        gp.transform = t;
        for (const auto& img : images) {
            double ea = equivariance_error(model_a, img, t);
            double eb = equivariance_error(model_b, img, t);
            gp.mean_equiv_a += ea;
            gp.mean_equiv_b += eb;
            if (ea < 1e-9) {
                ++gp.skipped;
                continue;
            }
            gp.mean_improv += (ea - eb) / ea;
            ++gp.counted;
        }
        if (!images.empty()) {
            gp.mean_equiv_a /= double(images.size());
            gp.mean_equiv_b /= double(images.size());
        }
        if (gp.counted) gp.mean_improv /= double(gp.counted);
        out.push_back(gp);
    }
    return out;
}

inline std::vector<AffineTransform2D> rotation_grid(double image_side, std::size_t points = 17,
                                                    double lo = -80, double hi = 80) {
    std::vector<AffineTransform2D> g;
    Vec2 c{(image_side - 1) / 2, (image_side - 1) / 2};
    for (std::size_t i = 0; i < points; ++i) {
        AffineTransform2D t;
        t.center = c;
        t.rotation_deg = points == 1 ? lo : lo + (hi - lo) * double(i) / double(points - 1);
        g.push_back(t);
    }
    return g;
}

inline std::vector<AffineTransform2D> translation_grid(double image_side, std::size_t per_axis = 5,
                                                       double lo = -25, double hi = 25) {
    std::vector<AffineTransform2D> g;
    Vec2 c{(image_side - 1) / 2, (image_side - 1) / 2};
    for (std::size_t iy = 0; iy < per_axis; ++iy)
        for (std::size_t ix = 0; ix < per_axis; ++ix) {
            AffineTransform2D t;
            t.center = c;
            t.translation.x = per_axis == 1 ? lo : lo + (hi - lo) * double(ix) / double(per_axis - 1);
            t.translation.y = per_axis == 1 ? lo : lo + (hi - lo) * double(iy) / double(per_axis - 1);
            g.push_back(t);
        }
    return g;
}

}  // namespace peclr
