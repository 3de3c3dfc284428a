#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "peclr/errors.hpp"
#include "peclr/geometry.hpp"
#include "peclr/rng.hpp"
#include "peclr/tensor.hpp"

namespace peclr {

struct CameraK {
    double fx = 0, fy = 0, cx = 0, cy = 0;

    static CameraK default_for(std::size_t image_side) {
        double s = double(image_side);
        return {1.2 * s, 1.2 * s, (s - 1.0) / 2.0, (s - 1.0) / 2.0};
    }

    Vec2 project(const Vec3& p) const {
        if (p.z <= 0) throw std::invalid_argument("project: joint behind camera");
        return {fx * p.x / p.z + cx, fy * p.y / p.z + cy};
    }

    // unit-depth ray through pixel (u,v): K^-1 (u,v,1)
    Vec3 ray(Vec2 px) const { return {(px.x - cx) / fx, (px.y - cy) / fy, 1.0}; }
};

// 21-keypoint convention: wrist, then thumb..pinky, each MCP,PIP,DIP,TIP.
inline constexpr int kNumJoints = 21;
inline constexpr int kWrist = 0;
inline constexpr int kMiddleMcp = 9;

struct JointLimits {
    Range flexion{0, 0};
    Range abduction{0, 0};
};

struct HandSkeleton {
    std::array<int, kNumJoints> parent;
    std::array<double, kNumJoints> bone_cm;   // length of bone to parent; 0 at root
    std::array<JointLimits, kNumJoints> limits;
    std::array<double, 5> splay_deg;          // per-finger metacarpal direction
    std::array<double, 5> axis_tilt_deg;      // out-of-plane tilt of the flexion axis

    static HandSkeleton standard() {
        HandSkeleton s{};
        s.parent[0] = -1;
        s.bone_cm[0] = 0;
        const double lengths[5][4] = {
            {4.0, 3.5, 3.0, 2.5},   // thumb
            {9.0, 4.0, 2.5, 2.0},   // index
            {8.5, 4.5, 2.8, 2.2},   // middle
            {8.0, 4.2, 2.6, 2.0},   // ring
            {7.5, 3.2, 2.0, 1.8},   // pinky
        };
        s.splay_deg = {60, 18, 0, -14, -30};
        s.axis_tilt_deg = {40, 0, 0, 0, 0};
        for (int f = 0; f < 5; ++f) {
            for (int k = 0; k < 4; ++k) {
                int j = 1 + f * 4 + k;
                s.parent[std::size_t(j)] = k == 0 ? 0 : j - 1;
                s.bone_cm[std::size_t(j)] = lengths[f][k];
            }
            int mcp = 1 + f * 4;
            bool thumb = f == 0;
            s.limits[std::size_t(mcp)] = {{0, thumb ? 50.0 : 80.0}, thumb ? Range{-25, 25} : Range{-15, 15}};
            s.limits[std::size_t(mcp + 1)] = {{0, thumb ? 60.0 : 100.0}, {0, 0}};
            s.limits[std::size_t(mcp + 2)] = {{0, 70.0}, {0, 0}};
        }
        return s;
    }

    bool valid() const {
        if (parent[0] != -1) return false;
        for (int j = 1; j < kNumJoints; ++j)
            if (parent[std::size_t(j)] < 0 || parent[std::size_t(j)] >= j || bone_cm[std::size_t(j)] <= 0)
                return false;
        return true;
    }
};

// MCP flexion+abduction and PIP/DIP flexion per finger.
struct HandAngles {
    std::array<double, 5> mcp_flex{}, mcp_abd{}, pip_flex{}, dip_flex{};
};

namespace detail {

inline Vec3 rotate_axis(const Vec3& v, const Vec3& axis, double angle_rad) {
    double c = std::cos(angle_rad), s = std::sin(angle_rad);
    return v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c));
}

inline Vec3 rot_z(const Vec3& v, double deg) {
    double r = deg_to_rad(deg);
    double c = std::cos(r), s = std::sin(r);
    return {c * v.x - s * v.y, s * v.x + c * v.y, v.z};
}

}  // namespace detail

// Forward kinematics in the canonical palm frame (wrist at origin, +y along
// the middle finger, +z out of the palm). Zero angles give the flat open hand.
inline std::array<Vec3, kNumJoints> hand_fk(const HandSkeleton& skel, const HandAngles& a) {
    std::array<Vec3, kNumJoints> j{};
    j[0] = {0, 0, 0};
    for (int f = 0; f < 5; ++f) {
        double splay = skel.splay_deg[std::size_t(f)];
        double tilt = deg_to_rad(skel.axis_tilt_deg[std::size_t(f)]);
        Vec3 meta_dir = detail::rot_z({0, 1, 0}, splay);
        int mcp = 1 + f * 4;
        j[std::size_t(mcp)] = j[0] + meta_dir * skel.bone_cm[std::size_t(mcp)];
        // abduction swings the finger in-plane; flexion curls about the
        // (possibly tilted) per-finger axis
        Vec3 base = detail::rot_z({0, 1, 0}, splay + a.mcp_abd[std::size_t(f)]);
        Vec3 axis = detail::rot_z({std::cos(tilt), 0, std::sin(tilt)}, splay + a.mcp_abd[std::size_t(f)]);
        double cum = 0;
        const double flex[3] = {a.mcp_flex[std::size_t(f)], a.pip_flex[std::size_t(f)],
                                a.dip_flex[std::size_t(f)]};
        for (int k = 1; k <= 3; ++k) {
            cum += flex[k - 1];
            Vec3 dir = detail::rotate_axis(base, axis, deg_to_rad(-cum));
            j[std::size_t(mcp + k)] = j[std::size_t(mcp + k - 1)] + dir * skel.bone_cm[std::size_t(mcp + k)];
        }
    }
    return j;
}

inline HandAngles sample_hand_angles(Rng& rng, const HandSkeleton& skel) {
    HandAngles a;
    for (int f = 0; f < 5; ++f) {
        int mcp = 1 + f * 4;
        a.mcp_flex[std::size_t(f)] = skel.limits[std::size_t(mcp)].flexion.sample(rng);
        a.mcp_abd[std::size_t(f)] = skel.limits[std::size_t(mcp)].abduction.sample(rng);
        a.pip_flex[std::size_t(f)] = skel.limits[std::size_t(mcp + 1)].flexion.sample(rng);
        a.dip_flex[std::size_t(f)] = skel.limits[std::size_t(mcp + 2)].flexion.sample(rng);
    }
    return a;
}

// Articulated pose with random global orientation, root placed 30-60 cm in
// front of the camera.
inline std::array<Vec3, kNumJoints> sample_pose(Rng& rng, const HandSkeleton& skel) {
    HandAngles angles = sample_hand_angles(rng, skel);
    auto joints = hand_fk(skel, angles);
    // uniform rotation from a normalized quaternion
    double q[4];
    for (auto& v : q) v = rng.normal();
    double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (auto& v : q) v /= qn;
    double w = q[0], x = q[1], y = q[2], z = q[3];
    double R[3][3] = {
        {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
        {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
        {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)},
    };
    Vec3 root{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(30, 60)};
    for (auto& p : joints) {
        Vec3 r{R[0][0] * p.x + R[0][1] * p.y + R[0][2] * p.z,
               R[1][0] * p.x + R[1][1] * p.y + R[1][2] * p.z,
               R[2][0] * p.x + R[2][1] * p.y + R[2][2] * p.z};
        p = r + root;
    }
    return joints;
}

struct PoseSample {
    Tensor image;  // [H,W,3], values in [0,255]
    std::array<Vec3, kNumJoints> j3d;
    std::array<Vec2, kNumJoints> j2d;
    std::array<double, kNumJoints> dr;
    CameraK K;
    bool labeled = true;
};

namespace detail {

struct Capsule {
    Vec2 a, b;
    double za, zb;
    double radius_px;
    double shade;
};

inline double dist_to_segment(Vec2 p, Vec2 a, Vec2 b, double& tout) {
    Vec2 ab = b - a;
    double len2 = ab.x * ab.x + ab.y * ab.y;
    double t = len2 > 0 ? ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    tout = t;
    Vec2 q = a + ab * t;
    return (p - q).norm();
}

}  // namespace detail

// Rasterizes the skeleton as anti-aliased capsules over a seeded smooth
// background. Labels are exact: J2D is the perspective projection of J3D and
// dr the root-relative depth.
inline PoseSample render(const std::array<Vec3, kNumJoints>& j3d, const CameraK& K,
                         std::size_t image_side, std::uint64_t style_seed) {
    for (const auto& p : j3d)
        if (p.z <= 0) throw std::invalid_argument("render: joint behind camera");

    PoseSample out;
    out.j3d = j3d;
    out.K = K;
    for (int j = 0; j < kNumJoints; ++j) {
        out.j2d[std::size_t(j)] = K.project(j3d[std::size_t(j)]);
        out.dr[std::size_t(j)] = j3d[std::size_t(j)].z - j3d[0].z;
    }

    std::size_t H = image_side, W = image_side;
    Tensor img({H, W, 3});
    Rng style(style_seed);

    // background: a few low-frequency color waves
    double base[3], amp[3][3], kx[3], ky[3], ph[3];
    for (int c = 0; c < 3; ++c) base[c] = style.uniform(40, 150);
    for (int w = 0; w < 3; ++w) {
        kx[w] = style.uniform(-0.10, 0.10);
        ky[w] = style.uniform(-0.10, 0.10);
        ph[w] = style.uniform(0, 6.28318);
        for (int c = 0; c < 3; ++c) amp[w][c] = style.uniform(5, 30);
    }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double* p = img.data() + (y * W + x) * 3;
            for (int c = 0; c < 3; ++c) {
                double v = base[c];
                for (int w = 0; w < 3; ++w)
                    v += amp[w][c] * std::sin(kx[w] * double(x) + ky[w] * double(y) + ph[w]);
                p[c] = std::clamp(v, 0.0, 255.0);
            }
        }

    double skin[3] = {style.uniform(175, 235), style.uniform(125, 185), style.uniform(95, 150)};

    const double radii_cm[4] = {1.1, 0.65, 0.5, 0.4};
    const HandSkeleton skel = HandSkeleton::standard();
    std::vector<detail::Capsule> caps;
    double zmin = 1e300, zmax = -1e300;
    for (const auto& p : j3d) {
        zmin = std::min(zmin, p.z);
        zmax = std::max(zmax, p.z);
    }
    for (int j = 1; j < kNumJoints; ++j) {
        int pa = skel.parent[std::size_t(j)];
        const Vec3& A = j3d[std::size_t(pa)];
        const Vec3& B = j3d[std::size_t(j)];
        detail::Capsule c;
        c.a = K.project(A);
        c.b = K.project(B);
        c.za = A.z;
        c.zb = B.z;
        double zm = 0.5 * (A.z + B.z);
        c.radius_px = radii_cm[(j - 1) % 4] * K.fx / zm;
        c.shade = 0.72 + 0.28 * (1.0 - (zm - zmin) / std::max(1e-9, zmax - zmin));
        caps.push_back(c);
    }
    std::sort(caps.begin(), caps.end(),
              [](const detail::Capsule& a, const detail::Capsule& b) {
                  double za = 0.5 * (a.za + a.zb), zb = 0.5 * (b.za + b.zb);
                  return za > zb;  // far to near
              });

    std::vector<double> zbuf(H * W, 1e300);
    for (const auto& c : caps) {
        long x0 = long(std::floor(std::min(c.a.x, c.b.x) - c.radius_px - 1));
        long x1 = long(std::ceil(std::max(c.a.x, c.b.x) + c.radius_px + 1));
        long y0 = long(std::floor(std::min(c.a.y, c.b.y) - c.radius_px - 1));
        long y1 = long(std::ceil(std::max(c.a.y, c.b.y) + c.radius_px + 1));
        x0 = std::max(x0, 0L);
        y0 = std::max(y0, 0L);
        x1 = std::min(x1, long(W) - 1);
        y1 = std::min(y1, long(H) - 1);
        for (long y = y0; y <= y1; ++y)
            for (long x = x0; x <= x1; ++x) {
                double t;
                double d = detail::dist_to_segment({double(x), double(y)}, c.a, c.b, t);
                double cov = std::clamp(c.radius_px - d + 0.5, 0.0, 1.0);
                if (cov <= 0) continue;
                double z = c.za + (c.zb - c.za) * t;
                std::size_t idx = std::size_t(y) * W + std::size_t(x);
                if (z >= zbuf[idx]) continue;
                double* p = img.data() + idx * 3;
                for (int ch = 0; ch < 3; ++ch)
                    p[ch] = (1.0 - cov) * p[ch] + cov * std::clamp(skin[ch] * c.shade, 0.0, 255.0);
                if (cov > 0.5) zbuf[idx] = z;
            }
    }
    out.image = std::move(img);
    return out;
}

// ---- dataset on disk ----
//
// images/img_%06zu.pxi : "PXI1", u32 H, u32 W, u32 C (little-endian), u8 data
// labels.txt          : per-sample text records
// manifest.txt        : generation parameters, enough to regenerate exactly

namespace detail {

inline void put_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_image_file(const std::filesystem::path& path, const Tensor& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write("PXI1", 4);
    detail::put_u32(f, std::uint32_t(img.dim(0)));
    detail::put_u32(f, std::uint32_t(img.dim(1)));
    detail::put_u32(f, std::uint32_t(img.dim(2)));
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.0, 255.0)));
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_image_file(const std::filesystem::path& path, std::size_t& H,
                                                 std::size_t& W, std::size_t& C) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "PXI1")
        throw FormatError("bad image magic in " + path.string());
    H = detail::get_u32(f);
    W = detail::get_u32(f);
    C = detail::get_u32(f);
    std::vector<std::uint8_t> data(H * W * C);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size()));
    if (!f) throw FormatError("truncated image data in " + path.string());
    return data;
}

struct DatasetSample {
    std::array<Vec3, kNumJoints> j3d;
    std::array<Vec2, kNumJoints> j2d;
    std::array<double, kNumJoints> dr;
    CameraK K;
    bool labeled = false;
};

struct Dataset {
    std::size_t image_side = 0;
    std::vector<DatasetSample> samples;
    std::vector<std::vector<std::uint8_t>> images;  // H*W*3 each

    std::size_t size() const { return samples.size(); }

    Tensor image_tensor(std::size_t i) const {
        std::size_t s = image_side;
        Tensor t({s, s, 3});
        const auto& raw = images[i];
        for (std::size_t k = 0; k < raw.size(); ++k) t[k] = double(raw[k]);
        return t;
    }
};

struct DatasetConfig {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    double labeled_fraction = 1.0;
    std::size_t image_side = 64;
};

inline std::filesystem::path make_dataset(const std::filesystem::path& dir, const DatasetConfig& cfg) {
    if (cfg.labeled_fraction < 0 || cfg.labeled_fraction > 1)
        throw std::invalid_argument("make_dataset: labeled_fraction must be in [0,1]");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw IoError("cannot create " + (dir / "images").string());

    HandSkeleton skel = HandSkeleton::standard();
    CameraK K = CameraK::default_for(cfg.image_side);
    Rng root(cfg.seed);
    std::size_t n_labeled = std::size_t(std::floor(double(cfg.n) * cfg.labeled_fraction));

    std::ofstream labels(dir / "labels.txt");
    if (!labels) throw IoError("cannot open " + (dir / "labels.txt").string());
    for (std::size_t i = 0; i < cfg.n; ++i) {
        Rng pose_rng = root.substream("pose", i);
        auto j3d = sample_pose(pose_rng, skel);
        Rng style_rng = root.substream("style", i);
        PoseSample s = render(j3d, K, cfg.image_side, style_rng.next_u64());
        char name[32];
        std::snprintf(name, sizeof name, "img_%06zu.pxi", i);
        write_image_file(dir / "images" / name, s.image);

        labels << "sample " << i << "\n";
        labels << "labeled " << (i < n_labeled ? 1 : 0) << "\n";
        labels << "K " << detail::fmt(K.fx) << " " << detail::fmt(K.fy) << " " << detail::fmt(K.cx)
               << " " << detail::fmt(K.cy) << "\n";
        labels << "J3D\n";
        for (const auto& p : s.j3d)
            labels << detail::fmt(p.x) << " " << detail::fmt(p.y) << " " << detail::fmt(p.z) << "\n";
        labels << "J2D\n";
        for (const auto& p : s.j2d) labels << detail::fmt(p.x) << " " << detail::fmt(p.y) << "\n";
        labels << "DR\n";
        for (double d : s.dr) labels << detail::fmt(d) << "\n";
        labels << "end\n";
    }
    if (!labels) throw IoError("write failed: " + (dir / "labels.txt").string());
    labels.close();

    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("cannot open " + (dir / "manifest.txt").string());
    manifest << "format = peclr-dataset-v1\n";
    manifest << "n = " << cfg.n << "\n";
    manifest << "seed = " << cfg.seed << "\n";
    manifest << "labeled_fraction = " << detail::fmt(cfg.labeled_fraction) << "\n";
    manifest << "image_side = " << cfg.image_side << "\n";
    manifest.close();
    return dir / "manifest.txt";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir / "manifest.txt"))
        throw IoError("no dataset manifest at " + (dir / "manifest.txt").string());
    std::ifstream manifest(dir / "manifest.txt");
    std::size_t n = 0, side = 0;
    bool have_n = false;
    std::string line;
    while (std::getline(manifest, line)) {
        std::istringstream ss(line);
        std::string key, eq;
        ss >> key >> eq;
        if (key == "n") {
            ss >> n;
            have_n = true;
        } else if (key == "image_side") {
            ss >> side;
        }
    }
    if (!have_n || side == 0) throw FormatError("invalid dataset manifest in " + dir.string());

    Dataset ds;
    ds.image_side = side;
    std::ifstream labels(dir / "labels.txt");
    if (!labels) throw IoError("cannot open " + (dir / "labels.txt").string());
    for (std::size_t i = 0; i < n; ++i) {
        DatasetSample s;
        std::string tok;
        std::size_t idx;
        labels >> tok >> idx;
        if (tok != "sample" || idx != i) throw FormatError("labels.txt: expected sample " + std::to_string(i));
        int lab;
        labels >> tok >> lab;
        s.labeled = lab != 0;
        labels >> tok >> s.K.fx >> s.K.fy >> s.K.cx >> s.K.cy;
        labels >> tok;
        for (auto& p : s.j3d) labels >> p.x >> p.y >> p.z;
        labels >> tok;
        for (auto& p : s.j2d) labels >> p.x >> p.y;
        labels >> tok;
        for (auto& d : s.dr) labels >> d;
        labels >> tok;
        if (tok != "end" || !labels) throw FormatError("labels.txt: malformed record " + std::to_string(i));
        ds.samples.push_back(s);

        char name[32];
        std::snprintf(name, sizeof name, "img_%06zu.pxi", i);
        std::size_t H, W, C;
        ds.images.push_back(read_image_file(dir / "images" / name, H, W, C));
        if (H != side || W != side || C != 3) throw FormatError("image size mismatch in " + std::string(name));
    }
    return ds;
}

}  // namespace peclr
