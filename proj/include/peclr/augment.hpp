#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "peclr/geometry.hpp"
#include "peclr/rng.hpp"
#include "peclr/tensor.hpp"

namespace peclr {

struct AppearanceSpec {
    double hue_scale = 1.0;
    double sat_scale = 1.0;
    double bright_scale = 1.0;
    double bright_bias = 0.0;  // pixel units, 0..255 range
    bool drop_color = false;
    double blur_sigma = 0.0;   // px
    double noise_std = 0.0;    // pixel units
    std::uint64_t noise_seed = 0;

    bool is_identity() const {
        return hue_scale == 1.0 && sat_scale == 1.0 && bright_scale == 1.0 && bright_bias == 0.0 &&
               !drop_color && blur_sigma == 0.0 && noise_std == 0.0;
    }
};

// A sampled composite t = t_g o t_a: appearance applied first, then geometry.
struct TransformSpec {
    AffineTransform2D geometric;
    AppearanceSpec appearance;
};

struct AugmentConfig {
    bool rotation = false;
    bool translation = false;
    bool scale = false;
    bool color_jitter = false;
    bool drop_color = false;
    bool blur = false;
    bool noise = false;

    Range rotation_range{-45, 45};       // degrees
    Range translation_range{-15, 15};    // px, per axis
    Range scale_range{0.6, 2.0};
    Range hue_range{0.01, 1.0};          // scale factor
    Range sat_range{0.01, 1.0};          // scale factor
    Range bright_scale_range{0.5, 1.0};
    Range bright_bias_range{5, 20};      // pixel units
    Range blur_sigma_range{0.5, 1.5};
    Range noise_std_range{2, 8};

    // Optimal pretraining composition: scale, rotation, translation, color jitter.
    static AugmentConfig pretrain_defaults() {
        AugmentConfig c;
        c.rotation = c.translation = c.scale = c.color_jitter = true;
        return c;
    }

    // Fine-tuning uses wider rotations and a narrower scale band.
    static AugmentConfig finetune_defaults() {
        AugmentConfig c;
        c.rotation = c.translation = c.scale = true;
        c.rotation_range = {-90, 90};
        c.translation_range = {-20, 20};
        c.scale_range = {0.7, 1.3};
        return c;
    }

    static AugmentConfig none() { return AugmentConfig{}; }

    void validate() const {
        auto chk = [](const Range& r, const char* what) {
            if (r.lo > r.hi) throw std::invalid_argument(std::string("augment range ") + what +
                                                         ": lower bound exceeds upper");
        };
        chk(rotation_range, "rotation");
        chk(translation_range, "translation");
        chk(scale_range, "scale");
        chk(hue_range, "hue");
        chk(sat_range, "saturation");
        chk(bright_scale_range, "brightness scale");
        chk(bright_bias_range, "brightness bias");
        chk(blur_sigma_range, "blur sigma");
        chk(noise_std_range, "noise std");
        if (scale_range.lo <= 0) throw std::invalid_argument("augment: scale range must be positive");
    }
};

// Disabled transforms keep their identity values, so a spec is always fully
// formed. The geometric pivot is the image center.
inline TransformSpec sample_transform(Rng& rng, const AugmentConfig& cfg, double image_side) {
    cfg.validate();
    TransformSpec spec;
    spec.geometric.center = {(image_side - 1.0) / 2.0, (image_side - 1.0) / 2.0};
    if (cfg.rotation) spec.geometric.rotation_deg = cfg.rotation_range.sample(rng);
    if (cfg.translation) {
        spec.geometric.translation.x = cfg.translation_range.sample(rng);
        spec.geometric.translation.y = cfg.translation_range.sample(rng);
    }
    if (cfg.scale) spec.geometric.scale = cfg.scale_range.sample(rng);
    if (cfg.color_jitter) {
        spec.appearance.hue_scale = cfg.hue_range.sample(rng);
        spec.appearance.sat_scale = cfg.sat_range.sample(rng);
        spec.appearance.bright_scale = cfg.bright_scale_range.sample(rng);
        spec.appearance.bright_bias = cfg.bright_bias_range.sample(rng);
    }
    if (cfg.drop_color) spec.appearance.drop_color = true;
    if (cfg.blur) spec.appearance.blur_sigma = cfg.blur_sigma_range.sample(rng);
    if (cfg.noise) {
        spec.appearance.noise_std = cfg.noise_std_range.sample(rng);
        spec.appearance.noise_seed = rng.next_u64();
    }
    return spec;
}

namespace detail {

// h in [0,360), s,v in [0,1] scaled by 255 for v. Round-trips exactly (to f64
// rounding) for non-degenerate RGB.
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    double d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0;
    if (d == 0) {
        h = 0;
    } else if (mx == r) {
        h = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / d + 2.0);
    } else {
        h = 60.0 * ((r - g) / d + 4.0);
    }
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double c = v * s;
    double hp = h / 60.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) {
        r1 = c; g1 = x;
    } else if (hp < 2) {
        r1 = x; g1 = c;
    } else if (hp < 3) {
        g1 = c; b1 = x;
    } else if (hp < 4) {
        g1 = x; b1 = c;
    } else if (hp < 5) {
        r1 = x; b1 = c;
    } else {
        r1 = c; b1 = x;
    }
    double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

inline Tensor gaussian_blur(const Tensor& img, double sigma) {
    std::size_t H = img.dim(0), W = img.dim(1);
    int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(std::size_t(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[std::size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[std::size_t(i + radius)];
    }
    for (auto& v : k) v /= sum;
    auto clampi = [](long v, long lo, long hi) { return std::max(lo, std::min(hi, v)); };
    Tensor tmp(img.shape()), out(img.shape());
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double s = 0;
                for (int i = -radius; i <= radius; ++i) {
                    long xx = clampi(long(x) + i, 0, long(W) - 1);
                    s += k[std::size_t(i + radius)] * img[(y * W + std::size_t(xx)) * 3 + std::size_t(ch)];
                }
                tmp[(y * W + x) * 3 + std::size_t(ch)] = s;
            }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double s = 0;
                for (int i = -radius; i <= radius; ++i) {
                    long yy = clampi(long(y) + i, 0, long(H) - 1);
                    s += k[std::size_t(i + radius)] * tmp[(std::size_t(yy) * W + x) * 3 + std::size_t(ch)];
                }
                out[(y * W + x) * 3 + std::size_t(ch)] = s;
            }
    return out;
}

}  // namespace detail

// Hue/saturation scaling in HSV space, the brightness affine on the RGB
// values themselves, then the optional extras. Input and output are [H,W,3]
// in [0,255].
inline Tensor apply_appearance(const AppearanceSpec& spec, const Tensor& img) {
    if (img.rank() != 3 || img.dim(2) != 3)
        throw std::invalid_argument("apply_appearance: expected [H,W,3]");
    Tensor out = img;
    std::size_t npix = img.dim(0) * img.dim(1);
    for (std::size_t i = 0; i < npix; ++i) {
        double* p = out.data() + i * 3;
        double h, s, v;
        detail::rgb_to_hsv(p[0], p[1], p[2], h, s, v);
        h = std::fmod(h * spec.hue_scale, 360.0);
        s = std::clamp(s * spec.sat_scale, 0.0, 1.0);
        detail::hsv_to_rgb(h, s, v, p[0], p[1], p[2]);
        for (int c = 0; c < 3; ++c)
            p[c] = std::clamp(spec.bright_scale * p[c] + spec.bright_bias, 0.0, 255.0);
    }
    if (spec.drop_color) {
        for (std::size_t i = 0; i < npix; ++i) {
            double* p = out.data() + i * 3;
            double y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            p[0] = p[1] = p[2] = y;
        }
    }
    if (spec.blur_sigma > 0) out = detail::gaussian_blur(out, spec.blur_sigma);
    if (spec.noise_std > 0) {
        Rng noise(spec.noise_seed);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise.normal(0.0, spec.noise_std);
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0, 255.0);
    return out;
}

inline Tensor apply(const TransformSpec& spec, const Tensor& img, double fill = 0.0) {
    Tensor appearance = spec.appearance.is_identity() ? img : apply_appearance(spec.appearance, img);
    const AffineTransform2D& g = spec.geometric;
    bool identity_geom = g.rotation_deg == 0.0 && g.translation.x == 0.0 && g.translation.y == 0.0 &&
                         g.scale == 1.0;
    return identity_geom ? appearance : apply_to_image(g, appearance, fill);
}

}  // namespace peclr
