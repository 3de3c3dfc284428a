#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "peclr/augment.hpp"
#include "peclr/geometry.hpp"
#include "peclr/graph.hpp"
#include "peclr/tensor.hpp"

namespace peclr {

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw std::invalid_argument("cosine_sim: length mismatch");
    double uu = 0, vv = 0, uv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        uv += u[i] * v[i];
    }
    if (uu == 0 || vv == 0) throw std::invalid_argument("cosine_sim: zero-norm input");
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

// 2N views, interleaved: views 2k and 2k+1 come from source image k.
struct ContrastiveBatch {
    std::vector<LatentProjection> projections;
    std::vector<TransformSpec> specs;
    double temperature = 0.5;
    double image_side = 64.0;

    std::size_t views() const { return projections.size(); }

    void validate() const {
        if (projections.size() < 2 || projections.size() % 2 != 0)
            throw std::invalid_argument("ContrastiveBatch: need an even number >= 2 of views");
        if (specs.size() != projections.size())
            throw std::invalid_argument("ContrastiveBatch: specs/projections count mismatch");
        if (temperature <= 0) throw std::invalid_argument("ContrastiveBatch: temperature must be > 0");
    }
};

struct LossResult {
    double value = 0;
    Tensor dz;  // dL/dZ for the raw projections, [2N, 2m]
};

namespace detail {

inline Tensor projections_tensor(const ContrastiveBatch& batch) {
    std::size_t n = batch.views();
    std::size_t dim = batch.projections[0].points.size() * 2;
    Tensor z({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
        if (batch.projections[i].points.size() * 2 != dim)
            throw std::invalid_argument("ContrastiveBatch: inconsistent projection sizes");
        auto flat = batch.projections[i].to_flat();
        std::copy(flat.begin(), flat.end(), z.data() + i * dim);
    }
    return z;
}

// Mean over all 2N anchors of Eq.-style
//   -log( exp(sim(i, pair(i))/tau) / sum_{k != i} exp(sim(i,k)/tau) )
// assembled from primitives on node `z`.
inline void build_nt_xent(nd::Graph& g, int z, std::size_t n, double tau) {
    int zn = g.l2_normalize(z);
    int sims = g.matmul(zn, zn, false, true);             // [2N,2N]
    int scaled = g.mul(sims, g.constant(Tensor::scalar(1.0 / tau)));
    Tensor offdiag({n, n});
    Tensor pair_pick({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) offdiag[i * n + k] = i == k ? 0.0 : 1.0;
        std::size_t p = i % 2 == 0 ? i + 1 : i - 1;
        pair_pick[i * n + p] = 1.0;
    }
    int denom = g.sum(g.mul(g.exp(scaled), g.constant(std::move(offdiag))), 1);
    int pos = g.sum(g.mul(scaled, g.constant(std::move(pair_pick))), 1);
    int per_anchor = g.add(g.log(denom), g.mul(pos, g.constant(Tensor::scalar(-1.0))));
    g.mark_output("loss", g.mean(per_anchor));
}

// z~ = R(-theta)(z - c) + c - v_hat as a fixed affine map: the per-view
// centroids and normalized translations are baked in as constants of the
// step, so the inverse stays linear when differentiated. Views whose
// geometric part is identity (up to scale, which cosine similarity drops)
// pass through untouched.
inline int build_latent_inversion(nd::Graph& g, int z, const ContrastiveBatch& batch,
                                  bool normalize) {
    std::size_t n = batch.views();
    std::size_t dim = batch.projections[0].points.size() * 2;
    bool any = false;
    for (const auto& s : batch.specs) any |= !s.geometric.is_identity_rotation_translation();
    if (!any) return z;

    Tensor cos_rows({n, dim}), sin_rows({n, dim}), neg_cent({n, dim}), offset({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
        const AffineTransform2D& t = batch.specs[i].geometric;
        double* cr = cos_rows.data() + i * dim;
        double* sr = sin_rows.data() + i * dim;
        double* nc = neg_cent.data() + i * dim;
        double* of = offset.data() + i * dim;
        if (t.is_identity_rotation_translation()) {
            for (std::size_t d = 0; d < dim; ++d) cr[d] = 1.0;
            continue;  // sin/cent/offset rows stay zero
        }
        const LatentProjection& zp = batch.projections[i];
        Vec2 c = zp.centroid();
        Vec2 v_hat = normalize ? normalize_translation(t.translation, batch.image_side, zp)
                               : t.translation;
        double r = deg_to_rad(-t.rotation_deg);
        double cs = std::cos(r), sn = std::sin(r);
        for (std::size_t p = 0; p < dim / 2; ++p) {
            cr[2 * p] = cr[2 * p + 1] = cs;
            sr[2 * p] = sr[2 * p + 1] = -sn;
            nc[2 * p] = -c.x;
            nc[2 * p + 1] = -c.y;
            of[2 * p] = c.x - v_hat.x;
            of[2 * p + 1] = c.y - v_hat.y;
        }
    }
    // swap matrix maps each (x,y) pair to (y,-x); with the negated sin rows,
    // cos*p + (-sin)*swap(p) is exactly R(r) p for r = -theta
    Tensor swap({dim, dim});
    for (std::size_t p = 0; p < dim / 2; ++p) {
        swap[(2 * p + 1) * dim + 2 * p] = 1.0;
        swap[(2 * p) * dim + 2 * p + 1] = -1.0;
    }
    int centered = g.add(z, g.constant(std::move(neg_cent)));
    int swapped = g.matmul(centered, g.constant(std::move(swap)));
    int rotated = g.add(g.mul(centered, g.constant(std::move(cos_rows))),
                        g.mul(swapped, g.constant(std::move(sin_rows))));
    return g.add(rotated, g.constant(std::move(offset)));
}

inline LossResult run_loss_graph(const ContrastiveBatch& batch, bool invert, bool normalize) {
    batch.validate();
    Tensor z = projections_tensor(batch);
    nd::Graph g;
    int zin = g.input("z", z.shape());
    int zt = invert ? build_latent_inversion(g, zin, batch, normalize) : zin;
    build_nt_xent(g, zt, batch.views(), batch.temperature);
    auto out = g.forward({{"z", z}});
    g.backward({{"loss", Tensor::scalar(1.0)}});
    return {out.at("loss")[0], g.input_gradient("z")};
}

}  // namespace detail

// NT-Xent on the raw projections (the invariance-inducing objective).
inline LossResult nt_xent(const ContrastiveBatch& batch) {
    return detail::run_loss_graph(batch, false, true);
}

// Equivariant NT-Xent: every projection is mapped through the inverse of its
// view's geometric transform before the contrastive term.
inline LossResult peclr_loss(const ContrastiveBatch& batch, bool normalize_translation = true) {
    return detail::run_loss_graph(batch, true, normalize_translation);
}

// Scalar double-loop oracle; shares no code with the graph implementation.
inline double nt_xent_bruteforce(const ContrastiveBatch& batch) {
    batch.validate();
    std::size_t n = batch.views();
    std::vector<std::vector<double>> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = batch.projections[i].to_flat();
    auto sim = [&](std::size_t i, std::size_t k) {
        double uu = 0, vv = 0, uv = 0;
        for (std::size_t d = 0; d < z[i].size(); ++d) {
            uu += z[i][d] * z[i][d];
            vv += z[k][d] * z[k][d];
            uv += z[i][d] * z[k][d];
        }
        return uv / (std::sqrt(uu) * std::sqrt(vv));
    };
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = i % 2 == 0 ? i + 1 : i - 1;
        double denom = 0;
        for (std::size_t k = 0; k < n; ++k)
            if (k != i) denom += std::exp(sim(i, k) / batch.temperature);
        total += -std::log(std::exp(sim(i, j) / batch.temperature) / denom);
    }
    return total / double(n);
}

}  // namespace peclr
