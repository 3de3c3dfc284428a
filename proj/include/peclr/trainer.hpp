#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "peclr/augment.hpp"
#include "peclr/contrastive.hpp"
#include "peclr/encoder.hpp"
#include "peclr/errors.hpp"
#include "peclr/pose.hpp"
#include "peclr/rng.hpp"
#include "peclr/synthhand.hpp"

namespace peclr {

// ---- optimizer ----

struct AdamLarsConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool lars = false;
    double weight_decay = 1e-6;  // enters the LARS trust ratio only
};

struct OptimizerState {
    AdamLarsConfig cfg;
    std::map<std::string, Tensor> m, v;
    long step = 0;
};

// Adam update; with LARS enabled the step is scaled per parameter tensor by
// the trust ratio eta = ||w|| / (||update|| + lambda ||w||), clipped to
// [0, 10]. Zero-norm layers (fresh biases) fall back to eta = 1 so they can
// leave the origin at all.
inline void adam_lars_step(std::map<std::string, Tensor>& params,
                           const std::map<std::string, Tensor>& grads, OptimizerState& st,
                           double lr) {
    st.step += 1;
    double bc1 = 1.0 - std::pow(st.cfg.beta1, double(st.step));
    double bc2 = 1.0 - std::pow(st.cfg.beta2, double(st.step));
    for (auto& [name, w] : params) {
        const Tensor& g = grads.at(name);
        if (!g.same_shape(w)) throw std::invalid_argument("adam_lars_step: grad shape mismatch for " + name);
        auto mi = st.m.find(name);
        if (mi == st.m.end()) {
            st.m[name] = Tensor::zeros(w.shape());
            st.v[name] = Tensor::zeros(w.shape());
            mi = st.m.find(name);
        }
        Tensor& m = mi->second;
        Tensor& v = st.v[name];
        Tensor update(w.shape());
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = st.cfg.beta1 * m[i] + (1.0 - st.cfg.beta1) * g[i];
            v[i] = st.cfg.beta2 * v[i] + (1.0 - st.cfg.beta2) * g[i] * g[i];
            double mh = m[i] / bc1;
            double vh = v[i] / bc2;
            update[i] = mh / (std::sqrt(vh) + st.cfg.eps);
        }
        double eta = 1.0;
        if (st.cfg.lars) {
            double wn = 0, un = 0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                wn += w[i] * w[i];
                un += update[i] * update[i];
            }
            wn = std::sqrt(wn);
            un = std::sqrt(un);
            double denom = un + st.cfg.weight_decay * wn;
            eta = (wn == 0.0 || denom == 0.0) ? 1.0 : std::clamp(wn / denom, 0.0, 10.0);
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * eta * update[i];
    }
}

// ---- schedule ----

struct Schedule {
    double base_lr = 0;
    long warmup_steps = 0;
    long total_steps = 0;
};

// lr = sqrt(batch) * 1e-4
inline double lr_for_batch(std::size_t batch) { return std::sqrt(double(batch)) * 1e-4; }

// Linear ramp 0 -> base over the warmup (exclusive at step 0), cosine to 0
// afterwards.
inline double lr_at(const Schedule& s, long step) {
    if (step < 0 || step > s.total_steps) throw std::invalid_argument("lr_at: step out of range");
    if (s.warmup_steps > 0 && step < s.warmup_steps)
        return s.base_lr * double(step) / double(s.warmup_steps);
    long span = s.total_steps - s.warmup_steps;
    if (span <= 0) return s.base_lr;
    double t = double(step - s.warmup_steps) / double(span);
    return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---- pretraining ----

enum class Objective { SimCLR, PeCLR };

inline const char* objective_name(Objective o) { return o == Objective::SimCLR ? "simclr" : "peclr"; }

struct PretrainConfig {
    std::vector<std::filesystem::path> datasets;
    EncoderConfig model;
    AugmentConfig augment = AugmentConfig::pretrain_defaults();
    Objective objective = Objective::PeCLR;
    bool normalize_translation = true;  // the Eq. 4 scheme; false = direct translation inversion
    double temperature = 0.5;
    std::size_t batch = 64;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    double base_lr = 0;  // 0 -> lr_for_batch(batch)
    bool lars = true;
    double weight_decay = 1e-6;
    std::uint64_t seed = 1;
};

struct TraceRow {
    long step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    double loss = 0;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<TraceRow> trace;
};

namespace detail {

inline std::vector<Dataset> load_all(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw std::invalid_argument("no dataset paths given");
    std::vector<Dataset> out;
    for (const auto& p : paths) out.push_back(load_dataset(p));
    return out;
}

}  // namespace detail

inline PretrainResult pretrain(const PretrainConfig& cfg) {
    cfg.augment.validate();
    if (cfg.model.head != HeadType::Projection)
        throw std::invalid_argument("pretrain: model must have a projection head");
    if (cfg.temperature <= 0) throw std::invalid_argument("pretrain: temperature must be > 0");
    std::vector<Dataset> datasets = detail::load_all(cfg.datasets);
    std::size_t total_n = 0;
    for (const auto& d : datasets) {
        if (d.image_side != cfg.model.input_side)
            throw std::invalid_argument("pretrain: dataset image side does not match model input");
        total_n += d.size();
    }
    std::size_t batch = std::min(cfg.batch, total_n);
    if (batch < 2) throw std::invalid_argument("pretrain: need a batch of at least 2 images");
    std::size_t steps_per_epoch = std::max<std::size_t>(1, total_n / batch);

    Rng root(cfg.seed);
    Rng init = root.substream("init");
    Model model(cfg.model, init);
    OptimizerState opt;
    opt.cfg.lars = cfg.lars;
    opt.cfg.weight_decay = cfg.weight_decay;
    Schedule sched{cfg.base_lr > 0 ? cfg.base_lr : lr_for_batch(batch),
                   long(cfg.warmup_epochs * steps_per_epoch), long(cfg.epochs * steps_per_epoch)};

    std::size_t S = cfg.model.input_side;
    std::vector<TraceRow> trace;
    trace.reserve(cfg.epochs * steps_per_epoch);
    long global_step = 0;

    std::vector<std::size_t> perm(datasets.size() == 1 ? datasets[0].size() : 0);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (datasets.size() == 1) {
            Rng shuffle = root.substream("shuffle", epoch);
            shuffle.shuffle(perm);
        }
        for (std::size_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
            // (dataset, index) pairs for this batch
            std::vector<std::pair<std::size_t, std::size_t>> picks(batch);
            if (datasets.size() == 1) {
                for (std::size_t k = 0; k < batch; ++k) picks[k] = {0, perm[bstep * batch + k]};
            } else {
                // weighted sampling: datasets drawn uniformly so batches hold
                // roughly equal counts from each
                Rng pick = root.substream("sample", std::uint64_t(global_step));
                for (std::size_t k = 0; k < batch; ++k) {
                    std::size_t d = pick.below(datasets.size());
                    picks[k] = {d, pick.below(datasets[d].size())};
                }
            }

            Rng aug = root.substream("augment", std::uint64_t(global_step));
            Tensor input({batch * 2, 3, S, S});
            ContrastiveBatch cbatch;
            cbatch.temperature = cfg.temperature;
            cbatch.image_side = double(S);
            cbatch.specs.resize(batch * 2);
            for (std::size_t k = 0; k < batch; ++k) {
                Tensor img = datasets[picks[k].first].image_tensor(picks[k].second);
                for (int view = 0; view < 2; ++view) {
                    TransformSpec spec = sample_transform(aug, cfg.augment, double(S));
                    Tensor aug_img = apply(spec, img);
                    image_to_input(aug_img, input, 2 * k + std::size_t(view));
                    cbatch.specs[2 * k + std::size_t(view)] = spec;
                }
            }

            auto outs = model.forward(input);
            const Tensor& z = outs.at("proj");
            cbatch.projections.clear();
            cbatch.projections.reserve(batch * 2);
            for (std::size_t i = 0; i < z.dim(0); ++i)
                cbatch.projections.push_back(LatentProjection::from_flat(
                    std::span<const double>(z.data() + i * z.dim(1), z.dim(1))));

            LossResult loss = cfg.objective == Objective::SimCLR
                                  ? nt_xent(cbatch)
                                  : peclr_loss(cbatch, cfg.normalize_translation);
            if (!std::isfinite(loss.value))
                throw NumericError("pretrain: non-finite loss at step " + std::to_string(global_step) +
                                   " (epoch " + std::to_string(epoch) + ")");

            auto grads = model.backward({{"proj", loss.dz}});
            double lr = lr_at(sched, global_step);
            adam_lars_step(model.params(), grads, opt, lr);
            trace.push_back({global_step, epoch, lr, loss.value});
            ++global_step;
        }
    }

    Checkpoint ckpt;
    ckpt.config = cfg.model;
    ckpt.params = model.params();
    ckpt.adam_m = opt.m;
    ckpt.adam_v = opt.v;
    ckpt.step = opt.step;
    ckpt.lars = cfg.lars;
    ckpt.weight_decay = cfg.weight_decay;
    ckpt.rng_state = cfg.seed;
    return {std::move(ckpt), std::move(trace)};
}

// ---- supervised fine-tuning ----

struct FinetuneConfig {
    std::filesystem::path dataset;
    EncoderConfig model;  // head is forced to Pose
    AugmentConfig augment = AugmentConfig::finetune_defaults();
    std::size_t batch = 128;
    std::size_t epochs = 100;
    double lr = 5e-4;
    double label_fraction = 1.0;
    double val_fraction = 0.1;
    std::uint64_t seed = 1;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    MetricReport val;
};

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<EpochMetrics> trace;
    std::vector<std::size_t> train_indices;
};

namespace detail {

// Warping an image by t shows the same hand with J2D moved by t; depth
// labels divide by the scale factor (zooming in looks like moving closer).
inline Pose25D transform_labels(const DatasetSample& s, const AffineTransform2D& t) {
    Pose25D gt;
    for (int j = 0; j < kNumJoints; ++j) {
        gt.j2d[std::size_t(j)] = t.apply(s.j2d[std::size_t(j)]);
        gt.dr[std::size_t(j)] = s.dr[std::size_t(j)] / t.scale;
    }
    return gt;
}

inline Pose25D labels_of(const DatasetSample& s) {
    Pose25D gt;
    gt.j2d = s.j2d;
    gt.dr = s.dr;
    return gt;
}

struct SplitIndices {
    std::vector<std::size_t> train_labeled;  // prefix-selected by label fraction
    std::vector<std::size_t> val;
};

inline SplitIndices split_dataset(const Dataset& ds, double label_fraction, double val_fraction) {
    if (!(label_fraction > 0.0) || label_fraction > 1.0)
        throw std::invalid_argument("label_fraction must lie in (0,1]");
    std::size_t n = ds.size();
    std::size_t n_val = std::max<std::size_t>(1, std::size_t(std::llround(double(n) * val_fraction)));
    if (n_val >= n) throw std::invalid_argument("dataset too small for a validation split");
    SplitIndices out;
    for (std::size_t i = n - n_val; i < n; ++i) out.val.push_back(i);
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < n - n_val; ++i)
        if (ds.samples[i].labeled) labeled.push_back(i);
    std::size_t take = std::size_t(std::floor(double(labeled.size()) * label_fraction));
    take = std::max<std::size_t>(take, 1);
    if (labeled.empty()) throw std::invalid_argument("dataset has no labeled training samples");
    take = std::min(take, labeled.size());
    labeled.resize(take);
    out.train_labeled = std::move(labeled);
    return out;
}

// 2.5D -> 3D evaluation for one sample: absolute root depth recovered from
// the wrist-to-middle-MCP bone (length taken from ground truth); falls back
// to the true root depth when the quadratic has no usable solution.
inline PoseEvalSample eval_sample(const Pose25D& pred, const DatasetSample& s,
                                  std::size_t* recovery_failures) {
    PoseEvalSample e;
    e.pred2d = pred.j2d;
    e.gt2d = s.j2d;
    e.gt3d = s.j3d;
    double ref_len = (s.j3d[kWrist] - s.j3d[kMiddleMcp]).norm();
    double d_root;
    try {
        d_root = recover_root_depth(pred.j2d, pred.dr, s.K, kWrist, kMiddleMcp, ref_len);
    } catch (const NumericError&) {
        d_root = s.j3d[kWrist].z;
        if (recovery_failures) ++*recovery_failures;
    }
    try {
        e.pred3d = lift_to_3d(pred.j2d, pred.dr, d_root, s.K);
    } catch (const NumericError&) {
        // clamp absolute depths away from zero and lift anyway
        JointDepths dr = pred.dr;
        for (auto& d : dr) d = std::max(d, 1e-3 - d_root);
        e.pred3d = lift_to_3d(pred.j2d, dr, d_root, s.K);
        if (recovery_failures) ++*recovery_failures;
    }
    return e;
}

inline MetricReport evaluate_model(Model& model, const Dataset& ds,
                                   std::span<const std::size_t> indices, bool aligned,
                                   std::size_t eval_batch = 32) {
    if (model.config().head != HeadType::Pose)
        throw std::invalid_argument("evaluate_model: pose head required");
    std::size_t S = model.config().input_side;
    std::vector<PoseEvalSample> evals;
    std::size_t failures = 0;
    for (std::size_t at = 0; at < indices.size();) {
        std::size_t b = std::min(eval_batch, indices.size() - at);
        Tensor input({b, 3, S, S});
        for (std::size_t k = 0; k < b; ++k)
            image_to_input(ds.image_tensor(indices[at + k]), input, k);
        auto outs = model.forward(input);
        const Tensor& pose = outs.at("pose");
        for (std::size_t k = 0; k < b; ++k) {
            Pose25D pred = Pose25D::from_flat(
                std::span<const double>(pose.data() + k * pose.dim(1), pose.dim(1)));
            evals.push_back(eval_sample(pred, ds.samples[indices[at + k]], &failures));
        }
        at += b;
    }
    MetricReport r = metrics(evals, aligned);
    r.root_recovery_failures = failures;
    return r;
}

}  // namespace detail

inline FinetuneResult finetune(const FinetuneConfig& cfg, const std::optional<Checkpoint>& init) {
    cfg.augment.validate();
    Dataset ds = load_dataset(cfg.dataset);
    if (ds.image_side != cfg.model.input_side)
        throw std::invalid_argument("finetune: dataset image side does not match model input");
    detail::SplitIndices split = detail::split_dataset(ds, cfg.label_fraction, cfg.val_fraction);

    Rng root(cfg.seed);
    Rng init_rng = root.substream("init");
    EncoderConfig mc = cfg.model;
    mc.head = HeadType::Pose;
    Model model = init ? swap_head_for_pose(*init, init_rng.next_u64()) : Model(mc, init_rng);
    if (init && !(model.config() == mc))
        throw std::invalid_argument("finetune: checkpoint config does not match experiment config");

    std::size_t batch = std::min(cfg.batch, split.train_labeled.size());
    std::size_t steps_per_epoch = std::max<std::size_t>(1, split.train_labeled.size() / batch);
    Schedule sched{cfg.lr, 0, long(cfg.epochs * steps_per_epoch)};
    OptimizerState opt;  // plain Adam for supervised training
    opt.cfg.lars = false;

    std::size_t S = model.config().input_side;
    std::vector<EpochMetrics> trace;
    long global_step = 0;
    std::vector<std::size_t> order = split.train_labeled;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle = root.substream("shuffle", epoch);
        shuffle.shuffle(order);
        double loss_sum = 0;
        double lr_last = 0;
        for (std::size_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
            Rng aug = root.substream("augment", std::uint64_t(global_step));
            Tensor input({batch, 3, S, S});
            std::vector<Pose25D> gts(batch);
            for (std::size_t k = 0; k < batch; ++k) {
                std::size_t i = order[bstep * batch + k];
                TransformSpec spec = sample_transform(aug, cfg.augment, double(S));
                Tensor img = apply(spec, ds.image_tensor(i));
                image_to_input(img, input, k);
                gts[k] = detail::transform_labels(ds.samples[i], spec.geometric);
            }
            auto outs = model.forward(input);
            const Tensor& pose = outs.at("pose");
            Tensor dpose(pose.shape());
            double loss = 0;
            for (std::size_t k = 0; k < batch; ++k) {
                Pose25D pred = Pose25D::from_flat(
                    std::span<const double>(pose.data() + k * pose.dim(1), pose.dim(1)));
                loss += pose_losses(pred, gts[k]).total();
                auto g = pose_loss_grad(pred, gts[k]);
                for (std::size_t d = 0; d < g.size(); ++d)
                    dpose[k * pose.dim(1) + d] = g[d] / double(batch);
            }
            loss /= double(batch);
            if (!std::isfinite(loss))
                throw NumericError("finetune: non-finite loss at step " + std::to_string(global_step));
            auto grads = model.backward({{"pose", dpose}});
            lr_last = lr_at(sched, global_step);
            adam_lars_step(model.params(), grads, opt, lr_last);
            loss_sum += loss;
            ++global_step;
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr_last;
        em.train_loss = loss_sum / double(steps_per_epoch);
        em.val = detail::evaluate_model(model, ds, split.val, false);
        trace.push_back(em);
    }

    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.params = model.params();
    ckpt.adam_m = opt.m;
    ckpt.adam_v = opt.v;
    ckpt.step = opt.step;
    ckpt.lars = false;
    ckpt.weight_decay = 0;
    ckpt.rng_state = cfg.seed;
    return {std::move(ckpt), std::move(trace), split.train_labeled};
}

// ---- frozen-encoder probe ----
//
// The augmentation-study protocol: freeze the encoder, train a two-layer MLP
// on the pose labels, and report validation metrics.

struct ProbeConfig {
    std::size_t hidden = 128;
    std::size_t epochs = 150;
    std::size_t batch = 256;
    double lr = 1e-3;
    double val_fraction = 0.1;
    std::uint64_t seed = 7;
};

struct ProbeResult {
    MetricReport val;
    MetricReport train;
};

inline ProbeResult probe_evaluate(Model& encoder, const Dataset& ds, const ProbeConfig& cfg) {
    if (ds.image_side != encoder.config().input_side)
        throw std::invalid_argument("probe_evaluate: dataset image side does not match model input");
    detail::SplitIndices split = detail::split_dataset(ds, 1.0, cfg.val_fraction);
    std::size_t S = encoder.config().input_side;
    std::size_t F = encoder.config().feature_dim;

    // features once, encoder untouched
    auto extract = [&](const std::vector<std::size_t>& idx) {
        Tensor feats({idx.size(), F});
        for (std::size_t at = 0; at < idx.size();) {
            std::size_t b = std::min<std::size_t>(64, idx.size() - at);
            Tensor input({b, 3, S, S});
            for (std::size_t k = 0; k < b; ++k) image_to_input(ds.image_tensor(idx[at + k]), input, k);
            auto outs = encoder.forward(input);
            const Tensor& f = outs.at("features");
            std::copy(f.data(), f.data() + b * F, feats.data() + at * F);
            at += b;
        }
        return feats;
    };
    Tensor train_feats = extract(split.train_labeled);
    Tensor val_feats = extract(split.val);

    Rng root(cfg.seed);
    Rng init = root.substream("probe-init");
    std::map<std::string, Tensor> params;
    params["h.w"] = detail::he_uniform({cfg.hidden, F}, F, init);
    params["h.b"] = Tensor::zeros({cfg.hidden});
    params["out.w"] = detail::he_uniform({EncoderConfig::pose_dim(), cfg.hidden}, cfg.hidden, init);
    params["out.b"] = Tensor::zeros({EncoderConfig::pose_dim()});

    std::size_t n_train = split.train_labeled.size();
    std::size_t batch = std::min(cfg.batch, n_train);
    std::size_t steps_per_epoch = std::max<std::size_t>(1, n_train / batch);
    Schedule sched{cfg.lr, 0, long(cfg.epochs * steps_per_epoch)};
    OptimizerState opt;

    auto build = [&](std::size_t n) {
        nd::Graph g;
        int x = g.input("f", {n, F});
        int h = g.relu(g.dense(x, g.param("h.w", params.at("h.w")), g.param("h.b", params.at("h.b"))));
        int out = g.dense(h, g.param("out.w", params.at("out.w")), g.param("out.b", params.at("out.b")));
        g.mark_output("pose", Model::pose_output_map(g, out, encoder.config(), n));
        return g;
    };
    nd::Graph train_graph = build(batch);

    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    long global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle = root.substream("probe-shuffle", epoch);
        shuffle.shuffle(order);
        for (std::size_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
            Tensor fb({batch, F});
            std::vector<const DatasetSample*> gts(batch);
            for (std::size_t k = 0; k < batch; ++k) {
                std::size_t row = order[bstep * batch + k];
                std::copy(train_feats.data() + row * F, train_feats.data() + (row + 1) * F,
                          fb.data() + k * F);
                gts[k] = &ds.samples[split.train_labeled[row]];
            }
            for (auto& [name, v] : params) train_graph.set_param(name, v);
            auto outs = train_graph.forward({{"f", fb}});
            const Tensor& pose = outs.at("pose");
            Tensor dpose(pose.shape());
            for (std::size_t k = 0; k < batch; ++k) {
                Pose25D pred = Pose25D::from_flat(
                    std::span<const double>(pose.data() + k * pose.dim(1), pose.dim(1)));
                auto g = pose_loss_grad(pred, detail::labels_of(*gts[k]));
                for (std::size_t d = 0; d < g.size(); ++d)
                    dpose[k * pose.dim(1) + d] = g[d] / double(batch);
            }
            auto grads = train_graph.backward({{"pose", dpose}});
            adam_lars_step(params, grads, opt, lr_at(sched, global_step));
            ++global_step;
        }
    }

    // evaluation through the shared 2.5D path, on both splits
    auto evaluate = [&](const Tensor& feats, const std::vector<std::size_t>& idx) {
        nd::Graph g = build(idx.size());
        for (auto& [name, v] : params) g.set_param(name, v);
        auto outs = g.forward({{"f", feats}});
        const Tensor& pose = outs.at("pose");
        std::vector<PoseEvalSample> evals;
        std::size_t failures = 0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            Pose25D pred = Pose25D::from_flat(
                std::span<const double>(pose.data() + k * pose.dim(1), pose.dim(1)));
            evals.push_back(detail::eval_sample(pred, ds.samples[idx[k]], &failures));
        }
        MetricReport r = metrics(evals, false);
        r.root_recovery_failures = failures;
        return r;
    };
    ProbeResult res;
    res.val = evaluate(val_feats, split.val);
    res.train = evaluate(train_feats, split.train_labeled);
    return res;
}

// ---- augmentation composition search ----

inline const std::vector<std::string>& known_augment_candidates() {
    static const std::vector<std::string> k{"scale", "rotation", "translation", "color_jitter", "blur"};
    return k;
}

inline AugmentConfig augment_for_candidates(const std::vector<std::string>& names) {
    AugmentConfig cfg = AugmentConfig::none();
    cfg.rotation_range = {-45, 45};
    cfg.translation_range = {-15, 15};
    cfg.scale_range = {0.6, 2.0};
    for (const auto& n : names) {
        if (n == "scale")
            cfg.scale = true;
        else if (n == "rotation")
            cfg.rotation = true;
        else if (n == "translation")
            cfg.translation = true;
        else if (n == "color_jitter")
            cfg.color_jitter = true;
        else if (n == "blur")
            cfg.blur = true;
        else
            throw std::invalid_argument("unknown augmentation candidate: " + n);
    }
    return cfg;
}

struct CompositionResult {
    std::string key;           // "+"-joined candidate names
    double probe_epe3d = 0;
    double probe_epe2d = 0;
};

// Exhaustive search over non-empty candidate subsets: pretrain with each
// composition, rank by the frozen-encoder probe's 3D EPE.
inline std::vector<CompositionResult> composition_search(const std::vector<std::string>& candidates,
                                                         const PretrainConfig& base,
                                                         const ProbeConfig& probe_cfg) {
    if (candidates.empty() || candidates.size() > 5)
        throw std::invalid_argument("composition_search: need 1..5 candidates");
    for (const auto& c : candidates)
        augment_for_candidates({c});  // validates names early
    Dataset probe_ds = load_dataset(base.datasets.at(0));

    std::vector<CompositionResult> results;
    for (std::size_t mask = 1; mask < (std::size_t(1) << candidates.size()); ++mask) {
        std::vector<std::string> subset;
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (mask & (std::size_t(1) << i)) subset.push_back(candidates[i]);
        PretrainConfig cfg = base;
        cfg.augment = augment_for_candidates(subset);
        cfg.seed = Rng(base.seed).substream("composition", mask).next_u64();
        PretrainResult pre = pretrain(cfg);
        Model model(pre.checkpoint.config, pre.checkpoint.params);
        ProbeResult probe = probe_evaluate(model, probe_ds, probe_cfg);
        std::string key;
        for (std::size_t i = 0; i < subset.size(); ++i) key += (i ? "+" : "") + subset[i];
        results.push_back({key, probe.val.epe, probe.val.epe_2d});
    }
    std::sort(results.begin(), results.end(), [](const CompositionResult& a, const CompositionResult& b) {
        return a.probe_epe3d != b.probe_epe3d ? a.probe_epe3d < b.probe_epe3d : a.key < b.key;
    });
    return results;
}

}  // namespace peclr
