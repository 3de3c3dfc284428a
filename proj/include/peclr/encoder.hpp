#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peclr/errors.hpp"
#include "peclr/geometry.hpp"
#include "peclr/graph.hpp"
#include "peclr/rng.hpp"
#include "peclr/synthhand.hpp"
#include "peclr/tensor.hpp"

namespace peclr {

enum class HeadType { Projection, Pose };

inline const char* head_name(HeadType h) { return h == HeadType::Projection ? "projection" : "pose"; }

// f = g o E: a small stride-2 conv stack E with either the contrastive
// projection head g (2-layer MLP, output 2m) or the linear pose head
// (output 21*2 + 21).
struct EncoderConfig {
    std::size_t input_side = 64;
    std::vector<std::size_t> channels{8, 16, 24};
    std::size_t feature_dim = 128;
    std::size_t latent_points = 64;  // m
    HeadType head = HeadType::Projection;

    std::size_t projection_dim() const { return 2 * latent_points; }
    static constexpr std::size_t pose_dim() { return kNumJoints * 2 + kNumJoints; }

    void validate() const {
        if (latent_points < 2) throw std::invalid_argument("EncoderConfig: latent_points must be >= 2");
        if (channels.empty()) throw std::invalid_argument("EncoderConfig: need at least one stage");
        std::size_t div = std::size_t(1) << channels.size();
        if (input_side < 8 || input_side % div != 0)
            throw std::invalid_argument("EncoderConfig: input_side must be a multiple of 2^stages");
    }

    std::string to_line() const {
        std::ostringstream ss;
        ss << "input_side=" << input_side << " channels=";
        for (std::size_t i = 0; i < channels.size(); ++i) ss << (i ? "," : "") << channels[i];
        ss << " feature_dim=" << feature_dim << " latent_points=" << latent_points
           << " head=" << head_name(head);
        return ss.str();
    }

    static EncoderConfig from_line(const std::string& line) {
        EncoderConfig c;
        c.channels.clear();
        std::istringstream ss(line);
        std::string kv;
        while (ss >> kv) {
            auto eq = kv.find('=');
            if (eq == std::string::npos) throw FormatError("bad config token: " + kv);
            std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
            if (key == "input_side")
                c.input_side = std::stoul(val);
            else if (key == "feature_dim")
                c.feature_dim = std::stoul(val);
            else if (key == "latent_points")
                c.latent_points = std::stoul(val);
            else if (key == "head") {
                if (val == "projection")
                    c.head = HeadType::Projection;
                else if (val == "pose")
                    c.head = HeadType::Pose;
                else
                    throw FormatError("bad head type: " + val);
            } else if (key == "channels") {
                std::istringstream cs(val);
                std::string item;
                while (std::getline(cs, item, ',')) c.channels.push_back(std::stoul(item));
            } else {
                throw FormatError("unknown config key: " + key);
            }
        }
        c.validate();
        return c;
    }

    bool operator==(const EncoderConfig& o) const {
        return input_side == o.input_side && channels == o.channels && feature_dim == o.feature_dim &&
               latent_points == o.latent_points && head == o.head;
    }
};

namespace detail {

inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    double bound = std::sqrt(6.0 / double(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

inline std::map<std::string, Tensor> init_params(const EncoderConfig& cfg, Rng rng) {
    cfg.validate();
    std::map<std::string, Tensor> p;
    std::size_t cin = 3;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        std::size_t cout = cfg.channels[s];
        std::string base = "conv" + std::to_string(s);
        p[base + ".w"] = detail::he_uniform({cout, cin, 3, 3}, cin * 9, rng);
        p[base + ".b"] = Tensor::zeros({cout});
        cin = cout;
    }
    std::size_t spatial = cfg.input_side >> cfg.channels.size();
    std::size_t flat = cfg.channels.back() * spatial * spatial;
    p["fc.w"] = detail::he_uniform({cfg.feature_dim, flat}, flat, rng);
    p["fc.b"] = Tensor::zeros({cfg.feature_dim});
    if (cfg.head == HeadType::Projection) {
        p["proj0.w"] = detail::he_uniform({cfg.feature_dim, cfg.feature_dim}, cfg.feature_dim, rng);
        p["proj0.b"] = Tensor::zeros({cfg.feature_dim});
        p["proj1.w"] = detail::he_uniform({cfg.projection_dim(), cfg.feature_dim}, cfg.feature_dim, rng);
        p["proj1.b"] = Tensor::zeros({cfg.projection_dim()});
    } else {
        p["pose.w"] = detail::he_uniform({EncoderConfig::pose_dim(), cfg.feature_dim}, cfg.feature_dim, rng);
        p["pose.b"] = Tensor::zeros({EncoderConfig::pose_dim()});
    }
    return p;
}

// Owns the authoritative parameter set; graphs are compiled per batch size
// and re-synced before each forward. A Model instance is single-threaded;
// clone it for concurrent read-only evaluation.
class Model {
public:
    Model(EncoderConfig cfg, Rng init_rng) : cfg_(cfg), params_(init_params(cfg, init_rng)) {
        cfg_.validate();
    }

    Model(EncoderConfig cfg, std::map<std::string, Tensor> params)
        : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
    }

    const EncoderConfig& config() const { return cfg_; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }

    // images: [N,3,S,S] with values already scaled to [0,1]
    nd::NamedTensors forward(const Tensor& images) {
        std::size_t n = images.dim(0);
        nd::Graph& g = graph_for(n);
        for (auto& [name, v] : params_) g.set_param(name, v);
        last_batch_ = n;
        return g.forward({{"x", images}});
    }

    nd::NamedTensors backward(const nd::NamedTensors& output_grads) {
        if (!last_batch_) throw std::logic_error("Model::backward before forward");
        return graphs_.at(last_batch_).backward(output_grads);
    }

    nd::Graph& graph_for(std::size_t batch) {
        auto it = graphs_.find(batch);
        if (it == graphs_.end()) it = graphs_.emplace(batch, build_graph(cfg_, params_, batch)).first;
        return it->second;
    }

    static nd::Graph build_graph(const EncoderConfig& cfg, const std::map<std::string, Tensor>& params,
                                 std::size_t batch) {
        nd::Graph g;
        int x = g.input("x", {batch, 3, cfg.input_side, cfg.input_side});
        for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
            std::string base = "conv" + std::to_string(s);
            int w = g.param(base + ".w", params.at(base + ".w"));
            int b = g.param(base + ".b", params.at(base + ".b"));
            x = g.relu(g.conv3x3(x, w, b, 2));
        }
        x = g.flatten(x);
        int feat = g.relu(g.dense(x, g.param("fc.w", params.at("fc.w")), g.param("fc.b", params.at("fc.b"))));
        g.mark_output("features", feat);
        if (cfg.head == HeadType::Projection) {
            int h = g.relu(g.dense(feat, g.param("proj0.w", params.at("proj0.w")),
                                   g.param("proj0.b", params.at("proj0.b"))));
            int proj = g.dense(h, g.param("proj1.w", params.at("proj1.w")),
                               g.param("proj1.b", params.at("proj1.b")));
            g.mark_output("proj", proj);
        } else {
            int raw = g.dense(feat, g.param("pose.w", params.at("pose.w")),
                              g.param("pose.b", params.at("pose.b")));
            g.mark_output("pose", pose_output_map(g, raw, cfg, batch));
        }
        return g;
    }

    // The linear head works in normalized units; a fixed affine map turns
    // them into pixels about the image center and root-relative cm. Keeps
    // raw outputs O(1) so supervised training needs no per-head lr tuning.
    static int pose_output_map(nd::Graph& g, int raw, const EncoderConfig& cfg, std::size_t batch) {
        std::size_t dim = EncoderConfig::pose_dim();
        Tensor scale({batch, dim}), offset({batch, dim});
        double half = double(cfg.input_side) / 2.0;
        double center = (double(cfg.input_side) - 1.0) / 2.0;
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t d = 0; d < dim; ++d) {
                bool is_2d = d < std::size_t(2 * kNumJoints);
                scale[r * dim + d] = is_2d ? half : kDepthScaleCm;
                offset[r * dim + d] = is_2d ? center : 0.0;
            }
        return g.add(g.mul(raw, g.constant(std::move(scale))), g.constant(std::move(offset)));
    }

    static constexpr double kDepthScaleCm = 10.0;

private:
    EncoderConfig cfg_;
    std::map<std::string, Tensor> params_;
    std::map<std::size_t, nd::Graph> graphs_;
    std::size_t last_batch_ = 0;
};

// [H,W,3] pixels in [0,255] -> one [3,S,S] slab scaled to [0,1]
inline void image_to_input(const Tensor& img, Tensor& batch, std::size_t index) {
    std::size_t S = img.dim(0);
    double* dst = batch.data() + index * 3 * S * S;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x)
                dst[(c * S + y) * S + x] = img[(y * S + x) * 3 + c] / 255.0;
}

inline std::vector<LatentProjection> encode_project(Model& model, const Tensor& images) {
    if (model.config().head != HeadType::Projection)
        throw std::invalid_argument("encode_project: model has no projection head");
    auto out = model.forward(images);
    const Tensor& z = out.at("proj");
    std::vector<LatentProjection> result;
    result.reserve(z.dim(0));
    for (std::size_t i = 0; i < z.dim(0); ++i)
        result.push_back(LatentProjection::from_flat(
            std::span<const double>(z.data() + i * z.dim(1), z.dim(1))));
    return result;
}

// ---- checkpoints ----
//
// Text header (magic, version, config echo, scalar state, tensor manifest
// with offsets in f64 units), then "payload" and the raw little-endian f64
// payload in manifest order.
struct Checkpoint {
    int version = 1;
    EncoderConfig config;
    std::map<std::string, Tensor> params;
    std::map<std::string, Tensor> adam_m;
    std::map<std::string, Tensor> adam_v;
    long step = 0;
    bool lars = false;
    double weight_decay = 0.0;
    std::uint64_t rng_state = 0;
};

namespace detail {

inline void write_tensor_manifest(std::ostream& os, const char* section,
                                  const std::map<std::string, Tensor>& ts, std::size_t& offset) {
    for (const auto& [name, t] : ts) {
        os << "tensor " << section << " " << name << " " << t.rank();
        for (auto d : t.shape()) os << " " << d;
        os << " " << offset << "\n";
        offset += t.size();
    }
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ostringstream header;
    header << "PECLR-CKPT " << ckpt.version << "\n";
    header << "config " << ckpt.config.to_line() << "\n";
    header << "scalar step " << ckpt.step << "\n";
    header << "scalar lars " << (ckpt.lars ? 1 : 0) << "\n";
    header << "scalar weight_decay " << detail::fmt(ckpt.weight_decay) << "\n";
    header << "scalar rng_state " << ckpt.rng_state << "\n";
    std::size_t offset = 0;
    detail::write_tensor_manifest(header, "param", ckpt.params, offset);
    detail::write_tensor_manifest(header, "adam_m", ckpt.adam_m, offset);
    detail::write_tensor_manifest(header, "adam_v", ckpt.adam_v, offset);
    header << "payload " << offset << "\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    std::string h = header.str();
    f.write(h.data(), std::streamsize(h.size()));
    auto dump = [&](const std::map<std::string, Tensor>& ts) {
        for (const auto& [name, t] : ts)
            f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
    };
    dump(ckpt.params);
    dump(ckpt.adam_m);
    dump(ckpt.adam_v);
    if (!f) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    Checkpoint ckpt;
    std::string line;
    if (!std::getline(f, line)) throw FormatError("empty checkpoint: " + path.string());
    {
        std::istringstream ss(line);
        std::string magic;
        ss >> magic >> ckpt.version;
        if (magic != "PECLR-CKPT") throw FormatError("bad checkpoint magic in " + path.string());
        if (ckpt.version != 1)
            throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
    }
    struct Entry {
        std::string section, name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::size_t payload = 0;
    bool have_config = false;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "config") {
            std::string rest;
            std::getline(ss, rest);
            ckpt.config = EncoderConfig::from_line(rest);
            have_config = true;
        } else if (tag == "scalar") {
            std::string name;
            ss >> name;
            if (name == "step")
                ss >> ckpt.step;
            else if (name == "lars") {
                int v;
                ss >> v;
                ckpt.lars = v != 0;
            } else if (name == "weight_decay")
                ss >> ckpt.weight_decay;
            else if (name == "rng_state")
                ss >> ckpt.rng_state;
            else
                throw FormatError("unknown checkpoint scalar: " + name);
        } else if (tag == "tensor") {
            Entry e;
            std::size_t rank;
            ss >> e.section >> e.name >> rank;
            for (std::size_t i = 0; i < rank; ++i) {
                std::size_t d;
                ss >> d;
                e.shape.push_back(d);
            }
            ss >> e.offset;
            if (!ss) throw FormatError("bad tensor manifest line: " + line);
            entries.push_back(std::move(e));
        } else if (tag == "payload") {
            ss >> payload;
            break;
        } else {
            throw FormatError("unknown checkpoint header line: " + line);
        }
    }
    if (!have_config) throw FormatError("checkpoint missing config echo: " + path.string());

    std::vector<double> data(payload);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(payload * sizeof(double)));
    if (std::size_t(f.gcount()) != payload * sizeof(double))
        throw FormatError("truncated checkpoint payload in " + path.string());

    std::size_t expect = 0;
    for (const auto& e : entries) {
        if (e.offset != expect) throw FormatError("checkpoint manifest offsets disagree with payload");
        std::size_t sz = shape_size(e.shape);
        Tensor t(e.shape, std::vector<double>(data.begin() + long(e.offset),
                                              data.begin() + long(e.offset + sz)));
        expect += sz;
        if (e.section == "param")
            ckpt.params[e.name] = std::move(t);
        else if (e.section == "adam_m")
            ckpt.adam_m[e.name] = std::move(t);
        else if (e.section == "adam_v")
            ckpt.adam_v[e.name] = std::move(t);
        else
            throw FormatError("unknown checkpoint section: " + e.section);
    }
    if (expect != payload) throw FormatError("checkpoint manifest disagrees with payload size");
    return ckpt;
}

// Keeps the encoder weights bit-exact, drops the projection head, and
// installs a freshly seeded linear pose head. Optimizer state does not carry
// over.
inline Model swap_head_for_pose(const Checkpoint& ckpt, std::uint64_t head_seed) {
    if (ckpt.config.head != HeadType::Projection)
        throw std::invalid_argument("swap_head_for_pose: checkpoint is already pose-headed");
    EncoderConfig cfg = ckpt.config;
    cfg.head = HeadType::Pose;
    std::map<std::string, Tensor> params;
    for (const auto& [name, t] : ckpt.params)
        if (name.rfind("proj", 0) != 0) params[name] = t;
    Rng rng(head_seed);
    params["pose.w"] = detail::he_uniform({EncoderConfig::pose_dim(), cfg.feature_dim},
                                          cfg.feature_dim, rng);
    params["pose.b"] = Tensor::zeros({EncoderConfig::pose_dim()});
    return Model(cfg, std::move(params));
}

}  // namespace peclr
