#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peclr/errors.hpp"
#include "peclr/rng.hpp"
#include "peclr/tensor.hpp"

// Minimal dense-array reverse-mode autodiff. A Graph is a static, acyclic op
// list built once per (architecture, batch shape); node index order is the
// evaluation order, so execution is deterministic by construction. Values are
// f64 throughout and every op output is checked for NaN/Inf.
namespace peclr::nd {

using NamedTensors = std::map<std::string, Tensor>;

enum class Op {
    Input,
    Param,
    Constant,
    Dense,
    Conv3x3,
    Relu,
    MeanPool2,
    Flatten,
    Add,
    Mul,
    MatMul,
    Sum,
    Mean,
    L2Normalize,
    Log,
    Exp,
    Softmax,
    Concat,
    Reshape,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Constant: return "constant";
        case Op::Dense: return "dense";
        case Op::Conv3x3: return "conv3x3";
        case Op::Relu: return "relu";
        case Op::MeanPool2: return "mean_pool2";
        case Op::Flatten: return "flatten";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::L2Normalize: return "l2_normalize";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::Softmax: return "softmax";
        case Op::Concat: return "concat";
        case Op::Reshape: return "reshape";
    }
    return "?";
}

struct Node {
    Op op;
    std::vector<int> args;
    Shape shape;
    std::string name;       // inputs/params only
    int axis = -1;          // sum/softmax/concat
    int stride = 1;         // conv
    bool trans_a = false;   // matmul
    bool trans_b = false;
};

class Graph {
public:
    // ---- construction ----

    int input(std::string name, Shape shape) {
        if (input_ids_.count(name)) throw std::invalid_argument("duplicate input: " + name);
        int id = push({Op::Input, {}, std::move(shape), name});
        input_ids_[std::move(name)] = id;
        return id;
    }

    int param(std::string name, Tensor init) {
        if (param_ids_.count(name)) throw std::invalid_argument("duplicate param: " + name);
        int id = push({Op::Param, {}, init.shape(), name});
        param_values_[name] = std::move(init);
        param_ids_[std::move(name)] = id;
        return id;
    }

    int constant(Tensor value) {
        int id = push({Op::Constant, {}, value.shape(), ""});
        constants_[id] = std::move(value);
        return id;
    }

    // y = x W^T + b with x [N,in], W [out,in], b [out]
    int dense(int x, int w, int b) {
        auto& xs = shape_of(x);
        auto& ws = shape_of(w);
        auto& bs = shape_of(b);
        if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || xs[1] != ws[1] || ws[0] != bs[0])
            throw std::invalid_argument("dense: incompatible shapes " + shape_str(xs) + " " +
                                        shape_str(ws) + " " + shape_str(bs));
        return push({Op::Dense, {x, w, b}, {xs[0], ws[0]}});
    }

    // x [N,C,H,W], w [Co,C,3,3], b [Co]; padding 1, stride 1 or 2.
    int conv3x3(int x, int w, int b, int stride) {
        auto& xs = shape_of(x);
        auto& ws = shape_of(w);
        auto& bs = shape_of(b);
        if (xs.size() != 4 || ws.size() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] ||
            bs.size() != 1 || bs[0] != ws[0])
            throw std::invalid_argument("conv3x3: incompatible shapes " + shape_str(xs) + " " +
                                        shape_str(ws));
        if (stride != 1 && stride != 2) throw std::invalid_argument("conv3x3: stride must be 1 or 2");
        std::size_t ho = (xs[2] - 1) / stride + 1;
        std::size_t wo = (xs[3] - 1) / stride + 1;
        Node n{Op::Conv3x3, {x, w, b}, {xs[0], ws[0], ho, wo}};
        n.stride = stride;
        return push(std::move(n));
    }

    int relu(int x) { return push({Op::Relu, {x}, shape_of(x)}); }

    int mean_pool2(int x) {
        auto& xs = shape_of(x);
        if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2)
            throw std::invalid_argument("mean_pool2 needs [N,C,H,W] with even H,W, got " + shape_str(xs));
        return push({Op::MeanPool2, {x}, {xs[0], xs[1], xs[2] / 2, xs[3] / 2}});
    }

    int flatten(int x) {
        auto& xs = shape_of(x);
        if (xs.empty()) throw std::invalid_argument("flatten: rank 0");
        std::size_t rest = 1;
        for (std::size_t i = 1; i < xs.size(); ++i) rest *= xs[i];
        return push({Op::Flatten, {x}, {xs[0], rest}});
    }

    // Elementwise add; rank-1 rhs broadcasts over the leading dims (bias-add).
    int add(int a, int b) {
        auto& as = shape_of(a);
        auto& bs = shape_of(b);
        if (as != bs && !(bs.size() == 1 && !as.empty() && as.back() == bs[0]))
            throw std::invalid_argument("add: shapes " + shape_str(as) + " vs " + shape_str(bs));
        return push({Op::Add, {a, b}, as});
    }

    // Elementwise multiply; scalar rhs broadcasts.
    int mul(int a, int b) {
        auto& as = shape_of(a);
        auto& bs = shape_of(b);
        if (as != bs && shape_size(bs) != 1)
            throw std::invalid_argument("mul: shapes " + shape_str(as) + " vs " + shape_str(bs));
        return push({Op::Mul, {a, b}, as});
    }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        auto& as = shape_of(a);
        auto& bs = shape_of(b);
        if (as.size() != 2 || bs.size() != 2) throw std::invalid_argument("matmul: rank-2 only");
        std::size_t m = trans_a ? as[1] : as[0];
        std::size_t ka = trans_a ? as[0] : as[1];
        std::size_t kb = trans_b ? bs[1] : bs[0];
        std::size_t n = trans_b ? bs[0] : bs[1];
        if (ka != kb)
            throw std::invalid_argument("matmul: inner dims " + shape_str(as) + " vs " + shape_str(bs));
        Node nd{Op::MatMul, {a, b}, {m, n}};
        nd.trans_a = trans_a;
        nd.trans_b = trans_b;
        return push(std::move(nd));
    }

    // axis < 0 reduces everything to a scalar.
    int sum(int x, int axis = -1) {
        auto& xs = shape_of(x);
        if (axis < 0) return push({Op::Sum, {x}, {1}, "", -1});
        if (std::size_t(axis) >= xs.size()) throw std::invalid_argument("sum: bad axis");
        Shape out;
        for (std::size_t i = 0; i < xs.size(); ++i)
            if (int(i) != axis) out.push_back(xs[i]);
        if (out.empty()) out = {1};
        return push({Op::Sum, {x}, std::move(out), "", axis});
    }

    int mean(int x) { return push({Op::Mean, {x}, {1}}); }

    // Row-wise x / ||x||2 on [N,D].
    int l2_normalize(int x) {
        auto& xs = shape_of(x);
        if (xs.size() != 2) throw std::invalid_argument("l2_normalize: rank-2 only");
        return push({Op::L2Normalize, {x}, xs});
    }

    int log(int x) { return push({Op::Log, {x}, shape_of(x)}); }
    int exp(int x) { return push({Op::Exp, {x}, shape_of(x)}); }

    int softmax(int x, int axis) {
        auto& xs = shape_of(x);
        if (axis < 0 || std::size_t(axis) >= xs.size()) throw std::invalid_argument("softmax: bad axis");
        return push({Op::Softmax, {x}, xs, "", axis});
    }

    int concat(int a, int b, int axis) {
        auto as = shape_of(a);
        auto& bs = shape_of(b);
        if (as.size() != bs.size() || axis < 0 || std::size_t(axis) >= as.size())
            throw std::invalid_argument("concat: rank/axis mismatch");
        for (std::size_t i = 0; i < as.size(); ++i)
            if (int(i) != axis && as[i] != bs[i])
                throw std::invalid_argument("concat: shapes " + shape_str(as) + " vs " + shape_str(bs));
        as[axis] += bs[axis];
        return push({Op::Concat, {a, b}, std::move(as), "", axis});
    }

    int reshape(int x, Shape shape) {
        if (shape_size(shape) != shape_size(shape_of(x)))
            throw std::invalid_argument("reshape: element count mismatch");
        return push({Op::Reshape, {x}, std::move(shape)});
    }

    void mark_output(std::string name, int node) {
        check_id(node);
        outputs_[std::move(name)] = node;
    }

    // ---- parameters ----

    const std::map<std::string, int>& params() const { return param_ids_; }

    Tensor& param_value(const std::string& name) {
        auto it = param_values_.find(name);
        if (it == param_values_.end()) throw std::invalid_argument("unknown param: " + name);
        return it->second;
    }

    const Tensor& param_value(const std::string& name) const {
        return const_cast<Graph*>(this)->param_value(name);
    }

    void set_param(const std::string& name, Tensor v) {
        Tensor& dst = param_value(name);
        if (!dst.same_shape(v))
            throw std::invalid_argument("set_param " + name + ": shape mismatch");
        dst = std::move(v);
    }

    const std::map<std::string, int>& inputs() const { return input_ids_; }
    const std::map<std::string, int>& outputs() const { return outputs_; }
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[std::size_t(id)]; }

    // ---- execution ----

    NamedTensors forward(const NamedTensors& inputs) {
        values_.assign(nodes_.size(), Tensor());
        relu_masks_.clear();
        forward_ran_ = false;
        for (auto& [name, id] : input_ids_) {
            auto it = inputs.find(name);
            if (it == inputs.end()) throw std::invalid_argument("forward: missing input " + name);
            if (it->second.shape() != nodes_[std::size_t(id)].shape)
                throw std::invalid_argument("forward: input " + name + " has shape " +
                                            shape_str(it->second.shape()) + ", graph expects " +
                                            shape_str(nodes_[std::size_t(id)].shape));
        }
        for (int id = 0; id < int(nodes_.size()); ++id) {
            eval_node(id, inputs);
            if (!values_[std::size_t(id)].all_finite())
                throw NumericError("non-finite value at node " + std::to_string(id) + " (" +
                                   op_name(nodes_[std::size_t(id)].op) + ")");
        }
        forward_ran_ = true;
        NamedTensors out;
        for (auto& [name, id] : outputs_) out[name] = values_[std::size_t(id)];
        return out;
    }

    // Accumulates cotangents from the named outputs back to every parameter.
    // Parameters unreachable from the seeded outputs get zero gradients.
    NamedTensors backward(const NamedTensors& output_grads) {
        if (!forward_ran_) throw std::logic_error("backward called before forward");
        grads_.clear();
        grads_.resize(nodes_.size());
        for (auto& [name, g] : output_grads) {
            auto it = outputs_.find(name);
            if (it == outputs_.end()) throw std::invalid_argument("backward: unknown output " + name);
            const Node& n = nodes_[std::size_t(it->second)];
            if (g.shape() != n.shape)
                throw std::invalid_argument("backward: grad shape for " + name + " is " +
                                            shape_str(g.shape()) + ", expected " + shape_str(n.shape));
            accumulate(it->second, g);
        }
        for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
            if (grads_[std::size_t(id)].empty()) continue;
            backprop_node(id);
        }
        NamedTensors param_grads;
        for (auto& [name, id] : param_ids_) {
            if (grads_[std::size_t(id)].empty())
                param_grads[name] = Tensor::zeros(nodes_[std::size_t(id)].shape);
            else
                param_grads[name] = grads_[std::size_t(id)];
        }
        return param_grads;
    }

    const Tensor& value(int id) const {
        check_id(id);
        return values_[std::size_t(id)];
    }

    Tensor input_gradient(const std::string& name) const {
        auto it = input_ids_.find(name);
        if (it == input_ids_.end()) throw std::invalid_argument("unknown input: " + name);
        const Tensor& g = grads_[std::size_t(it->second)];
        if (g.empty()) return Tensor::zeros(nodes_[std::size_t(it->second)].shape);
        return g;
    }

    // Sign patterns of every relu input from the latest forward; used by
    // grad_check to flag finite-difference evaluations that crossed a kink.
    // Recording is off by default so training forwards skip the bookkeeping.
    const std::vector<std::vector<std::uint8_t>>& relu_masks() const { return relu_masks_; }
    void set_record_relu_masks(bool on) { record_relu_masks_ = on; }

private:
    int push(Node n) {
        for (int a : n.args) check_id(a);
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    void check_id(int id) const {
        if (id < 0 || std::size_t(id) >= nodes_.size())
            throw std::invalid_argument("bad node id " + std::to_string(id));
    }

    const Shape& shape_of(int id) const {
        check_id(id);
        return nodes_[std::size_t(id)].shape;
    }

    void accumulate(int id, const Tensor& g) {
        Tensor& dst = grads_[std::size_t(id)];
        if (dst.empty()) {
            dst = g;
            return;
        }
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    const Tensor& val(int id) const { return values_[std::size_t(id)]; }

    // ---- per-op forward ----

    void eval_node(int id, const NamedTensors& inputs) {
        Node& n = nodes_[std::size_t(id)];
        Tensor& out = values_[std::size_t(id)];
        switch (n.op) {
            case Op::Input: out = inputs.at(n.name); break;
            case Op::Param: out = param_values_.at(n.name); break;
            case Op::Constant: out = constants_.at(id); break;
            case Op::Dense: out = dense_fwd(val(n.args[0]), val(n.args[1]), val(n.args[2])); break;
            case Op::Conv3x3:
                out = conv_fwd(val(n.args[0]), val(n.args[1]), val(n.args[2]), n.stride, n.shape);
                break;
            case Op::Relu: {
                const Tensor& x = val(n.args[0]);
                out = Tensor(n.shape);
                if (record_relu_masks_) {
                    std::vector<std::uint8_t> mask(x.size());
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        bool pos = x[i] > 0.0;
                        mask[i] = pos;
                        out[i] = pos ? x[i] : 0.0;
                    }
                    relu_masks_.push_back(std::move(mask));
                } else {
                    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
                }
                break;
            }
            case Op::MeanPool2: out = pool_fwd(val(n.args[0]), n.shape); break;
            case Op::Flatten:
            case Op::Reshape: out = val(n.args[0]).reshaped(n.shape); break;
            case Op::Add: {
                const Tensor& a = val(n.args[0]);
                const Tensor& b = val(n.args[1]);
                out = a;
                if (a.same_shape(b)) {
                    for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
                } else {
                    std::size_t d = b.size();
                    for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i % d];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& a = val(n.args[0]);
                const Tensor& b = val(n.args[1]);
                out = a;
                if (a.same_shape(b)) {
                    for (std::size_t i = 0; i < a.size(); ++i) out[i] *= b[i];
                } else {
                    for (std::size_t i = 0; i < a.size(); ++i) out[i] *= b[0];
                }
                break;
            }
            case Op::MatMul:
                out = matmul_fwd(val(n.args[0]), val(n.args[1]), n.trans_a, n.trans_b, n.shape);
                break;
            case Op::Sum: {
                const Tensor& x = val(n.args[0]);
                if (n.axis < 0) {
                    double s = 0;
                    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
                    out = Tensor::scalar(s);
                } else {
                    out = Tensor(n.shape);
                    Lanes ln(x.shape(), n.axis);
                    for (std::size_t o = 0; o < ln.outer; ++o)
                        for (std::size_t i = 0; i < ln.inner; ++i) {
                            double s = 0;
                            for (std::size_t k = 0; k < ln.len; ++k) s += x[ln.index(o, k, i)];
                            out[o * ln.inner + i] = s;
                        }
                }
                break;
            }
            case Op::Mean: {
                const Tensor& x = val(n.args[0]);
                double s = 0;
                for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
                out = Tensor::scalar(s / double(x.size()));
                break;
            }
            case Op::L2Normalize: {
                const Tensor& x = val(n.args[0]);
                out = Tensor(n.shape);
                std::size_t rows = n.shape[0], cols = n.shape[1];
                for (std::size_t r = 0; r < rows; ++r) {
                    double s = 0;
                    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
                    double inv = 1.0 / std::sqrt(s);
                    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * inv;
                }
                break;
            }
            case Op::Log: {
                const Tensor& x = val(n.args[0]);
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
                break;
            }
            case Op::Exp: {
                const Tensor& x = val(n.args[0]);
                out = Tensor(n.shape);
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
                break;
            }
            case Op::Softmax: {
                const Tensor& x = val(n.args[0]);
                out = Tensor(n.shape);
                Lanes ln(x.shape(), n.axis);
                for (std::size_t o = 0; o < ln.outer; ++o)
                    for (std::size_t i = 0; i < ln.inner; ++i) {
                        double mx = -1e300;
                        for (std::size_t k = 0; k < ln.len; ++k) mx = std::max(mx, x[ln.index(o, k, i)]);
                        double s = 0;
                        for (std::size_t k = 0; k < ln.len; ++k) {
                            double e = std::exp(x[ln.index(o, k, i)] - mx);
                            out[ln.index(o, k, i)] = e;
                            s += e;
                        }
                        for (std::size_t k = 0; k < ln.len; ++k) out[ln.index(o, k, i)] /= s;
                    }
                break;
            }
            case Op::Concat: {
                const Tensor& a = val(n.args[0]);
                const Tensor& b = val(n.args[1]);
                out = Tensor(n.shape);
                Lanes ln(n.shape, n.axis);
                std::size_t la = a.shape()[std::size_t(n.axis)];
                for (std::size_t o = 0; o < ln.outer; ++o)
                    for (std::size_t k = 0; k < ln.len; ++k)
                        for (std::size_t i = 0; i < ln.inner; ++i)
                            out[ln.index(o, k, i)] =
                                k < la ? a[(o * la + k) * ln.inner + i]
                                       : b[(o * (ln.len - la) + (k - la)) * ln.inner + i];
                break;
            }
        }
    }

    // ---- per-op backward ----

    void backprop_node(int id) {
        const Node& n = nodes_[std::size_t(id)];
        const Tensor& g = grads_[std::size_t(id)];
        switch (n.op) {
            case Op::Input:
            case Op::Param:
            case Op::Constant: break;
            case Op::Dense: {
                const Tensor& x = val(n.args[0]);
                const Tensor& w = val(n.args[1]);
                std::size_t N = x.dim(0), in = x.dim(1), outd = w.dim(0);
                Tensor dx(x.shape()), dw(w.shape()), db({outd});
                for (std::size_t r = 0; r < N; ++r) {
                    const double* gr = g.data() + r * outd;
                    const double* xr = x.data() + r * in;
                    double* dxr = dx.data() + r * in;
                    for (std::size_t o = 0; o < outd; ++o) {
                        double gv = gr[o];
                        if (gv == 0.0) continue;
                        const double* wr = w.data() + o * in;
                        double* dwr = dw.data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) {
                            dxr[i] += gv * wr[i];
                            dwr[i] += gv * xr[i];
                        }
                        db[o] += gv;
                    }
                }
                accumulate(n.args[0], dx);
                accumulate(n.args[1], dw);
                accumulate(n.args[2], db);
                break;
            }
            case Op::Conv3x3: conv_bwd(n, g); break;
            case Op::Relu: {
                const Tensor& x = val(n.args[0]);
                Tensor dx(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
                accumulate(n.args[0], dx);
                break;
            }
            case Op::MeanPool2: {
                const Tensor& x = val(n.args[0]);
                Tensor dx(x.shape());
                std::size_t N = n.shape[0], C = n.shape[1], Ho = n.shape[2], Wo = n.shape[3];
                std::size_t H = Ho * 2, W = Wo * 2;
                for (std::size_t nc = 0; nc < N * C; ++nc)
                    for (std::size_t ho = 0; ho < Ho; ++ho)
                        for (std::size_t wo = 0; wo < Wo; ++wo) {
                            double gv = 0.25 * g[(nc * Ho + ho) * Wo + wo];
                            double* base = dx.data() + nc * H * W + 2 * ho * W + 2 * wo;
                            base[0] += gv;
                            base[1] += gv;
                            base[W] += gv;
                            base[W + 1] += gv;
                        }
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Flatten:
            case Op::Reshape:
                accumulate(n.args[0], g.reshaped(nodes_[std::size_t(n.args[0])].shape));
                break;
            case Op::Add: {
                accumulate(n.args[0], g);
                const Node& bn = nodes_[std::size_t(n.args[1])];
                if (bn.shape == n.shape) {
                    accumulate(n.args[1], g);
                } else {
                    Tensor db(bn.shape);
                    std::size_t d = shape_size(bn.shape);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                    accumulate(n.args[1], db);
                }
                break;
            }
            case Op::Mul: {
                const Tensor& a = val(n.args[0]);
                const Tensor& b = val(n.args[1]);
                Tensor da(a.shape());
                if (a.same_shape(b)) {
                    Tensor db(b.shape());
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        da[i] = g[i] * b[i];
                        db[i] = g[i] * a[i];
                    }
                    accumulate(n.args[1], db);
                } else {
                    Tensor db(b.shape());
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        da[i] = g[i] * b[0];
                        db[0] += g[i] * a[i];
                    }
                    accumulate(n.args[1], db);
                }
                accumulate(n.args[0], da);
                break;
            }
            case Op::MatMul: {
                const Tensor& a = val(n.args[0]);
                const Tensor& b = val(n.args[1]);
                // C = A' B'   =>  dA' = G B'^T, dB' = A'^T G, then undo transposes.
                Tensor da = n.trans_a ? matmul_raw(b, g, n.trans_b, true, a.shape())
                                      : matmul_raw(g, b, false, !n.trans_b, a.shape());
                Tensor db = n.trans_b ? matmul_raw(g, a, true, n.trans_a, b.shape())
                                      : matmul_raw(a, g, !n.trans_a, false, b.shape());
                accumulate(n.args[0], da);
                accumulate(n.args[1], db);
                break;
            }
            case Op::Sum: {
                const Node& xn = nodes_[std::size_t(n.args[0])];
                Tensor dx(xn.shape);
                if (n.axis < 0) {
                    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[0];
                } else {
                    Lanes ln(xn.shape, n.axis);
                    for (std::size_t o = 0; o < ln.outer; ++o)
                        for (std::size_t k = 0; k < ln.len; ++k)
                            for (std::size_t i = 0; i < ln.inner; ++i)
                                dx[ln.index(o, k, i)] = g[o * ln.inner + i];
                }
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Mean: {
                const Node& xn = nodes_[std::size_t(n.args[0])];
                Tensor dx(xn.shape);
                double gv = g[0] / double(dx.size());
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gv;
                accumulate(n.args[0], dx);
                break;
            }
            case Op::L2Normalize: {
                const Tensor& x = val(n.args[0]);
                const Tensor& y = val(id);
                Tensor dx(x.shape());
                std::size_t rows = x.dim(0), cols = x.dim(1);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * cols;
                    const double* yr = y.data() + r * cols;
                    const double* gr = g.data() + r * cols;
                    double s = 0, dot = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        s += xr[c] * xr[c];
                        dot += yr[c] * gr[c];
                    }
                    double inv = 1.0 / std::sqrt(s);
                    double* dxr = dx.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) dxr[c] = inv * (gr[c] - yr[c] * dot);
                }
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Log: {
                const Tensor& x = val(n.args[0]);
                Tensor dx(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] / x[i];
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Exp: {
                const Tensor& y = val(id);
                Tensor dx(y.shape());
                for (std::size_t i = 0; i < y.size(); ++i) dx[i] = g[i] * y[i];
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Softmax: {
                const Tensor& y = val(id);
                Tensor dx(y.shape());
                Lanes ln(y.shape(), n.axis);
                for (std::size_t o = 0; o < ln.outer; ++o)
                    for (std::size_t i = 0; i < ln.inner; ++i) {
                        double dot = 0;
                        for (std::size_t k = 0; k < ln.len; ++k)
                            dot += g[ln.index(o, k, i)] * y[ln.index(o, k, i)];
                        for (std::size_t k = 0; k < ln.len; ++k) {
                            std::size_t ix = ln.index(o, k, i);
                            dx[ix] = y[ix] * (g[ix] - dot);
                        }
                    }
                accumulate(n.args[0], dx);
                break;
            }
            case Op::Concat: {
                const Node& an = nodes_[std::size_t(n.args[0])];
                const Node& bn = nodes_[std::size_t(n.args[1])];
                Tensor da(an.shape), db(bn.shape);
                Lanes ln(n.shape, n.axis);
                std::size_t la = an.shape[std::size_t(n.axis)];
                for (std::size_t o = 0; o < ln.outer; ++o)
                    for (std::size_t k = 0; k < ln.len; ++k)
                        for (std::size_t i = 0; i < ln.inner; ++i) {
                            double gv = g[ln.index(o, k, i)];
                            if (k < la)
                                da[(o * la + k) * ln.inner + i] = gv;
                            else
                                db[(o * (ln.len - la) + (k - la)) * ln.inner + i] = gv;
                        }
                accumulate(n.args[0], da);
                accumulate(n.args[1], db);
                break;
            }
        }
    }

    // ---- kernels ----

    struct Lanes {
        std::size_t outer, len, inner;
        Lanes(const Shape& s, int axis) {
            outer = 1;
            for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
            len = s[std::size_t(axis)];
            inner = 1;
            for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
        }
        std::size_t index(std::size_t o, std::size_t k, std::size_t i) const {
            return (o * len + k) * inner + i;
        }
    };

    static Tensor dense_fwd(const Tensor& x, const Tensor& w, const Tensor& b) {
        std::size_t N = x.dim(0), in = x.dim(1), outd = w.dim(0);
        Tensor y({N, outd});
        for (std::size_t r = 0; r < N; ++r) {
            const double* xr = x.data() + r * in;
            double* yr = y.data() + r * outd;
            for (std::size_t o = 0; o < outd; ++o) {
                const double* wr = w.data() + o * in;
                double s = b[o];
                for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
                yr[o] = s;
            }
        }
        return y;
    }

    static Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb, const Shape& out_shape) {
        std::size_t m = out_shape[0], n = out_shape[1];
        std::size_t k = ta ? a.dim(0) : a.dim(1);
        Tensor c(out_shape);
        auto ai = [&](std::size_t i, std::size_t kk) { return ta ? a[kk * m + i] : a[i * k + kk]; };
        auto bi = [&](std::size_t kk, std::size_t j) { return tb ? b[j * k + kk] : b[kk * n + j]; };
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t kk = 0; kk < k; ++kk) s += ai(i, kk) * bi(kk, j);
                c[i * n + j] = s;
            }
        return c;
    }

    static Tensor matmul_fwd(const Tensor& a, const Tensor& b, bool ta, bool tb, const Shape& out) {
        return matmul_raw(a, b, ta, tb, out);
    }

    static Tensor pool_fwd(const Tensor& x, const Shape& out_shape) {
        std::size_t N = out_shape[0], C = out_shape[1], Ho = out_shape[2], Wo = out_shape[3];
        std::size_t H = Ho * 2, W = Wo * 2;
        Tensor y(out_shape);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const double* xp = x.data() + nc * H * W;
            double* yp = y.data() + nc * Ho * Wo;
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    const double* b = xp + 2 * ho * W + 2 * wo;
                    yp[ho * Wo + wo] = 0.25 * (b[0] + b[1] + b[W] + b[W + 1]);
                }
        }
        return y;
    }

    // 3x3, pad 1. The kh/kw taps are fused per output row with the edge
    // columns peeled out of the hot loop.
    static Tensor conv_fwd(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                           const Shape& out_shape) {
        std::size_t N = out_shape[0], Co = out_shape[1], Ho = out_shape[2], Wo = out_shape[3];
        std::size_t Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        std::size_t s = std::size_t(stride);
        Tensor y(out_shape);
        // interior wo: all three kw taps in bounds
        std::size_t wo_lo = 1;
        std::size_t wo_hi = std::min(Wo, (W - 2) / s + 1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Co; ++co) {
                double* yp = y.data() + (n * Co + co) * Ho * Wo;
                double bias = b[co];
                for (std::size_t i = 0; i < Ho * Wo; ++i) yp[i] = bias;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const double* xp = x.data() + (n * Ci + ci) * H * W;
                    const double* wp = w.data() + (co * Ci + ci) * 9;
                    for (std::size_t ho = 0; ho < Ho; ++ho) {
                        double* yrow = yp + ho * Wo;
                        for (std::size_t kh = 0; kh < 3; ++kh) {
                            std::ptrdiff_t h = std::ptrdiff_t(ho * s + kh) - 1;
                            if (h < 0 || h >= std::ptrdiff_t(H)) continue;
                            const double* xrow = xp + std::size_t(h) * W;
                            double w0 = wp[kh * 3], w1 = wp[kh * 3 + 1], w2 = wp[kh * 3 + 2];
                            for (std::size_t wo = 0; wo < wo_lo; ++wo) {
                                double acc = 0;
                                for (std::size_t kw = 0; kw < 3; ++kw) {
                                    std::ptrdiff_t ww = std::ptrdiff_t(wo * s + kw) - 1;
                                    if (ww >= 0 && ww < std::ptrdiff_t(W)) acc += wp[kh * 3 + kw] * xrow[ww];
                                }
                                yrow[wo] += acc;
                            }
                            for (std::size_t wo = wo_lo; wo < wo_hi; ++wo) {
                                const double* xc = xrow + wo * s - 1;
                                yrow[wo] += w0 * xc[0] + w1 * xc[1] + w2 * xc[2];
                            }
                            for (std::size_t wo = wo_hi; wo < Wo; ++wo) {
                                double acc = 0;
                                for (std::size_t kw = 0; kw < 3; ++kw) {
                                    std::ptrdiff_t ww = std::ptrdiff_t(wo * s + kw) - 1;
                                    if (ww >= 0 && ww < std::ptrdiff_t(W)) acc += wp[kh * 3 + kw] * xrow[ww];
                                }
                                yrow[wo] += acc;
                            }
                        }
                    }
                }
            }
        return y;
    }

    void conv_bwd(const Node& n, const Tensor& g) {
        const Tensor& x = val(n.args[0]);
        const Tensor& w = val(n.args[1]);
        std::size_t N = n.shape[0], Co = n.shape[1], Ho = n.shape[2], Wo = n.shape[3];
        std::size_t Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        std::size_t s = std::size_t(n.stride);
        Tensor dx(x.shape()), dw(w.shape()), db({Co});
        std::size_t wo_lo = 1;
        std::size_t wo_hi = std::min(Wo, (W - 2) / s + 1);
        for (std::size_t nn = 0; nn < N; ++nn)
            for (std::size_t co = 0; co < Co; ++co) {
                const double* gp = g.data() + (nn * Co + co) * Ho * Wo;
                double bsum = 0;
                for (std::size_t i = 0; i < Ho * Wo; ++i) bsum += gp[i];
                db[co] += bsum;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const double* xp = x.data() + (nn * Ci + ci) * H * W;
                    double* dxp = dx.data() + (nn * Ci + ci) * H * W;
                    const double* wp = w.data() + (co * Ci + ci) * 9;
                    double* dwp = dw.data() + (co * Ci + ci) * 9;
                    for (std::size_t ho = 0; ho < Ho; ++ho) {
                        const double* grow = gp + ho * Wo;
                        for (std::size_t kh = 0; kh < 3; ++kh) {
                            std::ptrdiff_t h = std::ptrdiff_t(ho * s + kh) - 1;
                            if (h < 0 || h >= std::ptrdiff_t(H)) continue;
                            const double* xrow = xp + std::size_t(h) * W;
                            double* dxrow = dxp + std::size_t(h) * W;
                            double w0 = wp[kh * 3], w1 = wp[kh * 3 + 1], w2 = wp[kh * 3 + 2];
                            double a0 = 0, a1 = 0, a2 = 0;
                            for (std::size_t wo = 0; wo < wo_lo; ++wo) {
                                double gv = grow[wo];
                                for (std::size_t kw = 0; kw < 3; ++kw) {
                                    std::ptrdiff_t ww = std::ptrdiff_t(wo * s + kw) - 1;
                                    if (ww >= 0 && ww < std::ptrdiff_t(W)) {
                                        dxrow[ww] += wp[kh * 3 + kw] * gv;
                                        dwp[kh * 3 + kw] += gv * xrow[ww];
                                    }
                                }
                            }
                            for (std::size_t wo = wo_lo; wo < wo_hi; ++wo) {
                                double gv = grow[wo];
                                const double* xc = xrow + wo * s - 1;
                                double* dxc = dxrow + wo * s - 1;
                                a0 += gv * xc[0];
                                a1 += gv * xc[1];
                                a2 += gv * xc[2];
                                dxc[0] += w0 * gv;
                                dxc[1] += w1 * gv;
                                dxc[2] += w2 * gv;
                            }
                            for (std::size_t wo = wo_hi; wo < Wo; ++wo) {
                                double gv = grow[wo];
                                for (std::size_t kw = 0; kw < 3; ++kw) {
                                    std::ptrdiff_t ww = std::ptrdiff_t(wo * s + kw) - 1;
                                    if (ww >= 0 && ww < std::ptrdiff_t(W)) {
                                        dxrow[ww] += wp[kh * 3 + kw] * gv;
                                        dwp[kh * 3 + kw] += gv * xrow[ww];
                                    }
                                }
                            }
                            dwp[kh * 3] += a0;
                            dwp[kh * 3 + 1] += a1;
                            dwp[kh * 3 + 2] += a2;
                        }
                    }
                }
            }
        accumulate(n.args[0], dx);
        accumulate(n.args[1], dw);
        accumulate(n.args[2], db);
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> input_ids_;
    std::map<std::string, int> param_ids_;
    std::map<std::string, int> outputs_;
    std::map<std::string, Tensor> param_values_;
    std::map<int, Tensor> constants_;

    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::vector<std::vector<std::uint8_t>> relu_masks_;
    bool record_relu_masks_ = false;
    bool forward_ran_ = false;
};

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    // coordinates whose finite differences straddled a relu kink, plus those
    // where analytic and numeric both sit below the f64 noise floor
    std::vector<std::pair<std::string, std::size_t>> skipped;
};

// Central differences against the analytic gradients of the graph's single
// scalar output. max_coords_per_param == 0 checks everything; otherwise a
// seeded subset per parameter tensor.
inline GradCheckResult grad_check(Graph& g, const NamedTensors& inputs, double step,
                                  std::size_t max_coords_per_param = 0,
                                  std::uint64_t select_seed = 0) {
    if (step <= 0) throw std::invalid_argument("grad_check: step must be > 0");
    if (g.outputs().size() != 1) throw std::invalid_argument("grad_check: graph needs one output");
    const auto& [out_name, out_id] = *g.outputs().begin();
    if (shape_size(g.node(out_id).shape) != 1)
        throw std::invalid_argument("grad_check: output must be scalar");

    g.set_record_relu_masks(true);
    g.forward(inputs);
    NamedTensors analytic = g.backward({{out_name, Tensor::scalar(1.0)}});

    constexpr double kNoiseFloor = 1e-7;
    GradCheckResult res;
    Rng pick(select_seed);
    for (auto& [pname, pid] : g.params()) {
        Tensor& p = g.param_value(pname);
        std::vector<std::size_t> coords(p.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (max_coords_per_param && coords.size() > max_coords_per_param) {
            pick.shuffle(coords);
            coords.resize(max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t c : coords) {
            double saved = p[c];
            p[c] = saved + step;
            double fp = g.forward(inputs).at(out_name)[0];
            auto masks_p = g.relu_masks();
            p[c] = saved - step;
            double fm = g.forward(inputs).at(out_name)[0];
            bool kink = g.relu_masks() != masks_p;
            p[c] = saved;
            if (kink) {
                res.skipped.emplace_back(pname, c);
                continue;
            }
            double numeric = (fp - fm) / (2.0 * step);
            double a = analytic.at(pname)[c];
            if (std::abs(a) < kNoiseFloor && std::abs(numeric) < kNoiseFloor) {
                res.skipped.emplace_back(pname, c);
                continue;
            }
            double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
            res.max_rel_error = std::max(res.max_rel_error, rel);
            ++res.checked;
        }
    }
    // restore clean forward state for callers
    g.forward(inputs);
    g.backward({{out_name, Tensor::scalar(1.0)}});
    g.set_record_relu_masks(false);
    return res;
}

}  // namespace peclr::nd
