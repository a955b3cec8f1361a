#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

enum class OpKind { input, conv1d, maxpool1d, gap, dense, lstm, dropout, concat, relu, tanh, sigmoid, bce };
enum class Activation { linear, relu, sigmoid, tanh };
enum class Mode { train, eval };

/// Named parameter tensors of one model. std::map so iteration order is
/// deterministic (checkpoints, optimizer state, gradient dumps).
using ParamStore = std::map<std::string, Tensor>;

inline void zero_param_grads(ParamStore& store) {
    for (auto& [name, t] : store) {
        t.ensure_grad();
        t.zero_grad();
    }
}

inline ParamStore clone_values(const ParamStore& store) {
    ParamStore out;
    for (const auto& [name, t] : store) out.emplace(name, Tensor(t.shape, t.data));
    return out;
}

constexpr double kBceEps = 1e-7;

/// Binary cross-entropy of one clamped probability against a binary target.
inline double bce_term(double p, double t) {
    const double pc = std::min(std::max(p, kBceEps), 1.0 - kBceEps);
    return -(t * std::log(pc) + (1.0 - t) * std::log1p(-pc));
}

inline double apply_activation(Activation a, double z) {
    switch (a) {
        case Activation::linear: return z;
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
        case Activation::tanh: return std::tanh(z);
    }
    return z;
}

/// Derivative of the activation expressed through its output value. All four
/// supported activations admit this form, which removes the need to cache
/// pre-activation values.
inline double activation_deriv_from_output(Activation a, double y) {
    switch (a) {
        case Activation::linear: return 1.0;
        case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: return y * (1.0 - y);
        case Activation::tanh: return 1.0 - y * y;
    }
    return 1.0;
}

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
using EStrideMap = Eigen::Map<const EMat, 0, Eigen::OuterStride<>>;
using EStrideMapMut = Eigen::Map<EMat, 0, Eigen::OuterStride<>>;
}  // namespace detail

/// Reverse-mode computation graph. Nodes are appended in topological order
/// (an input reference must already exist), so the graph is acyclic by
/// construction and the backward pass is a reverse walk of the node list.
///
/// Sequence ops accept either a single example ([T x C], [N]) or a batch with
/// one extra leading axis; losses average over the batch. Forward caches
/// whatever each op needs for its backward inside the node.
class Graph {
public:
    // ---- construction -------------------------------------------------

    int add_input() { return push(OpKind::input, {}, {}); }

    int add_conv1d(int in, Tensor* kernels, Tensor* bias, std::string name = "conv") {
        int id = push(OpKind::conv1d, {in}, {kernels, bias});
        nodes_[id].name = std::move(name);
        return id;
    }

    int add_maxpool1d(int in, int pool) {
        if (pool < 1) throw value_error("maxpool1d: pool size must be >= 1, got " + std::to_string(pool));
        int id = push(OpKind::maxpool1d, {in}, {});
        nodes_[id].pool = pool;
        return id;
    }

    int add_gap(int in) { return push(OpKind::gap, {in}, {}); }

    int add_dense(int in, Tensor* weights, Tensor* bias, Activation act, std::string name = "dense") {
        int id = push(OpKind::dense, {in}, {weights, bias});
        nodes_[id].act = act;
        nodes_[id].name = std::move(name);
        return id;
    }

    int add_lstm(int in, Tensor* wx, Tensor* wh, Tensor* bias, std::string name = "lstm") {
        int id = push(OpKind::lstm, {in}, {wx, wh, bias});
        nodes_[id].name = std::move(name);
        return id;
    }

    int add_dropout(int in, double p) {
        if (p < 0.0 || p >= 1.0)
            throw value_error("dropout: probability must be in [0, 1), got " + std::to_string(p));
        int id = push(OpKind::dropout, {in}, {});
        nodes_[id].drop_p = p;
        return id;
    }

    int add_concat(std::vector<int> ins) {
        if (ins.empty()) throw value_error("concat: needs at least one input");
        return push(OpKind::concat, std::move(ins), {});
    }

    int add_relu(int in) { return push(OpKind::relu, {in}, {}); }
    int add_tanh(int in) { return push(OpKind::tanh, {in}, {}); }
    int add_sigmoid(int in) { return push(OpKind::sigmoid, {in}, {}); }

    /// BCE loss against the node's target vector (mean over the batch).
    /// Targets are binary; `allow_soft_targets` admits values in [0, 1],
    /// which gradient-flow tests use to construct zero output error.
    int add_bce(int pred, bool allow_soft_targets = false) {
        int id = push(OpKind::bce, {pred}, {});
        nodes_[id].soft_target = allow_soft_targets;
        return id;
    }

    // ---- data binding -------------------------------------------------

    void set_input(int id, Tensor value) {
        Node& n = node(id);
        if (n.kind != OpKind::input) throw state_error("set_input: node is not an input placeholder");
        n.out = std::move(value);
        forward_done_ = false;
    }

    void set_target(int bce_id, std::vector<double> target) {
        Node& n = node(bce_id);
        if (n.kind != OpKind::bce) throw state_error("set_target: node is not a bce loss");
        n.target = std::move(target);
    }

    // ---- execution ----------------------------------------------------

    /// Evaluate every node in topological order. `rng` feeds dropout masks
    /// and is only touched in train mode by dropout nodes with p > 0.
    void forward(Mode mode, RngStream* rng = nullptr) {
        for (std::size_t i = 0; i < nodes_.size(); ++i) forward_node(static_cast<int>(i), mode, rng);
        forward_done_ = true;
    }

    /// Backward from one scalar node, seeding d(out)/d(out) = seed.
    void backward(int loss_id, double seed = 1.0) { backward_multi({{loss_id, seed}}); }

    /// Backward from several scalar nodes at once; each seed is the weight of
    /// that node in the scalar being differentiated.
    void backward_multi(const std::vector<std::pair<int, double>>& seeds) {
        prepare_backward();
        for (const auto& [id, w] : seeds) {
            Node& n = node(id);
            if (n.out.size() != 1)
                throw shape_error("backward: seed node output has " + std::to_string(n.out.size()) +
                                  " elements, expected a scalar");
            n.out.grad[0] += w;
            n.reached = true;
        }
        run_backward();
    }

    /// Backward from an arbitrary node with an explicit cotangent.
    void backward_weighted(int id, const std::vector<double>& weights) {
        prepare_backward();
        Node& n = node(id);
        if (static_cast<std::int64_t>(weights.size()) != n.out.size())
            throw shape_error("backward_weighted: cotangent length mismatch");
        for (std::size_t i = 0; i < weights.size(); ++i) n.out.grad[i] = weights[i];
        n.reached = true;
        run_backward();
    }

    // ---- access -------------------------------------------------------

    const Tensor& value(int id) const { return node(id).out; }
    const dvec& output_grad(int id) const { return node(id).out.grad; }
    OpKind kind(int id) const { return node(id).kind; }
    std::size_t node_count() const { return nodes_.size(); }
    bool forward_done() const { return forward_done_; }

private:
    struct Node {
        OpKind kind;
        std::vector<int> inputs;
        std::vector<Tensor*> params;
        std::string name;
        int pool = 0;
        double drop_p = 0.0;
        Activation act = Activation::linear;
        bool soft_target = false;
        std::vector<double> target;
        Tensor out;
        std::vector<Tensor> cache;
        std::vector<int> icache;
        bool reached = false;  // backward bookkeeping
    };

    std::vector<Node> nodes_;
    bool forward_done_ = false;

    Node& node(int id) {
        if (id < 0 || id >= static_cast<int>(nodes_.size()))
            throw state_error("graph: node id " + std::to_string(id) + " out of range");
        return nodes_[static_cast<std::size_t>(id)];
    }
    const Node& node(int id) const { return const_cast<Graph*>(this)->node(id); }

    int push(OpKind kind, std::vector<int> inputs, std::vector<Tensor*> params) {
        for (int in : inputs)
            if (in < 0 || in >= static_cast<int>(nodes_.size()))
                throw state_error("graph: input node " + std::to_string(in) + " does not exist yet");
        for (Tensor* p : params)
            if (p == nullptr) throw state_error("graph: null parameter tensor");
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.params = std::move(params);
        nodes_.push_back(std::move(n));
        forward_done_ = false;
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Split a sequence tensor into (batch, time, channels); rank 2 means an
    // implicit batch of one.
    static void seq_dims(const Tensor& t, const char* what, int& b, int& tt, int& c, bool& batched) {
        if (t.rank() == 2) {
            b = 1;
            tt = t.dim(0);
            c = t.dim(1);
            batched = false;
        } else if (t.rank() == 3) {
            b = t.dim(0);
            tt = t.dim(1);
            c = t.dim(2);
            batched = true;
        } else {
            throw shape_error(std::string(what) + ": expected [T x C] or [B x T x C] input, got " +
                              t.shape_str());
        }
    }

    static void vec_dims(const Tensor& t, const char* what, int& b, int& n, bool& batched) {
        if (t.rank() == 1) {
            b = 1;
            n = t.dim(0);
            batched = false;
        } else if (t.rank() == 2) {
            b = t.dim(0);
            n = t.dim(1);
            batched = true;
        } else {
            throw shape_error(std::string(what) + ": expected [N] or [B x N] input, got " + t.shape_str());
        }
    }

    void prepare_backward() {
        if (!forward_done_) throw state_error("backward: forward pass has not been run");
        for (Node& n : nodes_) {
            n.out.ensure_grad();
            n.out.zero_grad();
            n.reached = false;
        }
    }

    void run_backward() {
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.reached) continue;  // not on any path to a seeded node: grads stay exactly zero
            backward_node(n);
        }
    }

    void mark(int id) { nodes_[static_cast<std::size_t>(id)].reached = true; }

    // ---- op implementations -------------------------------------------

    void forward_node(int id, Mode mode, RngStream* rng) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        switch (n.kind) {
            case OpKind::input:
                if (n.out.data.empty()) throw state_error("forward: input node " + std::to_string(id) + " has no value");
                break;
            case OpKind::conv1d: conv_forward(n); break;
            case OpKind::maxpool1d: pool_forward(n); break;
            case OpKind::gap: gap_forward(n); break;
            case OpKind::dense: dense_forward(n); break;
            case OpKind::lstm: lstm_forward(n); break;
            case OpKind::dropout: dropout_forward(n, mode, rng); break;
            case OpKind::concat: concat_forward(n); break;
            case OpKind::relu:
            case OpKind::tanh:
            case OpKind::sigmoid: elementwise_forward(n); break;
            case OpKind::bce: bce_forward(n); break;
        }
    }

    void backward_node(Node& n) {
        switch (n.kind) {
            case OpKind::input: break;
            case OpKind::conv1d: conv_backward(n); break;
            case OpKind::maxpool1d: pool_backward(n); break;
            case OpKind::gap: gap_backward(n); break;
            case OpKind::dense: dense_backward(n); break;
            case OpKind::lstm: lstm_backward(n); break;
            case OpKind::dropout: dropout_backward(n); break;
            case OpKind::concat: concat_backward(n); break;
            case OpKind::relu:
            case OpKind::tanh:
            case OpKind::sigmoid: elementwise_backward(n); break;
            case OpKind::bce: bce_backward(n); break;
        }
    }

    Tensor& in_tensor(Node& n, int slot = 0) { return nodes_[static_cast<std::size_t>(n.inputs[slot])].out; }

    void reach_input(Node& n, int slot = 0) {
        Node& src = nodes_[static_cast<std::size_t>(n.inputs[slot])];
        src.reached = true;
    }

    static void resize_out(Tensor& out, std::vector<int> shape) {
        if (out.shape != shape) {
            out.shape = std::move(shape);
            out.data.assign(static_cast<std::size_t>(Tensor::numel_of(out.shape)), 0.0);
            out.grad.clear();
        }
    }

    // conv1d: valid convolution, stride 1. im2col + GEMM; the im2col matrix
    // stays cached for the weight-gradient GEMM in backward.
    void conv_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        const Tensor& w = *n.params[0];
        const Tensor& b = *n.params[1];
        int batch, t, cin;
        bool batched;
        seq_dims(x, "conv1d", batch, t, cin, batched);
        if (w.rank() != 3)
            throw shape_error("conv1d '" + n.name + "': kernels must be [K x Cin x Cout], got " + w.shape_str());
        const int k = w.dim(0), wcin = w.dim(1), cout = w.dim(2);
        if (wcin != cin)
            throw shape_error("conv1d '" + n.name + "': input channel axis = " + std::to_string(cin) +
                              " but kernel channel axis = " + std::to_string(wcin));
        if (b.rank() != 1 || b.dim(0) != cout)
            throw shape_error("conv1d '" + n.name + "': bias shape " + b.shape_str() + " does not match " +
                              std::to_string(cout) + " output channels");
        if (t < k)
            throw shape_error("conv1d '" + n.name + "': input length " + std::to_string(t) +
                              " shorter than kernel size " + std::to_string(k));
        const int to = t - k + 1;
        resize_out(n.out, batched ? std::vector<int>{batch, to, cout} : std::vector<int>{to, cout});

        if (n.cache.empty()) n.cache.emplace_back();
        Tensor& col = n.cache[0];
        resize_out(col, {batch * to, k * cin});
        for (int bi = 0; bi < batch; ++bi) {
            const double* xb = x.data.data() + static_cast<std::size_t>(bi) * t * cin;
            for (int ti = 0; ti < to; ++ti) {
                double* row = col.data.data() + (static_cast<std::size_t>(bi) * to + ti) * k * cin;
                std::copy(xb + static_cast<std::size_t>(ti) * cin, xb + static_cast<std::size_t>(ti + k) * cin, row);
            }
        }
        detail::ECMap colm(col.data.data(), batch * to, k * cin);
        detail::ECMap wm(w.data.data(), k * cin, cout);
        detail::EMap ym(n.out.data.data(), batch * to, cout);
        ym.noalias() = colm * wm;
        detail::ECMap bm(b.data.data(), 1, cout);
        ym.rowwise() += bm.row(0);
    }

    void conv_backward(Node& n) {
        const Tensor& x = in_tensor(n);
        Tensor& w = *n.params[0];
        Tensor& b = *n.params[1];
        int batch, t, cin;
        bool batched;
        seq_dims(x, "conv1d", batch, t, cin, batched);
        const int k = w.dim(0), cout = w.dim(2);
        const int to = t - k + 1;
        w.ensure_grad();
        b.ensure_grad();

        const Tensor& col = n.cache[0];
        detail::ECMap colm(col.data.data(), batch * to, k * cin);
        detail::ECMap dym(n.out.grad.data(), batch * to, cout);
        detail::EMap dwm(w.grad.data(), k * cin, cout);
        dwm.noalias() += colm.transpose() * dym;
        detail::EMap dbm(b.grad.data(), 1, cout);
        dbm.row(0) += dym.colwise().sum();

        Tensor& xt = in_tensor(n);
        xt.ensure_grad();
        // dX via col2im of dY * W^T
        detail::EMat dcol(batch * to, k * cin);
        detail::ECMap wm(w.data.data(), k * cin, cout);
        dcol.noalias() = dym * wm.transpose();
        for (int bi = 0; bi < batch; ++bi) {
            double* gxb = xt.grad.data() + static_cast<std::size_t>(bi) * t * cin;
            for (int ti = 0; ti < to; ++ti) {
                const double* row = dcol.data() + (static_cast<std::size_t>(bi) * to + ti) * k * cin;
                double* dst = gxb + static_cast<std::size_t>(ti) * cin;
                for (int j = 0; j < k * cin; ++j) dst[j] += row[j];
            }
        }
        reach_input(n);
    }

    // maxpool1d: non-overlapping windows, trailing remainder discarded.
    // Gradient routes to the first maximal position of each window.
    void pool_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        int batch, t, c;
        bool batched;
        seq_dims(x, "maxpool1d", batch, t, c, batched);
        const int pool = n.pool;
        if (pool > t)
            throw shape_error("maxpool1d: pool size " + std::to_string(pool) + " exceeds input length " +
                              std::to_string(t) + " (empty output)");
        const int to = t / pool;
        resize_out(n.out, batched ? std::vector<int>{batch, to, c} : std::vector<int>{to, c});
        n.icache.assign(static_cast<std::size_t>(batch) * to * c, 0);
        for (int bi = 0; bi < batch; ++bi) {
            const double* xb = x.data.data() + static_cast<std::size_t>(bi) * t * c;
            double* yb = n.out.data.data() + static_cast<std::size_t>(bi) * to * c;
            int* ib = n.icache.data() + static_cast<std::size_t>(bi) * to * c;
            for (int ti = 0; ti < to; ++ti) {
                for (int ci = 0; ci < c; ++ci) {
                    int best = ti * pool;
                    double bv = xb[static_cast<std::size_t>(best) * c + ci];
                    for (int j = 1; j < pool; ++j) {
                        const double v = xb[static_cast<std::size_t>(ti * pool + j) * c + ci];
                        if (v > bv) {
                            bv = v;
                            best = ti * pool + j;
                        }
                    }
                    yb[static_cast<std::size_t>(ti) * c + ci] = bv;
                    ib[static_cast<std::size_t>(ti) * c + ci] = best;
                }
            }
        }
    }

    void pool_backward(Node& n) {
        Tensor& x = in_tensor(n);
        int batch, t, c;
        bool batched;
        seq_dims(x, "maxpool1d", batch, t, c, batched);
        const int to = t / n.pool;
        x.ensure_grad();
        for (int bi = 0; bi < batch; ++bi) {
            double* gxb = x.grad.data() + static_cast<std::size_t>(bi) * t * c;
            const double* gyb = n.out.grad.data() + static_cast<std::size_t>(bi) * to * c;
            const int* ib = n.icache.data() + static_cast<std::size_t>(bi) * to * c;
            for (int i = 0; i < to * c; ++i) {
                const int ci = i % c;
                gxb[static_cast<std::size_t>(ib[i]) * c + ci] += gyb[i];
            }
        }
        reach_input(n);
    }

    void gap_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        int batch, t, c;
        bool batched;
        seq_dims(x, "global_avg_pool", batch, t, c, batched);
        resize_out(n.out, batched ? std::vector<int>{batch, c} : std::vector<int>{c});
        for (int bi = 0; bi < batch; ++bi) {
            const double* xb = x.data.data() + static_cast<std::size_t>(bi) * t * c;
            double* yb = n.out.data.data() + static_cast<std::size_t>(bi) * c;
            for (int ci = 0; ci < c; ++ci) yb[ci] = 0.0;
            for (int ti = 0; ti < t; ++ti)
                for (int ci = 0; ci < c; ++ci) yb[ci] += xb[static_cast<std::size_t>(ti) * c + ci];
            for (int ci = 0; ci < c; ++ci) yb[ci] /= t;
        }
    }

    void gap_backward(Node& n) {
        Tensor& x = in_tensor(n);
        int batch, t, c;
        bool batched;
        seq_dims(x, "global_avg_pool", batch, t, c, batched);
        x.ensure_grad();
        for (int bi = 0; bi < batch; ++bi) {
            double* gxb = x.grad.data() + static_cast<std::size_t>(bi) * t * c;
            const double* gyb = n.out.grad.data() + static_cast<std::size_t>(bi) * c;
            for (int ti = 0; ti < t; ++ti)
                for (int ci = 0; ci < c; ++ci) gxb[static_cast<std::size_t>(ti) * c + ci] += gyb[ci] / t;
        }
        reach_input(n);
    }

    void dense_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        const Tensor& w = *n.params[0];
        const Tensor& b = *n.params[1];
        int batch, nin;
        bool batched;
        vec_dims(x, "dense", batch, nin, batched);
        if (w.rank() != 2 || w.dim(0) != nin)
            throw shape_error("dense '" + n.name + "': weight shape " + w.shape_str() +
                              " does not match input width " + std::to_string(nin));
        const int m = w.dim(1);
        if (b.rank() != 1 || b.dim(0) != m)
            throw shape_error("dense '" + n.name + "': bias shape " + b.shape_str() + " does not match width " +
                              std::to_string(m));
        resize_out(n.out, batched ? std::vector<int>{batch, m} : std::vector<int>{m});
        detail::ECMap xm(x.data.data(), batch, nin);
        detail::ECMap wm(w.data.data(), nin, m);
        detail::EMap ym(n.out.data.data(), batch, m);
        ym.noalias() = xm * wm;
        detail::ECMap bm(b.data.data(), 1, m);
        ym.rowwise() += bm.row(0);
        for (double& v : n.out.data) v = apply_activation(n.act, v);
        for (double v : n.out.data)
            if (!std::isfinite(v))
                throw numeric_error("dense layer '" + n.name + "' produced a non-finite output");
    }

    void dense_backward(Node& n) {
        Tensor& x = in_tensor(n);
        Tensor& w = *n.params[0];
        Tensor& b = *n.params[1];
        int batch, nin;
        bool batched;
        vec_dims(x, "dense", batch, nin, batched);
        const int m = w.dim(1);
        w.ensure_grad();
        b.ensure_grad();
        x.ensure_grad();
        // dz = dy * act'(y), with act' recovered from the output values
        detail::EMat dz(batch, m);
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < m; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * m + j;
                dz(i, j) = n.out.grad[idx] * activation_deriv_from_output(n.act, n.out.data[idx]);
            }
        detail::ECMap xm(x.data.data(), batch, nin);
        detail::EMap dwm(w.grad.data(), nin, m);
        dwm.noalias() += xm.transpose() * dz;
        detail::EMap dbm(b.grad.data(), 1, m);
        dbm.row(0) += dz.colwise().sum();
        detail::ECMap wm(w.data.data(), nin, m);
        detail::EMap dxm(x.grad.data(), batch, nin);
        dxm.noalias() += dz * wm.transpose();
        reach_input(n);
    }

    // lstm: standard cell, zero initial state, returns the final hidden state.
    // Gate packing in Wx [Cin x 4n], Wh [n x 4n], b [4n] is (input, forget,
    // candidate, output). Caches per-step gate activations, cell and hidden
    // states for backpropagation through time.
    void lstm_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        const Tensor& wx = *n.params[0];
        const Tensor& wh = *n.params[1];
        const Tensor& b = *n.params[2];
        int batch, t, cin;
        bool batched;
        seq_dims(x, "lstm", batch, t, cin, batched);
        if (t < 1) throw value_error("lstm '" + n.name + "': empty input sequence");
        if (wx.rank() != 2 || wx.dim(0) != cin || wx.dim(1) % 4 != 0)
            throw shape_error("lstm '" + n.name + "': Wx shape " + wx.shape_str() + " does not match input width " +
                              std::to_string(cin));
        const int units = wx.dim(1) / 4;
        if (wh.rank() != 2 || wh.dim(0) != units || wh.dim(1) != 4 * units)
            throw shape_error("lstm '" + n.name + "': Wh shape " + wh.shape_str() + " does not match " +
                              std::to_string(units) + " units");
        if (b.rank() != 1 || b.dim(0) != 4 * units)
            throw shape_error("lstm '" + n.name + "': bias shape " + b.shape_str() + " does not match " +
                              std::to_string(units) + " units");

        resize_out(n.out, batched ? std::vector<int>{batch, units} : std::vector<int>{units});
        n.cache.resize(3);
        Tensor& gates = n.cache[0];  // [T, B, 4n], post-activation
        Tensor& cells = n.cache[1];  // [T, B, n]
        Tensor& hiddens = n.cache[2];  // [T, B, n]
        resize_out(gates, {t, batch, 4 * units});
        resize_out(cells, {t, batch, units});
        resize_out(hiddens, {t, batch, units});

        detail::ECMap wxm(wx.data.data(), cin, 4 * units);
        detail::ECMap whm(wh.data.data(), units, 4 * units);
        detail::ECMap bm(b.data.data(), 1, 4 * units);

        for (int ti = 0; ti < t; ++ti) {
            detail::EStrideMap xt(x.data.data() + static_cast<std::size_t>(ti) * cin, batch, cin,
                                  Eigen::OuterStride<>(t * cin));
            detail::EMap a(gates.data.data() + static_cast<std::size_t>(ti) * batch * 4 * units, batch, 4 * units);
            a.noalias() = xt * wxm;
            if (ti > 0) {
                detail::ECMap hprev(hiddens.data.data() + static_cast<std::size_t>(ti - 1) * batch * units, batch,
                                    units);
                a.noalias() += hprev * whm;
            }
            a.rowwise() += bm.row(0);
            double* ag = gates.data.data() + static_cast<std::size_t>(ti) * batch * 4 * units;
            const double* cprev =
                ti > 0 ? cells.data.data() + static_cast<std::size_t>(ti - 1) * batch * units : nullptr;
            double* ct = cells.data.data() + static_cast<std::size_t>(ti) * batch * units;
            double* ht = hiddens.data.data() + static_cast<std::size_t>(ti) * batch * units;
            for (int bi = 0; bi < batch; ++bi) {
                double* g = ag + static_cast<std::size_t>(bi) * 4 * units;
                for (int u = 0; u < units; ++u) {
                    const double ig = 1.0 / (1.0 + std::exp(-g[u]));
                    const double fg = 1.0 / (1.0 + std::exp(-g[units + u]));
                    const double cand = std::tanh(g[2 * units + u]);
                    const double og = 1.0 / (1.0 + std::exp(-g[3 * units + u]));
                    g[u] = ig;
                    g[units + u] = fg;
                    g[2 * units + u] = cand;
                    g[3 * units + u] = og;
                    const double cv = fg * (cprev ? cprev[static_cast<std::size_t>(bi) * units + u] : 0.0) + ig * cand;
                    ct[static_cast<std::size_t>(bi) * units + u] = cv;
                    ht[static_cast<std::size_t>(bi) * units + u] = og * std::tanh(cv);
                }
            }
        }
        const double* hlast = hiddens.data.data() + static_cast<std::size_t>(t - 1) * batch * units;
        std::copy(hlast, hlast + static_cast<std::size_t>(batch) * units, n.out.data.begin());
    }

    void lstm_backward(Node& n) {
        Tensor& x = in_tensor(n);
        Tensor& wx = *n.params[0];
        Tensor& wh = *n.params[1];
        Tensor& b = *n.params[2];
        int batch, t, cin;
        bool batched;
        seq_dims(x, "lstm", batch, t, cin, batched);
        const int units = wx.dim(1) / 4;
        wx.ensure_grad();
        wh.ensure_grad();
        b.ensure_grad();
        x.ensure_grad();

        const Tensor& gates = n.cache[0];
        const Tensor& cells = n.cache[1];
        const Tensor& hiddens = n.cache[2];

        detail::EMat dh(batch, units);
        detail::EMat dc = detail::EMat::Zero(batch, units);
        for (int bi = 0; bi < batch; ++bi)
            for (int u = 0; u < units; ++u) dh(bi, u) = n.out.grad[static_cast<std::size_t>(bi) * units + u];

        detail::EMat da(batch, 4 * units);
        detail::ECMap wxm(wx.data.data(), cin, 4 * units);
        detail::ECMap whm(wh.data.data(), units, 4 * units);
        detail::EMap dwxm(wx.grad.data(), cin, 4 * units);
        detail::EMap dwhm(wh.grad.data(), units, 4 * units);
        detail::EMap dbm(b.grad.data(), 1, 4 * units);

        for (int ti = t - 1; ti >= 0; --ti) {
            const double* g = gates.data.data() + static_cast<std::size_t>(ti) * batch * 4 * units;
            const double* ct = cells.data.data() + static_cast<std::size_t>(ti) * batch * units;
            const double* cprev =
                ti > 0 ? cells.data.data() + static_cast<std::size_t>(ti - 1) * batch * units : nullptr;
            for (int bi = 0; bi < batch; ++bi) {
                const double* gb = g + static_cast<std::size_t>(bi) * 4 * units;
                for (int u = 0; u < units; ++u) {
                    const double ig = gb[u], fg = gb[units + u], cand = gb[2 * units + u], og = gb[3 * units + u];
                    const double cv = ct[static_cast<std::size_t>(bi) * units + u];
                    const double tc = std::tanh(cv);
                    const double dhv = dh(bi, u);
                    const double dov = dhv * tc;
                    double dcv = dc(bi, u) + dhv * og * (1.0 - tc * tc);
                    const double div = dcv * cand;
                    const double dfv = dcv * (cprev ? cprev[static_cast<std::size_t>(bi) * units + u] : 0.0);
                    const double dgv = dcv * ig;
                    da(bi, u) = div * ig * (1.0 - ig);
                    da(bi, units + u) = dfv * fg * (1.0 - fg);
                    da(bi, 2 * units + u) = dgv * (1.0 - cand * cand);
                    da(bi, 3 * units + u) = dov * og * (1.0 - og);
                    dc(bi, u) = dcv * fg;  // carried to step ti-1
                }
            }
            detail::EStrideMap xt(x.data.data() + static_cast<std::size_t>(ti) * cin, batch, cin,
                                  Eigen::OuterStride<>(t * cin));
            dwxm.noalias() += xt.transpose() * da;
            if (ti > 0) {
                detail::ECMap hprev(hiddens.data.data() + static_cast<std::size_t>(ti - 1) * batch * units, batch,
                                    units);
                dwhm.noalias() += hprev.transpose() * da;
                dh.noalias() = da * whm.transpose();
            }
            dbm.row(0) += da.colwise().sum();
            detail::EStrideMapMut dxt(x.grad.data() + static_cast<std::size_t>(ti) * cin, batch, cin,
                                      Eigen::OuterStride<>(t * cin));
            dxt.noalias() += da * wxm.transpose();
        }
        reach_input(n);
    }

    // Inverted dropout: kept entries scaled by 1/(1-p) so eval mode is the
    // exact identity.
    void dropout_forward(Node& n, Mode mode, RngStream* rng) {
        const Tensor& x = in_tensor(n);
        resize_out(n.out, x.shape);
        if (mode == Mode::eval || n.drop_p == 0.0) {
            n.out.data = x.data;
            if (n.cache.empty()) n.cache.emplace_back();
            resize_out(n.cache[0], x.shape);
            n.cache[0].fill(1.0);
            return;
        }
        if (rng == nullptr) throw state_error("dropout: train-mode forward requires an rng stream");
        if (n.cache.empty()) n.cache.emplace_back();
        Tensor& mask = n.cache[0];
        resize_out(mask, x.shape);
        const double keep_scale = 1.0 / (1.0 - n.drop_p);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            mask.data[i] = rng->uniform() < n.drop_p ? 0.0 : keep_scale;
            n.out.data[i] = x.data[i] * mask.data[i];
        }
    }

    void dropout_backward(Node& n) {
        Tensor& x = in_tensor(n);
        x.ensure_grad();
        const Tensor& mask = n.cache[0];
        for (std::size_t i = 0; i < x.data.size(); ++i) x.grad[i] += n.out.grad[i] * mask.data[i];
        reach_input(n);
    }

    // concat along the last axis; all leading axes must agree.
    void concat_forward(Node& n) {
        std::vector<const Tensor*> ins;
        ins.reserve(n.inputs.size());
        for (int i : n.inputs) ins.push_back(&nodes_[static_cast<std::size_t>(i)].out);
        const int r = ins[0]->rank();
        std::int64_t lead = 1;
        for (int d = 0; d + 1 < r; ++d) lead *= ins[0]->dim(d);
        int total_last = 0;
        for (const Tensor* t : ins) {
            if (t->rank() != r)
                throw shape_error("concat: mixed input ranks " + ins[0]->shape_str() + " vs " + t->shape_str());
            for (int d = 0; d + 1 < r; ++d)
                if (t->dim(d) != ins[0]->dim(d))
                    throw shape_error("concat: inputs disagree on axis " + std::to_string(d) + ": " +
                                      ins[0]->shape_str() + " vs " + t->shape_str());
            total_last += t->dim(r - 1);
        }
        std::vector<int> oshape(ins[0]->shape);
        oshape[static_cast<std::size_t>(r - 1)] = total_last;
        resize_out(n.out, oshape);
        for (std::int64_t row = 0; row < lead; ++row) {
            double* dst = n.out.data.data() + row * total_last;
            for (const Tensor* t : ins) {
                const int w = t->dim(r - 1);
                const double* src = t->data.data() + row * w;
                std::copy(src, src + w, dst);
                dst += w;
            }
        }
    }

    void concat_backward(Node& n) {
        const int r = n.out.rank();
        std::int64_t lead = 1;
        for (int d = 0; d + 1 < r; ++d) lead *= n.out.dim(d);
        const int total_last = n.out.dim(r - 1);
        for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) in_tensor(n, static_cast<int>(slot)).ensure_grad();
        for (std::int64_t row = 0; row < lead; ++row) {
            const double* src = n.out.grad.data() + row * total_last;
            for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
                Tensor& t = in_tensor(n, static_cast<int>(slot));
                const int w = t.dim(r - 1);
                double* dst = t.grad.data() + row * w;
                for (int j = 0; j < w; ++j) dst[j] += src[j];
                src += w;
            }
        }
        for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) reach_input(n, static_cast<int>(slot));
    }

    void elementwise_forward(Node& n) {
        const Tensor& x = in_tensor(n);
        resize_out(n.out, x.shape);
        const Activation a = n.kind == OpKind::relu ? Activation::relu
                           : n.kind == OpKind::tanh ? Activation::tanh
                                                    : Activation::sigmoid;
        for (std::size_t i = 0; i < x.data.size(); ++i) n.out.data[i] = apply_activation(a, x.data[i]);
    }

    void elementwise_backward(Node& n) {
        Tensor& x = in_tensor(n);
        x.ensure_grad();
        const Activation a = n.kind == OpKind::relu ? Activation::relu
                           : n.kind == OpKind::tanh ? Activation::tanh
                                                    : Activation::sigmoid;
        for (std::size_t i = 0; i < x.data.size(); ++i)
            x.grad[i] += n.out.grad[i] * activation_deriv_from_output(a, n.out.data[i]);
        reach_input(n);
    }

    // bce: mean over the batch of -[t ln p + (1-t) ln(1-p)] with p clamped
    // into [eps, 1-eps]. Gradient is zero where the clamp is active.
    void bce_forward(Node& n) {
        const Tensor& p = in_tensor(n);
        const std::int64_t batch = p.size();
        if (static_cast<std::int64_t>(n.target.size()) != batch)
            throw shape_error("bce: " + std::to_string(n.target.size()) + " targets for " + std::to_string(batch) +
                              " predictions");
        for (double t : n.target) {
            if (n.soft_target) {
                if (t < 0.0 || t > 1.0)
                    throw value_error("bce: soft target " + std::to_string(t) + " outside [0, 1]");
            } else if (t != 0.0 && t != 1.0) {
                throw value_error("bce: label " + std::to_string(t) + " is not in {0, 1}");
            }
        }
        resize_out(n.out, {1});
        double acc = 0.0;
        for (std::int64_t i = 0; i < batch; ++i) acc += bce_term(p.data[static_cast<std::size_t>(i)], n.target[static_cast<std::size_t>(i)]);
        n.out.data[0] = acc / static_cast<double>(batch);
    }

    void bce_backward(Node& n) {
        Tensor& p = in_tensor(n);
        p.ensure_grad();
        const std::int64_t batch = p.size();
        const double seed = n.out.grad[0];
        for (std::int64_t i = 0; i < batch; ++i) {
            const double pv = p.data[static_cast<std::size_t>(i)];
            const double pc = std::min(std::max(pv, kBceEps), 1.0 - kBceEps);
            if (pc != pv) continue;  // clamped: no gradient through the clamp
            const double t = n.target[static_cast<std::size_t>(i)];
            p.grad[static_cast<std::size_t>(i)] += seed * (pc - t) / (pc * (1.0 - pc) * static_cast<double>(batch));
        }
        reach_input(n);
    }
};

// ---- free-function op surface ----------------------------------------
// One-shot forward evaluation of the individual layer operations. These wrap
// a throwaway graph so they share the exact kernels the training path uses.

inline Tensor conv1d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    Tensor w = kernels, b = bias;
    Graph g;
    int in = g.add_input();
    int out = g.add_conv1d(in, &w, &b);
    g.set_input(in, input);
    g.forward(Mode::eval);
    return g.value(out);
}

inline Tensor maxpool1d(const Tensor& input, int pool) {
    Graph g;
    int in = g.add_input();
    int out = g.add_maxpool1d(in, pool);
    g.set_input(in, input);
    g.forward(Mode::eval);
    return g.value(out);
}

inline Tensor global_avg_pool(const Tensor& input) {
    Graph g;
    int in = g.add_input();
    int out = g.add_gap(in);
    g.set_input(in, input);
    g.forward(Mode::eval);
    return g.value(out);
}

inline Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation act) {
    Tensor w = weights, b = bias;
    Graph g;
    int in = g.add_input();
    int out = g.add_dense(in, &w, &b, act);
    g.set_input(in, input);
    g.forward(Mode::eval);
    return g.value(out);
}

inline Tensor lstm_sequence(const Tensor& input, const Tensor& wx, const Tensor& wh, const Tensor& bias) {
    Tensor a = wx, h = wh, b = bias;
    Graph g;
    int in = g.add_input();
    int out = g.add_lstm(in, &a, &h, &b);
    g.set_input(in, input);
    g.forward(Mode::eval);
    return g.value(out);
}

inline Tensor dropout_apply(const Tensor& input, double p, Mode mode, RngStream& rng) {
    Graph g;
    int in = g.add_input();
    int out = g.add_dropout(in, p);
    g.set_input(in, input);
    g.forward(mode, &rng);
    return g.value(out);
}

inline Tensor concat(const std::vector<Tensor>& inputs) {
    Graph g;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        int in = g.add_input();
        g.set_input(in, t);
        ids.push_back(in);
    }
    int out = g.add_concat(ids);
    g.forward(Mode::eval);
    return g.value(out);
}

inline double bce_loss(double prediction, double target) {
    if (target != 0.0 && target != 1.0)
        throw value_error("bce_loss: label " + std::to_string(target) + " is not in {0, 1}");
    return bce_term(prediction, target);
}

inline double bce_loss(const std::vector<double>& predictions, const std::vector<double>& targets) {
    if (predictions.size() != targets.size() || predictions.empty())
        throw shape_error("bce_loss: prediction/target length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) acc += bce_loss(predictions[i], targets[i]);
    return acc / static_cast<double>(predictions.size());
}

}  // namespace fusenet
