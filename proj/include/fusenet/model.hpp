#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/autodiff.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

enum class BaseKind { CNN, LSTM };
enum class TopologyKind { SIM, MIM, BFM, BFM_SC };

inline std::string to_string(BaseKind k) { return k == BaseKind::CNN ? "CNN" : "LSTM"; }
inline std::string to_string(TopologyKind t) {
    switch (t) {
        case TopologyKind::SIM: return "SIM";
        case TopologyKind::MIM: return "MIM";
        case TopologyKind::BFM: return "BFM";
        case TopologyKind::BFM_SC: return "BFM_SC";
    }
    return "?";
}
inline BaseKind base_kind_from_string(const std::string& s) {
    if (s == "CNN") return BaseKind::CNN;
    if (s == "LSTM") return BaseKind::LSTM;
    throw parse_error("unknown base kind '" + s + "' (expected CNN or LSTM)");
}
inline TopologyKind topology_from_string(const std::string& s) {
    if (s == "SIM") return TopologyKind::SIM;
    if (s == "MIM") return TopologyKind::MIM;
    if (s == "BFM") return TopologyKind::BFM;
    if (s == "BFM_SC") return TopologyKind::BFM_SC;
    throw parse_error("unknown topology '" + s + "' (expected SIM, MIM, BFM or BFM_SC)");
}

/// The fixed sensor-channel order used throughout.
inline const std::vector<std::string>& default_channels() {
    static const std::vector<std::string> c = {"abdores", "thorres", "hr", "sao2"};
    return c;
}

/// Fusion topology plus the ordered channels it consumes.
struct Topology {
    TopologyKind kind = TopologyKind::SIM;
    std::vector<std::string> channels;

    Topology() = default;
    Topology(TopologyKind k, std::vector<std::string> ch) : kind(k), channels(std::move(ch)) { validate(); }

    void validate() const {
        if (channels.empty()) throw value_error("topology: channel list is empty");
        if (kind == TopologyKind::SIM && channels.size() != 1)
            throw value_error("topology: SIM takes exactly 1 channel, got " + std::to_string(channels.size()));
        if (kind != TopologyKind::SIM && channels.size() < 2)
            throw value_error("topology: " + to_string(kind) + " needs at least 2 channels, got " +
                              std::to_string(channels.size()));
    }

    int channel_count() const { return static_cast<int>(channels.size()); }
};

/// Hyperparameters of the two base architectures. Defaults are the reference
/// configuration; `tiny` and `desk` shrink capacity (never the window or the
/// layer structure) for gradient checks and quick sweeps.
struct ArchParams {
    int nf1 = 100, nf2 = 100;      // filters, conv 1-2
    int nf3 = 160, nf4 = 160;      // filters, conv 3-4
    int nk1 = 10, nk2 = 10, nk3 = 10, nk4 = 10;  // kernel sizes
    int np1 = 3;                   // pool size
    double cnn_dropout = 0.5;
    int cnn_hidden = 32;           // width of the CNN head's hidden dense layer
    int lstm_units = 50;
    int lstm_dense1 = 25, lstm_dense2 = 25;
    double lstm_dropout1 = 0.2, lstm_dropout2 = 0.2, lstm_dropout3 = 0.2;
    int window = 150;              // 30 s at 5 Hz

    static ArchParams reference() { return ArchParams{}; }

    /// Minimal widths for finite-difference sweeps over every parameter.
    static ArchParams tiny() {
        ArchParams a;
        a.nf1 = a.nf2 = 3;
        a.nf3 = a.nf4 = 4;
        a.cnn_hidden = 5;
        a.lstm_units = 4;
        a.lstm_dense1 = a.lstm_dense2 = 4;
        return a;
    }

    /// Reduced capacity for multi-run sweeps on a single core.
    static ArchParams desk() {
        ArchParams a;
        a.nf1 = a.nf2 = 12;
        a.nf3 = a.nf4 = 16;
        a.cnn_hidden = 12;
        a.lstm_units = 16;
        a.lstm_dense1 = a.lstm_dense2 = 8;
        return a;
    }

    void validate() const {
        for (int v : {nf1, nf2, nf3, nf4, nk1, nk2, nk3, nk4, np1, cnn_hidden, lstm_units, lstm_dense1,
                      lstm_dense2, window})
            if (v <= 0) throw value_error("arch: all sizes must be positive");
        for (double p : {cnn_dropout, lstm_dropout1, lstm_dropout2, lstm_dropout3})
            if (p < 0.0 || p >= 1.0) throw value_error("arch: dropout probabilities must lie in [0, 1)");
    }

    /// Feature width emitted by part A.
    int part_a_width(BaseKind kind) const { return kind == BaseKind::CNN ? nf4 : lstm_units; }
};

namespace detail {

/// Uniform fan-based initialization bound: ±sqrt(6 / (fan_in + fan_out)).
inline double glorot_bound(int fan_in, int fan_out) {
    return std::sqrt(6.0 / (fan_in + fan_out));
}

inline void fill_uniform(Tensor& t, RngStream& rng, double bound) {
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

}  // namespace detail

/// One assembled model: the autodiff graph plus the parameter store its nodes
/// point into. Movable but not copyable (graph nodes hold pointers into
/// `params`; std::map guarantees node stability across moves).
struct ModelGraph {
    BaseKind base = BaseKind::CNN;
    Topology topology;
    ArchParams arch;
    std::uint64_t seed = 0;
    ParamStore params;
    Graph graph;

    std::vector<int> branch_inputs;   // input node per branch (SIM/MIM: one entry)
    std::vector<int> branch_outputs;  // part-A output node per branch
    int fusion_output = -1;           // sigmoid probability node
    int fusion_loss = -1;             // bce node on the fusion head
    std::vector<int> shortcut_outputs;  // BFM_SC only
    std::vector<int> shortcut_losses;   // BFM_SC only

    ModelGraph() = default;
    ModelGraph(const ModelGraph&) = delete;
    ModelGraph& operator=(const ModelGraph&) = delete;
    ModelGraph(ModelGraph&&) = default;
    ModelGraph& operator=(ModelGraph&&) = default;

    int head_count() const { return 1 + static_cast<int>(shortcut_outputs.size()); }

    /// Bind one window [T x C] or a batch [B x T x C]; branched topologies
    /// receive per-channel slices. Loss targets are reset to zeros of the
    /// batch size — call set_targets afterwards for a meaningful loss.
    void set_batch(const Tensor& windows) {
        int b, t, c;
        bool batched = windows.rank() == 3;
        if (windows.rank() == 2) {
            b = 1;
            t = windows.dim(0);
            c = windows.dim(1);
        } else if (batched) {
            b = windows.dim(0);
            t = windows.dim(1);
            c = windows.dim(2);
        } else {
            throw shape_error("set_batch: expected [T x C] or [B x T x C], got " + windows.shape_str());
        }
        if (t != arch.window)
            throw shape_error("set_batch: window length " + std::to_string(t) + " does not match configured " +
                              std::to_string(arch.window));
        if (c != topology.channel_count())
            throw shape_error("set_batch: got " + std::to_string(c) + " channels, model expects " +
                              std::to_string(topology.channel_count()));

        if (branch_inputs.size() == 1) {
            graph.set_input(branch_inputs[0], windows);
        } else {
            for (int ch = 0; ch < c; ++ch) {
                Tensor slice(batched ? std::vector<int>{b, t, 1} : std::vector<int>{t, 1});
                for (int bi = 0; bi < b; ++bi)
                    for (int ti = 0; ti < t; ++ti)
                        slice.data[static_cast<std::size_t>(bi) * t + ti] =
                            windows.data[(static_cast<std::size_t>(bi) * t + ti) * c + ch];
                graph.set_input(branch_inputs[static_cast<std::size_t>(ch)], std::move(slice));
            }
        }
        set_targets(std::vector<double>(static_cast<std::size_t>(b), 0.0));
    }

    /// Same target vector for every head (fusion and shortcuts).
    void set_targets(std::vector<double> targets) {
        for (int id : shortcut_losses) graph.set_target(id, targets);
        if (fusion_loss >= 0) graph.set_target(fusion_loss, std::move(targets));
    }

    void forward(Mode mode, RngStream* rng = nullptr) { graph.forward(mode, rng); }

    std::vector<double> fusion_probs() const {
        const dvec& d = graph.value(fusion_output).data;
        return {d.begin(), d.end()};
    }
    std::vector<double> shortcut_probs(int branch) const {
        const dvec& d = graph.value(shortcut_outputs[static_cast<std::size_t>(branch)]).data;
        return {d.begin(), d.end()};
    }
    double fusion_loss_value() const { return graph.value(fusion_loss).data[0]; }
    double shortcut_loss_value(int branch) const {
        return graph.value(shortcut_losses[static_cast<std::size_t>(branch)]).data[0];
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }
};

namespace detail {

/// Appends one parameterized layer stack to a model under construction.
struct Builder {
    ModelGraph& m;

    Tensor& add_param(const std::string& name, std::vector<int> shape) {
        auto [it, fresh] = m.params.emplace(name, Tensor(std::move(shape)));
        if (!fresh) throw state_error("assemble: duplicate parameter name '" + name + "'");
        return it->second;
    }

    RngStream init_stream(const std::string& layer_name) const {
        return RngStream(derive_seed(m.seed, "init/" + layer_name));
    }

    int conv_relu(int in, const std::string& name, int k, int cin, int cout) {
        Tensor& kernels = add_param(name + "/kernels", {k, cin, cout});
        Tensor& bias = add_param(name + "/bias", {cout});
        RngStream rng = init_stream(name);
        fill_uniform(kernels, rng, glorot_bound(k * cin, k * cout));
        bias.fill(0.0);
        int id = m.graph.add_conv1d(in, &kernels, &bias, name);
        return m.graph.add_relu(id);
    }

    int dense(int in, const std::string& name, int nin, int nout, Activation act) {
        Tensor& w = add_param(name + "/weights", {nin, nout});
        Tensor& b = add_param(name + "/bias", {nout});
        RngStream rng = init_stream(name);
        fill_uniform(w, rng, glorot_bound(nin, nout));
        b.fill(0.0);
        return m.graph.add_dense(in, &w, &b, act, name);
    }

    int lstm(int in, const std::string& name, int cin, int units) {
        Tensor& wx = add_param(name + "/wx", {cin, 4 * units});
        Tensor& wh = add_param(name + "/wh", {units, 4 * units});
        Tensor& b = add_param(name + "/bias", {4 * units});
        RngStream rng = init_stream(name);
        fill_uniform(wx, rng, glorot_bound(cin, units));
        fill_uniform(wh, rng, glorot_bound(units, units));
        b.fill(0.0);
        for (int u = units; u < 2 * units; ++u) b.data[static_cast<std::size_t>(u)] = 1.0;  // forget gate
        return m.graph.add_lstm(in, &wx, &wh, &b, name);
    }

    /// Part A: feature extractor ending in a fixed-width vector.
    int part_a(BaseKind kind, int in, const std::string& prefix, int in_channels, const ArchParams& a) {
        if (kind == BaseKind::CNN) {
            int x = conv_relu(in, prefix + "/conv1", a.nk1, in_channels, a.nf1);
            x = conv_relu(x, prefix + "/conv2", a.nk2, a.nf1, a.nf2);
            x = m.graph.add_maxpool1d(x, a.np1);
            x = conv_relu(x, prefix + "/conv3", a.nk3, a.nf2, a.nf3);
            x = conv_relu(x, prefix + "/conv4", a.nk4, a.nf3, a.nf4);
            return m.graph.add_gap(x);
        }
        return lstm(in, prefix + "/lstm", in_channels, a.lstm_units);
    }

    /// Part B: decision head ending in one sigmoid probability.
    int part_b(BaseKind kind, int in, const std::string& prefix, int in_width, const ArchParams& a) {
        if (kind == BaseKind::CNN) {
            int x = m.graph.add_dropout(in, a.cnn_dropout);
            x = dense(x, prefix + "/dense1", in_width, a.cnn_hidden, Activation::relu);
            return dense(x, prefix + "/dense2", a.cnn_hidden, 1, Activation::sigmoid);
        }
        int x = m.graph.add_dropout(in, a.lstm_dropout1);
        x = dense(x, prefix + "/dense1", in_width, a.lstm_dense1, Activation::relu);
        x = m.graph.add_dropout(x, a.lstm_dropout2);
        x = dense(x, prefix + "/dense2", a.lstm_dense1, a.lstm_dense2, Activation::relu);
        x = m.graph.add_dropout(x, a.lstm_dropout3);
        return dense(x, prefix + "/dense3", a.lstm_dense2, 1, Activation::sigmoid);
    }
};

}  // namespace detail

/// Build a complete model for the given fusion topology. Identical seeds give
/// BFM and BFM_SC identical branch and fusion parameters (shortcut heads draw
/// from their own named streams).
inline ModelGraph assemble(const Topology& topology, BaseKind kind, const ArchParams& arch, std::uint64_t seed) {
    topology.validate();
    arch.validate();
    ModelGraph m;
    m.base = kind;
    m.topology = topology;
    m.arch = arch;
    m.seed = seed;
    detail::Builder b{m};

    const int c = topology.channel_count();
    const int width = arch.part_a_width(kind);

    if (topology.kind == TopologyKind::SIM || topology.kind == TopologyKind::MIM) {
        int in = m.graph.add_input();
        m.branch_inputs.push_back(in);
        int feat = b.part_a(kind, in, "branch0", c, arch);
        m.branch_outputs.push_back(feat);
        m.fusion_output = b.part_b(kind, feat, "fusion", width, arch);
    } else {
        std::vector<int> feats;
        for (int ch = 0; ch < c; ++ch) {
            int in = m.graph.add_input();
            m.branch_inputs.push_back(in);
            int feat = b.part_a(kind, in, "branch" + std::to_string(ch), 1, arch);
            m.branch_outputs.push_back(feat);
            feats.push_back(feat);
        }
        int fused = m.graph.add_concat(feats);
        m.fusion_output = b.part_b(kind, fused, "fusion", c * width, arch);
        if (topology.kind == TopologyKind::BFM_SC) {
            for (int ch = 0; ch < c; ++ch) {
                int head = b.part_b(kind, feats[static_cast<std::size_t>(ch)],
                                    "shortcut" + std::to_string(ch), width, arch);
                m.shortcut_outputs.push_back(head);
            }
        }
    }

    m.fusion_loss = m.graph.add_bce(m.fusion_output, /*allow_soft_targets=*/true);
    for (int head : m.shortcut_outputs) m.shortcut_losses.push_back(m.graph.add_bce(head, true));
    return m;
}

/// Deployment form of a trained BFM_SC: a plain BFM sharing the trained
/// branch and fusion parameter values; shortcut heads are dropped.
inline ModelGraph strip_shortcuts(const ModelGraph& model) {
    if (model.topology.kind != TopologyKind::BFM_SC)
        throw value_error("strip_shortcuts: model topology is " + to_string(model.topology.kind) +
                          ", expected BFM_SC");
    ModelGraph out = assemble(Topology(TopologyKind::BFM, model.topology.channels), model.base, model.arch,
                              model.seed);
    for (auto& [name, t] : out.params) t.data = model.params.at(name).data;
    return out;
}

/// Single-pass per-sensor and fusion probabilities of a BFM_SC model.
/// Order: shortcut head per channel (channel order), then the fusion head.
inline std::vector<double> branch_predictions(ModelGraph& model, const Tensor& window) {
    if (model.topology.kind != TopologyKind::BFM_SC)
        throw value_error("branch_predictions: model topology is " + to_string(model.topology.kind) +
                          ", expected BFM_SC");
    if (window.rank() == 3 && window.dim(0) != 1)
        throw shape_error("branch_predictions: expects a single window, got batch of " +
                          std::to_string(window.dim(0)));
    model.set_batch(window);
    model.forward(Mode::eval);
    std::vector<double> out;
    for (std::size_t i = 0; i < model.shortcut_outputs.size(); ++i)
        out.push_back(model.graph.value(model.shortcut_outputs[i]).data[0]);
    out.push_back(model.graph.value(model.fusion_output).data[0]);
    return out;
}

}  // namespace fusenet
