#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fusenet/autodiff.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/metrics.hpp"
#include "fusenet/model.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/sigproc.hpp"

namespace fusenet {

struct TrainConfig {
    double learning_rate = 0.001;
    int max_epochs = 25;
    double grad_clip = 0.5;
    bool clip_by_norm = false;  // default: element-wise value clipping
    int batch_size = 64;
    int patience = 5;
    double lambda_fusion = 0.5;
    double lambda_shortcut = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) throw value_error("TrainConfig: learning rate must be positive");
        if (max_epochs < 1) throw value_error("TrainConfig: max epochs must be at least 1");
        if (grad_clip <= 0.0) throw value_error("TrainConfig: gradient clip must be positive");
        if (batch_size < 1) throw value_error("TrainConfig: batch size must be at least 1");
        if (patience < 1) throw value_error("TrainConfig: patience must be at least 1");
        if (lambda_fusion < 0.0 || lambda_shortcut < 0.0)
            throw value_error("TrainConfig: loss weights must be non-negative");
    }
};

// ------------------------------------------------------------------- adam

struct AdamState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    std::map<std::string, Tensor> m;  // first moments, shaped like the params
    std::map<std::string, Tensor> v;  // second moments
    std::int64_t step = 0;

    static AdamState for_params(const ParamStore& params) {
        AdamState s;
        for (const auto& [name, t] : params) {
            Tensor zm(t.shape), zv(t.shape);
            zm.fill(0.0);
            zv.fill(0.0);
            s.m.emplace(name, std::move(zm));
            s.v.emplace(name, std::move(zv));
        }
        return s;
    }
};

/// Element-wise clamp to [-c, c] by default; with `by_norm`, rescales the
/// whole gradient so its global L2 norm does not exceed c. Non-finite
/// entries pass through so the optimizer step can name the offender.
inline void clip_gradients(ParamStore& params, double c, bool by_norm = false) {
    if (c <= 0.0) throw value_error("clip_gradients: clip threshold must be positive");
    if (by_norm) {
        double sq = 0.0;
        for (auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (double g : t.grad) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > c && std::isfinite(norm)) {
            const double scale = c / norm;
            for (auto& [name, t] : params) {
                if (!t.has_grad()) continue;
                for (double& g : t.grad) g *= scale;
            }
        }
        return;
    }
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double& g : t.grad) {
            if (g > c) g = c;
            else if (g < -c) g = -c;  // NaN fails both tests and survives
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on the params.
inline void adam_step(ParamStore& params, AdamState& state, double lr) {
    if (lr <= 0.0) throw value_error("adam_step: learning rate must be positive");
    ++state.step;
    const double bc1 = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.step));
    for (auto& [name, t] : params) {
        auto mi = state.m.find(name);
        auto vi = state.v.find(name);
        if (mi == state.m.end() || vi == state.v.end())
            throw state_error("adam_step: no moment buffers for parameter '" + name + "'");
        Tensor& m = mi->second;
        Tensor& v = vi->second;
        if (!m.same_shape(t) || !v.same_shape(t))
            throw shape_error("adam_step: moment buffers for '" + name + "' do not match the parameter");
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double g = t.has_grad() ? t.grad[i] : 0.0;
            if (!std::isfinite(g))
                throw numeric_error("adam_step: non-finite gradient in parameter '" + name + "'");
            m.data[i] = AdamState::kBeta1 * m.data[i] + (1.0 - AdamState::kBeta1) * g;
            v.data[i] = AdamState::kBeta2 * v.data[i] + (1.0 - AdamState::kBeta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            t.data[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEps);
        }
    }
}

// ---------------------------------------------------------------- sampler

/// One training epoch's index sequence: the full minority class plus an
/// equal-count uniform subsample of the majority class, shuffled. Drawing
/// again from the same stream yields a fresh subsample.
inline std::vector<std::size_t> balanced_sample(const EpochSet& set, RngStream& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < set.size(); ++i)
        (set.items[i].label == 1 ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty())
        throw value_error("balanced_sample: need both classes, got " + std::to_string(pos.size()) +
                          " positive / " + std::to_string(neg.size()) + " negative windows");
    std::vector<std::size_t>& minority = pos.size() <= neg.size() ? pos : neg;
    std::vector<std::size_t>& majority = pos.size() <= neg.size() ? neg : pos;
    rng.shuffle(majority);
    std::vector<std::size_t> out = minority;
    out.insert(out.end(), majority.begin(), majority.begin() + static_cast<std::ptrdiff_t>(minority.size()));
    rng.shuffle(out);
    return out;
}

// ------------------------------------------------------------------- loss

/// Multi-head objective: lambda_f * BCE(fusion) + lambda_s * sum BCE(shortcut_i).
inline double bfm_sc_loss(double fusion_pred, const std::vector<double>& shortcut_preds, double target,
                          double lambda_fusion = 0.5, double lambda_shortcut = 0.5) {
    if (shortcut_preds.empty()) throw value_error("bfm_sc_loss: at least one shortcut prediction required");
    double loss = lambda_fusion * bce_loss(fusion_pred, target);
    for (double p : shortcut_preds) loss += lambda_shortcut * bce_loss(p, target);
    return loss;
}

/// Scalar objective of the bound batch: plain fusion BCE for single-head
/// models, the weighted multi-head sum otherwise.
inline double objective_value(const ModelGraph& m, const TrainConfig& cfg) {
    if (m.shortcut_losses.empty()) return m.fusion_loss_value();
    double loss = cfg.lambda_fusion * m.fusion_loss_value();
    for (std::size_t i = 0; i < m.shortcut_losses.size(); ++i)
        loss += cfg.lambda_shortcut * m.shortcut_loss_value(static_cast<int>(i));
    return loss;
}

/// Backward pass matching objective_value's weighting.
inline void objective_backward(ModelGraph& m, const TrainConfig& cfg) {
    if (m.shortcut_losses.empty()) {
        m.graph.backward(m.fusion_loss);
        return;
    }
    std::vector<std::pair<int, double>> seeds{{m.fusion_loss, cfg.lambda_fusion}};
    for (int id : m.shortcut_losses) seeds.emplace_back(id, cfg.lambda_shortcut);
    m.graph.backward_multi(seeds);
}

// ----------------------------------------------------------- train record

/// Stop when the monitored value fails to improve for `patience` epochs.
struct EarlyStopper {
    int patience = 5;
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;  // 1-based
    int bad_epochs = 0;

    /// Feed one epoch's validation loss; returns true when training should stop.
    bool update(double val_loss, int epoch) {
        if (val_loss < best) {
            best = val_loss;
            best_epoch = epoch;
            bad_epochs = 0;
            return false;
        }
        return ++bad_epochs >= patience;
    }
};

struct RunRecord {
    std::vector<double> train_losses;
    std::vector<double> val_losses;
    std::vector<double> val_auprs;
    int best_epoch = 0;  // 1-based; 0 means no epoch completed
    int epochs_run = 0;
    bool stopped_early = false;
    bool diverged = false;
    double best_val_loss = std::numeric_limits<double>::infinity();
    double best_val_aupr = 0.0;
    std::uint64_t seed = 0;
    TrainConfig config;
    ParamStore best_params;  // weights restored into the model

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["train_losses"] = train_losses;
        j["val_losses"] = val_losses;
        j["val_auprs"] = val_auprs;
        j["best_epoch"] = best_epoch;
        j["epochs_run"] = epochs_run;
        j["stopped_early"] = stopped_early;
        j["diverged"] = diverged;
        j["best_val_loss"] = best_val_loss;
        j["best_val_aupr"] = best_val_aupr;
        j["seed"] = seed;
        j["config"] = {{"learning_rate", config.learning_rate}, {"max_epochs", config.max_epochs},
                       {"grad_clip", config.grad_clip},         {"clip_by_norm", config.clip_by_norm},
                       {"batch_size", config.batch_size},       {"patience", config.patience},
                       {"lambda_fusion", config.lambda_fusion}, {"lambda_shortcut", config.lambda_shortcut},
                       {"seed", config.seed}};
        return j;
    }
};

inline void save_run_record(const RunRecord& rec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << rec.to_json().dump(2) << "\n";
    if (!out) throw io_error("write failed for '" + path + "'");
}

namespace detail {

/// Copy parameter values (not gradients) without touching the map nodes the
/// graph points into.
inline void restore_values(ParamStore& dst, const ParamStore& src) {
    for (auto& [name, t] : dst) {
        auto it = src.find(name);
        if (it == src.end()) throw state_error("restore_values: missing parameter '" + name + "'");
        if (!it->second.same_shape(t))
            throw shape_error("restore_values: shape mismatch for parameter '" + name + "'");
        t.data = it->second.data;
    }
}

/// Full-set fusion-head loss and fusion AUPR in eval mode, unshuffled.
/// Monitoring the fusion loss (not the composite training objective) keeps
/// model selection aligned with what is deployed; with shortcut heads the
/// composite is dominated by branch-head noise and picks worse fusion
/// weights.
inline std::pair<double, double> validation_pass(ModelGraph& model, const EpochSet& val,
                                                 const TrainConfig& cfg) {
    std::vector<std::size_t> idx(val.size());
    std::iota(idx.begin(), idx.end(), 0);
    double loss_sum = 0.0;
    std::vector<double> scores;
    scores.reserve(val.size());
    for (std::size_t lo = 0; lo < idx.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t hi = std::min(idx.size(), lo + static_cast<std::size_t>(cfg.batch_size));
        const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                             idx.begin() + static_cast<std::ptrdiff_t>(hi));
        model.set_batch(val.gather_batch(chunk));
        model.set_targets(val.labels_at(chunk));
        model.forward(Mode::eval, nullptr);
        loss_sum += model.fusion_loss_value() * static_cast<double>(chunk.size());
        const auto probs = model.fusion_probs();
        scores.insert(scores.end(), probs.begin(), probs.end());
    }
    std::vector<double> labels;
    labels.reserve(val.size());
    for (const auto& it : val.items) labels.push_back(it.label);
    const double loss = loss_sum / static_cast<double>(val.size());
    return {loss, aupr(scores, labels)};
}

}  // namespace detail

/// Full training protocol: balanced resampling each epoch, Adam with
/// gradient clipping, validation-loss early stopping with best-weight
/// restoration. Test data never enters here by construction.
inline RunRecord train(ModelGraph& model, const EpochSet& train_set, const EpochSet& val_set,
                       const TrainConfig& cfg) {
    cfg.validate();
    const int want_c = model.topology.channel_count();
    if (train_set.channels() != want_c || val_set.channels() != want_c)
        throw shape_error("train: model expects " + std::to_string(want_c) + " channels, got " +
                          std::to_string(train_set.channels()) + " (train) / " +
                          std::to_string(val_set.channels()) + " (val)");
    if (val_set.size() == 0) throw value_error("train: empty validation set");
    if (val_set.prevalence() <= 0.0)
        throw value_error("train: validation set has no positive windows; AUPR monitoring undefined");

    RngStream sampler_rng(derive_seed(cfg.seed, "sampler"));
    RngStream dropout_rng(derive_seed(cfg.seed, "dropout"));
    AdamState adam = AdamState::for_params(model.params);

    RunRecord rec;
    rec.config = cfg;
    rec.seed = cfg.seed;
    EarlyStopper stopper{cfg.patience};
    ParamStore best = clone_values(model.params);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const std::vector<std::size_t> order = balanced_sample(train_set, sampler_rng);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < order.size() && !rec.diverged;
             lo += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                                 order.begin() + static_cast<std::ptrdiff_t>(hi));
            model.set_batch(train_set.gather_batch(chunk));
            model.set_targets(train_set.labels_at(chunk));
            model.forward(Mode::train, &dropout_rng);
            const double loss = objective_value(model, cfg);
            if (!std::isfinite(loss)) {
                rec.diverged = true;
                break;
            }
            loss_sum += loss * static_cast<double>(chunk.size());
            seen += chunk.size();
            zero_param_grads(model.params);
            objective_backward(model, cfg);
            clip_gradients(model.params, cfg.grad_clip, cfg.clip_by_norm);
            adam_step(model.params, adam, cfg.learning_rate);
        }
        if (rec.diverged) {
            rec.epochs_run = epoch;
            break;
        }
        rec.train_losses.push_back(loss_sum / static_cast<double>(seen));

        const auto [val_loss, val_aupr] = detail::validation_pass(model, val_set, cfg);
        rec.epochs_run = epoch;
        if (!std::isfinite(val_loss)) {
            rec.diverged = true;
            break;
        }
        rec.val_losses.push_back(val_loss);
        rec.val_auprs.push_back(val_aupr);

        const bool stop = stopper.update(val_loss, epoch);
        if (stopper.best_epoch == epoch) best = clone_values(model.params);
        if (stop) {
            rec.stopped_early = true;
            break;
        }
    }

    detail::restore_values(model.params, best);
    rec.best_epoch = stopper.best_epoch;
    rec.best_val_loss = stopper.best;
    if (rec.best_epoch >= 1 && rec.best_epoch <= static_cast<int>(rec.val_auprs.size()))
        rec.best_val_aupr = rec.val_auprs[static_cast<std::size_t>(rec.best_epoch - 1)];
    rec.best_params = std::move(best);
    return rec;
}

}  // namespace fusenet
