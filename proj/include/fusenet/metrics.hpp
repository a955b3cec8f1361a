#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/model.hpp"
#include "fusenet/sigproc.hpp"

namespace fusenet {

/// Precision-recall pairs at every distinct score threshold, thresholds
/// descending; tied scores collapse into a single threshold.
struct PRCurve {
    std::vector<double> thresholds;
    std::vector<double> precision;
    std::vector<double> recall;
    std::size_t positives = 0;
    std::size_t total = 0;
};

inline PRCurve pr_curve(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size())
        throw shape_error("pr_curve: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw value_error("pr_curve: empty input");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0.0 && labels[i] != 1.0)
            throw value_error("pr_curve: labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw value_error("pr_curve: non-finite score");
        if (labels[i] == 1.0) ++pos;
    }
    if (pos == 0) throw value_error("pr_curve: no positive labels, metric undefined");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });

    PRCurve c;
    c.positives = pos;
    c.total = scores.size();
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double thr = scores[order[i]];
        // consume the whole tie group at this threshold
        while (i < order.size() && scores[order[i]] == thr) {
            if (labels[order[i]] == 1.0) tp += 1.0; else fp += 1.0;
            ++i;
        }
        c.thresholds.push_back(thr);
        c.precision.push_back(tp / (tp + fp));
        c.recall.push_back(tp / static_cast<double>(pos));
    }
    return c;
}

/// Step-wise average precision: sum of (R_n - R_{n-1}) * P_n over descending
/// thresholds, no interpolation.
inline double aupr(const std::vector<double>& scores, const std::vector<double>& labels) {
    const PRCurve c = pr_curve(scores, labels);
    double area = 0.0, prev_recall = 0.0;
    for (std::size_t n = 0; n < c.thresholds.size(); ++n) {
        area += (c.recall[n] - prev_recall) * c.precision[n];
        prev_recall = c.recall[n];
    }
    return area;
}

/// Expected AUPR of a score-independent random predictor: the prevalence.
inline double baseline_aupr(const std::vector<double>& labels) {
    if (labels.empty()) throw value_error("baseline_aupr: empty labels");
    double pos = 0.0;
    for (double l : labels) {
        if (l != 0.0 && l != 1.0) throw value_error("baseline_aupr: labels must be 0 or 1");
        pos += l;
    }
    return pos / static_cast<double>(labels.size());
}

/// Test-set evaluation of one trained model: fusion-head AUPR, per-sensor
/// shortcut AUPRs when the topology provides them, and the chance baseline.
struct EvalReport {
    double fusion_aupr = 0.0;
    std::vector<double> shortcut_auprs;  // channel order; empty unless shortcut heads exist
    double baseline = 0.0;
    double prevalence = 0.0;
    std::size_t windows = 0;
    std::size_t positives = 0;
    PRCurve curve;  // fusion head

    /// All head AUPRs, shortcuts first (channel order) then fusion.
    std::vector<double> all_auprs() const {
        std::vector<double> out = shortcut_auprs;
        out.push_back(fusion_aupr);
        return out;
    }
};

inline EvalReport evaluate(ModelGraph& model, const EpochSet& test, int batch_size = 256) {
    if (test.size() == 0) throw value_error("evaluate: empty test set");
    if (batch_size < 1) throw value_error("evaluate: batch size must be positive");
    const int want_c = static_cast<int>(model.topology.channels.size());
    if (test.channels() != want_c)
        throw shape_error("evaluate: model expects " + std::to_string(want_c) + " channels, test set has " +
                          std::to_string(test.channels()));

    std::vector<double> labels;
    labels.reserve(test.size());
    for (const auto& it : test.items) labels.push_back(it.label);

    std::vector<double> fusion_scores;
    fusion_scores.reserve(test.size());
    const int n_heads = model.head_count();
    std::vector<std::vector<double>> shortcut_scores(n_heads > 1 ? static_cast<std::size_t>(n_heads - 1) : 0);

    std::vector<std::size_t> idx(test.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t lo = 0; lo < idx.size(); lo += static_cast<std::size_t>(batch_size)) {
        const std::size_t hi = std::min(idx.size(), lo + static_cast<std::size_t>(batch_size));
        const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                             idx.begin() + static_cast<std::ptrdiff_t>(hi));
        model.set_batch(test.gather_batch(chunk));
        model.forward(Mode::eval, nullptr);
        const std::vector<double> probs = model.fusion_probs();
        fusion_scores.insert(fusion_scores.end(), probs.begin(), probs.end());
        for (std::size_t h = 0; h < shortcut_scores.size(); ++h) {
            const std::vector<double> sp = model.shortcut_probs(static_cast<int>(h));
            shortcut_scores[h].insert(shortcut_scores[h].end(), sp.begin(), sp.end());
        }
    }

    EvalReport rep;
    rep.windows = test.size();
    rep.prevalence = test.prevalence();
    rep.positives = static_cast<std::size_t>(std::llround(rep.prevalence * static_cast<double>(test.size())));
    rep.baseline = baseline_aupr(labels);
    rep.curve = pr_curve(fusion_scores, labels);
    rep.fusion_aupr = aupr(fusion_scores, labels);
    for (const auto& sc : shortcut_scores) rep.shortcut_auprs.push_back(aupr(sc, labels));
    return rep;
}

/// Emit a PR curve as CSV (threshold, precision, recall).
inline void write_pr_csv(const PRCurve& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out << "threshold,precision,recall\n";
    char buf[128];
    for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", c.thresholds[i], c.precision[i], c.recall[i]);
        out << buf;
    }
    if (!out) throw io_error("write failed for '" + path + "'");
}

}  // namespace fusenet
