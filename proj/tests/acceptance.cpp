// Release gate: one self-contained check per shipped guarantee, each printed
// as a single PASS/FAIL line with its measured value and pinned tolerance.
//
//   acceptance            run everything
//   acceptance --only N   run check N alone (1-based)
//
// Exit code 0 when every check passes, 3 otherwise.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fusenet/autodiff.hpp"
#include "fusenet/cohort.hpp"
#include "fusenet/gradcheck.hpp"
#include "fusenet/harness.hpp"
#include "fusenet/metrics.hpp"
#include "fusenet/model.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/sigproc.hpp"
#include "fusenet/stats.hpp"
#include "fusenet/trainer.hpp"

namespace fs = std::filesystem;
using namespace fusenet;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;  // "measured ... (tol ...)"
};

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// The exact-zero checks assert bitwise equality; the "tolerance" they print
// is the strongest statement the comparison makes.
constexpr double kFdTol = 1e-5;
constexpr double kHalfSplitTol = 1e-12;

// ---------------------------------------------------------------- helpers

Tensor random_batch(RngStream& rng, int batch, int window, int channels) {
    Tensor x({batch, window, channels});
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    return x;
}

/// Gradients of all parameters named "branch*", captured as plain vectors.
std::map<std::string, std::vector<double>> branch_grads(const ModelGraph& m) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, t] : m.params)
        if (name.rfind("branch", 0) == 0) out[name] = {t.grad.begin(), t.grad.end()};
    return out;
}

int branch_of(const std::string& param_name) {
    return param_name[6] - '0';  // "branchK/..."
}

/// Complex frequency response of the designed filter at frequency f on an
/// fs-Hz grid.
double gain_at(const FilterCoeffs& c, double f_hz, double fs_hz) {
    const std::complex<double> z = std::exp(std::complex<double>(0.0, -2.0 * M_PI * f_hz / fs_hz));
    std::complex<double> num = 0.0, den = 0.0, zk = 1.0;
    for (std::size_t k = 0; k < std::max(c.b.size(), c.a.size()); ++k) {
        if (k < c.b.size()) num += c.b[k] * zk;
        if (k < c.a.size()) den += c.a[k] * zk;
        zk *= z;
    }
    return std::abs(num / den);
}

/// Lag (in samples, positive = y delayed) maximizing cross-correlation.
int xcorr_argmax(const std::vector<double>& x, const std::vector<double>& y, int max_lag) {
    double best = -1.0;
    int best_lag = -max_lag - 1;
    for (int lag = -max_lag; lag <= max_lag; ++lag) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const long long j = static_cast<long long>(i) - lag;
            if (j >= 0 && j < static_cast<long long>(y.size())) acc += x[i] * y[static_cast<std::size_t>(j)];
        }
        if (acc > best) {
            best = acc;
            best_lag = lag;
        }
    }
    return best_lag;
}

/// Step-wise average precision by brute force: every distinct score is a
/// threshold; ties enter together.
double brute_force_ap(std::vector<double> scores, std::vector<double> labels) {
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double total_pos = 0.0;
    for (double l : labels) total_pos += l;
    double ap = 0.0, tp = 0.0, prev_recall = 0.0;
    std::size_t i = 0;
    double seen = 0.0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            tp += labels[order[j]];
            ++j;
        }
        seen += static_cast<double>(j - i);
        const double recall = tp / total_pos;
        const double precision = tp / seen;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

/// The directional sweep shared by checks 10a/10b: 2 bases x {MIM, BFM,
/// BFM-SC}, 5 seeds each on a fixed 20/5/10 patient split.
struct DirectionalResult {
    std::map<std::string, double> mean_aupr;
    double baseline = 0.0;
    double seconds = 0.0;
    bool ready = false;
};

DirectionalResult g_directional;

const DirectionalResult& directional_sweep() {
    if (g_directional.ready) return g_directional;
    const auto t0 = std::chrono::steady_clock::now();

    const SynthConfig synth;  // stock generator settings, seed 1
    const std::vector<PatientRecord> cohort = generate_synthetic(synth);

    ExperimentPlan plan;
    plan.seed = 1;
    plan.groups = 1;
    plan.extra_repeats = 4;  // 5 seeds per configuration, all on the same split
    plan.bases = {BaseKind::CNN, BaseKind::LSTM};
    plan.topologies = {TopologyKind::MIM, TopologyKind::BFM, TopologyKind::BFM_SC};
    plan.arch_profile = "desk";
    plan.split_counts = SplitCounts{20, 5, 10};

    const fs::path out = fs::temp_directory_path() / ("fusenet_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(out);
    const SweepOutcome sweep = run_sweep(plan, cohort, out.string());
    if (sweep.failed != 0) {
        fs::remove_all(out);
        throw state_error("directional sweep: " + std::to_string(sweep.failed) + " cells failed");
    }

    const ReportTables tables = collect_results(out.string());
    for (const std::string& id : tables.config_ids) {
        const std::vector<double> runs = tables.auprs(id, {0, 1, 2, 3, 4});
        if (runs.size() != 5) throw state_error("directional sweep: incomplete results for " + id);
        double acc = 0.0;
        for (double v : runs) acc += v;
        g_directional.mean_aupr[id] = acc / 5.0;
    }
    g_directional.baseline = tables.cells.at("cnn-bfm").at(0).baseline;
    fs::remove_all(out);

    g_directional.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    g_directional.ready = true;
    return g_directional;
}

// --------------------------------------------------------------- criteria

/// 1: analytic gradients vs central differences, every op and every
/// assembled topology.
Outcome check_gradients() {
    const std::vector<GradCheckEntry> entries = run_gradcheck();
    double worst = 0.0;
    bool pass = true;
    for (const GradCheckEntry& e : entries) {
        pass = pass && e.pass;
        if (e.tol == kFdTol) worst = std::max(worst, e.max_err);
    }
    return {pass, "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(entries.size()) +
                      " checks (tol " + fmt("%.0e", kFdTol) + ")"};
}

/// 2: joint branch gradients equal the half-and-half split of fusion-only
/// and own-shortcut-only gradients.
Outcome check_half_split() {
    const ArchParams arch = ArchParams::tiny();
    const Topology topo(TopologyKind::BFM_SC, default_channels());
    double worst = 0.0;
    for (BaseKind base : {BaseKind::CNN, BaseKind::LSTM}) {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            ModelGraph m = assemble(topo, base, arch, seed);
            RngStream rng(seed * 41 + 7);
            m.set_batch(random_batch(rng, 2, arch.window, topo.channel_count()));
            m.set_targets({1.0, 0.0});
            m.forward(Mode::eval);

            zero_param_grads(m.params);
            m.graph.backward(m.fusion_loss);
            const auto fusion_only = branch_grads(m);

            std::vector<std::map<std::string, std::vector<double>>> sc_only;
            for (int id : m.shortcut_losses) {
                zero_param_grads(m.params);
                m.graph.backward(id);
                sc_only.push_back(branch_grads(m));
            }

            zero_param_grads(m.params);
            std::vector<std::pair<int, double>> seeds{{m.fusion_loss, 0.5}};
            for (int id : m.shortcut_losses) seeds.emplace_back(id, 0.5);
            m.graph.backward_multi(seeds);

            for (const auto& [name, joint] : branch_grads(m)) {
                const std::vector<double>& f = fusion_only.at(name);
                const std::vector<double>& s = sc_only.at(static_cast<std::size_t>(branch_of(name))).at(name);
                for (std::size_t i = 0; i < joint.size(); ++i)
                    worst = std::max(worst, std::fabs(joint[i] - (0.5 * f[i] + 0.5 * s[i])));
            }
        }
    }
    return {worst < kHalfSplitTol, "max abs deviation " + fmt("%.2e", worst) + " over 10 seeds x 2 bases x 4 " +
                                       "branches (tol " + fmt("%.0e", kHalfSplitTol) + ")"};
}

/// 3: zero fusion error starves branches without shortcuts and not with.
Outcome check_starvation() {
    const ArchParams arch = ArchParams::tiny();
    double worst_bfm = 0.0;
    int alive_min = 10;
    for (BaseKind base : {BaseKind::CNN, BaseKind::LSTM}) {
        int alive = 0;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            RngStream rng(seed * 17 + 3);
            const Tensor batch = random_batch(rng, 2, arch.window, 4);

            // Targets equal to the model's own predictions zero the loss
            // derivative at the fusion output exactly.
            ModelGraph bfm = assemble(Topology(TopologyKind::BFM, default_channels()), base, arch, seed);
            bfm.set_batch(batch);
            bfm.forward(Mode::eval);
            bfm.set_targets(bfm.fusion_probs());
            bfm.forward(Mode::eval);
            zero_param_grads(bfm.params);
            bfm.graph.backward(bfm.fusion_loss);
            for (const auto& [name, g] : branch_grads(bfm))
                for (double v : g) worst_bfm = std::max(worst_bfm, std::fabs(v));

            ModelGraph sc = assemble(Topology(TopologyKind::BFM_SC, default_channels()), base, arch, seed);
            sc.set_batch(batch);
            sc.forward(Mode::eval);
            sc.set_targets(sc.fusion_probs());
            sc.forward(Mode::eval);
            zero_param_grads(sc.params);
            std::vector<std::pair<int, double>> seeds{{sc.fusion_loss, 0.5}};
            for (int id : sc.shortcut_losses) seeds.emplace_back(id, 0.5);
            sc.graph.backward_multi(seeds);
            double mag = 0.0;
            for (const auto& [name, g] : branch_grads(sc))
                for (double v : g) mag = std::max(mag, std::fabs(v));
            if (mag > 0.0) ++alive;
        }
        alive_min = std::min(alive_min, alive);
    }
    const bool pass = worst_bfm == 0.0 && alive_min >= 9;
    return {pass, "plain-fusion branch grads max " + fmt("%.1e", worst_bfm) +
                      " (must be exactly 0); with shortcuts alive " + std::to_string(alive_min) +
                      "/10 seeds (need >= 9)"};
}

/// 4: removing the shortcut heads leaves the fusion prediction untouched.
Outcome check_strip() {
    const ArchParams arch = ArchParams::tiny();
    const Topology topo(TopologyKind::BFM_SC, default_channels());
    ModelGraph full = assemble(topo, BaseKind::CNN, arch, 404);
    ModelGraph stripped = strip_shortcuts(full);
    RngStream rng(8080);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Tensor x = random_batch(rng, 1, arch.window, topo.channel_count());
        full.set_batch(x);
        full.forward(Mode::eval);
        stripped.set_batch(x);
        stripped.forward(Mode::eval);
        worst = std::max(worst, std::fabs(full.fusion_probs()[0] - stripped.fusion_probs()[0]));
    }
    return {worst == 0.0, "max output difference " + fmt("%.1e", worst) + " on 100 inputs (must be exactly 0)"};
}

/// 5: designed low-pass behaves — unit DC gain, half-power at the cutoff,
/// zero phase after forward-backward application.
Outcome check_filter() {
    const FilterCoeffs c = butter_lowpass_design(4, 0.7, kTargetRateHz);
    const double dc = gain_at(c, 0.0, kTargetRateHz);
    const double cut = gain_at(c, 0.7, kTargetRateHz);
    const double dc_err = std::fabs(dc - 1.0);
    const double cut_err = std::fabs(cut - 1.0 / std::sqrt(2.0));

    std::vector<double> x(1500);  // 300 s at 5 Hz
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = std::sin(2.0 * M_PI * 0.2 * static_cast<double>(i) / kTargetRateHz);
    const std::vector<double> y = filtfilt(c, x);
    const int lag = xcorr_argmax(x, y, 25);

    const bool pass = dc_err < 1e-9 && cut_err < 1e-3 && lag == 0;
    return {pass, "DC gain err " + fmt("%.1e", dc_err) + " (tol 1e-9), cutoff gain err " + fmt("%.1e", cut_err) +
                      " (tol 1e-3), filtfilt lag " + std::to_string(lag) + " samples (must be 0)"};
}

/// 6: average precision equals brute-force threshold enumeration exactly.
Outcome check_aupr_oracle() {
    RngStream rng(606);
    int exact = 0;
    const int trials = 1000;
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const int n = static_cast<int>(rng.uniform_int(1, 20));
        std::vector<double> scores, labels;
        double pos = 0.0;
        for (int i = 0; i < n; ++i) {
            // A coarse score grid forces frequent ties.
            scores.push_back(static_cast<double>(rng.uniform_int(0, 10)) / 10.0);
            const double l = rng.uniform() < 0.4 ? 1.0 : 0.0;
            pos += l;
            labels.push_back(l);
        }
        if (pos == 0.0) labels[static_cast<std::size_t>(rng.uniform_int(0, n - 1))] = 1.0;
        const double got = aupr(scores, labels);
        const double want = brute_force_ap(scores, labels);
        if (got == want) ++exact;
        worst = std::max(worst, std::fabs(got - want));
    }
    return {exact == trials, std::to_string(exact) + "/" + std::to_string(trials) +
                                 " instances exactly equal (max abs diff " + fmt("%.1e", worst) + ")"};
}

/// 7: random scores yield chance-level average precision at survey
/// prevalences.
Outcome check_chance_level() {
    RngStream rng(707);
    const std::size_t n = 100000;
    double worst = 0.0;
    for (double prev : {0.36, 0.42, 0.31, 0.29}) {
        std::vector<double> scores(n), labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = rng.uniform();
            labels[i] = rng.uniform() < prev ? 1.0 : 0.0;
        }
        worst = std::max(worst, std::fabs(aupr(scores, labels) - prev));
    }
    return {worst < 0.02, "max |AUPR - prevalence| " + fmt("%.4f", worst) + " at n=1e5 (tol 0.02)"};
}

/// 8: the published group-wise comparison reproduces its test statistic.
Outcome check_tstat() {
    const std::vector<double> bfm_sc{0.74, 0.68, 0.75, 0.57, 0.58};
    const std::vector<double> bfm{0.67, 0.66, 0.69, 0.53, 0.45};
    const TTestResult r = paired_ttest(bfm_sc, bfm);
    const double t_err = std::fabs(r.t - 3.44);
    const bool pass = t_err < 0.01 && r.df == 4.0 && r.p_one_sided < 0.05;
    return {pass, "t " + fmt("%.4f", r.t) + " (want 3.44 +/- 0.01), df " + fmt("%.0f", r.df) +
                      ", one-sided p " + fmt("%.4f", r.p_one_sided) + " (< 0.05)"};
}

/// 9: windowing arithmetic on a full-length record.
Outcome check_epoching() {
    SynthConfig cfg;  // stock duration: 600 s
    cfg.patients = 1;
    const std::vector<PatientRecord> rec = generate_synthetic(cfg);
    const EpochSet epochs = make_epochs(rec.front());
    bool widths_ok = true;
    for (std::size_t i = 0; i < epochs.size(); ++i) widths_ok = widths_ok && epochs.window_at(i).dim(0) == 150;
    const bool pass = epochs.size() == 571 && widths_ok;
    return {pass, std::to_string(epochs.size()) + " windows of 150 samples from 600 s at 5 Hz (want exactly 571)"};
}

/// 10: the directional experiment — every fusion configuration clearly
/// beats the chance baseline, and shortcut training never hurts the fused
/// model, within the time budget.
Outcome check_directional() {
    const DirectionalResult& r = directional_sweep();
    double worst_margin = 1.0;
    std::string worst_id;
    for (const auto& [id, mean] : r.mean_aupr) {
        const double margin = mean - r.baseline;
        if (margin < worst_margin) {
            worst_margin = margin;
            worst_id = id;
        }
    }
    const double cnn_gap = r.mean_aupr.at("cnn-bfm_sc") - r.mean_aupr.at("cnn-bfm");
    const double lstm_gap = r.mean_aupr.at("lstm-bfm_sc") - r.mean_aupr.at("lstm-bfm");
    const bool pass = worst_margin >= 0.10 && cnn_gap >= 0.0 && lstm_gap >= 0.0 && r.seconds < 1800.0;
    return {pass, "smallest baseline margin " + fmt("%.3f", worst_margin) + " (" + worst_id +
                      ", need >= 0.10); shortcut-vs-plain gap cnn " + fmt("%+.4f", cnn_gap) + ", lstm " +
                      fmt("%+.4f", lstm_gap) + " (>= 0); " + fmt("%.0f", r.seconds) + " s (< 1800)"};
}

/// 11: identical seeds reproduce the run artifacts byte for byte.
Outcome check_determinism() {
    SynthConfig synth;
    synth.patients = 8;
    synth.duration_s = 180;
    synth.seed = 11;
    synth.events_per_hour = 30.0;
    const std::vector<PatientRecord> cohort = generate_synthetic(synth);

    ExperimentPlan plan;
    plan.seed = 11;
    plan.groups = 1;
    plan.extra_repeats = 0;
    plan.bases = {BaseKind::CNN};
    plan.topologies = {TopologyKind::BFM_SC};
    plan.arch_profile = "tiny";
    plan.split_counts = SplitCounts{4, 2, 2};
    plan.train.max_epochs = 3;

    const fs::path base = fs::temp_directory_path() / ("fusenet_accept_det_" + std::to_string(::getpid()));
    std::string first, second;
    for (int round = 0; round < 2; ++round) {
        const fs::path out = base / std::to_string(round);
        fs::remove_all(out);
        run_sweep(plan, cohort, out.string());
        std::ifstream is(out / "results/cnn-bfm_sc/run0/run_record.json", std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        (round == 0 ? first : second) = ss.str();
    }
    fs::remove_all(base);
    const bool pass = !first.empty() && first == second;
    return {pass, std::string("repeated run record ") + (pass ? "byte-identical" : "DIFFERS") + " (" +
                      std::to_string(first.size()) + " bytes)"};
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> fn;
};

const std::vector<Criterion> kCriteria = {
    {1, "gradient correctness (ops + all topologies)", check_gradients},
    {2, "half-and-half branch gradient identity", check_half_split},
    {3, "gradient starvation contrast", check_starvation},
    {4, "shortcut removal preserves predictions", check_strip},
    {5, "low-pass filter design and zero-phase use", check_filter},
    {6, "average precision matches brute force", check_aupr_oracle},
    {7, "chance-level AUPR equals prevalence", check_chance_level},
    {8, "published paired t-statistic reproduced", check_tstat},
    {9, "epoch window count arithmetic", check_epoching},
    {10, "directional synthetic experiment", check_directional},
    {11, "training runs reproduce byte-identically", check_determinism},
};

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
            only = std::atoi(argv[++i]);
        } else {
            std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
            return 1;
        }
    }

    bool all_pass = true;
    for (const Criterion& c : kCriteria) {
        if (only != 0 && c.id != only) continue;
        Outcome out;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            out = c.fn();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%2d] %s  %-46s %s  (%.1f s)\n", c.id, out.pass ? "PASS" : "FAIL", c.title,
                    out.detail.c_str(), secs);
        std::fflush(stdout);
        all_pass = all_pass && out.pass;
    }
    std::printf(all_pass ? "acceptance: all criteria satisfied\n" : "acceptance: CRITERIA VIOLATED\n");
    return all_pass ? 0 : 3;
}
