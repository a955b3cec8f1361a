#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/metrics.hpp"
#include "fusenet/model.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/stats.hpp"
#include "fusenet/trainer.hpp"

using namespace fusenet;

namespace {

/// Independent quadratic-time average precision: recompute precision and
/// recall from scratch at every distinct threshold.
double brute_force_ap(const std::vector<double>& scores, const std::vector<double>& labels) {
    std::set<double, std::greater<double>> thresholds(scores.begin(), scores.end());
    double pos = 0.0;
    for (double l : labels) pos += l;
    double ap = 0.0, prev_recall = 0.0;
    for (double thr : thresholds) {
        double tp = 0.0, fp = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= thr) {
                if (labels[i] == 1.0) tp += 1.0; else fp += 1.0;
            }
        }
        const double precision = tp / (tp + fp);
        const double recall = tp / pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

EpochSet toy_set(int n_pos, int n_neg, RngStream& rng, int channels = 1, double level = 0.8) {
    EpochSet set;
    for (int i = 0; i < n_pos + n_neg; ++i) {
        const int label = i < n_pos ? 1 : 0;
        Tensor src({kWindowSamples, channels});
        for (double& v : src.data) v = (label == 1 ? level : -level) + 0.05 * rng.normal();
        set.sources.push_back(std::make_shared<const Tensor>(std::move(src)));
        set.items.push_back({i, 0, label, "toy"});
    }
    return set;
}

}  // namespace

// ------------------------------------------------------------------- aupr

TEST_CASE("perfect ranking scores an area of one", "[metrics]") {
    CHECK(aupr({0.9, 0.8, 0.1}, {1, 1, 0}) == 1.0);
}

TEST_CASE("a fully inverted ranking scores the worst-case area", "[metrics]") {
    CHECK(aupr({0.1, 0.8, 0.9}, {1, 0, 0}) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("random scores converge to the prevalence", "[metrics]") {
    RngStream rng(61);
    const std::size_t n = 100000;
    std::vector<double> scores(n), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        scores[i] = rng.uniform();
        labels[i] = rng.uniform() < 0.42 ? 1.0 : 0.0;
    }
    CHECK(aupr(scores, labels) == Catch::Approx(0.42).margin(0.02));
    CHECK(baseline_aupr(labels) == Catch::Approx(0.42).margin(0.01));
}

TEST_CASE("average precision matches a brute-force oracle exactly", "[metrics]") {
    RngStream rng(62);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(0, 18));
        std::vector<double> scores(static_cast<std::size_t>(n)), labels(static_cast<std::size_t>(n));
        bool has_pos = false;
        for (int i = 0; i < n; ++i) {
            // quantized scores force tie groups
            scores[static_cast<std::size_t>(i)] = static_cast<double>(rng.uniform_int(0, 5)) / 5.0;
            const bool pos = rng.uniform() < 0.4;
            labels[static_cast<std::size_t>(i)] = pos ? 1.0 : 0.0;
            has_pos = has_pos || pos;
        }
        if (!has_pos) labels[0] = 1.0;
        CHECK(aupr(scores, labels) == brute_force_ap(scores, labels));
    }
}

TEST_CASE("average precision ignores strictly monotone score transforms", "[metrics]") {
    RngStream rng(63);
    std::vector<double> scores(200), labels(200);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform(-2.0, 2.0);
        labels[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    labels[0] = 1.0;
    const double base = aupr(scores, labels);
    std::vector<double> affine(scores.size()), expo(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        affine[i] = 3.0 * scores[i] + 10.0;
        expo[i] = std::exp(scores[i]);
    }
    CHECK(aupr(affine, labels) == base);
    CHECK(aupr(expo, labels) == base);
}

TEST_CASE("the precision-recall curve satisfies its structural invariants", "[metrics]") {
    RngStream rng(64);
    std::vector<double> scores(500), labels(500);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = static_cast<double>(rng.uniform_int(0, 20)) / 20.0;
        labels[i] = rng.uniform() < 0.25 ? 1.0 : 0.0;
    }
    labels[0] = 1.0;
    const PRCurve c = pr_curve(scores, labels);
    REQUIRE_FALSE(c.thresholds.empty());
    CHECK(c.total == 500);
    for (std::size_t i = 1; i < c.thresholds.size(); ++i) {
        CHECK(c.thresholds[i] < c.thresholds[i - 1]);  // strictly descending (ties grouped)
        CHECK(c.recall[i] >= c.recall[i - 1]);         // recall rises as the threshold drops
    }
    CHECK(c.recall.back() == 1.0);  // the all-inclusive threshold recovers every positive
}

TEST_CASE("degenerate metric inputs are rejected", "[metrics]") {
    CHECK_THROWS_AS(aupr({0.5, 0.6}, {0, 0}), value_error);          // no positives
    CHECK_THROWS_AS(aupr({0.5}, {0.5}), value_error);                // non-binary label
    CHECK_THROWS_AS(aupr({std::nan("")}, {1.0}), value_error);       // non-finite score
    CHECK_THROWS_AS(aupr({0.5, 0.6}, {1.0}), shape_error);           // length mismatch
    CHECK_THROWS_AS(baseline_aupr({}), value_error);
}

TEST_CASE("the chance baseline is the positive prevalence", "[metrics]") {
    CHECK(baseline_aupr({1, 0, 0, 1}) == 0.5);
    CHECK(baseline_aupr({1, 1, 1}) == 1.0);
    std::vector<double> labels(100, 0.0);
    for (std::size_t i = 0; i < 36; ++i) labels[i] = 1.0;
    CHECK(baseline_aupr(labels) == Catch::Approx(0.36).epsilon(1e-12));
}

// ---------------------------------------------------------------- t-tests

TEST_CASE("the paired test reproduces a hand-checked result", "[stats]") {
    // Two matched samples of five group scores.
    const std::vector<double> a{0.74, 0.68, 0.75, 0.57, 0.58};
    const std::vector<double> b{0.67, 0.66, 0.69, 0.53, 0.45};
    const TTestResult r = paired_ttest(a, b);
    CHECK(r.kind == TTestKind::Paired);
    CHECK(r.t == Catch::Approx(3.44066131565101).epsilon(1e-10));
    CHECK(r.df == 4.0);
    CHECK(r.p_two_sided == Catch::Approx(0.0262778403542708).epsilon(1e-8));
    CHECK(r.p_one_sided == Catch::Approx(0.0131389201771354).epsilon(1e-8));
    CHECK(r.p_two_sided < 0.05);
}

TEST_CASE("the paired test is antisymmetric and shift invariant", "[stats]") {
    RngStream rng(71);
    std::vector<double> a(8), b(8);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.normal(0.6, 0.1);
        b[i] = rng.normal(0.5, 0.1);
    }
    const TTestResult fwd = paired_ttest(a, b);
    const TTestResult rev = paired_ttest(b, a);
    CHECK(fwd.t == -rev.t);
    std::vector<double> a2(a), b2(b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a2[i] += 0.123;
        b2[i] += 0.123;
    }
    CHECK(paired_ttest(a2, b2).t == Catch::Approx(fwd.t).epsilon(1e-12));
}

TEST_CASE("constant differences make the paired test degenerate", "[stats]") {
    // Dyadic values so the pairwise differences are exactly 1.0.
    const std::vector<double> b{0.125, 0.5, 0.875, 0.25, 0.75};
    std::vector<double> a(b);
    for (double& v : a) v += 1.0;
    CHECK_THROWS_AS(paired_ttest(a, b), value_error);
    CHECK_THROWS_AS(paired_ttest({1.0}, {2.0}), value_error);       // too short
    CHECK_THROWS_AS(paired_ttest({1.0, 2.0}, {1.0}), value_error);  // length mismatch
}

TEST_CASE("the unequal-variance test reproduces a frozen reference", "[stats]") {
    const std::vector<double> a{1, 2, 3, 4, 5};
    const std::vector<double> b{2, 4, 6, 8, 10};
    const TTestResult r = welch_ttest(a, b);
    CHECK(r.kind == TTestKind::Welch);
    CHECK(r.t == Catch::Approx(-1.89736659610103).epsilon(1e-10));
    CHECK(r.df == Catch::Approx(5.88235294117647).epsilon(1e-10));
    CHECK(r.p_two_sided == Catch::Approx(0.107531194930627).epsilon(1e-8));
}

TEST_CASE("identical samples give a null unequal-variance result", "[stats]") {
    const std::vector<double> a{0.2, 0.4, 0.6, 0.8};
    const TTestResult r = welch_ttest(a, a);
    CHECK(r.t == 0.0);
    CHECK(r.p_two_sided == Catch::Approx(1.0).margin(1e-12));
    CHECK(r.p_one_sided == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("equal variances and sizes collapse the degrees of freedom", "[stats]") {
    // Same spread in both samples: df reduces to 2n - 2.
    const std::vector<double> a{1.0, 2.0, 3.0};
    const std::vector<double> b{11.0, 12.0, 13.0};
    CHECK(welch_ttest(a, b).df == Catch::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("two flat samples make the unequal-variance test degenerate", "[stats]") {
    CHECK_THROWS_AS(welch_ttest({1.0, 1.0, 1.0}, {2.0, 2.0}), value_error);
    CHECK_THROWS_AS(welch_ttest({1.0}, {1.0, 2.0}), value_error);
    // one flat sample is fine
    CHECK_NOTHROW(welch_ttest({1.0, 1.0, 1.0}, {2.0, 3.0}));
}

// ------------------------------------------------------------ survival fn

TEST_CASE("the t survival function matches frozen references", "[stats]") {
    CHECK(student_t_sf(0.0, 7.0) == Catch::Approx(0.5).margin(1e-14));
    CHECK(student_t_sf(2.776, 4.0) == Catch::Approx(0.0250113891599882).epsilon(1e-10));
    // At df = 1e6 the log-gamma prefactor cancels ~7 digits, so accept ~9
    // correct significant digits instead of the usual 10+.
    CHECK(student_t_sf(1.96, 1e6) == Catch::Approx(0.0249980337926349).epsilon(5e-9));
    CHECK(student_t_sf(-1.5, 3.3) == Catch::Approx(0.888748401640354).epsilon(1e-10));
    CHECK(student_t_sf(10.0, 2.5) == Catch::Approx(0.00222074788365371).epsilon(1e-10));
}

TEST_CASE("the t survival function is monotone and symmetric", "[stats]") {
    double prev = 1.0;
    for (double t = -6.0; t <= 6.0; t += 0.25) {
        const double s = student_t_sf(t, 7.5);
        CHECK(s < prev);
        CHECK(s + student_t_sf(-t, 7.5) == Catch::Approx(1.0).margin(1e-12));
        prev = s;
    }
    CHECK(student_t_sf(std::numeric_limits<double>::infinity(), 3.0) == 0.0);
    CHECK(student_t_sf(-std::numeric_limits<double>::infinity(), 3.0) == 1.0);
    CHECK_THROWS_AS(student_t_sf(1.0, 0.0), value_error);
}

// --------------------------------------------------------------- evaluate

TEST_CASE("an uninformative model evaluates exactly at the chance baseline", "[metrics]") {
    RngStream rng(65);
    const EpochSet test = toy_set(7, 33, rng);
    ModelGraph m = assemble(Topology{TopologyKind::SIM, {"abdores"}}, BaseKind::CNN,
                            ArchParams::tiny(), 1);
    for (auto& [name, t] : m.params) t.fill(0.0);  // every window scores 0.5
    const EvalReport rep = evaluate(m, test);
    CHECK(rep.fusion_aupr == Catch::Approx(rep.prevalence).margin(1e-15));
    CHECK(rep.baseline == Catch::Approx(7.0 / 40.0).epsilon(1e-12));
    CHECK(rep.windows == 40);
    CHECK(rep.curve.thresholds.size() == 1);  // one tie group at 0.5
    CHECK(rep.shortcut_auprs.empty());
}

TEST_CASE("a separating model evaluates at the perfect area", "[metrics]") {
    RngStream rng(66);
    EpochSet train_set = toy_set(8, 8, rng);
    EpochSet test = toy_set(10, 30, rng);
    ArchParams arch = ArchParams::tiny();
    arch.cnn_dropout = 0.0;
    ModelGraph m = assemble(Topology{TopologyKind::SIM, {"abdores"}}, BaseKind::CNN, arch, 5);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.max_epochs = 10;
    cfg.batch_size = 4;
    cfg.patience = 10;
    cfg.seed = 9;
    train(m, train_set, train_set, cfg);
    const EvalReport rep = evaluate(m, test);
    CHECK(rep.fusion_aupr == 1.0);
}

TEST_CASE("shortcut-equipped models report one area per head", "[metrics]") {
    RngStream rng(67);
    const EpochSet test = toy_set(5, 15, rng, 4);
    ModelGraph m = assemble(Topology{TopologyKind::BFM_SC, default_channels()}, BaseKind::CNN,
                            ArchParams::tiny(), 3);
    const EvalReport rep = evaluate(m, test);
    CHECK(rep.shortcut_auprs.size() == 4);
    CHECK(rep.all_auprs().size() == 5);  // channel heads plus fusion
    for (double a : rep.all_auprs()) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
}

TEST_CASE("evaluation rejects mismatched channel counts", "[metrics]") {
    RngStream rng(68);
    const EpochSet one_ch = toy_set(3, 9, rng, 1);
    ModelGraph m = assemble(Topology{TopologyKind::MIM, default_channels()}, BaseKind::CNN,
                            ArchParams::tiny(), 3);
    CHECK_THROWS_AS(evaluate(m, one_ch), shape_error);
}

TEST_CASE("precision-recall curves round trip through CSV", "[metrics]") {
    const PRCurve c = pr_curve({0.9, 0.8, 0.8, 0.1}, {1, 0, 1, 0});
    const std::string path = "pr_test_tmp.csv";
    write_pr_csv(c, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "threshold,precision,recall");
    std::vector<double> thr, prec, rec;
    double a, b, r2;
    char comma;
    while (in >> a >> comma >> b >> comma >> r2) {
        thr.push_back(a);
        prec.push_back(b);
        rec.push_back(r2);
    }
    REQUIRE(thr.size() == c.thresholds.size());
    for (std::size_t i = 0; i < thr.size(); ++i) {
        CHECK(thr[i] == c.thresholds[i]);  // %.17g round trips doubles
        CHECK(prec[i] == c.precision[i]);
        CHECK(rec[i] == c.recall[i]);
    }
    std::remove(path.c_str());
}
