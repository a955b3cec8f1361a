#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet {

enum class TTestKind { Paired, Welch };

struct TTestResult {
    TTestKind kind = TTestKind::Paired;
    double t = 0.0;
    double df = 0.0;
    double p_one_sided = 1.0;  // upper tail of |direction as computed|
    double p_two_sided = 1.0;
};

namespace detail {

/// Continued-fraction evaluation for the regularized incomplete beta
/// function (Lentz's method).
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

/// Regularized incomplete beta I_x(a, b).
inline double betainc(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

inline double mean_of(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

inline double sample_var(const std::vector<double>& x, double mean) {
    double s = 0.0;
    for (double v : x) s += (v - mean) * (v - mean);
    return s / static_cast<double>(x.size() - 1);
}

}  // namespace detail

/// Upper-tail probability P(T > t) for Student's t with `df` degrees of
/// freedom, via the regularized incomplete beta function.
inline double student_t_sf(double t, double df) {
    if (df <= 0.0) throw value_error("student_t_sf: degrees of freedom must be positive");
    if (std::isnan(t)) throw value_error("student_t_sf: t is NaN");
    if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
    const double half = 0.5 * detail::betainc(0.5 * df, 0.5, df / (df + t * t));
    return t >= 0.0 ? half : 1.0 - half;
}

namespace detail {

inline TTestResult finish_ttest(TTestKind kind, double t, double df) {
    TTestResult r;
    r.kind = kind;
    r.t = t;
    r.df = df;
    const double upper = student_t_sf(std::abs(t), df);
    r.p_two_sided = std::min(1.0, 2.0 * upper);
    // one-sided p for the alternative "mean(a) > mean(b)"
    r.p_one_sided = student_t_sf(t, df);
    return r;
}

}  // namespace detail

/// Paired t-test on matched samples: t = mean(a-b) / (sd(a-b)/sqrt(n)).
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw value_error("paired_ttest: sample sizes differ (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
    if (a.size() < 2) throw value_error("paired_ttest: need at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double m = detail::mean_of(d);
    const double var = detail::sample_var(d, m);
    if (var <= 0.0) throw value_error("paired_ttest: differences have zero variance (degenerate test)");
    const double n = static_cast<double>(d.size());
    return detail::finish_ttest(TTestKind::Paired, m / std::sqrt(var / n), n - 1.0);
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline TTestResult welch_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw value_error("welch_ttest: each sample needs at least 2 values");
    const double ma = detail::mean_of(a), mb = detail::mean_of(b);
    const double va = detail::sample_var(a, ma), vb = detail::sample_var(b, mb);
    if (va <= 0.0 && vb <= 0.0)
        throw value_error("welch_ttest: both samples have zero variance (degenerate test)");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double se2 = va / na + vb / nb;
    const double t = (ma - mb) / std::sqrt(se2);
    const double df =
        se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    return detail::finish_ttest(TTestKind::Welch, t, df);
}

}  // namespace fusenet
