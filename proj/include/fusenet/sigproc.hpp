#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet {

inline constexpr double kTargetRateHz = 5.0;
inline constexpr int kWindowSamples = 150;  // 30 s at 5 Hz
inline constexpr int kWindowStride = 5;     // 1 s at 5 Hz

/// One sensor stream at its native rate, with a per-sample missing flag.
struct RawChannel {
    std::string name;  // abdores | thorres | hr | sao2
    std::vector<double> samples;
    std::vector<std::uint8_t> missing;  // 1 = missing/artifact
    double rate_hz = 0.0;

    void validate() const {
        if (rate_hz <= 0.0) throw value_error("channel '" + name + "': sample rate must be positive");
        if (missing.size() != samples.size())
            throw value_error("channel '" + name + "': missing mask length " + std::to_string(missing.size()) +
                              " does not match " + std::to_string(samples.size()) + " samples");
    }
};

/// One patient's four channels, all on the 5 Hz grid, plus the merged binary
/// apnea annotation on the same grid.
struct PatientRecord {
    std::string patient_id;
    std::vector<RawChannel> channels;  // fixed order: abdores, thorres, hr, sao2
    std::vector<std::uint8_t> annotation;

    void validate() const {
        if (channels.size() != 4)
            throw value_error("record '" + patient_id + "': expected 4 channels, got " +
                              std::to_string(channels.size()));
        for (std::size_t i = 0; i < channels.size(); ++i) {
            channels[i].validate();
            if (channels[i].rate_hz != kTargetRateHz)
                throw value_error("record '" + patient_id + "': channel '" + channels[i].name +
                                  "' is not on the 5 Hz grid");
            if (channels[i].samples.size() != annotation.size())
                throw value_error("record '" + patient_id + "': channel '" + channels[i].name + "' has " +
                                  std::to_string(channels[i].samples.size()) + " samples but annotation has " +
                                  std::to_string(annotation.size()));
        }
        for (std::uint8_t a : annotation)
            if (a != 0 && a != 1) throw value_error("record '" + patient_id + "': annotation is not binary");
    }

    std::size_t length() const { return annotation.size(); }
};

// ---------------------------------------------------------------- resample

/// Linear interpolation onto a uniform grid at `target_hz` spanning the
/// original duration; the missing mask follows the nearest original sample.
inline RawChannel resample_channel(const RawChannel& ch, double target_hz) {
    ch.validate();
    if (ch.samples.size() < 2)
        throw value_error("resample: channel '" + ch.name + "' has fewer than 2 samples");
    const double duration = static_cast<double>(ch.samples.size() - 1) / ch.rate_hz;
    const std::size_t n_out = static_cast<std::size_t>(std::floor(duration * target_hz + 1e-9)) + 1;
    RawChannel out;
    out.name = ch.name;
    out.rate_hz = target_hz;
    out.samples.resize(n_out);
    out.missing.resize(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double t = static_cast<double>(i) / target_hz;
        const double pos = t * ch.rate_hz;
        std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        if (lo >= ch.samples.size() - 1) lo = ch.samples.size() - 2;
        const double frac = pos - static_cast<double>(lo);
        out.samples[i] = ch.samples[lo] * (1.0 - frac) + ch.samples[lo + 1] * frac;
        const std::size_t nearest = frac < 0.5 ? lo : lo + 1;
        out.missing[i] = ch.missing[nearest];
    }
    return out;
}

inline RawChannel resample_5hz(const RawChannel& ch) { return resample_channel(ch, kTargetRateHz); }

/// Nearest-neighbor resampling for binary sequences (annotations).
inline std::vector<std::uint8_t> resample_binary(const std::vector<std::uint8_t>& seq, double rate_hz,
                                                 double target_hz) {
    if (seq.size() < 2) throw value_error("resample: binary sequence has fewer than 2 samples");
    const double duration = static_cast<double>(seq.size() - 1) / rate_hz;
    const std::size_t n_out = static_cast<std::size_t>(std::floor(duration * target_hz + 1e-9)) + 1;
    std::vector<std::uint8_t> out(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) / target_hz * rate_hz;
        std::size_t nearest = static_cast<std::size_t>(std::llround(pos));
        if (nearest >= seq.size()) nearest = seq.size() - 1;
        out[i] = seq[nearest];
    }
    return out;
}

// ------------------------------------------------------------------ filter

/// Digital IIR coefficients, y_n = sum b_k x_{n-k} - sum_{k>=1} a_k y_{n-k},
/// with a[0] = 1.
struct FilterCoeffs {
    std::vector<double> b;
    std::vector<double> a;
    int order() const { return static_cast<int>(a.size()) - 1; }
};

namespace detail {

inline std::vector<std::complex<double>> poly_from_roots(const std::vector<std::complex<double>>& roots) {
    std::vector<std::complex<double>> p{1.0};
    for (const auto& r : roots) {
        std::vector<std::complex<double>> q(p.size() + 1, 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            q[i] += p[i];
            q[i + 1] -= p[i] * r;
        }
        p = std::move(q);
    }
    return p;
}

}  // namespace detail

/// Lowpass Butterworth design: analog prototype poles, frequency pre-warping,
/// bilinear transform, unity DC gain.
inline FilterCoeffs butter_lowpass_design(int order, double cutoff_hz, double fs_hz) {
    if (order < 1) throw value_error("butter: order must be >= 1");
    if (cutoff_hz <= 0.0 || cutoff_hz >= fs_hz / 2.0)
        throw value_error("butter: cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, " +
                          std::to_string(fs_hz / 2.0) + ") for fs = " + std::to_string(fs_hz) + " Hz");
    const double warped = 2.0 * fs_hz * std::tan(M_PI * cutoff_hz / fs_hz);

    std::vector<std::complex<double>> zpoles;
    std::complex<double> dc_denom = 1.0;  // prod(1 - z_p)
    for (int k = 0; k < order; ++k) {
        const double theta = M_PI * (2.0 * k + order + 1.0) / (2.0 * order);
        const std::complex<double> s = warped * std::complex<double>(std::cos(theta), std::sin(theta));
        const std::complex<double> zp = (2.0 * fs_hz + s) / (2.0 * fs_hz - s);
        zpoles.push_back(zp);
        dc_denom *= (1.0 - zp);
    }

    const auto apoly = detail::poly_from_roots(zpoles);
    const auto bpoly = detail::poly_from_roots(std::vector<std::complex<double>>(
        static_cast<std::size_t>(order), std::complex<double>(-1.0, 0.0)));  // zeros at z = -1
    const double gain = dc_denom.real() / std::pow(2.0, order);

    FilterCoeffs c;
    c.a.resize(apoly.size());
    c.b.resize(bpoly.size());
    for (std::size_t i = 0; i < apoly.size(); ++i) c.a[i] = apoly[i].real();
    for (std::size_t i = 0; i < bpoly.size(); ++i) c.b[i] = bpoly[i].real() * gain;
    return c;
}

/// Complex frequency response H(e^{j 2 pi f / fs}).
inline std::complex<double> freq_response(const FilterCoeffs& c, double f_hz, double fs_hz) {
    const double w = 2.0 * M_PI * f_hz / fs_hz;
    std::complex<double> num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < c.b.size(); ++k) num += c.b[k] * std::exp(std::complex<double>(0.0, -w * static_cast<double>(k)));
    for (std::size_t k = 0; k < c.a.size(); ++k) den += c.a[k] * std::exp(std::complex<double>(0.0, -w * static_cast<double>(k)));
    return num / den;
}

namespace detail {

/// Steady-state initial filter state for a unit-amplitude input (direct form
/// II transposed): z_i = sum_{j > i} (b_j - a_j) for unity-DC-gain filters.
inline std::vector<double> steady_state_zi(const FilterCoeffs& c) {
    const std::size_t n = c.a.size();
    std::vector<double> zi(n - 1, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) acc += c.b[j] - c.a[j];
        zi[i] = acc;
    }
    return zi;
}

/// Direct form II transposed recursion with initial state.
inline std::vector<double> lfilter(const FilterCoeffs& c, const std::vector<double>& x,
                                   std::vector<double> z) {
    const std::size_t nz = c.a.size() - 1;
    std::vector<double> y(x.size());
    for (std::size_t n = 0; n < x.size(); ++n) {
        const double xn = x[n];
        const double yn = c.b[0] * xn + z[0];
        for (std::size_t i = 0; i + 1 < nz; ++i) z[i] = c.b[i + 1] * xn - c.a[i + 1] * yn + z[i + 1];
        z[nz - 1] = c.b[nz] * xn - c.a[nz] * yn;
        y[n] = yn;
    }
    return y;
}

}  // namespace detail

/// Zero-phase filtering: odd-reflection padding of length 3 * (2 * order + 1),
/// steady-state-initialized forward pass, reverse, second pass, reverse,
/// padding removed. Magnitude response |H|^2, phase exactly zero.
inline std::vector<double> filtfilt(const FilterCoeffs& c, const std::vector<double>& x) {
    const int padlen = 3 * (2 * c.order() + 1);
    if (static_cast<int>(x.size()) <= padlen)
        throw value_error("filtfilt: signal length " + std::to_string(x.size()) +
                          " requires more than " + std::to_string(padlen) + " samples");

    std::vector<double> padded;
    padded.reserve(x.size() + 2 * static_cast<std::size_t>(padlen));
    for (int i = padlen; i >= 1; --i) padded.push_back(2.0 * x.front() - x[static_cast<std::size_t>(i)]);
    padded.insert(padded.end(), x.begin(), x.end());
    const std::size_t n = x.size();
    for (int i = 1; i <= padlen; ++i)
        padded.push_back(2.0 * x.back() - x[n - 1 - static_cast<std::size_t>(i)]);

    const std::vector<double> zi = detail::steady_state_zi(c);
    auto pass = [&](std::vector<double> sig) {
        std::vector<double> z = zi;
        for (double& v : z) v *= sig.front();
        return detail::lfilter(c, sig, std::move(z));
    };

    std::vector<double> y = pass(padded);
    std::reverse(y.begin(), y.end());
    y = pass(y);
    std::reverse(y.begin(), y.end());
    return std::vector<double>(y.begin() + padlen, y.end() - padlen);
}

// ------------------------------------------------------------- normalizers

/// q-th percentile (0..100) by linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw value_error("percentile: empty input");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

/// Maps the 5th percentile to 0 and the 95th to 1; out-of-range values pass
/// through unclipped.
inline std::vector<double> percentile_normalize(const std::vector<double>& x) {
    if (x.size() < 20)
        throw value_error("percentile_normalize: need at least 20 samples, got " + std::to_string(x.size()));
    const double p5 = percentile(x, 5.0);
    const double p95 = percentile(x, 95.0);
    if (p95 <= p5)
        throw value_error("percentile_normalize: degenerate signal (5th and 95th percentiles coincide)");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - p5) / (p95 - p5);
    return out;
}

inline std::vector<double> hr_normalize(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - 50.0) / 55.0;
    return out;
}

inline std::vector<double> sao2_normalize(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - 80.0) / 20.0;
    return out;
}

// ------------------------------------------------------- artifact handling

/// Physiologically implausible or non-finite samples become missing.
struct ArtifactLimits {
    double hr_lo = 20.0, hr_hi = 250.0;
    double sao2_lo = 50.0, sao2_hi = 101.0;
};

inline void mark_artifacts(RawChannel& ch, double lo, double hi) {
    ch.validate();
    for (std::size_t i = 0; i < ch.samples.size(); ++i) {
        const double v = ch.samples[i];
        if (!std::isfinite(v) || v < lo || v > hi) ch.missing[i] = 1;
    }
}

/// Interior gaps interpolate linearly between flanking valid samples;
/// leading/trailing gaps hold the nearest valid value. Clears the mask.
inline RawChannel interpolate_missing(const RawChannel& ch) {
    ch.validate();
    RawChannel out = ch;
    const std::size_t n = out.samples.size();
    std::size_t first_valid = n;
    for (std::size_t i = 0; i < n; ++i)
        if (!out.missing[i]) {
            first_valid = i;
            break;
        }
    if (first_valid == n)
        throw value_error("interpolate_missing: channel '" + ch.name + "' has no valid samples");

    for (std::size_t i = 0; i < first_valid; ++i) out.samples[i] = out.samples[first_valid];
    std::size_t last_valid = first_valid;
    std::size_t i = first_valid + 1;
    while (i < n) {
        if (!out.missing[i]) {
            if (i > last_valid + 1) {
                const double lo = out.samples[last_valid], hi = out.samples[i];
                const double span = static_cast<double>(i - last_valid);
                for (std::size_t j = last_valid + 1; j < i; ++j)
                    out.samples[j] = lo + (hi - lo) * static_cast<double>(j - last_valid) / span;
            }
            last_valid = i;
        }
        ++i;
    }
    for (std::size_t j = last_valid + 1; j < n; ++j) out.samples[j] = out.samples[last_valid];
    std::fill(out.missing.begin(), out.missing.end(), 0);
    return out;
}

// ------------------------------------------------------------- annotations

inline std::vector<std::uint8_t> merge_annotations(const std::vector<std::uint8_t>& osa,
                                                   const std::vector<std::uint8_t>& csa,
                                                   const std::vector<std::uint8_t>& hypopnea) {
    if (osa.size() != csa.size() || osa.size() != hypopnea.size())
        throw shape_error("merge_annotations: sequence lengths differ (" + std::to_string(osa.size()) + ", " +
                          std::to_string(csa.size()) + ", " + std::to_string(hypopnea.size()) + ")");
    std::vector<std::uint8_t> out(osa.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (osa[i] || csa[i] || hypopnea[i]) ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------- epoching

struct PreprocessOptions {
    int filter_order = 4;
    double filter_cutoff_hz = 0.7;
    ArtifactLimits limits;
};

/// Full per-channel pipeline on a 5 Hz record: respiratory belts are
/// zero-phase filtered then percentile-normalized; HR and SaO2 have
/// artifacts marked, gaps interpolated, then fixed-range normalization.
/// Returns the [T x 4] feature matrix.
inline Tensor preprocess(const PatientRecord& rec, const PreprocessOptions& opt = {}) {
    rec.validate();
    const FilterCoeffs coeffs = butter_lowpass_design(opt.filter_order, opt.filter_cutoff_hz, kTargetRateHz);
    const std::size_t t = rec.length();
    Tensor out({static_cast<int>(t), 4});
    for (int c = 0; c < 4; ++c) {
        std::vector<double> processed;
        if (c < 2) {
            processed = percentile_normalize(filtfilt(coeffs, rec.channels[static_cast<std::size_t>(c)].samples));
        } else {
            RawChannel ch = rec.channels[static_cast<std::size_t>(c)];
            if (c == 2) {
                mark_artifacts(ch, opt.limits.hr_lo, opt.limits.hr_hi);
                processed = hr_normalize(interpolate_missing(ch).samples);
            } else {
                mark_artifacts(ch, opt.limits.sao2_lo, opt.limits.sao2_hi);
                processed = sao2_normalize(interpolate_missing(ch).samples);
            }
        }
        for (std::size_t i = 0; i < t; ++i) out.at(static_cast<int>(i), c) = processed[i];
    }
    return out;
}

/// Windowed view of preprocessed records. Windows are not materialized;
/// items reference a shared source matrix by start offset.
struct EpochSet {
    struct Item {
        int source;         // index into sources
        int start;          // first sample of the window
        int label;          // 1 if any annotation sample in the window is set
        std::string patient;
    };

    std::vector<std::shared_ptr<const Tensor>> sources;  // each [T x C]
    std::vector<Item> items;
    int window = kWindowSamples;

    std::size_t size() const { return items.size(); }
    int channels() const { return sources.empty() ? 0 : sources.front()->dim(1); }

    /// Materialize one window as a [window x C] tensor.
    Tensor window_at(std::size_t i) const {
        const Item& it = items.at(i);
        const Tensor& src = *sources[static_cast<std::size_t>(it.source)];
        const int c = src.dim(1);
        Tensor out({window, c});
        const double* base = src.data.data() + static_cast<std::size_t>(it.start) * c;
        std::copy(base, base + static_cast<std::size_t>(window) * c, out.data.begin());
        return out;
    }

    /// Materialize a batch [B x window x C] from item indices.
    Tensor gather_batch(const std::vector<std::size_t>& idx) const {
        if (idx.empty()) throw value_error("gather_batch: empty index list");
        const int c = channels();
        Tensor out({static_cast<int>(idx.size()), window, c});
        double* dst = out.data.data();
        const std::size_t stride = static_cast<std::size_t>(window) * c;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Item& it = items.at(idx[k]);
            const Tensor& src = *sources[static_cast<std::size_t>(it.source)];
            const double* base = src.data.data() + static_cast<std::size_t>(it.start) * c;
            std::copy(base, base + stride, dst + k * stride);
        }
        return out;
    }

    std::vector<double> labels_at(const std::vector<std::size_t>& idx) const {
        std::vector<double> out(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) out[k] = items.at(idx[k]).label;
        return out;
    }

    double prevalence() const {
        if (items.empty()) return 0.0;
        double pos = 0;
        for (const Item& it : items) pos += it.label;
        return pos / static_cast<double>(items.size());
    }

    /// Append another epoch set (e.g. patients of the same split).
    void append(EpochSet other) {
        if (!sources.empty() && !other.sources.empty() && channels() != other.channels())
            throw shape_error("EpochSet::append: channel count mismatch");
        const int offset = static_cast<int>(sources.size());
        for (auto& s : other.sources) sources.push_back(std::move(s));
        for (Item it : other.items) {
            it.source += offset;
            items.push_back(std::move(it));
        }
    }

    /// Restrict windows to a subset of channels (column selection), for
    /// SIM and reduced-channel experiments. Rebuilds sources.
    EpochSet select_channels(const std::vector<int>& cols) const {
        if (cols.empty()) throw value_error("select_channels: empty selection");
        EpochSet out;
        out.window = window;
        out.items = items;
        for (const auto& s : sources) {
            const Tensor& src = *s;
            Tensor sel({src.dim(0), static_cast<int>(cols.size())});
            for (int t = 0; t < src.dim(0); ++t)
                for (std::size_t j = 0; j < cols.size(); ++j)
                    sel.at(t, static_cast<int>(j)) = src.at(t, cols[j]);
            out.sources.push_back(std::make_shared<const Tensor>(std::move(sel)));
        }
        return out;
    }
};

/// Slide a 30 s window at 1 s stride over the preprocessed record; a window
/// is positive if any overlapped annotation sample is positive. The trailing
/// partial window is discarded.
inline EpochSet make_epochs(const PatientRecord& rec, const PreprocessOptions& opt = {}) {
    rec.validate();
    if (rec.length() < static_cast<std::size_t>(kWindowSamples))
        throw value_error("make_epochs: record '" + rec.patient_id + "' has " + std::to_string(rec.length()) +
                          " samples, shorter than one " + std::to_string(kWindowSamples) + "-sample window");
    EpochSet set;
    set.sources.push_back(std::make_shared<const Tensor>(preprocess(rec, opt)));

    // prefix sums for O(1) any-positive window queries
    std::vector<int> prefix(rec.length() + 1, 0);
    for (std::size_t i = 0; i < rec.length(); ++i) prefix[i + 1] = prefix[i] + rec.annotation[i];

    const int last_start = static_cast<int>(rec.length()) - kWindowSamples;
    for (int start = 0; start <= last_start; start += kWindowStride) {
        const int pos = prefix[static_cast<std::size_t>(start + kWindowSamples)] - prefix[static_cast<std::size_t>(start)];
        set.items.push_back({0, start, pos > 0 ? 1 : 0, rec.patient_id});
    }
    return set;
}

}  // namespace fusenet
