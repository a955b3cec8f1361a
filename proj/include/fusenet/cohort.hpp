#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/sigproc.hpp"

/// Synthetic sleep-apnea cohort: a seeded generator producing four-channel
/// patient records with ground-truth event annotations, CSV + manifest
/// persistence, and sequential group/split assignment.
namespace fusenet {

inline constexpr int kCohortSchemaVersion = 1;

// ----------------------------------------------------------------- config

/// Knobs for the synthetic cohort. Respiratory effort is a pair of
/// correlated drifting sinusoids; apnea events attenuate both belts and
/// trigger a delayed oxygen desaturation plus a heart-rate dip/overshoot.
/// Confounders are brief unannotated belt dips (movement, shallow
/// breathing) so that belt amplitude alone does not give the label away.
struct SynthConfig {
    int patients = 35;
    double duration_s = 600.0;  // whole seconds per patient
    std::uint64_t seed = 1;

    double resp_freq_lo_hz = 0.20;
    double resp_freq_hi_hz = 0.35;

    double events_per_hour = 12.0;
    double event_min_s = 10.0;
    double event_max_s = 60.0;
    double event_attenuation = 0.1;  // belt amplitude multiplier inside events

    double desat_min = 5.0;  // SaO2 drop in saturation points
    double desat_max = 15.0;
    double desat_delay_min_s = 10.0;  // onset lag after event start
    double desat_delay_max_s = 20.0;

    double hr_excursion_bpm = 10.0;  // dip depth / overshoot height scale

    double confounders_per_hour = 12.0;
    double confounder_attenuation = 0.2;

    double noise_std = 0.2;  // belt additive noise (vitals use scaled copies)

    void validate() const {
        if (patients < 1) throw value_error("synth config: patients must be at least 1");
        if (duration_s < 120.0) throw value_error("synth config: duration must be at least 120 s");
        if (duration_s != std::floor(duration_s))
            throw value_error("synth config: duration must be a whole number of seconds");
        if (!(resp_freq_lo_hz > 0.0) || !(resp_freq_hi_hz > resp_freq_lo_hz))
            throw value_error("synth config: respiration frequency range must be positive and ordered");
        if (events_per_hour < 0.0) throw value_error("synth config: event rate must be non-negative");
        if (!(event_min_s > 0.0) || !(event_max_s >= event_min_s))
            throw value_error("synth config: event duration range must be positive and ordered");
        if (!(event_attenuation > 0.0) || event_attenuation > 1.0)
            throw value_error("synth config: event attenuation must be in (0, 1]");
        if (desat_min < 0.0 || desat_max < desat_min)
            throw value_error("synth config: desaturation range must be non-negative and ordered");
        if (desat_delay_min_s < 0.0 || desat_delay_max_s < desat_delay_min_s)
            throw value_error("synth config: desaturation delay range must be non-negative and ordered");
        if (hr_excursion_bpm < 0.0) throw value_error("synth config: heart-rate excursion must be non-negative");
        if (confounders_per_hour < 0.0) throw value_error("synth config: confounder rate must be non-negative");
        if (!(confounder_attenuation > 0.0) || confounder_attenuation > 1.0)
            throw value_error("synth config: confounder attenuation must be in (0, 1]");
        if (noise_std < 0.0) throw value_error("synth config: noise std must be non-negative");
    }
};

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
    return {{"patients", c.patients},
            {"duration_s", c.duration_s},
            {"seed", c.seed},
            {"resp_freq_lo_hz", c.resp_freq_lo_hz},
            {"resp_freq_hi_hz", c.resp_freq_hi_hz},
            {"events_per_hour", c.events_per_hour},
            {"event_min_s", c.event_min_s},
            {"event_max_s", c.event_max_s},
            {"event_attenuation", c.event_attenuation},
            {"desat_min", c.desat_min},
            {"desat_max", c.desat_max},
            {"desat_delay_min_s", c.desat_delay_min_s},
            {"desat_delay_max_s", c.desat_delay_max_s},
            {"hr_excursion_bpm", c.hr_excursion_bpm},
            {"confounders_per_hour", c.confounders_per_hour},
            {"confounder_attenuation", c.confounder_attenuation},
            {"noise_std", c.noise_std}};
}

/// Read a generator config; absent keys keep their defaults, unknown keys
/// are rejected (they are almost always typos).
inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> kKeys = {
        "patients",        "duration_s",      "seed",
        "resp_freq_lo_hz", "resp_freq_hi_hz", "events_per_hour",
        "event_min_s",     "event_max_s",     "event_attenuation",
        "desat_min",       "desat_max",       "desat_delay_min_s",
        "desat_delay_max_s", "hr_excursion_bpm", "confounders_per_hour",
        "confounder_attenuation", "noise_std"};
    if (!j.is_object()) throw parse_error("synth config json: expected an object");
    for (const auto& item : j.items())
        if (std::find(kKeys.begin(), kKeys.end(), item.key()) == kKeys.end())
            throw parse_error("synth config json: unknown key '" + item.key() + "'");
    SynthConfig c;
    try {
        c.patients = j.value("patients", c.patients);
        c.duration_s = j.value("duration_s", c.duration_s);
        c.seed = j.value("seed", c.seed);
        c.resp_freq_lo_hz = j.value("resp_freq_lo_hz", c.resp_freq_lo_hz);
        c.resp_freq_hi_hz = j.value("resp_freq_hi_hz", c.resp_freq_hi_hz);
        c.events_per_hour = j.value("events_per_hour", c.events_per_hour);
        c.event_min_s = j.value("event_min_s", c.event_min_s);
        c.event_max_s = j.value("event_max_s", c.event_max_s);
        c.event_attenuation = j.value("event_attenuation", c.event_attenuation);
        c.desat_min = j.value("desat_min", c.desat_min);
        c.desat_max = j.value("desat_max", c.desat_max);
        c.desat_delay_min_s = j.value("desat_delay_min_s", c.desat_delay_min_s);
        c.desat_delay_max_s = j.value("desat_delay_max_s", c.desat_delay_max_s);
        c.hr_excursion_bpm = j.value("hr_excursion_bpm", c.hr_excursion_bpm);
        c.confounders_per_hour = j.value("confounders_per_hour", c.confounders_per_hour);
        c.confounder_attenuation = j.value("confounder_attenuation", c.confounder_attenuation);
        c.noise_std = j.value("noise_std", c.noise_std);
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("synth config json: " + std::string(e.what()));
    }
    return c;
}

// -------------------------------------------------------------- generator

/// One injected apnea episode, in seconds from record start.
struct EventInterval {
    double start_s = 0.0;
    double end_s = 0.0;
};

namespace detail {

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

/// Linear edge ramp: 0 outside [start, end], 1 in the interior, with
/// `ramp_s`-long transitions just inside each edge.
inline double interval_step(double t, double start, double end, double ramp_s) {
    if (t <= start || t >= end) return 0.0;
    return clamp01(std::min((t - start) / ramp_s, (end - t) / ramp_s));
}

/// Draw event intervals: durations uniform in the configured range, starts
/// placed by distributing the free time uniformly while keeping a minimum
/// spacing between consecutive events.
inline std::vector<EventInterval> plan_events(const SynthConfig& cfg, RngStream& rng) {
    constexpr double kMinGapS = 15.0;
    const auto n = static_cast<int>(std::llround(cfg.events_per_hour * cfg.duration_s / 3600.0));
    if (n <= 0) return {};
    std::vector<double> durations(static_cast<std::size_t>(n));
    double occupied = 0.0;
    for (double& d : durations) {
        d = rng.uniform(cfg.event_min_s, cfg.event_max_s);
        occupied += d;
    }
    const double need = occupied + kMinGapS * n;
    if (need > cfg.duration_s)
        throw value_error("event packing: " + std::to_string(n) + " events need " + std::to_string(need) +
                          " s (durations plus spacing) but the record is only " +
                          std::to_string(cfg.duration_s) + " s");
    std::vector<double> slack(static_cast<std::size_t>(n));
    for (double& u : slack) u = rng.uniform(0.0, cfg.duration_s - need);
    std::sort(slack.begin(), slack.end());
    std::vector<EventInterval> events(static_cast<std::size_t>(n));
    double cursor = 0.0;
    for (int i = 0; i < n; ++i) {
        const double start = slack[static_cast<std::size_t>(i)] + kMinGapS * (i + 1) + cursor;
        events[static_cast<std::size_t>(i)] = {start, start + durations[static_cast<std::size_t>(i)]};
        cursor += durations[static_cast<std::size_t>(i)];
    }
    return events;
}

/// Unannotated belt dips, dropped when they come too close to a real event.
inline std::vector<EventInterval> plan_confounders(const SynthConfig& cfg, RngStream& rng,
                                                   const std::vector<EventInterval>& events) {
    const auto n = static_cast<int>(std::llround(cfg.confounders_per_hour * cfg.duration_s / 3600.0));
    std::vector<EventInterval> out;
    for (int i = 0; i < n; ++i) {
        const double dur = rng.uniform(5.0, 25.0);
        const double start = rng.uniform(0.0, cfg.duration_s - dur);
        const double end = start + dur;
        bool clear = true;
        for (const EventInterval& ev : events)
            if (start < ev.end_s + 5.0 && end > ev.start_s - 5.0) {
                clear = false;
                break;
            }
        if (clear) out.push_back({start, end});
    }
    return out;
}

inline std::string patient_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%03d", index);
    return buf;
}

}  // namespace detail

/// Generate one patient. Belts are synthesized at 10 Hz and vitals at 1 Hz,
/// then everything is resampled onto the 5 Hz grid; the annotation is laid
/// down directly on that grid from the exact event intervals.
inline PatientRecord synthesize_patient(const SynthConfig& cfg, const std::string& id,
                                        std::vector<EventInterval>* events_out = nullptr) {
    RngStream patient_rng(derive_seed(cfg.seed, "cohort/" + id));
    RngStream trait_rng = patient_rng.substream("traits");
    RngStream event_rng = patient_rng.substream("events");
    RngStream resp_rng = patient_rng.substream("respiration");
    RngStream cardio_rng = patient_rng.substream("cardio");
    RngStream ox_rng = patient_rng.substream("oximetry");
    RngStream conf_rng = patient_rng.substream("confounders");

    const double hr_base = trait_rng.uniform(62.0, 78.0);
    const double sao2_base = trait_rng.uniform(95.0, 98.0);
    const double thor_ratio = trait_rng.uniform(0.75, 0.95);
    const double phase_lag = trait_rng.uniform(0.2, 0.5);
    const double amp_base = trait_rng.uniform(0.9, 1.1);

    const std::vector<EventInterval> events = detail::plan_events(cfg, event_rng);
    const std::vector<EventInterval> confounders = detail::plan_confounders(cfg, conf_rng, events);
    struct Desat {
        double depth, delay;
    };
    std::vector<Desat> desats;
    desats.reserve(events.size());
    for (std::size_t i = 0; i < events.size(); ++i)
        desats.push_back({ox_rng.uniform(cfg.desat_min, cfg.desat_max),
                          ox_rng.uniform(cfg.desat_delay_min_s, cfg.desat_delay_max_s)});

    // Combined belt amplitude envelope: annotated events crush the signal,
    // confounders only sag it.
    const auto envelope = [&](double t) {
        double env = 1.0;
        for (const EventInterval& ev : events)
            env *= 1.0 - (1.0 - cfg.event_attenuation) * detail::interval_step(t, ev.start_s, ev.end_s, 2.0);
        for (const EventInterval& cf : confounders)
            env *= 1.0 - (1.0 - cfg.confounder_attenuation) * detail::interval_step(t, cf.start_s, cf.end_s, 2.0);
        return env;
    };

    const auto duration = static_cast<long>(cfg.duration_s);

    // Respiratory belts at 10 Hz: one shared oscillator with drifting
    // frequency and amplitude, the thorax copy scaled and phase-lagged.
    constexpr double kBeltRate = 10.0;
    const std::size_t n_belt = static_cast<std::size_t>(duration) * 10 + 1;
    RawChannel abdo{"abdores", std::vector<double>(n_belt), std::vector<std::uint8_t>(n_belt, 0), kBeltRate};
    RawChannel thor{"thorres", std::vector<double>(n_belt), std::vector<std::uint8_t>(n_belt, 0), kBeltRate};
    double freq = resp_rng.uniform(cfg.resp_freq_lo_hz, cfg.resp_freq_hi_hz);
    double amp = amp_base;
    double phase = resp_rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t i = 0; i < n_belt; ++i) {
        const double t = static_cast<double>(i) / kBeltRate;
        freq = std::clamp(freq + resp_rng.normal(0.0, 0.002), cfg.resp_freq_lo_hz, cfg.resp_freq_hi_hz);
        amp = std::clamp(amp + resp_rng.normal(0.0, 0.004), 0.7 * amp_base, 1.3 * amp_base);
        phase += 2.0 * M_PI * freq / kBeltRate;
        const double env = envelope(t);
        abdo.samples[i] = amp * env * std::sin(phase) + resp_rng.normal(0.0, cfg.noise_std);
        thor.samples[i] = thor_ratio * amp * env * std::sin(phase - phase_lag) + resp_rng.normal(0.0, cfg.noise_std);
    }

    // Vitals at 1 Hz. Heart rate dips during an event and overshoots after
    // it; SaO2 ramps down after its onset delay and recovers once airflow
    // returns.
    const std::size_t n_vital = static_cast<std::size_t>(duration) + 1;
    RawChannel hr{"hr", std::vector<double>(n_vital), std::vector<std::uint8_t>(n_vital, 0), 1.0};
    RawChannel sao2{"sao2", std::vector<double>(n_vital), std::vector<std::uint8_t>(n_vital, 0), 1.0};
    for (std::size_t i = 0; i < n_vital; ++i) {
        const double t = static_cast<double>(i);
        double hr_delta = 0.0;
        double sao2_delta = 0.0;
        for (std::size_t k = 0; k < events.size(); ++k) {
            const EventInterval& ev = events[k];
            if (t >= ev.start_s && t < ev.end_s)
                hr_delta -= 0.5 * cfg.hr_excursion_bpm * detail::clamp01((t - ev.start_s) / 5.0);
            else if (t >= ev.end_s)
                hr_delta += cfg.hr_excursion_bpm * detail::clamp01((t - ev.end_s) / 2.0) *
                            std::exp(-(t - ev.end_s) / 10.0);
            const double fall_at = ev.start_s + desats[k].delay;
            const double rise_at = ev.end_s + desats[k].delay;
            if (t >= fall_at && t < rise_at)
                sao2_delta -= desats[k].depth * detail::clamp01((t - fall_at) / 8.0);
            else if (t >= rise_at)
                sao2_delta -= desats[k].depth * detail::clamp01(1.0 - (t - rise_at) / 12.0);
        }
        hr.samples[i] = hr_base + 1.5 * std::sin(2.0 * M_PI * t / 60.0) + cardio_rng.normal(0.0, 0.8) + hr_delta;
        sao2.samples[i] = std::clamp(sao2_base + ox_rng.normal(0.0, 0.15) + sao2_delta, 55.0, 100.0);
    }

    PatientRecord rec;
    rec.patient_id = id;
    rec.channels = {resample_5hz(abdo), resample_5hz(thor), resample_5hz(hr), resample_5hz(sao2)};
    const std::size_t n5 = rec.channels[0].samples.size();
    rec.annotation.assign(n5, 0);
    for (const EventInterval& ev : events) {
        const auto first = static_cast<long>(std::ceil(ev.start_s * kTargetRateHz));
        const auto last = static_cast<long>(std::ceil(ev.end_s * kTargetRateHz)) - 1;
        for (long i = std::max(first, 0L); i <= last && i < static_cast<long>(n5); ++i)
            rec.annotation[static_cast<std::size_t>(i)] = 1;
    }
    rec.validate();
    if (events_out != nullptr) *events_out = events;
    return rec;
}

/// Generate the whole cohort; per-patient seeding makes the records
/// independent of generation order.
inline std::vector<PatientRecord> generate_synthetic(const SynthConfig& cfg,
                                                     std::vector<std::vector<EventInterval>>* events_out = nullptr) {
    cfg.validate();
    std::vector<PatientRecord> records;
    records.reserve(static_cast<std::size_t>(cfg.patients));
    if (events_out != nullptr) events_out->assign(static_cast<std::size_t>(cfg.patients), {});
    for (int p = 0; p < cfg.patients; ++p) {
        std::vector<EventInterval> events;
        records.push_back(synthesize_patient(cfg, detail::patient_name(p), &events));
        if (events_out != nullptr) (*events_out)[static_cast<std::size_t>(p)] = std::move(events);
    }
    return records;
}

// ------------------------------------------------------------ persistence

inline constexpr const char* kCsvHeader = "t,abdores,thorres,hr,sao2,annot";

namespace detail {

inline std::string fmt_f64(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(pos));
            return fields;
        }
        fields.push_back(line.substr(pos, comma - pos));
        pos = comma + 1;
    }
}

inline double parse_f64(const std::string& text, const std::string& file, std::size_t line_no) {
    const char* begin = text.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw parse_error(file + " line " + std::to_string(line_no) + ": '" + text + "' is not a number");
    return v;
}

}  // namespace detail

/// Write one CSV per patient plus `manifest.json` into `dir`. Pass the
/// generator config to embed it (and its seed) in the manifest.
inline void save_records(const std::vector<PatientRecord>& records, const std::string& dir,
                         const SynthConfig* config = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io_error("cannot create cohort directory '" + dir + "': " + ec.message());

    nlohmann::json patients = nlohmann::json::array();
    for (const PatientRecord& rec : records) {
        rec.validate();
        const std::string file = rec.patient_id + ".csv";
        const fs::path path = fs::path(dir) / file;
        std::ofstream os(path);
        if (!os) throw io_error("cannot open '" + path.string() + "' for writing");
        os << kCsvHeader << '\n';
        for (std::size_t i = 0; i < rec.length(); ++i) {
            os << detail::fmt_f64(static_cast<double>(i) / kTargetRateHz);
            for (const RawChannel& ch : rec.channels) os << ',' << detail::fmt_f64(ch.samples[i]);
            os << ',' << static_cast<int>(rec.annotation[i]) << '\n';
        }
        if (!os) throw io_error("short write on '" + path.string() + "'");
        patients.push_back({{"id", rec.patient_id}, {"file", file}, {"samples", rec.length()}});
    }

    nlohmann::json manifest = {{"schema_version", kCohortSchemaVersion},
                               {"sample_rate_hz", kTargetRateHz},
                               {"patients", patients},
                               {"seed", nullptr},
                               {"synth_config", nullptr}};
    if (config != nullptr) {
        manifest["seed"] = config->seed;
        manifest["synth_config"] = synth_config_to_json(*config);
    }
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ofstream os(mpath);
    if (!os) throw io_error("cannot open '" + mpath.string() + "' for writing");
    os << manifest.dump(2) << '\n';
    if (!os) throw io_error("short write on '" + mpath.string() + "'");
}

/// Load a cohort directory (or an explicit manifest path). Records stored at
/// a rate other than 5 Hz are resampled onto the 5 Hz grid.
inline std::vector<PatientRecord> load_records(const std::string& path) {
    namespace fs = std::filesystem;
    fs::path mpath(path);
    if (fs::is_directory(mpath)) mpath /= "manifest.json";
    std::ifstream is(mpath);
    if (!is) throw io_error("cannot open cohort manifest '" + mpath.string() + "'");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("cohort manifest '" + mpath.string() + "' is not valid json: " + std::string(e.what()));
    }

    double rate = 0.0;
    std::vector<std::pair<std::string, std::string>> listed;  // id, file
    std::vector<std::size_t> expected_samples;
    try {
        if (manifest.at("schema_version").get<int>() != kCohortSchemaVersion)
            throw parse_error("cohort manifest '" + mpath.string() + "': unsupported schema version");
        rate = manifest.at("sample_rate_hz").get<double>();
        for (const auto& entry : manifest.at("patients")) {
            listed.emplace_back(entry.at("id").get<std::string>(), entry.at("file").get<std::string>());
            expected_samples.push_back(entry.at("samples").get<std::size_t>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("cohort manifest '" + mpath.string() + "': " + std::string(e.what()));
    }
    if (rate <= 0.0) throw parse_error("cohort manifest '" + mpath.string() + "': sample rate must be positive");

    const std::vector<std::string> kColumns = {"t", "abdores", "thorres", "hr", "sao2", "annot"};
    std::vector<PatientRecord> records;
    records.reserve(listed.size());
    for (std::size_t p = 0; p < listed.size(); ++p) {
        const std::string& file = listed[p].second;
        const fs::path cpath = mpath.parent_path() / file;
        std::ifstream cs(cpath);
        if (!cs) throw io_error("cannot open patient file '" + cpath.string() + "'");

        std::string line;
        if (!std::getline(cs, line)) throw parse_error(file + " line 1: empty file");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::vector<std::string> header = detail::split_csv(line);
        std::vector<int> col_of(kColumns.size(), -1);
        for (std::size_t c = 0; c < header.size(); ++c) {
            const auto it = std::find(kColumns.begin(), kColumns.end(), header[c]);
            if (it == kColumns.end())
                throw parse_error(file + " line 1: unexpected column '" + header[c] + "'");
            col_of[static_cast<std::size_t>(it - kColumns.begin())] = static_cast<int>(c);
        }
        for (std::size_t c = 0; c < kColumns.size(); ++c)
            if (col_of[c] < 0) throw parse_error(file + " line 1: missing column '" + kColumns[c] + "'");

        PatientRecord rec;
        rec.patient_id = listed[p].first;
        rec.channels.resize(4);
        for (std::size_t c = 0; c < 4; ++c) {
            rec.channels[c].name = kColumns[c + 1];
            rec.channels[c].rate_hz = rate;
        }
        std::size_t line_no = 1;
        while (std::getline(cs, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const std::vector<std::string> fields = detail::split_csv(line);
            if (fields.size() != kColumns.size())
                throw parse_error(file + " line " + std::to_string(line_no) + ": expected " +
                                  std::to_string(kColumns.size()) + " fields, got " +
                                  std::to_string(fields.size()));
            for (std::size_t c = 0; c < 4; ++c) {
                const std::string& cell = fields[static_cast<std::size_t>(col_of[c + 1])];
                rec.channels[c].samples.push_back(detail::parse_f64(cell, file, line_no));
                rec.channels[c].missing.push_back(0);
            }
            const std::string& annot = fields[static_cast<std::size_t>(col_of[5])];
            if (annot == "0")
                rec.annotation.push_back(0);
            else if (annot == "1")
                rec.annotation.push_back(1);
            else
                throw parse_error(file + " line " + std::to_string(line_no) + ": annotation must be 0 or 1, got '" +
                                  annot + "'");
        }
        if (rec.length() != expected_samples[p])
            throw io_error("cohort integrity: '" + file + "' has " + std::to_string(rec.length()) +
                           " rows but the manifest declares " + std::to_string(expected_samples[p]));

        if (rate != kTargetRateHz) {
            for (RawChannel& ch : rec.channels) ch = resample_5hz(ch);
            rec.annotation = resample_binary(rec.annotation, rate, kTargetRateHz);
        }
        rec.validate();
        records.push_back(std::move(rec));
    }
    return records;
}

// ------------------------------------------------------------------ groups

/// One experiment group: disjoint train/validation/test patient indices into
/// the cohort record list, assigned sequentially.
struct Group {
    int id = 0;
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

struct SplitFractions {
    double train = 0.3;
    double val = 0.2;
    double test = 0.5;
};

struct SplitCounts {
    int train = 0;
    int val = 0;
    int test = 0;
};

namespace detail {

inline std::vector<Group> assign_groups(std::size_t n_records, int n_groups, int per_group, int n_train,
                                        int n_val) {
    if (n_train < 1 || n_val < 1 || per_group - n_train - n_val < 1)
        throw value_error("group split: every split needs at least one patient (got " + std::to_string(n_train) +
                          "/" + std::to_string(n_val) + "/" + std::to_string(per_group - n_train - n_val) + ")");
    if (static_cast<std::size_t>(n_groups) * static_cast<std::size_t>(per_group) > n_records)
        throw value_error("group split: " + std::to_string(n_groups) + " groups of " + std::to_string(per_group) +
                          " patients need more than the " + std::to_string(n_records) + " available");
    std::vector<Group> groups(static_cast<std::size_t>(n_groups));
    int next = 0;
    for (int g = 0; g < n_groups; ++g) {
        Group& grp = groups[static_cast<std::size_t>(g)];
        grp.id = g;
        for (int i = 0; i < per_group; ++i, ++next) {
            if (i < n_train)
                grp.train.push_back(next);
            else if (i < n_train + n_val)
                grp.val.push_back(next);
            else
                grp.test.push_back(next);
        }
    }
    return groups;
}

}  // namespace detail

/// Sequentially partition the cohort into `n_groups` equal groups and split
/// each one by the given fractions: train and validation sizes are floored,
/// the remainder goes to test.
inline std::vector<Group> make_groups(const std::vector<PatientRecord>& records, int n_groups,
                                      const SplitFractions& fracs = {}) {
    if (n_groups < 1) throw value_error("group split: need at least one group");
    if (!(fracs.train > 0.0) || !(fracs.val > 0.0) || !(fracs.test > 0.0) ||
        std::fabs(fracs.train + fracs.val + fracs.test - 1.0) > 1e-9)
        throw value_error("group split: fractions must be positive and sum to 1");
    const int per_group = static_cast<int>(records.size()) / n_groups;
    if (per_group < 3)
        throw value_error("group split: " + std::to_string(records.size()) + " patients cannot fill " +
                          std::to_string(n_groups) + " groups of at least 3");
    const int n_train = static_cast<int>(std::floor(per_group * fracs.train));
    const int n_val = static_cast<int>(std::floor(per_group * fracs.val));
    return detail::assign_groups(records.size(), n_groups, per_group, n_train, n_val);
}

/// Same sequential assignment with exact per-group split sizes.
inline std::vector<Group> make_groups(const std::vector<PatientRecord>& records, int n_groups,
                                      const SplitCounts& counts) {
    if (n_groups < 1) throw value_error("group split: need at least one group");
    const int per_group = counts.train + counts.val + counts.test;
    return detail::assign_groups(records.size(), n_groups, per_group, counts.train, counts.val);
}

}  // namespace fusenet
