#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fusenet/cohort.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/metrics.hpp"
#include "fusenet/model.hpp"
#include "fusenet/rng.hpp"
#include "fusenet/sigproc.hpp"
#include "fusenet/stats.hpp"
#include "fusenet/trainer.hpp"

/// Experiment orchestration: enumerating model configurations, running the
/// (configuration x run) sweep resumably, and building report tables from
/// the artifacts on disk.
namespace fusenet {

// ---------------------------------------------------------- configurations

/// One trainable model configuration: a base kind plus a fusion topology
/// (SIM configurations additionally name their single input channel).
struct Configuration {
    BaseKind base = BaseKind::CNN;
    TopologyKind kind = TopologyKind::SIM;
    std::string channel;  // SIM only

    std::string id() const {
        std::string s = base == BaseKind::CNN ? "cnn" : "lstm";
        switch (kind) {
            case TopologyKind::SIM: return s + "-sim-" + channel;
            case TopologyKind::MIM: return s + "-mim";
            case TopologyKind::BFM: return s + "-bfm";
            case TopologyKind::BFM_SC: return s + "-bfm_sc";
        }
        throw value_error("configuration: unknown topology kind");
    }

    Topology topology() const {
        if (kind == TopologyKind::SIM) return Topology(kind, {channel});
        return Topology(kind, default_channels());
    }

    /// Column indices of this configuration's channels in the preprocessed
    /// [time x 4] layout.
    std::vector<int> channel_indices() const {
        const std::vector<std::string>& all = default_channels();
        std::vector<int> idx;
        for (const std::string& name : topology().channels) {
            const auto it = std::find(all.begin(), all.end(), name);
            if (it == all.end()) throw value_error("configuration: unknown channel '" + name + "'");
            idx.push_back(static_cast<int>(it - all.begin()));
        }
        return idx;
    }
};

// ------------------------------------------------------------------- plan

/// The sweep definition: which configurations to run, how many patient
/// groups, how many extra repeats of group 0, and the shared training
/// settings. The default desk-scale plan runs every configuration 5 times
/// (3 groups + 2 repeats); the full-scale plan runs 9 (5 groups + 4).
struct ExperimentPlan {
    std::uint64_t seed = 1;
    int groups = 3;
    int extra_repeats = 2;
    std::vector<BaseKind> bases = {BaseKind::CNN, BaseKind::LSTM};
    std::vector<TopologyKind> topologies = {TopologyKind::SIM, TopologyKind::MIM, TopologyKind::BFM,
                                            TopologyKind::BFM_SC};
    std::vector<std::string> sim_channels = default_channels();
    std::string arch_profile = "desk";  // desk | reference | tiny
    std::optional<SplitCounts> split_counts;  // default: 0.3/0.2/0.5 fractions
    TrainConfig train;

    int runs_per_config() const { return groups + extra_repeats; }

    ArchParams arch() const {
        if (arch_profile == "desk") return ArchParams::desk();
        if (arch_profile == "reference") return ArchParams::reference();
        if (arch_profile == "tiny") return ArchParams::tiny();
        throw value_error("plan: unknown arch profile '" + arch_profile + "'");
    }

    void validate() const {
        if (groups < 1) throw value_error("plan: need at least one group");
        if (extra_repeats < 0) throw value_error("plan: extra repeats must be non-negative");
        if (bases.empty()) throw value_error("plan: no base kinds selected");
        if (topologies.empty()) throw value_error("plan: no topologies selected");
        const bool sim = std::find(topologies.begin(), topologies.end(), TopologyKind::SIM) != topologies.end();
        if (sim && sim_channels.empty()) throw value_error("plan: SIM selected but no channels listed");
        for (const std::string& ch : sim_channels) {
            const auto& all = default_channels();
            if (std::find(all.begin(), all.end(), ch) == all.end())
                throw value_error("plan: unknown SIM channel '" + ch + "'");
        }
        arch();  // validates the profile name
        train.validate();
    }

    static ExperimentPlan desk_default() { return ExperimentPlan{}; }

    static ExperimentPlan full_scale() {
        ExperimentPlan p;
        p.groups = 5;
        p.extra_repeats = 4;
        p.arch_profile = "reference";
        return p;
    }
};

inline nlohmann::json plan_to_json(const ExperimentPlan& p) {
    nlohmann::json bases = nlohmann::json::array();
    for (BaseKind b : p.bases) bases.push_back(b == BaseKind::CNN ? "CNN" : "LSTM");
    nlohmann::json topologies = nlohmann::json::array();
    for (TopologyKind t : p.topologies) topologies.push_back(to_string(t));
    nlohmann::json j = {{"seed", p.seed},
                        {"groups", p.groups},
                        {"extra_repeats", p.extra_repeats},
                        {"bases", bases},
                        {"topologies", topologies},
                        {"sim_channels", p.sim_channels},
                        {"arch", p.arch_profile},
                        {"train",
                         {{"learning_rate", p.train.learning_rate},
                          {"max_epochs", p.train.max_epochs},
                          {"grad_clip", p.train.grad_clip},
                          {"clip_by_norm", p.train.clip_by_norm},
                          {"batch_size", p.train.batch_size},
                          {"patience", p.train.patience},
                          {"lambda_fusion", p.train.lambda_fusion},
                          {"lambda_shortcut", p.train.lambda_shortcut}}}};
    if (p.split_counts)
        j["split_counts"] = {{"train", p.split_counts->train},
                             {"val", p.split_counts->val},
                             {"test", p.split_counts->test}};
    return j;
}

/// Read a plan; absent keys keep the desk-scale defaults, unknown keys are
/// rejected.
inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
    static const std::set<std::string> kKeys = {"seed",         "groups", "extra_repeats", "bases",
                                               "topologies",   "sim_channels", "arch",    "split_counts",
                                               "train"};
    static const std::set<std::string> kTrainKeys = {"learning_rate", "max_epochs",    "grad_clip",
                                                     "clip_by_norm",  "batch_size",    "patience",
                                                     "lambda_fusion", "lambda_shortcut"};
    if (!j.is_object()) throw parse_error("plan json: expected an object");
    for (const auto& item : j.items())
        if (kKeys.find(item.key()) == kKeys.end())
            throw parse_error("plan json: unknown key '" + item.key() + "'");

    ExperimentPlan p;
    try {
        p.seed = j.value("seed", p.seed);
        p.groups = j.value("groups", p.groups);
        p.extra_repeats = j.value("extra_repeats", p.extra_repeats);
        if (j.contains("bases")) {
            p.bases.clear();
            for (const auto& b : j.at("bases")) p.bases.push_back(base_kind_from_string(b.get<std::string>()));
        }
        if (j.contains("topologies")) {
            p.topologies.clear();
            for (const auto& t : j.at("topologies"))
                p.topologies.push_back(topology_from_string(t.get<std::string>()));
        }
        if (j.contains("sim_channels")) p.sim_channels = j.at("sim_channels").get<std::vector<std::string>>();
        p.arch_profile = j.value("arch", p.arch_profile);
        if (j.contains("split_counts")) {
            const auto& s = j.at("split_counts");
            p.split_counts = SplitCounts{s.at("train").get<int>(), s.at("val").get<int>(),
                                         s.at("test").get<int>()};
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            for (const auto& item : t.items())
                if (kTrainKeys.find(item.key()) == kTrainKeys.end())
                    throw parse_error("plan json: unknown train key '" + item.key() + "'");
            p.train.learning_rate = t.value("learning_rate", p.train.learning_rate);
            p.train.max_epochs = t.value("max_epochs", p.train.max_epochs);
            p.train.grad_clip = t.value("grad_clip", p.train.grad_clip);
            p.train.clip_by_norm = t.value("clip_by_norm", p.train.clip_by_norm);
            p.train.batch_size = t.value("batch_size", p.train.batch_size);
            p.train.patience = t.value("patience", p.train.patience);
            p.train.lambda_fusion = t.value("lambda_fusion", p.train.lambda_fusion);
            p.train.lambda_shortcut = t.value("lambda_shortcut", p.train.lambda_shortcut);
        }
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("plan json: " + std::string(e.what()));
    }
    return p;
}

/// All enabled configurations in stable order: per base, the SIM variants in
/// channel order, then MIM, BFM, BFM-SC. The full default grid has 14.
inline std::vector<Configuration> expand_configurations(const ExperimentPlan& plan) {
    std::vector<Configuration> out;
    for (BaseKind base : plan.bases) {
        for (TopologyKind kind : {TopologyKind::SIM, TopologyKind::MIM, TopologyKind::BFM, TopologyKind::BFM_SC}) {
            if (std::find(plan.topologies.begin(), plan.topologies.end(), kind) == plan.topologies.end())
                continue;
            if (kind == TopologyKind::SIM) {
                for (const std::string& ch : plan.sim_channels) out.push_back({base, kind, ch});
            } else {
                out.push_back({base, kind, ""});
            }
        }
    }
    return out;
}

// ------------------------------------------------------------------ cells

/// Stable per-cell seed: hash-chained from the plan seed through the
/// configuration id and run index, so adding or removing configurations
/// never shifts another cell's stream.
inline std::uint64_t cell_seed(std::uint64_t plan_seed, const std::string& config_id, int run_index) {
    return derive_seed(derive_seed(plan_seed, config_id), "run" + std::to_string(run_index));
}

/// One sweep cell: a configuration trained once. Runs 0..groups-1 land on
/// their own group; the extra repeats all land on group 0.
struct RunCell {
    Configuration config;
    int run_index = 0;
    int group = 0;
    std::uint64_t seed = 0;

    std::string rel_dir() const { return "results/" + config.id() + "/run" + std::to_string(run_index); }
};

inline std::vector<RunCell> plan_cells(const ExperimentPlan& plan) {
    plan.validate();
    std::vector<RunCell> cells;
    for (const Configuration& cfg : expand_configurations(plan)) {
        for (int run = 0; run < plan.runs_per_config(); ++run) {
            RunCell cell;
            cell.config = cfg;
            cell.run_index = run;
            cell.group = run < plan.groups ? run : 0;
            cell.seed = cell_seed(plan.seed, cfg.id(), run);
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

// ------------------------------------------------------------- group data

/// Preprocessed epochs for one patient group, all four channels.
struct GroupData {
    EpochSet train;
    EpochSet val;
    EpochSet test;
};

inline EpochSet build_split_epochs(const std::vector<PatientRecord>& records, const std::vector<int>& indices,
                                   const PreprocessOptions& opt = {}) {
    EpochSet out;
    for (int idx : indices) out.append(make_epochs(records.at(static_cast<std::size_t>(idx)), opt));
    return out;
}

inline GroupData build_group_data(const std::vector<PatientRecord>& records, const Group& group,
                                  const PreprocessOptions& opt = {}) {
    return {build_split_epochs(records, group.train, opt), build_split_epochs(records, group.val, opt),
            build_split_epochs(records, group.test, opt)};
}

// -------------------------------------------------------- cell execution

inline constexpr const char* kRunRecordFile = "run_record.json";
inline constexpr const char* kEvalFile = "eval.json";
inline constexpr const char* kPrCurveFile = "pr_curve.csv";
inline constexpr const char* kErrorFile = "error.txt";
inline constexpr const char* kPlanFile = "plan.json";

inline bool cell_complete(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / kRunRecordFile) && std::filesystem::exists(dir / kEvalFile);
}

inline nlohmann::json eval_to_json(const EvalReport& ev, const RunCell& cell) {
    return {{"config", cell.config.id()},
            {"base", cell.config.base == BaseKind::CNN ? "CNN" : "LSTM"},
            {"topology", to_string(cell.config.kind)},
            {"channels", cell.config.topology().channels},
            {"run", cell.run_index},
            {"group", cell.group},
            {"seed", cell.seed},
            {"fusion_aupr", ev.fusion_aupr},
            {"shortcut_auprs", ev.shortcut_auprs},
            {"baseline", ev.baseline},
            {"prevalence", ev.prevalence},
            {"windows", ev.windows},
            {"positives", ev.positives}};
}

namespace detail {

/// Write-then-rename so an interrupted run never leaves a half-written file
/// that would fool the resume check.
inline void write_atomic(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw io_error("cannot open '" + tmp.string() + "' for writing");
        os << text;
        if (!os) throw io_error("short write on '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Train and evaluate one cell, writing run_record.json, eval.json, and the
/// fusion-head PR curve into `dir`.
inline void execute_cell(const RunCell& cell, const GroupData& data, const ExperimentPlan& plan,
                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    const std::vector<int> cols = cell.config.channel_indices();
    const EpochSet train_set = data.train.select_channels(cols);
    const EpochSet val_set = data.val.select_channels(cols);
    const EpochSet test_set = data.test.select_channels(cols);

    ModelGraph model = assemble(cell.config.topology(), cell.config.base, plan.arch(),
                                derive_seed(cell.seed, "init"));
    TrainConfig cfg = plan.train;
    cfg.seed = cell.seed;
    const RunRecord record = train(model, train_set, val_set, cfg);
    const EvalReport ev = evaluate(model, test_set);

    const std::string pr_tmp = (dir / kPrCurveFile).string() + ".tmp";
    write_pr_csv(ev.curve, pr_tmp);
    std::filesystem::rename(pr_tmp, dir / kPrCurveFile);
    detail::write_atomic(dir / kEvalFile, eval_to_json(ev, cell).dump(2) + "\n");
    // The run record lands last: its presence marks the cell complete.
    detail::write_atomic(dir / kRunRecordFile, record.to_json().dump(2) + "\n");
}

// ------------------------------------------------------------------ sweep

struct SweepOutcome {
    int completed = 0;
    int skipped = 0;
    int failed = 0;
    std::vector<std::string> failures;  // "config/runN: message"
};

/// Run every planned cell against the cohort, skipping cells whose outputs
/// already exist. Failures are recorded (error.txt in the cell directory)
/// and the sweep continues. Cells are independent; `parallel` > 1 runs them
/// on a thread pool.
inline SweepOutcome run_sweep(const ExperimentPlan& plan, const std::vector<PatientRecord>& records,
                              const std::string& out_dir, int parallel = 1, std::ostream* log = nullptr) {
    plan.validate();
    if (parallel < 1) throw value_error("sweep: parallel must be at least 1");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    detail::write_atomic(fs::path(out_dir) / kPlanFile, plan_to_json(plan).dump(2) + "\n");

    const std::vector<Group> groups = plan.split_counts
                                          ? make_groups(records, plan.groups, *plan.split_counts)
                                          : make_groups(records, plan.groups);
    std::vector<GroupData> data;
    data.reserve(groups.size());
    for (const Group& g : groups) data.push_back(build_group_data(records, g));

    const std::vector<RunCell> cells = plan_cells(plan);
    SweepOutcome outcome;
    std::mutex mu;
    std::atomic<std::size_t> next{0};

    const auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const RunCell& cell = cells[i];
            const fs::path dir = fs::path(out_dir) / cell.rel_dir();
            const std::string label = cell.config.id() + "/run" + std::to_string(cell.run_index);
            if (cell_complete(dir)) {
                const std::lock_guard<std::mutex> lock(mu);
                ++outcome.skipped;
                if (log != nullptr) *log << "skip " << label << " (already complete)\n";
                continue;
            }
            try {
                execute_cell(cell, data.at(static_cast<std::size_t>(cell.group)), plan, dir);
                const std::lock_guard<std::mutex> lock(mu);
                ++outcome.completed;
                if (log != nullptr) *log << "done " << label << "\n";
            } catch (const std::exception& e) {
                std::error_code ec;
                fs::create_directories(dir, ec);
                std::ofstream os(dir / kErrorFile);
                os << e.what() << "\n";
                const std::lock_guard<std::mutex> lock(mu);
                ++outcome.failed;
                outcome.failures.push_back(label + ": " + e.what());
                if (log != nullptr) *log << "FAIL " << label << ": " << e.what() << "\n";
            }
        }
    };

    if (parallel == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        const int n = std::min<int>(parallel, static_cast<int>(cells.size()));
        pool.reserve(static_cast<std::size_t>(n));
        for (int t = 0; t < n; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    return outcome;
}

// ----------------------------------------------------------------- report

/// One completed cell as read back from disk.
struct CellSummary {
    int run = 0;
    int group = 0;
    std::uint64_t seed = 0;
    double fusion_aupr = 0.0;
    std::vector<double> shortcut_auprs;
    std::vector<std::string> channels;
    double baseline = 0.0;
    double prevalence = 0.0;
    std::size_t windows = 0;
    std::size_t positives = 0;
    std::string dir;  // relative to the sweep root
};

struct ReportTables {
    ExperimentPlan plan;
    std::vector<std::string> config_ids;                          // stable row order
    std::map<std::string, std::map<int, CellSummary>> cells;      // config -> run -> summary
    std::vector<std::string> missing;                             // "config/runN"

    /// Runs entering the per-group performance table (one per group).
    std::vector<int> performance_runs() const {
        std::vector<int> runs(static_cast<std::size_t>(plan.groups));
        for (int g = 0; g < plan.groups; ++g) runs[static_cast<std::size_t>(g)] = g;
        return runs;
    }

    /// Runs entering the robustness table (every run on group 0).
    std::vector<int> robustness_runs() const {
        std::vector<int> runs{0};
        for (int r = plan.groups; r < plan.runs_per_config(); ++r) runs.push_back(r);
        return runs;
    }

    bool has(const std::string& config, int run) const {
        const auto it = cells.find(config);
        return it != cells.end() && it->second.find(run) != it->second.end();
    }

    /// AUPRs for the given runs; empty when any of them is missing.
    std::vector<double> auprs(const std::string& config, const std::vector<int>& runs) const {
        std::vector<double> out;
        for (int r : runs) {
            if (!has(config, r)) return {};
            out.push_back(cells.at(config).at(r).fusion_aupr);
        }
        return out;
    }
};

/// Load every planned cell's eval.json under `out_dir`; incomplete cells are
/// recorded as missing rather than failing the report.
inline ReportTables collect_results(const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    std::ifstream ps(root / kPlanFile);
    if (!ps) throw io_error("no plan.json in '" + out_dir + "' — run the sweep first");
    ReportTables tables;
    try {
        tables.plan = plan_from_json(nlohmann::json::parse(ps));
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("plan.json is not valid json: " + std::string(e.what()));
    }

    for (const Configuration& cfg : expand_configurations(tables.plan)) {
        tables.config_ids.push_back(cfg.id());
        for (int run = 0; run < tables.plan.runs_per_config(); ++run) {
            RunCell cell;
            cell.config = cfg;
            cell.run_index = run;
            const fs::path dir = root / cell.rel_dir();
            if (!cell_complete(dir)) {
                tables.missing.push_back(cfg.id() + "/run" + std::to_string(run));
                continue;
            }
            std::ifstream es(dir / kEvalFile);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(es);
            } catch (const nlohmann::json::exception& e) {
                throw parse_error((dir / kEvalFile).string() + " is not valid json: " + std::string(e.what()));
            }
            try {
                CellSummary s;
                s.run = j.at("run").get<int>();
                s.group = j.at("group").get<int>();
                s.seed = j.at("seed").get<std::uint64_t>();
                s.fusion_aupr = j.at("fusion_aupr").get<double>();
                s.shortcut_auprs = j.at("shortcut_auprs").get<std::vector<double>>();
                s.channels = j.at("channels").get<std::vector<std::string>>();
                s.baseline = j.at("baseline").get<double>();
                s.prevalence = j.at("prevalence").get<double>();
                s.windows = j.at("windows").get<std::size_t>();
                s.positives = j.at("positives").get<std::size_t>();
                s.dir = cell.rel_dir();
                tables.cells[cfg.id()][run] = std::move(s);
            } catch (const nlohmann::json::exception& e) {
                throw parse_error((dir / kEvalFile).string() + ": " + std::string(e.what()));
            }
        }
    }
    return tables;
}

namespace detail {

inline std::string fmt_cell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline double mean_vec(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

inline double sd_vec(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_vec(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

/// Two-sided test rendered as "t,df,p" CSV cells, or n/a when the inputs
/// are degenerate (zero variance) or incomplete.
inline std::string ttest_cells(const std::vector<double>& a, const std::vector<double>& b, TTestKind kind) {
    if (a.empty() || b.empty() || a.size() != b.size()) return "n/a,n/a,n/a";
    try {
        const TTestResult r = kind == TTestKind::Paired ? paired_ttest(a, b) : welch_ttest(a, b);
        return fmt_cell(r.t) + "," + fmt_cell(r.df) + "," + fmt_cell(r.p_two_sided);
    } catch (const value_error&) {
        return "n/a,n/a,n/a";
    }
}

}  // namespace detail

/// Render and write the four report tables plus a text summary. Pure
/// function of the on-disk results: regenerating the report never trains
/// anything and always produces byte-identical files.
inline void write_report(const ReportTables& tables, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path rdir = fs::path(out_dir) / "report";
    fs::create_directories(rdir);

    int complete_configs = 0;
    for (const std::string& id : tables.config_ids)
        if (!tables.auprs(id, tables.performance_runs()).empty()) ++complete_configs;
    if (complete_configs < 2)
        throw value_error("report: need at least 2 configurations with a complete run per group, have " +
                          std::to_string(complete_configs));

    // ---- performance.csv: one test AUPR per group, plus the mean.
    std::string perf = "config";
    for (int g = 0; g < tables.plan.groups; ++g) perf += ",group" + std::to_string(g);
    perf += ",mean\n";
    for (const std::string& id : tables.config_ids) {
        perf += id;
        std::vector<double> present;
        for (int run : tables.performance_runs()) {
            if (tables.has(id, run)) {
                const double v = tables.cells.at(id).at(run).fusion_aupr;
                perf += "," + detail::fmt_cell(v);
                present.push_back(v);
            } else {
                perf += ",n/a";
            }
        }
        perf += "," + (present.empty() ? "n/a" : detail::fmt_cell(detail::mean_vec(present))) + "\n";
    }
    detail::write_atomic(rdir / "performance.csv", perf);

    // ---- robustness.csv: the repeated group-0 runs.
    const std::vector<int> rruns = tables.robustness_runs();
    std::string rob = "config";
    for (int run : rruns) rob += ",run" + std::to_string(run);
    rob += ",mean,sd\n";
    for (const std::string& id : tables.config_ids) {
        rob += id;
        std::vector<double> present;
        for (int run : rruns) {
            if (tables.has(id, run)) {
                const double v = tables.cells.at(id).at(run).fusion_aupr;
                rob += "," + detail::fmt_cell(v);
                present.push_back(v);
            } else {
                rob += ",n/a";
            }
        }
        if (present.empty())
            rob += ",n/a,n/a\n";
        else
            rob += "," + detail::fmt_cell(detail::mean_vec(present)) + "," +
                   detail::fmt_cell(detail::sd_vec(present)) + "\n";
    }
    detail::write_atomic(rdir / "robustness.csv", rob);

    // ---- significance.csv: each BFM-SC configuration against every other
    // configuration; paired test across groups, unequal-variance test across
    // the group-0 repeats.
    std::string sig =
        "reference,config,paired_t,paired_df,paired_p,welch_t,welch_df,welch_p\n";
    for (const std::string& ref : tables.config_ids) {
        if (ref.find("bfm_sc") == std::string::npos) continue;
        const std::vector<double> ref_perf = tables.auprs(ref, tables.performance_runs());
        const std::vector<double> ref_rob = tables.auprs(ref, rruns);
        for (const std::string& other : tables.config_ids) {
            if (other == ref) continue;
            sig += ref + "," + other + ",";
            sig += detail::ttest_cells(ref_perf, tables.auprs(other, tables.performance_runs()),
                                       TTestKind::Paired);
            sig += ",";
            sig += detail::ttest_cells(ref_rob, tables.auprs(other, rruns), TTestKind::Welch);
            sig += "\n";
        }
    }
    detail::write_atomic(rdir / "significance.csv", sig);

    // ---- baseline.csv: the chance-level AUPR of each group's test set.
    std::string base = "group,windows,positives,prevalence,baseline_aupr\n";
    for (int g = 0; g < tables.plan.groups; ++g) {
        const CellSummary* cell = nullptr;
        for (const std::string& id : tables.config_ids)
            if (tables.has(id, g)) {
                cell = &tables.cells.at(id).at(g);
                break;
            }
        if (cell == nullptr) {
            base += std::to_string(g) + ",n/a,n/a,n/a,n/a\n";
        } else {
            base += std::to_string(g) + "," + std::to_string(cell->windows) + "," +
                    std::to_string(cell->positives) + "," + detail::fmt_cell(cell->prevalence) + "," +
                    detail::fmt_cell(cell->baseline) + "\n";
        }
    }
    detail::write_atomic(rdir / "baseline.csv", base);

    // ---- branches.csv: per-branch shortcut AUPRs of the BFM-SC runs.
    std::string br = "config,run,group";
    for (const std::string& ch : default_channels()) br += "," + ch;
    br += ",fusion\n";
    for (const std::string& id : tables.config_ids) {
        if (id.find("bfm_sc") == std::string::npos) continue;
        const auto it = tables.cells.find(id);
        if (it == tables.cells.end()) continue;
        for (const auto& [run, cell] : it->second) {
            br += id + "," + std::to_string(run) + "," + std::to_string(cell.group);
            for (double v : cell.shortcut_auprs) br += "," + detail::fmt_cell(v);
            br += "," + detail::fmt_cell(cell.fusion_aupr) + "\n";
        }
    }
    detail::write_atomic(rdir / "branches.csv", br);

    // ---- cells.csv: provenance of every number above.
    std::string prov = "config,run,group,seed,dir\n";
    for (const std::string& id : tables.config_ids) {
        const auto it = tables.cells.find(id);
        if (it == tables.cells.end()) continue;
        for (const auto& [run, cell] : it->second)
            prov += id + "," + std::to_string(run) + "," + std::to_string(cell.group) + "," +
                    std::to_string(cell.seed) + "," + cell.dir + "\n";
    }
    detail::write_atomic(rdir / "cells.csv", prov);

    // ---- summary.txt: a human-readable digest.
    std::string txt;
    txt += "Sweep report\n============\n\n";
    txt += "Configurations: " + std::to_string(tables.config_ids.size()) + ", runs per configuration: " +
           std::to_string(tables.plan.runs_per_config()) + " (" + std::to_string(tables.plan.groups) +
           " groups + " + std::to_string(tables.plan.extra_repeats) + " repeats on group 0)\n\n";
    txt += "Mean test AUPR across groups (chance baseline in baseline.csv):\n";
    for (const std::string& id : tables.config_ids) {
        const std::vector<double> perf_runs = tables.auprs(id, tables.performance_runs());
        txt += "  " + id + ": " +
               (perf_runs.empty() ? std::string("incomplete") : detail::fmt_cell(detail::mean_vec(perf_runs))) +
               "\n";
    }
    txt += "\nRobustness (group-0 repeats, mean +/- sd):\n";
    for (const std::string& id : tables.config_ids) {
        const std::vector<double> rob_runs = tables.auprs(id, rruns);
        txt += "  " + id + ": " +
               (rob_runs.empty() ? std::string("incomplete")
                                 : detail::fmt_cell(detail::mean_vec(rob_runs)) + " +/- " +
                                       detail::fmt_cell(detail::sd_vec(rob_runs))) +
               "\n";
    }
    if (!tables.missing.empty()) {
        txt += "\nMissing cells (" + std::to_string(tables.missing.size()) + "):\n";
        for (const std::string& m : tables.missing) txt += "  " + m + "\n";
    }
    txt += "\nTables: performance.csv, robustness.csv, significance.csv, baseline.csv, branches.csv, "
           "cells.csv\n";
    detail::write_atomic(rdir / "summary.txt", txt);
}

}  // namespace fusenet
