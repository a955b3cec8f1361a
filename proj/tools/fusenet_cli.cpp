// Command-line front end: synthetic cohort generation, the configuration
// sweep, report building, and gradient verification.
//
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure,
// 3 property violation (gradcheck).

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusenet/cohort.hpp"
#include "fusenet/errors.hpp"
#include "fusenet/gradcheck.hpp"
#include "fusenet/harness.hpp"
#include "fusenet/sigproc.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitProperty = 3;

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw fusenet::io_error("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw fusenet::parse_error("'" + path + "' is not valid json: " + std::string(e.what()));
    }
}

int cmd_synth(const std::string& config_path, const std::string& out_dir,
              const std::optional<std::uint64_t>& seed) {
    fusenet::SynthConfig cfg;
    if (!config_path.empty()) cfg = fusenet::synth_config_from_json(read_json_file(config_path));
    if (seed) cfg.seed = *seed;
    cfg.validate();

    std::cout << "generating " << cfg.patients << " patients x " << cfg.duration_s << " s (seed " << cfg.seed
              << ")\n";
    const std::vector<fusenet::PatientRecord> records = fusenet::generate_synthetic(cfg);
    fusenet::save_records(records, out_dir, &cfg);

    // Prevalence summary over the epoched windows of each patient.
    double lo = 1.0, hi = 0.0;
    std::size_t windows = 0, positives = 0;
    for (const fusenet::PatientRecord& rec : records) {
        const fusenet::EpochSet epochs = fusenet::make_epochs(rec);
        const double p = epochs.prevalence();
        lo = std::min(lo, p);
        hi = std::max(hi, p);
        windows += epochs.size();
        for (std::size_t i = 0; i < epochs.size(); ++i) positives += epochs.items[i].label;
    }
    const double overall = windows == 0 ? 0.0 : static_cast<double>(positives) / static_cast<double>(windows);
    std::cout << "wrote " << records.size() << " records to " << out_dir << "\n";
    std::cout << "windows: " << windows << ", positive: " << positives << " (prevalence " << overall
              << ", per-patient " << lo << ".." << hi << ")\n";
    return kExitOk;
}

int cmd_run(const std::string& data_dir, const std::string& config_path, const std::string& out_dir,
            int parallel, const std::optional<std::uint64_t>& seed, bool full_scale) {
    fusenet::ExperimentPlan plan =
        full_scale ? fusenet::ExperimentPlan::full_scale() : fusenet::ExperimentPlan::desk_default();
    if (!config_path.empty()) {
        plan = fusenet::plan_from_json(read_json_file(config_path));
        if (full_scale) {
            plan.groups = 5;
            plan.extra_repeats = 4;
            plan.arch_profile = "reference";
        }
    }
    if (seed) plan.seed = *seed;
    plan.validate();

    std::cout << "loading cohort from " << data_dir << "\n";
    const std::vector<fusenet::PatientRecord> records = fusenet::load_records(data_dir);
    std::cout << records.size() << " patients; " << fusenet::expand_configurations(plan).size()
              << " configurations x " << plan.runs_per_config() << " runs\n";

    const fusenet::SweepOutcome outcome =
        fusenet::run_sweep(plan, records, out_dir, parallel, &std::cout);
    std::cout << "sweep: " << outcome.completed << " completed, " << outcome.skipped << " skipped, "
              << outcome.failed << " failed\n";
    for (const std::string& f : outcome.failures) std::cout << "  failed " << f << "\n";
    return outcome.failed == 0 ? kExitOk : kExitRuntime;
}

int cmd_report(const std::string& out_dir) {
    const fusenet::ReportTables tables = fusenet::collect_results(out_dir);
    fusenet::write_report(tables, out_dir);
    std::ifstream summary(std::filesystem::path(out_dir) / "report" / "summary.txt");
    std::cout << summary.rdbuf();
    if (!tables.missing.empty())
        std::cout << "note: " << tables.missing.size() << " cells missing; report is partial\n";
    return kExitOk;
}

int cmd_gradcheck(const std::string& inject_fault) {
    const std::vector<fusenet::GradCheckEntry> entries = fusenet::run_gradcheck(inject_fault);
    const bool ok = fusenet::print_gradcheck(entries, std::cout);
    return ok ? kExitOk : kExitProperty;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-sensor fusion experiment harness"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string data_dir;
    std::optional<std::uint64_t> seed;
    int parallel = 1;
    bool full_scale = false;
    std::string inject_fault;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
    synth->add_option("--config", config_path, "Generator config JSON (defaults used when omitted)");
    synth->add_option("--out", out_dir, "Cohort output directory")->required();
    synth->add_option("--seed", seed, "Override the generator seed");

    CLI::App* run = app.add_subcommand("run", "Run the configuration sweep on a cohort");
    run->add_option("data", data_dir, "Cohort directory (from `synth`)")->required();
    run->add_option("--config", config_path, "Experiment plan JSON (desk-scale defaults when omitted)");
    run->add_option("--out", out_dir, "Sweep output directory")->required();
    run->add_option("--parallel", parallel, "Worker threads for sweep cells")->check(CLI::PositiveNumber);
    run->add_option("--seed", seed, "Override the plan seed");
    run->add_flag("--full-scale", full_scale, "5 groups + 4 repeats with reference-size models");

    CLI::App* report = app.add_subcommand("report", "Build report tables from sweep results");
    report->add_option("--out", out_dir, "Sweep output directory to summarize")->required();

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Verify gradients against finite differences");
    gradcheck->add_option("--inject-fault", inject_fault,
                          "Corrupt the named check (fixture proving failures are caught)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (synth->parsed()) return cmd_synth(config_path, out_dir, seed);
        if (run->parsed()) return cmd_run(data_dir, config_path, out_dir, parallel, seed, full_scale);
        if (report->parsed()) return cmd_report(out_dir);
        if (gradcheck->parsed()) return cmd_gradcheck(inject_fault);
    } catch (const fusenet::value_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const fusenet::parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;  // no subcommand matched (unreachable with require_subcommand)
}
