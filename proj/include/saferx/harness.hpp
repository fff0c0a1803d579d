#ifndef SAFERX_HARNESS_HPP
#define SAFERX_HARNESS_HPP

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "saferx/metrics.hpp"

namespace saferx {

/// Everything a run needs, loaded once. Held behind a unique_ptr so the
/// description resolver's internal pointers stay valid.
struct RunAssets {
    MedVocab vocab;
    SafetyKb kb;
    Panel panel;
    Taxonomy diagnosisTaxonomy;
    Taxonomy drugTaxonomy;
    std::map<std::string, std::string> procedureNames;
    PromptLibrary prompts;
    DescriptionResolver resolver;
};

/// Fully resolved run configuration (paths are absolute after load).
struct RunConfig {
    std::filesystem::path cases;
    std::filesystem::path kb;
    std::filesystem::path panel;
    std::filesystem::path prompts;
    std::filesystem::path diagnosisTaxonomy;
    std::filesystem::path drugTaxonomy;
    std::filesystem::path procedureNames;  // optional
    std::filesystem::path outputDir;
    nlohmann::json backend = nlohmann::json{{"type", "mock"}};
    PipelineConfig pipeline;
    int concurrency = 4;       // bound on in-flight backend calls
    int workers = 4;           // case-level worker threads
    std::uint64_t seed = 42;
    AccuracyOptions accuracy;
    bool resume = true;
};

/// Loads a JSON run-config file; relative paths resolve against the file's
/// directory. Throws ConfigError on missing required fields.
RunConfig load_run_config(const std::filesystem::path& path);

std::unique_ptr<RunAssets> load_run_assets(const RunConfig& config);

/// Backend described by the config, wrapped with the in-flight bound.
std::shared_ptr<LlmBackend> open_backend(const RunConfig& config);

struct BatchResult {
    std::size_t completed = 0;       // cases with a trace after this run
    std::size_t newlyRun = 0;        // cases executed in this invocation
    std::size_t skippedExisting = 0; // cases already in the trace file
    std::size_t failed = 0;          // cases excluded after an error
    std::vector<std::string> failures;
    std::filesystem::path tracesPath;
};

/// Resumable batch execution. Traces append to tracesPath (JSONL) with a
/// "<name>.done" sidecar listing completed case ids; a restart runs only the
/// remainder. Case failures are excluded and counted, never fatal.
BatchResult run_batch(const std::vector<PatientRecord>& records, RunAssets& assets,
                      LlmBackend& backend, const PipelineConfig& pipeline,
                      const std::filesystem::path& tracesPath, int workers,
                      bool resume = true);

std::vector<PipelineTrace> load_traces(const std::filesystem::path& path);

/// Per-stage usage aggregated over cases. The total row is the sum of the
/// stage rows by construction.
struct EfficiencyReport {
    std::size_t cases = 0;
    std::map<std::string, StageUsage> stageTotals;
    StageUsage total;
};

EfficiencyReport build_efficiency(const std::vector<PipelineTrace>& traces);
std::string efficiency_to_json(const EfficiencyReport& report);

/// Leave-one-expert-out impact row. The subgroup is the set of cases whose
/// baseline routing activated the expert; delta is baseline minus ablated
/// micro-F1 on that subgroup (positive means the expert helps).
struct LooRow {
    std::string expertId;
    std::size_t subgroupSize = 0;
    std::size_t scoredCases = 0;
    double baselineF1 = 0.0;
    double ablatedF1 = 0.0;
    double delta = 0.0;
};

/// Throws UnknownExpertId for ids not in the panel.
std::vector<LooRow> run_loo(const std::vector<PatientRecord>& records, RunAssets& assets,
                            LlmBackend& backend, const PipelineConfig& pipeline,
                            const std::vector<std::string>& expertIds, int workers,
                            const AccuracyOptions& accuracy = {});
std::string loo_to_json(const std::vector<LooRow>& rows);

/// Critique and verification behavior statistics over a finished run.
struct DiagnosticsReport {
    std::size_t casesScored = 0;
    // Mean per-case counts against the reference, before and after critique.
    double preTruePositives = 0.0, preFalsePositives = 0.0, preFalseNegatives = 0.0;
    double postTruePositives = 0.0, postFalsePositives = 0.0, postFalseNegatives = 0.0;
    /// Expert-support count -> number of critique-removed codes with it.
    std::map<int, std::size_t> removedBySupport;
    struct ExpertRow {
        std::string expertId;
        std::size_t proposed = 0;
        std::size_t retained = 0;
        std::size_t truePositives = 0;
    };
    std::vector<ExpertRow> perExpert;
    std::map<std::string, std::size_t> verdictActions;
};

DiagnosticsReport run_diagnostics(const std::vector<PipelineTrace>& traces,
                                  const std::vector<PatientRecord>& records);
std::string diagnostics_to_json(const DiagnosticsReport& report);

}  // namespace saferx

#endif
