// Command-line front end: knowledge-base construction, routing inspection,
// batch pipeline runs, scoring, and run diagnostics.

#include <chrono>
#include <ctime>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "saferx/harness.hpp"

using namespace saferx;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFatal = 1;
constexpr int kExitPartial = 2;

std::string utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::vector<DdiRecord> load_ddi_records(const std::filesystem::path& path) {
    std::vector<DdiRecord> records;
    for (const auto& row : read_tsv(path, 3)) {
        DdiRecord rec;
        rec.drugA = trim(row[0]);
        rec.drugB = trim(row[1]);
        try {
            rec.frequency = std::stod(row[2]);
        } catch (const std::exception&) {
            throw IoError(path.string() + ": bad frequency '" + row[2] + "'");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<LabelRecord> load_label_records(const std::filesystem::path& path) {
    std::vector<LabelRecord> records;
    std::istringstream in(read_text_file(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object()) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": not a JSON object");
        }
        LabelRecord rec;
        if (j.contains("rxcui")) {
            if (j.at("rxcui").is_array()) {
                for (const auto& r : j.at("rxcui")) rec.rxcuis.push_back(r.get<std::string>());
            } else if (j.at("rxcui").is_string()) {
                std::string v = j.at("rxcui").get<std::string>();
                if (!v.empty()) rec.rxcuis.push_back(v);
            }
        }
        rec.substance = j.value("substance_name", "");
        rec.contraText = j.value("contraindications", "");
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<IndicationRecord> load_indication_records(const std::filesystem::path& path) {
    std::vector<IndicationRecord> records;
    for (const auto& row : read_tsv(path, 2)) {
        records.push_back(IndicationRecord{trim(row[0]), trim(row[1])});
    }
    return records;
}

std::vector<std::set<std::string>> reference_sets(const std::vector<PatientRecord>& records,
                                                  std::vector<std::vector<std::string>>* diags) {
    std::vector<std::set<std::string>> sets;
    for (const auto& record : records) {
        if (!record.groundTruth) continue;
        sets.push_back(record.ground_truth_set());
        if (diags) {
            std::vector<std::string> keys;
            for (const auto& d : record.target.diagnoses) keys.push_back(pre_decimal(d));
            diags->push_back(std::move(keys));
        }
    }
    return sets;
}

/// Shared option block for subcommands that execute or score pipeline runs.
struct RunCliOptions {
    std::string configPath;
    std::string cases, kb, panel, backend, prompts, taxonomy, drugTaxonomy, procedures, out;
    int workers = -1;
    int concurrency = -1;
    double threshold = -1.0;
    bool noExperts = false, noSummarizer = false, noMedi = false, noCritique = false,
         noSafety = false;
    bool failClosed = false;
    bool noResume = false;
    std::vector<std::string> dropExperts;
};

void add_run_options(CLI::App* cmd, RunCliOptions& opt, bool needsBackend) {
    cmd->add_option("--config", opt.configPath, "run-config JSON file");
    cmd->add_option("--cases", opt.cases, "cohort JSONL file");
    cmd->add_option("--kb", opt.kb, "knowledge archive");
    cmd->add_option("--panel", opt.panel, "panel config JSON");
    if (needsBackend) cmd->add_option("--backend", opt.backend, "backend config JSON file");
    cmd->add_option("--prompts", opt.prompts, "prompt template directory");
    cmd->add_option("--taxonomy", opt.taxonomy, "diagnosis hierarchy TSV");
    cmd->add_option("--drug-taxonomy", opt.drugTaxonomy, "drug hierarchy TSV");
    cmd->add_option("--procedures", opt.procedures, "procedure name TSV (optional)");
    cmd->add_option("--out", opt.out, "output directory");
    cmd->add_option("--workers", opt.workers, "case-level worker threads");
    cmd->add_option("--concurrency", opt.concurrency, "max in-flight backend calls");
    cmd->add_option("--threshold", opt.threshold, "routing activation threshold");
    cmd->add_flag("--no-experts", opt.noExperts, "replace the routed panel with the generalist");
    cmd->add_flag("--no-summarizer", opt.noSummarizer, "generate from the raw record");
    cmd->add_flag("--no-medi", opt.noMedi, "omit indication candidates from prompts");
    cmd->add_flag("--no-critique", opt.noCritique, "retain the full proposal union");
    cmd->add_flag("--no-safety", opt.noSafety, "skip flag lookup and verification");
    cmd->add_flag("--fail-closed", opt.failClosed,
                  "remove flagged medications when verification fails");
    cmd->add_flag("--no-resume", opt.noResume, "ignore existing traces and rerun everything");
    cmd->add_option("--drop-expert", opt.dropExperts, "expert id to deactivate (repeatable)");
}

RunConfig build_run_config(const RunCliOptions& opt) {
    RunConfig config;
    if (!opt.configPath.empty()) config = load_run_config(opt.configPath);

    auto abs = [](const std::string& p) { return std::filesystem::absolute(p); };
    if (!opt.cases.empty()) config.cases = abs(opt.cases);
    if (!opt.kb.empty()) config.kb = abs(opt.kb);
    if (!opt.panel.empty()) config.panel = abs(opt.panel);
    if (!opt.prompts.empty()) config.prompts = abs(opt.prompts);
    if (!opt.taxonomy.empty()) config.diagnosisTaxonomy = abs(opt.taxonomy);
    if (!opt.drugTaxonomy.empty()) config.drugTaxonomy = abs(opt.drugTaxonomy);
    if (!opt.procedures.empty()) config.procedureNames = abs(opt.procedures);
    if (!opt.out.empty()) config.outputDir = abs(opt.out);
    if (!opt.backend.empty()) {
        config.backend = json::parse(read_text_file(opt.backend));
        if (config.backend.contains("fixtures") && config.backend.at("fixtures").is_string()) {
            std::filesystem::path f = config.backend.at("fixtures").get<std::string>();
            if (f.is_relative()) {
                config.backend["fixtures"] = (abs(opt.backend).parent_path() / f).string();
            }
        }
    }
    if (opt.workers > 0) config.workers = opt.workers;
    if (opt.concurrency > 0) config.concurrency = opt.concurrency;
    if (opt.threshold >= 0.0) config.pipeline.routing.threshold = opt.threshold;
    if (opt.noExperts) config.pipeline.useExperts = false;
    if (opt.noSummarizer) config.pipeline.agents.useSummarizer = false;
    if (opt.noMedi) config.pipeline.agents.useIndications = false;
    if (opt.noCritique) config.pipeline.useCritique = false;
    if (opt.noSafety) config.pipeline.useSafety = false;
    if (opt.failClosed) config.pipeline.verify.failClosed = true;
    if (opt.noResume) config.resume = false;
    for (const auto& id : opt.dropExperts) config.pipeline.droppedExperts.insert(id);

    auto require = [](const std::filesystem::path& p, const char* what) {
        if (p.empty()) throw ConfigError(std::string("missing required path: ") + what);
    };
    require(config.cases, "--cases");
    require(config.kb, "--kb");
    require(config.panel, "--panel");
    require(config.prompts, "--prompts");
    require(config.diagnosisTaxonomy, "--taxonomy");
    require(config.drugTaxonomy, "--drug-taxonomy");
    return config;
}

void write_or_print(const std::string& content, const std::string& outPath) {
    if (outPath.empty()) {
        std::cout << content;
    } else {
        write_text_file(outPath, content);
    }
}

int cmd_build_kb(const std::string& twosides, const std::string& openfda,
                 const std::string& lexiconPath, const std::string& medi,
                 const std::string& idmapPath, const std::string& vocabPath,
                 const std::string& out, const std::string& note) {
    MedVocab vocab = MedVocab::load(vocabPath);
    IdMap idMap = IdMap::load(idmapPath);
    DiagnosisLexicon lexicon = DiagnosisLexicon::load(lexiconPath);

    SafetyKb kb;
    DdiBuildStats ddiStats;
    kb.ddi = build_ddi(load_ddi_records(twosides), idMap, vocab, &ddiStats);

    ContraBuildResult contra =
        build_contra(load_label_records(openfda), idMap, vocab, lexicon);
    kb.contra = std::move(contra.matrix);

    kb.indications = load_indications(load_indication_records(medi), idMap, vocab);

    kb.manifest.builtAt = utc_now();
    kb.manifest.note = note;
    for (const auto& [name, path] :
         std::vector<std::pair<std::string, std::string>>{{"twosides", twosides},
                                                          {"openfda", openfda},
                                                          {"lexicon", lexiconPath},
                                                          {"medi", medi},
                                                          {"idmap", idmapPath},
                                                          {"vocab", vocabPath}}) {
        kb.manifest.sourceDigests[name] = fnv1a64_hex(read_text_file(path));
    }
    save_kb(kb, out);

    const auto& r = contra.report;
    std::cerr << "interaction records: " << ddiStats.inputRecords << " in, "
              << ddiStats.unmappedRecords << " unmapped, " << kb.ddi.cells().size()
              << " pairs\n";
    std::cerr << "label records: " << r.inputRecords << " in, " << r.droppedNoRxcui
              << " no-id, " << r.droppedNoContraText << " no-text, "
              << r.droppedDuplicateRxcui << " duplicate, " << r.droppedMultiRxcui
              << " multi-id, " << r.droppedUnmapped << " unmapped, " << r.keptRecords
              << " kept (" << r.distinctMedClasses << " classes, " << r.pairCount
              << " pairs)\n";
    std::cerr << "indication rows dropped out-of-vocabulary: "
              << kb.indications.droppedOutOfVocab << "\n";
    std::cerr << "wrote " << out << "\n";
    return kExitOk;
}

int cmd_route(const std::string& cases, const std::string& panelPath,
              const std::string& taxonomyPath, double threshold, const std::string& out) {
    Panel panel = Panel::load(panelPath);
    Taxonomy taxonomy = Taxonomy::load(taxonomyPath);
    CohortLoadReport report;
    std::vector<PatientRecord> records = load_cases(cases, nullptr, &report);
    for (const auto& err : report.errors) std::cerr << "warning: " << err << "\n";

    RoutingConfig config;
    if (threshold >= 0.0) config.threshold = threshold;

    json arr = json::array();
    for (const auto& record : records) {
        RoutingResult r = route(record, panel, taxonomy, config);
        arr.push_back(json{
            {"caseId", record.caseId},
            {"scores", r.scores},
            {"activated", std::vector<std::string>(r.activated.begin(), r.activated.end())}});
    }
    write_or_print(arr.dump(2) + "\n", out);
    return report.malformedLines > 0 ? kExitPartial : kExitOk;
}

int cmd_run(const RunCliOptions& opt) {
    RunConfig config = build_run_config(opt);
    if (config.outputDir.empty()) throw ConfigError("missing required path: --out");

    auto assets = load_run_assets(config);
    auto backend = open_backend(config);

    CohortLoadReport loadReport;
    std::vector<PatientRecord> records = load_cases(config.cases, &assets->vocab, &loadReport);
    for (const auto& err : loadReport.errors) std::cerr << "warning: " << err << "\n";

    std::filesystem::create_directories(config.outputDir);
    BatchResult batch = run_batch(records, *assets, *backend, config.pipeline,
                                  config.outputDir / "traces.jsonl", config.workers,
                                  config.resume);
    for (const auto& failure : batch.failures) {
        std::cerr << "case failed: " << failure << "\n";
    }

    std::vector<PipelineTrace> traces = load_traces(batch.tracesPath);
    EvaluationReport evaluation = evaluate_traces(traces, records, assets->kb, config.accuracy);
    write_text_file(config.outputDir / "evaluation.json",
                    evaluation_report_to_json(evaluation));
    write_text_file(config.outputDir / "evaluation.tsv", evaluation_report_to_tsv(evaluation));
    write_text_file(config.outputDir / "efficiency.json",
                    efficiency_to_json(build_efficiency(traces)));

    json summary;
    summary["cases"] = records.size();
    summary["completed"] = batch.completed;
    summary["newlyRun"] = batch.newlyRun;
    summary["skippedExisting"] = batch.skippedExisting;
    summary["failed"] = batch.failed;
    summary["failures"] = batch.failures;
    summary["malformedInputLines"] = loadReport.malformedLines;
    summary["droppedMedications"] = loadReport.droppedMedications;
    summary["scoredCases"] = evaluation.scoredCases;
    summary["backend"] = backend->name();
    write_text_file(config.outputDir / "summary.json", summary.dump(2) + "\n");

    std::cerr << "completed " << batch.completed << "/" << records.size() << " cases ("
              << batch.failed << " failed), scored " << evaluation.scoredCases << "\n";
    return (batch.failed > 0 || loadReport.malformedLines > 0) ? kExitPartial : kExitOk;
}

int cmd_evaluate(const std::string& tracesPath, const std::string& cases,
                 const std::string& kbPath, const std::string& outDir) {
    SafetyKb kb = load_kb(kbPath);
    MedVocab vocab = MedVocab::from_codes(kb.ddi.vocab().codes());
    CohortLoadReport report;
    std::vector<PatientRecord> records = load_cases(cases, &vocab, &report);
    std::vector<PipelineTrace> traces = load_traces(tracesPath);

    EvaluationReport evaluation = evaluate_traces(traces, records, kb);
    if (outDir.empty()) {
        std::cout << evaluation_report_to_json(evaluation);
    } else {
        std::filesystem::create_directories(outDir);
        write_text_file(std::filesystem::path(outDir) / "evaluation.json",
                        evaluation_report_to_json(evaluation));
        write_text_file(std::filesystem::path(outDir) / "evaluation.tsv",
                        evaluation_report_to_tsv(evaluation));
    }
    return kExitOk;
}

int cmd_granularity(const std::string& cases, const std::string& kbPath,
                    const std::string& out) {
    SafetyKb kb = load_kb(kbPath);
    MedVocab vocab = MedVocab::from_codes(kb.ddi.vocab().codes());
    std::vector<PatientRecord> records = load_cases(cases, &vocab, nullptr);
    std::vector<std::vector<std::string>> diags;
    std::vector<std::set<std::string>> sets = reference_sets(records, &diags);
    if (sets.empty()) throw ConfigError("no cases with references in " + cases);
    write_or_print(granularity_to_json(granularity_compare(sets, diags, kb)), out);
    return kExitOk;
}

int cmd_loo(const RunCliOptions& opt, const std::vector<std::string>& expertsArg) {
    RunConfig config = build_run_config(opt);
    auto assets = load_run_assets(config);
    auto backend = open_backend(config);
    std::vector<PatientRecord> records = load_cases(config.cases, &assets->vocab, nullptr);

    std::vector<std::string> expertIds = expertsArg;
    if (expertIds.empty()) {
        for (const auto& expert : assets->panel.experts()) expertIds.push_back(expert.id);
    }
    std::vector<LooRow> rows = run_loo(records, *assets, *backend, config.pipeline, expertIds,
                                       config.workers, config.accuracy);
    std::string out = loo_to_json(rows);
    if (config.outputDir.empty()) {
        std::cout << out;
    } else {
        std::filesystem::create_directories(config.outputDir);
        write_text_file(config.outputDir / "loo.json", out);
    }
    return kExitOk;
}

int cmd_diagnostics(const std::string& tracesPath, const std::string& cases,
                    const std::string& out) {
    std::vector<PipelineTrace> traces = load_traces(tracesPath);
    std::vector<PatientRecord> records = load_cases(cases, nullptr, nullptr);
    write_or_print(diagnostics_to_json(run_diagnostics(traces, records)), out);
    return kExitOk;
}

int cmd_serialize(const std::string& cases, const std::string& taxonomyPath,
                  const std::string& drugTaxonomyPath, const std::string& proceduresPath,
                  const std::string& caseId, const std::string& out) {
    Taxonomy diagnosis = Taxonomy::load(taxonomyPath);
    Taxonomy drug = Taxonomy::load(drugTaxonomyPath);
    std::map<std::string, std::string> procedures;
    if (!proceduresPath.empty()) {
        for (const auto& row : read_tsv(proceduresPath, 2)) {
            procedures[strip_dots(row[0])] = row[1];
        }
    }
    DescriptionResolver resolver(&diagnosis, &drug, procedures);
    std::vector<PatientRecord> records = load_cases(cases, nullptr, nullptr);
    for (const auto& record : records) {
        if (!caseId.empty() && record.caseId != caseId) continue;
        write_or_print(serialize(record, resolver).text + "\n", out);
        return kExitOk;
    }
    throw ConfigError("case not found: " + caseId);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Routed multi-expert medication recommendation pipeline"};
    app.require_subcommand(1);

    // build-kb
    std::string twosides, openfda, lexicon, medi, idmap, vocab, kbOut, note;
    auto* buildKb = app.add_subcommand("build-kb", "construct the knowledge archive");
    buildKb->add_option("--twosides", twosides, "interaction report TSV")->required();
    buildKb->add_option("--openfda", openfda, "product label JSONL")->required();
    buildKb->add_option("--lexicon", lexicon, "diagnosis term lexicon TSV")->required();
    buildKb->add_option("--medi", medi, "indication rows TSV")->required();
    buildKb->add_option("--idmap", idmap, "source id to drug code TSV")->required();
    buildKb->add_option("--vocab", vocab, "medication vocabulary file")->required();
    buildKb->add_option("--out", kbOut, "output archive path")->required();
    buildKb->add_option("--note", note, "manifest note");

    // route
    std::string routeCases, routePanel, routeTaxonomy, routeOut;
    double routeThreshold = -1.0;
    auto* routeCmd = app.add_subcommand("route", "per-case expert activation");
    routeCmd->add_option("--cases", routeCases, "cohort JSONL file")->required();
    routeCmd->add_option("--panel", routePanel, "panel config JSON")->required();
    routeCmd->add_option("--taxonomy", routeTaxonomy, "diagnosis hierarchy TSV")->required();
    routeCmd->add_option("--threshold", routeThreshold, "activation threshold");
    routeCmd->add_option("--out", routeOut, "output JSON path (default: stdout)");

    // run
    RunCliOptions runOpt;
    auto* runCmd = app.add_subcommand("run", "execute the pipeline over a cohort");
    add_run_options(runCmd, runOpt, true);

    // evaluate
    std::string evalTraces, evalCases, evalKb, evalOut;
    auto* evalCmd = app.add_subcommand("evaluate", "score traces against references");
    evalCmd->add_option("--traces", evalTraces, "trace JSONL file")->required();
    evalCmd->add_option("--cases", evalCases, "cohort JSONL file")->required();
    evalCmd->add_option("--kb", evalKb, "knowledge archive")->required();
    evalCmd->add_option("--out", evalOut, "output directory (default: stdout)");

    // granularity
    std::string granCases, granKb, granOut;
    auto* granCmd = app.add_subcommand(
        "granularity", "reference safety exposure at class vs subgroup granularity");
    granCmd->add_option("--cases", granCases, "cohort JSONL file")->required();
    granCmd->add_option("--kb", granKb, "knowledge archive")->required();
    granCmd->add_option("--out", granOut, "output JSON path (default: stdout)");

    // loo
    RunCliOptions looOpt;
    std::vector<std::string> looExperts;
    auto* looCmd = app.add_subcommand("loo", "leave-one-expert-out subgroup impact");
    add_run_options(looCmd, looOpt, true);
    looCmd->add_option("--experts", looExperts, "expert ids (default: all)");

    // diagnostics
    std::string diagTraces, diagCases, diagOut;
    auto* diagCmd = app.add_subcommand("diagnostics", "critique and verdict statistics");
    diagCmd->add_option("--traces", diagTraces, "trace JSONL file")->required();
    diagCmd->add_option("--cases", diagCases, "cohort JSONL file")->required();
    diagCmd->add_option("--out", diagOut, "output JSON path (default: stdout)");

    // serialize (utility; also used to regenerate narrative fixtures)
    std::string serCases, serTaxonomy, serDrugTaxonomy, serProcedures, serCaseId, serOut;
    auto* serCmd = app.add_subcommand("serialize", "render one case narrative");
    serCmd->add_option("--cases", serCases, "cohort JSONL file")->required();
    serCmd->add_option("--taxonomy", serTaxonomy, "diagnosis hierarchy TSV")->required();
    serCmd->add_option("--drug-taxonomy", serDrugTaxonomy, "drug hierarchy TSV")->required();
    serCmd->add_option("--procedures", serProcedures, "procedure name TSV");
    serCmd->add_option("--case", serCaseId, "case id (default: first)");
    serCmd->add_option("--out", serOut, "output path (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (buildKb->parsed()) {
            return cmd_build_kb(twosides, openfda, lexicon, medi, idmap, vocab, kbOut, note);
        }
        if (routeCmd->parsed()) {
            return cmd_route(routeCases, routePanel, routeTaxonomy, routeThreshold, routeOut);
        }
        if (runCmd->parsed()) return cmd_run(runOpt);
        if (evalCmd->parsed()) return cmd_evaluate(evalTraces, evalCases, evalKb, evalOut);
        if (granCmd->parsed()) return cmd_granularity(granCases, granKb, granOut);
        if (looCmd->parsed()) return cmd_loo(looOpt, looExperts);
        if (diagCmd->parsed()) return cmd_diagnostics(diagTraces, diagCases, diagOut);
        if (serCmd->parsed()) {
            return cmd_serialize(serCases, serTaxonomy, serDrugTaxonomy, serProcedures,
                                 serCaseId, serOut);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFatal;
    }
    return kExitFatal;
}
