#include "saferx/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

namespace saferx {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
    json j = json::parse(read_text_file(path));
    std::filesystem::path base = std::filesystem::absolute(path).parent_path();

    RunConfig config;
    auto need = [&](const char* key) -> std::string {
        if (!j.contains(key)) throw ConfigError(std::string("run config missing '") + key + "'");
        return j.at(key).get<std::string>();
    };
    config.cases = resolve(base, need("cases"));
    config.kb = resolve(base, need("kb"));
    config.panel = resolve(base, need("panel"));
    config.prompts = resolve(base, need("prompts"));
    config.diagnosisTaxonomy = resolve(base, need("diagnosisTaxonomy"));
    config.drugTaxonomy = resolve(base, need("drugTaxonomy"));
    if (j.contains("procedureNames")) {
        config.procedureNames = resolve(base, j.at("procedureNames").get<std::string>());
    }
    config.outputDir = resolve(base, j.value("output", "out"));
    if (j.contains("backend")) config.backend = j.at("backend");
    if (config.backend.contains("fixtures") && config.backend.at("fixtures").is_string()) {
        config.backend["fixtures"] =
            resolve(base, config.backend.at("fixtures").get<std::string>()).string();
    }

    if (j.contains("routing")) {
        const json& r = j.at("routing");
        config.pipeline.routing.currentWeight =
            r.value("currentWeight", config.pipeline.routing.currentWeight);
        config.pipeline.routing.historyWeight =
            r.value("historyWeight", config.pipeline.routing.historyWeight);
        config.pipeline.routing.threshold =
            r.value("threshold", config.pipeline.routing.threshold);
        config.pipeline.routing.keywordScoring =
            r.value("keywordScoring", config.pipeline.routing.keywordScoring);
        config.pipeline.routing.keywordWeight =
            r.value("keywordWeight", config.pipeline.routing.keywordWeight);
    }
    if (j.contains("temperatures")) {
        const json& t = j.at("temperatures");
        config.pipeline.agents.summarizeTemperature =
            t.value("summarize", config.pipeline.agents.summarizeTemperature);
        config.pipeline.agents.generateTemperature =
            t.value("generate", config.pipeline.agents.generateTemperature);
        config.pipeline.agents.critiqueTemperature =
            t.value("critique", config.pipeline.agents.critiqueTemperature);
        config.pipeline.agents.verifyTemperature =
            t.value("verify", config.pipeline.agents.verifyTemperature);
    }
    if (j.contains("ablations")) {
        const json& a = j.at("ablations");
        config.pipeline.useExperts = a.value("experts", true);
        config.pipeline.agents.useSummarizer = a.value("summarizer", true);
        config.pipeline.agents.useIndications = a.value("indications", true);
        config.pipeline.useCritique = a.value("critique", true);
        config.pipeline.useSafety = a.value("safety", true);
        if (a.contains("dropExperts")) {
            for (const auto& id : a.at("dropExperts")) {
                config.pipeline.droppedExperts.insert(id.get<std::string>());
            }
        }
    }
    config.pipeline.agents.revisionRound =
        j.value("revisionRound", config.pipeline.agents.revisionRound);
    config.pipeline.verify.failClosed = j.value("failClosed", false);
    config.pipeline.verify.acceptReplacements = j.value("acceptReplacements", true);
    config.concurrency = j.value("concurrency", config.concurrency);
    config.workers = j.value("workers", config.workers);
    config.seed = j.value("seed", config.seed);
    config.accuracy.emptyEmptyJaccard =
        j.value("emptyEmptyJaccard", config.accuracy.emptyEmptyJaccard);
    config.resume = j.value("resume", config.resume);
    return config;
}

std::unique_ptr<RunAssets> load_run_assets(const RunConfig& config) {
    auto assets = std::make_unique<RunAssets>();
    assets->kb = load_kb(config.kb);
    assets->vocab = MedVocab::from_codes(assets->kb.ddi.vocab().codes());
    assets->panel = Panel::load(config.panel);
    assets->diagnosisTaxonomy = Taxonomy::load(config.diagnosisTaxonomy);
    assets->drugTaxonomy = Taxonomy::load(config.drugTaxonomy);
    if (!config.procedureNames.empty()) {
        for (const auto& row : read_tsv(config.procedureNames, 2)) {
            assets->procedureNames[strip_dots(row[0])] = row[1];
        }
    }
    assets->prompts = PromptLibrary::load(config.prompts);
    assets->resolver = DescriptionResolver(&assets->diagnosisTaxonomy, &assets->drugTaxonomy,
                                           assets->procedureNames);
    return assets;
}

std::shared_ptr<LlmBackend> open_backend(const RunConfig& config) {
    std::shared_ptr<LlmBackend> inner = make_backend(config.backend);
    return std::make_shared<BoundedBackend>(std::move(inner), config.concurrency);
}

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& tracesPath) {
    return tracesPath.string() + ".done";
}

std::set<std::string> completed_ids(const std::filesystem::path& tracesPath) {
    std::set<std::string> ids;
    // A trace line is authoritative; the sidecar catches lines lost between
    // the two appends. Union both.
    std::ifstream traces(tracesPath);
    std::string line;
    while (traces && std::getline(traces, line)) {
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (!j.is_discarded() && j.contains("caseId")) {
            ids.insert(j.at("caseId").get<std::string>());
        }
    }
    std::ifstream done(sidecar_path(tracesPath));
    while (done && std::getline(done, line)) {
        std::string id = trim(line);
        if (!id.empty()) ids.insert(id);
    }
    return ids;
}

/// Rewrites the trace file in cohort order so a completed batch is
/// byte-identical regardless of worker scheduling. Lines are moved verbatim;
/// traces for cases outside the cohort keep their first-seen order at the end.
void compact_traces(const std::filesystem::path& tracesPath,
                    const std::vector<PatientRecord>& records) {
    std::ifstream in(tracesPath);
    if (!in) return;
    std::map<std::string, std::size_t> rank;
    for (std::size_t i = 0; i < records.size(); ++i) rank.emplace(records[i].caseId, i);

    std::vector<std::pair<std::size_t, std::string>> known;
    std::vector<std::string> unknown;
    std::set<std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        std::string id;
        if (!j.is_discarded() && j.contains("caseId")) {
            id = j.at("caseId").get<std::string>();
        }
        if (!id.empty() && !seen.insert(id).second) continue;  // keep first
        auto it = rank.find(id);
        if (it != rank.end()) {
            known.emplace_back(it->second, line);
        } else {
            unknown.push_back(line);
        }
    }
    in.close();
    std::sort(known.begin(), known.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    std::filesystem::path tmp = tracesPath.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        for (const auto& [r, l] : known) {
            (void)r;
            out << l << '\n';
        }
        for (const auto& l : unknown) out << l << '\n';
    }
    std::filesystem::rename(tmp, tracesPath);

    std::filesystem::path doneTmp = sidecar_path(tracesPath).string() + ".tmp";
    {
        std::ofstream out(doneTmp, std::ios::trunc);
        for (const auto& [r, l] : known) {
            (void)r;
            json j = json::parse(l);
            out << j.at("caseId").get<std::string>() << '\n';
        }
    }
    std::filesystem::rename(doneTmp, sidecar_path(tracesPath));
}

}  // namespace

BatchResult run_batch(const std::vector<PatientRecord>& records, RunAssets& assets,
                      LlmBackend& backend, const PipelineConfig& pipeline,
                      const std::filesystem::path& tracesPath, int workers, bool resume) {
    if (workers < 1) throw ConfigError("worker count must be at least 1");
    if (tracesPath.has_parent_path()) {
        std::filesystem::create_directories(tracesPath.parent_path());
    }

    BatchResult result;
    result.tracesPath = tracesPath;

    std::set<std::string> done;
    if (resume) {
        done = completed_ids(tracesPath);
    } else {
        std::error_code ec;
        std::filesystem::remove(tracesPath, ec);
        std::filesystem::remove(sidecar_path(tracesPath), ec);
    }

    std::vector<const PatientRecord*> pending;
    for (const auto& record : records) {
        if (done.count(record.caseId)) {
            ++result.skippedExisting;
        } else {
            pending.push_back(&record);
        }
    }

    std::ofstream traceOut(tracesPath, std::ios::app);
    if (!traceOut) throw IoError("cannot open trace file: " + tracesPath.string());
    std::ofstream doneOut(sidecar_path(tracesPath), std::ios::app);
    if (!doneOut) throw IoError("cannot open sidecar: " + sidecar_path(tracesPath).string());

    std::mutex writeMutex;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> ran{0};
    std::atomic<std::size_t> failed{0};
    std::vector<std::string> failures;

    auto work = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= pending.size()) break;
            const PatientRecord& record = *pending[i];
            try {
                PipelineTrace trace =
                    run_case(record, assets.panel, assets.diagnosisTaxonomy, assets.resolver,
                             assets.kb, assets.vocab, backend, assets.prompts, pipeline);
                std::string line = trace_to_json(trace);
                std::lock_guard lock(writeMutex);
                traceOut << line << '\n' << std::flush;
                doneOut << record.caseId << '\n' << std::flush;
                ++ran;
            } catch (const std::exception& e) {
                ++failed;
                std::lock_guard lock(writeMutex);
                failures.push_back(record.caseId + ": " + e.what());
            }
        }
    };

    std::size_t threadCount =
        std::min<std::size_t>(static_cast<std::size_t>(workers), std::max<std::size_t>(pending.size(), 1));
    std::vector<std::thread> threads;
    threads.reserve(threadCount);
    for (std::size_t i = 0; i < threadCount; ++i) threads.emplace_back(work);
    for (auto& t : threads) t.join();

    traceOut.close();
    doneOut.close();
    result.newlyRun = ran;
    result.failed = failed;
    result.failures = std::move(failures);
    result.completed = result.skippedExisting + result.newlyRun;
    if (result.newlyRun > 0) compact_traces(tracesPath, records);
    return result;
}

std::vector<PipelineTrace> load_traces(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trace file: " + path.string());
    std::vector<PipelineTrace> traces;
    std::set<std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        PipelineTrace trace = trace_from_json(line);
        if (seen.insert(trace.caseId).second) traces.push_back(std::move(trace));
    }
    return traces;
}

EfficiencyReport build_efficiency(const std::vector<PipelineTrace>& traces) {
    EfficiencyReport report;
    report.cases = traces.size();
    for (const auto& trace : traces) {
        for (const auto& [stageName, usage] : trace.usage) {
            report.stageTotals[stageName].merge(usage);
        }
    }
    for (const auto& [stageName, usage] : report.stageTotals) {
        (void)stageName;
        report.total.merge(usage);
    }
    return report;
}

std::string efficiency_to_json(const EfficiencyReport& report) {
    auto usage_json = [&](const StageUsage& u) {
        json j;
        j["calls"] = u.calls;
        j["inTokens"] = u.inTokens;
        j["outTokens"] = u.outTokens;
        j["seconds"] = u.seconds;
        if (report.cases > 0) {
            auto n = static_cast<double>(report.cases);
            j["perCase"] = json{{"calls", static_cast<double>(u.calls) / n},
                                {"inTokens", static_cast<double>(u.inTokens) / n},
                                {"outTokens", static_cast<double>(u.outTokens) / n},
                                {"seconds", u.seconds / n}};
        }
        return j;
    };
    json j;
    j["cases"] = report.cases;
    json stages = json::object();
    for (const auto& [stageName, usage] : report.stageTotals) {
        stages[stageName] = usage_json(usage);
    }
    j["stages"] = std::move(stages);
    j["total"] = usage_json(report.total);
    return j.dump(2) + "\n";
}

namespace {

double subgroup_f1(const std::vector<PipelineTrace>& traces,
                   const std::map<std::string, const PatientRecord*>& byId,
                   const std::set<std::string>& subgroup, const AccuracyOptions& accuracy,
                   std::size_t* scored) {
    std::vector<std::set<std::string>> preds;
    std::vector<std::set<std::string>> refs;
    for (const auto& trace : traces) {
        if (!subgroup.count(trace.caseId)) continue;
        auto it = byId.find(trace.caseId);
        if (it == byId.end() || !it->second->groundTruth) continue;
        preds.push_back(trace.final_set());
        refs.push_back(it->second->ground_truth_set());
    }
    if (scored) *scored = preds.size();
    if (preds.empty()) return 0.0;
    return score_accuracy(preds, refs, accuracy).f1;
}

}  // namespace

std::vector<LooRow> run_loo(const std::vector<PatientRecord>& records, RunAssets& assets,
                            LlmBackend& backend, const PipelineConfig& pipeline,
                            const std::vector<std::string>& expertIds, int workers,
                            const AccuracyOptions& accuracy) {
    for (const auto& id : expertIds) {
        if (!assets.panel.find(id)) throw UnknownExpertId("expert not in panel: " + id);
    }

    std::map<std::string, const PatientRecord*> byId;
    for (const auto& record : records) byId[record.caseId] = &record;

    // Baseline traces, in memory (a temp trace file keeps run_batch reusable).
    auto tmpDir = std::filesystem::temp_directory_path() /
                  ("saferx-loo-" + fnv1a64_hex(std::to_string(
                                       std::chrono::steady_clock::now().time_since_epoch().count())));
    std::filesystem::create_directories(tmpDir);
    struct Cleanup {
        std::filesystem::path dir;
        ~Cleanup() {
            std::error_code ec;
            std::filesystem::remove_all(dir, ec);
        }
    } cleanup{tmpDir};

    run_batch(records, assets, backend, pipeline, tmpDir / "baseline.jsonl", workers, false);
    std::vector<PipelineTrace> baseline = load_traces(tmpDir / "baseline.jsonl");

    std::vector<LooRow> rows;
    for (const auto& expertId : expertIds) {
        LooRow row;
        row.expertId = expertId;

        std::set<std::string> subgroup;
        for (const auto& trace : baseline) {
            if (trace.routing.activated.count(expertId)) subgroup.insert(trace.caseId);
        }
        row.subgroupSize = subgroup.size();
        if (subgroup.empty()) {
            rows.push_back(row);
            continue;
        }

        std::vector<PatientRecord> subgroupRecords;
        for (const auto& record : records) {
            if (subgroup.count(record.caseId)) subgroupRecords.push_back(record);
        }
        PipelineConfig ablated = pipeline;
        ablated.droppedExperts.insert(expertId);
        auto ablatedPath = tmpDir / ("ablated-" + expertId + ".jsonl");
        run_batch(subgroupRecords, assets, backend, ablated, ablatedPath, workers, false);
        std::vector<PipelineTrace> ablatedTraces = load_traces(ablatedPath);

        row.baselineF1 = subgroup_f1(baseline, byId, subgroup, accuracy, &row.scoredCases);
        row.ablatedF1 = subgroup_f1(ablatedTraces, byId, subgroup, accuracy, nullptr);
        row.delta = row.baselineF1 - row.ablatedF1;
        rows.push_back(row);
    }
    return rows;
}

std::string loo_to_json(const std::vector<LooRow>& rows) {
    json arr = json::array();
    for (const auto& row : rows) {
        arr.push_back(json{{"expertId", row.expertId},
                           {"subgroupSize", row.subgroupSize},
                           {"scoredCases", row.scoredCases},
                           {"baselineF1", row.baselineF1},
                           {"ablatedF1", row.ablatedF1},
                           {"delta", row.delta}});
    }
    json j;
    j["experts"] = std::move(arr);
    return j.dump(2) + "\n";
}

DiagnosticsReport run_diagnostics(const std::vector<PipelineTrace>& traces,
                                  const std::vector<PatientRecord>& records) {
    std::map<std::string, const PatientRecord*> byId;
    for (const auto& record : records) byId[record.caseId] = &record;

    DiagnosticsReport report;
    std::map<std::string, DiagnosticsReport::ExpertRow> perExpert;

    for (const auto& trace : traces) {
        auto it = byId.find(trace.caseId);
        const PatientRecord* record = it == byId.end() ? nullptr : it->second;
        std::set<std::string> ref = record ? record->ground_truth_set() : std::set<std::string>{};
        bool scored = record && record->groundTruth.has_value();

        std::set<std::string> unionSet;
        std::map<std::string, int> support;
        for (const auto& [expertId, list] : trace.proposals) {
            auto& row = perExpert[expertId];
            row.expertId = expertId;
            for (const auto& p : list) {
                unionSet.insert(p.code);
                ++support[p.code];
                ++row.proposed;
            }
        }
        std::set<std::string> retained = trace.critique.result.retained_set();
        for (const auto& [expertId, list] : trace.proposals) {
            auto& row = perExpert[expertId];
            for (const auto& p : list) {
                if (retained.count(p.code)) {
                    ++row.retained;
                    if (ref.count(p.code)) ++row.truePositives;
                }
            }
        }
        for (const auto& removal : trace.critique.result.removed) {
            auto sIt = support.find(removal.code);
            ++report.removedBySupport[sIt == support.end() ? 0 : sIt->second];
        }
        for (const auto& verdict : trace.verdicts) {
            ++report.verdictActions[verdict_action_name(verdict.action)];
        }

        if (scored) {
            ++report.casesScored;
            auto count = [&](const std::set<std::string>& pred, double& tp, double& fp,
                             double& fn) {
                std::size_t inter = 0;
                for (const auto& code : pred) inter += ref.count(code);
                tp += static_cast<double>(inter);
                fp += static_cast<double>(pred.size() - inter);
                fn += static_cast<double>(ref.size() - inter);
            };
            count(unionSet, report.preTruePositives, report.preFalsePositives,
                  report.preFalseNegatives);
            count(retained, report.postTruePositives, report.postFalsePositives,
                  report.postFalseNegatives);
        }
    }

    if (report.casesScored > 0) {
        auto n = static_cast<double>(report.casesScored);
        report.preTruePositives /= n;
        report.preFalsePositives /= n;
        report.preFalseNegatives /= n;
        report.postTruePositives /= n;
        report.postFalsePositives /= n;
        report.postFalseNegatives /= n;
    }
    for (auto& [expertId, row] : perExpert) {
        (void)expertId;
        report.perExpert.push_back(row);
    }
    return report;
}

std::string diagnostics_to_json(const DiagnosticsReport& report) {
    json j;
    j["casesScored"] = report.casesScored;
    j["preCritique"] = json{{"truePositives", report.preTruePositives},
                            {"falsePositives", report.preFalsePositives},
                            {"falseNegatives", report.preFalseNegatives}};
    j["postCritique"] = json{{"truePositives", report.postTruePositives},
                             {"falsePositives", report.postFalsePositives},
                             {"falseNegatives", report.postFalseNegatives}};
    json removed = json::object();
    for (const auto& [support, count] : report.removedBySupport) {
        removed[std::to_string(support)] = count;
    }
    j["removedBySupport"] = std::move(removed);
    json experts = json::array();
    for (const auto& row : report.perExpert) {
        experts.push_back(json{{"expertId", row.expertId},
                               {"proposed", row.proposed},
                               {"retained", row.retained},
                               {"truePositives", row.truePositives}});
    }
    j["perExpert"] = std::move(experts);
    j["verdictActions"] = report.verdictActions;
    return j.dump(2) + "\n";
}

}  // namespace saferx
