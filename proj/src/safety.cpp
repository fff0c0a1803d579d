#include "saferx/safety.hpp"

#include <algorithm>
#include <future>

namespace saferx {

using nlohmann::json;

std::string flag_relation_name(FlagRelation r) {
    return r == FlagRelation::Ddi ? "ddi" : "contra";
}

FlagRelation parse_flag_relation(const std::string& name) {
    if (name == "ddi") return FlagRelation::Ddi;
    if (name == "contra") return FlagRelation::Contra;
    throw SchemaError("unknown flag relation: " + name);
}

std::string verdict_action_name(VerdictAction a) {
    return a == VerdictAction::Retain ? "RET" : "REM";
}

VerdictAction parse_verdict_action(const std::string& name) {
    if (name == "RET") return VerdictAction::Retain;
    if (name == "REM") return VerdictAction::Remove;
    throw SchemaError("unknown verdict action: " + name);
}

std::vector<Flag> find_flags(const std::set<std::string>& candidates,
                             const std::vector<std::string>& targetDiagKeys,
                             const std::set<std::string>& priorMeds, const SafetyKb& kb) {
    std::vector<Flag> flags;
    std::vector<std::string> meds(candidates.begin(), candidates.end());
    int nextPairId = 0;

    for (std::size_t i = 0; i < meds.size(); ++i) {
        for (std::size_t j = i + 1; j < meds.size(); ++j) {
            if (!kb.ddi.binary(meds[i], meds[j])) continue;
            int pairId = nextPairId++;
            int degreeI = kb.ddi.degree(meds[i]);
            int degreeJ = kb.ddi.degree(meds[j]);
            bool priorI = priorMeds.count(meds[i]) != 0;
            bool priorJ = priorMeds.count(meds[j]) != 0;

            Flag a;
            a.med = meds[i];
            a.relation = FlagRelation::Ddi;
            a.partnerMed = meds[j];
            a.degreeSelf = degreeI;
            a.degreePartner = degreeJ;
            a.isPriorMed = priorI;
            a.partnerIsPriorMed = priorJ;
            a.pairId = pairId;
            flags.push_back(std::move(a));

            Flag b;
            b.med = meds[j];
            b.relation = FlagRelation::Ddi;
            b.partnerMed = meds[i];
            b.degreeSelf = degreeJ;
            b.degreePartner = degreeI;
            b.isPriorMed = priorJ;
            b.partnerIsPriorMed = priorI;
            b.pairId = pairId;
            flags.push_back(std::move(b));
        }
    }

    std::vector<std::string> diagKeys = targetDiagKeys;
    std::sort(diagKeys.begin(), diagKeys.end());
    diagKeys.erase(std::unique(diagKeys.begin(), diagKeys.end()), diagKeys.end());
    for (const auto& med : meds) {
        for (const auto& diagKey : diagKeys) {
            if (!kb.contra.binary(med, diagKey)) continue;
            Flag f;
            f.med = med;
            f.relation = FlagRelation::Contra;
            f.diag = diagKey;
            f.degreeSelf = kb.ddi.degree(med);
            f.isPriorMed = priorMeds.count(med) != 0;
            f.pairId = nextPairId++;
            flags.push_back(std::move(f));
        }
    }
    return flags;
}

namespace {

std::string render_verify_user(const std::vector<Flag>& flags,
                               const std::set<std::string>& candidates,
                               const PatientRecord& record, const SafetyKb& kb,
                               const DescriptionResolver& resolver,
                               const PromptLibrary& prompts) {
    auto prior = record.prior_medications();

    std::vector<std::string> candidateLines;
    for (const auto& med : candidates) {
        std::string line = "- " + med + ": " + resolver.medication_name(med);
        if (prior.count(med)) line += " [PRIOR-MED]";
        candidateLines.push_back(std::move(line));
    }

    std::vector<std::string> priorLines;
    for (const auto& med : prior) {
        priorLines.push_back("- " + med + ": " + resolver.medication_name(med));
    }

    std::vector<std::string> ddiLines;
    std::set<int> renderedPairs;
    std::vector<std::string> contraLines;
    for (const auto& flag : flags) {
        if (flag.relation == FlagRelation::Ddi) {
            if (!renderedPairs.insert(flag.pairId).second) continue;
            std::string line = "- " + flag.med + " (degree=" + std::to_string(flag.degreeSelf) + ")";
            if (flag.isPriorMed) line += " [PRIOR]";
            line += " <-> " + *flag.partnerMed +
                    " (degree=" + std::to_string(flag.degreePartner.value_or(0)) + ")";
            if (flag.partnerIsPriorMed.value_or(false)) line += " [PRIOR]";
            ddiLines.push_back(std::move(line));
        } else {
            std::string diagName;
            if (flag.diag) {
                diagName = resolver.diagnosis_name(
                    IcdCode{*flag.diag, IcdVersion::Icd10Cm, IcdKind::Diagnosis});
            }
            std::string line = "- " + flag.med + " <-> diagnosis " + flag.diag.value_or("?");
            if (!diagName.empty() && diagName != flag.diag.value_or("")) {
                line += " (" + diagName + ")";
            }
            contraLines.push_back(std::move(line));
        }
    }
    (void)kb;

    auto block = [](const std::vector<std::string>& lines) {
        return lines.empty() ? std::string("none") : join(lines, "\n");
    };
    return prompts.render("verify.user", {
                                             {"candidates", block(candidateLines)},
                                             {"prior_meds", block(priorLines)},
                                             {"ddi_flags", block(ddiLines)},
                                             {"contra_flags", block(contraLines)},
                                         });
}

}  // namespace

VerifyOutcome verify(const std::vector<Flag>& flags, const std::set<std::string>& candidates,
                     const PatientRecord& record, const SafetyKb& kb,
                     const DescriptionResolver& resolver, LlmBackend& backend,
                     const PromptLibrary& prompts, const AgentOptions& options,
                     const VerifyOptions& verifyOptions, UsageByStage& usage) {
    VerifyOutcome outcome;
    if (flags.empty()) return outcome;  // nothing to adjudicate, no call

    std::set<std::string> flaggedMeds;
    for (const auto& flag : flags) flaggedMeds.insert(flag.med);

    auto settle_all = [&](VerdictAction action, const std::string& reason) {
        outcome.verdicts.clear();
        outcome.removed.clear();
        outcome.replacements.clear();
        for (const auto& flag : flags) {
            Verdict v;
            v.flag = flag;
            v.action = action;
            v.reason = reason;
            outcome.verdicts.push_back(std::move(v));
            if (action == VerdictAction::Remove) outcome.removed.insert(flag.med);
        }
    };

    std::string system = prompts.render("verify.system", {});
    std::string user = render_verify_user(flags, candidates, record, kb, resolver, prompts);

    json parsed;
    try {
        Completion completion =
            backend.complete(system, user, options.verifyTemperature, options.maxOutputTokens,
                             CallTag{stage::Verify, record.caseId, ""});
        usage[stage::Verify].add(completion);
        auto maybe = parse_json_lenient(completion.text);
        if (!maybe) throw UnparsableOutput("verification output is not a JSON object");
        parsed = std::move(*maybe);
    } catch (const Error&) {
        outcome.failedOpen = !verifyOptions.failClosed;
        if (verifyOptions.failClosed) {
            settle_all(VerdictAction::Remove, "verification unavailable; removed per fail-closed policy");
        } else {
            settle_all(VerdictAction::Retain, "verification unavailable; retained");
        }
        return outcome;
    }

    std::map<std::string, std::pair<std::string, std::optional<std::string>>> removals;
    if (parsed.contains("removed_drugs") && parsed.at("removed_drugs").is_array()) {
        for (const auto& entry : parsed.at("removed_drugs")) {
            std::string code;
            std::string reason;
            std::optional<std::string> replacement;
            if (entry.is_string()) {
                code = entry.get<std::string>();
            } else if (entry.is_object() && entry.contains("code") &&
                       entry.at("code").is_string()) {
                code = entry.at("code").get<std::string>();
                reason = entry.value("reason", "");
                if (entry.contains("replacement") && entry.at("replacement").is_string()) {
                    replacement = entry.at("replacement").get<std::string>();
                }
            } else {
                continue;
            }
            try {
                code = to_l4(parse_atc(code)).text;
            } catch (const Error&) {
                continue;
            }
            if (!flaggedMeds.count(code)) {
                // Only flagged medications are up for adjudication here.
                ++outcome.ignoredUnflaggedRemovals;
                continue;
            }
            removals[code] = {reason, replacement};
        }
    }

    for (const auto& [med, detail] : removals) {
        outcome.removed.insert(med);
        if (!detail.second || !verifyOptions.acceptReplacements) continue;
        std::string candidate;
        try {
            candidate = to_l4(parse_atc(*detail.second)).text;
        } catch (const Error&) {
            ++outcome.droppedReplacements;
            continue;
        }
        // A valid substitute is a different vocabulary class in the same
        // 4-character subgroup.
        bool sameSubgroup = candidate.substr(0, 4) == med.substr(0, 4);
        if (candidate != med && sameSubgroup && kb.ddi.vocab().contains(candidate)) {
            outcome.replacements[med] = candidate;
        } else {
            ++outcome.droppedReplacements;
        }
    }

    for (const auto& flag : flags) {
        Verdict v;
        v.flag = flag;
        auto it = removals.find(flag.med);
        if (it != removals.end()) {
            v.action = VerdictAction::Remove;
            v.reason = it->second.first;
            auto rep = outcome.replacements.find(flag.med);
            if (rep != outcome.replacements.end()) v.replacement = rep->second;
        } else {
            v.action = VerdictAction::Retain;
            v.reason = "";
        }
        outcome.verdicts.push_back(std::move(v));
    }
    return outcome;
}

namespace {

/// Everything one expert contributes, gathered off-thread and merged in
/// panel order for deterministic traces.
struct ExpertContribution {
    std::string expertId;
    std::optional<ExpertSummary> summary;
    std::vector<Proposal> proposals;
    UsageByStage usage;
    std::vector<std::string> notes;
};

ExpertContribution run_expert(const Expert& expert, const PatientRecord& record,
                              const SerializedCase& serialized, const IndicationMap* indications,
                              const MedVocab& vocab, const DescriptionResolver& resolver,
                              LlmBackend& backend, const PromptLibrary& prompts,
                              const PipelineConfig& config) {
    ExpertContribution out;
    out.expertId = expert.id;

    if (config.agents.useSummarizer) {
        try {
            out.summary = summarize(expert, record, serialized, backend, prompts,
                                    config.agents, out.usage);
        } catch (const Error& e) {
            out.notes.push_back("expert " + expert.id + " summarize failed: " + e.what());
        }
    }

    try {
        GenerateOutcome gen =
            generate(expert, out.summary, record, serialized, indications, vocab, resolver,
                     backend, prompts, config.agents, out.usage);
        out.proposals = std::move(gen.proposals);
        if (gen.droppedMalformed || gen.droppedOutOfVocab) {
            out.notes.push_back("expert " + expert.id + " dropped " +
                                std::to_string(gen.droppedMalformed) + " malformed and " +
                                std::to_string(gen.droppedOutOfVocab) +
                                " out-of-vocabulary codes");
        }
    } catch (const Error& e) {
        out.notes.push_back("expert " + expert.id + " generate failed: " + e.what());
    }
    return out;
}

}  // namespace

PipelineTrace run_case(const PatientRecord& record, const Panel& panel,
                       const Taxonomy& diagnosisTaxonomy, const DescriptionResolver& resolver,
                       const SafetyKb& kb, const MedVocab& vocab, LlmBackend& backend,
                       const PromptLibrary& prompts, const PipelineConfig& config) {
    PipelineTrace trace;
    trace.caseId = record.caseId;
    trace.emptyTarget = record.empty_target();

    SerializedCase serialized = serialize(record, resolver);

    // Stage: route. Deterministic, no model calls.
    std::vector<const Expert*> active;
    if (config.useExperts) {
        trace.routing = route(record, panel, diagnosisTaxonomy, config.routing);
        for (const auto& expert : panel.experts()) {
            if (trace.routing.activated.count(expert.id) &&
                !config.droppedExperts.count(expert.id)) {
                active.push_back(&expert);
            }
        }
    } else {
        const Expert& generalist = panel.generalist();
        if (generalist.id.empty()) {
            throw ConfigError("expert ablation requires a generalist in the panel config");
        }
        trace.routing.activated.insert(generalist.id);
        if (!config.droppedExperts.count(generalist.id)) active.push_back(&generalist);
    }
    trace.usage[stage::Route] = StageUsage{};

    const IndicationMap* indications = config.agents.useIndications ? &kb.indications : nullptr;

    // Stage: per-expert summarize + generate, concurrent across experts.
    std::vector<std::future<ExpertContribution>> futures;
    futures.reserve(active.size());
    for (const Expert* expert : active) {
        futures.push_back(std::async(std::launch::async, [&, expert] {
            return run_expert(*expert, record, serialized, indications, vocab, resolver,
                              backend, prompts, config);
        }));
    }
    std::vector<ExpertContribution> contributions;
    contributions.reserve(futures.size());
    for (auto& f : futures) contributions.push_back(f.get());

    trace.usage[stage::Summarize] = StageUsage{};
    trace.usage[stage::Generate] = StageUsage{};
    for (auto& c : contributions) {
        if (c.summary) trace.summaries.emplace(c.expertId, std::move(*c.summary));
        trace.proposals[c.expertId] = std::move(c.proposals);
        for (auto& [stageName, stageUsage] : c.usage) {
            trace.usage[stageName].merge(stageUsage);
        }
        for (auto& note : c.notes) trace.expertNotes.push_back(std::move(note));
    }

    // Stage: critique over the proposal union.
    trace.usage[stage::Critique] = StageUsage{};
    std::set<std::string> unionSet;
    for (const auto& [expertId, list] : trace.proposals) {
        (void)expertId;
        for (const auto& p : list) unionSet.insert(p.code);
    }
    if (config.useCritique) {
        CritiqueExecution exec =
            critique(trace.proposals, trace.summaries, record, serialized, indications,
                     resolver, backend, prompts, config.agents, trace.usage);
        trace.critique.result = std::move(exec.result);
        trace.critique.skipped = exec.skipped;
        trace.critique.fallback = exec.fallback;
        trace.critique.discardedAdditions = exec.discardedAdditions;
        trace.critique.note = exec.note;
        if (exec.fallback) trace.warnings.push_back("critique fell back to the full union");
    } else {
        trace.critique.skipped = true;
        trace.critique.note = "critique disabled by configuration";
        trace.critique.result.retained.assign(unionSet.begin(), unionSet.end());
    }

    std::set<std::string> retained = trace.critique.result.retained_set();

    // Stage: deterministic flag lookup.
    trace.usage[stage::FindFlags] = StageUsage{};
    trace.usage[stage::Verify] = StageUsage{};
    std::set<std::string> finalSet = retained;
    if (config.useSafety) {
        std::vector<std::string> diagKeys;
        for (const auto& diag : record.target.diagnoses) diagKeys.push_back(pre_decimal(diag));
        trace.flags = find_flags(retained, diagKeys, record.prior_medications(), kb);

        // Stage: batched verification, one call, only when flags exist.
        if (!trace.flags.empty()) {
            VerifyOutcome outcome =
                verify(trace.flags, retained, record, kb, resolver, backend, prompts,
                       config.agents, config.verify, trace.usage);
            trace.verdicts = std::move(outcome.verdicts);
            trace.verifyFailedOpen = outcome.failedOpen;
            trace.replacements = outcome.replacements;
            if (outcome.failedOpen) {
                trace.warnings.push_back("verification failed open; all flags retained");
            }
            if (outcome.droppedReplacements) {
                trace.warnings.push_back(std::to_string(outcome.droppedReplacements) +
                                         " proposed replacement(s) failed validation");
            }
            if (outcome.ignoredUnflaggedRemovals) {
                trace.warnings.push_back(std::to_string(outcome.ignoredUnflaggedRemovals) +
                                         " removal(s) of unflagged codes ignored");
            }
            for (const auto& med : outcome.removed) finalSet.erase(med);
            for (const auto& [removed, substitute] : outcome.replacements) {
                (void)removed;
                finalSet.insert(substitute);
            }
        }
    }

    trace.finalMeds.assign(finalSet.begin(), finalSet.end());
    return trace;
}

namespace {

json flag_to_json(const Flag& flag) {
    json j;
    j["med"] = flag.med;
    j["relation"] = flag_relation_name(flag.relation);
    if (flag.partnerMed) j["partnerMed"] = *flag.partnerMed;
    if (flag.diag) j["diag"] = *flag.diag;
    j["degreeSelf"] = flag.degreeSelf;
    if (flag.degreePartner) j["degreePartner"] = *flag.degreePartner;
    j["isPriorMed"] = flag.isPriorMed;
    if (flag.partnerIsPriorMed) j["partnerIsPriorMed"] = *flag.partnerIsPriorMed;
    j["pairId"] = flag.pairId;
    return j;
}

Flag flag_from_json(const json& j) {
    Flag flag;
    flag.med = j.at("med").get<std::string>();
    flag.relation = parse_flag_relation(j.at("relation").get<std::string>());
    if (j.contains("partnerMed")) flag.partnerMed = j.at("partnerMed").get<std::string>();
    if (j.contains("diag")) flag.diag = j.at("diag").get<std::string>();
    flag.degreeSelf = j.value("degreeSelf", 0);
    if (j.contains("degreePartner")) flag.degreePartner = j.at("degreePartner").get<int>();
    flag.isPriorMed = j.value("isPriorMed", false);
    if (j.contains("partnerIsPriorMed")) {
        flag.partnerIsPriorMed = j.at("partnerIsPriorMed").get<bool>();
    }
    flag.pairId = j.value("pairId", 0);
    return flag;
}

json summary_to_json(const ExpertSummary& s) {
    json j = json::parse(s.to_json());
    return j;
}

ExpertSummary summary_from_json(const json& j) {
    ExpertSummary s;
    s.expertise = j.value("expertise", "");
    s.currentAdmission = j.value("current_admission", "");
    s.medicationRelevantHistory = j.value("medication_relevant_history", "");
    s.expertiseFocus = j.value("expertise_focus", "");
    s.risksToWatch = j.value("risks_to_watch", "");
    if (j.contains("visit_rationales")) {
        for (const auto& r : j.at("visit_rationales")) {
            s.visitRationales.push_back(
                VisitRationale{r.value("visit", 0), r.value("text", "")});
        }
    }
    return s;
}

}  // namespace

std::string trace_to_json(const PipelineTrace& trace) {
    json j;
    j["caseId"] = trace.caseId;
    j["emptyTarget"] = trace.emptyTarget;
    j["routing"] = {{"scores", trace.routing.scores},
                    {"activated", std::vector<std::string>(trace.routing.activated.begin(),
                                                           trace.routing.activated.end())}};
    json summaries = json::object();
    for (const auto& [expertId, summary] : trace.summaries) {
        summaries[expertId] = summary_to_json(summary);
    }
    j["summaries"] = std::move(summaries);

    json proposals = json::object();
    for (const auto& [expertId, list] : trace.proposals) {
        json arr = json::array();
        for (const auto& p : list) {
            arr.push_back(json{{"code", p.code},
                               {"confidence", p.confidence},
                               {"reason", p.reason}});
        }
        proposals[expertId] = std::move(arr);
    }
    j["proposals"] = std::move(proposals);
    j["expertNotes"] = trace.expertNotes;

    json critique;
    critique["retained"] = trace.critique.result.retained;
    json removed = json::array();
    for (const auto& r : trace.critique.result.removed) {
        removed.push_back(json{{"code", r.code}, {"reason", r.reason}});
    }
    critique["removed"] = std::move(removed);
    critique["skipped"] = trace.critique.skipped;
    critique["fallback"] = trace.critique.fallback;
    critique["discardedAdditions"] = trace.critique.discardedAdditions;
    critique["note"] = trace.critique.note;
    j["critique"] = std::move(critique);

    json flags = json::array();
    for (const auto& f : trace.flags) flags.push_back(flag_to_json(f));
    j["flags"] = std::move(flags);

    json verdicts = json::array();
    for (const auto& v : trace.verdicts) {
        json vj;
        vj["flag"] = flag_to_json(v.flag);
        vj["action"] = verdict_action_name(v.action);
        vj["reason"] = v.reason;
        if (v.replacement) vj["replacement"] = *v.replacement;
        verdicts.push_back(std::move(vj));
    }
    j["verdicts"] = std::move(verdicts);
    j["verifyFailedOpen"] = trace.verifyFailedOpen;
    j["replacements"] = trace.replacements;
    j["final"] = trace.finalMeds;

    json usage = json::object();
    for (const auto& [stageName, u] : trace.usage) {
        usage[stageName] = json{{"calls", u.calls},
                                {"inTokens", u.inTokens},
                                {"outTokens", u.outTokens},
                                {"seconds", u.seconds}};
    }
    j["usage"] = std::move(usage);
    j["warnings"] = trace.warnings;
    return j.dump();
}

PipelineTrace trace_from_json(const std::string& text) {
    json j = json::parse(text);
    PipelineTrace trace;
    trace.caseId = j.at("caseId").get<std::string>();
    trace.emptyTarget = j.value("emptyTarget", false);
    if (j.contains("routing")) {
        const json& r = j.at("routing");
        if (r.contains("scores")) {
            trace.routing.scores = r.at("scores").get<std::map<std::string, double>>();
        }
        if (r.contains("activated")) {
            for (const auto& id : r.at("activated")) {
                trace.routing.activated.insert(id.get<std::string>());
            }
        }
    }
    if (j.contains("summaries")) {
        for (const auto& [expertId, sj] : j.at("summaries").items()) {
            trace.summaries[expertId] = summary_from_json(sj);
        }
    }
    if (j.contains("proposals")) {
        for (const auto& [expertId, arr] : j.at("proposals").items()) {
            std::vector<Proposal> list;
            for (const auto& pj : arr) {
                Proposal p;
                p.code = pj.at("code").get<std::string>();
                p.confidence = pj.value("confidence", 0.5);
                p.reason = pj.value("reason", "");
                p.expertId = expertId;
                list.push_back(std::move(p));
            }
            trace.proposals[expertId] = std::move(list);
        }
    }
    if (j.contains("expertNotes")) {
        trace.expertNotes = j.at("expertNotes").get<std::vector<std::string>>();
    }
    if (j.contains("critique")) {
        const json& c = j.at("critique");
        if (c.contains("retained")) {
            trace.critique.result.retained = c.at("retained").get<std::vector<std::string>>();
        }
        if (c.contains("removed")) {
            for (const auto& rj : c.at("removed")) {
                trace.critique.result.removed.push_back(
                    CritiqueResult::Removal{rj.value("code", ""), rj.value("reason", "")});
            }
        }
        trace.critique.skipped = c.value("skipped", false);
        trace.critique.fallback = c.value("fallback", false);
        trace.critique.discardedAdditions = c.value("discardedAdditions", std::size_t{0});
        trace.critique.note = c.value("note", "");
    }
    if (j.contains("flags")) {
        for (const auto& fj : j.at("flags")) trace.flags.push_back(flag_from_json(fj));
    }
    if (j.contains("verdicts")) {
        for (const auto& vj : j.at("verdicts")) {
            Verdict v;
            v.flag = flag_from_json(vj.at("flag"));
            v.action = parse_verdict_action(vj.at("action").get<std::string>());
            v.reason = vj.value("reason", "");
            if (vj.contains("replacement")) {
                v.replacement = vj.at("replacement").get<std::string>();
            }
            trace.verdicts.push_back(std::move(v));
        }
    }
    trace.verifyFailedOpen = j.value("verifyFailedOpen", false);
    if (j.contains("replacements")) {
        trace.replacements = j.at("replacements").get<std::map<std::string, std::string>>();
    }
    if (j.contains("final")) {
        trace.finalMeds = j.at("final").get<std::vector<std::string>>();
    }
    if (j.contains("usage")) {
        for (const auto& [stageName, uj] : j.at("usage").items()) {
            StageUsage u;
            u.calls = uj.value("calls", 0L);
            u.inTokens = uj.value("inTokens", 0L);
            u.outTokens = uj.value("outTokens", 0L);
            u.seconds = uj.value("seconds", 0.0);
            trace.usage[stageName] = u;
        }
    }
    if (j.contains("warnings")) {
        trace.warnings = j.at("warnings").get<std::vector<std::string>>();
    }
    return trace;
}

}  // namespace saferx
