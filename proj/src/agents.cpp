#include "saferx/agents.hpp"

#include <algorithm>

namespace saferx {

using nlohmann::json;

std::string ExpertSummary::to_json() const {
    json j;
    j["expertise"] = expertise;
    j["current_admission"] = currentAdmission;
    j["medication_relevant_history"] = medicationRelevantHistory;
    j["expertise_focus"] = expertiseFocus;
    j["risks_to_watch"] = risksToWatch;
    json rationales = json::array();
    for (const auto& r : visitRationales) {
        rationales.push_back(json{{"visit", r.visitIndex}, {"text", r.text}});
    }
    j["visit_rationales"] = std::move(rationales);
    return j.dump();
}

PromptLibrary PromptLibrary::load(const std::filesystem::path& dir) {
    PromptLibrary lib;
    if (!std::filesystem::is_directory(dir)) {
        throw ConfigError("prompt directory not found: " + dir.string());
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        lib.templates_[entry.path().stem().string()] = read_text_file(entry.path());
    }
    if (lib.templates_.empty()) {
        throw ConfigError("prompt directory has no templates: " + dir.string());
    }
    return lib;
}

std::string PromptLibrary::render(const std::string& name,
                                  const std::map<std::string, std::string>& slots) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw ConfigError("unknown prompt template: " + name);
    std::string out = it->second;
    for (const auto& [key, value] : slots) {
        std::string token = "{" + key + "}";
        std::size_t pos = 0;
        while ((pos = out.find(token, pos)) != std::string::npos) {
            out.replace(pos, token.size(), value);
            pos += value.size();
        }
    }
    return out;
}

std::vector<std::string> indication_candidates(const PatientRecord& record,
                                               const IndicationMap& indications,
                                               std::size_t maxCandidates) {
    std::set<std::string> candidates;
    for (const auto& diag : record.target.diagnoses) {
        if (const auto* meds = indications.find(pre_decimal(diag))) {
            candidates.insert(meds->begin(), meds->end());
        }
    }
    std::vector<std::string> out(candidates.begin(), candidates.end());
    if (out.size() > maxCandidates) out.resize(maxCandidates);
    return out;
}

namespace {

std::string render_code_lines(const std::vector<std::string>& codes,
                              const DescriptionResolver& resolver) {
    if (codes.empty()) return "none";
    std::vector<std::string> lines;
    lines.reserve(codes.size());
    for (const auto& code : codes) {
        lines.push_back("- " + code + ": " + resolver.medication_name(code));
    }
    return join(lines, "\n");
}

std::string render_prior_meds(const PatientRecord& record,
                              const DescriptionResolver& resolver) {
    auto prior = record.prior_medications();
    return render_code_lines({prior.begin(), prior.end()}, resolver);
}

std::string require_string_field(const json& j, const char* field) {
    if (!j.contains(field) || !j.at(field).is_string()) {
        throw UnparsableOutput(std::string("summary output missing field '") + field + "'");
    }
    return j.at(field).get<std::string>();
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

ExpertSummary summarize(const Expert& expert, const PatientRecord& record,
                        const SerializedCase& serialized, LlmBackend& backend,
                        const PromptLibrary& prompts, const AgentOptions& options,
                        UsageByStage& usage) {
    std::string system = prompts.render("summarize.system",
                                        {{"expert_name", expert.name},
                                         {"expert_id", expert.id},
                                         {"playbook", expert.playbook}});
    std::string user = prompts.render("summarize.user", {{"patient_text", serialized.text}});

    Completion completion =
        backend.complete(system, user, options.summarizeTemperature, options.maxOutputTokens,
                         CallTag{stage::Summarize, record.caseId, expert.id});
    usage[stage::Summarize].add(completion);

    auto parsed = parse_json_lenient(completion.text);
    if (!parsed) throw UnparsableOutput("summary output is not a JSON object");

    ExpertSummary summary;
    summary.expertise = require_string_field(*parsed, "expertise");
    summary.currentAdmission = require_string_field(*parsed, "current_admission");
    summary.medicationRelevantHistory =
        require_string_field(*parsed, "medication_relevant_history");
    summary.expertiseFocus = require_string_field(*parsed, "expertise_focus");
    summary.risksToWatch = require_string_field(*parsed, "risks_to_watch");

    if (parsed->contains("visit_rationales") && parsed->at("visit_rationales").is_array()) {
        for (const auto& r : parsed->at("visit_rationales")) {
            if (!r.is_object() || !r.contains("visit") || !r.contains("text")) continue;
            if (!r.at("visit").is_number_integer() || !r.at("text").is_string()) continue;
            int idx = r.at("visit").get<int>();
            // Rationales must point at real history visits.
            if (idx < 1 || static_cast<std::size_t>(idx) > record.history.size()) continue;
            summary.visitRationales.push_back(
                VisitRationale{idx, r.at("text").get<std::string>()});
        }
    }
    return summary;
}

GenerateOutcome generate(const Expert& expert, const std::optional<ExpertSummary>& summary,
                         const PatientRecord& record, const SerializedCase& serialized,
                         const IndicationMap* indications, const MedVocab& vocab,
                         const DescriptionResolver& resolver, LlmBackend& backend,
                         const PromptLibrary& prompts, const AgentOptions& options,
                         UsageByStage& usage) {
    std::string summaryBlock =
        summary ? summary->to_json()
                : "(no structured summary available; work from the patient record below)";

    std::vector<std::string> candidates;
    if (indications && options.useIndications) {
        candidates = indication_candidates(record, *indications, options.maxIndicationCandidates);
    }

    std::map<std::string, std::string> slots = {
        {"expert_name", expert.name},
        {"expert_id", expert.id},
        {"checklist", expert.checklist},
        {"summary_json", summaryBlock},
        {"prior_meds", render_prior_meds(record, resolver)},
        {"medi_candidates", render_code_lines(candidates, resolver)},
        {"patient_text", serialized.text},
        {"revision_block", ""},
    };
    std::string system = prompts.render("generate.system", slots);
    std::string user = prompts.render("generate.user", slots);

    GenerateOutcome outcome;
    auto run_pass = [&](const std::string& userPrompt) -> std::optional<json> {
        Completion completion =
            backend.complete(system, userPrompt, options.generateTemperature,
                             options.maxOutputTokens,
                             CallTag{stage::Generate, record.caseId, expert.id});
        usage[stage::Generate].add(completion);
        return parse_json_lenient(completion.text);
    };

    auto parsed = run_pass(user);
    if (!parsed) throw UnparsableOutput("generation output is not a JSON object");

    if (options.revisionRound) {
        // Optional self-revision: feed the first answer back for adjustment.
        slots["revision_block"] =
            "\nRevision feedback:\nReview your previous answer below and correct any code "
            "without direct input support; keep everything else unchanged.\nPrevious "
            "answer:\n" +
            parsed->dump();
        std::string revisedUser = prompts.render("generate.user", slots);
        if (auto revised = run_pass(revisedUser)) parsed = revised;
    }

    if (!parsed->contains("predicted_drugs") || !parsed->at("predicted_drugs").is_array()) {
        throw UnparsableOutput("generation output lacks a predicted_drugs array");
    }

    std::set<std::string> seen;
    for (const auto& entry : parsed->at("predicted_drugs")) {
        std::string rawCode;
        double confidence = 0.5;
        std::string reason;
        if (entry.is_string()) {
            rawCode = entry.get<std::string>();
        } else if (entry.is_object() && entry.contains("code") &&
                   entry.at("code").is_string()) {
            rawCode = entry.at("code").get<std::string>();
            if (entry.contains("confidence") && entry.at("confidence").is_number()) {
                confidence = clamp01(entry.at("confidence").get<double>());
            }
            reason = entry.value("reason", "");
        } else {
            ++outcome.droppedMalformed;
            continue;
        }

        std::string classCode;
        try {
            AtcCode parsedCode = parse_atc(rawCode);
            if (parsedCode.level == AtcLevel::Level5) ++outcome.normalizedToClass;
            classCode = to_l4(parsedCode).text;
        } catch (const Error&) {
            ++outcome.droppedMalformed;
            continue;
        }
        if (!vocab.contains(classCode)) {
            ++outcome.droppedOutOfVocab;
            continue;
        }
        if (!seen.insert(classCode).second) continue;
        outcome.proposals.push_back(Proposal{classCode, confidence, reason, expert.id});
    }
    return outcome;
}

CritiqueExecution critique(const std::map<std::string, std::vector<Proposal>>& proposals,
                           const std::map<std::string, ExpertSummary>& summaries,
                           const PatientRecord& record, const SerializedCase& serialized,
                           const IndicationMap* indications,
                           const DescriptionResolver& resolver, LlmBackend& backend,
                           const PromptLibrary& prompts, const AgentOptions& options,
                           UsageByStage& usage) {
    CritiqueExecution exec;

    std::set<std::string> unionSet;
    for (const auto& [expertId, list] : proposals) {
        (void)expertId;
        for (const auto& p : list) unionSet.insert(p.code);
    }
    if (unionSet.empty()) {
        exec.skipped = true;
        return exec;
    }
    std::vector<std::string> unionCodes(unionSet.begin(), unionSet.end());

    auto retain_all = [&](const std::string& why) {
        exec.fallback = true;
        exec.note = why;
        exec.result.retained = unionCodes;
        exec.result.removed.clear();
    };

    std::string proposalBlock;
    for (const auto& [expertId, list] : proposals) {
        proposalBlock += "Expert " + expertId + ":\n";
        if (list.empty()) proposalBlock += "- (no proposals)\n";
        for (const auto& p : list) {
            char conf[32];
            std::snprintf(conf, sizeof(conf), "%.2f", p.confidence);
            proposalBlock += "- " + p.code + " (" + resolver.medication_name(p.code) +
                             ", confidence " + conf + "): " + (p.reason.empty() ? "no reason given" : p.reason) +
                             "\n";
        }
    }
    std::string summaryBlock;
    for (const auto& [expertId, summary] : summaries) {
        summaryBlock += "Expert " + expertId + " summary: " + summary.to_json() + "\n";
    }
    if (summaryBlock.empty()) summaryBlock = "none\n";

    std::vector<std::string> candidates;
    if (indications && options.useIndications) {
        candidates = indication_candidates(record, *indications, options.maxIndicationCandidates);
    }

    std::map<std::string, std::string> slots = {
        {"summaries", trim(summaryBlock)},
        {"proposals", trim(proposalBlock)},
        {"prior_meds", render_prior_meds(record, resolver)},
        {"medi_candidates", render_code_lines(candidates, resolver)},
        {"union_codes", render_code_lines(unionCodes, resolver)},
        {"patient_text", serialized.text},
    };
    std::string system = prompts.render("critique.system", slots);
    std::string user = prompts.render("critique.user", slots);

    json parsed;
    try {
        Completion completion =
            backend.complete(system, user, options.critiqueTemperature,
                             options.maxOutputTokens, CallTag{stage::Critique, record.caseId, ""});
        usage[stage::Critique].add(completion);
        auto maybe = parse_json_lenient(completion.text);
        if (!maybe) {
            retain_all("critique output unparsable; full union retained");
            return exec;
        }
        parsed = std::move(*maybe);
    } catch (const BackendError& e) {
        retain_all(std::string("critique call failed; full union retained: ") + e.what());
        return exec;
    }

    std::set<std::string> keepMentioned;
    std::map<std::string, std::string> removeMentioned;
    auto mention = [&](const json& value, bool isRemoval) {
        std::string code;
        std::string reason;
        if (value.is_string()) {
            code = value.get<std::string>();
        } else if (value.is_object() && value.contains("code") &&
                   value.at("code").is_string()) {
            code = value.at("code").get<std::string>();
            reason = value.value("reason", "");
        } else {
            return;
        }
        try {
            code = to_l4(parse_atc(code)).text;
        } catch (const Error&) {
            ++exec.discardedAdditions;
            return;
        }
        if (!unionSet.count(code)) {
            ++exec.discardedAdditions;  // inventing codes is not allowed
            return;
        }
        if (isRemoval) {
            removeMentioned.emplace(code, reason);
        } else {
            keepMentioned.insert(code);
        }
    };
    if (parsed.contains("retained") && parsed.at("retained").is_array()) {
        for (const auto& v : parsed.at("retained")) mention(v, false);
    }
    if (parsed.contains("removed") && parsed.at("removed").is_array()) {
        for (const auto& v : parsed.at("removed")) mention(v, true);
    }

    // Partition reconciliation: removals must be union members not also kept;
    // anything unmentioned stays in by default (in doubt, keep).
    for (const auto& code : unionCodes) {
        auto rm = removeMentioned.find(code);
        if (rm != removeMentioned.end() && !keepMentioned.count(code)) {
            exec.result.removed.push_back(CritiqueResult::Removal{code, rm->second});
        } else {
            exec.result.retained.push_back(code);
        }
    }
    return exec;
}

}  // namespace saferx
