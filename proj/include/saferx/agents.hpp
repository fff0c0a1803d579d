#ifndef SAFERX_AGENTS_HPP
#define SAFERX_AGENTS_HPP

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "saferx/backend.hpp"
#include "saferx/ehr.hpp"
#include "saferx/knowledge.hpp"
#include "saferx/panel.hpp"

namespace saferx {

/// Per-stage call accounting. Seconds come from backend-reported latency so
/// deterministic backends yield deterministic reports.
struct StageUsage {
    long calls = 0;
    long inTokens = 0;
    long outTokens = 0;
    double seconds = 0.0;

    void add(const Completion& c) {
        ++calls;
        inTokens += c.inTokens;
        outTokens += c.outTokens;
        seconds += c.latencySeconds;
    }
    void merge(const StageUsage& other) {
        calls += other.calls;
        inTokens += other.inTokens;
        outTokens += other.outTokens;
        seconds += other.seconds;
    }
};

using UsageByStage = std::map<std::string, StageUsage>;

/// Rationale tying one historical visit's prescriptions to its problems.
struct VisitRationale {
    int visitIndex = 0;  // 1-based history visit number
    std::string text;
};

/// Structured specialty summary (strict-JSON contract with the model).
struct ExpertSummary {
    std::string expertise;
    std::string currentAdmission;
    std::string medicationRelevantHistory;
    std::string expertiseFocus;
    std::string risksToWatch;
    std::vector<VisitRationale> visitRationales;

    std::string to_json() const;
};

/// One proposed medication class from one expert.
struct Proposal {
    std::string code;  // vocabulary class code
    double confidence = 0.5;
    std::string reason;
    std::string expertId;
};

struct CritiqueResult {
    struct Removal {
        std::string code;
        std::string reason;
    };
    std::vector<std::string> retained;  // sorted
    std::vector<Removal> removed;       // sorted by code

    std::set<std::string> retained_set() const {
        return {retained.begin(), retained.end()};
    }
};

/// Named prompt templates with {slot} substitution.
class PromptLibrary {
public:
    static PromptLibrary load(const std::filesystem::path& dir);

    bool has(const std::string& name) const { return templates_.count(name) != 0; }
    /// Throws ConfigError for unknown template names; unknown slots in the
    /// template are left verbatim.
    std::string render(const std::string& name,
                       const std::map<std::string, std::string>& slots) const;

private:
    std::map<std::string, std::string> templates_;
};

struct AgentOptions {
    double summarizeTemperature = 0.0;
    double generateTemperature = 0.2;
    double critiqueTemperature = 0.0;
    double verifyTemperature = 0.0;
    int maxOutputTokens = 2048;
    bool useSummarizer = true;
    bool useIndications = true;
    bool revisionRound = false;  // optional second generate pass, off by default
    std::size_t maxIndicationCandidates = 50;
};

/// Renders the indication candidates injected into generation prompts:
/// the union of indicated vocabulary classes over the target-visit
/// diagnosis categories, sorted, capped at maxCandidates.
std::vector<std::string> indication_candidates(const PatientRecord& record,
                                               const IndicationMap& indications,
                                               std::size_t maxCandidates);

/// Specialty summarization (deterministic temperature). Throws
/// UnparsableOutput when the model output is not the expected object even
/// after one repair pass; throws BackendError on transport failure. Callers
/// treat both as "this expert is skipped".
ExpertSummary summarize(const Expert& expert, const PatientRecord& record,
                        const SerializedCase& serialized, LlmBackend& backend,
                        const PromptLibrary& prompts, const AgentOptions& options,
                        UsageByStage& usage);

struct GenerateOutcome {
    std::vector<Proposal> proposals;
    std::size_t droppedMalformed = 0;
    std::size_t droppedOutOfVocab = 0;
    std::size_t normalizedToClass = 0;
};

/// Expert-conditioned proposal generation. Output codes are truncated to
/// class level and closed over the vocabulary (violations counted, never
/// fatal). Missing confidence defaults to 0.5.
GenerateOutcome generate(const Expert& expert, const std::optional<ExpertSummary>& summary,
                         const PatientRecord& record, const SerializedCase& serialized,
                         const IndicationMap* indications, const MedVocab& vocab,
                         const DescriptionResolver& resolver, LlmBackend& backend,
                         const PromptLibrary& prompts, const AgentOptions& options,
                         UsageByStage& usage);

struct CritiqueExecution {
    CritiqueResult result;
    bool skipped = false;    // empty union: no call issued
    bool fallback = false;   // backend/parse failure: full union retained
    std::size_t discardedAdditions = 0;  // codes outside the union, ignored
    std::string note;
};

/// Cross-expert critique over the union of proposals. The result always
/// partitions the union: retained and removed are disjoint and cover it;
/// codes the model invents are discarded and counted. Failures fall back to
/// retaining the full union.
CritiqueExecution critique(const std::map<std::string, std::vector<Proposal>>& proposals,
                           const std::map<std::string, ExpertSummary>& summaries,
                           const PatientRecord& record, const SerializedCase& serialized,
                           const IndicationMap* indications,
                           const DescriptionResolver& resolver, LlmBackend& backend,
                           const PromptLibrary& prompts, const AgentOptions& options,
                           UsageByStage& usage);

}  // namespace saferx

#endif
