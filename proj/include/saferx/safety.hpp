#ifndef SAFERX_SAFETY_HPP
#define SAFERX_SAFETY_HPP

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "saferx/agents.hpp"

namespace saferx {

enum class FlagRelation { Ddi, Contra };

std::string flag_relation_name(FlagRelation r);
FlagRelation parse_flag_relation(const std::string& name);

/// One safety concern raised against a candidate medication. Interaction
/// pairs produce two flags (one per direction) sharing a pairId; each
/// contraindication produces one flag.
struct Flag {
    std::string med;
    FlagRelation relation = FlagRelation::Ddi;
    std::optional<std::string> partnerMed;       // interaction flags
    std::optional<std::string> diag;             // contraindication flags
    int degreeSelf = 0;
    std::optional<int> degreePartner;
    bool isPriorMed = false;
    std::optional<bool> partnerIsPriorMed;
    int pairId = 0;
};

enum class VerdictAction { Retain, Remove };

std::string verdict_action_name(VerdictAction a);
VerdictAction parse_verdict_action(const std::string& name);

struct Verdict {
    Flag flag;
    VerdictAction action = VerdictAction::Retain;
    std::string reason;
    std::optional<std::string> replacement;
};

/// Deterministic knowledge lookup over the candidate set: all pairwise
/// interaction hits plus all (candidate, target-diagnosis) contraindication
/// hits, sorted by code so downstream prompts are reproducible. Issues no
/// model calls.
std::vector<Flag> find_flags(const std::set<std::string>& candidates,
                             const std::vector<std::string>& targetDiagKeys,
                             const std::set<std::string>& priorMeds, const SafetyKb& kb);

struct VerifyOutcome {
    std::vector<Verdict> verdicts;
    std::set<std::string> removed;
    std::map<std::string, std::string> replacements;  // removed med -> accepted substitute
    bool failedOpen = false;       // backend/parse failure: everything retained
    std::size_t droppedReplacements = 0;  // proposed substitutes that failed validation
    std::size_t ignoredUnflaggedRemovals = 0;
};

struct VerifyOptions {
    bool failClosed = false;        // on failure remove every flagged med instead
    bool acceptReplacements = true;
};

/// One batched adjudication call per case covering every flag. A proposed
/// replacement is accepted only when it is a vocabulary class code sharing
/// the removed code's 4-character subgroup prefix. On backend failure the
/// stage fails open (all flags retained) unless configured fail-closed.
VerifyOutcome verify(const std::vector<Flag>& flags, const std::set<std::string>& candidates,
                     const PatientRecord& record, const SafetyKb& kb,
                     const DescriptionResolver& resolver, LlmBackend& backend,
                     const PromptLibrary& prompts, const AgentOptions& options,
                     const VerifyOptions& verifyOptions, UsageByStage& usage);

/// Ablation and policy switches for a pipeline run.
struct PipelineConfig {
    RoutingConfig routing;
    AgentOptions agents;
    VerifyOptions verify;
    bool useExperts = true;     // off: the generalist replaces the routed panel
    bool useCritique = true;    // off: the full proposal union is retained
    bool useSafety = true;      // off: no flags, no verification
    std::set<std::string> droppedExperts;  // leave-one-out support
};

struct CritiqueTrace {
    CritiqueResult result;
    bool skipped = false;
    bool fallback = false;
    std::size_t discardedAdditions = 0;
    std::string note;
};

/// Full per-case execution record; everything downstream (metrics,
/// diagnostics, efficiency) is computed from these.
struct PipelineTrace {
    std::string caseId;
    bool emptyTarget = false;
    RoutingResult routing;
    std::map<std::string, ExpertSummary> summaries;
    std::map<std::string, std::vector<Proposal>> proposals;
    std::vector<std::string> expertNotes;  // per-expert degradations
    CritiqueTrace critique;
    std::vector<Flag> flags;
    std::vector<Verdict> verdicts;
    bool verifyFailedOpen = false;
    std::map<std::string, std::string> replacements;
    std::vector<std::string> finalMeds;  // sorted
    UsageByStage usage;
    std::vector<std::string> warnings;

    std::set<std::string> final_set() const {
        return {finalMeds.begin(), finalMeds.end()};
    }
};

/// Runs the whole per-case pipeline: route, per-expert summarize and
/// generate (concurrently), critique, flag lookup, batched verification.
/// Per-expert failures degrade to empty contributions; the trace records
/// every degradation.
PipelineTrace run_case(const PatientRecord& record, const Panel& panel,
                       const Taxonomy& diagnosisTaxonomy, const DescriptionResolver& resolver,
                       const SafetyKb& kb, const MedVocab& vocab, LlmBackend& backend,
                       const PromptLibrary& prompts, const PipelineConfig& config);

std::string trace_to_json(const PipelineTrace& trace);
PipelineTrace trace_from_json(const std::string& text);

}  // namespace saferx

#endif
