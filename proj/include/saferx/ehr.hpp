#ifndef SAFERX_EHR_HPP
#define SAFERX_EHR_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "saferx/ontology.hpp"

namespace saferx {

/// One ICU admission. Medication codes are deduplicated class-level (L4)
/// codes; ordering inside each list preserves the source order.
struct Visit {
    std::vector<IcdCode> diagnoses;
    std::vector<IcdCode> procedures;
    std::vector<std::string> medications;
};

/// Demographic slots rendered into the narrative, in template order.
/// Missing slots render as "unknown".
inline const std::vector<std::string>& demographic_keys() {
    static const std::vector<std::string> keys = {
        "age", "gender", "insurance", "language",
        "admissionType", "maritalStatus", "race"};
    return keys;
}

/// Longitudinal record for one prediction case. The target visit carries
/// diagnoses and procedures only; its medication list is the prediction
/// target and stays empty. groundTruth, when present, is the reference
/// class-code set for the target visit.
struct PatientRecord {
    std::string caseId;
    std::map<std::string, std::string> demographics;
    std::vector<Visit> history;
    Visit target;
    std::optional<std::vector<std::string>> groundTruth;

    std::set<std::string> ground_truth_set() const;
    /// Medications of the most recent historical visit (empty without history).
    std::set<std::string> prior_medications() const;
    bool empty_target() const {
        return target.diagnoses.empty() && target.procedures.empty();
    }
};

/// Byte range [begin, end) of a rendered code inside the narrative.
struct CodeSpan {
    std::string code;
    std::size_t begin = 0;
    std::size_t end = 0;
};

struct SerializedCase {
    std::string text;
    std::vector<CodeSpan> codeSpans;
    bool emptyTarget = false;
};

/// Resolves human-readable descriptions for rendered codes: the diagnosis
/// hierarchy for diagnoses, the drug hierarchy for medication classes, and a
/// flat table for procedures. Unresolved codes fall back to the code text.
class DescriptionResolver {
public:
    DescriptionResolver() = default;
    DescriptionResolver(const Taxonomy* diagnosis, const Taxonomy* drug,
                        std::map<std::string, std::string> procedureNames);

    std::string diagnosis_name(const IcdCode& code) const;
    std::string procedure_name(const IcdCode& code) const;
    std::string medication_name(const std::string& codeL4) const;

private:
    const Taxonomy* diagnosis_ = nullptr;
    const Taxonomy* drug_ = nullptr;
    std::map<std::string, std::string> procedureNames_;
};

/// Renders the three-section narrative: demographics header, one paragraph
/// per historical visit (diagnoses, procedures, prescribed drugs), and the
/// current-visit paragraph ending with the prediction cue. Every rendered
/// code is recorded as a span over the exact "NAME (CODE)" occurrence.
SerializedCase serialize(const PatientRecord& record, const DescriptionResolver& resolver);

/// Per-file load diagnostics. Malformed lines are skipped, never fatal.
struct CohortLoadReport {
    std::size_t totalLines = 0;
    std::size_t loadedCases = 0;
    std::size_t malformedLines = 0;
    std::size_t normalizedMedications = 0;   // ingredient-level codes truncated
    std::size_t droppedMedications = 0;      // malformed or out-of-vocabulary
    std::vector<std::string> errors;         // "line N: reason"
};

/// Loads a JSONL cohort. When a vocabulary is given, medication codes are
/// truncated to class level and filtered against it (dropped codes counted).
std::vector<PatientRecord> load_cases(const std::filesystem::path& path,
                                      const MedVocab* vocab,
                                      CohortLoadReport* report = nullptr);

void save_cases(const std::vector<PatientRecord>& records,
                const std::filesystem::path& path);

/// JSON (de)serialization of a single record; the JSONL loader wraps these.
std::string record_to_json(const PatientRecord& record);
PatientRecord record_from_json(const std::string& text);

}  // namespace saferx

#endif
