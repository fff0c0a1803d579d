#include "saferx/ehr.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace saferx {

using nlohmann::json;

std::set<std::string> PatientRecord::ground_truth_set() const {
    if (!groundTruth) return {};
    return {groundTruth->begin(), groundTruth->end()};
}

std::set<std::string> PatientRecord::prior_medications() const {
    if (history.empty()) return {};
    const auto& meds = history.back().medications;
    return {meds.begin(), meds.end()};
}

DescriptionResolver::DescriptionResolver(const Taxonomy* diagnosis, const Taxonomy* drug,
                                         std::map<std::string, std::string> procedureNames)
    : diagnosis_(diagnosis), drug_(drug), procedureNames_(std::move(procedureNames)) {}

std::string DescriptionResolver::diagnosis_name(const IcdCode& code) const {
    if (diagnosis_) {
        std::string key = strip_dots(code.text);
        for (std::size_t len = key.size(); len >= 3; --len) {
            if (const TaxonomyNode* node = diagnosis_->find(key.substr(0, len))) {
                return node->description;
            }
            if (len == 3) break;
        }
    }
    return code.text;
}

std::string DescriptionResolver::procedure_name(const IcdCode& code) const {
    auto it = procedureNames_.find(strip_dots(code.text));
    if (it != procedureNames_.end()) return it->second;
    return code.text;
}

std::string DescriptionResolver::medication_name(const std::string& codeL4) const {
    if (drug_) {
        std::string desc = drug_->description(codeL4);
        if (!desc.empty()) return desc;
    }
    return codeL4;
}

namespace {

/// Appends "NAME (CODE)" items and records the byte span of each CODE.
class NarrativeBuilder {
public:
    explicit NarrativeBuilder(SerializedCase& out) : out_(out) {}

    void text(std::string_view s) { out_.text += s; }

    void coded_item(const std::string& name, const std::string& code) {
        out_.text += name;
        out_.text += " (";
        CodeSpan span;
        span.code = code;
        span.begin = out_.text.size();
        out_.text += code;
        span.end = out_.text.size();
        out_.text += ")";
        out_.codeSpans.push_back(std::move(span));
    }

    template <typename Range, typename NameFn, typename CodeFn>
    void coded_list(const Range& items, NameFn nameOf, CodeFn codeOf) {
        if (items.empty()) {
            text("none");
            return;
        }
        bool first = true;
        for (const auto& item : items) {
            if (!first) text(", ");
            first = false;
            coded_item(nameOf(item), codeOf(item));
        }
    }

private:
    SerializedCase& out_;
};

std::string demographic_or_unknown(const PatientRecord& record, const std::string& key) {
    auto it = record.demographics.find(key);
    if (it == record.demographics.end() || trim(it->second).empty()) return "unknown";
    return it->second;
}

}  // namespace

SerializedCase serialize(const PatientRecord& record, const DescriptionResolver& resolver) {
    SerializedCase out;
    out.emptyTarget = record.empty_target();
    NarrativeBuilder b(out);

    b.text("The patient's age is " + demographic_or_unknown(record, "age") +
           " and gender is " + demographic_or_unknown(record, "gender") +
           ". The patient's insurance type is " + demographic_or_unknown(record, "insurance") +
           ", language is " + demographic_or_unknown(record, "language") +
           ", admission type is " + demographic_or_unknown(record, "admissionType") +
           ", marital status is " + demographic_or_unknown(record, "maritalStatus") +
           ", and race is " + demographic_or_unknown(record, "race") +
           ". The patient has " + std::to_string(record.history.size() + 1) +
           " ICU visits.");

    auto diag_name = [&](const IcdCode& c) { return resolver.diagnosis_name(c); };
    auto proc_name = [&](const IcdCode& c) { return resolver.procedure_name(c); };
    auto icd_text = [](const IcdCode& c) { return c.text; };
    auto med_name = [&](const std::string& c) { return resolver.medication_name(c); };
    auto med_text = [](const std::string& c) { return c; };

    for (std::size_t t = 0; t < record.history.size(); ++t) {
        const Visit& visit = record.history[t];
        b.text("\n\nIn visit " + std::to_string(t + 1) + ", the patient had diagnoses: ");
        b.coded_list(visit.diagnoses, diag_name, icd_text);
        b.text("; procedures: ");
        b.coded_list(visit.procedures, proc_name, icd_text);
        b.text(". The patient was prescribed drugs: ");
        b.coded_list(visit.medications, med_name, med_text);
        b.text(".");
    }

    b.text("\n\nIn this visit, the patient has diagnoses: ");
    b.coded_list(record.target.diagnoses, diag_name, icd_text);
    b.text("; procedures: ");
    b.coded_list(record.target.procedures, proc_name, icd_text);
    b.text(". Then, the patient should be prescribed:");

    return out;
}

namespace {

json icd_to_json(const IcdCode& code) {
    return json{{"code", code.text}, {"version", icd_version_name(code.version)}};
}

IcdCode icd_from_json(const json& j, IcdKind kind) {
    if (j.is_string()) {
        // Bare string diagnoses default to the modern coding system.
        return IcdCode{j.get<std::string>(), IcdVersion::Icd10Cm, kind};
    }
    if (!j.is_object() || !j.contains("code")) {
        throw SchemaError("diagnosis/procedure entries need a 'code' field");
    }
    IcdCode code;
    code.text = j.at("code").get<std::string>();
    code.version = j.contains("version")
                       ? parse_icd_version(j.at("version").get<std::string>())
                       : IcdVersion::Icd10Cm;
    code.kind = kind;
    return code;
}

json visit_to_json(const Visit& visit, bool includeMedications) {
    json j;
    j["diagnoses"] = json::array();
    for (const auto& d : visit.diagnoses) j["diagnoses"].push_back(icd_to_json(d));
    j["procedures"] = json::array();
    for (const auto& p : visit.procedures) j["procedures"].push_back(icd_to_json(p));
    if (includeMedications) j["medications"] = visit.medications;
    return j;
}

Visit visit_from_json(const json& j, bool allowMedications) {
    Visit visit;
    if (j.contains("diagnoses")) {
        for (const auto& d : j.at("diagnoses")) {
            visit.diagnoses.push_back(icd_from_json(d, IcdKind::Diagnosis));
        }
    }
    if (j.contains("procedures")) {
        for (const auto& p : j.at("procedures")) {
            visit.procedures.push_back(icd_from_json(p, IcdKind::Procedure));
        }
    }
    if (j.contains("medications")) {
        if (!allowMedications && !j.at("medications").empty()) {
            throw SchemaError("the current visit must not carry medications");
        }
        for (const auto& m : j.at("medications")) {
            visit.medications.push_back(m.get<std::string>());
        }
    }
    return visit;
}

/// Normalizes a raw medication list: parse, truncate ingredient-level codes
/// to class level, optionally filter against the vocabulary, deduplicate
/// preserving first occurrence.
std::vector<std::string> normalize_medications(const std::vector<std::string>& raw,
                                               const MedVocab* vocab,
                                               CohortLoadReport* report) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& text : raw) {
        std::string l4;
        try {
            AtcCode parsed = parse_atc(text);
            if (parsed.level == AtcLevel::Level5 && report) ++report->normalizedMedications;
            l4 = to_l4(parsed).text;
        } catch (const Error&) {
            if (report) ++report->droppedMedications;
            continue;
        }
        if (vocab && !vocab->contains(l4)) {
            if (report) ++report->droppedMedications;
            continue;
        }
        if (seen.insert(l4).second) out.push_back(l4);
    }
    return out;
}

}  // namespace

std::string record_to_json(const PatientRecord& record) {
    json j;
    j["caseId"] = record.caseId;
    j["demographics"] = record.demographics;
    j["visits"] = json::array();
    for (const auto& visit : record.history) {
        j["visits"].push_back(visit_to_json(visit, true));
    }
    j["target"] = visit_to_json(record.target, false);
    if (record.groundTruth) j["groundTruth"] = *record.groundTruth;
    return j.dump();
}

PatientRecord record_from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.is_object()) throw SchemaError("case record must be a JSON object");
    PatientRecord record;
    if (!j.contains("caseId")) throw SchemaError("case record needs a caseId");
    record.caseId = j.at("caseId").get<std::string>();
    if (record.caseId.empty()) throw SchemaError("caseId must be non-empty");
    if (j.contains("demographics")) {
        for (const auto& [key, value] : j.at("demographics").items()) {
            record.demographics[key] =
                value.is_string() ? value.get<std::string>() : value.dump();
        }
    }
    if (j.contains("visits")) {
        for (const auto& v : j.at("visits")) {
            record.history.push_back(visit_from_json(v, true));
        }
    }
    if (j.contains("target")) {
        record.target = visit_from_json(j.at("target"), false);
    }
    if (j.contains("groundTruth")) {
        record.groundTruth = j.at("groundTruth").get<std::vector<std::string>>();
    }
    return record;
}

std::vector<PatientRecord> load_cases(const std::filesystem::path& path,
                                      const MedVocab* vocab, CohortLoadReport* report) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open cohort file: " + path.string());

    CohortLoadReport local;
    std::vector<PatientRecord> records;
    std::set<std::string> seenIds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        ++local.totalLines;
        try {
            PatientRecord record = record_from_json(line);
            if (!seenIds.insert(record.caseId).second) {
                throw SchemaError("duplicate caseId " + record.caseId);
            }
            for (auto& visit : record.history) {
                visit.medications = normalize_medications(visit.medications, vocab, &local);
            }
            if (record.groundTruth) {
                record.groundTruth = normalize_medications(*record.groundTruth, vocab, &local);
            }
            records.push_back(std::move(record));
            ++local.loadedCases;
        } catch (const std::exception& e) {
            ++local.malformedLines;
            local.errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (report) *report = local;
    return records;
}

void save_cases(const std::vector<PatientRecord>& records,
                const std::filesystem::path& path) {
    std::string out;
    for (const auto& record : records) {
        out += record_to_json(record);
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace saferx
