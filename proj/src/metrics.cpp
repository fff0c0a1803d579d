#include "saferx/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

namespace saferx {

using nlohmann::json;

namespace {

std::size_t intersection_size(const std::set<std::string>& a, const std::set<std::string>& b) {
    const auto& small = a.size() <= b.size() ? a : b;
    const auto& large = a.size() <= b.size() ? b : a;
    std::size_t n = 0;
    for (const auto& x : small) n += large.count(x);
    return n;
}

double case_jaccard(const std::set<std::string>& pred, const std::set<std::string>& ref,
                    double emptyEmpty) {
    if (pred.empty() && ref.empty()) return emptyEmpty;
    std::size_t inter = intersection_size(pred, ref);
    std::size_t uni = pred.size() + ref.size() - inter;
    return uni == 0 ? emptyEmpty : static_cast<double>(inter) / static_cast<double>(uni);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double case_ddi(const std::set<std::string>& pred, const std::set<std::string>& ref,
                const DdiMatrix& matrix, bool weighted) {
    std::vector<std::string> meds(pred.begin(), pred.end());
    double exposure = 0.0;
    for (std::size_t i = 0; i < meds.size(); ++i) {
        for (std::size_t j = i + 1; j < meds.size(); ++j) {
            exposure += weighted ? matrix.weighted(meds[i], meds[j])
                                 : (matrix.binary(meds[i], meds[j]) ? 1.0 : 0.0);
        }
    }
    double pairBudget = static_cast<double>(ref.size() * (ref.size() - 1)) / 2.0;
    double z = std::max(pairBudget, 1.0);
    return clamp01(exposure / z);
}

double case_contra(const std::set<std::string>& pred, const std::vector<std::string>& diags,
                   const std::set<std::string>& ref, const ContraMatrix& matrix,
                   bool weighted) {
    double exposure = 0.0;
    for (const auto& med : pred) {
        for (const auto& diag : diags) {
            exposure += weighted ? matrix.weighted(med, diag)
                                 : (matrix.binary(med, diag) ? 1.0 : 0.0);
        }
    }
    double z = std::max(static_cast<double>(ref.size() * diags.size()), 1.0);
    return clamp01(exposure / z);
}

struct CaseCounts {
    std::size_t inter = 0;
    std::size_t pred = 0;
    std::size_t ref = 0;
};

double micro_f1(double precision, double recall) {
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

}  // namespace

AccuracyScores score_accuracy(const std::vector<std::set<std::string>>& predictions,
                              const std::vector<std::set<std::string>>& references,
                              const AccuracyOptions& options) {
    if (predictions.size() != references.size()) {
        throw LengthMismatch("prediction and reference lists differ in length");
    }
    if (predictions.empty()) throw LengthMismatch("nothing to score");

    AccuracyScores scores;
    std::size_t pooledInter = 0;
    std::size_t pooledPred = 0;
    std::size_t pooledRef = 0;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        scores.jaccard += case_jaccard(predictions[t], references[t], options.emptyEmptyJaccard);
        pooledInter += intersection_size(predictions[t], references[t]);
        pooledPred += predictions[t].size();
        pooledRef += references[t].size();
        scores.avgPredicted += static_cast<double>(predictions[t].size());
    }
    auto n = static_cast<double>(predictions.size());
    scores.jaccard /= n;
    scores.avgPredicted /= n;
    scores.precision =
        pooledPred == 0 ? 0.0 : static_cast<double>(pooledInter) / static_cast<double>(pooledPred);
    scores.recall =
        pooledRef == 0 ? 0.0 : static_cast<double>(pooledInter) / static_cast<double>(pooledRef);
    scores.f1 = micro_f1(scores.precision, scores.recall);
    return scores;
}

double score_ddi(const std::vector<std::set<std::string>>& predictions,
                 const std::vector<std::set<std::string>>& references,
                 const DdiMatrix& matrix, bool weighted) {
    if (predictions.size() != references.size()) {
        throw LengthMismatch("prediction and reference lists differ in length");
    }
    if (predictions.empty()) throw LengthMismatch("nothing to score");
    double total = 0.0;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        total += case_ddi(predictions[t], references[t], matrix, weighted);
    }
    return total / static_cast<double>(predictions.size());
}

double score_contra(const std::vector<std::set<std::string>>& predictions,
                    const std::vector<std::vector<std::string>>& diagnosisKeys,
                    const std::vector<std::set<std::string>>& references,
                    const ContraMatrix& matrix, bool weighted) {
    if (predictions.size() != references.size() || predictions.size() != diagnosisKeys.size()) {
        throw LengthMismatch("prediction, diagnosis, and reference lists differ in length");
    }
    if (predictions.empty()) throw LengthMismatch("nothing to score");
    double total = 0.0;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        total += case_contra(predictions[t], diagnosisKeys[t], references[t], matrix, weighted);
    }
    return total / static_cast<double>(predictions.size());
}

EvaluationReport evaluate_traces(const std::vector<PipelineTrace>& traces,
                                 const std::vector<PatientRecord>& records,
                                 const SafetyKb& kb, const AccuracyOptions& options) {
    std::map<std::string, const PatientRecord*> byId;
    for (const auto& record : records) byId[record.caseId] = &record;

    EvaluationReport report;
    std::vector<std::set<std::string>> preds;
    std::vector<std::set<std::string>> refs;
    std::vector<std::vector<std::string>> diags;
    for (const auto& trace : traces) {
        auto it = byId.find(trace.caseId);
        if (it == byId.end() || !it->second->groundTruth) {
            ++report.skippedNoReference;
            continue;
        }
        const PatientRecord& record = *it->second;
        std::set<std::string> pred = trace.final_set();
        std::set<std::string> ref = record.ground_truth_set();
        std::vector<std::string> diagKeys;
        for (const auto& d : record.target.diagnoses) diagKeys.push_back(pre_decimal(d));

        CaseScore cs;
        cs.caseId = trace.caseId;
        cs.predicted = pred.size();
        cs.reference = ref.size();
        cs.jaccard = case_jaccard(pred, ref, options.emptyEmptyJaccard);
        std::size_t inter = intersection_size(pred, ref);
        cs.precision = pred.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(pred.size());
        cs.recall = ref.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(ref.size());
        cs.f1 = micro_f1(cs.precision, cs.recall);
        cs.safety.ddiBinary = case_ddi(pred, ref, kb.ddi, false);
        cs.safety.ddiWeighted = case_ddi(pred, ref, kb.ddi, true);
        cs.safety.contraBinary = case_contra(pred, diagKeys, ref, kb.contra, false);
        cs.safety.contraWeighted = case_contra(pred, diagKeys, ref, kb.contra, true);
        report.perCase.push_back(std::move(cs));

        preds.push_back(std::move(pred));
        refs.push_back(std::move(ref));
        diags.push_back(std::move(diagKeys));
    }

    report.scoredCases = preds.size();
    if (!preds.empty()) {
        report.accuracy = score_accuracy(preds, refs, options);
        report.safety.ddiBinary = score_ddi(preds, refs, kb.ddi, false);
        report.safety.ddiWeighted = score_ddi(preds, refs, kb.ddi, true);
        report.safety.contraBinary = score_contra(preds, diags, refs, kb.contra, false);
        report.safety.contraWeighted = score_contra(preds, diags, refs, kb.contra, true);
    }
    return report;
}

GranularityComparison granularity_compare(const std::vector<std::set<std::string>>& sets,
                                          const std::vector<std::vector<std::string>>& diagnosisKeys,
                                          const SafetyKb& kb) {
    if (sets.size() != diagnosisKeys.size()) {
        throw LengthMismatch("set and diagnosis lists differ in length");
    }
    if (sets.empty()) throw LengthMismatch("nothing to score");

    GranularityComparison out;
    out.cases = sets.size();

    out.classLevel.ddiBinary = score_ddi(sets, sets, kb.ddi, false);
    out.classLevel.ddiWeighted = score_ddi(sets, sets, kb.ddi, true);
    out.classLevel.contraBinary = score_contra(sets, diagnosisKeys, sets, kb.contra, false);
    out.classLevel.contraWeighted = score_contra(sets, diagnosisKeys, sets, kb.contra, true);

    DdiMatrix ddiL3 = collapse_ddi_to_l3(kb.ddi);
    ContraMatrix contraL3 = collapse_contra_to_l3(kb.contra);
    std::vector<std::set<std::string>> setsL3;
    setsL3.reserve(sets.size());
    for (const auto& s : sets) {
        std::set<std::string> folded;
        for (const auto& code : s) folded.insert(to_l3(parse_atc(code)).text);
        setsL3.push_back(std::move(folded));
    }
    out.subgroupLevel.ddiBinary = score_ddi(setsL3, setsL3, ddiL3, false);
    out.subgroupLevel.ddiWeighted = score_ddi(setsL3, setsL3, ddiL3, true);
    out.subgroupLevel.contraBinary = score_contra(setsL3, diagnosisKeys, setsL3, contraL3, false);
    out.subgroupLevel.contraWeighted = score_contra(setsL3, diagnosisKeys, setsL3, contraL3, true);
    return out;
}

namespace {

json safety_to_json(const SafetyPanelScores& s) {
    return json{{"ddiBinary", s.ddiBinary},
                {"ddiWeighted", s.ddiWeighted},
                {"contraBinary", s.contraBinary},
                {"contraWeighted", s.contraWeighted}};
}

}  // namespace

std::string evaluation_report_to_json(const EvaluationReport& report) {
    json j;
    j["scoredCases"] = report.scoredCases;
    j["skippedNoReference"] = report.skippedNoReference;
    j["accuracy"] = json{{"jaccard", report.accuracy.jaccard},
                         {"precision", report.accuracy.precision},
                         {"recall", report.accuracy.recall},
                         {"f1", report.accuracy.f1},
                         {"avgPredicted", report.accuracy.avgPredicted}};
    j["safety"] = safety_to_json(report.safety);
    json perCase = json::array();
    for (const auto& cs : report.perCase) {
        json cj;
        cj["caseId"] = cs.caseId;
        cj["predicted"] = cs.predicted;
        cj["reference"] = cs.reference;
        cj["jaccard"] = cs.jaccard;
        cj["precision"] = cs.precision;
        cj["recall"] = cs.recall;
        cj["f1"] = cs.f1;
        cj["safety"] = safety_to_json(cs.safety);
        perCase.push_back(std::move(cj));
    }
    j["perCase"] = std::move(perCase);
    return j.dump(2) + "\n";
}

std::string evaluation_report_to_tsv(const EvaluationReport& report) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    std::string out =
        "scoredCases\tjaccard\tprecision\trecall\tf1\tavgPredicted\tddiBinary\tddiWeighted\t"
        "contraBinary\tcontraWeighted\n";
    out += std::to_string(report.scoredCases) + "\t" + fmt(report.accuracy.jaccard) + "\t" +
           fmt(report.accuracy.precision) + "\t" + fmt(report.accuracy.recall) + "\t" +
           fmt(report.accuracy.f1) + "\t" + fmt(report.accuracy.avgPredicted) + "\t" +
           fmt(report.safety.ddiBinary) + "\t" + fmt(report.safety.ddiWeighted) + "\t" +
           fmt(report.safety.contraBinary) + "\t" + fmt(report.safety.contraWeighted) + "\n";
    return out;
}

std::string granularity_to_json(const GranularityComparison& comparison) {
    json j;
    j["cases"] = comparison.cases;
    j["classLevel"] = safety_to_json(comparison.classLevel);
    j["subgroupLevel"] = safety_to_json(comparison.subgroupLevel);
    return j.dump(2) + "\n";
}

}  // namespace saferx
