#ifndef SAFERX_METRICS_HPP
#define SAFERX_METRICS_HPP

#include <set>
#include <string>
#include <vector>

#include "saferx/knowledge.hpp"
#include "saferx/safety.hpp"

namespace saferx {

struct AccuracyOptions {
    /// Jaccard for an empty prediction against an empty reference.
    double emptyEmptyJaccard = 1.0;
};

struct AccuracyScores {
    double jaccard = 0.0;    // mean of per-case Jaccard
    double precision = 0.0;  // micro: pooled intersection / pooled predictions
    double recall = 0.0;     // micro: pooled intersection / pooled references
    double f1 = 0.0;
    double avgPredicted = 0.0;
};

/// Sample-averaged Jaccard plus micro-pooled precision/recall/F1. Pooled
/// zero denominators score 0. Throws LengthMismatch when the two lists
/// differ in length or are empty.
AccuracyScores score_accuracy(const std::vector<std::set<std::string>>& predictions,
                              const std::vector<std::set<std::string>>& references,
                              const AccuracyOptions& options = {});

/// Reference-normalized interaction exposure, averaged over cases. Per case:
/// the sum of matrix support over predicted pairs, divided by the number of
/// unordered reference pairs (at least 1), clamped to [0, 1]. Codes outside
/// the matrix support contribute nothing.
double score_ddi(const std::vector<std::set<std::string>>& predictions,
                 const std::vector<std::set<std::string>>& references,
                 const DdiMatrix& matrix, bool weighted);

/// Reference-normalized contraindication exposure against the current-visit
/// diagnosis categories, averaged over cases. Per case: summed support over
/// (prediction, diagnosis) pairs divided by |reference| * |diagnoses|
/// (at least 1), clamped to [0, 1].
double score_contra(const std::vector<std::set<std::string>>& predictions,
                    const std::vector<std::vector<std::string>>& diagnosisKeys,
                    const std::vector<std::set<std::string>>& references,
                    const ContraMatrix& matrix, bool weighted);

struct SafetyPanelScores {
    double ddiBinary = 0.0;
    double ddiWeighted = 0.0;
    double contraBinary = 0.0;
    double contraWeighted = 0.0;
};

struct CaseScore {
    std::string caseId;
    std::size_t predicted = 0;
    std::size_t reference = 0;
    double jaccard = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    SafetyPanelScores safety;
};

struct EvaluationReport {
    std::size_t scoredCases = 0;
    std::size_t skippedNoReference = 0;
    AccuracyScores accuracy;
    SafetyPanelScores safety;
    std::vector<CaseScore> perCase;
};

/// Scores final prediction sets from traces against case references.
/// Traces without a matching reference are skipped and counted.
EvaluationReport evaluate_traces(const std::vector<PipelineTrace>& traces,
                                 const std::vector<PatientRecord>& records,
                                 const SafetyKb& kb, const AccuracyOptions& options = {});

/// Safety exposure of the reference sets themselves (sets score against
/// themselves) at class level and again after collapsing codes and matrices
/// to subgroup level.
struct GranularityComparison {
    SafetyPanelScores classLevel;     // 5-character codes
    SafetyPanelScores subgroupLevel;  // 4-character codes
    std::size_t cases = 0;
};

GranularityComparison granularity_compare(const std::vector<std::set<std::string>>& sets,
                                          const std::vector<std::vector<std::string>>& diagnosisKeys,
                                          const SafetyKb& kb);

std::string evaluation_report_to_json(const EvaluationReport& report);
/// Fixed-column summary: header row plus one data row.
std::string evaluation_report_to_tsv(const EvaluationReport& report);
std::string granularity_to_json(const GranularityComparison& comparison);

}  // namespace saferx

#endif
