// Evaluation metrics: set-overlap accuracy, reference-normalized safety
// exposure, trace scoring, granularity collapse, and report emitters.
#include <doctest.h>

#include <algorithm>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "saferx/harness.hpp"
#include "saferx/metrics.hpp"
#include "testutil.hpp"

using namespace saferx;
using testutil::asset;
using testutil::make_contra;
using testutil::make_ddi;
using testutil::make_record;

namespace {

const std::vector<std::string>& kb_codes() {
    static const std::vector<std::string> codes{"A02BC", "B01AA", "B01AC", "C07AB",
                                                "C09AA", "M01AE", "N02BA", "N02BE"};
    return codes;
}

SafetyKb unit_kb() {
    SafetyKb kb;
    kb.ddi = make_ddi(kb_codes(), {{"B01AA", "N02BA", true, 1.0},
                                   {"B01AA", "M01AE", true, 0.6},
                                   {"B01AC", "M01AE", true, 0.3},
                                   {"C07AB", "C09AA", true, 0.0}});
    kb.contra = make_contra(kb_codes(), {"I21", "K25", "N18"},
                            {{"M01AE", "N18", true, 0.8},
                             {"N02BA", "K25", true, 0.5},
                             {"C09AA", "I21", true, 0.0}});
    return kb;
}

/// Membership count computed with linear scans, independent of std::set.
std::size_t oracle_intersection(const std::set<std::string>& a, const std::set<std::string>& b) {
    std::size_t n = 0;
    for (const auto& x : a) {
        for (const auto& y : b) {
            if (x == y) ++n;
        }
    }
    return n;
}

double oracle_jaccard(const std::set<std::string>& pred, const std::set<std::string>& ref,
                      double emptyEmpty) {
    if (pred.empty() && ref.empty()) return emptyEmpty;
    double inter = static_cast<double>(oracle_intersection(pred, ref));
    double uni = static_cast<double>(pred.size() + ref.size()) - inter;
    return inter / uni;
}

std::set<std::string> random_set(std::mt19937_64& rng, const std::vector<std::string>& pool,
                                 std::size_t maxSize) {
    std::uniform_int_distribution<std::size_t> sized(0, maxSize);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::set<std::string> s;
    for (std::size_t n = sized(rng); n > 0; --n) s.insert(pool[pick(rng)]);
    return s;
}

PipelineTrace trace_of(const std::string& caseId, const std::vector<std::string>& finals) {
    PipelineTrace t;
    t.caseId = caseId;
    t.finalMeds = finals;
    return t;
}

}  // namespace

TEST_CASE("accuracy combines per-case jaccard with pooled precision and recall") {
    std::vector<std::set<std::string>> preds{{"A02BC", "B01AA", "C07AB"}, {}};
    std::vector<std::set<std::string>> refs{{"B01AA", "C07AB", "M01AE"}, {"N02BA"}};
    AccuracyScores s = score_accuracy(preds, refs);

    // Case 1: 2 of 4; case 2: empty prediction against one reference.
    CHECK(s.jaccard == doctest::Approx((2.0 / 4.0 + 0.0) / 2.0).epsilon(1e-12));
    CHECK(s.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(s.recall == doctest::Approx(2.0 / 4.0).epsilon(1e-12));
    CHECK(s.f1 == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
    CHECK(s.avgPredicted == doctest::Approx(1.5).epsilon(1e-12));

    SUBCASE("empty against empty follows the configured policy") {
        std::vector<std::set<std::string>> p{{}};
        std::vector<std::set<std::string>> r{{}};
        CHECK(score_accuracy(p, r).jaccard == doctest::Approx(1.0));
        AccuracyOptions strict;
        strict.emptyEmptyJaccard = 0.0;
        CHECK(score_accuracy(p, r, strict).jaccard == doctest::Approx(0.0));
        // Pooled denominators of zero score zero, not NaN.
        AccuracyScores z = score_accuracy(p, r);
        CHECK(z.precision == 0.0);
        CHECK(z.recall == 0.0);
        CHECK(z.f1 == 0.0);
    }
    SUBCASE("mismatched or empty inputs throw") {
        std::vector<std::set<std::string>> one{{"A02BC"}};
        std::vector<std::set<std::string>> two{{"A02BC"}, {"B01AA"}};
        CHECK_THROWS_AS(score_accuracy(one, two), LengthMismatch);
        CHECK_THROWS_AS(score_accuracy({}, {}), LengthMismatch);
    }
}

TEST_CASE("accuracy scores match a brute-force oracle") {
    const std::vector<std::string> pool{"A02BC", "B01AA", "B01AC", "C07AB", "C09AA",
                                        "M01AE", "N02BA", "N02BE", "J01MA", "R03AC"};
    std::mt19937_64 rng(424242);
    std::uniform_int_distribution<std::size_t> caseCount(1, 6);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int trial = 0; trial < 400; ++trial) {
        std::size_t n = caseCount(rng);
        std::vector<std::set<std::string>> preds;
        std::vector<std::set<std::string>> refs;
        for (std::size_t t = 0; t < n; ++t) {
            preds.push_back(random_set(rng, pool, 6));
            refs.push_back(random_set(rng, pool, 6));
        }
        AccuracyOptions options;
        options.emptyEmptyJaccard = unit(rng) < 0.5 ? 1.0 : 0.0;

        double jacc = 0.0;
        double pooledInter = 0.0;
        double pooledPred = 0.0;
        double pooledRef = 0.0;
        double predicted = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            jacc += oracle_jaccard(preds[t], refs[t], options.emptyEmptyJaccard);
            pooledInter += static_cast<double>(oracle_intersection(preds[t], refs[t]));
            pooledPred += static_cast<double>(preds[t].size());
            pooledRef += static_cast<double>(refs[t].size());
            predicted += static_cast<double>(preds[t].size());
        }
        double precision = pooledPred == 0.0 ? 0.0 : pooledInter / pooledPred;
        double recall = pooledRef == 0.0 ? 0.0 : pooledInter / pooledRef;
        double f1 =
            precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;

        AccuracyScores s = score_accuracy(preds, refs, options);
        double dn = static_cast<double>(n);
        CHECK(s.jaccard == doctest::Approx(jacc / dn).epsilon(1e-12));
        CHECK(s.precision == doctest::Approx(precision).epsilon(1e-12));
        CHECK(s.recall == doctest::Approx(recall).epsilon(1e-12));
        CHECK(s.f1 == doctest::Approx(f1).epsilon(1e-12));
        CHECK(s.avgPredicted == doctest::Approx(predicted / dn).epsilon(1e-12));
    }
}

TEST_CASE("interaction exposure normalizes by reference pair count") {
    SafetyKb kb = unit_kb();
    std::set<std::string> pred{"B01AA", "M01AE", "N02BA"};

    // Two binary hits among the three predicted classes.
    SUBCASE("reference of three gives a budget of three pairs") {
        std::vector<std::set<std::string>> preds{pred};
        std::vector<std::set<std::string>> refs{{"A02BC", "B01AC", "C07AB"}};
        CHECK(score_ddi(preds, refs, kb.ddi, false) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(score_ddi(preds, refs, kb.ddi, true) == doctest::Approx(1.6 / 3.0).epsilon(1e-12));
    }
    SUBCASE("tiny references clamp the score at one") {
        std::vector<std::set<std::string>> preds{pred};
        std::vector<std::set<std::string>> refs{{"A02BC"}};
        CHECK(score_ddi(preds, refs, kb.ddi, false) == doctest::Approx(1.0));
        CHECK(score_ddi(preds, refs, kb.ddi, true) == doctest::Approx(1.0));
        refs[0].clear();
        CHECK(score_ddi(preds, refs, kb.ddi, false) == doctest::Approx(1.0));
    }
    SUBCASE("large references dilute the exposure") {
        std::vector<std::set<std::string>> preds{pred};
        std::vector<std::set<std::string>> refs{
            {"A02BC", "B01AA", "B01AC", "C07AB", "C09AA"}};
        CHECK(score_ddi(preds, refs, kb.ddi, false) == doctest::Approx(0.2).epsilon(1e-12));
        CHECK(score_ddi(preds, refs, kb.ddi, true) == doctest::Approx(0.16).epsilon(1e-12));
    }
    SUBCASE("codes outside the matrix contribute nothing") {
        std::vector<std::set<std::string>> preds{{"B01AA", "X99XX", "Z00ZZ"}};
        std::vector<std::set<std::string>> refs{{"A02BC", "B01AC"}};
        CHECK(score_ddi(preds, refs, kb.ddi, false) == doctest::Approx(0.0));
    }
    SUBCASE("mismatched lengths throw") {
        std::vector<std::set<std::string>> preds{pred};
        CHECK_THROWS_AS(score_ddi(preds, {}, kb.ddi, false), LengthMismatch);
        CHECK_THROWS_AS(score_ddi({}, {}, kb.ddi, false), LengthMismatch);
    }
}

TEST_CASE("contraindication exposure normalizes by the reference-diagnosis budget") {
    SafetyKb kb = unit_kb();
    std::vector<std::set<std::string>> preds{{"M01AE", "N02BA"}};
    std::vector<std::vector<std::string>> diags{{"N18", "K25"}};

    SUBCASE("budget is reference size times diagnosis count") {
        std::vector<std::set<std::string>> refs{{"A02BC", "C07AB"}};
        CHECK(score_contra(preds, diags, refs, kb.contra, false) ==
              doctest::Approx(2.0 / 4.0).epsilon(1e-12));
        CHECK(score_contra(preds, diags, refs, kb.contra, true) ==
              doctest::Approx(1.3 / 4.0).epsilon(1e-12));
    }
    SUBCASE("empty references clamp instead of dividing by zero") {
        std::vector<std::set<std::string>> refs{{}};
        CHECK(score_contra(preds, diags, refs, kb.contra, false) == doctest::Approx(1.0));
    }
    SUBCASE("no diagnoses means no exposure") {
        std::vector<std::vector<std::string>> none{{}};
        std::vector<std::set<std::string>> refs{{"A02BC", "C07AB"}};
        CHECK(score_contra(preds, none, refs, kb.contra, false) == doctest::Approx(0.0));
    }
    SUBCASE("repeated diagnosis keys scale numerator and budget alike") {
        std::vector<std::vector<std::string>> repeated{{"N18", "N18"}};
        std::vector<std::set<std::string>> refs{{"A02BC", "C07AB"}};
        // M01AE hits N18 twice over a budget of four.
        CHECK(score_contra(preds, repeated, refs, kb.contra, false) ==
              doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("mismatched lengths throw") {
        std::vector<std::set<std::string>> refs{{"A02BC"}, {"C07AB"}};
        CHECK_THROWS_AS(score_contra(preds, diags, refs, kb.contra, false), LengthMismatch);
        CHECK_THROWS_AS(score_contra({}, {}, {}, kb.contra, false), LengthMismatch);
    }
}

TEST_CASE("exposure scores match a brute-force oracle") {
    const std::vector<std::string>& codes = kb_codes();
    const std::vector<std::string> diagCols{"D10", "D20", "D30"};
    std::mt19937_64 rng(97531);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> caseCount(1, 5);

    for (int trial = 0; trial < 300; ++trial) {
        std::vector<std::tuple<std::string, std::string, bool, double>> ddiCells;
        for (std::size_t i = 0; i < codes.size(); ++i) {
            for (std::size_t j = i + 1; j < codes.size(); ++j) {
                if (unit(rng) < 0.35) ddiCells.emplace_back(codes[i], codes[j], true, unit(rng));
            }
        }
        std::vector<std::tuple<std::string, std::string, bool, double>> contraCells;
        for (const auto& med : codes) {
            for (const auto& diag : diagCols) {
                if (unit(rng) < 0.3) contraCells.emplace_back(med, diag, true, unit(rng));
            }
        }
        DdiMatrix ddi = make_ddi(codes, ddiCells);
        ContraMatrix contra = make_contra(codes, diagCols, contraCells);

        std::size_t n = caseCount(rng);
        std::vector<std::set<std::string>> preds;
        std::vector<std::set<std::string>> refs;
        std::vector<std::vector<std::string>> diags;
        for (std::size_t t = 0; t < n; ++t) {
            preds.push_back(random_set(rng, codes, 5));
            refs.push_back(random_set(rng, codes, 5));
            std::vector<std::string> d;
            std::uniform_int_distribution<std::size_t> dn(0, 3);
            std::uniform_int_distribution<std::size_t> dp(0, diagCols.size() - 1);
            for (std::size_t k = dn(rng); k > 0; --k) d.push_back(diagCols[dp(rng)]);
            diags.push_back(std::move(d));
        }

        for (bool weighted : {false, true}) {
            double ddiTotal = 0.0;
            double contraTotal = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                std::vector<std::string> meds(preds[t].begin(), preds[t].end());
                double exposure = 0.0;
                for (std::size_t i = 0; i < meds.size(); ++i) {
                    for (std::size_t j = i + 1; j < meds.size(); ++j) {
                        exposure += weighted ? ddi.weighted(meds[i], meds[j])
                                             : (ddi.binary(meds[i], meds[j]) ? 1.0 : 0.0);
                    }
                }
                double budget = static_cast<double>(refs[t].size()) *
                                static_cast<double>(refs[t].size() - 1) / 2.0;
                if (refs[t].empty()) budget = 0.0;
                ddiTotal += std::min(1.0, exposure / std::max(budget, 1.0));

                double cExposure = 0.0;
                for (const auto& med : preds[t]) {
                    for (const auto& diag : diags[t]) {
                        cExposure += weighted ? contra.weighted(med, diag)
                                              : (contra.binary(med, diag) ? 1.0 : 0.0);
                    }
                }
                double cBudget =
                    static_cast<double>(refs[t].size()) * static_cast<double>(diags[t].size());
                contraTotal += std::min(1.0, cExposure / std::max(cBudget, 1.0));
            }
            double dn2 = static_cast<double>(n);
            CHECK(score_ddi(preds, refs, ddi, weighted) ==
                  doctest::Approx(ddiTotal / dn2).epsilon(1e-12));
            CHECK(score_contra(preds, diags, refs, contra, weighted) ==
                  doctest::Approx(contraTotal / dn2).epsilon(1e-12));
        }
    }
}

TEST_CASE("trace evaluation skips cases without references") {
    SafetyKb kb = unit_kb();
    PatientRecord scored = make_record("c1", {"N18.3"});
    scored.groundTruth = std::vector<std::string>{"B01AA"};
    PatientRecord noReference = make_record("c2", {"I21.4"});

    std::vector<PipelineTrace> traces{trace_of("c1", {"B01AA", "M01AE"}),
                                      trace_of("c2", {"A02BC"}),
                                      trace_of("ghost", {"A02BC"})};
    EvaluationReport report = evaluate_traces(traces, {scored, noReference}, kb);

    CHECK(report.scoredCases == 1);
    CHECK(report.skippedNoReference == 2);
    REQUIRE(report.perCase.size() == 1);

    const CaseScore& cs = report.perCase[0];
    CHECK(cs.caseId == "c1");
    CHECK(cs.predicted == 2);
    CHECK(cs.reference == 1);
    CHECK(cs.jaccard == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cs.precision == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cs.recall == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cs.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    // One interacting pair against a one-class reference, plus the
    // chronic-kidney contraindication of the NSAID.
    CHECK(cs.safety.ddiBinary == doctest::Approx(1.0));
    CHECK(cs.safety.ddiWeighted == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(cs.safety.contraBinary == doctest::Approx(1.0));
    CHECK(cs.safety.contraWeighted == doctest::Approx(0.8).epsilon(1e-12));

    CHECK(report.accuracy.jaccard == doctest::Approx(cs.jaccard));
    CHECK(report.safety.ddiWeighted == doctest::Approx(0.6).epsilon(1e-12));

    SUBCASE("no scorable trace leaves the report empty") {
        EvaluationReport empty = evaluate_traces(traces, {noReference}, kb);
        CHECK(empty.scoredCases == 0);
        CHECK(empty.skippedNoReference == 3);
        CHECK(empty.accuracy.jaccard == 0.0);
        CHECK(empty.perCase.empty());
    }
}

TEST_CASE("granularity collapse changes which risks are visible") {
    SUBCASE("collapsed subgroups expose a pair hidden at class level") {
        SafetyKb kb = unit_kb();
        std::vector<std::set<std::string>> sets{{"B01AA", "N02BE"}};
        std::vector<std::vector<std::string>> diags{{"K25"}};
        GranularityComparison g = granularity_compare(sets, diags, kb);
        CHECK(g.cases == 1);
        // N02BE never interacts at class level; its subgroup does.
        CHECK(g.classLevel.ddiBinary == doctest::Approx(0.0));
        CHECK(g.subgroupLevel.ddiBinary == doctest::Approx(1.0));
        CHECK(g.subgroupLevel.ddiWeighted == doctest::Approx(1.0));
        // The salicylate cell folds onto the whole N02B subgroup.
        CHECK(g.classLevel.contraBinary == doctest::Approx(0.0));
        CHECK(g.subgroupLevel.contraBinary == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("same-subgroup pairs vanish after the collapse") {
        SafetyKb kb;
        kb.ddi = make_ddi(kb_codes(), {{"B01AA", "B01AC", true, 1.0}});
        kb.contra = make_contra(kb_codes(), {"K25"}, {});
        std::vector<std::set<std::string>> sets{{"B01AA", "B01AC"}};
        std::vector<std::vector<std::string>> diags{{}};
        GranularityComparison g = granularity_compare(sets, diags, kb);
        CHECK(g.classLevel.ddiBinary == doctest::Approx(1.0));
        CHECK(g.subgroupLevel.ddiBinary == doctest::Approx(0.0));
    }
    SUBCASE("mismatched lengths throw") {
        SafetyKb kb = unit_kb();
        CHECK_THROWS_AS(granularity_compare({{"B01AA"}}, {}, kb), LengthMismatch);
        CHECK_THROWS_AS(granularity_compare({}, {}, kb), LengthMismatch);
    }
}

TEST_CASE("report emitters are stable and parse back") {
    SafetyKb kb = unit_kb();
    PatientRecord scored = make_record("c1", {"N18.3"});
    scored.groundTruth = std::vector<std::string>{"B01AA"};
    EvaluationReport report =
        evaluate_traces({trace_of("c1", {"B01AA", "M01AE"})}, {scored}, kb);

    SUBCASE("json emitter") {
        std::string text = evaluation_report_to_json(report);
        REQUIRE(text.back() == '\n');
        nlohmann::json j = nlohmann::json::parse(text);
        CHECK(j.at("scoredCases") == 1);
        CHECK(j.at("skippedNoReference") == 0);
        CHECK(j.at("accuracy").at("jaccard").get<double>() ==
              doctest::Approx(report.accuracy.jaccard));
        CHECK(j.at("safety").at("ddiWeighted").get<double>() == doctest::Approx(0.6));
        REQUIRE(j.at("perCase").size() == 1);
        CHECK(j.at("perCase")[0].at("caseId") == "c1");
        CHECK(j.at("perCase")[0].at("safety").at("contraWeighted").get<double>() ==
              doctest::Approx(0.8));
    }
    SUBCASE("tsv emitter") {
        std::string text = evaluation_report_to_tsv(report);
        std::vector<std::string> lines = split(text, '\n');
        REQUIRE(lines.size() >= 2);
        CHECK(lines[0] ==
              "scoredCases\tjaccard\tprecision\trecall\tf1\tavgPredicted\tddiBinary\t"
              "ddiWeighted\tcontraBinary\tcontraWeighted");
        std::vector<std::string> cells = split(lines[1], '\t');
        REQUIRE(cells.size() == 10);
        CHECK(cells[0] == "1");
        CHECK(std::stod(cells[1]) == doctest::Approx(report.accuracy.jaccard).epsilon(5e-7));
        CHECK(std::stod(cells[7]) == doctest::Approx(0.6).epsilon(5e-7));
        CHECK(cells[5] == "2.000000");
    }
    SUBCASE("granularity emitter") {
        GranularityComparison g =
            granularity_compare({{"B01AA", "N02BE"}}, {{"K25"}}, kb);
        nlohmann::json j = nlohmann::json::parse(granularity_to_json(g));
        CHECK(j.at("cases") == 1);
        CHECK(j.at("classLevel").at("ddiBinary").get<double>() == doctest::Approx(0.0));
        CHECK(j.at("subgroupLevel").at("ddiBinary").get<double>() == doctest::Approx(1.0));
    }
}

TEST_CASE("the demonstration run scores match the recorded report") {
    RunConfig config = load_run_config(asset("config/run_demo.json"));
    std::unique_ptr<RunAssets> assets = load_run_assets(config);
    std::shared_ptr<LlmBackend> backend = open_backend(config);
    std::vector<PatientRecord> cases = load_cases(config.cases, &assets->vocab);
    REQUIRE(cases.size() == 10);

    std::vector<PipelineTrace> traces;
    for (const auto& record : cases) {
        traces.push_back(run_case(record, assets->panel, assets->diagnosisTaxonomy,
                                  assets->resolver, assets->kb, assets->vocab, *backend,
                                  assets->prompts, config.pipeline));
    }

    EvaluationReport report = evaluate_traces(traces, cases, assets->kb, config.accuracy);
    CHECK(report.scoredCases == 9);
    CHECK(report.skippedNoReference == 1);
    CHECK(report.accuracy.jaccard == doctest::Approx(0.915278).epsilon(5e-7));
    CHECK(report.accuracy.precision == doctest::Approx(0.972222).epsilon(5e-7));
    CHECK(report.accuracy.recall == doctest::Approx(0.853659).epsilon(5e-7));
    CHECK(report.accuracy.f1 == doctest::Approx(0.909091).epsilon(5e-7));
    CHECK(report.accuracy.avgPredicted == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(report.safety.ddiBinary == 0.0);
    CHECK(report.safety.ddiWeighted == 0.0);
    CHECK(report.safety.contraBinary == 0.0);
    CHECK(report.safety.contraWeighted == 0.0);

    CHECK(evaluation_report_to_tsv(report) ==
          read_text_file(asset("golden/evaluation_demo.tsv")));

    SUBCASE("reference sets stay clean at class level but not at subgroup level") {
        std::vector<std::set<std::string>> gtSets;
        std::vector<std::vector<std::string>> diagKeys;
        for (const auto& record : cases) {
            if (!record.groundTruth) continue;
            gtSets.push_back(record.ground_truth_set());
            std::vector<std::string> keys;
            for (const auto& d : record.target.diagnoses) keys.push_back(pre_decimal(d));
            diagKeys.push_back(std::move(keys));
        }
        REQUIRE(gtSets.size() == 9);
        GranularityComparison g = granularity_compare(gtSets, diagKeys, assets->kb);
        CHECK(g.classLevel.ddiBinary == 0.0);
        CHECK(g.classLevel.ddiWeighted == 0.0);
        CHECK(g.classLevel.contraBinary == 0.0);
        CHECK(g.classLevel.contraWeighted == 0.0);
        CHECK(g.subgroupLevel.ddiBinary == doctest::Approx(1.0 / 54.0).epsilon(1e-12));
        CHECK(g.subgroupLevel.ddiWeighted == doctest::Approx(0.75 / 54.0).epsilon(1e-12));
        CHECK(g.subgroupLevel.contraBinary == doctest::Approx(1.0 / 72.0).epsilon(1e-12));
        CHECK(g.subgroupLevel.contraWeighted == doctest::Approx(0.5 / 72.0).epsilon(1e-12));
    }
}
