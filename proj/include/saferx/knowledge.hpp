#ifndef SAFERX_KNOWLEDGE_HPP
#define SAFERX_KNOWLEDGE_HPP

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "saferx/ontology.hpp"

namespace saferx {

/// One cell of a safety matrix. Invariant: weighted > 0 implies binary.
struct SafetyCell {
    bool binary = false;
    double weighted = 0.0;
};

/// Symmetric drug-drug interaction matrix over a medication vocabulary.
/// Cells are stored once per unordered pair (row < col); the diagonal is
/// structurally excluded. Weighted values are rescaled to [0, 1] by the
/// global maximum at build time.
class DdiMatrix {
public:
    DdiMatrix() = default;
    DdiMatrix(Vocab vocab, std::map<std::pair<int, int>, SafetyCell> cells);

    const Vocab& vocab() const { return vocab_; }

    bool binary(int i, int j) const;
    double weighted(int i, int j) const;
    bool binary(const std::string& a, const std::string& b) const;
    double weighted(const std::string& a, const std::string& b) const;

    /// Number of distinct partners with a binary interaction.
    int degree(int i) const;
    int degree(const std::string& code) const;

    /// Upper-triangle cells in (row, col) order.
    const std::map<std::pair<int, int>, SafetyCell>& cells() const { return cells_; }

private:
    Vocab vocab_;
    std::map<std::pair<int, int>, SafetyCell> cells_;
    std::vector<int> degrees_;
};

/// Medication-by-diagnosis contraindication matrix. Rows are vocabulary
/// medications, columns are pre-decimal diagnosis category codes.
class ContraMatrix {
public:
    ContraMatrix() = default;
    ContraMatrix(Vocab medVocab, Vocab diagVocab,
                 std::map<std::pair<int, int>, SafetyCell> cells);

    const Vocab& med_vocab() const { return medVocab_; }
    const Vocab& diag_vocab() const { return diagVocab_; }

    bool binary(const std::string& med, const std::string& diag) const;
    double weighted(const std::string& med, const std::string& diag) const;

    const std::map<std::pair<int, int>, SafetyCell>& cells() const { return cells_; }

private:
    Vocab medVocab_;
    Vocab diagVocab_;
    std::map<std::pair<int, int>, SafetyCell> cells_;
};

/// Diagnosis category -> set of indicated vocabulary medications.
struct IndicationMap {
    std::map<std::string, std::set<std::string>> byDiagnosis;
    std::size_t droppedOutOfVocab = 0;

    const std::set<std::string>* find(const std::string& diagKey) const;
};

/// Provenance manifest embedded in a knowledge archive.
struct KbManifest {
    std::map<std::string, std::string> sourceDigests;
    std::string builtAt;
    std::string note;
};

struct SafetyKb {
    DdiMatrix ddi;
    ContraMatrix contra;
    IndicationMap indications;
    KbManifest manifest;
};

/// Interaction report row: two source-level drug identifiers plus the
/// reported co-occurrence frequency.
struct DdiRecord {
    std::string drugA;
    std::string drugB;
    double frequency = 0.0;
};

/// Source identifier -> ATC code mapping (possibly one-to-many).
class IdMap {
public:
    static IdMap load(const std::filesystem::path& path);
    static IdMap from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);

    const std::vector<std::string>* find(const std::string& sourceId) const;
    std::size_t size() const { return map_.size(); }

private:
    std::map<std::string, std::vector<std::string>> map_;
};

struct DdiBuildStats {
    std::size_t inputRecords = 0;
    std::size_t unmappedRecords = 0;
    std::size_t selfPairsDropped = 0;
};

/// Builds the interaction matrix: map both identifiers to vocabulary class
/// codes, sum frequencies per unordered pair, rescale by the global maximum,
/// clear the diagonal. Records whose drugs do not both map into the
/// vocabulary are counted, not fatal. Throws EmptyVocab on an empty
/// vocabulary and AllRecordsUnmapped when nothing maps.
DdiMatrix build_ddi(const std::vector<DdiRecord>& records, const IdMap& idMap,
                    const Vocab& vocab, DdiBuildStats* stats = nullptr);

/// One product label record from the structured-label source.
struct LabelRecord {
    std::vector<std::string> rxcuis;
    std::string substance;
    std::string contraText;
};

/// Term -> diagnosis category key lexicon for contraindication extraction.
class DiagnosisLexicon {
public:
    static DiagnosisLexicon load(const std::filesystem::path& path);
    static DiagnosisLexicon from_pairs(
        const std::vector<std::pair<std::string, std::string>>& pairs);

    /// Case-insensitive scan of free text; overlapping terms resolve to the
    /// longest match. Returns matched diagnosis keys with mention counts.
    std::map<std::string, int> extract(const std::string& text) const;

    bool empty() const { return terms_.empty(); }
    std::size_t size() const { return terms_.size(); }

private:
    // Terms sorted by descending length so the scanner prefers long matches.
    std::vector<std::pair<std::string, std::string>> terms_;
};

/// Label filtering audit trail. Conservation: every input record lands in
/// exactly one bucket (kept or one of the drop reasons).
struct ContraFilterReport {
    std::size_t inputRecords = 0;
    std::size_t droppedNoRxcui = 0;
    std::size_t droppedNoContraText = 0;
    std::size_t droppedDuplicateRxcui = 0;
    std::size_t droppedMultiRxcui = 0;
    std::size_t droppedUnmapped = 0;
    std::size_t keptRecords = 0;
    std::size_t distinctRxcuis = 0;
    std::size_t distinctMedClasses = 0;
    std::size_t pairCount = 0;

    std::size_t accounted() const {
        return droppedNoRxcui + droppedNoContraText + droppedDuplicateRxcui +
               droppedMultiRxcui + droppedUnmapped + keptRecords;
    }
};

struct ContraBuildResult {
    ContraMatrix matrix;
    ContraFilterReport report;
};

/// Builds the contraindication matrix from label records:
///   1. drop records with no source identifier,
///   2. drop records with no contraindication text,
///   3. collapse duplicate single-identifier records, keeping the longest text,
///   4. drop records listing multiple identifiers,
///   5. map identifiers to vocabulary class codes (unmappable counted).
/// Matched lexicon terms produce cells; weights are mention counts rescaled
/// by the global maximum. Throws EmptyLexicon on an empty lexicon.
ContraBuildResult build_contra(const std::vector<LabelRecord>& records, const IdMap& idMap,
                               const Vocab& vocab, const DiagnosisLexicon& lexicon);

/// Indication source row: diagnosis category key plus a source med identifier.
struct IndicationRecord {
    std::string diagKey;
    std::string medId;
};

IndicationMap load_indications(const std::vector<IndicationRecord>& records,
                               const IdMap& idMap, const Vocab& vocab);

/// Interaction degree of a medication class; zero degree is meaningful
/// evidence ("no known partners"), not missing data.
int ddi_degree(const std::string& medL4, const DdiMatrix& matrix);

/// Collapses a class-level (5-character) matrix to subgroup level
/// (4 characters): binary is the OR over child pairs, weighted the max.
/// Pairs whose parents coincide fall on the collapsed diagonal and are
/// cleared.
DdiMatrix collapse_ddi_to_l3(const DdiMatrix& matrix);
ContraMatrix collapse_contra_to_l3(const ContraMatrix& matrix);

/// Single-file archive with embedded manifest; both matrices, the indication
/// relation, and the vocabularies round-trip losslessly.
void save_kb(const SafetyKb& kb, const std::filesystem::path& path);
SafetyKb load_kb(const std::filesystem::path& path);

}  // namespace saferx

#endif
