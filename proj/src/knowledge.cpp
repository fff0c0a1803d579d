#include "saferx/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace saferx {

namespace {

using nlohmann::json;

std::string format_weight(double w) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", w);
    return buf;
}

/// Maps a source identifier to the set of distinct vocabulary class codes it
/// resolves to. Codes below class level are truncated; codes too shallow or
/// outside the vocabulary are skipped.
std::vector<std::string> map_to_vocab(const std::string& sourceId, const IdMap& idMap,
                                      const Vocab& vocab) {
    std::vector<std::string> out;
    const std::vector<std::string>* atcs = idMap.find(sourceId);
    if (!atcs) return out;
    for (const auto& raw : *atcs) {
        try {
            std::string l4 = to_l4(parse_atc(raw)).text;
            if (vocab.contains(l4) &&
                std::find(out.begin(), out.end(), l4) == out.end()) {
                out.push_back(l4);
            }
        } catch (const Error&) {
            // Malformed or too-shallow mapping entries contribute nothing.
        }
    }
    return out;
}

void validate_cells(const std::map<std::pair<int, int>, SafetyCell>& cells,
                    int rowCount, int colCount, bool symmetric) {
    for (const auto& [key, cell] : cells) {
        if (key.first < 0 || key.first >= rowCount || key.second < 0 ||
            key.second >= colCount) {
            throw Error("safety matrix cell out of range");
        }
        if (symmetric && key.first >= key.second) {
            throw Error("symmetric matrix cells must satisfy row < col");
        }
        if (cell.weighted < 0.0 || cell.weighted > 1.0) {
            throw Error("safety matrix weight outside [0, 1]");
        }
        if (cell.weighted > 0.0 && !cell.binary) {
            throw Error("weighted support without binary support");
        }
    }
}

}  // namespace

DdiMatrix::DdiMatrix(Vocab vocab, std::map<std::pair<int, int>, SafetyCell> cells)
    : vocab_(std::move(vocab)), cells_(std::move(cells)) {
    int n = static_cast<int>(vocab_.size());
    validate_cells(cells_, n, n, /*symmetric=*/true);
    degrees_.assign(static_cast<std::size_t>(n), 0);
    for (const auto& [key, cell] : cells_) {
        if (cell.binary) {
            ++degrees_[static_cast<std::size_t>(key.first)];
            ++degrees_[static_cast<std::size_t>(key.second)];
        }
    }
}

bool DdiMatrix::binary(int i, int j) const {
    if (i == j) return false;
    auto key = std::minmax(i, j);
    auto it = cells_.find({key.first, key.second});
    return it != cells_.end() && it->second.binary;
}

double DdiMatrix::weighted(int i, int j) const {
    if (i == j) return 0.0;
    auto key = std::minmax(i, j);
    auto it = cells_.find({key.first, key.second});
    return it == cells_.end() ? 0.0 : it->second.weighted;
}

bool DdiMatrix::binary(const std::string& a, const std::string& b) const {
    auto ia = vocab_.try_index_of(a);
    auto ib = vocab_.try_index_of(b);
    if (!ia || !ib) return false;
    return binary(*ia, *ib);
}

double DdiMatrix::weighted(const std::string& a, const std::string& b) const {
    auto ia = vocab_.try_index_of(a);
    auto ib = vocab_.try_index_of(b);
    if (!ia || !ib) return 0.0;
    return weighted(*ia, *ib);
}

int DdiMatrix::degree(int i) const {
    if (i < 0 || static_cast<std::size_t>(i) >= degrees_.size()) return 0;
    return degrees_[static_cast<std::size_t>(i)];
}

int DdiMatrix::degree(const std::string& code) const {
    auto i = vocab_.try_index_of(code);
    return i ? degree(*i) : 0;
}

ContraMatrix::ContraMatrix(Vocab medVocab, Vocab diagVocab,
                           std::map<std::pair<int, int>, SafetyCell> cells)
    : medVocab_(std::move(medVocab)), diagVocab_(std::move(diagVocab)),
      cells_(std::move(cells)) {
    validate_cells(cells_, static_cast<int>(medVocab_.size()),
                   static_cast<int>(diagVocab_.size()), /*symmetric=*/false);
}

bool ContraMatrix::binary(const std::string& med, const std::string& diag) const {
    auto im = medVocab_.try_index_of(med);
    auto id = diagVocab_.try_index_of(diag);
    if (!im || !id) return false;
    auto it = cells_.find({*im, *id});
    return it != cells_.end() && it->second.binary;
}

double ContraMatrix::weighted(const std::string& med, const std::string& diag) const {
    auto im = medVocab_.try_index_of(med);
    auto id = diagVocab_.try_index_of(diag);
    if (!im || !id) return 0.0;
    auto it = cells_.find({*im, *id});
    return it == cells_.end() ? 0.0 : it->second.weighted;
}

const std::set<std::string>* IndicationMap::find(const std::string& diagKey) const {
    auto it = byDiagnosis.find(diagKey);
    return it == byDiagnosis.end() ? nullptr : &it->second;
}

IdMap IdMap::load(const std::filesystem::path& path) {
    IdMap m;
    for (const auto& row : read_tsv(path, 2)) {
        m.map_[trim(row[0])].push_back(to_upper(trim(row[1])));
    }
    return m;
}

IdMap IdMap::from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
    IdMap m;
    for (const auto& [id, atc] : pairs) m.map_[id].push_back(to_upper(atc));
    return m;
}

const std::vector<std::string>* IdMap::find(const std::string& sourceId) const {
    auto it = map_.find(sourceId);
    return it == map_.end() ? nullptr : &it->second;
}

DdiMatrix build_ddi(const std::vector<DdiRecord>& records, const IdMap& idMap,
                    const Vocab& vocab, DdiBuildStats* stats) {
    if (vocab.empty()) throw EmptyVocab("interaction matrix needs a non-empty vocabulary");

    DdiBuildStats local;
    local.inputRecords = records.size();

    std::map<std::pair<int, int>, double> sums;
    for (const auto& rec : records) {
        auto codesA = map_to_vocab(rec.drugA, idMap, vocab);
        auto codesB = map_to_vocab(rec.drugB, idMap, vocab);
        if (codesA.empty() || codesB.empty()) {
            ++local.unmappedRecords;
            continue;
        }
        bool contributed = false;
        for (const auto& a : codesA) {
            for (const auto& b : codesB) {
                int ia = vocab.index_of(a);
                int ib = vocab.index_of(b);
                if (ia == ib) continue;  // class-level self pair: diagonal excluded
                auto key = std::minmax(ia, ib);
                sums[{key.first, key.second}] += rec.frequency;
                contributed = true;
            }
        }
        if (!contributed) ++local.selfPairsDropped;
    }

    if (!records.empty() && sums.empty() &&
        local.unmappedRecords + local.selfPairsDropped == records.size()) {
        if (local.unmappedRecords == records.size()) {
            throw AllRecordsUnmapped("no interaction record mapped into the vocabulary");
        }
    }

    double maxWeight = 0.0;
    for (const auto& [key, w] : sums) {
        (void)key;
        maxWeight = std::max(maxWeight, w);
    }

    std::map<std::pair<int, int>, SafetyCell> cells;
    for (const auto& [key, w] : sums) {
        SafetyCell cell;
        cell.binary = true;
        cell.weighted = maxWeight > 0.0 ? w / maxWeight : 0.0;
        cells[key] = cell;
    }

    if (stats) *stats = local;
    return DdiMatrix(vocab, std::move(cells));
}

DiagnosisLexicon DiagnosisLexicon::load(const std::filesystem::path& path) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& row : read_tsv(path, 2)) {
        pairs.emplace_back(trim(row[0]), strip_dots(trim(row[1])));
    }
    return from_pairs(pairs);
}

DiagnosisLexicon DiagnosisLexicon::from_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
    DiagnosisLexicon lex;
    for (const auto& [term, key] : pairs) {
        std::string t = to_lower(trim(term));
        if (!t.empty()) lex.terms_.emplace_back(t, strip_dots(key));
    }
    std::stable_sort(lex.terms_.begin(), lex.terms_.end(),
                     [](const auto& a, const auto& b) {
                         if (a.first.size() != b.first.size())
                             return a.first.size() > b.first.size();
                         return a.first < b.first;
                     });
    return lex;
}

namespace {
bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}
}  // namespace

std::map<std::string, int> DiagnosisLexicon::extract(const std::string& text) const {
    std::map<std::string, int> hits;
    if (terms_.empty()) return hits;
    std::string lower = to_lower(text);
    std::size_t pos = 0;
    while (pos < lower.size()) {
        if (pos > 0 && is_word_char(lower[pos - 1]) && is_word_char(lower[pos])) {
            ++pos;
            continue;
        }
        bool matched = false;
        for (const auto& [term, key] : terms_) {
            if (lower.compare(pos, term.size(), term) != 0) continue;
            std::size_t end = pos + term.size();
            if (end < lower.size() && is_word_char(lower[end]) &&
                is_word_char(term.back())) {
                continue;
            }
            ++hits[key];
            pos = end;
            matched = true;
            break;
        }
        if (!matched) ++pos;
    }
    return hits;
}

ContraBuildResult build_contra(const std::vector<LabelRecord>& records, const IdMap& idMap,
                               const Vocab& vocab, const DiagnosisLexicon& lexicon) {
    if (vocab.empty()) throw EmptyVocab("contraindication matrix needs a non-empty vocabulary");
    if (lexicon.empty()) throw EmptyLexicon("contraindication extraction needs a lexicon");

    ContraFilterReport report;
    report.inputRecords = records.size();

    // Stage 1 + 2: identifier and text presence, in source order.
    std::vector<const LabelRecord*> survivors;
    for (const auto& rec : records) {
        if (rec.rxcuis.empty()) {
            ++report.droppedNoRxcui;
            continue;
        }
        if (trim(rec.contraText).empty()) {
            ++report.droppedNoContraText;
            continue;
        }
        survivors.push_back(&rec);
    }

    // Stage 3: single-identifier duplicates collapse to the longest text.
    std::map<std::string, const LabelRecord*> byRxcui;
    std::vector<const LabelRecord*> multi;
    for (const LabelRecord* rec : survivors) {
        if (rec->rxcuis.size() > 1) {
            multi.push_back(rec);
            continue;
        }
        const std::string& id = rec->rxcuis.front();
        auto it = byRxcui.find(id);
        if (it == byRxcui.end()) {
            byRxcui.emplace(id, rec);
        } else {
            ++report.droppedDuplicateRxcui;
            if (rec->contraText.size() > it->second->contraText.size()) it->second = rec;
        }
    }

    // Stage 4: multi-identifier records are ambiguous and dropped outright.
    report.droppedMultiRxcui = multi.size();

    // Stage 5: map to vocabulary class codes and extract diagnosis terms.
    std::map<std::pair<int, int>, double> sums;
    std::set<std::string> mappedClasses;
    std::set<std::string> diagKeys;
    std::map<std::string, std::map<std::string, int>> perRxcuiHits;
    for (const auto& [rxcui, rec] : byRxcui) {
        auto classes = map_to_vocab(rxcui, idMap, vocab);
        if (classes.empty()) {
            ++report.droppedUnmapped;
            continue;
        }
        ++report.keptRecords;
        ++report.distinctRxcuis;
        auto hits = lexicon.extract(rec->contraText);
        for (const auto& cls : classes) {
            mappedClasses.insert(cls);
            for (const auto& [diagKey, count] : hits) {
                diagKeys.insert(diagKey);
                perRxcuiHits[cls][diagKey] += count;
            }
        }
    }

    Vocab diagVocab = Vocab::from_codes({diagKeys.begin(), diagKeys.end()});
    double maxWeight = 0.0;
    for (const auto& [cls, perDiag] : perRxcuiHits) {
        for (const auto& [diagKey, count] : perDiag) {
            int im = vocab.index_of(cls);
            int id = diagVocab.index_of(diagKey);
            sums[{im, id}] += count;
        }
    }
    for (const auto& [key, w] : sums) {
        (void)key;
        maxWeight = std::max(maxWeight, w);
    }

    std::map<std::pair<int, int>, SafetyCell> cells;
    for (const auto& [key, w] : sums) {
        SafetyCell cell;
        cell.binary = true;
        cell.weighted = maxWeight > 0.0 ? w / maxWeight : 0.0;
        cells[key] = cell;
    }

    report.distinctMedClasses = mappedClasses.size();
    report.pairCount = cells.size();

    ContraBuildResult result;
    result.matrix = ContraMatrix(vocab, std::move(diagVocab), std::move(cells));
    result.report = report;
    return result;
}

IndicationMap load_indications(const std::vector<IndicationRecord>& records,
                               const IdMap& idMap, const Vocab& vocab) {
    IndicationMap out;
    for (const auto& rec : records) {
        auto classes = map_to_vocab(rec.medId, idMap, vocab);
        if (classes.empty()) {
            ++out.droppedOutOfVocab;
            continue;
        }
        std::string key = strip_dots(rec.diagKey);
        for (const auto& cls : classes) out.byDiagnosis[key].insert(cls);
    }
    return out;
}

int ddi_degree(const std::string& medL4, const DdiMatrix& matrix) {
    return matrix.degree(medL4);
}

namespace {

/// Shared collapse: fold row (and optionally column) codes through a prefix
/// function, OR the binary support, take the max weight, drop self pairs for
/// symmetric matrices.
std::map<std::pair<int, int>, SafetyCell> collapse_cells(
    const std::map<std::pair<int, int>, SafetyCell>& cells,
    const std::vector<int>& rowFold, const std::vector<int>& colFold, bool symmetric) {
    std::map<std::pair<int, int>, SafetyCell> out;
    for (const auto& [key, cell] : cells) {
        int r = rowFold[static_cast<std::size_t>(key.first)];
        int c = colFold[static_cast<std::size_t>(key.second)];
        if (symmetric) {
            if (r == c) continue;  // siblings collapse onto the diagonal
            if (r > c) std::swap(r, c);
        }
        SafetyCell& target = out[{r, c}];
        target.binary = target.binary || cell.binary;
        target.weighted = std::max(target.weighted, cell.weighted);
    }
    return out;
}

Vocab fold_vocab(const Vocab& vocab, std::vector<int>& fold) {
    std::set<std::string> parents;
    for (const auto& code : vocab.codes()) parents.insert(to_l3(parse_atc(code)).text);
    Vocab folded = Vocab::from_codes({parents.begin(), parents.end()});
    fold.clear();
    fold.reserve(vocab.size());
    for (const auto& code : vocab.codes()) {
        fold.push_back(folded.index_of(to_l3(parse_atc(code)).text));
    }
    return folded;
}

}  // namespace

DdiMatrix collapse_ddi_to_l3(const DdiMatrix& matrix) {
    std::vector<int> fold;
    Vocab folded = fold_vocab(matrix.vocab(), fold);
    return DdiMatrix(folded, collapse_cells(matrix.cells(), fold, fold, true));
}

ContraMatrix collapse_contra_to_l3(const ContraMatrix& matrix) {
    std::vector<int> fold;
    Vocab folded = fold_vocab(matrix.med_vocab(), fold);
    std::vector<int> identity(matrix.diag_vocab().size());
    for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = static_cast<int>(i);
    return ContraMatrix(folded, matrix.diag_vocab(),
                        collapse_cells(matrix.cells(), fold, identity, false));
}

namespace {

void write_matrix_section(std::string& out, const std::string& name,
                          const Vocab& rows, const Vocab& cols,
                          const std::map<std::pair<int, int>, SafetyCell>& cells) {
    out += "[" + name + "]\n";
    for (const auto& [key, cell] : cells) {
        out += rows.at(key.first);
        out += '\t';
        out += cols.at(key.second);
        out += '\t';
        out += cell.binary ? '1' : '0';
        out += '\t';
        out += format_weight(cell.weighted);
        out += '\n';
    }
}

}  // namespace

void save_kb(const SafetyKb& kb, const std::filesystem::path& path) {
    std::string out = "#SAFERX-KB v1\n";

    json manifest;
    manifest["sourceDigests"] = kb.manifest.sourceDigests;
    manifest["builtAt"] = kb.manifest.builtAt;
    manifest["note"] = kb.manifest.note;
    out += "[manifest]\n" + manifest.dump() + "\n";

    out += "[medvocab]\n";
    for (const auto& code : kb.ddi.vocab().codes()) out += code + "\n";
    out += "[diagvocab]\n";
    for (const auto& code : kb.contra.diag_vocab().codes()) out += code + "\n";

    write_matrix_section(out, "ddi", kb.ddi.vocab(), kb.ddi.vocab(), kb.ddi.cells());
    write_matrix_section(out, "contra", kb.contra.med_vocab(), kb.contra.diag_vocab(),
                         kb.contra.cells());

    out += "[indications]\n";
    for (const auto& [diagKey, meds] : kb.indications.byDiagnosis) {
        out += diagKey + "\t" +
               join(std::vector<std::string>(meds.begin(), meds.end()), ",") + "\n";
    }
    write_text_file(path, out);
}

SafetyKb load_kb(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open knowledge archive: " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "#SAFERX-KB v1") {
        throw SchemaError("not a knowledge archive (missing header): " + path.string());
    }

    std::string section;
    std::string manifestJson;
    std::vector<std::string> medCodes;
    std::vector<std::string> diagCodes;
    std::vector<std::vector<std::string>> ddiRows;
    std::vector<std::vector<std::string>> contraRows;
    std::map<std::string, std::set<std::string>> indications;

    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        if (section == "manifest") {
            manifestJson += line;
        } else if (section == "medvocab") {
            medCodes.push_back(trim(line));
        } else if (section == "diagvocab") {
            diagCodes.push_back(trim(line));
        } else if (section == "ddi" || section == "contra") {
            auto cols = split(line, '\t');
            if (cols.size() != 4) throw SchemaError("bad matrix row in " + path.string());
            (section == "ddi" ? ddiRows : contraRows).push_back(std::move(cols));
        } else if (section == "indications") {
            auto cols = split(line, '\t');
            if (cols.size() != 2) throw SchemaError("bad indication row in " + path.string());
            for (const auto& med : split(cols[1], ',')) {
                if (!med.empty()) indications[cols[0]].insert(med);
            }
        } else {
            throw SchemaError("unknown archive section '" + section + "' in " + path.string());
        }
    }

    SafetyKb kb;
    if (!manifestJson.empty()) {
        json manifest = json::parse(manifestJson);
        if (manifest.contains("sourceDigests")) {
            kb.manifest.sourceDigests =
                manifest["sourceDigests"].get<std::map<std::string, std::string>>();
        }
        kb.manifest.builtAt = manifest.value("builtAt", "");
        kb.manifest.note = manifest.value("note", "");
    }

    Vocab medVocab = Vocab::from_codes(medCodes);
    Vocab diagVocab = Vocab::from_codes(diagCodes);

    auto parse_cells = [&](const std::vector<std::vector<std::string>>& rows,
                           const Vocab& rowVocab, const Vocab& colVocab, bool symmetric) {
        std::map<std::pair<int, int>, SafetyCell> cells;
        for (const auto& row : rows) {
            int r = rowVocab.index_of(row[0]);
            int c = colVocab.index_of(row[1]);
            if (symmetric && r > c) std::swap(r, c);
            SafetyCell cell;
            cell.binary = row[2] == "1";
            cell.weighted = std::stod(row[3]);
            cells[{r, c}] = cell;
        }
        return cells;
    };

    kb.ddi = DdiMatrix(medVocab, parse_cells(ddiRows, medVocab, medVocab, true));
    kb.contra = ContraMatrix(medVocab, diagVocab,
                             parse_cells(contraRows, medVocab, diagVocab, false));
    kb.indications.byDiagnosis = std::move(indications);
    return kb;
}

}  // namespace saferx
