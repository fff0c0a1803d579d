#include "saferx/ontology.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace saferx {

namespace {

bool is_upper_alpha(char c) { return c >= 'A' && c <= 'Z'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

/// ATC grammar per level:
///   L1 "C"  L2 "C07"  L3 "C07A"  L4 "C07AB"  L5 "C07AB02"
bool matches_atc_grammar(const std::string& s) {
    switch (s.size()) {
        case 1:
            return is_upper_alpha(s[0]);
        case 3:
            return is_upper_alpha(s[0]) && is_digit(s[1]) && is_digit(s[2]);
        case 4:
            return is_upper_alpha(s[0]) && is_digit(s[1]) && is_digit(s[2]) &&
                   is_upper_alpha(s[3]);
        case 5:
            return is_upper_alpha(s[0]) && is_digit(s[1]) && is_digit(s[2]) &&
                   is_upper_alpha(s[3]) && is_upper_alpha(s[4]);
        case 7:
            return is_upper_alpha(s[0]) && is_digit(s[1]) && is_digit(s[2]) &&
                   is_upper_alpha(s[3]) && is_upper_alpha(s[4]) && is_digit(s[5]) &&
                   is_digit(s[6]);
        default:
            return false;
    }
}

AtcLevel level_for_length(std::size_t n) {
    switch (n) {
        case 1: return AtcLevel::Level1;
        case 3: return AtcLevel::Level2;
        case 4: return AtcLevel::Level3;
        case 5: return AtcLevel::Level4;
        default: return AtcLevel::Level5;
    }
}

}  // namespace

AtcCode parse_atc(std::string_view text) {
    std::string normalized = to_upper(trim(text));
    if (!matches_atc_grammar(normalized)) {
        throw MalformedCode("not a valid ATC code: '" + std::string(text) + "'");
    }
    return AtcCode{normalized, level_for_length(normalized.size())};
}

bool is_atc_level(std::string_view text, AtcLevel level) {
    try {
        return parse_atc(text).level == level;
    } catch (const MalformedCode&) {
        return false;
    }
}

AtcCode to_l4(const AtcCode& code) {
    if (static_cast<int>(code.level) < 4) {
        throw LevelTooShallow("cannot take class ancestor of " + code.text +
                              " (level " + std::to_string(static_cast<int>(code.level)) + ")");
    }
    if (code.level == AtcLevel::Level4) return code;
    return AtcCode{code.text.substr(0, 5), AtcLevel::Level4};
}

AtcCode to_l3(const AtcCode& code) {
    if (static_cast<int>(code.level) < 3) {
        throw LevelTooShallow("cannot take subgroup ancestor of " + code.text +
                              " (level " + std::to_string(static_cast<int>(code.level)) + ")");
    }
    if (code.level == AtcLevel::Level3) return code;
    return AtcCode{code.text.substr(0, 4), AtcLevel::Level3};
}

std::string icd_version_name(IcdVersion v) {
    return v == IcdVersion::Icd9Cm ? "icd9cm" : "icd10cm";
}

IcdVersion parse_icd_version(std::string_view name) {
    std::string n = to_lower(trim(name));
    if (n == "icd9cm" || n == "icd9" || n == "9") return IcdVersion::Icd9Cm;
    if (n == "icd10cm" || n == "icd10" || n == "10") return IcdVersion::Icd10Cm;
    throw SchemaError("unknown ICD version tag: '" + std::string(name) + "'");
}

std::string strip_dots(std::string_view code) {
    std::string out;
    out.reserve(code.size());
    for (char c : code) {
        if (c != '.') out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

std::string pre_decimal(const IcdCode& code) {
    std::string t = to_upper(trim(code.text));
    if (auto pos = t.find('.'); pos != std::string::npos) return t.substr(0, pos);
    // Dotless source text: fall back to the conventional category length.
    std::size_t n = 3;
    if (code.version == IcdVersion::Icd9Cm && !t.empty() && t[0] == 'E') n = 4;
    return t.substr(0, std::min(n, t.size()));
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
    std::map<std::string, TaxonomyNode> nodes;
    for (const auto& row : read_tsv(path, 4)) {
        TaxonomyNode node;
        node.parent = trim(row[1]);
        try {
            node.level = std::stoi(row[2]);
        } catch (const std::exception&) {
            throw IoError(path.string() + ": bad level '" + row[2] + "' for code " + row[0]);
        }
        node.description = trim(row[3]);
        auto [it, inserted] = nodes.emplace(trim(row[0]), std::move(node));
        if (!inserted) throw IoError(path.string() + ": duplicate code " + row[0]);
    }
    return from_nodes(std::move(nodes));
}

Taxonomy Taxonomy::from_nodes(std::map<std::string, TaxonomyNode> nodes) {
    Taxonomy t;
    t.nodes_ = std::move(nodes);
    t.validate();
    return t;
}

void Taxonomy::validate() const {
    for (const auto& [code, node] : nodes_) {
        if (node.level < 1) throw SchemaError("taxonomy node " + code + " has level < 1");
        if (node.parent.empty()) {
            if (node.level != 1) {
                throw SchemaError("taxonomy node " + code + " has no parent but level " +
                                  std::to_string(node.level));
            }
            continue;
        }
        auto it = nodes_.find(node.parent);
        if (it == nodes_.end()) {
            throw SchemaError("taxonomy node " + code + " references missing parent " +
                              node.parent);
        }
        if (it->second.level != node.level - 1) {
            throw SchemaError("taxonomy node " + code + " (level " +
                              std::to_string(node.level) + ") has parent " + node.parent +
                              " at level " + std::to_string(it->second.level));
        }
    }
}

bool Taxonomy::contains(const std::string& code) const { return nodes_.count(code) != 0; }

const TaxonomyNode* Taxonomy::find(const std::string& code) const {
    auto it = nodes_.find(code);
    return it == nodes_.end() ? nullptr : &it->second;
}

std::string Taxonomy::description(const std::string& code) const {
    const TaxonomyNode* node = find(code);
    return node ? node->description : std::string();
}

std::string Taxonomy::level1_ancestor(const std::string& code) const {
    const TaxonomyNode* node = find(code);
    if (!node) throw UnknownCode("code not in taxonomy: " + code);
    std::string current = code;
    while (node->level > 1) {
        current = node->parent;
        node = find(current);
        if (!node) throw UnknownCode("broken parent chain at: " + current);
    }
    return current;
}

std::map<int, std::size_t> Taxonomy::level_counts() const {
    std::map<int, std::size_t> counts;
    for (const auto& [code, node] : nodes_) {
        (void)code;
        ++counts[node.level];
    }
    return counts;
}

ChapterId icd_chapter(const IcdCode& code, const Taxonomy& taxonomy) {
    std::string key = strip_dots(code.text);
    // Exact node first, then progressively shorter prefixes down to the
    // category length; source exports often carry more specificity than the
    // hierarchy file does.
    for (std::size_t len = key.size(); len >= 3; --len) {
        std::string probe = key.substr(0, len);
        if (taxonomy.contains(probe)) return taxonomy.level1_ancestor(probe);
        if (len == 3) break;
    }
    throw UnknownCode("diagnosis code not in hierarchy: " + code.text);
}

Vocab Vocab::from_codes(std::vector<std::string> codes) {
    Vocab v;
    v.codes_ = std::move(codes);
    for (std::size_t i = 0; i < v.codes_.size(); ++i) {
        auto [it, inserted] = v.index_.emplace(v.codes_[i], static_cast<int>(i));
        if (!inserted) throw SchemaError("duplicate vocabulary code: " + v.codes_[i]);
    }
    return v;
}

bool Vocab::contains(const std::string& code) const { return index_.count(code) != 0; }

int Vocab::index_of(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) throw UnknownMedication("code not in vocabulary: " + code);
    return it->second;
}

std::optional<int> Vocab::try_index_of(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocab::at(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= codes_.size()) {
        throw Error("vocabulary index out of range: " + std::to_string(index));
    }
    return codes_[static_cast<std::size_t>(index)];
}

MedVocab MedVocab::from_codes(const std::vector<std::string>& codes) {
    std::vector<std::string> normalized;
    normalized.reserve(codes.size());
    for (const auto& raw : codes) {
        AtcCode parsed = parse_atc(raw);
        if (parsed.level != AtcLevel::Level4) {
            throw MalformedCode("medication vocabulary entries must be 5-character class codes, got: " +
                                parsed.text);
        }
        normalized.push_back(parsed.text);
    }
    return MedVocab(Vocab::from_codes(std::move(normalized)));
}

MedVocab MedVocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file: " + path.string());
    std::vector<std::string> codes;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        codes.push_back(t);
    }
    if (codes.empty()) throw EmptyVocab("vocabulary file is empty: " + path.string());
    return from_codes(codes);
}

void MedVocab::save(const std::filesystem::path& path) const {
    std::string out;
    for (const auto& code : codes()) {
        out += code;
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace saferx
