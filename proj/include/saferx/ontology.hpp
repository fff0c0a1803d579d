#ifndef SAFERX_ONTOLOGY_HPP
#define SAFERX_ONTOLOGY_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "saferx/common.hpp"

namespace saferx {

/// ATC hierarchy depth. Level4 (5-character class codes, e.g. C07AB) is the
/// working granularity of the whole engine; Level5 is the ingredient level.
enum class AtcLevel : int {
    Level1 = 1,
    Level2 = 2,
    Level3 = 3,
    Level4 = 4,
    Level5 = 5,
};

/// A validated, uppercase ATC code. Construct through parse_atc.
struct AtcCode {
    std::string text;
    AtcLevel level = AtcLevel::Level1;

    bool operator==(const AtcCode& other) const { return text == other.text; }
    bool operator<(const AtcCode& other) const { return text < other.text; }
};

/// Parses and validates an ATC code of any level. Input is case-insensitive;
/// the result is uppercase. Throws MalformedCode when the length or character
/// classes do not match the ATC grammar.
AtcCode parse_atc(std::string_view text);

/// True when text parses as an ATC code of exactly the given level.
bool is_atc_level(std::string_view text, AtcLevel level);

/// Truncates to the 5-character class ancestor. Level-4 codes pass through.
/// Throws LevelTooShallow for levels 1-3.
AtcCode to_l4(const AtcCode& code);

/// Truncates to the 4-character subgroup ancestor. Level-3 codes pass
/// through. Throws LevelTooShallow for levels 1-2.
AtcCode to_l3(const AtcCode& code);

enum class IcdVersion { Icd9Cm, Icd10Cm };
enum class IcdKind { Diagnosis, Procedure };

/// A diagnosis or procedure code. The version tag is always present; code
/// text keeps the source formatting (dots are stripped only at lookup time).
struct IcdCode {
    std::string text;
    IcdVersion version = IcdVersion::Icd10Cm;
    IcdKind kind = IcdKind::Diagnosis;

    bool operator==(const IcdCode& other) const {
        return text == other.text && version == other.version && kind == other.kind;
    }
};

std::string icd_version_name(IcdVersion v);
IcdVersion parse_icd_version(std::string_view name);

/// Dot-free code text, uppercased. "I21.4" -> "I214".
std::string strip_dots(std::string_view code);

/// Category (pre-decimal) part of a code: text up to the dot when present,
/// otherwise the conventional category length for the version (3 characters,
/// 4 for ICD-9 E-codes).
std::string pre_decimal(const IcdCode& code);

/// Node in a coded hierarchy. Every node except roots has exactly one parent
/// one level above it; roots are level 1 with an empty parent.
struct TaxonomyNode {
    std::string parent;
    int level = 0;
    std::string description;
};

/// Generic multi-level code hierarchy loaded from a TSV of
/// code<TAB>parent<TAB>level<TAB>description rows.
class Taxonomy {
public:
    static Taxonomy load(const std::filesystem::path& path);
    static Taxonomy from_nodes(std::map<std::string, TaxonomyNode> nodes);

    bool contains(const std::string& code) const;
    const TaxonomyNode* find(const std::string& code) const;

    /// Description for a code, or empty when unknown.
    std::string description(const std::string& code) const;

    /// Level-1 ancestor of a code. Throws UnknownCode when the code has no
    /// node and no prefix of it does either.
    std::string level1_ancestor(const std::string& code) const;

    /// Number of nodes per level, keyed by level.
    std::map<int, std::size_t> level_counts() const;

    std::size_t size() const { return nodes_.size(); }
    const std::map<std::string, TaxonomyNode>& nodes() const { return nodes_; }

private:
    void validate() const;

    std::map<std::string, TaxonomyNode> nodes_;
};

/// Chapter identifier used for routing (level-1 node code of the diagnosis
/// hierarchy, e.g. "IX").
using ChapterId = std::string;

/// Chapter of a diagnosis code: dots are stripped, then the code (or its
/// longest known prefix of length >= 3) is walked up to its level-1 ancestor.
/// Throws UnknownCode when nothing matches; routing treats that as a zero
/// contribution rather than a failure.
ChapterId icd_chapter(const IcdCode& code, const Taxonomy& taxonomy);

/// Ordered set of code strings with a dense index bijection. Index equals
/// position in the source order.
class Vocab {
public:
    Vocab() = default;
    static Vocab from_codes(std::vector<std::string> codes);

    bool contains(const std::string& code) const;
    /// Throws UnknownMedication when absent.
    int index_of(const std::string& code) const;
    std::optional<int> try_index_of(const std::string& code) const;
    const std::string& at(int index) const;

    std::size_t size() const { return codes_.size(); }
    bool empty() const { return codes_.empty(); }
    const std::vector<std::string>& codes() const { return codes_; }

    auto begin() const { return codes_.begin(); }
    auto end() const { return codes_.end(); }

private:
    std::vector<std::string> codes_;
    std::map<std::string, int> index_;
};

/// Closed ATC-L4 medication vocabulary. Every member is a valid level-4
/// code; duplicates in the source are rejected.
class MedVocab : public Vocab {
public:
    MedVocab() = default;
    static MedVocab from_codes(const std::vector<std::string>& codes);
    /// One code per line; blank lines and '#' comments ignored.
    static MedVocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

private:
    explicit MedVocab(Vocab base) : Vocab(std::move(base)) {}
};

}  // namespace saferx

#endif
