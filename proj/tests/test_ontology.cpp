// Drug-class and diagnosis code grammars, hierarchies, and vocabularies.
#include <doctest.h>

#include <random>

#include "saferx/ontology.hpp"
#include "testutil.hpp"

using namespace saferx;

namespace {

/// Independent generator for one valid code of each level, straight from the
/// grammar definition rather than from the parser under test.
std::string random_valid_atc(std::mt19937_64& rng, AtcLevel level) {
    auto letter = [&] { return static_cast<char>('A' + rng() % 26); };
    auto digit = [&] { return static_cast<char>('0' + rng() % 10); };
    std::string s;
    s += letter();
    if (level == AtcLevel::Level1) return s;
    s += digit();
    s += digit();
    if (level == AtcLevel::Level2) return s;
    s += letter();
    if (level == AtcLevel::Level3) return s;
    s += letter();
    if (level == AtcLevel::Level4) return s;
    s += digit();
    s += digit();
    return s;
}

}  // namespace

TEST_CASE("atc grammar accepts each level by length") {
    CHECK(parse_atc("C").level == AtcLevel::Level1);
    CHECK(parse_atc("C07").level == AtcLevel::Level2);
    CHECK(parse_atc("C07A").level == AtcLevel::Level3);
    CHECK(parse_atc("C07AB").level == AtcLevel::Level4);
    CHECK(parse_atc("C07AB02").level == AtcLevel::Level5);
}

TEST_CASE("atc parsing normalizes case and whitespace") {
    CHECK(parse_atc(" c07ab ").text == "C07AB");
    CHECK(parse_atc("\tn02ax\n").text == "N02AX");
}

TEST_CASE("atc grammar rejects malformed codes") {
    // Wrong length.
    CHECK_THROWS_AS(parse_atc(""), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C0"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C07AB0"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C07AB021"), MalformedCode);
    // Wrong character class per position.
    CHECK_THROWS_AS(parse_atc("7"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("CA7"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C070"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C07A2"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C07ABAB"), MalformedCode);
    CHECK_THROWS_AS(parse_atc("C 7AB"), MalformedCode);
}

TEST_CASE("atc grammar property: generated codes parse, mutations fail") {
    std::mt19937_64 rng(20260819);
    const AtcLevel levels[] = {AtcLevel::Level1, AtcLevel::Level2, AtcLevel::Level3,
                               AtcLevel::Level4, AtcLevel::Level5};
    for (int trial = 0; trial < 400; ++trial) {
        AtcLevel level = levels[rng() % 5];
        std::string code = random_valid_atc(rng, level);
        AtcCode parsed = parse_atc(code);
        CHECK(parsed.level == level);
        CHECK(parsed.text == code);
        CHECK(is_atc_level(code, level));

        // Flip one position into the wrong character class.
        std::string bad = code;
        std::size_t pos = rng() % bad.size();
        bad[pos] = std::isdigit(static_cast<unsigned char>(bad[pos])) ? 'X' : '5';
        CHECK_THROWS_AS(parse_atc(bad), MalformedCode);
    }
}

TEST_CASE("class and subgroup ancestors truncate by length") {
    CHECK(to_l4(parse_atc("C07AB02")).text == "C07AB");
    CHECK(to_l4(parse_atc("C07AB")).text == "C07AB");
    CHECK(to_l3(parse_atc("C07AB02")).text == "C07A");
    CHECK(to_l3(parse_atc("C07AB")).text == "C07A");
    CHECK(to_l3(parse_atc("C07A")).text == "C07A");
    CHECK_THROWS_AS(to_l4(parse_atc("C07A")), LevelTooShallow);
    CHECK_THROWS_AS(to_l4(parse_atc("C07")), LevelTooShallow);
    CHECK_THROWS_AS(to_l3(parse_atc("C07")), LevelTooShallow);
}

TEST_CASE("icd version tags parse and round trip") {
    CHECK(parse_icd_version("icd9cm") == IcdVersion::Icd9Cm);
    CHECK(parse_icd_version("ICD9") == IcdVersion::Icd9Cm);
    CHECK(parse_icd_version("9") == IcdVersion::Icd9Cm);
    CHECK(parse_icd_version("icd10cm") == IcdVersion::Icd10Cm);
    CHECK(parse_icd_version("10") == IcdVersion::Icd10Cm);
    CHECK(icd_version_name(IcdVersion::Icd9Cm) == "icd9cm");
    CHECK(icd_version_name(IcdVersion::Icd10Cm) == "icd10cm");
    CHECK_THROWS_AS(parse_icd_version("icd11"), SchemaError);
}

TEST_CASE("strip_dots removes dots and uppercases") {
    CHECK(strip_dots("i50.23") == "I5023");
    CHECK(strip_dots("410.71") == "41071");
    CHECK(strip_dots("E11") == "E11");
}

TEST_CASE("pre-decimal category keys") {
    // Text up to the dot wins whenever a dot is present.
    CHECK(pre_decimal(testutil::icd10("I50.23")) == "I50");
    CHECK(pre_decimal(testutil::icd9("410.71")) == "410");
    CHECK(pre_decimal(testutil::icd9("E934.2")) == "E934");
    // Dotless: three characters, except four for the 9th-revision E codes.
    CHECK(pre_decimal(testutil::icd10("I5023")) == "I50");
    CHECK(pre_decimal(testutil::icd10("I10")) == "I10");
    CHECK(pre_decimal(testutil::icd9("25000")) == "250");
    CHECK(pre_decimal(testutil::icd9("E9342")) == "E934");
    CHECK(pre_decimal(testutil::icd9("V453")) == "V45");
    // E-led 10th-revision codes are ordinary three-character categories.
    CHECK(pre_decimal(testutil::icd10("E119")) == "E11");
}

TEST_CASE("taxonomy validation") {
    using Nodes = std::map<std::string, TaxonomyNode>;
    // Root must sit at level 1.
    CHECK_THROWS_AS(Taxonomy::from_nodes(Nodes{{"X", {"", 2, "x"}}}), SchemaError);
    // Parent must exist.
    CHECK_THROWS_AS(Taxonomy::from_nodes(Nodes{{"X", {"MISSING", 2, "x"}}}), SchemaError);
    // Parent must be exactly one level up.
    CHECK_THROWS_AS(Taxonomy::from_nodes(Nodes{{"A", {"", 1, "a"}}, {"A01X", {"A", 3, "x"}}}),
                    SchemaError);
    Taxonomy ok = Taxonomy::from_nodes(
        Nodes{{"A", {"", 1, "a"}}, {"A01", {"A", 2, "a01"}}, {"A01B", {"A01", 3, "a01b"}}});
    CHECK(ok.size() == 3);
    CHECK(ok.level1_ancestor("A01B") == "A");
    CHECK(ok.level1_ancestor("A") == "A");
    CHECK_THROWS_AS(ok.level1_ancestor("ZZZ"), UnknownCode);
}

TEST_CASE("demo diagnosis hierarchy resolves chapters with prefix fallback") {
    Taxonomy tax = Taxonomy::load(testutil::asset("taxonomy/icd10_demo.tsv"));
    // Exact full-code node.
    CHECK(icd_chapter(testutil::icd10("I50.23"), tax) == "IX");
    // Falls back from missing full code to its three-character category.
    CHECK(icd_chapter(testutil::icd10("I50.99"), tax) == "IX");
    CHECK(icd_chapter(testutil::icd10("E11.65"), tax) == "IV");
    // Category-only code.
    CHECK(icd_chapter(testutil::icd10("I10"), tax) == "IX");
    // 9th-revision numeric categories live in the same hierarchy.
    CHECK(icd_chapter(testutil::icd9("410.71"), tax) == "IX");
    CHECK(icd_chapter(testutil::icd9("25000"), tax) == "IV");
    // Nothing resolvable.
    CHECK_THROWS_AS(icd_chapter(testutil::icd10("Q99.9"), tax), UnknownCode);
}

TEST_CASE("demo drug hierarchy is well formed and typed by level") {
    Taxonomy tax = Taxonomy::load(testutil::asset("taxonomy/atc_demo.tsv"));
    auto counts = tax.level_counts();
    CHECK(counts.at(1) >= 10);
    CHECK(counts.at(4) >= 35);
    // Every level-4 node's code parses as a class-level drug code.
    for (const auto& [code, node] : tax.nodes()) {
        if (node.level == 4) CHECK(parse_atc(code).level == AtcLevel::Level4);
    }
    CHECK(tax.description("C07AB") == "Beta blocking agents selective");
}

TEST_CASE("vocabulary rejects duplicates and resolves indices") {
    CHECK_THROWS_AS(Vocab::from_codes({"C07AB", "C07AB"}), SchemaError);
    Vocab v = Vocab::from_codes({"C07AB", "A02BC", "B01AA"});
    CHECK(v.size() == 3);
    CHECK(v.contains("A02BC"));
    CHECK_FALSE(v.contains("Z99ZZ"));
    CHECK(v.at(v.index_of("B01AA")) == "B01AA");
    CHECK_FALSE(v.try_index_of("Z99ZZ").has_value());
    REQUIRE(v.try_index_of("A02BC").has_value());
    CHECK(*v.try_index_of("A02BC") == v.index_of("A02BC"));
    CHECK_THROWS_AS(v.index_of("Z99ZZ"), UnknownMedication);
}

TEST_CASE("medication vocabulary enforces class-level codes") {
    CHECK_THROWS_AS(MedVocab::from_codes({"C07A"}), MalformedCode);
    CHECK_THROWS_AS(MedVocab::from_codes({"C07AB02"}), MalformedCode);
    CHECK_THROWS_AS(MedVocab::from_codes({"not a code"}), MalformedCode);
    MedVocab ok = MedVocab::from_codes({"C07AB", "A02BC"});
    CHECK(ok.size() == 2);
}

TEST_CASE("medication vocabulary file round trip") {
    testutil::TempDir tmp("vocab");
    MedVocab v = MedVocab::from_codes({"C07AB", "A02BC", "B01AA"});
    v.save(tmp.file("v.txt"));
    MedVocab back = MedVocab::load(tmp.file("v.txt"));
    CHECK(back.codes() == v.codes());

    write_text_file(tmp.file("empty.txt"), "\n\n");
    CHECK_THROWS_AS(MedVocab::load(tmp.file("empty.txt")), EmptyVocab);
}

TEST_CASE("demo vocabulary asset loads") {
    MedVocab v = MedVocab::load(testutil::asset("kb/vocab.txt"));
    CHECK(v.size() == 35);
    CHECK(v.contains("N02BE"));
}
