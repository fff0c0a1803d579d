// Model backends: deterministic mock lookups and synthesis, lenient JSON
// parsing, concurrency bounding, and the backend factory.
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <future>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "saferx/backend.hpp"
#include "saferx/common.hpp"
#include "testutil.hpp"

using namespace saferx;
using nlohmann::json;
using testutil::TempDir;

namespace {

/// Inner backend that records the maximum number of concurrent callers.
class ProbeBackend : public LlmBackend {
public:
    Completion complete(const std::string&, const std::string&, double, int,
                        const CallTag&) override {
        int now = ++inFlight_;
        int seen = maxSeen_.load();
        while (now > seen && !maxSeen_.compare_exchange_weak(seen, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
        --inFlight_;
        ++calls_;
        return Completion{"{}", 1, 1, 0.0};
    }
    std::string name() const override { return "probe"; }

    int max_seen() const { return maxSeen_.load(); }
    int calls() const { return calls_.load(); }

private:
    std::atomic<int> inFlight_{0};
    std::atomic<int> maxSeen_{0};
    std::atomic<int> calls_{0};
};

long approx_tokens(const std::string& s) {
    return static_cast<long>((s.size() + 3) / 4);
}

}  // namespace

TEST_CASE("mock completions are deterministic and size-accounted") {
    MockBackend mock;
    CallTag tag{stage::Summarize, "case1", "CVD"};
    const std::string system = "You review medication histories.";
    const std::string user = "Patient record text goes here.";

    Completion a = mock.complete(system, user, 0.0, 512, tag);
    Completion b = mock.complete(system, user, 0.0, 512, tag);
    CHECK(a.text == b.text);
    CHECK(a.inTokens == b.inTokens);
    CHECK(a.outTokens == b.outTokens);
    CHECK(a.latencySeconds == b.latencySeconds);

    // Token counts come from byte sizes, latency from token counts.
    CHECK(a.inTokens == approx_tokens(system) + approx_tokens(user));
    CHECK(a.outTokens == approx_tokens(a.text));
    CHECK(a.latencySeconds ==
          static_cast<double>(a.inTokens + a.outTokens) / 10000.0);

    // Temperature and token ceiling do not affect the deterministic output.
    Completion c = mock.complete(system, user, 0.9, 64, tag);
    CHECK(c.text == a.text);
}

TEST_CASE("fixture precedence is call key, then prompt digest, then synthesis") {
    MockBackend mock;
    CallTag keyed{stage::Generate, "caseA", "CVD"};
    const std::string system = "system prompt";
    const std::string user = "user prompt";

    mock.add_fixture(keyed, "{\"from\":\"key\"}");
    mock.add_hash_fixture(MockBackend::prompt_digest(system, user),
                          "{\"from\":\"hash\"}");

    // Exact call key wins over the digest for the same prompt.
    CHECK(mock.complete(system, user, 0.0, 0, keyed).text == "{\"from\":\"key\"}");

    // A different call with the same prompt falls through to the digest.
    CallTag other{stage::Generate, "caseB", "ENDO"};
    CHECK(mock.complete(system, user, 0.0, 0, other).text == "{\"from\":\"hash\"}");

    // No fixture at all synthesizes a JSON object.
    Completion synth = mock.complete("different", "prompt", 0.0, 0, other);
    auto parsed = parse_json_lenient(synth.text);
    REQUIRE(parsed.has_value());

    // Case-level calls key on an empty expert id.
    CallTag caseLevel{stage::Critique, "caseA", ""};
    CHECK(caseLevel.key() == "critique:caseA:");
    mock.add_fixture(caseLevel, "{\"from\":\"case\"}");
    CHECK(mock.complete(system, user, 0.0, 0, caseLevel).text == "{\"from\":\"case\"}");
}

TEST_CASE("prompt digests hash the separated system and user texts") {
    CHECK(MockBackend::prompt_digest("sys", "usr") == fnv1a64_hex("sys\x1fusr"));
    // The separator keeps the boundary unambiguous.
    CHECK(MockBackend::prompt_digest("ab", "c") != MockBackend::prompt_digest("a", "bc"));
    CHECK(MockBackend::prompt_digest("", "") == fnv1a64_hex(std::string("\x1f", 1)));
}

TEST_CASE("fixture files load call-key and digest entries") {
    TempDir tmp("fixtures");
    json file;
    file["responses"] = json::array(
        {json{{"stage", "generate"},
              {"caseId", "c1"},
              {"expertId", "CVD"},
              {"json", json{{"predicted_drugs", json::array()}}}},
         json{{"stage", "critique"}, {"caseId", "c1"}, {"text", "plain text body"}}});
    file["byHash"] = json{{MockBackend::prompt_digest("s", "u"), "digest body"}};
    write_text_file(tmp.file("fix.json"), file.dump());

    auto mock = MockBackend::from_fixture_file(tmp.file("fix.json"));
    CHECK(mock->complete("s", "u", 0.0, 0, CallTag{"generate", "c1", "CVD"}).text ==
          "{\"predicted_drugs\":[]}");
    CHECK(mock->complete("s", "u", 0.0, 0, CallTag{"critique", "c1", ""}).text ==
          "plain text body");
    CHECK(mock->complete("s", "u", 0.0, 0, CallTag{"verify", "c9", ""}).text ==
          "digest body");
}

TEST_CASE("synthesized summaries carry the output contract fields") {
    MockBackend mock;
    Completion c = mock.complete("sys", "Patient narrative.", 0.0, 0,
                                 CallTag{stage::Summarize, "c1", "CVD"});
    auto parsed = parse_json_lenient(c.text);
    REQUIRE(parsed.has_value());
    for (const char* field : {"expertise", "current_admission",
                              "medication_relevant_history", "expertise_focus",
                              "risks_to_watch"}) {
        REQUIRE(parsed->contains(field));
        CHECK(parsed->at(field).is_string());
    }
    REQUIRE(parsed->contains("visit_rationales"));
    CHECK(parsed->at("visit_rationales").is_array());
}

TEST_CASE("synthesized proposals draw only on codes present in the prompt") {
    MockBackend mock;
    const std::string user =
        "Indication table candidates:\n"
        "A02BA, B01AA, C07AB, C10AA, M01AE, N02BA, R03AC\n\n"
        "Respond with JSON.";
    Completion c =
        mock.complete("sys", user, 0.2, 0, CallTag{stage::Generate, "c1", "CVD"});
    auto parsed = parse_json_lenient(c.text);
    REQUIRE(parsed.has_value());
    REQUIRE(parsed->contains("predicted_drugs"));

    const std::set<std::string> offered{"A02BA", "B01AA", "C07AB", "C10AA",
                                        "M01AE", "N02BA", "R03AC"};
    for (const auto& d : parsed->at("predicted_drugs")) {
        REQUIRE(d.contains("code"));
        CHECK(offered.count(d.at("code").get<std::string>()) == 1);
        double conf = d.at("confidence").get<double>();
        CHECK(conf >= 0.3);
        CHECK(conf < 0.8);
        CHECK_FALSE(d.at("reason").get<std::string>().empty());
    }
    CHECK(parsed->at("predicted_drugs").size() <= 10);
}

TEST_CASE("synthesized critiques partition the proposed union") {
    MockBackend mock;
    const std::string user =
        "Panel summaries here.\n\n"
        "Union of proposed codes: A02BA, B01AA, C07AB, C10AA, M01AE\n\n"
        "Respond with JSON.";
    Completion c =
        mock.complete("sys", user, 0.0, 0, CallTag{stage::Critique, "c1", ""});
    auto parsed = parse_json_lenient(c.text);
    REQUIRE(parsed.has_value());

    std::set<std::string> seen;
    for (const auto& code : parsed->at("retained")) {
        CHECK(seen.insert(code.get<std::string>()).second);
    }
    for (const auto& r : parsed->at("removed")) {
        CHECK(seen.insert(r.at("code").get<std::string>()).second);
        CHECK_FALSE(r.at("reason").get<std::string>().empty());
    }
    CHECK(seen == std::set<std::string>{"A02BA", "B01AA", "C07AB", "C10AA", "M01AE"});
}

TEST_CASE("synthesized verdicts only remove flagged candidates") {
    MockBackend mock;
    const std::string user =
        "Predicted drugs: A02BA, B01AA, C07AB, M01AE\n\n"
        "Prior medications: none\n\n"
        "Drug interaction pairs detected: B01AA with M01AE\n\n"
        "Contraindication pairs detected: none\n\n"
        "Respond with JSON.";
    Completion c = mock.complete("sys", user, 0.0, 0, CallTag{stage::Verify, "c1", ""});
    auto parsed = parse_json_lenient(c.text);
    REQUIRE(parsed.has_value());

    std::set<std::string> seen;
    for (const auto& code : parsed->at("kept_drugs")) {
        CHECK(seen.insert(code.get<std::string>()).second);
    }
    for (const auto& r : parsed->at("removed_drugs")) {
        std::string code = r.at("code").get<std::string>();
        CHECK(seen.insert(code).second);
        // Unflagged candidates are never removed.
        CHECK((code == "B01AA" || code == "M01AE"));
    }
    CHECK(seen == std::set<std::string>{"A02BA", "B01AA", "C07AB", "M01AE"});
}

TEST_CASE("lenient JSON parsing applies at most one repair pass") {
    // Clean object: untouched.
    auto direct = parse_json_lenient(R"({"a": 1})");
    REQUIRE(direct.has_value());
    CHECK(direct->at("a") == 1);

    // Fenced block.
    auto fenced = parse_json_lenient("```json\n{\"a\": [1, 2]}\n```");
    REQUIRE(fenced.has_value());
    CHECK(fenced->at("a").size() == 2);

    // Trailing commas inside objects and arrays.
    auto trailing = parse_json_lenient(R"({"a": [1, 2,], "b": {"c": 3,},})");
    REQUIRE(trailing.has_value());
    CHECK(trailing->at("b").at("c") == 3);

    // Surrounding prose.
    auto prose = parse_json_lenient(
        "Here is the answer you asked for:\n{\"code\": \"A02BA\"}\nHope that helps!");
    REQUIRE(prose.has_value());
    CHECK(prose->at("code") == "A02BA");

    // Braces inside strings do not confuse the extractor.
    auto braces = parse_json_lenient(R"(noise {"text": "a } b { c", "n": 1} more)");
    REQUIRE(braces.has_value());
    CHECK(braces->at("n") == 1);

    // Unrepairable or non-object content is rejected.
    CHECK_FALSE(parse_json_lenient("no json here at all").has_value());
    CHECK_FALSE(parse_json_lenient("[1, 2, 3]").has_value());
    CHECK_FALSE(parse_json_lenient("{\"a\": unquoted}").has_value());
    CHECK_FALSE(parse_json_lenient("").has_value());
}

TEST_CASE("the bounded decorator limits in-flight calls") {
    auto probe = std::make_shared<ProbeBackend>();
    BoundedBackend bounded(probe, 2);
    CHECK(bounded.name() == "probe");

    std::vector<std::future<void>> tasks;
    for (int i = 0; i < 8; ++i) {
        tasks.push_back(std::async(std::launch::async, [&bounded, i] {
            bounded.complete("s", "u" + std::to_string(i), 0.0, 0, CallTag{});
        }));
    }
    for (auto& t : tasks) t.get();

    CHECK(probe->calls() == 8);
    CHECK(probe->max_seen() <= 2);
    CHECK(probe->max_seen() >= 1);

    CHECK_THROWS_AS(BoundedBackend(probe, 0), ConfigError);
}

TEST_CASE("the backend factory builds the configured type") {
    auto mock = make_backend(json{{"type", "mock"}});
    CHECK(mock->name() == "mock");

    // Relative fixture paths resolve against the supplied base directory.
    TempDir tmp("factory");
    json file;
    file["responses"] = json::array({json{
        {"stage", "generate"}, {"caseId", "c"}, {"expertId", "E"}, {"text", "hi"}}});
    write_text_file(tmp.file("fix.json"), file.dump());
    auto fromFile =
        make_backend(json{{"type", "mock"}, {"fixtures", "fix.json"}}, tmp.path());
    CHECK(fromFile->complete("s", "u", 0.0, 0, CallTag{"generate", "c", "E"}).text ==
          "hi");

    auto http = make_backend(
        json{{"type", "http"}, {"baseUrl", "http://localhost:9"}, {"model", "m1"}});
    CHECK(http->name() == "http:m1");

    CHECK_THROWS_AS(make_backend(json{{"type", "http"}, {"model", "m1"}}), ConfigError);
    CHECK_THROWS_AS(make_backend(json{{"type", "carrier-pigeon"}}), ConfigError);
}
