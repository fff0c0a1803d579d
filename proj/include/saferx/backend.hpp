#ifndef SAFERX_BACKEND_HPP
#define SAFERX_BACKEND_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "saferx/common.hpp"

namespace saferx {

/// Pipeline stages that issue (or deliberately skip) model calls.
namespace stage {
inline constexpr const char* Route = "route";
inline constexpr const char* Summarize = "summarize";
inline constexpr const char* Generate = "generate";
inline constexpr const char* Critique = "critique";
inline constexpr const char* FindFlags = "findflags";
inline constexpr const char* Verify = "verify";
}  // namespace stage

struct Completion {
    std::string text;
    long inTokens = 0;
    long outTokens = 0;
    double latencySeconds = 0.0;
};

/// Call provenance for fixture lookup and accounting. expertId is empty for
/// case-level calls (critique, verify).
struct CallTag {
    std::string stage;
    std::string caseId;
    std::string expertId;

    std::string key() const { return stage + ":" + caseId + ":" + expertId; }
};

/// Text-completion boundary. Implementations must be safe to call from
/// multiple threads.
class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual Completion complete(const std::string& system, const std::string& user,
                                double temperature, int maxTokens,
                                const CallTag& tag = {}) = 0;
    virtual std::string name() const = 0;
};

/// Deterministic offline backend. Responses come, in order of precedence,
/// from fixtures keyed by (stage, caseId, expertId), fixtures keyed by the
/// prompt digest, or a stage-aware synthesized response derived only from
/// the prompt digest. Token counts and latency are derived from sizes, so
/// repeated runs are byte-identical.
class MockBackend : public LlmBackend {
public:
    MockBackend() = default;
    static std::unique_ptr<MockBackend> from_fixture_file(const std::filesystem::path& path);

    void add_fixture(const CallTag& tag, std::string responseText);
    void add_hash_fixture(const std::string& promptDigestHex, std::string responseText);

    Completion complete(const std::string& system, const std::string& user,
                        double temperature, int maxTokens, const CallTag& tag) override;
    std::string name() const override { return "mock"; }

    /// Digest used for byHash fixture lookup.
    static std::string prompt_digest(const std::string& system, const std::string& user);

private:
    std::string synthesize(const std::string& system, const std::string& user,
                           const CallTag& tag) const;

    std::map<std::string, std::string> byKey_;
    std::map<std::string, std::string> byHash_;
};

/// Chat-completions HTTP backend (request/response shapes follow the widely
/// used /v1/chat/completions contract).
struct HttpBackendConfig {
    std::string baseUrl;                   // e.g. "http://localhost:8000"
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string apiKeyEnv = "SAFERX_API_KEY";
    int timeoutSeconds = 120;
    int maxRetries = 2;
};

class HttpBackend : public LlmBackend {
public:
    explicit HttpBackend(HttpBackendConfig config);
    Completion complete(const std::string& system, const std::string& user,
                        double temperature, int maxTokens, const CallTag& tag) override;
    std::string name() const override { return "http:" + config_.model; }

private:
    HttpBackendConfig config_;
};

/// Decorator that bounds concurrent in-flight calls to the wrapped backend.
class BoundedBackend : public LlmBackend {
public:
    BoundedBackend(std::shared_ptr<LlmBackend> inner, int maxInFlight);
    Completion complete(const std::string& system, const std::string& user,
                        double temperature, int maxTokens, const CallTag& tag) override;
    std::string name() const override { return inner_->name(); }

private:
    std::shared_ptr<LlmBackend> inner_;
    class Gate;
    std::shared_ptr<Gate> gate_;
};

/// Builds a backend from a config object:
///   {"type": "mock", "fixtures": "<path, optional>"}
///   {"type": "http", "baseUrl": ..., "model": ..., ...}
/// Relative fixture paths resolve against baseDir.
std::shared_ptr<LlmBackend> make_backend(const nlohmann::json& config,
                                         const std::filesystem::path& baseDir = {});

/// Parses model output that should be a JSON object. Applies at most one
/// repair pass (strip code fences, drop trailing commas, extract the first
/// balanced object). Returns nullopt when still unparsable.
std::optional<nlohmann::json> parse_json_lenient(const std::string& text);

}  // namespace saferx

#endif
