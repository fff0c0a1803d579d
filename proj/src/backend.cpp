#include "saferx/backend.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <thread>
#include <vector>

#include <httplib.h>

namespace saferx {

using nlohmann::json;

namespace {

long approx_tokens(const std::string& s) {
    return static_cast<long>((s.size() + 3) / 4);
}

bool is_code_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

/// Collects 5-character class-code tokens (letter, digit, digit, letter,
/// letter) with non-alphanumeric boundaries, preserving first-seen order.
std::vector<std::string> extract_class_codes(const std::string& text) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i + 5 <= text.size(); ++i) {
        if (i > 0 && is_code_char(text[i - 1])) continue;
        if (i + 5 < text.size() && is_code_char(text[i + 5])) continue;
        const char* p = text.data() + i;
        bool shape = (p[0] >= 'A' && p[0] <= 'Z') && (p[1] >= '0' && p[1] <= '9') &&
                     (p[2] >= '0' && p[2] <= '9') && (p[3] >= 'A' && p[3] <= 'Z') &&
                     (p[4] >= 'A' && p[4] <= 'Z');
        if (!shape) continue;
        std::string code = text.substr(i, 5);
        bool seen = false;
        for (const auto& c : out) {
            if (c == code) {
                seen = true;
                break;
            }
        }
        if (!seen) out.push_back(code);
    }
    return out;
}

std::string section_after(const std::string& text, const std::string& header) {
    std::size_t pos = text.find(header);
    if (pos == std::string::npos) return {};
    std::size_t start = pos + header.size();
    std::size_t end = text.find("\n\n", start);
    return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

std::string strip_code_fences(const std::string& text) {
    std::size_t open = text.find("```");
    if (open == std::string::npos) return text;
    std::size_t bodyStart = text.find('\n', open);
    if (bodyStart == std::string::npos) return text;
    ++bodyStart;
    std::size_t close = text.find("```", bodyStart);
    if (close == std::string::npos) return text.substr(bodyStart);
    return text.substr(bodyStart, close - bodyStart);
}

std::string extract_first_object(const std::string& text) {
    std::size_t start = text.find('{');
    if (start == std::string::npos) return text;
    int depth = 0;
    bool inString = false;
    bool escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
        char c = text[i];
        if (inString) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                inString = false;
            }
            continue;
        }
        if (c == '"') {
            inString = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            --depth;
            if (depth == 0) return text.substr(start, i - start + 1);
        }
    }
    return text.substr(start);
}

std::string strip_trailing_commas(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool inString = false;
    bool escaped = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (inString) {
            out += c;
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                inString = false;
            }
            continue;
        }
        if (c == '"') {
            inString = true;
            out += c;
            continue;
        }
        if (c == ',') {
            std::size_t j = i + 1;
            while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j < text.size() && (text[j] == '}' || text[j] == ']')) continue;
        }
        out += c;
    }
    return out;
}

}  // namespace

std::optional<json> parse_json_lenient(const std::string& text) {
    json parsed = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;

    // Single repair pass; anything still broken is the caller's problem.
    std::string repaired =
        strip_trailing_commas(extract_first_object(strip_code_fences(text)));
    parsed = json::parse(repaired, nullptr, /*allow_exceptions=*/false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    return std::nullopt;
}

std::string MockBackend::prompt_digest(const std::string& system, const std::string& user) {
    return fnv1a64_hex(system + "\x1f" + user);
}

std::unique_ptr<MockBackend> MockBackend::from_fixture_file(
    const std::filesystem::path& path) {
    auto backend = std::make_unique<MockBackend>();
    json j = json::parse(read_text_file(path));
    if (j.contains("responses")) {
        for (const auto& r : j.at("responses")) {
            CallTag tag;
            tag.stage = r.value("stage", "");
            tag.caseId = r.value("caseId", "");
            tag.expertId = r.value("expertId", "");
            std::string text =
                r.contains("json") ? r.at("json").dump() : r.at("text").get<std::string>();
            backend->add_fixture(tag, std::move(text));
        }
    }
    if (j.contains("byHash")) {
        for (const auto& [digest, text] : j.at("byHash").items()) {
            backend->add_hash_fixture(digest, text.get<std::string>());
        }
    }
    return backend;
}

void MockBackend::add_fixture(const CallTag& tag, std::string responseText) {
    byKey_[tag.key()] = std::move(responseText);
}

void MockBackend::add_hash_fixture(const std::string& promptDigestHex,
                                   std::string responseText) {
    byHash_[promptDigestHex] = std::move(responseText);
}

Completion MockBackend::complete(const std::string& system, const std::string& user,
                                 double temperature, int maxTokens, const CallTag& tag) {
    (void)temperature;
    (void)maxTokens;
    std::string text;
    if (auto it = byKey_.find(tag.key()); it != byKey_.end()) {
        text = it->second;
    } else if (auto ih = byHash_.find(prompt_digest(system, user)); ih != byHash_.end()) {
        text = ih->second;
    } else {
        text = synthesize(system, user, tag);
    }
    Completion c;
    c.text = std::move(text);
    c.inTokens = approx_tokens(system) + approx_tokens(user);
    c.outTokens = approx_tokens(c.text);
    c.latencySeconds = static_cast<double>(c.inTokens + c.outTokens) / 10000.0;
    return c;
}

std::string MockBackend::synthesize(const std::string& system, const std::string& user,
                                    const CallTag& tag) const {
    std::uint64_t seed = fnv1a64(system + "\x1f" + user);
    std::string hex8 = fnv1a64_hex(std::to_string(seed)).substr(0, 8);

    if (tag.stage == stage::Summarize) {
        json out;
        out["expertise"] = "synthesized reviewer " + hex8;
        out["current_admission"] = "admission findings digest " + hex8;
        out["medication_relevant_history"] = "prior medication evidence digest " + hex8;
        out["expertise_focus"] = "record facts in scope " + hex8;
        out["risks_to_watch"] = "monitored medication risks " + hex8;
        out["visit_rationales"] = json::array();
        return out.dump();
    }

    if (tag.stage == stage::Generate) {
        auto codes = extract_class_codes(user);
        json drugs = json::array();
        std::size_t kept = 0;
        for (const auto& code : codes) {
            std::uint64_t h = fnv1a64(code + hex8);
            if (h % 100 >= 55) continue;
            json d;
            d["code"] = code;
            d["confidence"] = 0.3 + static_cast<double>(h % 50) / 100.0;
            d["reason"] = "supported by documented record evidence";
            drugs.push_back(d);
            if (++kept == 10) break;
        }
        json out;
        out["predicted_drugs"] = std::move(drugs);
        out["assumptions"] = "synthesized from prompt evidence only";
        out["alternatives"] = json::array();
        return out.dump();
    }

    if (tag.stage == stage::Critique) {
        std::string unionSection = section_after(user, "Union of proposed codes:");
        auto codes = extract_class_codes(unionSection.empty() ? user : unionSection);
        json retained = json::array();
        json removed = json::array();
        for (const auto& code : codes) {
            std::uint64_t h = fnv1a64(hex8 + code);
            if (h % 5 == 0) {
                removed.push_back(json{{"code", code}, {"reason", "insufficient input support"}});
            } else {
                retained.push_back(code);
            }
        }
        json out;
        out["retained"] = std::move(retained);
        out["removed"] = std::move(removed);
        out["rationale"] = "kept codes with direct record support";
        out["missing_info"] = "";
        return out.dump();
    }

    if (tag.stage == stage::Verify) {
        std::string candidateSection = section_after(user, "Predicted drugs:");
        auto candidates = extract_class_codes(candidateSection);
        std::string flagSection = section_after(user, "Drug interaction pairs detected:");
        flagSection += section_after(user, "Contraindication pairs detected:");
        auto flagged = extract_class_codes(flagSection);
        json kept = json::array();
        json removed = json::array();
        for (const auto& code : candidates) {
            bool isFlagged = false;
            for (const auto& f : flagged) {
                if (f == code) {
                    isFlagged = true;
                    break;
                }
            }
            if (isFlagged && fnv1a64(hex8 + code) % 5 == 0) {
                removed.push_back(json{{"code", code},
                                       {"reason", "interaction risk outweighs support"},
                                       {"replacement", nullptr}});
            } else {
                kept.push_back(code);
            }
        }
        json out;
        out["kept_drugs"] = std::move(kept);
        out["removed_drugs"] = std::move(removed);
        return out.dump();
    }

    json out;
    out["response"] = "synthesized " + hex8;
    return out.dump();
}

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    if (config_.baseUrl.empty()) throw ConfigError("http backend needs a baseUrl");
    if (config_.model.empty()) throw ConfigError("http backend needs a model name");
}

Completion HttpBackend::complete(const std::string& system, const std::string& user,
                                 double temperature, int maxTokens, const CallTag& tag) {
    (void)tag;
    json body;
    body["model"] = config_.model;
    body["messages"] = json::array({json{{"role", "system"}, {"content", system}},
                                    json{{"role", "user"}, {"content", user}}});
    body["temperature"] = temperature;
    if (maxTokens > 0) body["max_tokens"] = maxTokens;
    std::string payload = body.dump();

    httplib::Headers headers;
    if (!config_.apiKeyEnv.empty()) {
        if (const char* key = std::getenv(config_.apiKeyEnv.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }

    std::string lastError;
    for (int attempt = 0; attempt <= config_.maxRetries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
        }
        httplib::Client client(config_.baseUrl);
        client.set_read_timeout(config_.timeoutSeconds, 0);
        client.set_write_timeout(config_.timeoutSeconds, 0);
        client.set_connection_timeout(config_.timeoutSeconds, 0);

        auto started = std::chrono::steady_clock::now();
        auto res = client.Post(config_.path, headers, payload, "application/json");
        auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started);

        if (!res) {
            lastError = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            lastError = "http status " + std::to_string(res->status);
            if (res->status >= 400 && res->status < 500 && res->status != 429) break;
            continue;
        }
        json parsed = json::parse(res->body, nullptr, /*allow_exceptions=*/false);
        if (parsed.is_discarded() || !parsed.contains("choices") ||
            parsed["choices"].empty()) {
            lastError = "malformed completion response";
            continue;
        }
        Completion c;
        c.text = parsed["choices"][0].value("message", json::object()).value("content", "");
        if (parsed.contains("usage")) {
            c.inTokens = parsed["usage"].value("prompt_tokens", 0);
            c.outTokens = parsed["usage"].value("completion_tokens", 0);
        } else {
            c.inTokens = approx_tokens(system) + approx_tokens(user);
            c.outTokens = approx_tokens(c.text);
        }
        c.latencySeconds = elapsed.count();
        return c;
    }
    throw BackendError("completion request failed (" + config_.baseUrl + "): " + lastError);
}

class BoundedBackend::Gate {
public:
    explicit Gate(int limit) : limit_(limit) {}

    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return inFlight_ < limit_; });
        ++inFlight_;
    }

    void release() {
        {
            std::lock_guard lock(mutex_);
            --inFlight_;
        }
        cv_.notify_one();
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    int limit_;
    int inFlight_ = 0;
};

BoundedBackend::BoundedBackend(std::shared_ptr<LlmBackend> inner, int maxInFlight)
    : inner_(std::move(inner)) {
    if (maxInFlight < 1) throw ConfigError("in-flight limit must be at least 1");
    gate_ = std::make_shared<Gate>(maxInFlight);
}

Completion BoundedBackend::complete(const std::string& system, const std::string& user,
                                    double temperature, int maxTokens, const CallTag& tag) {
    gate_->acquire();
    struct Release {
        Gate* gate;
        ~Release() { gate->release(); }
    } release{gate_.get()};
    return inner_->complete(system, user, temperature, maxTokens, tag);
}

std::shared_ptr<LlmBackend> make_backend(const json& config,
                                         const std::filesystem::path& baseDir) {
    std::string type = config.value("type", "mock");
    if (type == "mock") {
        if (config.contains("fixtures") && !config.at("fixtures").is_null()) {
            std::filesystem::path p = config.at("fixtures").get<std::string>();
            if (p.is_relative() && !baseDir.empty()) p = baseDir / p;
            return MockBackend::from_fixture_file(p);
        }
        return std::make_shared<MockBackend>();
    }
    if (type == "http") {
        HttpBackendConfig hc;
        hc.baseUrl = config.value("baseUrl", "");
        hc.path = config.value("path", hc.path);
        hc.model = config.value("model", "");
        hc.apiKeyEnv = config.value("apiKeyEnv", hc.apiKeyEnv);
        hc.timeoutSeconds = config.value("timeoutSeconds", hc.timeoutSeconds);
        hc.maxRetries = config.value("maxRetries", hc.maxRetries);
        return std::make_shared<HttpBackend>(std::move(hc));
    }
    throw ConfigError("unknown backend type: " + type);
}

}  // namespace saferx
