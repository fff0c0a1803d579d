#include "saferx/panel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <json.hpp>

namespace saferx {

using nlohmann::json;

namespace {

Expert expert_from_json(const json& j, const std::filesystem::path& baseDir) {
    Expert e;
    e.id = j.at("id").get<std::string>();
    e.name = j.at("name").get<std::string>();
    if (j.contains("chapters")) {
        for (const auto& c : j.at("chapters")) e.chapterScope.insert(c.get<std::string>());
    }
    if (j.contains("keywords")) {
        for (const auto& k : j.at("keywords")) e.keywords.push_back(k.get<std::string>());
    }
    e.alwaysOn = j.value("alwaysOn", false);
    if (j.contains("playbook")) {
        e.playbook = trim(read_text_file(baseDir / j.at("playbook").get<std::string>()));
    }
    if (j.contains("checklist")) {
        e.checklist = trim(read_text_file(baseDir / j.at("checklist").get<std::string>()));
    }
    return e;
}

}  // namespace

Panel Panel::load(const std::filesystem::path& configPath) {
    json j = json::parse(read_text_file(configPath));
    std::filesystem::path baseDir = configPath.parent_path();
    std::vector<Expert> experts;
    for (const auto& ej : j.at("experts")) {
        experts.push_back(expert_from_json(ej, baseDir));
    }
    Expert generalist;
    if (j.contains("generalist")) {
        generalist = expert_from_json(j.at("generalist"), baseDir);
    }
    return from_experts(std::move(experts), std::move(generalist));
}

Panel Panel::from_experts(std::vector<Expert> experts, Expert generalist) {
    Panel p;
    p.experts_ = std::move(experts);
    p.generalist_ = std::move(generalist);
    p.validate();
    return p;
}

void Panel::validate() const {
    std::set<std::string> ids;
    std::size_t alwaysOnCount = 0;
    for (const auto& e : experts_) {
        if (e.id.empty()) throw ConfigError("panel expert with empty id");
        if (!ids.insert(e.id).second) throw ConfigError("duplicate expert id: " + e.id);
        if (e.alwaysOn) {
            ++alwaysOnCount;
            if (!e.chapterScope.empty()) {
                throw ConfigError("always-on expert " + e.id + " must have an empty chapter scope");
            }
        } else if (e.chapterScope.empty()) {
            throw ConfigError("specialty expert " + e.id + " needs a chapter scope");
        }
    }
    if (alwaysOnCount != 1) {
        throw ConfigError("panel needs exactly one always-on expert, found " +
                          std::to_string(alwaysOnCount));
    }
}

const Expert& Panel::universal() const {
    for (const auto& e : experts_) {
        if (e.alwaysOn) return e;
    }
    throw ConfigError("panel has no always-on expert");
}

const Expert* Panel::find(const std::string& id) const {
    for (const auto& e : experts_) {
        if (e.id == id) return &e;
    }
    if (generalist_.id == id && !id.empty()) return &generalist_;
    return nullptr;
}

std::vector<const Expert*> Panel::specialties() const {
    std::vector<const Expert*> out;
    for (const auto& e : experts_) {
        if (!e.alwaysOn) out.push_back(&e);
    }
    return out;
}

namespace {

/// Weighted diagnosis-chapter masses for a record: current-visit codes carry
/// currentWeight, historical codes historyWeight. Codes with no resolvable
/// chapter are excluded from both numerator and denominator.
struct ChapterMass {
    std::map<ChapterId, double> byChapter;
    double total = 0.0;
};

ChapterMass chapter_mass(const PatientRecord& record, const Taxonomy& taxonomy,
                         double currentWeight, double historyWeight) {
    ChapterMass mass;
    auto add = [&](const IcdCode& code, double weight) {
        try {
            ChapterId chapter = icd_chapter(code, taxonomy);
            mass.byChapter[chapter] += weight;
            mass.total += weight;
        } catch (const UnknownCode&) {
            // Unmappable codes degrade to zero contribution.
        }
    };
    for (const auto& code : record.target.diagnoses) add(code, currentWeight);
    for (const auto& visit : record.history) {
        for (const auto& code : visit.diagnoses) add(code, historyWeight);
    }
    return mass;
}

double keyword_fraction(const PatientRecord& record, const Expert& expert,
                        const Taxonomy& taxonomy) {
    if (expert.keywords.empty()) return 0.0;
    std::size_t total = 0;
    std::size_t matched = 0;
    auto scan = [&](const IcdCode& code) {
        ++total;
        std::string desc = to_lower(taxonomy.description(strip_dots(code.text)));
        if (desc.empty()) return;
        for (const auto& kw : expert.keywords) {
            if (desc.find(to_lower(kw)) != std::string::npos) {
                ++matched;
                return;
            }
        }
    };
    for (const auto& code : record.target.diagnoses) scan(code);
    for (const auto& visit : record.history) {
        for (const auto& code : visit.diagnoses) scan(code);
    }
    return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total);
}

}  // namespace

RoutingResult route(const PatientRecord& record, const Panel& panel,
                    const Taxonomy& diagnosisTaxonomy, const RoutingConfig& config) {
    ChapterMass mass = chapter_mass(record, diagnosisTaxonomy, config.currentWeight,
                                    config.historyWeight);
    RoutingResult result;
    for (const auto& expert : panel.experts()) {
        if (expert.alwaysOn) {
            result.scores[expert.id] = 1.0;
            result.activated.insert(expert.id);
            continue;
        }
        double score = 0.0;
        if (mass.total > 0.0) {
            double inScope = 0.0;
            for (const auto& chapter : expert.chapterScope) {
                auto it = mass.byChapter.find(chapter);
                if (it != mass.byChapter.end()) inScope += it->second;
            }
            score = inScope / mass.total;
        }
        if (config.keywordScoring) {
            score = std::min(
                1.0, score + config.keywordWeight *
                                 keyword_fraction(record, expert, diagnosisTaxonomy));
        }
        result.scores[expert.id] = score;
        if (score >= config.threshold) result.activated.insert(expert.id);
    }
    return result;
}

std::vector<double> featurize(const PatientRecord& record, const Panel& panel,
                              const Taxonomy& diagnosisTaxonomy) {
    auto specialties = panel.specialties();
    std::vector<double> features(specialties.size(), 0.0);
    ChapterMass mass = chapter_mass(record, diagnosisTaxonomy, 1.0, 1.0);
    double covered = 0.0;
    for (std::size_t i = 0; i < specialties.size(); ++i) {
        for (const auto& chapter : specialties[i]->chapterScope) {
            auto it = mass.byChapter.find(chapter);
            if (it != mass.byChapter.end()) features[i] += it->second;
        }
        covered += features[i];
    }
    if (covered > 0.0) {
        for (double& f : features) f /= covered;
    }
    return features;
}

namespace {

double sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

struct KmeansRun {
    std::vector<std::vector<double>> centroids;
    std::vector<int> assignments;
    double inertia = 0.0;
};

KmeansRun kmeans_once(const std::vector<std::vector<double>>& points, int k,
                      std::mt19937_64& rng) {
    const std::size_t n = points.size();
    const std::size_t dim = points[0].size();

    // k-means++ seeding.
    std::vector<std::vector<double>> centroids;
    std::uniform_int_distribution<std::size_t> firstPick(0, n - 1);
    centroids.push_back(points[firstPick(rng)]);
    std::vector<double> minDist(n, 0.0);
    while (centroids.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : centroids) best = std::min(best, sq_distance(points[i], c));
            minDist[i] = best;
            total += best;
        }
        std::size_t chosen = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> pick(0.0, total);
            double r = pick(rng);
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += minDist[i];
                if (acc >= r) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = firstPick(rng);
        }
        centroids.push_back(points[chosen]);
    }

    std::vector<int> assignments(n, 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double bestDist = std::numeric_limits<double>::max();
            for (int c = 0; c < k; ++c) {
                double d = sq_distance(points[i], centroids[static_cast<std::size_t>(c)]);
                if (d < bestDist) {
                    bestDist = d;
                    best = c;
                }
            }
            if (assignments[i] != best) {
                assignments[i] = best;
                changed = true;
            }
        }
        std::vector<std::vector<double>> next(static_cast<std::size_t>(k),
                                              std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto c = static_cast<std::size_t>(assignments[i]);
            ++counts[c];
            for (std::size_t d = 0; d < dim; ++d) next[c][d] += points[i][d];
        }
        for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
            if (counts[c] == 0) {
                next[c] = centroids[c];  // empty cluster keeps its centroid
                continue;
            }
            for (std::size_t d = 0; d < dim; ++d) next[c][d] /= static_cast<double>(counts[c]);
        }
        centroids = std::move(next);
        if (!changed && iter > 0) break;
    }

    KmeansRun run;
    run.centroids = std::move(centroids);
    run.assignments = std::move(assignments);
    for (std::size_t i = 0; i < n; ++i) {
        run.inertia +=
            sq_distance(points[i], run.centroids[static_cast<std::size_t>(run.assignments[i])]);
    }
    return run;
}

/// Mean silhouette over all points; points in singleton clusters score 0.
double mean_silhouette(const std::vector<std::vector<double>>& points,
                       const std::vector<int>& assignments, int k) {
    const std::size_t n = points.size();
    std::vector<std::size_t> clusterSize(static_cast<std::size_t>(k), 0);
    for (int a : assignments) ++clusterSize[static_cast<std::size_t>(a)];

    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        int own = assignments[i];
        if (clusterSize[static_cast<std::size_t>(own)] <= 1) continue;  // s = 0
        std::vector<double> meanDist(static_cast<std::size_t>(k), 0.0);
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            auto c = static_cast<std::size_t>(assignments[j]);
            meanDist[c] += std::sqrt(sq_distance(points[i], points[j]));
            ++counts[c];
        }
        double a = meanDist[static_cast<std::size_t>(own)] /
                   static_cast<double>(clusterSize[static_cast<std::size_t>(own)] - 1);
        double b = std::numeric_limits<double>::max();
        for (int c = 0; c < k; ++c) {
            if (c == own || counts[static_cast<std::size_t>(c)] == 0) continue;
            b = std::min(b, meanDist[static_cast<std::size_t>(c)] /
                                static_cast<double>(counts[static_cast<std::size_t>(c)]));
        }
        if (b == std::numeric_limits<double>::max()) continue;
        double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

}  // namespace

PanelDerivation derive_panel(const std::vector<std::vector<double>>& vectors, int kMin,
                             int kMax, std::uint64_t seed) {
    if (kMin < 2 || kMax < kMin) throw ConfigError("invalid cluster-count range");
    if (vectors.size() < static_cast<std::size_t>(kMax) + 1) {
        throw TooFewPatients("need more than " + std::to_string(kMax) +
                             " patient vectors, got " + std::to_string(vectors.size()));
    }
    const std::size_t dim = vectors[0].size();
    for (const auto& v : vectors) {
        if (v.size() != dim) throw LengthMismatch("patient vectors differ in dimension");
    }

    bool allIdentical = true;
    for (std::size_t i = 1; i < vectors.size() && allIdentical; ++i) {
        if (sq_distance(vectors[i], vectors[0]) > 0.0) allIdentical = false;
    }
    if (allIdentical) {
        throw DegenerateClustering("all patient vectors coincide; cluster structure undefined");
    }

    PanelDerivation result;
    result.kMin = kMin;
    result.kMax = kMax;

    double bestSilhouette = -std::numeric_limits<double>::max();
    for (int k = kMin; k <= kMax; ++k) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(k));
        KmeansRun best;
        best.inertia = std::numeric_limits<double>::max();
        for (int restart = 0; restart < 10; ++restart) {
            KmeansRun run = kmeans_once(vectors, k, rng);
            if (run.inertia < best.inertia) best = std::move(run);
        }
        double sil = mean_silhouette(vectors, best.assignments, k);
        result.silhouettes[k] = sil;
        if (sil > bestSilhouette) {
            bestSilhouette = sil;
            result.chosenK = k;
            result.clusterDomainLoadings = best.centroids;
            result.assignments = best.assignments;
        }
    }
    return result;
}

}  // namespace saferx
