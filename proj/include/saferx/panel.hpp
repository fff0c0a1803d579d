#ifndef SAFERX_PANEL_HPP
#define SAFERX_PANEL_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "saferx/ehr.hpp"
#include "saferx/ontology.hpp"

namespace saferx {

/// One expert skill: a chapter scope for routing plus its prompt assets.
/// Exactly one expert per panel is always-on (empty scope, score 1).
struct Expert {
    std::string id;
    std::string name;
    std::set<ChapterId> chapterScope;
    std::vector<std::string> keywords;  // optional additive routing signal
    std::string playbook;
    std::string checklist;
    bool alwaysOn = false;
};

/// The expert panel plus the generalist used when routing is ablated.
class Panel {
public:
    /// Loads a panel config (JSON) and the prompt assets it references,
    /// resolved relative to the config file's directory.
    static Panel load(const std::filesystem::path& configPath);
    static Panel from_experts(std::vector<Expert> experts, Expert generalist);

    const std::vector<Expert>& experts() const { return experts_; }
    const Expert& universal() const;
    const Expert& generalist() const { return generalist_; }
    const Expert* find(const std::string& id) const;
    /// Experts with a chapter scope, in panel order.
    std::vector<const Expert*> specialties() const;

private:
    void validate() const;

    std::vector<Expert> experts_;
    Expert generalist_;
};

struct RoutingConfig {
    double currentWeight = 2.0;
    double historyWeight = 1.0;
    double threshold = 0.1;
    bool keywordScoring = false;
    double keywordWeight = 0.5;
};

/// Per-case routing outcome: a score per expert and the activated subset.
struct RoutingResult {
    std::map<std::string, double> scores;
    std::set<std::string> activated;
};

/// Scores each specialty as the weighted fraction of the case's diagnosis
/// mass falling in its chapter scope (current visit weighted above history).
/// Codes without a known chapter contribute nothing. The always-on expert
/// scores 1 and is activated unconditionally; specialties activate at
/// score >= threshold.
RoutingResult route(const PatientRecord& record, const Panel& panel,
                    const Taxonomy& diagnosisTaxonomy, const RoutingConfig& config);

/// L1-normalized diagnosis-chapter histogram over the panel's specialty
/// scopes, in panel order. Zero vector when no code lands in any scope.
std::vector<double> featurize(const PatientRecord& record, const Panel& panel,
                              const Taxonomy& diagnosisTaxonomy);

/// Panel-size selection audit: silhouette per candidate K and the chosen K.
struct PanelDerivation {
    int kMin = 0;
    int kMax = 0;
    std::map<int, double> silhouettes;
    int chosenK = 0;
    std::vector<std::vector<double>> clusterDomainLoadings;  // centroids
    std::vector<int> assignments;
};

/// Clusters patient chapter histograms with k-means (k-means++ seeding,
/// fixed seed) for each K in [kMin, kMax] and picks the K with the highest
/// mean silhouette. Throws TooFewPatients when there are fewer than kMax + 1
/// vectors and DegenerateClustering when all vectors coincide.
PanelDerivation derive_panel(const std::vector<std::vector<double>>& vectors,
                             int kMin = 2, int kMax = 10, std::uint64_t seed = 42);

}  // namespace saferx

#endif
