#pragma once

#include <cbev/geometry.hpp>
#include <cbev/ops.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cbev {

/// Planar location of a reference in meters.
struct Location {
    double x = 0.0;
    double y = 0.0;
};

inline double planar_distance(const Location& a, const Location& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Exhaustive cosine index over unit-norm reference embeddings.
class EmbeddingIndex {
public:
    EmbeddingIndex() = default;

    EmbeddingIndex(std::vector<std::string> ids, Tensor vectors, std::vector<Location> locations = {})
        : ids_(std::move(ids)), vectors_(vectors.detach()), locations_(std::move(locations)) {
        require_rank(vectors_, 2, "EmbeddingIndex vectors");
        if (vectors_.dim(0) != ids_.size()) throw DimensionError("EmbeddingIndex: ids and vectors disagree in count");
        if (!locations_.empty() && locations_.size() != ids_.size())
            throw DimensionError("EmbeddingIndex: locations and ids disagree in count");
        std::set<std::string> seen;
        for (const auto& id : ids_)
            if (!seen.insert(id).second) throw DomainError("EmbeddingIndex: duplicate id '" + id + "'");
        const std::size_t e = vectors_.dim(1);
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            double sq = 0.0;
            for (std::size_t k = 0; k < e; ++k) sq += static_cast<double>(vectors_[i * e + k]) * vectors_[i * e + k];
            if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
                throw DomainError("EmbeddingIndex: row '" + ids_[i] + "' is not unit norm");
        }
    }

    std::size_t size() const { return ids_.size(); }
    std::size_t dim() const { return vectors_.defined() ? vectors_.dim(1) : 0; }
    const std::vector<std::string>& ids() const { return ids_; }
    const Tensor& vectors() const { return vectors_; }
    const std::vector<Location>& locations() const { return locations_; }

    std::size_t position(const std::string& id) const {
        auto it = std::find(ids_.begin(), ids_.end(), id);
        if (it == ids_.end()) throw DomainError("EmbeddingIndex: unknown id '" + id + "'");
        return static_cast<std::size_t>(it - ids_.begin());
    }

    /// Cosine similarity of a unit query to every row.
    std::vector<double> similarities(const Tensor& query) const {
        if (query.numel() != dim()) throw DimensionError("EmbeddingIndex: query dimension mismatch");
        const std::size_t e = dim();
        std::vector<double> s(size());
        for (std::size_t i = 0; i < size(); ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < e; ++k) acc += static_cast<double>(query[k]) * vectors_[i * e + k];
            s[i] = acc;
        }
        return s;
    }

private:
    std::vector<std::string> ids_;
    Tensor vectors_;
    std::vector<Location> locations_;
};

struct Candidate {
    std::string reference_id;
    double similarity = 0.0;
    double prior_logit = 0.0;
    std::optional<double> bev_score;
    std::optional<double> combined;
};

struct CandidateSet {
    std::string query_id;
    std::vector<Candidate> entries;
};

/// k most similar references; prior_logit = similarity / temperature; ties by ascending id.
inline CandidateSet topk(const EmbeddingIndex& index, const Tensor& query, std::size_t k,
                         double temperature = 0.01, const std::string& query_id = "") {
    if (index.size() == 0) throw DomainError("topk: empty index");
    if (k < 1 || k > index.size())
        throw DomainError("topk: k = " + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
    const auto sims = index.similarities(query);
    std::vector<std::size_t> order(index.size());
    std::iota(order.begin(), order.end(), 0);
    const auto& ids = index.ids();
    auto better = [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return ids[a] < ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), better);
    CandidateSet out{query_id, {}};
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t r = order[i];
        out.entries.push_back({ids[r], sims[r], sims[r] / temperature, std::nullopt, std::nullopt});
    }
    return out;
}

/// lse over every entry of the score volume.
inline Tensor retrieval_score(const Tensor& S) { return logsumexp(S); }

/// Softmax over the whole volume.
inline Tensor pose_posterior(const Tensor& S) {
    const double lse = detail::logsumexp_values(S.data());
    std::vector<float> p(S.numel());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(std::exp(static_cast<double>(S[i]) - lse));
    return Tensor(S.shape(), std::move(p));
}

struct PoseEstimate {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
    Tensor posterior;
};

/// Posterior mean translation and circular-mean heading.
inline PoseEstimate estimate_pose(const Tensor& posterior, const PoseGrid& grid) {
    if (posterior.numel() != grid.poses.size())
        throw DimensionError("estimate_pose: posterior has " + std::to_string(posterior.numel()) +
                             " entries, grid has " + std::to_string(grid.poses.size()));
    double x = 0, y = 0, cs = 0, sn = 0, mass = 0;
    std::size_t best = 0;
    for (std::size_t i = 0; i < grid.poses.size(); ++i) {
        const double w = posterior[i];
        const auto& p = grid.poses[i];
        x += w * p.x;
        y += w * p.y;
        cs += w * std::cos(p.theta);
        sn += w * std::sin(p.theta);
        mass += w;
        if (posterior[i] > posterior[best]) best = i;
    }
    if (!(mass > 0)) throw DomainError("estimate_pose: posterior has no mass");
    PoseEstimate e;
    e.x = x / mass;
    e.y = y / mass;
    e.theta = std::hypot(cs, sn) < 1e-9 ? grid.poses[best].theta : normalize_angle(std::atan2(sn, cs));
    e.posterior = posterior;
    return e;
}

/// combined = prior_weight * prior_logit + bev_weight * bev_score, stable descending sort.
inline CandidateSet rerank(CandidateSet candidates, const std::vector<double>& bev_scores, double prior_weight = 1.0,
                           double bev_weight = 1.0) {
    if (bev_scores.size() != candidates.entries.size())
        throw DimensionError("rerank: " + std::to_string(bev_scores.size()) + " scores for " +
                             std::to_string(candidates.entries.size()) + " candidates");
    for (std::size_t i = 0; i < bev_scores.size(); ++i) {
        auto& c = candidates.entries[i];
        c.bev_score = bev_scores[i];
        c.combined = prior_weight * c.prior_logit + bev_weight * bev_scores[i];
    }
    std::stable_sort(candidates.entries.begin(), candidates.entries.end(),
                     [](const Candidate& a, const Candidate& b) { return *a.combined > *b.combined; });
    return candidates;
}

/// Fraction of queries whose true reference is among the first k entries, per k.
inline std::map<std::size_t, double> recall_at_k(const std::vector<CandidateSet>& results,
                                                 const std::map<std::string, std::string>& groundtruth,
                                                 const std::vector<std::size_t>& ks) {
    std::map<std::size_t, double> out;
    for (std::size_t k : ks) out[k] = 0.0;
    if (results.empty()) return out;
    for (const auto& r : results) {
        auto it = groundtruth.find(r.query_id);
        if (it == groundtruth.end()) throw DomainError("recall_at_k: no groundtruth for query '" + r.query_id + "'");
        std::size_t rank = r.entries.size();
        for (std::size_t i = 0; i < r.entries.size(); ++i)
            if (r.entries[i].reference_id == it->second) {
                rank = i;
                break;
            }
        for (std::size_t k : ks)
            if (rank < k) out[k] += 1.0;
    }
    for (auto& [k, v] : out) v /= static_cast<double>(results.size());
    return out;
}

struct PoseMetrics {
    double mean_t_err_m = 0.0;
    double median_t_err_m = 0.0;
    double mean_r_err_deg = 0.0;
    double median_r_err_deg = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline PoseMetrics pose_metrics(const std::vector<Pose2>& estimates, const std::vector<Pose2>& truth) {
    if (estimates.size() != truth.size()) throw DimensionError("pose_metrics: estimate and truth counts differ");
    std::vector<double> t, r;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        t.push_back(std::hypot(estimates[i].x - truth[i].x, estimates[i].y - truth[i].y));
        r.push_back(std::abs(angle_difference(estimates[i].theta, truth[i].theta)) * 180.0 / std::numbers::pi);
    }
    return {mean(t), median(t), mean(r), median(r)};
}

struct QueryResult {
    CandidateSet candidates;
    std::optional<PoseEstimate> pose;
};

inline nlohmann::json result_record(const QueryResult& r) {
    nlohmann::json j;
    j["query_id"] = r.candidates.query_id;
    j["ranked_reference_ids"] = nlohmann::json::array();
    j["combined_scores"] = nlohmann::json::array();
    for (const auto& c : r.candidates.entries) {
        j["ranked_reference_ids"].push_back(c.reference_id);
        j["combined_scores"].push_back(c.combined.value_or(c.prior_logit));
    }
    if (r.pose)
        j["pose"] = {{"x", r.pose->x}, {"y", r.pose->y}, {"theta_deg", r.pose->theta * 180.0 / std::numbers::pi}};
    return j;
}

inline void write_results(const std::filesystem::path& path, const std::vector<QueryResult>& results) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write results file " + path.string());
    for (const auto& r : results) out << result_record(r).dump() << '\n';
    if (!out) throw Error("failed writing results file " + path.string());
}

inline nlohmann::json metrics_document(const std::map<std::size_t, double>& recall, const PoseMetrics& pose) {
    auto at = [&](std::size_t k) {
        auto it = recall.find(k);
        return it == recall.end() ? 0.0 : it->second;
    };
    return {{"r_at_1", at(1)},
            {"r_at_5", at(5)},
            {"r_at_10", at(10)},
            {"mean_t_err_m", pose.mean_t_err_m},
            {"median_t_err_m", pose.median_t_err_m},
            {"mean_r_err_deg", pose.mean_r_err_deg},
            {"median_r_err_deg", pose.median_r_err_deg}};
}

} // namespace cbev
