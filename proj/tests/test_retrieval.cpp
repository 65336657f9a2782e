#include <cbev/gradcheck.hpp>
#include <cbev/retrieval.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

namespace cbev {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Tensor random_unit_rows(std::size_t n, std::size_t e, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> nd(0, 1);
    std::vector<float> d(n * e);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0;
        for (std::size_t k = 0; k < e; ++k) {
            d[i * e + k] = nd(rng);
            sq += d[i * e + k] * d[i * e + k];
        }
        for (std::size_t k = 0; k < e; ++k) d[i * e + k] = static_cast<float>(d[i * e + k] / std::sqrt(sq));
    }
    return Tensor({n, e}, d);
}

std::vector<std::string> make_ids(std::size_t n) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "r%04zu", i);
        ids.emplace_back(buf);
    }
    return ids;
}

Tensor row(const Tensor& m, std::size_t i) {
    const std::size_t e = m.dim(1);
    return Tensor({e}, std::vector<float>(m.data().begin() + static_cast<long>(i * e),
                                          m.data().begin() + static_cast<long>((i + 1) * e)));
}

GridSpec small_spec() {
    GridSpec s;
    s.l_A = 12;
    s.l_B = 5;
    s.n_t = 8;
    s.n_theta = 4;
    s.search_extent = 8;
    return s;
}

TEST(EmbeddingIndex, Validation) {
    EXPECT_THROW(EmbeddingIndex({"a", "a"}, random_unit_rows(2, 3, 1)), DomainError);
    EXPECT_THROW(EmbeddingIndex({"a", "b"}, Tensor::full({2, 3}, 1.0f)), DomainError);
    EXPECT_THROW(EmbeddingIndex({"a"}, random_unit_rows(2, 3, 1)), DimensionError);
    EmbeddingIndex empty;
    EXPECT_THROW(topk(empty, Tensor::zeros({3}), 1), DomainError);
}

TEST(TopK, QueryEqualToRowIsFirst) {
    Tensor v = random_unit_rows(20, 8, 2);
    EmbeddingIndex index(make_ids(20), v);
    auto c = topk(index, row(v, 7), 3, 0.01);
    EXPECT_EQ(c.entries[0].reference_id, "r0007");
    EXPECT_NEAR(c.entries[0].similarity, 1.0, 1e-6);
    EXPECT_NEAR(c.entries[0].prior_logit, 100.0, 1e-4);
}

TEST(TopK, FullListIsSortedWithIdTieBreak) {
    std::vector<float> d{1, 0, 0, 1, 1, 0, 0, 1};
    EmbeddingIndex index({"d", "c", "b", "a"}, Tensor({4, 2}, d));
    auto c = topk(index, Tensor({2}, {1, 0}), 4);
    ASSERT_EQ(c.entries.size(), 4u);
    EXPECT_EQ(c.entries[0].reference_id, "b");
    EXPECT_EQ(c.entries[1].reference_id, "d");
    EXPECT_EQ(c.entries[2].reference_id, "a");
    EXPECT_EQ(c.entries[3].reference_id, "c");
    EXPECT_THROW(topk(index, Tensor({2}, {1, 0}), 5), DomainError);
}

TEST(TopK, AgreesWithExhaustiveScan) {
    const std::size_t n = 1000, e = 16;
    Tensor v = random_unit_rows(n, e, 3);
    EmbeddingIndex index(make_ids(n), v);
    Tensor q = row(random_unit_rows(1, e, 4), 0);
    auto c = topk(index, q, 25);
    std::vector<std::pair<double, std::string>> scan;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < e; ++k) s += static_cast<double>(q[k]) * v[i * e + k];
        scan.emplace_back(-s, index.ids()[i]);
    }
    std::sort(scan.begin(), scan.end());
    for (std::size_t i = 0; i < 25; ++i) {
        EXPECT_EQ(c.entries[i].reference_id, scan[i].second);
        EXPECT_EQ(c.entries[i].similarity, -scan[i].first);
    }
}

TEST(RetrievalScore, AnalyticValues) {
    EXPECT_FLOAT_EQ(retrieval_score(Tensor({1, 1, 1}, {3.25f})).item(), 3.25f);
    Tensor u = Tensor::full({28, 28, 32}, 0.4f);
    EXPECT_NEAR(retrieval_score(u).item(), 0.4 + std::log(25088.0), 1e-5);
}

TEST(RetrievalScore, GradientIsSoftmax) {
    auto r = grad_check("retrieval_score", [](const std::vector<Tensor>& in) { return retrieval_score(in[0]); },
                        {{3, 3, 2}}, 1e-3, 1);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
    std::mt19937 rng(5);
    std::normal_distribution<float> nd(0, 1);
    std::vector<float> d(18);
    for (auto& x : d) x = nd(rng);
    Tensor s({3, 3, 2}, d, true);
    retrieval_score(s).backward();
    Tensor p = pose_posterior(s);
    for (std::size_t i = 0; i < 18; ++i) EXPECT_NEAR(s.grad()[i], p[i], 1e-6);
}

TEST(PosePosterior, Identities) {
    Tensor u = Tensor::full({4, 4, 2}, -1.5f);
    Tensor pu = pose_posterior(u);
    for (float v : pu.data()) EXPECT_NEAR(v, 1.0 / 32, 1e-7);

    std::vector<float> d(32, 0.0f);
    d[5] = 20.0f;
    EXPECT_GT(pose_posterior(Tensor({4, 4, 2}, d))[5], 0.999f);

    std::mt19937 rng(6);
    std::normal_distribution<float> nd(0, 3);
    for (auto& x : d) x = nd(rng);
    Tensor s({4, 4, 2}, d);
    Tensor p = pose_posterior(s);
    const double lse = retrieval_score(s).item();
    double total = 0;
    for (std::size_t i = 0; i < 32; ++i) {
        EXPECT_NEAR(p[i], std::exp(s[i] - lse), 1e-6);
        total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);

    std::vector<float> shifted(d);
    for (auto& x : shifted) x += 7.0f;
    Tensor ss({4, 4, 2}, shifted);
    Tensor ps = pose_posterior(ss);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(ps[i], p[i], 1e-6);
    EXPECT_NEAR(retrieval_score(ss).item(), lse + 7.0, 1e-5);
}

TEST(EstimatePose, DeltaAndSymmetry) {
    auto grid = build_pose_grid(small_spec());
    const std::size_t idx = grid.index(2, 5, 3);
    std::vector<float> d(grid.size(), 0.0f);
    d[idx] = 1.0f;
    auto e = estimate_pose(Tensor({8, 8, 4}, d), grid);
    EXPECT_DOUBLE_EQ(e.x, grid.poses[idx].x);
    EXPECT_DOUBLE_EQ(e.y, grid.poses[idx].y);
    EXPECT_NEAR(e.theta, grid.poses[idx].theta, 1e-12);

    auto uniform = estimate_pose(Tensor::full({8, 8, 4}, 1.0f / 256), grid);
    EXPECT_NEAR(uniform.x, 0.0, 1e-9);
    EXPECT_NEAR(uniform.y, 0.0, 1e-9);
    // Uniform headings cancel: falls back to the argmax heading.
    EXPECT_NEAR(uniform.theta, 0.0, 1e-12);
}

TEST(EstimatePose, CircularMeanAcrossNorth) {
    GridSpec s = small_spec();
    s.n_theta = 36;
    auto grid = build_pose_grid(s);
    std::vector<float> d(grid.size(), 0.0f);
    d[grid.index(3, 3, 35)] = 0.5f;  // 350 degrees
    d[grid.index(3, 3, 1)] = 0.5f;   // 10 degrees
    auto e = estimate_pose(Tensor({8, 8, 36}, d), grid);
    EXPECT_NEAR(std::abs(angle_difference(e.theta, 0.0)), 0.0, 1e-9);
    EXPECT_DOUBLE_EQ(e.x, grid.translation_x(3));
}

TEST(EstimatePose, InsideConvexHull) {
    auto grid = build_pose_grid(small_spec());
    std::mt19937 rng(7);
    std::exponential_distribution<float> ex(1.0f);
    for (int t = 0; t < 20; ++t) {
        std::vector<float> d(grid.size());
        double total = 0;
        for (auto& x : d) total += (x = ex(rng));
        for (auto& x : d) x = static_cast<float>(x / total);
        auto e = estimate_pose(Tensor({8, 8, 4}, d), grid);
        EXPECT_LE(std::abs(e.x), grid.translation_x(7) + 1e-9);
        EXPECT_LE(std::abs(e.y), grid.translation_y(0) + 1e-9);
        EXPECT_GE(e.theta, 0.0);
        EXPECT_LT(e.theta, kTwoPi);
    }
}

CandidateSet two_candidates() {
    CandidateSet c{"q", {}};
    c.entries.push_back({"a", 0.02, 2.0, {}, {}});
    c.entries.push_back({"b", 0.01, 1.0, {}, {}});
    return c;
}

TEST(Rerank, Examples) {
    auto r = rerank(two_candidates(), {0.0, 2.0});
    EXPECT_EQ(r.entries[0].reference_id, "b");
    EXPECT_DOUBLE_EQ(*r.entries[0].combined, 3.0);
    EXPECT_DOUBLE_EQ(*r.entries[1].combined, 2.0);

    auto same = rerank(two_candidates(), {5.0, 5.0});
    EXPECT_EQ(same.entries[0].reference_id, "a");
    auto zero = rerank(two_candidates(), {0.0, 0.0});
    EXPECT_EQ(zero.entries[0].reference_id, "a");

    // Prior disabled: combined is the BEV score alone.
    auto noprior = rerank(two_candidates(), {3.0, 2.5}, 0.0);
    EXPECT_DOUBLE_EQ(*noprior.entries[0].combined, 3.0);
    EXPECT_DOUBLE_EQ(*noprior.entries[1].combined, 2.5);

    auto tie = rerank(two_candidates(), {-1.0, 0.0}, 0.0);
    EXPECT_EQ(tie.entries[0].reference_id, "b");
    CandidateSet equal{"q", {{"x", 0, 0, {}, {}}, {"y", 0, 0, {}, {}}}};
    auto stable = rerank(equal, {1.0, 1.0}, 0.0);
    EXPECT_EQ(stable.entries[0].reference_id, "x");

    EXPECT_THROW(rerank(two_candidates(), {1.0}), DimensionError);
}

CandidateSet ranked(const std::string& q, std::vector<std::string> ids) {
    CandidateSet c{q, {}};
    for (auto& id : ids) c.entries.push_back({id, 0, 0, {}, {}});
    return c;
}

TEST(RecallAtK, HandBuiltFixture) {
    std::vector<CandidateSet> results{ranked("q1", {"a", "b", "c"}), ranked("q2", {"b", "c", "a"}),
                                      ranked("q3", {"c", "a", "b"}), ranked("q4", {"a", "c", "b"})};
    std::map<std::string, std::string> gt{{"q1", "a"}, {"q2", "a"}, {"q3", "a"}, {"q4", "b"}};
    auto r = recall_at_k(results, gt, {1, 2, 3});
    EXPECT_DOUBLE_EQ(r[1], 0.25);
    EXPECT_DOUBLE_EQ(r[2], 0.5);
    EXPECT_DOUBLE_EQ(r[3], 1.0);

    std::map<std::string, std::string> all_first{{"q1", "a"}, {"q2", "b"}, {"q3", "c"}, {"q4", "a"}};
    EXPECT_DOUBLE_EQ(recall_at_k(results, all_first, {1})[1], 1.0);
    std::map<std::string, std::string> none{{"q1", "z"}, {"q2", "z"}, {"q3", "z"}, {"q4", "z"}};
    EXPECT_DOUBLE_EQ(recall_at_k(results, none, {3})[3], 0.0);
    EXPECT_THROW(recall_at_k(results, {{"q1", "a"}}, {1}), DomainError);
}

TEST(RecallAtK, MonotoneInK) {
    std::mt19937 rng(8);
    std::vector<CandidateSet> results;
    std::map<std::string, std::string> gt;
    for (int q = 0; q < 30; ++q) {
        std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
        std::shuffle(ids.begin(), ids.end(), rng);
        results.push_back(ranked("q" + std::to_string(q), ids));
        gt["q" + std::to_string(q)] = "c";
    }
    auto r = recall_at_k(results, gt, {1, 2, 3, 4, 5, 6});
    for (std::size_t k = 2; k <= 6; ++k) EXPECT_GE(r[k], r[k - 1]);
    EXPECT_DOUBLE_EQ(r[6], 1.0);
}

TEST(PoseMetrics, Examples) {
    auto exact = pose_metrics({Pose2(1, 2, 0.5)}, {Pose2(1, 2, 0.5)});
    EXPECT_DOUBLE_EQ(exact.mean_t_err_m, 0.0);
    EXPECT_NEAR(exact.mean_r_err_deg, 0.0, 1e-12);

    auto wrap = pose_metrics({Pose2(0, 0, 359 * kDeg)}, {Pose2(0, 0, 1 * kDeg)});
    EXPECT_NEAR(wrap.mean_r_err_deg, 2.0, 1e-9);

    auto m = pose_metrics({Pose2(1, 0, 0), Pose2(0, 2, 0), Pose2(9, 0, 0)}, {Pose2(0, 0, 0), Pose2(0, 0, 0), Pose2(0, 0, 0)});
    EXPECT_DOUBLE_EQ(m.mean_t_err_m, 4.0);
    EXPECT_DOUBLE_EQ(m.median_t_err_m, 2.0);

    auto opposite = pose_metrics({Pose2(0, 0, 0)}, {Pose2(0, 0, std::numbers::pi)});
    EXPECT_NEAR(opposite.mean_r_err_deg, 180.0, 1e-9);
}

TEST(ResultsFormat, RecordAndMetricsKeys) {
    QueryResult q{rerank(two_candidates(), {0.0, 2.0}), PoseEstimate{1.5, -2.0, std::numbers::pi / 2, {}}};
    auto j = result_record(q);
    EXPECT_EQ(j["query_id"], "q");
    EXPECT_EQ(j["ranked_reference_ids"][0], "b");
    EXPECT_DOUBLE_EQ(j["combined_scores"][0].get<double>(), 3.0);
    EXPECT_NEAR(j["pose"]["theta_deg"].get<double>(), 90.0, 1e-9);
    auto m = metrics_document({{1, 0.5}, {5, 0.75}, {10, 1.0}}, {1, 2, 3, 4});
    for (const char* key : {"r_at_1", "r_at_5", "r_at_10", "mean_t_err_m", "median_t_err_m", "mean_r_err_deg",
                            "median_r_err_deg"})
        EXPECT_TRUE(m.contains(key)) << key;
    EXPECT_DOUBLE_EQ(m["r_at_5"].get<double>(), 0.75);
}

} // namespace
} // namespace cbev
