#include <cbev/pipeline.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace cbev {
namespace {

SynthConfig tiny_synth() {
    SynthConfig c;
    c.n_worlds = 6;
    c.world_size = 16;
    c.c_in = 2;
    c.search_extent = 8;
    c.n_t = 8;
    c.n_theta = 8;
    c.l_B = 5;
    c.pano_rows = 4;
    c.pano_cols = 16;
    return c;
}

RetrievalConfig tiny_retrieval() {
    RetrievalConfig r;
    r.k = 4;
    r.grid.n_t = 8;
    r.grid.n_theta = 8;
    r.grid.l_A = 16;
    r.grid.l_B = 5;
    r.grid.search_extent = 8;
    return r;
}

struct Fixture {
    Dataset ds = build_dataset(tiny_synth());
    EncoderParams one, two;

    Fixture() {
        EncoderConfig e;
        e.c_in = 2;
        e.c = 4;
        e.pano_rows = 4;
        e.depth_bins = 5;
        one = init_encoder_params(e, 1);
        two = init_encoder_params(e, 2);
    }
};

TEST(Pipeline, BackendsGiveIdenticalRanking) {
    Fixture f;
    RetrievalConfig fft = tiny_retrieval(), bf = tiny_retrieval();
    bf.backend = Backend::bruteforce;
    auto a = evaluate(f.ds, f.one, &f.two, fft, nullptr);
    auto b = evaluate(f.ds, f.one, &f.two, bf, nullptr);
    ASSERT_EQ(a.results.size(), b.results.size());
    for (std::size_t q = 0; q < a.results.size(); ++q) {
        const auto& x = a.results[q].candidates.entries;
        const auto& y = b.results[q].candidates.entries;
        ASSERT_EQ(x.size(), y.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_EQ(x[i].reference_id, y[i].reference_id);
            EXPECT_NEAR(*x[i].combined, *y[i].combined, 1e-3 * std::max(1.0, std::abs(*x[i].combined)));
        }
    }
}

TEST(Pipeline, NoPriorZeroesOnlyThePrior) {
    Fixture f;
    RetrievalConfig with = tiny_retrieval(), without = tiny_retrieval();
    without.prior_enabled = false;
    auto a = evaluate(f.ds, f.one, &f.two, with, nullptr);
    auto b = evaluate(f.ds, f.one, &f.two, without, nullptr);
    for (std::size_t q = 0; q < a.results.size(); ++q) {
        std::map<std::string, Candidate> by_id;
        for (const auto& c : a.results[q].candidates.entries) by_id[c.reference_id] = c;
        for (const auto& c : b.results[q].candidates.entries) {
            ASSERT_TRUE(by_id.count(c.reference_id));
            const auto& o = by_id[c.reference_id];
            EXPECT_DOUBLE_EQ(*c.bev_score, *o.bev_score);
            EXPECT_DOUBLE_EQ(c.prior_logit, o.prior_logit);
            EXPECT_DOUBLE_EQ(*c.combined, *c.bev_score);
            EXPECT_DOUBLE_EQ(*o.combined, o.prior_logit + *o.bev_score);
        }
    }
    // Stage-1 candidates do not depend on the flag.
    for (std::size_t q = 0; q < a.stage_one.size(); ++q)
        for (std::size_t i = 0; i < a.stage_one[q].entries.size(); ++i)
            EXPECT_EQ(a.stage_one[q].entries[i].reference_id, b.stage_one[q].entries[i].reference_id);
}

TEST(Pipeline, KIsClampedWithWarning) {
    Fixture f;
    RetrievalConfig r = tiny_retrieval();
    r.k = 100;
    std::ostringstream warn;
    auto rep = evaluate(f.ds, f.one, &f.two, r, &warn);
    EXPECT_NE(warn.str().find("clamping"), std::string::npos);
    EXPECT_EQ(rep.metrics.at("k"), 6);
    for (const auto& res : rep.results) EXPECT_EQ(res.candidates.entries.size(), 6u);
    EXPECT_DOUBLE_EQ(rep.recall.at(10), 1.0);
}

TEST(Pipeline, MetricsAndResultsFiles) {
    Fixture f;
    auto rep = evaluate(f.ds, f.one, &f.two, tiny_retrieval(), nullptr);
    for (const char* key : {"r_at_1", "r_at_5", "r_at_10", "mean_t_err_m", "median_t_err_m", "mean_r_err_deg",
                            "median_r_err_deg"})
        EXPECT_TRUE(rep.metrics.contains(key)) << key;
    auto dir = std::filesystem::temp_directory_path() / "cbev_pipeline_files";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    write_results(dir / "results.jsonl", rep.results);
    write_metrics(dir / "metrics.json", rep.metrics);
    std::ifstream in(dir / "results.jsonl");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("ranked_reference_ids").size(), 4u);
        EXPECT_EQ(j.at("combined_scores").size(), 4u);
        EXPECT_TRUE(j.at("pose").contains("theta_deg"));
        ++n;
    }
    EXPECT_EQ(n, f.ds.split("test").size());
    std::ifstream m(dir / "metrics.json");
    EXPECT_EQ(nlohmann::json::parse(m).at("r_at_1"), rep.metrics.at("r_at_1"));
    std::filesystem::remove_all(dir);
}

TEST(Pipeline, PoseInsideSearchRegion) {
    Fixture f;
    auto rep = evaluate(f.ds, f.one, &f.two, tiny_retrieval(), nullptr);
    for (const auto& r : rep.results) {
        ASSERT_TRUE(r.pose.has_value());
        EXPECT_LE(std::abs(r.pose->x), 4.0);
        EXPECT_LE(std::abs(r.pose->y), 4.0);
        EXPECT_GE(r.pose->theta, 0.0);
        EXPECT_LT(r.pose->theta, kTwoPi);
    }
}

TEST(Pipeline, StageOneOnly) {
    Fixture f;
    auto rep = evaluate(f.ds, f.one, nullptr, tiny_retrieval(), nullptr);
    EXPECT_FALSE(rep.pose.has_value());
    EXPECT_EQ(rep.recall.at(1), rep.recall_stage_one.at(1));
}

TEST(Pipeline, IndexRoundTrip) {
    Fixture f;
    auto worlds = reference_worlds(f.ds);
    EmbeddingIndex idx = build_index(worlds, f.one);
    auto dir = std::filesystem::temp_directory_path() / "cbev_index_rt";
    std::filesystem::remove_all(dir);
    save_index(dir, idx);
    EmbeddingIndex back = load_index(dir);
    EXPECT_EQ(back.ids(), idx.ids());
    ASSERT_EQ(back.locations().size(), idx.locations().size());
    EXPECT_EQ(back.locations()[3].x, idx.locations()[3].x);
    for (std::size_t i = 0; i < idx.vectors().numel(); ++i) ASSERT_EQ(back.vectors()[i], idx.vectors()[i]);
    std::filesystem::remove(dir / kIndexManifest);
    EXPECT_THROW(load_index(dir), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Pipeline, CrossAreaUsesTestWorldsOnly) {
    SynthConfig c = tiny_synth();
    c.split = SplitMode::cross_area;
    Dataset ds = build_dataset(c);
    auto worlds = reference_worlds(ds);
    EXPECT_EQ(worlds.size(), 3u);
    for (const auto* w : worlds)
        for (const auto& s : ds.samples)
            if (s.world_id == w->id) EXPECT_EQ(s.split, "test");
}

TEST(Pipeline, OrientationKnownReportsGivenHeading) {
    Fixture f;
    RetrievalConfig r = tiny_retrieval();
    r.orientation_known = true;
    auto rep = evaluate(f.ds, f.one, &f.two, r, nullptr);
    ASSERT_TRUE(rep.pose.has_value());
    EXPECT_NEAR(rep.pose->mean_r_err_deg, 0.0, 1e-9);
}

} // namespace
} // namespace cbev
