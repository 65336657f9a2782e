#include <cbev/gradcheck.hpp>
#include <cbev/matcher.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace cbev {
namespace {

GridSpec spec(std::size_t l_A, std::size_t l_B, std::size_t n_t, std::size_t n_theta) {
    GridSpec s;
    s.l_A = l_A;
    s.l_B = l_B;
    s.n_t = n_t;
    s.n_theta = n_theta;
    s.pixel_size = 1.0;
    s.search_extent = static_cast<double>(n_t);
    return s;
}

Tensor random_map(std::size_t side, std::size_t c, std::mt19937& rng) {
    std::normal_distribution<float> n(0, 1);
    std::vector<float> d(side * side * c);
    for (auto& v : d) v = n(rng);
    return l2_normalize_global(Tensor({side, side, c}, d));
}

Tensor masked_random_bev(std::size_t side, std::size_t c, std::mt19937& rng) {
    return apply_mask(random_map(side, c, rng), circular_mask(side).to_tensor());
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
    double diff = 0, mx = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
        mx = std::max(mx, static_cast<double>(std::abs(b[i])));
    }
    return diff / mx;
}

std::size_t argmax(const Tensor& t) {
    return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
}

TEST(ScoreVolume, ZeroBevGivesZeros) {
    std::mt19937 rng(1);
    auto grid = build_pose_grid(spec(12, 5, 8, 4));
    Tensor a = random_map(12, 3, rng);
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        Tensor s = score_volume(Tensor::zeros({5, 5, 3}), a, grid, b);
        EXPECT_EQ(s.shape(), (Shape{8, 8, 4}));
        for (float v : s.data()) EXPECT_NEAR(v, 0.0f, 1e-12);
    }
}

TEST(ScoreVolume, SingleCellIsProduct) {
    auto grid = build_pose_grid(spec(1, 1, 1, 1));
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        Tensor s = score_volume(Tensor({1, 1, 1}, {3.0f}), Tensor({1, 1, 1}, {-2.0f}), grid, b);
        EXPECT_NEAR(s.item(), -6.0f, 1e-6);
    }
}

TEST(ScoreVolume, PlantedCentralCropIsArgmax) {
    std::mt19937 rng(2);
    auto grid = build_pose_grid(spec(21, 11, 11, 1));
    Tensor a = random_map(21, 4, rng);
    // Central crop: top-left at (5, 5).
    std::vector<float> crop(11 * 11 * 4);
    auto mask = circular_mask(11);
    for (std::size_t r = 0; r < 11; ++r)
        for (std::size_t c = 0; c < 11; ++c)
            for (std::size_t ch = 0; ch < 4; ++ch)
                crop[(r * 11 + c) * 4 + ch] = mask(r, c) ? a[((r + 5) * 21 + c + 5) * 4 + ch] : 0.0f;
    Tensor bev({11, 11, 4}, crop);
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        Tensor s = score_volume(bev, a, grid, b);
        EXPECT_EQ(argmax(s), grid.index(5, 5, 0));
        EXPECT_NEAR(grid.poses[argmax(s)].x, 0.0, 1e-12);
    }
}

TEST(ScoreVolume, FftMatchesBruteForce) {
    std::mt19937 rng(3);
    for (auto s : {spec(48, 19, 28, 8), spec(20, 7, 14, 5), spec(16, 16, 1, 32), spec(9, 4, 6, 3)}) {
        auto grid = build_pose_grid(s);
        Tensor a = random_map(s.l_A, 3, rng);
        Tensor b = masked_random_bev(s.l_B, 3, rng);
        Tensor bf = score_volume(b, a, grid, Backend::bruteforce);
        Tensor ff = score_volume(b, a, grid, Backend::fft);
        EXPECT_LT(max_rel_diff(ff, bf), 1e-4);
    }
}

TEST(ScoreVolume, LinearInBev) {
    std::mt19937 rng(4);
    auto grid = build_pose_grid(spec(20, 7, 14, 3));
    Tensor a = random_map(20, 2, rng);
    Tensor b = masked_random_bev(7, 2, rng);
    Tensor s1 = score_volume(b, a, grid, Backend::fft);
    Tensor s3 = score_volume(scale(b, 3.0f), a, grid, Backend::fft);
    for (std::size_t i = 0; i < s1.numel(); ++i) EXPECT_NEAR(s3[i], 3.0f * s1[i], 1e-6);
}

TEST(ScoreVolume, AerialOutsideFootprintIsIgnored) {
    std::mt19937 rng(5);
    // offset = 1: rows/cols 0 and l_A-1 are never covered by any hypothesis.
    auto grid = build_pose_grid(spec(20, 7, 12, 4));
    Tensor a = random_map(20, 2, rng);
    Tensor b = masked_random_bev(7, 2, rng);
    Tensor base = score_volume(b, a, grid, Backend::fft);
    Tensor changed = a.clone();
    auto d = changed.mutable_data();
    for (std::size_t r = 0; r < 20; ++r)
        for (std::size_t c = 0; c < 20; ++c)
            if (r == 0 || c == 0 || r == 19 || c == 19)
                for (std::size_t ch = 0; ch < 2; ++ch) d[(r * 20 + c) * 2 + ch] += 5.0f;
    for (Backend be : {Backend::bruteforce, Backend::fft}) {
        Tensor s = score_volume(b, changed, grid, be);
        for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s[i], base[i], 1e-6);
    }
}

TEST(ScoreVolume, PixelSizeMismatchRejected) {
    std::mt19937 rng(6);
    auto grid = build_pose_grid(spec(12, 5, 8, 1));
    BEVMap bev{masked_random_bev(5, 2, rng), circular_mask(5), 1.0};
    AerialMap aer{random_map(12, 2, rng), 2.0, 8.0};
    EXPECT_THROW(score_volume_fft(bev, aer, grid), DomainError);
    EXPECT_THROW(score_volume_bruteforce(bev, aer, grid), DomainError);
}

TEST(ScoreVolume, FitViolationRejectedBeforeMatching) {
    auto s = spec(12, 5, 9, 1);
    EXPECT_THROW(build_pose_grid(s), FitConstraintError);
    PoseGrid forged{s, {}};
    EXPECT_THROW(score_volume(Tensor::zeros({5, 5, 1}), Tensor::zeros({12, 12, 1}), forged, Backend::fft),
                 FitConstraintError);
}

TEST(ScoreVolumeBackward, OneHotUpstreamStampsRotatedBev) {
    std::mt19937 rng(7);
    auto grid = build_pose_grid(spec(12, 5, 8, 4));
    BEVMap bev{masked_random_bev(5, 2, rng), circular_mask(5), 1.0};
    AerialMap aer{random_map(12, 2, rng), 1.0, 8.0};
    const std::size_t ty = 2, tx = 6, k = 1;
    Tensor up = Tensor::zeros({8, 8, 4});
    up.mutable_data()[grid.index(ty, tx, k)] = 1.0f;
    Tensor rotated = apply_mask(bilinear_sample(bev.tensor, rotation_coords(5, grid.angle(k))).values,
                                circular_mask(5).to_tensor());
    const std::size_t off = placement_offset(grid.spec);
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        auto g = score_volume_backward(up, bev, aer, grid, b);
        for (std::size_t r = 0; r < 12; ++r)
            for (std::size_t c = 0; c < 12; ++c)
                for (std::size_t ch = 0; ch < 2; ++ch) {
                    const bool inside = r >= off + ty && r < off + ty + 5 && c >= off + tx && c < off + tx + 5;
                    const float expect =
                        inside ? rotated[((r - off - ty) * 5 + (c - off - tx)) * 2 + ch] : 0.0f;
                    EXPECT_NEAR(g.aerial[(r * 12 + c) * 2 + ch], expect, 1e-6);
                }
    }
}

TEST(ScoreVolumeBackward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937 rng(8);
    auto grid = build_pose_grid(spec(12, 5, 8, 4));
    BEVMap bev{masked_random_bev(5, 2, rng), circular_mask(5), 1.0};
    AerialMap aer{random_map(12, 2, rng), 1.0, 8.0};
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        auto g = score_volume_backward(Tensor::zeros({8, 8, 4}), bev, aer, grid, b);
        for (float v : g.bev.data()) EXPECT_EQ(v, 0.0f);
        for (float v : g.aerial.data()) EXPECT_EQ(v, 0.0f);
    }
}

TEST(ScoreVolumeBackward, MatchesFiniteDifferences) {
    auto grid = build_pose_grid(spec(6, 3, 4, 2));
    const Tensor mask = circular_mask(3).to_tensor();
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        auto op = [&](const std::vector<Tensor>& in) { return score_volume(apply_mask(in[0], mask), in[1], grid, b); };
        auto r = grad_check(std::string("score_volume_") + backend_name(b), op, {{3, 3, 2}, {6, 6, 2}}, 1e-3, 9);
        EXPECT_TRUE(r.passed) << r.max_rel_error;
    }
    // Non-right angles exercise the bilinear adjoint.
    auto grid5 = build_pose_grid(spec(9, 5, 5, 5));
    const Tensor mask5 = circular_mask(5).to_tensor();
    auto op = [&](const std::vector<Tensor>& in) {
        return score_volume(apply_mask(in[0], mask5), in[1], grid5, Backend::fft);
    };
    auto r = grad_check("score_volume_5", op, {{5, 5, 2}, {9, 9, 2}}, 1e-3, 10);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(PairwiseScores, MatchesPerPairLogSumExp) {
    std::mt19937 rng(11);
    auto grid = build_pose_grid(spec(12, 5, 8, 4));
    std::vector<Tensor> bevs{masked_random_bev(5, 2, rng), masked_random_bev(5, 2, rng)};
    std::vector<Tensor> aers{random_map(12, 2, rng), random_map(12, 2, rng), random_map(12, 2, rng)};
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        Tensor s = pairwise_retrieval_scores(bevs, aers, grid, 10.0, b);
        ASSERT_EQ(s.shape(), (Shape{2, 3}));
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                const float expect = logsumexp(scale(score_volume(bevs[i], aers[j], grid, Backend::bruteforce), 10.0f)).item();
                EXPECT_NEAR(s[i * 3 + j], expect, 1e-4);
            }
    }
}

TEST(PairwiseScores, GradientMatchesFiniteDifferences) {
    auto grid = build_pose_grid(spec(6, 3, 4, 2));
    const Tensor mask = circular_mask(3).to_tensor();
    for (Backend b : {Backend::bruteforce, Backend::fft}) {
        auto op = [&](const std::vector<Tensor>& in) {
            return pairwise_retrieval_scores({apply_mask(in[0], mask), apply_mask(in[1], mask)}, {in[2], in[3]}, grid,
                                             2.0, b);
        };
        auto r = grad_check("pairwise", op, {{3, 3, 2}, {3, 3, 2}, {6, 6, 2}, {6, 6, 2}}, 1e-3, 12);
        EXPECT_TRUE(r.passed) << backend_name(b) << " " << r.max_rel_error;
    }
}

} // namespace
} // namespace cbev
