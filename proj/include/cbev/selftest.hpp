#pragma once

#include <cbev/encoder.hpp>
#include <cbev/gradcheck.hpp>
#include <cbev/maps.hpp>
#include <cbev/matcher.hpp>
#include <cbev/retrieval.hpp>
#include <cbev/synth.hpp>
#include <cbev/training.hpp>

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cbev {

struct CheckResult {
    std::string name;
    bool passed = false;
    double value = 0.0;      // measured quantity (error, count, ...)
    double threshold = 0.0;  // bound it is compared against
    std::string detail;
};

inline std::string format_check(const CheckResult& r) {
    std::ostringstream os;
    os << (r.passed ? "PASS" : "FAIL") << "  " << r.name << "  value=" << std::setprecision(6) << r.value
       << " threshold=" << r.threshold;
    if (!r.detail.empty()) os << "  " << r.detail;
    return os.str();
}

namespace detail {

inline Tensor normal_tensor(const Shape& s, std::mt19937& rng, float stddev = 1.0f) {
    std::normal_distribution<float> n(0.0f, stddev);
    std::vector<float> d(shape_numel(s));
    for (auto& v : d) v = n(rng);
    return Tensor(s, std::move(d));
}

inline GridSpec square_spec(std::size_t l_A, std::size_t l_B, std::size_t n_t, std::size_t n_theta) {
    GridSpec s;
    s.l_A = l_A;
    s.l_B = l_B;
    s.n_t = n_t;
    s.n_theta = n_theta;
    s.search_extent = static_cast<double>(n_t);
    return s;
}

} // namespace detail

// ---- gradient suite ----

/// Finite-difference checks of every differentiable primitive on minimal shapes, the
/// end-to-end stage-2 loss, and the corrupted-adjoint negative control.
inline std::vector<CheckResult> gradient_suite(double tol = 1e-3) {
    std::vector<CheckResult> out;
    auto record = [&](const GradCheckReport& r) {
        out.push_back({"grad " + r.op_name, r.passed, r.max_rel_error, tol, ""});
    };
    using In = std::vector<Tensor>;
    record(grad_check("conv2d", [](const In& x) { return conv2d(x[0], x[1], x[2]); }, {{4, 4, 2}, {3, 3, 2, 2}, {2}},
                      tol, 1));
    record(grad_check("relu", [](const In& x) { return relu(x[0]); }, {{3, 4}}, tol, 2));
    record(grad_check("add", [](const In& x) { return add(x[0], x[1]); }, {{3, 2}, {3, 2}}, tol, 3));
    record(grad_check("mul", [](const In& x) { return mul(x[0], x[1]); }, {{3, 2}, {3, 2}}, tol, 4));
    record(grad_check("scale", [](const In& x) { return scale(x[0], 2.5f); }, {{5}}, tol, 5));
    record(grad_check("softmax_axis", [](const In& x) { return softmax_axis(x[0], 0); }, {{5, 3}}, tol, 6));
    record(grad_check("logsumexp", [](const In& x) { return logsumexp(x[0]); }, {{2, 2}}, tol, 7));
    record(grad_check("l2_normalize_global", [](const In& x) { return l2_normalize_global(x[0]); }, {{3, 3, 2}}, tol,
                      8));
    {
        const Tensor mask = circular_mask(5).to_tensor();
        record(grad_check("l2_normalize_masked", [mask](const In& x) { return l2_normalize_global(x[0], mask); },
                          {{5, 5, 2}}, tol, 9));
        record(grad_check("apply_mask", [mask](const In& x) { return apply_mask(x[0], mask); }, {{5, 5, 2}}, tol, 10));
    }
    {
        std::mt19937 rng(11);
        std::uniform_real_distribution<float> u(0.0f, 4.0f);
        std::vector<float> coords(3 * 3 * 2);
        for (auto& v : coords) v = u(rng);
        const Tensor ct({3, 3, 2}, coords);
        record(grad_check("bilinear_sample", [ct](const In& x) { return bilinear_sample(x[0], ct).values; },
                          {{5, 5, 2}}, tol, 11));
    }
    record(grad_check("mean_pool_linear", [](const In& x) { return linear(mean_pool(x[0]), x[1], x[2]); },
                      {{3, 4, 3}, {3, 5}, {5}}, tol, 12));
    record(grad_check("stack_matmul_nt", [](const In& x) { return matmul_nt(stack({x[0], x[1]}), x[2]); },
                      {{4}, {4}, {3, 4}}, tol, 13));
    record(grad_check("column_attention",
                      [](const In& x) { return column_attention(softmax_axis(add_row_bias(x[0], x[1]), 0), x[2]); },
                      {{4, 3, 2}, {4, 2}, {4, 3, 3}}, tol, 14));
    record(grad_check("wrap_columns", [](const In& x) { return mul(wrap_columns(x[0]), wrap_columns(x[0])); },
                      {{2, 3, 2}}, tol, 15));
    {
        const PoseGrid grid = build_pose_grid(detail::square_spec(6, 3, 4, 2));
        const PoseGrid grid5 = build_pose_grid(detail::square_spec(9, 5, 5, 5));
        const Tensor m3 = circular_mask(3).to_tensor(), m5 = circular_mask(5).to_tensor();
        for (Backend b : {Backend::bruteforce, Backend::fft}) {
            const std::string name = backend_name(b);
            record(grad_check("score_volume_" + name,
                              [&, b](const In& x) { return score_volume(apply_mask(x[0], m3), x[1], grid, b); },
                              {{3, 3, 2}, {6, 6, 2}}, tol, 16));
            record(grad_check("score_volume_rotated_" + name,
                              [&, b](const In& x) { return score_volume(apply_mask(x[0], m5), x[1], grid5, b); },
                              {{5, 5, 2}, {9, 9, 2}}, tol, 17));
            record(grad_check("retrieval_logits_" + name,
                              [&, b](const In& x) {
                                  return pairwise_retrieval_scores({apply_mask(x[0], m3), apply_mask(x[1], m3)},
                                                                   {x[2], x[3]}, grid, 2.0, b);
                              },
                              {{3, 3, 2}, {3, 3, 2}, {6, 6, 2}, {6, 6, 2}}, tol, 18));
        }
    }
    record(grad_check("symmetric_infonce", [](const In& x) { return symmetric_infonce(x[0], 0.5, 0.1); }, {{4, 4}},
                      tol, 19));
    {
        // End-to-end stage-2 loss with respect to encoder parameters on both branches.
        EncoderConfig ec;
        ec.c_in = 2;
        ec.c_hidden = 3;
        ec.c = 2;
        ec.c_p = 3;
        ec.pano_rows = 4;
        ec.depth_bins = 3;
        ec.embed_dim = 3;
        const PoseGrid grid = build_pose_grid(detail::square_spec(6, 3, 4, 2));
        const EncoderParams base = init_encoder_params(ec, 7);
        const std::vector<std::string> names{"pano.attn.w", "pano.row_bias", "pano.value.w", "aerial.conv2.w"};
        std::mt19937 rng(30);
        const std::vector<Tensor> panos{detail::normal_tensor({4, 8, 2}, rng), detail::normal_tensor({4, 8, 2}, rng)};
        const std::vector<Tensor> aerials{detail::normal_tensor({6, 6, 2}, rng),
                                          detail::normal_tensor({6, 6, 2}, rng)};
        auto op = [&](const In& in) {
            EncoderParams p = base;
            for (std::size_t i = 0; i < names.size(); ++i) p.tensors[names[i]] = in[i];
            std::vector<Tensor> b, a;
            for (std::size_t i = 0; i < 2; ++i) {
                b.push_back(encode_panorama(panos[i], p, 3).tensor);
                a.push_back(encode_aerial(aerials[i], p, 1.0, 4.0).tensor);
            }
            return symmetric_infonce(stage2_logits(b, a, grid, 0.5), 1.0, 0.1);
        };
        In inputs;
        for (const auto& n : names) inputs.push_back(base.at(n).detach());
        record(grad_check_inputs("stage2_loss_end_to_end", op, inputs, tol, 5));
    }
    {
        // Negative control: a wrong adjoint must be rejected.
        auto r = grad_check("corrupt_adjoint", [](const In& x) { return mul(corrupt_adjoint(x[0], 1.5f), x[0]); },
                            {{3, 3}}, tol, 20);
        out.push_back({"grad negative control rejected", !r.passed, r.max_rel_error, tol,
                       "corrupted adjoint must exceed the tolerance"});
    }
    return out;
}

// ---- Fourier / brute-force equivalence ----

struct EquivalenceReport {
    std::size_t configs = 0;
    double max_rel_error = 0.0;
    double seconds = 0.0;
    std::vector<std::pair<std::size_t, double>> per_n_theta;  // (n_theta, worst error)
};

/// Worst element-wise relative error |fft - bf| / |bf| over random configurations at
/// l_A=48, l_B=19, n_t=28 with the headings cycling through `n_thetas`.
inline EquivalenceReport fft_equivalence_battery(std::size_t configs = 50, std::size_t c = 8,
                                                 std::vector<std::size_t> n_thetas = {1, 8, 32},
                                                 unsigned seed = 0) {
    EquivalenceReport rep;
    rep.configs = configs;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937 rng(seed);
    const Tensor mask = circular_mask(19).to_tensor();
    for (std::size_t n : n_thetas) rep.per_n_theta.emplace_back(n, 0.0);
    for (std::size_t k = 0; k < configs; ++k) {
        const std::size_t slot = k % n_thetas.size();
        const PoseGrid grid = build_pose_grid(detail::square_spec(48, 19, 28, n_thetas[slot]));
        const Tensor bev = apply_mask(l2_normalize_global(detail::normal_tensor({19, 19, c}, rng)), mask);
        const Tensor aerial = l2_normalize_global(detail::normal_tensor({48, 48, c}, rng));
        // compared before the cast to float
        const MatchLayout l = match_layout(grid, bev.shape(), aerial.shape());
        auto bank = rotation_bank(l.lb, l.ntheta);
        const BevSpectra bs(bev.data().data(), l, *bank);
        const AerialSpectrum as(aerial.data().data(), l.la, l.channels);
        const std::vector<double> a = correlate_volume(bs, as, l);
        const std::vector<double> b = detail::bruteforce_forward(bev.data().data(), aerial.data().data(), l, *bank);
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-30));
        rep.per_n_theta[slot].second = std::max(rep.per_n_theta[slot].second, worst);
        rep.max_rel_error = std::max(rep.max_rel_error, worst);
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// ---- planted pose recovery ----

struct PlantedReport {
    std::size_t trials = 0;
    std::size_t argmax_hits = 0;
    double max_translation_cells = 0.0;
    double max_rotation_deg = 0.0;
};

/// BEV maps cut from the aerial map itself at random grid poses; no learning involved.
inline PlantedReport planted_pose_recovery(std::size_t trials = 100, std::size_t n_theta = 32, std::size_t c = 8,
                                           unsigned seed = 0, double temperature = 0.01) {
    PlantedReport rep;
    rep.trials = trials;
    GridSpec spec;
    spec.n_theta = n_theta;
    const PoseGrid grid = build_pose_grid(spec);
    const Tensor mask = circular_mask(spec.l_B).to_tensor();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
    for (std::size_t t = 0; t < trials; ++t) {
        const World w = generate_world(seed + 1000, t, spec.l_A, c, spec.pixel_size);
        const Tensor aerial = l2_normalize_global(w.field);
        const std::size_t truth = pick(rng);
        const Pose2 pose = grid.poses[truth];
        const Tensor bev = l2_normalize_global(crop_local_map(aerial, pose, spec.l_B, spec.pixel_size), mask);
        const Tensor S = score_volume(bev, aerial, grid, Backend::fft);
        const auto best = static_cast<std::size_t>(std::max_element(S.data().begin(), S.data().end()) -
                                                   S.data().begin());
        rep.argmax_hits += best == truth;
        const PoseEstimate est = estimate_pose(pose_posterior(scale(S, static_cast<float>(1.0 / temperature))), grid);
        rep.max_translation_cells =
            std::max(rep.max_translation_cells, std::hypot(est.x - pose.x, est.y - pose.y) / spec.spacing());
        rep.max_rotation_deg =
            std::max(rep.max_rotation_deg, angle_difference(est.theta, pose.theta) * 180.0 / std::numbers::pi);
    }
    return rep;
}

// ---- score identities ----

inline std::vector<CheckResult> posterior_identities(unsigned seed = 0) {
    std::vector<CheckResult> out;
    const double single = retrieval_score(Tensor({1, 1, 1}, {-3.25f})).item();
    out.push_back({"lse singleton identity", std::abs(single + 3.25) <= 1e-6, std::abs(single + 3.25), 1e-6, ""});
    std::mt19937 rng(seed);
    double shift_dev = 0.0, sum_dev = 0.0, lse_dev = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor S = detail::normal_tensor({28, 28, 32}, rng, 3.0f);
        const float offset = 7.5f * static_cast<float>(trial - 10);
        std::vector<float> shifted(S.data().begin(), S.data().end());
        for (auto& v : shifted) v += offset;
        const Tensor T(S.shape(), shifted);
        const Tensor p = pose_posterior(S), q = pose_posterior(T);
        double total = 0.0;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            shift_dev = std::max(shift_dev, static_cast<double>(std::abs(p[i] - q[i])));
            total += p[i];
        }
        sum_dev = std::max(sum_dev, std::abs(total - 1.0));
        lse_dev = std::max(lse_dev, std::abs(retrieval_score(T).item() - retrieval_score(S).item() - offset) /
                                        std::max(1.0, std::abs(static_cast<double>(offset))));
    }
    out.push_back({"posterior shift invariance", shift_dev <= 1e-6, shift_dev, 1e-6, ""});
    out.push_back({"posterior sums to one", sum_dev <= 1e-6, sum_dev, 1e-6, ""});
    out.push_back({"lse shifts with constant offset", lse_dev <= 1e-6, lse_dev, 1e-6, "relative"});
    return out;
}

/// Configurations violating n_t <= l_A - l_B + 1 must be rejected before any matching.
inline CheckResult fit_rejection() {
    std::size_t rejected = 0, cases = 0;
    for (std::size_t extra : {1, 2, 10}) {
        GridSpec s;
        s.n_t = s.l_A - s.l_B + 1 + extra;
        s.search_extent = static_cast<double>(s.n_t);
        ++cases;
        try {
            build_pose_grid(s);
        } catch (const FitConstraintError&) {
            ++rejected;
        }
        ++cases;
        try {
            PoseGrid g;
            g.spec = s;
            score_volume(Tensor::zeros({s.l_B, s.l_B, 2}), Tensor::zeros({s.l_A, s.l_A, 2}), g, Backend::fft);
        } catch (const FitConstraintError&) {
            ++rejected;
        }
    }
    GridSpec ok;  // 28 = 48 - 19 + 1 is admissible
    bool accepted = true;
    try {
        build_pose_grid(ok);
    } catch (const Error&) {
        accepted = false;
    }
    return {"fit constraint enforced", rejected == cases && accepted, static_cast<double>(rejected),
            static_cast<double>(cases), accepted ? "boundary n_t=28 accepted" : "boundary n_t=28 wrongly rejected"};
}

inline std::vector<CheckResult> geometry_invariants() {
    std::vector<CheckResult> out;
    const PoseGrid grid = build_pose_grid(GridSpec{});
    std::size_t bad = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) bad += grid.pose_to_index(grid.poses[i]) != i;
    out.push_back({"pose index round trip", bad == 0, static_cast<double>(bad), 0.0, "mismatches"});
    std::mt19937 rng(4);
    const Tensor x = detail::normal_tensor({9, 9, 2}, rng);
    const Tensor r = bilinear_sample(bilinear_sample(x, rotation_coords(9, std::numbers::pi / 2)).values,
                                     rotation_coords(9, 3 * std::numbers::pi / 2)).values;
    double dev = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) dev = std::max(dev, static_cast<double>(std::abs(x[i] - r[i])));
    out.push_back({"right-angle rotations compose exactly", dev <= 1e-6, dev, 1e-6, ""});
    const auto mask = circular_mask(19);
    std::size_t asym = 0;
    for (std::size_t a = 0; a < 19; ++a)
        for (std::size_t b = 0; b < 19; ++b) asym += mask(a, b) != mask(b, 18 - a);
    out.push_back({"circular mask rotation symmetric", asym == 0, static_cast<double>(asym), 0.0, ""});
    return out;
}

// ---- benchmark ----

struct BenchRow {
    std::string backend;
    std::size_t n_theta = 0, l_A = 0, l_B = 0, n_t = 0, c = 0, repeats = 0;
    double ms_per_match = 0.0;
};

inline std::vector<BenchRow> bench_matching(std::size_t c = 8, std::size_t repeats = 3,
                                            std::vector<std::size_t> n_thetas = {1, 8, 32}) {
    std::vector<BenchRow> rows;
    std::mt19937 rng(0);
    const Tensor mask = circular_mask(19).to_tensor();
    const Tensor bev = apply_mask(detail::normal_tensor({19, 19, c}, rng), mask);
    const Tensor aerial = detail::normal_tensor({48, 48, c}, rng);
    for (std::size_t n : n_thetas) {
        const PoseGrid grid = build_pose_grid(detail::square_spec(48, 19, 28, n));
        for (Backend b : {Backend::fft, Backend::bruteforce}) {
            score_volume(bev, aerial, grid, b);  // warm caches and plans
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t r = 0; r < repeats; ++r) score_volume(bev, aerial, grid, b);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            rows.push_back({backend_name(b), n, 48, 19, 28, c, repeats, ms / static_cast<double>(repeats)});
        }
    }
    return rows;
}

inline void print_bench(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << "backend\tn_theta\tl_A\tl_B\tn_t\tc\trepeats\tms_per_match\n";
    for (const auto& r : rows)
        os << r.backend << '\t' << r.n_theta << '\t' << r.l_A << '\t' << r.l_B << '\t' << r.n_t << '\t' << r.c << '\t'
           << r.repeats << '\t' << std::fixed << std::setprecision(3) << r.ms_per_match << '\n';
    os.unsetf(std::ios::floatfield);
}

// ---- selftest driver ----

/// Runs every built-in check and prints one line per check. Returns true when all pass.
inline bool run_selftest(std::ostream& os, std::size_t equivalence_configs = 50, std::size_t planted_trials = 100) {
    std::vector<CheckResult> all;
    auto section = [&](const std::string& title, const std::vector<CheckResult>& rs) {
        os << "== " << title << '\n';
        for (const auto& r : rs) {
            os << format_check(r) << '\n';
            all.push_back(r);
        }
    };
    section("gradients", gradient_suite());
    const auto eq = fft_equivalence_battery(equivalence_configs);
    std::vector<CheckResult> eqs;
    for (const auto& [n, e] : eq.per_n_theta)
        eqs.push_back({"fft vs bruteforce n_theta=" + std::to_string(n), e <= 1e-4, e, 1e-4, "max element-wise rel"});
    section("fft equivalence", eqs);
    const auto pl = planted_pose_recovery(planted_trials);
    const double need = std::ceil(0.99 * static_cast<double>(planted_trials));
    section("planted pose",
            {{"argmax recovers planted pose", static_cast<double>(pl.argmax_hits) >= need,
              static_cast<double>(pl.argmax_hits), need, "of " + std::to_string(pl.trials)},
             {"estimate translation error (cells)", pl.max_translation_cells <= 1.0, pl.max_translation_cells, 1.0, ""},
             {"estimate rotation error (deg)", pl.max_rotation_deg <= 360.0 / 32, pl.max_rotation_deg, 360.0 / 32, ""}});
    auto ids = posterior_identities();
    ids.push_back(fit_rejection());
    section("score identities", ids);
    section("geometry", geometry_invariants());
    std::size_t failed = 0;
    for (const auto& r : all) failed += !r.passed;
    os << (failed == 0 ? "selftest passed" : "selftest FAILED") << " (" << all.size() - failed << "/" << all.size()
       << ")\n";
    return failed == 0;
}

} // namespace cbev
