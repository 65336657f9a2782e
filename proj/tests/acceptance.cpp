#include <cbev/pipeline.hpp>
#include <cbev/selftest.hpp>

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace cbev;

namespace {

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << "  " << name << "  " << detail << std::endl;
    failures += !ok;
}

std::string failed_names(const std::vector<CheckResult>& rs) {
    std::string out;
    for (const auto& r : rs)
        if (!r.passed) out += (out.empty() ? "" : ",") + r.name;
    return out.empty() ? "none" : out;
}

void fft_equivalence() {
    const auto rep = fft_equivalence_battery(50, 8, {1, 8, 32});
    std::ostringstream d;
    d << "configs=" << rep.configs << " max_rel=" << rep.max_rel_error << " seconds=" << rep.seconds;
    for (const auto& [n, e] : rep.per_n_theta) d << " n_theta" << n << "=" << e;
    report("fft_equals_bruteforce", rep.max_rel_error <= 1e-4 && rep.seconds < 300.0, d.str());
}

void gradients() {
    const auto rs = gradient_suite(1e-3);
    const bool ok = std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
    const bool control = std::any_of(rs.begin(), rs.end(), [](const CheckResult& r) {
        return r.name.find("negative control") != std::string::npos && r.passed;
    });
    double worst = 0.0;
    for (const auto& r : rs)
        if (r.name.find("negative control") == std::string::npos) worst = std::max(worst, r.value);
    std::ostringstream d;
    d << "checks=" << rs.size() << " worst_rel=" << worst << " control_rejected=" << control
      << " failed=" << failed_names(rs);
    report("gradient_suite", ok && control, d.str());
}

void planted() {
    const auto rep = planted_pose_recovery(100, 32);
    const bool ok = rep.argmax_hits >= 99 && rep.max_translation_cells <= 1.0 && rep.max_rotation_deg <= 360.0 / 32;
    std::ostringstream d;
    d << "hits=" << rep.argmax_hits << "/" << rep.trials << " max_t_err_cells=" << rep.max_translation_cells
      << " max_r_err_deg=" << rep.max_rotation_deg;
    report("planted_pose_recovery", ok, d.str());
}

void identities() {
    const auto rs = posterior_identities();
    const bool ok = std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
    std::ostringstream d;
    for (const auto& r : rs) d << r.name << "=" << r.value << "; ";
    report("lse_and_posterior_identities", ok, d.str());
}

void fit_constraint() {
    const CheckResult r = fit_rejection();
    report("fit_constraint_rejected_before_matching", r.passed, r.detail);
}

void benchmark_and_prior_ablation() {
    bool all_ok = true, prior_ok = true;
    std::ostringstream d, p;
    double seconds = 0.0;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        const BenchmarkRun run = run_benchmark(seed);
        seconds += run.seconds;
        const bool ok = run.stage_two_r_at_1 >= run.stage_one_r_at_1 && run.stage_two_r_at_1 >= 0.90 &&
                        run.median_t_err_cells <= 2.0;
        all_ok = all_ok && ok;
        d << "seed" << seed << "{s1_r1=" << run.stage_one_r_at_1 << " s2_r1=" << run.stage_two_r_at_1
          << " median_t_err_cells=" << run.median_t_err_cells << " s=" << run.seconds << "} ";
        std::cout << "  seed " << seed << " metrics " << run.metrics.dump() << '\n'
                  << "  seed " << seed << " no-prior " << run.metrics_no_prior.dump() << std::endl;
        const auto& np = run.metrics_no_prior;
        prior_ok = prior_ok && np.contains("r_at_1") && np.at("prior_enabled") == false &&
                   run.metrics.at("prior_enabled") == true;
        p << "seed" << seed << "{prior_r1=" << run.metrics.at("r_at_1") << " no_prior_r1=" << np.at("r_at_1") << "} ";
    }
    d << "total_s=" << seconds;
    report("synthetic_benchmark", all_ok, d.str());
    report("ablation_no_prior_reports", prior_ok, p.str());
}

void min_distance_ablation() {
    SynthConfig sc;
    const Dataset ds = build_dataset(sc);
    TrainConfig c1 = benchmark_train_config(Stage::one, 0);
    adopt_geometry(c1, sc);
    c1.epochs = 2;
    c1.min_negative_distance = 50.0;
    const TrainResult one = train(c1, ds, nullptr);
    TrainConfig c2 = benchmark_train_config(Stage::two, 0);
    adopt_geometry(c2, sc);
    c2.epochs = 1;
    c2.min_negative_distance = 50.0;
    const TrainResult two = train(c2, ds, &one.params);
    std::size_t sampled = 0, violations = 0;
    double closest = std::numeric_limits<double>::infinity();
    for (const MinerState* m : {&one.miner, &two.miner}) {
        sampled += m->negatives_sampled;
        violations += m->distance_violations;
        closest = std::min(closest, m->closest_negative);
    }
    std::ostringstream d;
    d << "negatives_sampled=" << sampled << " violations=" << violations << " closest_negative_m=" << closest;
    report("ablation_min_negative_distance_50m", sampled > 0 && violations == 0 && closest >= 50.0, d.str());
}

} // namespace

int main(int argc, char** argv) {
    // --quick skips the trained benchmark
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    try {
        fft_equivalence();
        gradients();
        planted();
        identities();
        fit_constraint();
        min_distance_ablation();
        if (!quick) benchmark_and_prior_ablation();
    } catch (const std::exception& e) {
        std::cout << "FAIL  acceptance aborted  " << e.what() << std::endl;
        return EXIT_FAILURE;
    }
    std::cout << (failures == 0 ? "acceptance passed" : "acceptance FAILED") << std::endl;
    return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
