#pragma once

#include <cbev/encoder.hpp>
#include <cbev/matcher.hpp>
#include <cbev/retrieval.hpp>
#include <cbev/synth.hpp>
#include <cbev/tensor_io.hpp>
#include <cbev/training.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cbev {

struct RetrievalConfig {
    std::size_t k = 100;
    bool prior_enabled = true;
    double prior_weight = 1.0;
    double bev_weight = 1.0;
    Backend backend = Backend::fft;
    double temperature = 0.01;
    bool orientation_known = false;
    GridSpec grid;  // n_theta is forced to 1 when the orientation is known
};

/// Stage-1 index plus the stage-2 aerial maps and their spectra.
struct ReferenceSet {
    EmbeddingIndex index;
    std::vector<Tensor> aerial_maps;          // stage-2 features, empty without a stage-2 model
    std::vector<AerialSpectrum> spectra;
};

/// References used for evaluation: every world in same-area mode, the worlds of test
/// samples in cross-area mode.
inline std::vector<const World*> reference_worlds(const Dataset& ds) {
    std::vector<const World*> out;
    if (ds.config.split == SplitMode::same_area) {
        for (const auto& w : ds.worlds) out.push_back(&w);
        return out;
    }
    std::set<std::string> test;
    for (const auto* s : ds.split("test")) test.insert(s->world_id);
    for (const auto& w : ds.worlds)
        if (test.count(w.id)) out.push_back(&w);
    return out;
}

inline EmbeddingIndex build_index(const std::vector<const World*>& worlds, const EncoderParams& stage_one) {
    if (worlds.empty()) throw DomainError("build_index: no reference worlds");
    const EncoderParams p = detached(stage_one);
    std::vector<Tensor> vecs(worlds.size());
    parallel_for(worlds.size(), [&](std::size_t i) { vecs[i] = embed_reference(worlds[i]->field, p); });
    std::vector<std::string> ids;
    std::vector<Location> locs;
    for (const auto* w : worlds) {
        ids.push_back(w->id);
        locs.push_back(w->origin);
    }
    return EmbeddingIndex(std::move(ids), stack(vecs), std::move(locs));
}

inline constexpr const char* kIndexVectors = "vectors.tnsr";
inline constexpr const char* kIndexManifest = "index.json";

inline void save_index(const std::filesystem::path& dir, const EmbeddingIndex& index) {
    std::filesystem::create_directories(dir);
    write_tensor(dir / kIndexVectors, index.vectors());
    nlohmann::json j;
    j["ids"] = index.ids();
    j["locations"] = nlohmann::json::array();
    for (const auto& l : index.locations()) j["locations"].push_back({l.x, l.y});
    std::ofstream out(dir / kIndexManifest);
    if (!out) throw Error("cannot write index manifest in " + dir.string());
    out << j.dump(2) << '\n';
}

inline EmbeddingIndex load_index(const std::filesystem::path& dir) {
    std::ifstream in(dir / kIndexManifest);
    if (!in) throw FormatError("missing index manifest in " + dir.string());
    try {
        const auto j = nlohmann::json::parse(in);
        std::vector<Location> locs;
        for (const auto& l : j.at("locations")) locs.push_back({l.at(0).get<double>(), l.at(1).get<double>()});
        return EmbeddingIndex(j.at("ids").get<std::vector<std::string>>(), read_tensor(dir / kIndexVectors),
                              std::move(locs));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad index manifest: " + std::string(e.what()));
    }
}

inline GridSpec effective_grid(const RetrievalConfig& cfg) {
    GridSpec g = cfg.grid;
    if (cfg.orientation_known) g.n_theta = 1;
    validate_grid_spec(g);
    return g;
}

inline ReferenceSet build_references(const std::vector<const World*>& worlds, const EncoderParams& stage_one,
                                     const EncoderParams* stage_two, const RetrievalConfig& cfg) {
    ReferenceSet refs{build_index(worlds, stage_one), {}, {}};
    if (!stage_two) return refs;
    const GridSpec g = effective_grid(cfg);
    const EncoderParams p = detached(*stage_two);
    refs.aerial_maps.resize(worlds.size());
    parallel_for(worlds.size(), [&](std::size_t i) {
        refs.aerial_maps[i] = encode_aerial(worlds[i]->field, p, g.pixel_size, g.search_extent).tensor;
    });
    if (cfg.backend == Backend::fft) {
        refs.spectra.resize(worlds.size());
        parallel_for(worlds.size(), [&](std::size_t i) {
            const auto& a = refs.aerial_maps[i];
            refs.spectra[i] = AerialSpectrum(a.data().data(), a.dim(0), a.dim(2));
        });
    }
    return refs;
}

struct QueryOutcome {
    QueryResult result;
    std::optional<PoseEstimate> groundtruth_pose;  // estimate from the true reference's volume
};

/// Stage 1 top-k, stage 2 rescoring and reranking, pose estimates. `truth` selects an extra
/// reference whose volume yields the pose used for metrics.
inline QueryOutcome localize(const Tensor& pano, double known_heading, const std::string& query_id,
                             const ReferenceSet& refs, const EncoderParams& stage_one, const EncoderParams* stage_two,
                             const RetrievalConfig& cfg, const std::optional<std::string>& truth = std::nullopt) {
    const Tensor input = cfg.orientation_known ? north_align(pano, known_heading) : pano;
    const std::size_t k = std::min(cfg.k, refs.index.size());
    CandidateSet cands = topk(refs.index, embed_query(input, stage_one).detach(), k, cfg.temperature, query_id);
    QueryOutcome out;
    if (!stage_two) {
        out.result.candidates = std::move(cands);
        return out;
    }
    const GridSpec g = effective_grid(cfg);
    const PoseGrid grid = build_pose_grid(g);
    const Tensor bev = encode_panorama(input, *stage_two, g.l_B, g.pixel_size).tensor.detach();
    const MatchLayout l = match_layout(grid, bev.shape(), refs.aerial_maps.front().shape());
    auto bank = rotation_bank(l.lb, l.ntheta);
    std::optional<BevSpectra> bs;
    if (cfg.backend == Backend::fft) bs.emplace(bev.data().data(), l, *bank);
    auto volume = [&](std::size_t r) {
        std::vector<double> v = cfg.backend == Backend::fft
                                    ? correlate_volume(*bs, refs.spectra[r], l)
                                    : detail::bruteforce_forward(bev.data().data(), refs.aerial_maps[r].data().data(),
                                                                 l, *bank);
        for (double& x : v) x /= cfg.temperature;
        return Tensor({l.nt, l.nt, l.ntheta}, detail::to_float(v));
    };
    auto pose_from = [&](const Tensor& S) {
        PoseEstimate e = estimate_pose(pose_posterior(S), grid);
        if (cfg.orientation_known) e.theta = normalize_angle(known_heading);
        return e;
    };
    std::vector<double> scores(cands.entries.size());
    std::vector<Tensor> volumes(cands.entries.size());
    for (std::size_t i = 0; i < cands.entries.size(); ++i) {
        volumes[i] = volume(refs.index.position(cands.entries[i].reference_id));
        scores[i] = detail::logsumexp_values(volumes[i].data());
    }
    std::map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < cands.entries.size(); ++i) slot[cands.entries[i].reference_id] = i;
    CandidateSet ranked = rerank(cands, scores, cfg.prior_enabled ? cfg.prior_weight : 0.0, cfg.bev_weight);
    out.result.pose = pose_from(volumes[slot.at(ranked.entries.front().reference_id)]);
    out.result.candidates = std::move(ranked);
    if (truth) {
        auto it = slot.find(*truth);
        out.groundtruth_pose = pose_from(it != slot.end() ? volumes[it->second] : volume(refs.index.position(*truth)));
    }
    return out;
}

struct EvalReport {
    std::vector<QueryResult> results;
    std::vector<CandidateSet> stage_one;  // candidates before reranking
    std::map<std::size_t, double> recall;
    std::map<std::size_t, double> recall_stage_one;
    std::optional<PoseMetrics> pose;
    nlohmann::json metrics;
};

/// Localizes every test sample of `ds`.
inline EvalReport evaluate(const Dataset& ds, const EncoderParams& stage_one, const EncoderParams* stage_two,
                           RetrievalConfig cfg, std::ostream* warnings = &std::cerr) {
    const auto worlds = reference_worlds(ds);
    if (cfg.k > worlds.size()) {
        if (warnings)
            *warnings << "warning: k = " << cfg.k << " exceeds the " << worlds.size()
                      << " references; clamping to " << worlds.size() << '\n';
        cfg.k = worlds.size();
    }
    if (cfg.k < 1) throw DomainError("k must be at least 1");
    const ReferenceSet refs = build_references(worlds, stage_one, stage_two, cfg);
    const auto queries = ds.split("test");
    if (queries.empty()) throw DomainError("dataset has no test samples");
    const EncoderParams p1 = detached(stage_one);
    std::optional<EncoderParams> p2;
    if (stage_two) p2 = detached(*stage_two);
    std::vector<QueryOutcome> outcomes(queries.size());
    std::vector<CandidateSet> first(queries.size());
    parallel_for(queries.size(), [&](std::size_t q) {
        const auto* s = queries[q];
        outcomes[q] = localize(s->pano, s->pose.theta, s->id, refs, p1, p2 ? &*p2 : nullptr, cfg, s->world_id);
        const Tensor input = cfg.orientation_known ? north_align(s->pano, s->pose.theta) : s->pano;
        first[q] = topk(refs.index, embed_query(input, p1).detach(), cfg.k, cfg.temperature, s->id);
    });
    EvalReport rep;
    std::map<std::string, std::string> gt;
    std::vector<Pose2> est, truth;
    std::vector<CandidateSet> final_sets;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        gt[queries[q]->id] = queries[q]->world_id;
        final_sets.push_back(outcomes[q].result.candidates);
        rep.results.push_back(outcomes[q].result);
        if (outcomes[q].groundtruth_pose) {
            const auto& e = *outcomes[q].groundtruth_pose;
            est.emplace_back(e.x, e.y, e.theta);
            truth.push_back(queries[q]->pose);
        }
    }
    rep.stage_one = first;
    const std::vector<std::size_t> ks{1, 5, 10};
    rep.recall = recall_at_k(final_sets, gt, ks);
    rep.recall_stage_one = recall_at_k(first, gt, ks);
    if (!est.empty()) rep.pose = pose_metrics(est, truth);
    rep.metrics = metrics_document(rep.recall, rep.pose.value_or(PoseMetrics{}));
    rep.metrics["stage1_r_at_1"] = rep.recall_stage_one.at(1);
    rep.metrics["n_queries"] = queries.size();
    rep.metrics["n_references"] = worlds.size();
    rep.metrics["k"] = cfg.k;
    rep.metrics["prior_enabled"] = cfg.prior_enabled;
    return rep;
}

// ---- trained models on disk ----

inline constexpr const char* kTrainConfigName = "train_config.json";
inline constexpr const char* kTrainLogName = "train_log.jsonl";

struct TrainedModel {
    EncoderParams params;
    TrainConfig config;
};

inline void save_model(const std::filesystem::path& dir, const EncoderParams& params, const TrainConfig& cfg,
                       const std::vector<LossReport>& log) {
    save_encoder(dir, params);
    std::ofstream c(dir / kTrainConfigName);
    if (!c) throw Error("cannot write " + (dir / kTrainConfigName).string());
    c << to_json(cfg).dump(2) << '\n';
    std::ofstream l(dir / kTrainLogName);
    for (const auto& r : log) l << to_json(r).dump() << '\n';
    if (!c || !l) throw Error("failed writing model files in " + dir.string());
}

inline TrainedModel load_model(const std::filesystem::path& dir) {
    std::ifstream c(dir / kTrainConfigName);
    if (!c) throw FormatError("missing " + std::string(kTrainConfigName) + " in " + dir.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(c);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad training config in " + dir.string() + ": " + e.what());
    }
    return {load_encoder(dir), train_config_from_json(j)};
}

inline double default_learning_rate(Stage s) { return s == Stage::one ? 1e-3 : 1e-4; }

/// Copies the dataset geometry into a training config.
inline void adopt_geometry(TrainConfig& t, const SynthConfig& s) {
    t.l_A = s.world_size;
    t.l_B = s.l_B;
    t.n_t = s.n_t;
    t.search_extent = s.search_extent;
    t.pixel_size = s.pixel_size;
}

/// Retrieval settings matching a stage-2 training config.
inline RetrievalConfig retrieval_config_for(const TrainConfig& t) {
    RetrievalConfig r;
    r.grid.n_t = t.n_t;
    r.grid.n_theta = t.n_theta;
    r.grid.l_A = t.l_A;
    r.grid.l_B = t.l_B;
    r.grid.search_extent = t.search_extent;
    r.grid.pixel_size = t.pixel_size;
    r.orientation_known = t.orientation_known;
    r.temperature = t.temperature;
    return r;
}

// ---- synthetic benchmark ----

/// Training schedule of the synthetic benchmark (64 worlds, orientation unknown).
inline TrainConfig benchmark_train_config(Stage stage, std::uint64_t seed) {
    TrainConfig t;
    t.stage = stage;
    t.seed = seed;
    t.c = 16;
    t.learning_rate = 3e-3;
    t.epochs = stage == Stage::one ? 10 : 40;
    return t;
}

struct BenchmarkRun {
    std::uint64_t seed = 0;
    double stage_one_r_at_1 = 0.0;
    double stage_two_r_at_1 = 0.0;
    double median_t_err_cells = 0.0;
    double seconds = 0.0;
    nlohmann::json metrics;
    nlohmann::json metrics_no_prior;
};

inline BenchmarkRun run_benchmark(std::uint64_t seed, std::ostream* progress = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    SynthConfig sc;
    sc.seed = seed;
    const Dataset ds = build_dataset(sc);
    auto log = [&](const char* stage) {
        return [progress, stage, seed](const LossReport& r) {
            if (progress)
                *progress << "seed " << seed << " stage " << stage << " epoch " << r.epoch << " loss " << r.loss
                          << " acc " << r.accuracy_in_batch << '\n';
        };
    };
    TrainConfig c1 = benchmark_train_config(Stage::one, seed);
    adopt_geometry(c1, sc);
    const TrainResult one = train(c1, ds, nullptr, log("one"));
    TrainConfig c2 = benchmark_train_config(Stage::two, seed);
    adopt_geometry(c2, sc);
    const TrainResult two = train(c2, ds, &one.params, log("two"));
    RetrievalConfig rc = retrieval_config_for(c2);
    const EvalReport rep = evaluate(ds, one.params, &two.params, rc, nullptr);
    rc.prior_enabled = false;
    const EvalReport bare = evaluate(ds, one.params, &two.params, rc, nullptr);
    BenchmarkRun run;
    run.seed = seed;
    run.stage_one_r_at_1 = rep.recall_stage_one.at(1);
    run.stage_two_r_at_1 = rep.recall.at(1);
    run.median_t_err_cells = rep.pose->median_t_err_m / rc.grid.spacing();
    run.metrics = rep.metrics;
    run.metrics_no_prior = bare.metrics;
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

inline void write_metrics(const std::filesystem::path& path, const nlohmann::json& metrics) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write metrics file " + path.string());
    out << metrics.dump(2) << '\n';
}

} // namespace cbev
