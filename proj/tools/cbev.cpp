#include <cbev/pipeline.hpp>
#include <cbev/selftest.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace cbev;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitSelftest = 3;

nlohmann::json read_json_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw Error("cannot read config file " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad config file " + path + ": " + e.what());
    }
}

// Section of a config file; the whole document when the section is absent.
nlohmann::json section(const nlohmann::json& doc, const char* name) {
    return doc.contains(name) ? doc.at(name) : doc;
}

template <class T>
void override_if(const CLI::Option* opt, T& dst, const T& src) {
    if (opt->count() > 0) dst = src;
}

void require_dir(const std::string& path, const char* what) {
    if (!fs::is_directory(path)) throw Error(std::string(what) + " not found: " + path);
}

void ensure_parent(const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-view retrieval with bird's-eye-view matching"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; command-line flags override it");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    std::string synth_out;
    SynthConfig sflags;
    std::string split_name = "same_area";
    synth->add_option("--out", synth_out, "Output directory")->required();
    auto* o_seed = synth->add_option("--seed", sflags.seed, "Generation seed");
    auto* o_worlds = synth->add_option("--worlds", sflags.n_worlds, "Number of worlds");
    auto* o_spw = synth->add_option("--samples-per-world", sflags.samples_per_world, "Samples per world");
    auto* o_split = synth->add_option("--split", split_name, "same_area or cross_area");
    auto* o_noise = synth->add_option("--noise-std", sflags.noise_std, "Panorama noise std");
    auto* o_jitter = synth->add_option("--pose-jitter", sflags.pose_jitter, "Pose offset from grid, in cells");
    auto* o_wsize = synth->add_option("--world-size", sflags.world_size, "World side in cells (l_A)");
    auto* o_cin = synth->add_option("--c-in", sflags.c_in, "Input channels");
    auto* o_ext = synth->add_option("--search-extent", sflags.search_extent, "Search region side in meters");
    auto* o_snt = synth->add_option("--n-t", sflags.n_t, "Translation cells");
    auto* o_sntheta = synth->add_option("--n-theta", sflags.n_theta, "Heading steps");
    auto* o_slb = synth->add_option("--l-b", sflags.l_B, "BEV side in cells");
    auto* o_rows = synth->add_option("--pano-rows", sflags.pano_rows, "Panorama rows");
    auto* o_cols = synth->add_option("--pano-cols", sflags.pano_cols, "Panorama columns");

    // train
    auto* trn = app.add_subcommand("train", "Train one stage");
    std::string train_data, train_out, stage_one_dir, stage_name = "one";
    TrainConfig tflags;
    trn->add_option("--data", train_data, "Dataset directory")->required();
    trn->add_option("--out", train_out, "Checkpoint directory")->required();
    auto* o_stage = trn->add_option("--stage", stage_name, "one or two");
    trn->add_option("--stage-one", stage_one_dir, "Stage-one checkpoint (required for stage two)");
    auto* o_epochs = trn->add_option("--epochs", tflags.epochs, "Epochs");
    auto* o_lr = trn->add_option("--lr", tflags.learning_rate, "Base learning rate");
    auto* o_batch = trn->add_option("--batch-size", tflags.batch_size, "Pairs per batch");
    auto* o_tseed = trn->add_option("--seed", tflags.seed, "Training seed");
    auto* o_c = trn->add_option("--c", tflags.c, "Feature channels");
    auto* o_tau = trn->add_option("--temperature", tflags.temperature, "Contrastive temperature");
    auto* o_mind = trn->add_option("--min-negative-distance", tflags.min_negative_distance,
                                   "Negatives closer than this many meters are excluded");
    auto* o_refresh = trn->add_option("--mining-refresh-epochs", tflags.mining_refresh_epochs, "Mining refresh period");
    auto* o_tntheta = trn->add_option("--n-theta", tflags.n_theta, "Heading hypotheses");
    bool train_known = false;
    auto* o_known = trn->add_flag("--orientation-known", train_known, "Train with north-aligned panoramas");

    // index
    auto* idx = app.add_subcommand("index", "Build the stage-one embedding index");
    std::string index_data, index_model, index_out;
    idx->add_option("--data", index_data, "Dataset directory")->required();
    idx->add_option("--stage-one", index_model, "Stage-one checkpoint")->required();
    idx->add_option("--out", index_out, "Index directory")->required();

    // retrieve / eval share their options
    struct QueryOptions {
        std::string data, stage_one, stage_two, index, results, metrics, backend = "fft";
        std::size_t k = 100;
        bool no_prior = false, unknown = false, known = false;
    };
    QueryOptions ret, ev;
    auto add_query_options = [](CLI::App* sub, QueryOptions& q, bool metrics) {
        sub->add_option("--data", q.data, "Dataset directory")->required();
        sub->add_option("--stage-one", q.stage_one, "Stage-one checkpoint")->required();
        sub->add_option("--stage-two", q.stage_two, "Stage-two checkpoint");
        sub->add_option("--index", q.index, "Prebuilt index directory");
        sub->add_option("--results", q.results, "Results file (one JSON record per line)")->required();
        if (metrics) sub->add_option("--metrics", q.metrics, "Metrics file")->required();
        sub->add_option("--k", q.k, "Candidates kept from stage one")->check(CLI::PositiveNumber);
        sub->add_flag("--no-prior", q.no_prior, "Rerank with stage-two scores only");
        sub->add_option("--backend", q.backend, "fft or bruteforce")->check(CLI::IsMember({"fft", "bruteforce"}));
        auto* u = sub->add_flag("--orientation-unknown", q.unknown, "Search all headings");
        auto* k = sub->add_flag("--orientation-known", q.known, "Use the groundtruth heading");
        u->excludes(k);
    };
    auto* rtv = app.add_subcommand("retrieve", "Localize test queries and write results");
    add_query_options(rtv, ret, false);
    auto* evl = app.add_subcommand("eval", "Localize test queries, write results and metrics");
    add_query_options(evl, ev, true);

    // selftest
    auto* st = app.add_subcommand("selftest", "Gradient, equivalence, planted-pose and geometry checks");
    std::size_t st_configs = 50, st_trials = 100;
    st->add_option("--configs", st_configs, "Fourier/brute-force configurations");
    st->add_option("--trials", st_trials, "Planted-pose trials");

    // bench
    auto* bn = app.add_subcommand("bench", "Time one matching operation per backend");
    std::size_t bench_c = 8, bench_repeats = 3;
    bn->add_option("--c", bench_c, "Channels");
    bn->add_option("--repeats", bench_repeats, "Repetitions per row");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        const nlohmann::json config = read_json_file(config_path);

        if (*synth) {
            SynthConfig cfg = synth_config_from_json(section(config, "synth"));
            override_if(o_seed, cfg.seed, sflags.seed);
            override_if(o_worlds, cfg.n_worlds, sflags.n_worlds);
            override_if(o_spw, cfg.samples_per_world, sflags.samples_per_world);
            if (o_split->count()) cfg.split = parse_split_mode(split_name);
            override_if(o_noise, cfg.noise_std, sflags.noise_std);
            override_if(o_jitter, cfg.pose_jitter, sflags.pose_jitter);
            override_if(o_wsize, cfg.world_size, sflags.world_size);
            override_if(o_cin, cfg.c_in, sflags.c_in);
            override_if(o_ext, cfg.search_extent, sflags.search_extent);
            override_if(o_snt, cfg.n_t, sflags.n_t);
            override_if(o_sntheta, cfg.n_theta, sflags.n_theta);
            override_if(o_slb, cfg.l_B, sflags.l_B);
            override_if(o_rows, cfg.pano_rows, sflags.pano_rows);
            override_if(o_cols, cfg.pano_cols, sflags.pano_cols);
            const Dataset ds = build_dataset(cfg);
            write_dataset(synth_out, ds);
            std::cout << "wrote " << ds.worlds.size() << " worlds and " << ds.samples.size() << " samples to "
                      << synth_out << '\n';
            return kExitOk;
        }

        if (*trn) {
            require_dir(train_data, "dataset");
            const Dataset ds = load_dataset(train_data);
            const nlohmann::json tj = section(config, "train");
            TrainConfig cfg = train_config_from_json(tj);
            adopt_geometry(cfg, ds.config);
            cfg.n_theta = ds.config.n_theta;
            if (o_stage->count()) cfg.stage = parse_stage(stage_name);
            if (!tj.contains("learning_rate")) cfg.learning_rate = default_learning_rate(cfg.stage);
            override_if(o_epochs, cfg.epochs, tflags.epochs);
            override_if(o_lr, cfg.learning_rate, tflags.learning_rate);
            override_if(o_batch, cfg.batch_size, tflags.batch_size);
            override_if(o_tseed, cfg.seed, tflags.seed);
            override_if(o_c, cfg.c, tflags.c);
            override_if(o_tau, cfg.temperature, tflags.temperature);
            override_if(o_mind, cfg.min_negative_distance, tflags.min_negative_distance);
            override_if(o_refresh, cfg.mining_refresh_epochs, tflags.mining_refresh_epochs);
            override_if(o_tntheta, cfg.n_theta, tflags.n_theta);
            if (o_known->count()) cfg.orientation_known = true;
            std::optional<TrainedModel> one;
            if (cfg.stage == Stage::two) {
                if (stage_one_dir.empty())
                    throw DomainError("stage two needs a stage-one checkpoint for hard-negative mining (--stage-one)");
                require_dir(stage_one_dir, "stage-one checkpoint");
                one = load_model(stage_one_dir);
            }
            fs::create_directories(train_out);
            std::ofstream log(fs::path(train_out) / kTrainLogName);
            auto result = train(cfg, ds, one ? &one->params : nullptr, [&](const LossReport& r) {
                log << to_json(r).dump() << '\n' << std::flush;
                std::cout << "epoch " << r.epoch << " loss " << r.loss << " in_batch_accuracy " << r.accuracy_in_batch
                          << " lr " << r.lr << '\n';
            });
            log.close();
            save_model(train_out, result.params, cfg, result.log);
            std::cout << "negatives sampled " << result.miner.negatives_sampled << ", distance violations "
                      << result.miner.distance_violations << '\n';
            return kExitOk;
        }

        if (*idx) {
            require_dir(index_data, "dataset");
            require_dir(index_model, "stage-one checkpoint");
            const Dataset ds = load_dataset(index_data);
            const TrainedModel one = load_model(index_model);
            const EmbeddingIndex index = build_index(reference_worlds(ds), one.params);
            save_index(index_out, index);
            std::cout << "indexed " << index.size() << " references in " << index_out << '\n';
            return kExitOk;
        }

        if (*rtv || *evl) {
            const QueryOptions& q = *rtv ? ret : ev;
            require_dir(q.data, "dataset");
            require_dir(q.stage_one, "stage-one checkpoint");
            const Dataset ds = load_dataset(q.data);
            const TrainedModel one = load_model(q.stage_one);
            std::optional<TrainedModel> two;
            if (!q.stage_two.empty()) {
                require_dir(q.stage_two, "stage-two checkpoint");
                two = load_model(q.stage_two);
            }
            RetrievalConfig rc = retrieval_config_for(two ? two->config : one.config);
            rc.k = q.k;
            rc.prior_enabled = !q.no_prior;
            rc.backend = parse_backend(q.backend);
            if (q.unknown) rc.orientation_known = false;
            if (q.known) rc.orientation_known = true;
            if (!q.index.empty()) {
                const EmbeddingIndex stored = load_index(q.index);
                const auto worlds = reference_worlds(ds);
                if (stored.size() != worlds.size())
                    throw Error("index has " + std::to_string(stored.size()) + " references, dataset has " +
                                std::to_string(worlds.size()));
            }
            const EvalReport rep = evaluate(ds, one.params, two ? &two->params : nullptr, rc, &std::cerr);
            ensure_parent(q.results);
            write_results(q.results, rep.results);
            if (*evl) {
                ensure_parent(q.metrics);
                write_metrics(q.metrics, rep.metrics);
            }
            std::cout << rep.metrics.dump(2) << '\n';
            return kExitOk;
        }

        if (*st) return run_selftest(std::cout, st_configs, st_trials) ? kExitOk : kExitSelftest;

        if (*bn) {
            print_bench(std::cout, bench_matching(bench_c, bench_repeats));
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
