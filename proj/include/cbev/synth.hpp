#pragma once

// Synthetic worlds and panorama observations with exact groundtruth poses.

#include <cbev/geometry.hpp>
#include <cbev/ops.hpp>
#include <cbev/parallel.hpp>
#include <cbev/retrieval.hpp>
#include <cbev/tensor_io.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace cbev {

enum class SplitMode { same_area, cross_area };

inline SplitMode parse_split_mode(const std::string& s) {
    if (s == "same_area" || s == "same-area") return SplitMode::same_area;
    if (s == "cross_area" || s == "cross-area") return SplitMode::cross_area;
    throw DomainError("unknown split mode '" + s + "' (expected same_area or cross_area)");
}

inline const char* split_mode_name(SplitMode m) { return m == SplitMode::same_area ? "same_area" : "cross_area"; }

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t n_worlds = 64;
    std::size_t samples_per_world = 2;
    std::size_t world_size = 48;  // cells; equals l_A
    std::size_t c_in = 4;
    double pixel_size = 1.0;
    double search_extent = 28.0;  // meters
    std::size_t n_t = 28;         // translation cells the poses are drawn around
    std::size_t n_theta = 32;     // heading steps the poses are drawn around
    double pose_jitter = 0.0;     // uniform offset from the grid, in cells and heading steps
    std::size_t l_B = 19;         // BEV footprint diameter in cells
    std::size_t pano_rows = 16;
    std::size_t pano_cols = 64;
    double noise_std = 0.05;
    SplitMode split = SplitMode::same_area;
};

struct World {
    std::string id;
    Tensor field;  // [size, size, c_in]
    double pixel_size = 1.0;
    Location origin;
};

struct SyntheticSample {
    std::string id;
    std::string world_id;
    Pose2 pose;  // relative to the world center
    Tensor pano; // [h_p, w_p, c_in]
    std::string split;
};

struct Dataset {
    SynthConfig config;
    std::vector<World> worlds;
    std::vector<SyntheticSample> samples;

    const World& world(const std::string& id) const {
        for (const auto& w : worlds)
            if (w.id == id) return w;
        throw DomainError("dataset has no world '" + id + "'");
    }

    std::vector<const SyntheticSample*> split(const std::string& name) const {
        std::vector<const SyntheticSample*> out;
        for (const auto& s : samples)
            if (s.split == name) out.push_back(&s);
        return out;
    }
};

namespace detail {

inline std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t salt, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

inline std::string padded_id(char prefix, std::size_t i, int width) {
    std::string digits = std::to_string(i);
    if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
    return std::string(1, prefix) + digits;
}

} // namespace detail

/// Feature field built from localized Gaussian blobs and soft oriented edges, standardized per channel
/// and then scaled to unit norm per cell.
inline World generate_world(std::uint64_t seed, std::size_t id, std::size_t size, std::size_t c_in,
                            double pixel_size = 1.0) {
    if (size < 2 || c_in < 1) throw DimensionError("generate_world: need size >= 2 and c_in >= 1");
    auto rng = detail::item_rng(seed, 0x574f524cu, id);
    std::uniform_real_distribution<double> pos(0.0, static_cast<double>(size - 1));
    std::uniform_real_distribution<double> sigma(1.0, 2.0);
    std::uniform_real_distribution<double> angle(0.0, kTwoPi);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const std::size_t blobs = std::max<std::size_t>(4, size * size / 12);
    std::vector<double> f(size * size * c_in, 0.0);
    for (std::size_t ch = 0; ch < c_in; ++ch) {
        for (std::size_t b = 0; b < blobs; ++b) {
            const double cy = pos(rng), cx = pos(rng), s = sigma(rng), a = unit(rng);
            const double inv = 1.0 / (2.0 * s * s);
            for (std::size_t r = 0; r < size; ++r)
                for (std::size_t c = 0; c < size; ++c) {
                    const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
                    f[(r * size + c) * c_in + ch] += a * std::exp(-(dx * dx + dy * dy) * inv);
                }
        }
        for (int e = 0; e < 2; ++e) {
            const double phi = angle(rng), off = pos(rng) - 0.5 * static_cast<double>(size - 1), a = 0.5 * unit(rng);
            const double nx = std::cos(phi), ny = std::sin(phi);
            const double c0 = 0.5 * static_cast<double>(size - 1);
            for (std::size_t r = 0; r < size; ++r)
                for (std::size_t c = 0; c < size; ++c) {
                    const double t = (static_cast<double>(c) - c0) * nx + (static_cast<double>(r) - c0) * ny - off;
                    f[(r * size + c) * c_in + ch] += a * std::tanh(t / 1.5);
                }
        }
        double mean = 0.0, sq = 0.0;
        const double n = static_cast<double>(size * size);
        for (std::size_t i = 0; i < size * size; ++i) mean += f[i * c_in + ch];
        mean /= n;
        for (std::size_t i = 0; i < size * size; ++i) sq += (f[i * c_in + ch] - mean) * (f[i * c_in + ch] - mean);
        const double sd = std::sqrt(sq / n);
        for (std::size_t i = 0; i < size * size; ++i) f[i * c_in + ch] = (f[i * c_in + ch] - mean) / sd;
    }
    // Unit feature norm per cell keeps local energy flat across the map.
    for (std::size_t i = 0; i < size * size; ++i) {
        double q = 0;
        for (std::size_t ch = 0; ch < c_in; ++ch) q += f[i * c_in + ch] * f[i * c_in + ch];
        q = std::sqrt(q);
        if (q < 1e-12) q = 1.0;
        for (std::size_t ch = 0; ch < c_in; ++ch) f[i * c_in + ch] /= q;
    }
    return {detail::padded_id('w', id, 4), Tensor({size, size, c_in}, std::vector<float>(f.begin(), f.end())),
            pixel_size, {}};
}

/// Panorama of the world seen from `pose`: column j looks along bearing theta + j * 360 / w_p,
/// row i averages the field over the distance band (i, i + 1] * radius / h_p.
inline Tensor render_panorama(const World& world, const Pose2& pose, std::size_t h_p, std::size_t w_p, double radius,
                              double noise_std, std::uint64_t noise_seed) {
    const std::size_t size = world.field.dim(0), c_in = world.field.dim(2);
    const double half = map_center(size) * world.pixel_size;
    if (std::abs(pose.x) + radius > half + 1e-9 || std::abs(pose.y) + radius > half + 1e-9)
        throw DomainError("render_observation: pose too close to the world border");
    if (h_p < 1 || w_p < 4) throw DimensionError("render_observation: need h_p >= 1 and w_p >= 4");
    constexpr int kSub = 3;
    const double c0 = map_center(size);
    std::vector<float> out(h_p * w_p * c_in);
    const auto field = world.field.data();
    for (std::size_t j = 0; j < w_p; ++j) {
        const double bearing = pose.theta + kTwoPi * static_cast<double>(j) / static_cast<double>(w_p);
        const double sb = std::sin(bearing), cb = std::cos(bearing);
        for (std::size_t i = 0; i < h_p; ++i) {
            std::vector<double> acc(c_in, 0.0);
            for (int s = 0; s < kSub; ++s) {
                const double dist = (static_cast<double>(i) + (s + 0.5) / kSub) * radius / static_cast<double>(h_p);
                const double east = pose.x + dist * sb, north = pose.y + dist * cb;
                const auto taps =
                    bilinear_taps(c0 + east / world.pixel_size, c0 - north / world.pixel_size, size, size);
                if (!taps.valid) throw DomainError("render_observation: ray left the world");
                for (int t = 0; t < 4; ++t)
                    for (std::size_t ch = 0; ch < c_in; ++ch)
                        acc[ch] += static_cast<double>(taps.weight[t]) * field[taps.index[t] * c_in + ch];
            }
            for (std::size_t ch = 0; ch < c_in; ++ch)
                out[(i * w_p + j) * c_in + ch] = static_cast<float>(acc[ch] / kSub);
        }
    }
    if (noise_std > 0) {
        auto rng = detail::item_rng(noise_seed, 0x4e4f4953u, 0);
        std::normal_distribution<double> n(0.0, noise_std);
        for (auto& v : out) v = static_cast<float>(v + n(rng));
    }
    return Tensor({h_p, w_p, c_in}, std::move(out));
}

inline SyntheticSample render_observation(const World& world, const Pose2& pose, std::size_t h_p, std::size_t w_p,
                                          double noise_std, double radius, std::uint64_t noise_seed = 0) {
    return {"", world.id, pose, render_panorama(world, pose, h_p, w_p, radius, noise_std, noise_seed), ""};
}

/// Groundtruth pose at a grid hypothesis, offset by up to pose_jitter cells and heading steps.
inline Pose2 sample_pose(std::mt19937_64& rng, const SynthConfig& cfg) {
    std::uniform_int_distribution<std::size_t> cell(0, cfg.n_t - 1), step(0, cfg.n_theta - 1);
    std::uniform_real_distribution<double> jitter(-cfg.pose_jitter, cfg.pose_jitter);
    const double spacing = cfg.search_extent / static_cast<double>(cfg.n_t);
    const std::size_t tx = cell(rng), ty = cell(rng), k = step(rng);
    const double x = -cfg.search_extent / 2 + (static_cast<double>(tx) + 0.5 + jitter(rng)) * spacing;
    const double y = cfg.search_extent / 2 - (static_cast<double>(ty) + 0.5 + jitter(rng)) * spacing;
    const double theta = (static_cast<double>(k) + jitter(rng)) * kTwoPi / static_cast<double>(cfg.n_theta);
    return Pose2(x, y, theta);
}

inline double footprint_radius(const SynthConfig& cfg) { return 0.5 * static_cast<double>(cfg.l_B) * cfg.pixel_size; }

/// Worlds tile a square area with one search region each; samples get their split from the mode.
inline Dataset build_dataset(const SynthConfig& cfg) {
    if (cfg.n_worlds < 1 || cfg.samples_per_world < 1) throw DomainError("build_dataset: need worlds and samples");
    GridSpec spec;
    spec.n_t = cfg.n_t;
    spec.n_theta = cfg.n_theta;
    spec.search_extent = cfg.search_extent;
    spec.pixel_size = cfg.pixel_size;
    spec.l_A = cfg.world_size;
    spec.l_B = cfg.l_B;
    validate_grid_spec(spec);
    Dataset ds{cfg, std::vector<World>(cfg.n_worlds), std::vector<SyntheticSample>(cfg.n_worlds * cfg.samples_per_world)};
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.n_worlds))));
    parallel_for(cfg.n_worlds, [&](std::size_t w) {
        World world = generate_world(cfg.seed, w, cfg.world_size, cfg.c_in, cfg.pixel_size);
        world.origin = {static_cast<double>(w % cols) * cfg.search_extent,
                        static_cast<double>(w / cols) * cfg.search_extent};
        const bool test_world = cfg.split == SplitMode::cross_area && w % 2 == 1;
        for (std::size_t s = 0; s < cfg.samples_per_world; ++s) {
            const std::size_t idx = w * cfg.samples_per_world + s;
            auto rng = detail::item_rng(cfg.seed, 0x504f5345u, idx);
            SyntheticSample smp = render_observation(world, sample_pose(rng, cfg), cfg.pano_rows, cfg.pano_cols,
                                                     cfg.noise_std, footprint_radius(cfg), cfg.seed * 1000003u + idx);
            smp.id = detail::padded_id('s', idx, 5);
            if (cfg.split == SplitMode::cross_area)
                smp.split = test_world ? "test" : "train";
            else
                smp.split = s % 2 == 0 ? "train" : "test";
            ds.samples[idx] = std::move(smp);
        }
        ds.worlds[w] = std::move(world);
    });
    return ds;
}

inline constexpr const char* kManifestName = "manifest.json";

inline nlohmann::json synth_config_json(const SynthConfig& c) {
    return {{"seed", c.seed},           {"n_worlds", c.n_worlds},   {"samples_per_world", c.samples_per_world},
            {"world_size", c.world_size}, {"c_in", c.c_in},         {"pixel_size", c.pixel_size},
            {"search_extent", c.search_extent}, {"n_t", c.n_t},     {"n_theta", c.n_theta},
            {"l_B", c.l_B},             {"pano_rows", c.pano_rows}, {"pano_cols", c.pano_cols},
            {"noise_std", c.noise_std}, {"pose_jitter", c.pose_jitter}, {"split", split_mode_name(c.split)}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.seed = j.value("seed", c.seed);
    c.n_worlds = j.value("n_worlds", c.n_worlds);
    c.samples_per_world = j.value("samples_per_world", c.samples_per_world);
    c.world_size = j.value("world_size", c.world_size);
    c.c_in = j.value("c_in", c.c_in);
    c.pixel_size = j.value("pixel_size", c.pixel_size);
    c.search_extent = j.value("search_extent", c.search_extent);
    c.n_t = j.value("n_t", c.n_t);
    c.n_theta = j.value("n_theta", c.n_theta);
    c.l_B = j.value("l_B", c.l_B);
    c.pano_rows = j.value("pano_rows", c.pano_rows);
    c.pano_cols = j.value("pano_cols", c.pano_cols);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.pose_jitter = j.value("pose_jitter", c.pose_jitter);
    c.split = parse_split_mode(j.value("split", std::string(split_mode_name(c.split))));
    return c;
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "worlds");
    fs::create_directories(root / "samples");
    nlohmann::json m;
    m["config"] = synth_config_json(ds.config);
    m["worlds"] = nlohmann::json::array();
    for (const auto& w : ds.worlds) {
        const std::string file = "worlds/" + w.id + ".tnsr";
        write_tensor(root / file, w.field);
        m["worlds"].push_back(
            {{"id", w.id}, {"file", file}, {"pixel_size", w.pixel_size}, {"origin", {w.origin.x, w.origin.y}}});
    }
    m["samples"] = nlohmann::json::array();
    for (const auto& s : ds.samples) {
        const std::string file = "samples/" + s.id + ".tnsr";
        write_tensor(root / file, s.pano);
        m["samples"].push_back({{"id", s.id},
                                {"world_id", s.world_id},
                                {"file", file},
                                {"pose", {{"x", s.pose.x}, {"y", s.pose.y}, {"theta", s.pose.theta}}},
                                {"split", s.split}});
    }
    std::ofstream out(root / kManifestName);
    if (!out) throw Error("cannot write " + (root / kManifestName).string());
    out << m.dump(2) << '\n';
    if (!out) throw Error("failed writing " + (root / kManifestName).string());
}

/// Reads a manifest plus its tensor files. Any producer of CBEVTNSR feature maps can
/// supply data through this layout.
inline Dataset load_dataset(const std::filesystem::path& root) {
    std::ifstream in(root / kManifestName);
    if (!in) throw FormatError("no " + std::string(kManifestName) + " in " + root.string());
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest: " + std::string(e.what()));
    }
    Dataset ds;
    try {
        ds.config = synth_config_from_json(m.at("config"));
        for (const auto& w : m.at("worlds")) {
            World world{w.at("id").get<std::string>(), read_tensor(root / w.at("file").get<std::string>()),
                        w.at("pixel_size").get<double>(),
                        {w.at("origin").at(0).get<double>(), w.at("origin").at(1).get<double>()}};
            ds.worlds.push_back(std::move(world));
        }
        const double half = ds.config.search_extent / 2 + 1e-9;
        for (const auto& s : m.at("samples")) {
            const auto& p = s.at("pose");
            SyntheticSample smp{s.at("id").get<std::string>(), s.at("world_id").get<std::string>(),
                                Pose2(p.at("x").get<double>(), p.at("y").get<double>(), p.at("theta").get<double>()),
                                read_tensor(root / s.at("file").get<std::string>()), s.at("split").get<std::string>()};
            if (std::abs(smp.pose.x) > half || std::abs(smp.pose.y) > half)
                throw FormatError("sample " + smp.id + " lies outside its search region");
            ds.world(smp.world_id);
            ds.samples.push_back(std::move(smp));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest: " + std::string(e.what()));
    } catch (const DomainError& e) {
        throw FormatError(std::string("inconsistent manifest: ") + e.what());
    }
    return ds;
}

} // namespace cbev
