#pragma once

#include <cbev/encoder.hpp>
#include <cbev/matcher.hpp>
#include <cbev/retrieval.hpp>
#include <cbev/synth.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace cbev {

enum class Stage { one, two };

inline Stage parse_stage(const std::string& s) {
    if (s == "one" || s == "1") return Stage::one;
    if (s == "two" || s == "2") return Stage::two;
    throw DomainError("unknown stage '" + s + "' (expected one or two)");
}

inline const char* stage_name(Stage s) { return s == Stage::one ? "one" : "two"; }

struct TrainConfig {
    Stage stage = Stage::one;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double temperature = 0.01;
    double label_smoothing = 0.1;
    std::size_t mining_refresh_epochs = 2;
    double min_negative_distance = 0.0;
    bool hard_negative_mining = true;
    bool orientation_known = false;
    bool augment = true;  // random rolls, mirrors and quarter turns
    std::size_t warmup_epochs = 1;
    double attention_lr_scale = 30.0;  // multiplier for the depth-attention row bias
    std::size_t n_theta = 32;
    std::size_t n_t = 28;
    std::size_t l_A = 48;
    std::size_t l_B = 19;
    std::size_t c = 32;
    double pixel_size = 1.0;
    double search_extent = 28.0;
    std::uint64_t seed = 0;

    GridSpec grid_spec() const {
        GridSpec g;
        g.n_t = n_t;
        g.n_theta = orientation_known ? 1 : n_theta;
        g.search_extent = search_extent;
        g.pixel_size = pixel_size;
        g.l_A = l_A;
        g.l_B = l_B;
        return g;
    }

    void validate() const {
        if (!(temperature > 0)) throw DomainError("temperature must be positive");
        if (!(label_smoothing >= 0 && label_smoothing < 1)) throw DomainError("label_smoothing must be in [0, 1)");
        if (batch_size < 2) throw DomainError("batch_size must be at least 2");
        if (mining_refresh_epochs < 1) throw DomainError("mining_refresh_epochs must be at least 1");
        if (!(min_negative_distance >= 0)) throw DomainError("min_negative_distance must be non-negative");
        if (stage == Stage::two) validate_grid_spec(grid_spec());
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"stage", stage_name(c.stage)},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"temperature", c.temperature},
            {"label_smoothing", c.label_smoothing},
            {"mining_refresh_epochs", c.mining_refresh_epochs},
            {"min_negative_distance", c.min_negative_distance},
            {"hard_negative_mining", c.hard_negative_mining},
            {"orientation_known", c.orientation_known},
            {"augment", c.augment},
            {"warmup_epochs", c.warmup_epochs},
            {"attention_lr_scale", c.attention_lr_scale},
            {"n_theta", c.n_theta},
            {"n_t", c.n_t},
            {"l_A", c.l_A},
            {"l_B", c.l_B},
            {"c", c.c},
            {"pixel_size", c.pixel_size},
            {"search_extent", c.search_extent},
            {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.temperature = j.value("temperature", c.temperature);
        c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
        c.mining_refresh_epochs = j.value("mining_refresh_epochs", c.mining_refresh_epochs);
        c.min_negative_distance = j.value("min_negative_distance", c.min_negative_distance);
        c.hard_negative_mining = j.value("hard_negative_mining", c.hard_negative_mining);
        c.orientation_known = j.value("orientation_known", c.orientation_known);
        c.augment = j.value("augment", c.augment);
        c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
        c.attention_lr_scale = j.value("attention_lr_scale", c.attention_lr_scale);
        c.n_theta = j.value("n_theta", c.n_theta);
        c.n_t = j.value("n_t", c.n_t);
        c.l_A = j.value("l_A", c.l_A);
        c.l_B = j.value("l_B", c.l_B);
        c.c = j.value("c", c.c);
        c.pixel_size = j.value("pixel_size", c.pixel_size);
        c.search_extent = j.value("search_extent", c.search_extent);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad training config: " + std::string(e.what()));
    }
    return c;
}

/// Minimum of the smoothed cross-entropy: the entropy of the target row.
inline double smoothing_floor(std::size_t n, double eps) {
    if (eps <= 0) return 0.0;
    const double off = eps / static_cast<double>(n - 1);
    return -(1 - eps) * std::log(1 - eps) - eps * std::log(off);
}

/// Mean of row-wise and column-wise cross-entropy of logits / tau against targets
/// (1 - eps) on the diagonal and eps / (n - 1) elsewhere.
inline Tensor symmetric_infonce(const Tensor& logits, double tau, double eps) {
    require_rank(logits, 2, "symmetric_infonce");
    const std::size_t n = logits.dim(0);
    if (logits.dim(1) != n) throw DimensionError("symmetric_infonce: logits must be square");
    if (n < 2) throw DimensionError("symmetric_infonce: need at least 2 pairs");
    if (!(tau > 0)) throw DomainError("symmetric_infonce: tau must be positive");
    if (!(eps >= 0 && eps < 1)) throw DomainError("symmetric_infonce: smoothing must be in [0, 1)");
    const double off = eps / static_cast<double>(n - 1);
    auto target = [&](std::size_t i, std::size_t j) { return i == j ? 1 - eps : off; };
    // Softmax along rows (axis 1) and along columns (axis 0).
    std::vector<double> prow(n * n), pcol(n * n);
    double loss = 0.0;
    for (int axis = 0; axis < 2; ++axis) {
        auto& p = axis == 0 ? prow : pcol;
        for (std::size_t a = 0; a < n; ++a) {
            auto at = [&](std::size_t b) { return axis == 0 ? a * n + b : b * n + a; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t b = 0; b < n; ++b) mx = std::max(mx, logits[at(b)] / tau);
            double z = 0.0;
            for (std::size_t b = 0; b < n; ++b) z += std::exp(logits[at(b)] / tau - mx);
            const double lz = mx + std::log(z);
            for (std::size_t b = 0; b < n; ++b) {
                const double lp = logits[at(b)] / tau - lz;
                p[at(b)] = std::exp(lp);
                loss -= target(a, b) * lp;
            }
        }
    }
    loss /= 2.0 * static_cast<double>(n);
    return detail::make_result("symmetric_infonce", {}, {static_cast<float>(loss)}, {logits},
                               [n, tau, eps, off, prow = std::move(prow), pcol = std::move(pcol)](detail::Node& self) {
        float* g = detail::grad_of(self, 0);
        const double up = self.grad[0] / (2.0 * static_cast<double>(n) * tau);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double t = i == j ? 1 - eps : off;
                g[i * n + j] += static_cast<float>(up * ((prow[i * n + j] - t) + (pcol[i * n + j] - t)));
            }
    });
}

/// Fraction of rows and columns whose maximum is on the diagonal.
inline double in_batch_accuracy(const Tensor& logits) {
    const std::size_t n = logits.dim(0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t br = 0, bc = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (logits[i * n + j] > logits[i * n + br]) br = j;
            if (logits[j * n + i] > logits[bc * n + i]) bc = j;
        }
        hits += (br == i) + (bc == i);
    }
    return static_cast<double>(hits) / (2.0 * static_cast<double>(n));
}

/// Stage-2 logits: entry (i, j) is lse(S(bev_i, aerial_j) / temperature).
inline Tensor stage2_logits(const std::vector<Tensor>& bevs, const std::vector<Tensor>& aerials, const PoseGrid& grid,
                            double temperature, Backend backend = Backend::fft) {
    return pairwise_retrieval_scores(bevs, aerials, grid, 1.0 / temperature, backend);
}

/// Decoupled weight decay Adam.
class AdamW {
public:
    explicit AdamW(double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    /// Per-parameter learning-rate multipliers (default 1).
    void set_lr_scale(const std::string& name, double scale) { scale_[name] = scale; }

    void step(ParamStore& params, double base_lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto sc = scale_.find(name);
            const double lr = base_lr * (sc == scale_.end() ? 1.0 : sc->second);
            const auto g = p.grad();
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(g.size(), 0.0);
                v.assign(g.size(), 0.0);
            }
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = b1_ * m[i] + (1 - b1_) * g[i];
                v[i] = b2_ * v[i] + (1 - b2_) * static_cast<double>(g[i]) * g[i];
                const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
                w[i] = static_cast<float>(w[i] * (1.0 - lr * wd_) - lr * update);
            }
            detail::check_finite(w, "AdamW update");
        }
    }

    static void zero_grad(ParamStore& params) {
        for (auto& [name, p] : params) p.zero_grad();
    }

private:
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
    std::map<std::string, double> scale_;
};

/// Linear warmup over warmup_steps, then cosine decay to zero at total_steps.
inline double scheduled_lr(double base, std::size_t step, std::size_t warmup_steps, std::size_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(std::max<std::size_t>(1, total_steps - warmup_steps));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

/// Cached embeddings and locations for global hard-negative mining.
struct MinerState {
    std::vector<std::string> reference_ids;
    std::vector<Location> reference_locations;
    Tensor reference_embeddings;  // [R, e]; undefined until the first refresh
    std::vector<Location> query_locations;
    Tensor query_embeddings;  // [Q, e]
    long last_refresh_epoch = -1;
    std::size_t refresh_every = 2;
    double min_negative_distance = 0.0;

    // Instrumentation over every negative handed out.
    std::size_t negatives_sampled = 0;
    std::size_t distance_violations = 0;
    double closest_negative = std::numeric_limits<double>::infinity();

    bool has_embeddings() const { return reference_embeddings.defined() && query_embeddings.defined(); }
};

/// `count` hardest references for query `query_index`, excluding its true reference and any
/// reference strictly closer than min_negative_distance. Stage one mines by planar distance
/// during the first refresh_every epochs and by cached embeddings afterwards; stage two always
/// uses the (frozen) cached embeddings.
inline std::vector<std::string> mine_hard_negatives(MinerState& state, std::size_t query_index,
                                                    const std::string& true_reference, std::size_t count, Stage stage,
                                                    std::size_t epoch) {
    const std::size_t R = state.reference_ids.size();
    const Location& anchor = state.query_locations.at(query_index);
    std::vector<std::size_t> pool;
    for (std::size_t r = 0; r < R; ++r) {
        if (state.reference_ids[r] == true_reference) continue;
        if (planar_distance(anchor, state.reference_locations[r]) < state.min_negative_distance) continue;
        pool.push_back(r);
    }
    if (pool.size() < count)
        throw DomainError("mine_hard_negatives: only " + std::to_string(pool.size()) + " eligible references for " +
                          std::to_string(count) + " negatives");
    const bool by_distance = (stage == Stage::one && epoch < state.refresh_every) || !state.has_embeddings();
    std::vector<double> key(R, 0.0);
    if (by_distance) {
        for (std::size_t r : pool) key[r] = planar_distance(anchor, state.reference_locations[r]);
    } else {
        const std::size_t e = state.query_embeddings.dim(1);
        for (std::size_t r : pool) {
            double s = 0.0;
            for (std::size_t k = 0; k < e; ++k)
                s += static_cast<double>(state.query_embeddings[query_index * e + k]) *
                     state.reference_embeddings[r * e + k];
            key[r] = -s;
        }
    }
    std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t r = pool[i];
        const double d = planar_distance(anchor, state.reference_locations[r]);
        ++state.negatives_sampled;
        if (d < state.min_negative_distance) ++state.distance_violations;
        state.closest_negative = std::min(state.closest_negative, d);
        out.push_back(state.reference_ids[r]);
    }
    return out;
}

struct LossReport {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy_in_batch = 0.0;
    double lr = 0.0;
    double s2a = 0.0;
    double a2s = 0.0;
};

inline nlohmann::json to_json(const LossReport& r) {
    return {{"epoch", r.epoch}, {"loss", r.loss}, {"in_batch_accuracy", r.accuracy_in_batch},
            {"lr", r.lr},       {"s2a", r.s2a},   {"a2s", r.a2s}};
}

// ---- augmentation ----

/// out[:, j] = x[:, (j + shift) mod w]
inline Tensor roll_columns(const Tensor& x, long shift) {
    require_rank(x, 3, "roll_columns");
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const long wl = static_cast<long>(w);
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const auto src = static_cast<std::size_t>(((static_cast<long>(j) + shift) % wl + wl) % wl);
            std::copy_n(&x.data()[(i * w + src) * c], c, &out[(i * w + j) * c]);
        }
    return Tensor(x.shape(), std::move(out));
}

/// East-west mirror of a panorama: bearing b becomes -b.
inline Tensor mirror_panorama(const Tensor& x) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) std::copy_n(&x.data()[(i * w + (w - j) % w) * c], c, &out[(i * w + j) * c]);
    return Tensor(x.shape(), std::move(out));
}

/// East-west mirror of a map.
inline Tensor mirror_map(const Tensor& x) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) std::copy_n(&x.data()[(i * w + (w - 1 - j)) * c], c, &out[(i * w + j) * c]);
    return Tensor(x.shape(), std::move(out));
}

/// Rotates a square map clockwise by quarter turns (north content moves east).
inline Tensor rotate_map_quarter(const Tensor& x, int quarters) {
    const std::size_t n = x.dim(0), c = x.dim(2);
    Tensor cur = x;
    for (int q = 0; q < ((quarters % 4) + 4) % 4; ++q) {
        std::vector<float> out(cur.numel());
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t col = 0; col < n; ++col)
                std::copy_n(&cur.data()[((n - 1 - col) * n + r) * c], c, &out[(r * n + col) * c]);
        cur = Tensor(x.shape(), std::move(out));
    }
    return cur;
}

/// Panorama rolled so column 0 faces north, given the camera heading.
inline Tensor north_align(const Tensor& pano, double heading) {
    const auto w = static_cast<double>(pano.dim(1));
    const long shift = std::lround(-normalize_angle(heading) / kTwoPi * w);
    return roll_columns(pano, shift);
}

// ---- training ----

struct TrainingPair {
    std::size_t sample;  // index into the training samples
    std::size_t world;   // index into the reference worlds
};

/// Training view of a dataset: train samples, the worlds they belong to, locations.
struct TrainingSet {
    std::vector<const SyntheticSample*> samples;
    std::vector<const World*> worlds;
    std::vector<std::size_t> world_of;  // per sample
    std::vector<std::vector<std::size_t>> samples_of;  // per world

    explicit TrainingSet(const Dataset& ds) {
        std::map<std::string, std::size_t> index;
        for (const auto* s : ds.split("train")) {
            auto it = index.find(s->world_id);
            if (it == index.end()) {
                it = index.emplace(s->world_id, worlds.size()).first;
                worlds.push_back(&ds.world(s->world_id));
                samples_of.emplace_back();
            }
            world_of.push_back(it->second);
            samples_of[it->second].push_back(samples.size());
            samples.push_back(s);
        }
    }

    Location query_location(std::size_t s) const {
        const auto& o = worlds[world_of[s]]->origin;
        return {o.x + samples[s]->pose.x, o.y + samples[s]->pose.y};
    }
};

inline EncoderParams detached(const EncoderParams& p) {
    EncoderParams out{p.config, {}};
    for (const auto& [name, t] : p.tensors) out.tensors[name] = t.detach();
    return out;
}

struct TrainResult {
    EncoderParams params;
    std::vector<LossReport> log;
    MinerState miner;
};

using EpochCallback = std::function<void(const LossReport&)>;

namespace detail {

inline EncoderConfig encoder_config_for(const TrainConfig& cfg, const Dataset& ds) {
    EncoderConfig e;
    e.c_in = ds.config.c_in;
    e.c = cfg.c;
    e.pano_rows = ds.config.pano_rows;
    e.depth_bins = cfg.l_B;
    return e;
}

inline Tensor query_input(const SyntheticSample& s, const TrainConfig& cfg) {
    return cfg.orientation_known ? north_align(s.pano, s.pose.theta) : s.pano;
}

inline void fill_embeddings(MinerState& m, const TrainingSet& ts, const EncoderParams& params, const TrainConfig& cfg) {
    const EncoderParams p = detached(params);
    std::vector<Tensor> q(ts.samples.size()), r(ts.worlds.size());
    parallel_for(q.size(), [&](std::size_t i) { q[i] = embed_query(query_input(*ts.samples[i], cfg), p); });
    parallel_for(r.size(), [&](std::size_t i) { r[i] = embed_reference(ts.worlds[i]->field, p); });
    m.query_embeddings = stack(q).detach();
    m.reference_embeddings = stack(r).detach();
}

inline MinerState make_miner(const TrainingSet& ts, const TrainConfig& cfg) {
    MinerState m;
    for (const auto* w : ts.worlds) {
        m.reference_ids.push_back(w->id);
        m.reference_locations.push_back(w->origin);
    }
    for (std::size_t s = 0; s < ts.samples.size(); ++s) m.query_locations.push_back(ts.query_location(s));
    m.refresh_every = cfg.mining_refresh_epochs;
    m.min_negative_distance = cfg.min_negative_distance;
    return m;
}

/// Batches for one epoch: one anchor per batch plus mined negatives, or a random partition.
inline std::vector<std::vector<TrainingPair>> epoch_batches(const TrainingSet& ts, MinerState& miner,
                                                            const TrainConfig& cfg, std::size_t epoch,
                                                            std::mt19937_64& rng) {
    const std::size_t n = ts.samples.size();
    const std::size_t B = std::min(cfg.batch_size, ts.worlds.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t steps = std::max<std::size_t>(1, n / B);
    std::vector<std::vector<TrainingPair>> batches;
    auto pick_sample = [&](std::size_t world) {
        const auto& cand = ts.samples_of[world];
        std::uniform_int_distribution<std::size_t> u(0, cand.size() - 1);
        return cand[u(rng)];
    };
    if (!cfg.hard_negative_mining) {
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<TrainingPair> batch;
            std::set<std::size_t> used;
            for (std::size_t i = s * B; i < n && batch.size() < B; ++i) {
                const std::size_t smp = order[i];
                if (used.insert(ts.world_of[smp]).second) batch.push_back({smp, ts.world_of[smp]});
            }
            if (batch.size() >= 2) batches.push_back(std::move(batch));
        }
        return batches;
    }
    std::map<std::string, std::size_t> world_index;
    for (std::size_t w = 0; w < ts.worlds.size(); ++w) world_index[ts.worlds[w]->id] = w;
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t anchor = order[s];
        std::vector<TrainingPair> batch{{anchor, ts.world_of[anchor]}};
        const auto negatives = mine_hard_negatives(miner, anchor, ts.worlds[ts.world_of[anchor]]->id, B - 1,
                                                   cfg.stage, epoch);
        for (const auto& id : negatives) {
            const std::size_t w = world_index.at(id);
            batch.push_back({pick_sample(w), w});
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

} // namespace detail

/// Trains one stage. Stage two needs the stage-one parameters for mining.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const EncoderParams* stage_one = nullptr,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (cfg.stage == Stage::two && stage_one == nullptr)
        throw DomainError("stage-two training needs a stage-one checkpoint for hard-negative mining");
    const TrainingSet ts(ds);
    if (ts.worlds.size() < 2) throw DomainError("training needs at least two reference worlds");

    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + (cfg.stage == Stage::one ? 1 : 2));
    TrainResult result{init_encoder_params(detail::encoder_config_for(cfg, ds), static_cast<unsigned>(rng())), {}, {}};
    EncoderParams& params = result.params;
    MinerState& miner = result.miner;
    miner = detail::make_miner(ts, cfg);
    if (cfg.stage == Stage::two) detail::fill_embeddings(miner, ts, *stage_one, cfg);

    const PoseGrid grid = cfg.stage == Stage::two ? build_pose_grid(cfg.grid_spec()) : PoseGrid{};
    const std::size_t B = std::min(cfg.batch_size, ts.worlds.size());
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, ts.samples.size() / B);
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const std::size_t warmup = steps_per_epoch * cfg.warmup_epochs;
    AdamW opt(cfg.weight_decay);
    opt.set_lr_scale("pano.row_bias", cfg.attention_lr_scale);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.stage == Stage::one && cfg.hard_negative_mining && epoch >= cfg.mining_refresh_epochs &&
            (miner.last_refresh_epoch < 0 ||
             epoch - static_cast<std::size_t>(miner.last_refresh_epoch) >= cfg.mining_refresh_epochs)) {
            detail::fill_embeddings(miner, ts, params, cfg);
            miner.last_refresh_epoch = static_cast<long>(epoch);
        }
        auto batches = detail::epoch_batches(ts, miner, cfg, epoch, rng);
        LossReport rep;
        rep.epoch = epoch;
        for (const auto& batch : batches) {
            const double lr = scheduled_lr(cfg.learning_rate, step, warmup, total_steps);
            Tensor logits, loss;
            try {
                std::vector<Tensor> queries, refs;
                for (const auto& pr : batch) {
                    Tensor pano = detail::query_input(*ts.samples[pr.sample], cfg);
                    Tensor aerial = ts.worlds[pr.world]->field;
                    if (cfg.augment && cfg.orientation_known) {
                        std::uniform_int_distribution<int> quarter(0, 3);
                        const int q = quarter(rng);
                        aerial = rotate_map_quarter(aerial, q);
                        pano = roll_columns(pano, -static_cast<long>(q) * static_cast<long>(pano.dim(1) / 4));
                    } else if (cfg.augment) {
                        const auto w = static_cast<long>(pano.dim(1));
                        long unit = 1;
                        if (cfg.stage == Stage::two && w % static_cast<long>(cfg.n_theta) == 0)
                            unit = w / static_cast<long>(cfg.n_theta);
                        std::uniform_int_distribution<long> roll(0, w / unit - 1);
                        pano = roll_columns(pano, roll(rng) * unit);
                    }
                    if (cfg.augment && cfg.stage == Stage::one && std::bernoulli_distribution(0.5)(rng)) {
                        pano = mirror_panorama(pano);
                        aerial = mirror_map(aerial);
                    }
                    if (cfg.stage == Stage::one) {
                        queries.push_back(embed_query(pano, params));
                        refs.push_back(embed_reference(aerial, params));
                    } else {
                        queries.push_back(encode_panorama(pano, params, cfg.l_B, cfg.pixel_size).tensor);
                        refs.push_back(encode_aerial(aerial, params, cfg.pixel_size, cfg.search_extent).tensor);
                    }
                }
                if (cfg.stage == Stage::one) {
                    logits = matmul_nt(stack(queries), stack(refs));
                    loss = symmetric_infonce(logits, cfg.temperature, cfg.label_smoothing);
                } else {
                    logits = stage2_logits(queries, refs, grid, cfg.temperature);
                    loss = symmetric_infonce(logits, 1.0, cfg.label_smoothing);
                }
                if (!std::isfinite(loss.item())) throw NonFiniteError("loss is not finite");
                AdamW::zero_grad(params.tensors);
                loss.backward();
                opt.step(params.tensors, lr);
            } catch (const NonFiniteError& e) {
                throw Error("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            rep.loss += loss.item();
            rep.accuracy_in_batch += in_batch_accuracy(logits);
            rep.lr = lr;
            ++step;
        }
        rep.loss /= static_cast<double>(batches.size());
        rep.accuracy_in_batch /= static_cast<double>(batches.size());
        result.log.push_back(rep);
        if (on_epoch) on_epoch(rep);
    }
    AdamW::zero_grad(params.tensors);
    return result;
}

} // namespace cbev
