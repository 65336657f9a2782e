#pragma once

#include <cbev/geometry.hpp>
#include <cbev/maps.hpp>
#include <cbev/ops.hpp>
#include <cbev/tensor_io.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <tuple>

namespace cbev {

struct EncoderConfig {
    std::size_t c_in = 4;        // input channels (aerial field and panorama)
    std::size_t c_hidden = 16;   // aerial hidden width
    std::size_t c = 32;          // matching channels
    std::size_t c_p = 32;        // panorama feature channels
    std::size_t pano_rows = 16;  // h of the panorama input
    std::size_t depth_bins = 19; // d
    std::size_t embed_dim = 64;  // e
};

/// Named parameter tensors. Every encoder reads its weights from here by name.
struct EncoderParams {
    EncoderConfig config;
    ParamStore tensors;

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("missing encoder parameter '" + name + "'");
        return it->second;
    }
    Tensor& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("missing encoder parameter '" + name + "'");
        return it->second;
    }
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937& rng) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
    std::vector<float> d(shape_numel(shape));
    for (auto& v : d) v = n(rng);
    return Tensor(std::move(shape), std::move(d), true);
}

} // namespace detail

inline EncoderParams init_encoder_params(const EncoderConfig& cfg, unsigned seed) {
    std::mt19937 rng(seed);
    EncoderParams p{cfg, {}};
    auto& t = p.tensors;
    t["aerial.conv1.w"] = detail::he_normal({3, 3, cfg.c_in, cfg.c_hidden}, 9 * cfg.c_in, rng);
    t["aerial.conv1.b"] = Tensor::zeros({cfg.c_hidden}, true);
    t["aerial.conv2.w"] = detail::he_normal({3, 3, cfg.c_hidden, cfg.c}, 9 * cfg.c_hidden, rng);
    t["aerial.conv2.b"] = Tensor::zeros({cfg.c}, true);
    t["pano.conv1.w"] = detail::he_normal({1, 1, cfg.c_in, cfg.c_p}, cfg.c_in, rng);
    t["pano.conv1.b"] = Tensor::zeros({cfg.c_p}, true);
    t["pano.value.w"] = detail::he_normal({1, 1, cfg.c_p, cfg.c}, cfg.c_p, rng);
    t["pano.value.b"] = Tensor::zeros({cfg.c}, true);
    t["pano.attn.w"] = detail::he_normal({1, 1, cfg.c_p, cfg.depth_bins}, cfg.c_p, rng);
    t["pano.attn.b"] = Tensor::zeros({cfg.depth_bins}, true);
    t["pano.row_bias"] = Tensor::zeros({cfg.pano_rows, cfg.depth_bins}, true);
    t["embed.query.w"] = detail::he_normal({cfg.c_p, cfg.embed_dim}, cfg.c_p, rng);
    t["embed.query.b"] = Tensor::zeros({cfg.embed_dim}, true);
    t["embed.reference.w"] = detail::he_normal({cfg.c, cfg.embed_dim}, cfg.c, rng);
    t["embed.reference.b"] = Tensor::zeros({cfg.embed_dim}, true);
    return p;
}

/// Unnormalized aerial features [l, l, c].
inline Tensor aerial_features(const Tensor& input, const EncoderParams& p) {
    require_rank(input, 3, "encode_aerial input");
    if (input.dim(0) != input.dim(1))
        throw DimensionError("encode_aerial: input must be square, got " + shape_str(input.shape()));
    if (input.dim(2) != p.config.c_in)
        throw DimensionError("encode_aerial: expected " + std::to_string(p.config.c_in) + " channels, got " +
                             std::to_string(input.dim(2)));
    Tensor h = relu(conv2d(input, p.at("aerial.conv1.w"), p.at("aerial.conv1.b")));
    return conv2d(h, p.at("aerial.conv2.w"), p.at("aerial.conv2.b"));
}

inline AerialMap encode_aerial(const Tensor& input, const EncoderParams& p, double pixel_size = 1.0,
                               double search_extent = 28.0) {
    return {l2_normalize_global(aerial_features(input, p)), pixel_size, search_extent};
}

/// Panorama backbone: per-pixel features [h, w, c_p]. Only 1x1 convolutions, so a
/// column roll of the input rolls the output identically.
inline Tensor panorama_features(const Tensor& pano, const EncoderParams& p) {
    require_rank(pano, 3, "encode_panorama input");
    if (pano.dim(2) != p.config.c_in)
        throw DimensionError("encode_panorama: expected " + std::to_string(p.config.c_in) + " channels, got " +
                             std::to_string(pano.dim(2)));
    if (pano.dim(1) < 4) throw DimensionError("encode_panorama: panorama needs at least 4 columns");
    return relu(conv2d(pano, p.at("pano.conv1.w"), p.at("pano.conv1.b")));
}

/// Attention weights [h, w, d], softmax over rows for each (column, depth bin).
inline Tensor depth_attention_weights(const Tensor& features, const EncoderParams& p) {
    require_rank(features, 3, "depth_attention");
    if (features.dim(0) < 2) throw DimensionError("depth_attention: need at least 2 rows");
    Tensor logits = conv2d(features, p.at("pano.attn.w"), p.at("pano.attn.b"));
    const Tensor& bias = p.at("pano.row_bias");
    if (bias.dim(0) != features.dim(0))
        throw DimensionError("depth_attention: row bias is for " + std::to_string(bias.dim(0)) + " rows, got " +
                             std::to_string(features.dim(0)));
    return softmax_axis(add_row_bias(logits, bias), 0);
}

/// Polar BEV [d, w, c] from panorama features [h, w, c_p].
inline Tensor depth_attention(const Tensor& features, const EncoderParams& p) {
    Tensor weights = depth_attention_weights(features, p);
    Tensor values = conv2d(features, p.at("pano.value.w"), p.at("pano.value.b"));
    return column_attention(weights, values);
}

/// Cartesian BEV from a polar map [d, w, c]; cells outside the valid disc are 0.
inline BEVMap polar_to_bev(const Tensor& polar, const PolarField& field, double pixel_size = 1.0) {
    require_rank(polar, 3, "polar_to_bev");
    if (polar.dim(0) != field.depth_bins || polar.dim(1) != field.angle_bins)
        throw DimensionError("polar_to_bev: polar map " + shape_str(polar.shape()) + " does not match the field");
    auto sampled = bilinear_sample(wrap_columns(polar), field.coords);
    return {apply_mask(sampled.values, field.valid.to_tensor()), field.valid, pixel_size};
}

inline const PolarField& cached_polar_field(std::size_t d, std::size_t w, std::size_t side) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, std::size_t>, PolarField> cache;
    std::lock_guard lock(mu);
    auto key = std::make_tuple(d, w, side);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, polar_coords(d, w, side)).first;
    return it->second;
}

/// Unnormalized BEV for a panorama.
inline BEVMap panorama_bev(const Tensor& pano, const EncoderParams& p, std::size_t l_B, double pixel_size = 1.0) {
    Tensor polar = depth_attention(panorama_features(pano, p), p);
    return polar_to_bev(polar, cached_polar_field(p.config.depth_bins, pano.dim(1), l_B), pixel_size);
}

/// Match-ready BEV: unit norm over the unmasked cells, masked cells exactly 0.
inline BEVMap encode_panorama(const Tensor& pano, const EncoderParams& p, std::size_t l_B, double pixel_size = 1.0) {
    BEVMap bev = panorama_bev(pano, p, l_B, pixel_size);
    bev.tensor = l2_normalize_global(bev.tensor, bev.mask.to_tensor());
    return bev;
}

inline Tensor unit_vector(const Tensor& v) { return l2_normalize_global(v); }

/// Stage-1 query embedding [e].
inline Tensor embed_query(const Tensor& pano, const EncoderParams& p) {
    return unit_vector(linear(mean_pool(panorama_features(pano, p)), p.at("embed.query.w"), p.at("embed.query.b")));
}

/// Stage-1 reference embedding [e].
inline Tensor embed_reference(const Tensor& aerial, const EncoderParams& p) {
    return unit_vector(
        linear(mean_pool(aerial_features(aerial, p)), p.at("embed.reference.w"), p.at("embed.reference.b")));
}

inline void save_encoder(const std::filesystem::path& dir, const EncoderParams& p) {
    ParamStore store = p.tensors;
    const auto& c = p.config;
    const std::vector<float> cfg{static_cast<float>(c.c_in),      static_cast<float>(c.c_hidden),
                                 static_cast<float>(c.c),         static_cast<float>(c.c_p),
                                 static_cast<float>(c.pano_rows), static_cast<float>(c.depth_bins),
                                 static_cast<float>(c.embed_dim)};
    store["config"] = Tensor({cfg.size()}, cfg);
    save_checkpoint(dir, store);
}

inline EncoderParams load_encoder(const std::filesystem::path& dir) {
    ParamStore store = load_checkpoint(dir, true);
    auto it = store.find("config");
    if (it == store.end() || it->second.numel() != 7) throw FormatError("checkpoint has no encoder config");
    auto v = [&](std::size_t i) { return static_cast<std::size_t>(it->second[i]); };
    EncoderParams p{{v(0), v(1), v(2), v(3), v(4), v(5), v(6)}, {}};
    store.erase(it);
    p.tensors = std::move(store);
    const EncoderParams ref = init_encoder_params(p.config, 0);
    for (const auto& [name, t] : ref.tensors) {
        if (p.tensors.count(name) == 0) throw FormatError("checkpoint is missing parameter '" + name + "'");
        if (p.tensors.at(name).shape() != t.shape())
            throw FormatError("checkpoint parameter '" + name + "' has shape " +
                              shape_str(p.tensors.at(name).shape()) + ", expected " + shape_str(t.shape()));
    }
    return p;
}

} // namespace cbev
