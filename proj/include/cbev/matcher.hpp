#pragma once

// Score volume S[ty, tx, k] = <rotate(F_B, theta_k) placed at (ty, tx), F_A> for every
// hypothesis of a PoseGrid. Two backends compute the same quantity: a direct
// summation and a Fourier-domain cross-correlation. Both accumulate in double.

#include <cbev/fft.hpp>
#include <cbev/geometry.hpp>
#include <cbev/maps.hpp>
#include <cbev/ops.hpp>
#include <cbev/parallel.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace cbev {

enum class Backend { fft, bruteforce };

inline Backend parse_backend(const std::string& name) {
    if (name == "fft") return Backend::fft;
    if (name == "bruteforce") return Backend::bruteforce;
    throw DomainError("unknown matcher backend '" + name + "' (expected fft or bruteforce)");
}

inline const char* backend_name(Backend b) { return b == Backend::fft ? "fft" : "bruteforce"; }

struct ScoreVolume {
    Tensor values;  // [n_t, n_t, n_theta], raw inner products
    PoseGrid grid;
};

/// Geometry of one matching problem, validated against the grid.
struct MatchLayout {
    std::size_t la = 0, lb = 0, nt = 0, ntheta = 0, channels = 0, offset = 0;

    std::size_t volume_size() const { return nt * nt * ntheta; }
};

inline MatchLayout match_layout(const PoseGrid& grid, const Shape& bev, const Shape& aerial) {
    const GridSpec& s = grid.spec;
    MatchLayout l;
    l.offset = placement_offset(s);
    l.la = s.l_A;
    l.lb = s.l_B;
    l.nt = s.n_t;
    l.ntheta = s.n_theta;
    if (bev.size() != 3 || bev[0] != s.l_B || bev[1] != s.l_B)
        throw DimensionError("BEV map must be [l_B, l_B, c] with l_B=" + std::to_string(s.l_B) + ", got " +
                             shape_str(bev));
    if (aerial.size() != 3 || aerial[0] != s.l_A || aerial[1] != s.l_A)
        throw DimensionError("aerial map must be [l_A, l_A, c] with l_A=" + std::to_string(s.l_A) + ", got " +
                             shape_str(aerial));
    if (bev[2] != aerial[2]) throw DimensionError("BEV and aerial maps have different channel counts");
    l.channels = bev[2];
    return l;
}

/// Bilinear taps rotating an l_B map by each grid heading, restricted to the validity disc.
struct RotationBank {
    std::size_t side = 0;
    ValidityMask mask;
    std::vector<std::vector<BilinearTaps>> taps;  // [k][cell]
};

inline std::shared_ptr<const RotationBank> rotation_bank(std::size_t side, std::size_t n_theta) {
    static std::mutex mutex;
    static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const RotationBank>> cache;
    std::lock_guard lock(mutex);
    auto& slot = cache[{side, n_theta}];
    if (slot) return slot;
    auto bank = std::make_shared<RotationBank>();
    bank->side = side;
    bank->mask = circular_mask(side);
    bank->taps.resize(n_theta);
    for (std::size_t k = 0; k < n_theta; ++k) {
        const double theta = kTwoPi * static_cast<double>(k) / static_cast<double>(n_theta);
        auto& taps = bank->taps[k];
        taps.resize(side * side);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                if (!bank->mask(r, c)) continue;
                const auto [x, y] = rotation_source(side, theta, static_cast<double>(r), static_cast<double>(c));
                taps[r * side + c] = bilinear_taps(x, y, side, side);
            }
    }
    slot = std::move(bank);
    return slot;
}

namespace detail {

/// out[side*side*c] = mask * bilinear(bev, rotation k).
inline void rotate_forward(const float* bev, std::size_t c, const RotationBank& bank, std::size_t k, double* out) {
    const auto& taps = bank.taps[k];
    std::fill(out, out + taps.size() * c, 0.0);
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (!taps[i].valid) continue;
        for (int t = 0; t < 4; ++t) {
            const double w = taps[i].weight[t];
            if (w == 0.0) continue;
            const float* src = bev + taps[i].index[t] * c;
            for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += w * src[ch];
        }
    }
}

inline void rotate_adjoint(const double* grad_rot, std::size_t c, const RotationBank& bank, std::size_t k,
                           double* grad_bev) {
    const auto& taps = bank.taps[k];
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (!taps[i].valid) continue;
        for (int t = 0; t < 4; ++t) {
            const double w = taps[i].weight[t];
            if (w == 0.0) continue;
            double* dst = grad_bev + taps[i].index[t] * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * grad_rot[i * c + ch];
        }
    }
}

inline std::vector<double> bruteforce_forward(const float* bev, const float* aerial, const MatchLayout& l,
                                              const RotationBank& bank) {
    const std::size_t c = l.channels;
    std::vector<double> volume(l.volume_size());
    std::vector<double> rot(l.lb * l.lb * c);
    for (std::size_t k = 0; k < l.ntheta; ++k) {
        rotate_forward(bev, c, bank, k, rot.data());
        for (std::size_t ty = 0; ty < l.nt; ++ty)
            for (std::size_t tx = 0; tx < l.nt; ++tx) {
                double s = 0.0;
                for (std::size_t a = 0; a < l.lb; ++a)
                    for (std::size_t b = 0; b < l.lb; ++b) {
                        if (!bank.mask(a, b)) continue;
                        const double* br = &rot[(a * l.lb + b) * c];
                        const float* ar = aerial + ((l.offset + ty + a) * l.la + l.offset + tx + b) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) s += br[ch] * ar[ch];
                    }
                volume[(ty * l.nt + tx) * l.ntheta + k] = s;
            }
    }
    return volume;
}

inline void bruteforce_backward(const double* upstream, const float* bev, const float* aerial, const MatchLayout& l,
                                const RotationBank& bank, double* grad_bev, double* grad_aerial) {
    const std::size_t c = l.channels;
    std::vector<double> rot(l.lb * l.lb * c), grad_rot(l.lb * l.lb * c);
    for (std::size_t k = 0; k < l.ntheta; ++k) {
        rotate_forward(bev, c, bank, k, rot.data());
        std::fill(grad_rot.begin(), grad_rot.end(), 0.0);
        for (std::size_t ty = 0; ty < l.nt; ++ty)
            for (std::size_t tx = 0; tx < l.nt; ++tx) {
                const double g = upstream[(ty * l.nt + tx) * l.ntheta + k];
                if (g == 0.0) continue;
                for (std::size_t a = 0; a < l.lb; ++a)
                    for (std::size_t b = 0; b < l.lb; ++b) {
                        if (!bank.mask(a, b)) continue;
                        const std::size_t bi = (a * l.lb + b) * c;
                        const std::size_t ai = ((l.offset + ty + a) * l.la + l.offset + tx + b) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            if (grad_aerial) grad_aerial[ai + ch] += g * rot[bi + ch];
                            grad_rot[bi + ch] += g * aerial[ai + ch];
                        }
                    }
            }
        // Rotated cells outside the disc are forced to zero, so their gradient is dropped.
        for (std::size_t i = 0; i < l.lb * l.lb; ++i)
            if (!bank.mask.values[i])
                for (std::size_t ch = 0; ch < c; ++ch) grad_rot[i * c + ch] = 0.0;
        if (grad_bev) rotate_adjoint(grad_rot.data(), c, bank, k, grad_bev);
    }
}

} // namespace detail

/// Per-channel spectra of an aerial map.
struct AerialSpectrum {
    std::size_t channels = 0;
    std::vector<Complex> spec;  // [channel][frequency]

    AerialSpectrum() = default;
    AerialSpectrum(const float* aerial, std::size_t la, std::size_t c) : channels(c) {
        const RealFft2d& fft = fft_plan(la);
        const std::size_t nc = fft.spectrum_size();
        spec.resize(c * nc);
        std::vector<double> buf(la * la);
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < la * la; ++i) buf[i] = aerial[i * c + ch];
            fft.forward(buf.data(), &spec[ch * nc]);
        }
    }
};

/// Spectra of every rotated, masked BEV map zero-padded to l_A x l_A.
struct BevSpectra {
    std::size_t ntheta = 0, channels = 0;
    std::vector<Complex> spec;  // [k][channel][frequency]

    BevSpectra() = default;
    BevSpectra(const float* bev, const MatchLayout& l, const RotationBank& bank)
        : ntheta(l.ntheta), channels(l.channels) {
        const RealFft2d& fft = fft_plan(l.la);
        const std::size_t nc = fft.spectrum_size(), c = l.channels;
        spec.resize(ntheta * c * nc);
        std::vector<double> rot(l.lb * l.lb * c), buf(l.la * l.la, 0.0);
        for (std::size_t k = 0; k < ntheta; ++k) {
            detail::rotate_forward(bev, c, bank, k, rot.data());
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t a = 0; a < l.lb; ++a)
                    for (std::size_t b = 0; b < l.lb; ++b) buf[a * l.la + b] = rot[(a * l.lb + b) * c + ch];
                fft.forward(buf.data(), &spec[(k * c + ch) * nc]);
            }
        }
    }

    const Complex* at(std::size_t k, std::size_t ch, std::size_t nc) const { return &spec[(k * channels + ch) * nc]; }
};

/// Score volume from precomputed spectra (Fourier backend).
inline std::vector<double> correlate_volume(const BevSpectra& bev, const AerialSpectrum& aerial, const MatchLayout& l) {
    const RealFft2d& fft = fft_plan(l.la);
    const std::size_t nc = fft.spectrum_size();
    const double norm = 1.0 / static_cast<double>(l.la * l.la);
    std::vector<double> volume(l.volume_size());
    std::vector<Complex> prod(nc);
    std::vector<double> corr(l.la * l.la);
    for (std::size_t k = 0; k < l.ntheta; ++k) {
        std::fill(prod.begin(), prod.end(), Complex{});
        for (std::size_t ch = 0; ch < l.channels; ++ch) {
            const Complex* b = bev.at(k, ch, nc);
            const Complex* a = &aerial.spec[ch * nc];
            for (std::size_t f = 0; f < nc; ++f) prod[f] += std::conj(b[f]) * a[f];
        }
        fft.inverse(prod.data(), corr.data());
        for (std::size_t ty = 0; ty < l.nt; ++ty)
            for (std::size_t tx = 0; tx < l.nt; ++tx)
                volume[(ty * l.nt + tx) * l.ntheta + k] = corr[(l.offset + ty) * l.la + l.offset + tx] * norm;
    }
    return volume;
}

namespace detail {

/// Gradients of sum_ij <upstream_ij, S_ij> for a set of pairs (i, j) via the Fourier
/// domain. upstream[i * m + j] may be empty (zero). Reductions run in a fixed order.
inline void fft_pairwise_backward(const std::vector<BevSpectra>& bevs, const std::vector<AerialSpectrum>& aerials,
                                  const std::vector<std::vector<double>>& upstream, const MatchLayout& l,
                                  const RotationBank& bank, std::vector<std::vector<double>>* grad_bev,
                                  std::vector<std::vector<double>>* grad_aerial) {
    const std::size_t n = bevs.size(), m = aerials.size(), c = l.channels;
    const RealFft2d& fft = fft_plan(l.la);
    const std::size_t nc = fft.spectrum_size();
    const double norm = 1.0 / static_cast<double>(l.la * l.la);

    // Spectra of the zero-padded upstream windows, per pair and heading.
    std::vector<std::vector<Complex>> gspec(n * m);
    parallel_for(n * m, [&](std::size_t p) {
        if (upstream[p].empty()) return;
        gspec[p].resize(l.ntheta * nc);
        std::vector<double> buf(l.la * l.la, 0.0);
        for (std::size_t k = 0; k < l.ntheta; ++k) {
            for (std::size_t ty = 0; ty < l.nt; ++ty)
                for (std::size_t tx = 0; tx < l.nt; ++tx)
                    buf[(l.offset + ty) * l.la + l.offset + tx] = upstream[p][(ty * l.nt + tx) * l.ntheta + k];
            fft.forward(buf.data(), &gspec[p][k * nc]);
        }
    });

    if (grad_bev) {
        grad_bev->assign(n, std::vector<double>(l.lb * l.lb * c, 0.0));
        parallel_for(n, [&](std::size_t i) {
            std::vector<Complex> acc(nc);
            std::vector<double> corr(l.la * l.la), grad_rot(l.lb * l.lb * c);
            for (std::size_t k = 0; k < l.ntheta; ++k) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::fill(acc.begin(), acc.end(), Complex{});
                    bool any = false;
                    for (std::size_t j = 0; j < m; ++j) {
                        const auto& g = gspec[i * m + j];
                        if (g.empty()) continue;
                        any = true;
                        const Complex* gk = &g[k * nc];
                        const Complex* a = &aerials[j].spec[ch * nc];
                        for (std::size_t f = 0; f < nc; ++f) acc[f] += std::conj(gk[f]) * a[f];
                    }
                    if (!any) {
                        for (std::size_t cell = 0; cell < l.lb * l.lb; ++cell) grad_rot[cell * c + ch] = 0.0;
                        continue;
                    }
                    fft.inverse(acc.data(), corr.data());
                    for (std::size_t a = 0; a < l.lb; ++a)
                        for (std::size_t b = 0; b < l.lb; ++b)
                            grad_rot[(a * l.lb + b) * c + ch] =
                                bank.mask(a, b) ? corr[a * l.la + b] * norm : 0.0;
                }
                rotate_adjoint(grad_rot.data(), c, bank, k, (*grad_bev)[i].data());
            }
        });
    }

    if (grad_aerial) {
        grad_aerial->assign(m, std::vector<double>(l.la * l.la * c, 0.0));
        parallel_for(m, [&](std::size_t j) {
            std::vector<Complex> acc(nc);
            std::vector<double> conv(l.la * l.la);
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::fill(acc.begin(), acc.end(), Complex{});
                for (std::size_t i = 0; i < n; ++i) {
                    const auto& g = gspec[i * m + j];
                    if (g.empty()) continue;
                    for (std::size_t k = 0; k < l.ntheta; ++k) {
                        const Complex* gk = &g[k * nc];
                        const Complex* b = bevs[i].at(k, ch, nc);
                        for (std::size_t f = 0; f < nc; ++f) acc[f] += gk[f] * b[f];
                    }
                }
                fft.inverse(acc.data(), conv.data());
                auto& out = (*grad_aerial)[j];
                for (std::size_t cell = 0; cell < l.la * l.la; ++cell) out[cell * c + ch] = conv[cell] * norm;
            }
        });
    }
}

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

inline void accumulate(float* dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<float>(src[i]);
}

} // namespace detail

/// Differentiable score volume [n_t, n_t, n_theta] of one BEV/aerial pair.
inline Tensor score_volume(const Tensor& bev, const Tensor& aerial, const PoseGrid& grid, Backend backend) {
    const MatchLayout l = match_layout(grid, bev.shape(), aerial.shape());
    auto bank = rotation_bank(l.lb, l.ntheta);
    std::vector<double> volume;
    if (backend == Backend::bruteforce) {
        volume = detail::bruteforce_forward(bev.data().data(), aerial.data().data(), l, *bank);
    } else {
        BevSpectra bs(bev.data().data(), l, *bank);
        AerialSpectrum as(aerial.data().data(), l.la, l.channels);
        volume = correlate_volume(bs, as, l);
    }
    return detail::make_result("score_volume", {l.nt, l.nt, l.ntheta}, detail::to_float(volume), {bev, aerial},
                               [l, bank, backend](detail::Node& self) {
        const auto& bd = self.parents[0]->data;
        const auto& ad = self.parents[1]->data;
        std::vector<double> up(self.grad.begin(), self.grad.end());
        float* gb = detail::grad_of(self, 0);
        float* ga = detail::grad_of(self, 1);
        if (backend == Backend::bruteforce) {
            std::vector<double> dbev(bd.size(), 0.0), daer(ad.size(), 0.0);
            detail::bruteforce_backward(up.data(), bd.data(), ad.data(), l, *bank, dbev.data(), daer.data());
            if (gb) detail::accumulate(gb, dbev);
            if (ga) detail::accumulate(ga, daer);
        } else {
            std::vector<BevSpectra> bs;
            bs.emplace_back(bd.data(), l, *bank);
            std::vector<AerialSpectrum> as;
            as.emplace_back(ad.data(), l.la, l.channels);
            std::vector<std::vector<double>> dbev, daer;
            detail::fft_pairwise_backward(bs, as, {up}, l, *bank, gb ? &dbev : nullptr, ga ? &daer : nullptr);
            if (gb) detail::accumulate(gb, dbev[0]);
            if (ga) detail::accumulate(ga, daer[0]);
        }
    });
}

namespace detail {

inline void check_pixel_sizes(const BEVMap& bev, const AerialMap& aerial, const PoseGrid& grid) {
    if (std::abs(bev.pixel_size - aerial.pixel_size) > 1e-9)
        throw DomainError("BEV and aerial pixel sizes differ: " + std::to_string(bev.pixel_size) + " vs " +
                          std::to_string(aerial.pixel_size));
    if (std::abs(grid.spec.pixel_size - aerial.pixel_size) > 1e-9)
        throw DomainError("grid pixel size differs from the aerial map's");
}

} // namespace detail

inline ScoreVolume score_volume_bruteforce(const BEVMap& bev, const AerialMap& aerial, const PoseGrid& grid) {
    detail::check_pixel_sizes(bev, aerial, grid);
    return {score_volume(bev.tensor, aerial.tensor, grid, Backend::bruteforce), grid};
}

inline ScoreVolume score_volume_fft(const BEVMap& bev, const AerialMap& aerial, const PoseGrid& grid) {
    detail::check_pixel_sizes(bev, aerial, grid);
    return {score_volume(bev.tensor, aerial.tensor, grid, Backend::fft), grid};
}

struct MatchGradients {
    Tensor bev;     // [l_B, l_B, c]
    Tensor aerial;  // [l_A, l_A, c]
};

/// Gradients of <upstream, S> with respect to both maps.
inline MatchGradients score_volume_backward(const Tensor& upstream, const BEVMap& bev, const AerialMap& aerial,
                                            const PoseGrid& grid, Backend backend = Backend::fft) {
    detail::check_pixel_sizes(bev, aerial, grid);
    const MatchLayout l = match_layout(grid, bev.tensor.shape(), aerial.tensor.shape());
    require_shape(upstream, {l.nt, l.nt, l.ntheta}, "score_volume_backward upstream");
    auto bank = rotation_bank(l.lb, l.ntheta);
    std::vector<double> up(upstream.data().begin(), upstream.data().end());
    std::vector<double> dbev(bev.tensor.numel(), 0.0), daer(aerial.tensor.numel(), 0.0);
    if (backend == Backend::bruteforce) {
        detail::bruteforce_backward(up.data(), bev.tensor.data().data(), aerial.tensor.data().data(), l, *bank,
                                    dbev.data(), daer.data());
    } else {
        std::vector<BevSpectra> bs;
        bs.emplace_back(bev.tensor.data().data(), l, *bank);
        std::vector<AerialSpectrum> as;
        as.emplace_back(aerial.tensor.data().data(), l.la, l.channels);
        std::vector<std::vector<double>> gb, ga;
        detail::fft_pairwise_backward(bs, as, {up}, l, *bank, &gb, &ga);
        dbev = std::move(gb[0]);
        daer = std::move(ga[0]);
    }
    return {Tensor(bev.tensor.shape(), detail::to_float(dbev)), Tensor(aerial.tensor.shape(), detail::to_float(daer))};
}

/// Differentiable matrix of retrieval logits [n, m]:
///   out(i, j) = lse(logit_scale * S(bev_i, aerial_j)).
/// Fourier spectra are computed once per map and shared across pairs.
inline Tensor pairwise_retrieval_scores(const std::vector<Tensor>& bevs, const std::vector<Tensor>& aerials,
                                        const PoseGrid& grid, double logit_scale, Backend backend = Backend::fft) {
    if (bevs.empty() || aerials.empty()) throw DimensionError("pairwise_retrieval_scores: empty batch");
    const MatchLayout l = match_layout(grid, bevs.front().shape(), aerials.front().shape());
    for (const auto& b : bevs) match_layout(grid, b.shape(), aerials.front().shape());
    for (const auto& a : aerials) match_layout(grid, bevs.front().shape(), a.shape());
    const std::size_t n = bevs.size(), m = aerials.size(), vs = l.volume_size();
    auto bank = rotation_bank(l.lb, l.ntheta);

    std::vector<BevSpectra> bspec;
    std::vector<AerialSpectrum> aspec;
    if (backend == Backend::fft) {
        bspec.resize(n);
        aspec.resize(m);
        parallel_for(n, [&](std::size_t i) { bspec[i] = BevSpectra(bevs[i].data().data(), l, *bank); });
        parallel_for(m, [&](std::size_t j) { aspec[j] = AerialSpectrum(aerials[j].data().data(), l.la, l.channels); });
    }

    // Softmax of each scaled volume, kept for the backward pass.
    auto posteriors = std::make_shared<std::vector<std::vector<double>>>(n * m);
    std::vector<float> out(n * m);
    parallel_for(n * m, [&](std::size_t p) {
        const std::size_t i = p / m, j = p % m;
        std::vector<double> v = backend == Backend::fft
                                    ? correlate_volume(bspec[i], aspec[j], l)
                                    : detail::bruteforce_forward(bevs[i].data().data(), aerials[j].data().data(), l,
                                                                 *bank);
        double mx = -std::numeric_limits<double>::infinity();
        for (double& x : v) {
            x *= logit_scale;
            mx = std::max(mx, x);
        }
        double z = 0.0;
        for (double x : v) z += std::exp(x - mx);
        const double lse = mx + std::log(z);
        for (double& x : v) x = std::exp(x - lse);
        (*posteriors)[p] = std::move(v);
        out[p] = static_cast<float>(lse);
    });

    std::vector<Tensor> parents(bevs);
    parents.insert(parents.end(), aerials.begin(), aerials.end());
    return detail::make_result(
        "pairwise_retrieval_scores", {n, m}, std::move(out), parents,
        [l, bank, backend, n, m, vs, logit_scale, posteriors, bspec = std::move(bspec),
         aspec = std::move(aspec)](detail::Node& self) {
            std::vector<std::vector<double>> up(n * m);
            for (std::size_t p = 0; p < n * m; ++p) {
                const double g = self.grad[p];
                if (g == 0.0) continue;
                up[p].resize(vs);
                for (std::size_t v = 0; v < vs; ++v) up[p][v] = g * logit_scale * (*posteriors)[p][v];
            }
            std::vector<std::vector<double>> dbev, daer;
            if (backend == Backend::fft) {
                detail::fft_pairwise_backward(bspec, aspec, up, l, *bank, &dbev, &daer);
            } else {
                dbev.assign(n, std::vector<double>(l.lb * l.lb * l.channels, 0.0));
                daer.assign(m, std::vector<double>(l.la * l.la * l.channels, 0.0));
                for (std::size_t p = 0; p < n * m; ++p) {
                    if (up[p].empty()) continue;
                    const std::size_t i = p / m, j = p % m;
                    detail::bruteforce_backward(up[p].data(), self.parents[i]->data.data(),
                                                self.parents[n + j]->data.data(), l, *bank, dbev[i].data(),
                                                daer[j].data());
                }
            }
            for (std::size_t i = 0; i < n; ++i)
                if (float* g = detail::grad_of(self, i)) detail::accumulate(g, dbev[i]);
            for (std::size_t j = 0; j < m; ++j)
                if (float* g = detail::grad_of(self, n + j)) detail::accumulate(g, daer[j]);
        });
}

} // namespace cbev
