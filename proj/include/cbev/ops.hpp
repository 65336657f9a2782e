#pragma once

// Differentiable primitives. Layout is channel-last: feature maps are [h, w, c].

#include <cbev/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cbev {

/// Zero-padded "same" cross-correlation. kernel is [k, k, cin, cout] with k odd.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    require_rank(input, 3, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const std::size_t k = kernel.dim(0), cout = kernel.dim(3);
    if (kernel.dim(1) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
    if (kernel.dim(2) != cin)
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(2)) + " input channels, got " +
                             std::to_string(cin));
    require_shape(bias, {cout}, "conv2d bias");
    const long pad = static_cast<long>(k / 2);
    const auto in = input.data();
    const auto ker = kernel.data();
    const auto b = bias.data();

    std::vector<float> out(h * w * cout);
    std::vector<double> acc(cout);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t o = 0; o < cout; ++o) acc[o] = b[o];
            for (std::size_t dy = 0; dy < k; ++dy) {
                const long sy = static_cast<long>(y + dy) - pad;
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const long sx = static_cast<long>(x + dx) - pad;
                    if (sx < 0 || sx >= static_cast<long>(w)) continue;
                    const float* src = &in[(sy * w + sx) * cin];
                    const float* kk = &ker[(dy * k + dx) * cin * cout];
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double v = src[ci];
                        const float* krow = kk + ci * cout;
                        for (std::size_t o = 0; o < cout; ++o) acc[o] += v * krow[o];
                    }
                }
            }
            float* dst = &out[(y * w + x) * cout];
            for (std::size_t o = 0; o < cout; ++o) dst[o] = static_cast<float>(acc[o]);
        }
    }

    return detail::make_result("conv2d", {h, w, cout}, std::move(out), {input, kernel, bias},
                               [=](detail::Node& self) {
        const auto& g = self.grad;
        const auto& in_d = self.parents[0]->data;
        const auto& k_d = self.parents[1]->data;
        float* gin = detail::grad_of(self, 0);
        float* gk = detail::grad_of(self, 1);
        float* gb = detail::grad_of(self, 2);
        std::vector<double> gk_acc(gk ? k_d.size() : 0, 0.0);
        std::vector<double> gb_acc(gb ? cout : 0, 0.0);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const float* gy = &g[(y * w + x) * cout];
                if (gb)
                    for (std::size_t o = 0; o < cout; ++o) gb_acc[o] += gy[o];
                for (std::size_t dy = 0; dy < k; ++dy) {
                    const long sy = static_cast<long>(y + dy) - pad;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const long sx = static_cast<long>(x + dx) - pad;
                        if (sx < 0 || sx >= static_cast<long>(w)) continue;
                        const std::size_t src = (sy * w + sx) * cin;
                        const std::size_t kbase = (dy * k + dx) * cin * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const float* krow = &k_d[kbase + ci * cout];
                            if (gin) {
                                double s = 0.0;
                                for (std::size_t o = 0; o < cout; ++o) s += static_cast<double>(gy[o]) * krow[o];
                                gin[src + ci] += static_cast<float>(s);
                            }
                            if (gk) {
                                const double v = in_d[src + ci];
                                double* gkrow = &gk_acc[kbase + ci * cout];
                                for (std::size_t o = 0; o < cout; ++o) gkrow[o] += v * gy[o];
                            }
                        }
                    }
                }
            }
        }
        if (gk)
            for (std::size_t i = 0; i < gk_acc.size(); ++i) gk[i] += static_cast<float>(gk_acc[i]);
        if (gb)
            for (std::size_t o = 0; o < cout; ++o) gb[o] += static_cast<float>(gb_acc[o]);
    });
}

inline Tensor relu(const Tensor& x) {
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = std::max(v, 0.0f);
    return detail::make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (self.data[i] > 0.0f) gx[i] += self.grad[i];
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_shape(b, a.shape(), "add");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (float* g = detail::grad_of(self, p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_shape(b, a.shape(), "mul");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& ad = self.parents[0]->data;
        const auto& bd = self.parents[1]->data;
        if (float* ga = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bd[i];
        if (float* gb = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * ad[i];
    });
}

inline Tensor scale(const Tensor& x, float s) {
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= s;
    return detail::make_result("scale", x.shape(), std::move(out), {x}, [s](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += s * self.grad[i];
    });
}

/// Sum of all elements weighted by a constant vector (a fixed linear functional).
inline Tensor weighted_sum(const Tensor& x, std::vector<float> weights) {
    if (weights.size() != x.numel()) throw DimensionError("weighted_sum: weight count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * x[i];
    return detail::make_result("weighted_sum", {}, {static_cast<float>(s)}, {x},
                               [w = std::move(weights)](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < w.size(); ++i) gx[i] += self.grad[0] * w[i];
    });
}

inline Tensor sum(const Tensor& x) { return weighted_sum(x, std::vector<float>(x.numel(), 1.0f)); }

/// Softmax along one axis, max-shifted.
inline Tensor softmax_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.ndim())
        throw DimensionError("softmax_axis: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    const auto in = x.data();
    std::vector<float> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            float m = -std::numeric_limits<float>::infinity();
            for (std::size_t a = 0; a < n; ++a) m = std::max(m, in[base + a * inner]);
            double z = 0.0;
            for (std::size_t a = 0; a < n; ++a) z += std::exp(static_cast<double>(in[base + a * inner]) - m);
            for (std::size_t a = 0; a < n; ++a)
                out[base + a * inner] = static_cast<float>(std::exp(static_cast<double>(in[base + a * inner]) - m) / z);
        }
    }
    return detail::make_result("softmax_axis", x.shape(), std::move(out), {x},
                               [outer, inner, n](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * n * inner + i;
                double dot = 0.0;
                for (std::size_t a = 0; a < n; ++a) dot += static_cast<double>(g[base + a * inner]) * y[base + a * inner];
                for (std::size_t a = 0; a < n; ++a) {
                    const std::size_t idx = base + a * inner;
                    gx[idx] += static_cast<float>(y[idx] * (g[idx] - dot));
                }
            }
        }
    });
}

namespace detail {

inline double logsumexp_values(std::span<const float> v) {
    if (v.empty()) throw DomainError("logsumexp of an empty tensor");
    float m = *std::max_element(v.begin(), v.end());
    double z = 0.0;
    for (float a : v) z += std::exp(static_cast<double>(a) - m);
    return m + std::log(z);
}

} // namespace detail

/// log sum exp over all elements; adjoint is the softmax of the input.
inline Tensor logsumexp(const Tensor& x) {
    const double lse = detail::logsumexp_values(x.data());
    return detail::make_result("logsumexp", {}, {static_cast<float>(lse)}, {x}, [lse](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        const auto& in = self.parents[0]->data;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < in.size(); ++i) gx[i] += static_cast<float>(g * std::exp(in[i] - lse));
    });
}

namespace detail {

/// Expands a mask of shape x.shape or x.shape minus its last axis to per-element weights.
inline std::vector<float> expand_mask(const Tensor& x, const Tensor& mask, const char* op) {
    if (mask.shape() == x.shape()) return {mask.data().begin(), mask.data().end()};
    Shape spatial(x.shape().begin(), x.shape().end() - (x.ndim() ? 1 : 0));
    if (mask.shape() != spatial)
        throw DimensionError(std::string(op) + ": mask shape " + shape_str(mask.shape()) + " incompatible with " +
                             shape_str(x.shape()));
    const std::size_t c = x.shape().back();
    std::vector<float> m(x.numel());
    for (std::size_t i = 0; i < mask.numel(); ++i)
        for (std::size_t k = 0; k < c; ++k) m[i * c + k] = mask[i];
    return m;
}

} // namespace detail

/// Multiplies by a constant mask ([h, w] broadcast over channels, or full shape).
inline Tensor apply_mask(const Tensor& x, const Tensor& mask) {
    auto m = detail::expand_mask(x, mask, "apply_mask");
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * m[i];
    return detail::make_result("apply_mask", x.shape(), std::move(out), {x}, [m = std::move(m)](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < m.size(); ++i) gx[i] += self.grad[i] * m[i];
    });
}

/// Scales x so the Frobenius norm over unmasked elements is 1; masked elements become 0.
inline Tensor l2_normalize_global(const Tensor& x, const std::optional<Tensor>& mask = std::nullopt) {
    std::vector<float> m = mask ? detail::expand_mask(x, *mask, "l2_normalize_global")
                                : std::vector<float>(x.numel(), 1.0f);
    double sq = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double z = static_cast<double>(x[i]) * m[i];
        sq += z * z;
    }
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) throw DegenerateNormError("l2_normalize_global: norm over unmasked elements is zero");
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(static_cast<double>(x[i]) * m[i] / norm);
    return detail::make_result("l2_normalize_global", x.shape(), std::move(out), {x},
                               [m = std::move(m), norm](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        const auto& y = self.data;
        const auto& g = self.grad;
        double dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) dot += static_cast<double>(y[i]) * g[i];
        for (std::size_t i = 0; i < y.size(); ++i)
            gx[i] += static_cast<float>(m[i] * (g[i] - y[i] * dot) / norm);
    });
}

/// One bilinear tap set: up to four (source index, weight) pairs, or invalid.
struct BilinearTaps {
    std::size_t index[4]{};
    float weight[4]{};
    bool valid = false;
};

/// Bilinear taps for a continuous (x = column, y = row) coordinate on an h x w grid.
/// A sample is valid when every corner with non-zero weight lies inside the grid.
inline BilinearTaps bilinear_taps(double x, double y, std::size_t h, std::size_t w) {
    constexpr double eps = 1e-6;
    BilinearTaps t;
    if (!(x >= -eps && y >= -eps && x <= static_cast<double>(w - 1) + eps && y <= static_cast<double>(h - 1) + eps))
        return t;
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(x));
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    t.index[0] = y0 * w + x0;
    t.index[1] = y0 * w + x1;
    t.index[2] = y1 * w + x0;
    t.index[3] = y1 * w + x1;
    t.weight[0] = static_cast<float>((1 - fx) * (1 - fy));
    t.weight[1] = static_cast<float>(fx * (1 - fy));
    t.weight[2] = static_cast<float>((1 - fx) * fy);
    t.weight[3] = static_cast<float>(fx * fy);
    t.valid = true;
    return t;
}

struct SampleResult {
    Tensor values;    // [h', w', c]
    Tensor validity;  // [h', w'], 1 for valid samples
};

/// Bilinear resampling of input[h, w, c] at coords[h', w', 2] given as (column, row)
/// in pixel units. Invalid samples output 0. Gradient flows to input only.
inline SampleResult bilinear_sample(const Tensor& input, const Tensor& coords) {
    require_rank(input, 3, "bilinear_sample input");
    require_rank(coords, 3, "bilinear_sample coords");
    if (coords.dim(2) != 2) throw DimensionError("bilinear_sample: coords must be [h', w', 2]");
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    const std::size_t oh = coords.dim(0), ow = coords.dim(1);
    std::vector<BilinearTaps> taps(oh * ow);
    std::vector<float> valid(oh * ow, 0.0f);
    for (std::size_t i = 0; i < taps.size(); ++i) {
        taps[i] = bilinear_taps(coords[2 * i], coords[2 * i + 1], h, w);
        valid[i] = taps[i].valid ? 1.0f : 0.0f;
    }
    const auto in = input.data();
    std::vector<float> out(oh * ow * c, 0.0f);
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (!taps[i].valid) continue;
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (int t = 0; t < 4; ++t) s += static_cast<double>(taps[i].weight[t]) * in[taps[i].index[t] * c + k];
            out[i * c + k] = static_cast<float>(s);
        }
    }
    Tensor values = detail::make_result("bilinear_sample", {oh, ow, c}, std::move(out), {input},
                                        [taps = std::move(taps), c](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < taps.size(); ++i) {
            if (!taps[i].valid) continue;
            for (int t = 0; t < 4; ++t) {
                const float wgt = taps[i].weight[t];
                if (wgt == 0.0f) continue;
                for (std::size_t k = 0; k < c; ++k) gx[taps[i].index[t] * c + k] += wgt * self.grad[i * c + k];
            }
        }
    });
    return {values, Tensor({oh, ow}, std::move(valid))};
}

/// Spatial mean of a [h, w, c] map, giving [c].
inline Tensor mean_pool(const Tensor& x) {
    require_rank(x, 3, "mean_pool");
    const std::size_t n = x.dim(0) * x.dim(1), c = x.dim(2);
    std::vector<double> acc(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) acc[k] += x[i * c + k];
    std::vector<float> out(c);
    for (std::size_t k = 0; k < c; ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(n));
    return detail::make_result("mean_pool", {c}, std::move(out), {x}, [n, c](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        const float inv = 1.0f / static_cast<float>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < c; ++k) gx[i * c + k] += self.grad[k] * inv;
    });
}

/// Affine map x[n] -> x W + b, with W [n, m].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 1, "linear input");
    require_rank(weight, 2, "linear weight");
    const std::size_t n = x.dim(0), m = weight.dim(1);
    if (weight.dim(0) != n) throw DimensionError("linear: weight rows do not match input size");
    require_shape(bias, {m}, "linear bias");
    std::vector<float> out(m);
    for (std::size_t j = 0; j < m; ++j) {
        double s = bias[j];
        for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * weight[i * m + j];
        out[j] = static_cast<float>(s);
    }
    return detail::make_result("linear", {m}, std::move(out), {x, weight, bias}, [n, m](detail::Node& self) {
        const auto& xd = self.parents[0]->data;
        const auto& wd = self.parents[1]->data;
        const auto& g = self.grad;
        if (float* gx = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(g[j]) * wd[i * m + j];
                gx[i] += static_cast<float>(s);
            }
        if (float* gw = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gw[i * m + j] += xd[i] * g[j];
        if (float* gb = detail::grad_of(self, 2))
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[j];
    });
}

/// Stacks equally shaped rank-1 tensors into [n, e].
inline Tensor stack(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack: no tensors");
    const std::size_t e = rows.front().numel();
    std::vector<float> out;
    out.reserve(rows.size() * e);
    for (const auto& r : rows) {
        require_shape(r, {e}, "stack");
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    return detail::make_result("stack", {rows.size(), e}, std::move(out), rows, [e](detail::Node& self) {
        for (std::size_t r = 0; r < self.parents.size(); ++r)
            if (float* g = detail::grad_of(self, r))
                for (std::size_t i = 0; i < e; ++i) g[i] += self.grad[r * e + i];
    });
}

/// A[n, e] times B[m, e] transposed, giving [n, m].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt lhs");
    require_rank(b, 2, "matmul_nt rhs");
    const std::size_t n = a.dim(0), m = b.dim(0), e = a.dim(1);
    if (b.dim(1) != e) throw DimensionError("matmul_nt: inner dimensions differ");
    std::vector<float> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < e; ++k) s += static_cast<double>(a[i * e + k]) * b[j * e + k];
            out[i * m + j] = static_cast<float>(s);
        }
    return detail::make_result("matmul_nt", {n, m}, std::move(out), {a, b}, [n, m, e](detail::Node& self) {
        const auto& ad = self.parents[0]->data;
        const auto& bd = self.parents[1]->data;
        const auto& g = self.grad;
        if (float* ga = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < e; ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(g[i * m + j]) * bd[j * e + k];
                    ga[i * e + k] += static_cast<float>(s);
                }
        if (float* gb = detail::grad_of(self, 1))
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t k = 0; k < e; ++k) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(g[i * m + j]) * ad[i * e + k];
                    gb[j * e + k] += static_cast<float>(s);
                }
    });
}

/// x[h, w, d] + bias[h, d], broadcast over the middle axis.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank(x, 3, "add_row_bias");
    const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
    require_shape(bias, {h, d}, "add_row_bias bias");
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t k = 0; k < d; ++k) out[(i * w + j) * d + k] = x[(i * w + j) * d + k] + bias[i * d + k];
    return detail::make_result("add_row_bias", x.shape(), std::move(out), {x, bias}, [h, w, d](detail::Node& self) {
        const auto& g = self.grad;
        if (float* gx = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        if (float* gb = detail::grad_of(self, 1))
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    for (std::size_t k = 0; k < d; ++k) gb[i * d + k] += g[(i * w + j) * d + k];
    });
}

/// Column-wise attention: out[k, j, :] = sum_i weights[i, j, k] * values[i, j, :].
/// weights is [h, w, d], values [h, w, c]; the result is [d, w, c].
inline Tensor column_attention(const Tensor& weights, const Tensor& values) {
    require_rank(weights, 3, "column_attention weights");
    require_rank(values, 3, "column_attention values");
    const std::size_t h = weights.dim(0), w = weights.dim(1), d = weights.dim(2), c = values.dim(2);
    if (values.dim(0) != h || values.dim(1) != w)
        throw DimensionError("column_attention: weights and values disagree spatially");
    std::vector<float> out(d * w * c);
    std::vector<double> acc(c);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t j = 0; j < w; ++j) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t i = 0; i < h; ++i) {
                const double a = weights[(i * w + j) * d + k];
                for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += a * values[(i * w + j) * c + ch];
            }
            for (std::size_t ch = 0; ch < c; ++ch) out[(k * w + j) * c + ch] = static_cast<float>(acc[ch]);
        }
    return detail::make_result("column_attention", {d, w, c}, std::move(out), {weights, values},
                               [h, w, d, c](detail::Node& self) {
        const auto& ad = self.parents[0]->data;
        const auto& vd = self.parents[1]->data;
        const auto& g = self.grad;
        float* ga = detail::grad_of(self, 0);
        float* gv = detail::grad_of(self, 1);
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t j = 0; j < w; ++j) {
                const float* gk = &g[(k * w + j) * c];
                for (std::size_t i = 0; i < h; ++i) {
                    const std::size_t vi = (i * w + j) * c;
                    const std::size_t ai = (i * w + j) * d + k;
                    if (ga) {
                        double s = 0.0;
                        for (std::size_t ch = 0; ch < c; ++ch) s += static_cast<double>(gk[ch]) * vd[vi + ch];
                        ga[ai] += static_cast<float>(s);
                    }
                    if (gv) {
                        const float a = ad[ai];
                        for (std::size_t ch = 0; ch < c; ++ch) gv[vi + ch] += a * gk[ch];
                    }
                }
            }
    });
}

/// Appends column 0 after the last column of x[h, w, c] so bilinear sampling can wrap.
inline Tensor wrap_columns(const Tensor& x) {
    require_rank(x, 3, "wrap_columns");
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<float> out(h * (w + 1) * c);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j <= w; ++j)
            for (std::size_t k = 0; k < c; ++k) out[(i * (w + 1) + j) * c + k] = x[(i * w + (j % w)) * c + k];
    return detail::make_result("wrap_columns", {h, w + 1, c}, std::move(out), {x}, [h, w, c](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j <= w; ++j)
                for (std::size_t k = 0; k < c; ++k) gx[(i * w + (j % w)) * c + k] += self.grad[(i * (w + 1) + j) * c + k];
    });
}

} // namespace cbev
