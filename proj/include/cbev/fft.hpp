#pragma once

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

namespace cbev {

using Complex = std::complex<double>;

/// Unnormalized 2-D real DFT of an n x n array (FFTW). inverse(forward(x)) == n*n*x.
class RealFft2d {
public:
    explicit RealFft2d(std::size_t n) : n_(n) {
        std::vector<double> real(n * n);
        std::vector<Complex> spec(n * (n / 2 + 1));
        auto* r = real.data();
        auto* s = reinterpret_cast<fftw_complex*>(spec.data());
        const int ni = static_cast<int>(n);
        forward_ = fftw_plan_dft_r2c_2d(ni, ni, r, s, FFTW_ESTIMATE | FFTW_UNALIGNED);
        inverse_ = fftw_plan_dft_c2r_2d(ni, ni, s, r, FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    ~RealFft2d() {
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
    }
    RealFft2d(const RealFft2d&) = delete;
    RealFft2d& operator=(const RealFft2d&) = delete;

    std::size_t size() const { return n_; }
    std::size_t spectrum_size() const { return n_ * (n_ / 2 + 1); }

    // Plan execution with new arrays is thread-safe in FFTW; planning is not.
    void forward(const double* in, Complex* out) const {
        fftw_execute_dft_r2c(forward_, const_cast<double*>(in), reinterpret_cast<fftw_complex*>(out));
    }

    /// Overwrites `in` (c2r transforms destroy their input).
    void inverse(Complex* in, double* out) const {
        fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(in), out);
    }

private:
    std::size_t n_;
    fftw_plan forward_;
    fftw_plan inverse_;
};

/// Shared plan for size n; created once under a lock.
inline const RealFft2d& fft_plan(std::size_t n) {
    static std::mutex mutex;
    static std::map<std::size_t, std::unique_ptr<RealFft2d>> plans;
    std::lock_guard lock(mutex);
    auto& p = plans[n];
    if (!p) p = std::make_unique<RealFft2d>(n);
    return *p;
}

} // namespace cbev
