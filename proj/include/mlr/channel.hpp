// SPDX-License-Identifier: Apache-2.0
//
// mimo-lr: low-rank MIMO channel estimation laboratory
// Copyright (C) 2026 The mimo-lr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

// Discrete MIMO taps from rays, pilot transmission and noisy reception.
//
// Index conventions used throughout the library:
//   H[w]         N_R x N_T tap matrix
//   ST matrix    N_T N_R x W, column w = vec(H[w]) (column-major, so row index t*N_R + r)
//   h            vec(ST matrix), element w*N_T*N_R + t*N_R + r

#ifndef MLR_CHANNEL_HPP
#define MLR_CHANNEL_HPP

#include "mlr/errors.hpp"
#include "mlr/numerics.hpp"
#include "mlr/random.hpp"
#include "mlr/scenario.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

namespace mlr
{

struct ArrayGeometry
{
    std::size_t n_az = 1;
    std::size_t n_el = 1;

    std::size_t size() const noexcept { return n_az * n_el; }
    bool operator==(const ArrayGeometry &) const = default;
};

// Half-wavelength UPA response: elevation factor (x) azimuth factor.
inline CVec steering_vector(const ArrayGeometry &g, double az, double el)
{
    if (g.n_az == 0 || g.n_el == 0)
        throw InvalidArgument("steering_vector: empty array");
    const double ka = std::numbers::pi * std::sin(az);
    const double ke = std::numbers::pi * std::sin(el);
    CVec a(g.size());
    for (std::size_t e = 0; e < g.n_el; ++e)
        for (std::size_t k = 0; k < g.n_az; ++k)
            a[e * g.n_az + k] = std::polar(1.0, ka * double(k) + ke * double(e));
    return a;
}

// Raised-cosine pulse truncated to |t| <= truncation * T.
struct PulseShape
{
    double rolloff = 0.25;
    double symbol_time = 20e-9;
    double truncation = 8.0;

    double operator()(double t) const { return at_symbols(t / symbol_time); }

    // g evaluated at x symbol times. Tap sampling uses this with x = w - tau / T so integer
    // offsets stay exact.
    double at_symbols(double x) const
    {
        if (std::abs(x) > truncation)
            return 0.0;
        if (x == 0.0)
            return 1.0;
        if (x == std::round(x))
            return 0.0; // exact Nyquist zeros; sin(pi k) only rounds to ~1e-16
        const double sinc = std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        const double d = 2.0 * rolloff * x;
        if (std::abs(std::abs(d) - 1.0) < 1e-10)
            return std::numbers::pi / 4.0 * std::sin(std::numbers::pi / (2.0 * rolloff)) /
                   (std::numbers::pi / (2.0 * rolloff));
        return sinc * std::cos(std::numbers::pi * rolloff * x) / (1.0 - d * d);
    }
};

struct ChannelDims
{
    std::size_t n_t = 1;
    std::size_t n_r = 1;
    std::size_t w = 1;

    std::size_t space() const noexcept { return n_t * n_r; }
    std::size_t total() const noexcept { return n_t * n_r * w; }
    bool operator==(const ChannelDims &) const = default;
};

struct ChannelRealization
{
    ChannelDims dims;
    CVec h; // length W*N_T*N_R, see header comment

    ComplexMat tap(std::size_t w) const
    {
        const std::size_t s = dims.space();
        return ComplexMat(dims.n_r, dims.n_t, CVec(h.begin() + std::ptrdiff_t(w * s), h.begin() + std::ptrdiff_t((w + 1) * s)));
    }
    ComplexMat st_matrix() const { return ComplexMat(dims.space(), dims.w, h); }
};

inline ChannelRealization build_taps(const RaySet &rs, std::span<const cx> alphas, const ArrayGeometry &tx,
                                     const ArrayGeometry &rx, const PulseShape &pulse, std::size_t w_count)
{
    if (alphas.size() != rs.rays.size())
        throw DimensionMismatch("build_taps: fading draw does not match ray set");
    if (w_count == 0)
        throw InvalidArgument("build_taps: W must be >= 1");
    const double T = pulse.symbol_time;
    ChannelRealization ch;
    ch.dims = {tx.size(), rx.size(), w_count};
    ch.h.assign(ch.dims.total(), cx{});
    const std::size_t nt = tx.size(), nr = rx.size();

    for (std::size_t p = 0; p < rs.rays.size(); ++p)
    {
        const Ray &ray = rs.rays[p];
        if (ray.delay >= (double(w_count) + pulse.truncation) * T)
            throw DelayOverflow("build_taps: delay " + std::to_string(ray.delay) + " s beyond the tap window");
        const CVec at = steering_vector(tx, ray.dod_az, ray.dod_el);
        const CVec ar = steering_vector(rx, ray.doa_az, ray.doa_el);
        for (std::size_t w = 0; w < w_count; ++w)
        {
            const double g = pulse.at_symbols(double(w) - ray.delay / T);
            if (g == 0.0)
                continue;
            const cx c = alphas[p] * g;
            cx *hw = ch.h.data() + w * nt * nr;
            for (std::size_t t = 0; t < nt; ++t)
            {
                const cx ct = c * at[t];
                for (std::size_t r = 0; r < nr; ++r)
                    hw[t * nr + r] += ct * ar[r];
            }
        }
    }
    return ch;
}

// Number of singular values above eps * s_max.
inline std::size_t numerical_rank(const ComplexMat &a, double eps = 1e-9)
{
    const ThinSvd svd = a.rows() >= a.cols() ? thin_svd(a) : thin_svd(a.adjoint());
    if (svd.s.empty() || svd.s[0] == 0.0)
        return 0;
    std::size_t r = 0;
    for (double s : svd.s)
        if (s > eps * svd.s[0])
            ++r;
    return r;
}

struct DiversityOrders
{
    std::size_t tx = 0; // r_S^Tx
    std::size_t rx = 0; // r_S^Rx
    std::size_t t = 0;  // r_T

    bool operator==(const DiversityOrders &) const = default;
};

// Steering matrices and the delayed-pulse matrix G(tau) of a ray set.
struct RayMatrices
{
    ComplexMat a_t; // N_T x P
    ComplexMat a_r; // N_R x P
    ComplexMat g;   // W x P
};

inline RayMatrices ray_matrices(const RaySet &rs, const ArrayGeometry &tx, const ArrayGeometry &rx,
                                const PulseShape &pulse, std::size_t w_count)
{
    const std::size_t P = rs.rays.size();
    if (P == 0)
        throw InvalidArgument("ray_matrices: empty ray set");
    RayMatrices m{ComplexMat(tx.size(), P), ComplexMat(rx.size(), P), ComplexMat(w_count, P)};
    for (std::size_t p = 0; p < P; ++p)
    {
        const Ray &ray = rs.rays[p];
        auto at = steering_vector(tx, ray.dod_az, ray.dod_el);
        auto ar = steering_vector(rx, ray.doa_az, ray.doa_el);
        std::copy(at.begin(), at.end(), m.a_t.col(p).begin());
        std::copy(ar.begin(), ar.end(), m.a_r.col(p).begin());
        for (std::size_t w = 0; w < w_count; ++w)
            m.g(w, p) = pulse.at_symbols(double(w) - ray.delay / pulse.symbol_time);
    }
    return m;
}

inline DiversityOrders diversity_orders(const RaySet &rs, const ArrayGeometry &tx, const ArrayGeometry &rx,
                                        const PulseShape &pulse, std::size_t w_count, double eps_rank = 1e-9)
{
    const auto m = ray_matrices(rs, tx, rx, pulse, w_count);
    return {numerical_rank(m.a_t, eps_rank), numerical_rank(m.a_r, eps_rank), numerical_rank(m.g, eps_rank)};
}

// ---- pilots, noise and reception ----

// i.i.d. QPSK, per-entry power sigma_x2.
inline ComplexMat generate_pilot(std::size_t n_t, std::size_t n_p, double sigma_x2, Rng &rng)
{
    if (n_p == 0 || n_t == 0)
        throw InvalidArgument("generate_pilot: n_p and n_t must be >= 1");
    const double a = std::sqrt(sigma_x2 / 2.0);
    ComplexMat x(n_t, n_p);
    for (auto &v : x.data())
    {
        const std::uint64_t bits = rng();
        v = cx((bits & 1u) ? a : -a, (bits & 2u) ? a : -a);
    }
    return x;
}

// Staggered impulses: Tx antenna t transmits one symbol at time t*W. Every row of the pilot
// convolution matrix then has a single non-zero in its own column, so the LS normal matrix is
// exactly sigma_x2 * N_p * I and the LS error is exactly white. Average power stays sigma_x2.
inline ComplexMat orthogonal_pilot(std::size_t n_t, std::size_t w, double sigma_x2)
{
    const std::size_t np = n_t * w;
    ComplexMat x(n_t, np);
    for (std::size_t t = 0; t < n_t; ++t)
        x(t, t * w) = std::sqrt(sigma_x2 * double(np));
    return x;
}

inline std::size_t default_pilot_length(const ChannelDims &d) { return 2 * d.w * d.n_t; }

struct NoiseModel
{
    ComplexMat q_n;

    static NoiseModel white(std::size_t n_r, double sigma2)
    {
        return {ComplexMat::identity(n_r) * cx{sigma2, 0.0}};
    }

    // b * sigma2 * (rho * a a^H + I) for an interferer seen from (az, el).
    static NoiseModel directional(const ArrayGeometry &rx, double az, double el, double rho, double sigma2)
    {
        const CVec a = steering_vector(rx, az, el);
        ComplexMat q = ComplexMat::identity(rx.size());
        for (std::size_t j = 0; j < a.size(); ++j)
            for (std::size_t i = 0; i < a.size(); ++i)
                q(i, j) += rho * a[i] * std::conj(a[j]);
        return {q * cx{sigma2, 0.0}};
    }

    std::size_t n_r() const noexcept { return q_n.rows(); }
    double trace() const
    {
        double t = 0.0;
        for (std::size_t i = 0; i < q_n.rows(); ++i)
            t += q_n(i, i).real();
        return t;
    }
    NoiseModel scaled(double s) const { return {q_n * cx{s, 0.0}}; }
};

struct PilotObservation
{
    ComplexMat pilot; // N_T x N_p
    ComplexMat rx;    // N_R x (N_p + W - 1)
    double sigma_x2 = 1.0;
    NoiseModel noise;
    std::size_t w = 1;
};

// Noise-free convolution sum_k H[k] x[n-k], n = 0 .. N_p + W - 2.
inline ComplexMat convolve(const ChannelRealization &ch, const ComplexMat &pilot)
{
    const auto &d = ch.dims;
    if (pilot.rows() != d.n_t)
        throw DimensionMismatch("convolve: pilot rows != N_T");
    const std::size_t np = pilot.cols();
    ComplexMat y(d.n_r, np + d.w - 1);
    for (std::size_t k = 0; k < d.w; ++k)
    {
        const cx *hk = ch.h.data() + k * d.space();
        for (std::size_t n = 0; n < np; ++n)
        {
            auto yn = y.col(n + k);
            for (std::size_t t = 0; t < d.n_t; ++t)
            {
                const cx x = pilot(t, n);
                for (std::size_t r = 0; r < d.n_r; ++r)
                    yn[r] += hk[t * d.n_r + r] * x;
            }
        }
    }
    return y;
}

// n[w] = Q_n^{H/2} z[w], z ~ CN(0, I), i.i.d. in time.
inline ComplexMat draw_noise(const NoiseModel &noise, std::size_t samples, Rng &rng)
{
    const ComplexMat l = cholesky_lower(noise.q_n);
    const std::size_t n = noise.n_r();
    ComplexMat z(n, samples);
    for (auto &v : z.data())
        v = complex_normal(rng, 1.0);
    return l * z;
}

inline PilotObservation transmit(const ChannelRealization &ch, const ComplexMat &pilot, double sigma_x2,
                                 const NoiseModel &noise, Rng &rng, bool noiseless = false)
{
    if (noise.n_r() != ch.dims.n_r)
        throw DimensionMismatch("transmit: Q_n dimension != N_R");
    PilotObservation obs{pilot, convolve(ch, pilot), sigma_x2, noise, ch.dims.w};
    if (!noiseless)
        obs.rx += draw_noise(noise, obs.rx.cols(), rng);
    return obs;
}

inline double to_db(double x) { return 10.0 * std::log10(x); }
inline double from_db(double x) { return std::pow(10.0, x / 10.0); }

// Received signal power per sample over the fully-overlapped window (every tap sees pilot
// symbols), divided by tr(Q_n). Total power over the array, not per antenna.
inline double snr_db(const ChannelRealization &ch, const ComplexMat &pilot, const NoiseModel &noise)
{
    const ComplexMat s = convolve(ch, pilot);
    const std::size_t w = ch.dims.w, np = pilot.cols();
    if (np < w)
        throw InvalidArgument("snr_db: pilot shorter than the channel");
    double p = 0.0;
    for (std::size_t n = w - 1; n < np; ++n)
        p += norm2(s.col(n));
    p /= double(np - w + 1);
    return to_db(p / noise.trace());
}

// Expected per-sample received power over pilot statistics: sigma_x2 * ||h||^2.
inline double expected_signal_power(const ChannelRealization &ch, double sigma_x2)
{
    return sigma_x2 * norm2(ch.h);
}

// Scales the template so mean expected signal power over the ensemble / tr(Q_n) hits the target.
inline NoiseModel calibrate_noise(double target_snr_db, std::span<const ChannelRealization> ensemble, double sigma_x2,
                                  const NoiseModel &templ)
{
    if (!std::isfinite(target_snr_db))
        throw InvalidConfig("snr_db", "target SNR must be finite");
    if (ensemble.empty())
        throw InvalidArgument("calibrate_noise: empty ensemble");
    if (!(templ.trace() > 0.0))
        throw InvalidArgument("calibrate_noise: template trace must be positive");
    double p = 0.0;
    for (const auto &ch : ensemble)
        p += expected_signal_power(ch, sigma_x2);
    p /= double(ensemble.size());
    if (!(p > 0.0))
        throw DegenerateDenominator("calibrate_noise: ensemble carries no signal power");
    return templ.scaled(p / from_db(target_snr_db) / templ.trace());
}

// ---- dataset file ----

struct DatasetRecord
{
    std::uint32_t position_id = 0;
    std::uint16_t trajectory_id = 0;
    CVec h_true;
    CVec h_ls;

    bool operator==(const DatasetRecord &) const = default;
};

struct Dataset
{
    ChannelDims dims;
    std::string scenario_id;
    std::vector<DatasetRecord> records;

    bool operator==(const Dataset &) const = default;
};

namespace detail
{

template <class T> void put_le(std::ostream &out, T v)
{
    static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
    out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <class T> T get_le(std::istream &in, const char *what)
{
    T v{};
    in.read(reinterpret_cast<char *>(&v), sizeof(T));
    if (!in)
        throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}

inline void put_cvec(std::ostream &out, std::span<const cx> v)
{
    for (const cx &x : v)
    {
        put_le(out, x.real());
        put_le(out, x.imag());
    }
}

inline CVec get_cvec(std::istream &in, std::size_t n, const char *what)
{
    CVec v(n);
    for (auto &x : v)
    {
        const double re = get_le<double>(in, what);
        const double im = get_le<double>(in, what);
        x = {re, im};
    }
    return v;
}

inline void put_string(std::ostream &out, const std::string &s)
{
    put_le(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_string(std::istream &in, const char *what)
{
    const auto n = get_le<std::uint32_t>(in, what);
    if (n > (1u << 20))
        throw FormatError(std::string("implausible string length in ") + what);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in)
        throw FormatError(std::string("truncated file while reading ") + what);
    return s;
}

inline void expect_magic(std::istream &in, const char (&magic)[5])
{
    char m[4];
    in.read(m, 4);
    if (!in || std::memcmp(m, magic, 4) != 0)
        throw FormatError(std::string("bad magic, expected ") + magic);
}

} // namespace detail

inline constexpr std::uint16_t kDatasetVersion = 1;

// Layout: "MLRD", u16 version, u32 N_T, u32 N_R, u32 W, u32 M, u32 id length + id bytes,
// then M records {u32 position_id, u16 trajectory_id, h_true, h_ls} with f64 re/im pairs.
inline void write_dataset(const std::string &path, const Dataset &ds)
{
    const std::size_t n = ds.dims.total();
    for (const auto &r : ds.records)
        if (r.h_true.size() != n || r.h_ls.size() != n)
            throw DimensionMismatch("write_dataset: record length differs from W*N_T*N_R");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write dataset: " + path);
    out.write("MLRD", 4);
    detail::put_le(out, kDatasetVersion);
    detail::put_le(out, static_cast<std::uint32_t>(ds.dims.n_t));
    detail::put_le(out, static_cast<std::uint32_t>(ds.dims.n_r));
    detail::put_le(out, static_cast<std::uint32_t>(ds.dims.w));
    detail::put_le(out, static_cast<std::uint32_t>(ds.records.size()));
    detail::put_string(out, ds.scenario_id);
    for (const auto &r : ds.records)
    {
        detail::put_le(out, r.position_id);
        detail::put_le(out, r.trajectory_id);
        detail::put_cvec(out, r.h_true);
        detail::put_cvec(out, r.h_ls);
    }
    if (!out)
        throw IoError("write failed: " + path);
}

inline Dataset read_dataset(const std::string &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open dataset: " + path);
    detail::expect_magic(in, "MLRD");
    const auto version = detail::get_le<std::uint16_t>(in, "version");
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    ds.dims.n_t = detail::get_le<std::uint32_t>(in, "header");
    ds.dims.n_r = detail::get_le<std::uint32_t>(in, "header");
    ds.dims.w = detail::get_le<std::uint32_t>(in, "header");
    const auto m = detail::get_le<std::uint32_t>(in, "header");
    ds.scenario_id = detail::get_string(in, "scenario id");
    if (ds.dims.n_t == 0 || ds.dims.n_r == 0 || ds.dims.w == 0)
        throw FormatError("dataset dimensions must be >= 1");
    const std::size_t n = ds.dims.total();
    ds.records.reserve(m);
    for (std::uint32_t k = 0; k < m; ++k)
    {
        DatasetRecord r;
        r.position_id = detail::get_le<std::uint32_t>(in, "record");
        r.trajectory_id = detail::get_le<std::uint16_t>(in, "record");
        r.h_true = detail::get_cvec(in, n, "record");
        r.h_ls = detail::get_cvec(in, n, "record");
        ds.records.push_back(std::move(r));
    }
    return ds;
}

} // namespace mlr

#endif
