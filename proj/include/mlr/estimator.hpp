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

// LS estimation, whitening, space-time sample correlations and low-rank projection.
//
// A channel vector h is viewed as a tensor X[r, t, w] (Rx fastest, time slowest). The
// composite basis is U = conj(U_T) (x) conj(U_Tx) (x) U_Rx, so the Tx and time eigenmodes
// are taken from conjugated correlations:
//   R_Rx = 1/L sum X_(Rx) X_(Rx)^H
//   R_Tx = 1/L sum conj(X_(Tx)) X_(Tx)^T
//   R_T  = 1/L sum conj(X_(T)) X_(T)^T
// With this choice any channel whose fibers lie in the estimated spans is a fixed point.

#ifndef MLR_ESTIMATOR_HPP
#define MLR_ESTIMATOR_HPP

#include "mlr/channel.hpp"
#include "mlr/errors.hpp"
#include "mlr/numerics.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace mlr
{

using Ranks = DiversityOrders;

// ---- tensor helpers ----

enum class Mode
{
    rx,
    tx,
    time
};

inline std::size_t mode_size(const ChannelDims &d, Mode m)
{
    return m == Mode::rx ? d.n_r : m == Mode::tx ? d.n_t : d.w;
}

// In-place x <- (A along `mode`) x for the tensor view of x, A square of the mode size.
inline void mode_apply(std::span<cx> x, const ChannelDims &d, Mode mode, const ComplexMat &a)
{
    const std::size_t n = mode_size(d, mode);
    if (a.rows() != n || a.cols() != n || x.size() != d.total())
        throw DimensionMismatch("mode_apply: operator or vector size mismatch");
    const std::size_t stride = mode == Mode::rx ? 1 : mode == Mode::tx ? d.n_r : d.n_r * d.n_t;
    const std::size_t fibers = d.total() / n;
    CVec in(n), out(n);
    for (std::size_t f = 0; f < fibers; ++f)
    {
        // first element of fiber f: split f into the index below and above the mode
        const std::size_t lo = f % stride, hi = f / stride;
        const std::size_t base = hi * stride * n + lo;
        for (std::size_t i = 0; i < n; ++i)
            in[i] = x[base + i * stride];
        std::fill(out.begin(), out.end(), cx{});
        for (std::size_t j = 0; j < n; ++j)
        {
            const cx v = in[j];
            if (v == cx{})
                continue;
            auto aj = a.col(j);
            for (std::size_t i = 0; i < n; ++i)
                out[i] += aj[i] * v;
        }
        for (std::size_t i = 0; i < n; ++i)
            x[base + i * stride] = out[i];
    }
}

// Mode unfolding: rows index the mode, columns run over the remaining indices in storage order.
inline ComplexMat unfold(std::span<const cx> x, const ChannelDims &d, Mode mode)
{
    const std::size_t n = mode_size(d, mode);
    const std::size_t stride = mode == Mode::rx ? 1 : mode == Mode::tx ? d.n_r : d.n_r * d.n_t;
    const std::size_t fibers = d.total() / n;
    ComplexMat m(n, fibers);
    for (std::size_t f = 0; f < fibers; ++f)
    {
        const std::size_t lo = f % stride, hi = f / stride;
        const std::size_t base = hi * stride * n + lo;
        for (std::size_t i = 0; i < n; ++i)
            m(i, f) = x[base + i * stride];
    }
    return m;
}

// ---- LS estimation ----

struct LsEstimate
{
    CVec h_ls;
    ChannelDims dims;
    std::uint32_t position_id = 0;
    double sigma_x2 = 1.0;
    NoiseModel noise;
    std::size_t pilot_length = 1;

    ComplexMat st_form() const { return ComplexMat(dims.space(), dims.w, h_ls); }
};

// Pilot convolution matrix: row k*N_T + t, column n holds x_t[n - k].
inline ComplexMat pilot_convolution(const ComplexMat &pilot, std::size_t w)
{
    const std::size_t nt = pilot.rows(), np = pilot.cols();
    ComplexMat xc(w * nt, np + w - 1);
    for (std::size_t k = 0; k < w; ++k)
        for (std::size_t t = 0; t < nt; ++t)
            for (std::size_t n = 0; n < np; ++n)
                xc(k * nt + t, n + k) = pilot(t, n);
    return xc;
}

// Per Rx antenna r the received row is y_r^T = theta_r^T X with theta_r[k*N_T + t] = H[k](r, t);
// every row shares the normal matrix G = conj(X) X^T, so one Cholesky factor serves all N_R
// right-hand sides.
inline LsEstimate ls_estimate(const PilotObservation &obs, std::uint32_t position_id = 0)
{
    const std::size_t nt = obs.pilot.rows(), np = obs.pilot.cols(), w = obs.w, nr = obs.rx.rows();
    if (obs.rx.cols() != np + w - 1)
        throw DimensionMismatch("ls_estimate: received length != N_p + W - 1");
    if (np + w - 1 < w * nt)
        throw RankDeficientPilot("ls_estimate: fewer observations than unknowns per Rx antenna");
    const ComplexMat xc = pilot_convolution(obs.pilot, w);
    const ComplexMat xcc = xc.conj();
    const ComplexMat g = xcc * xc.transpose();
    ComplexMat l;
    try
    {
        l = cholesky_lower(g);
    }
    catch (const NotPositiveDefinite &)
    {
        throw RankDeficientPilot("ls_estimate: pilot convolution matrix is rank deficient");
    }
    // rhs = conj(X) Y^T, solved column by column
    ComplexMat rhs = xcc * obs.rx.transpose(); // (W N_T) x N_R
    for (std::size_t r = 0; r < nr; ++r)
    {
        forward_substitute(l, rhs.col(r));
        backward_substitute_adjoint(l, rhs.col(r));
    }
    LsEstimate e;
    e.dims = {nt, nr, w};
    e.h_ls = vec(rhs.transpose()); // element (k N_T + t) N_R + r
    e.position_id = position_id;
    e.sigma_x2 = obs.sigma_x2;
    e.noise = obs.noise;
    e.pilot_length = np;
    return e;
}

// Residual Y - conv(H_ls, X) of one observation (N_R x (N_p + W - 1)).
inline ComplexMat ls_residual(const PilotObservation &obs, const LsEstimate &e)
{
    ChannelRealization ch{e.dims, e.h_ls};
    return obs.rx - convolve(ch, obs.pilot);
}

// Q_n from LS residuals; each Rx row leaves N_p + W - 1 - W N_T residual degrees of freedom.
inline NoiseModel estimate_noise_from_residuals(std::span<const PilotObservation> obs,
                                                std::span<const LsEstimate> est)
{
    if (obs.empty() || obs.size() != est.size())
        throw InvalidArgument("estimate_noise_from_residuals: need matching non-empty batches");
    const std::size_t nr = obs[0].rx.rows();
    ComplexMat q(nr, nr);
    double dof = 0.0;
    for (std::size_t l = 0; l < obs.size(); ++l)
    {
        const ComplexMat res = ls_residual(obs[l], est[l]);
        q += res * res.adjoint();
        dof += double(res.cols()) - double(est[l].dims.w * est[l].dims.n_t);
    }
    if (!(dof > 0.0))
        throw RankDeficientPilot("estimate_noise_from_residuals: no residual degrees of freedom");
    q *= cx{1.0 / dof, 0.0};
    // exact Hermitian symmetry
    for (std::size_t j = 0; j < nr; ++j)
    {
        q(j, j) = q(j, j).real();
        for (std::size_t i = j + 1; i < nr; ++i)
            q(j, i) = std::conj(q(i, j));
    }
    return {q};
}

// ---- LS error covariance in factored form ----

// C = scale * (I_W (x) I_N_T (x) Q_n) with scale = 1 / (sigma_x2 * pilot_length).
// The whitener uses the lower Cholesky factor L of Q_n: C^{H/2} = sqrt(scale) (I (x) I (x) L).
struct LsCovariance
{
    ChannelDims dims;
    double scale = 1.0;
    ComplexMat q_n;
    ComplexMat chol; // lower factor of q_n

    CVec apply(std::span<const cx> v) const
    {
        CVec x(v.begin(), v.end());
        mode_apply(x, dims, Mode::rx, q_n * cx{scale, 0.0});
        return x;
    }

    // C^{-H/2} v
    CVec whiten(std::span<const cx> v) const
    {
        check(v);
        CVec x(v.begin(), v.end());
        const double s = 1.0 / std::sqrt(scale);
        const std::size_t nr = dims.n_r;
        for (std::size_t b = 0; b < dims.n_t * dims.w; ++b)
        {
            std::span<cx> blk(x.data() + b * nr, nr);
            forward_substitute(chol, blk);
            for (auto &c : blk)
                c *= s;
        }
        return x;
    }

    // C^{H/2} v
    CVec unwhiten(std::span<const cx> v) const
    {
        check(v);
        CVec x(v.begin(), v.end());
        mode_apply(x, dims, Mode::rx, chol * cx{std::sqrt(scale), 0.0});
        return x;
    }

    // Dense W N_T N_R square matrix; for tests at small dims only.
    ComplexMat dense() const
    {
        return kron(ComplexMat::identity(dims.w * dims.n_t), q_n) * cx{scale, 0.0};
    }

private:
    void check(std::span<const cx> v) const
    {
        if (v.size() != dims.total())
            throw DimensionMismatch("LsCovariance: vector length mismatch");
    }
};

inline LsCovariance ls_covariance(double sigma_x2, const NoiseModel &noise, const ChannelDims &dims,
                                  std::size_t pilot_length = 1)
{
    if (noise.n_r() != dims.n_r)
        throw DimensionMismatch("ls_covariance: Q_n dimension != N_R");
    if (!(sigma_x2 > 0.0) || pilot_length == 0)
        throw InvalidArgument("ls_covariance: sigma_x2 and pilot length must be positive");
    LsCovariance c;
    c.dims = dims;
    c.scale = 1.0 / (sigma_x2 * double(pilot_length));
    c.q_n = noise.q_n;
    c.chol = cholesky_lower(noise.q_n);
    return c;
}

inline LsCovariance ls_covariance(const LsEstimate &e)
{
    return ls_covariance(e.sigma_x2, e.noise, e.dims, e.pilot_length);
}

inline CVec whiten(const LsEstimate &e, const LsCovariance &c) { return c.whiten(e.h_ls); }

// ---- correlations and eigenmodes ----

struct Correlations
{
    ComplexMat r_t;  // W x W
    ComplexMat r_tx; // N_T x N_T
    ComplexMat r_rx; // N_R x N_R
    ChannelDims dims;
    std::size_t count = 0;
};

inline Correlations sample_correlations(std::span<const CVec> whitened, const ChannelDims &d)
{
    if (whitened.empty())
        throw InvalidArgument("sample_correlations: empty batch");
    Correlations c{ComplexMat(d.w, d.w), ComplexMat(d.n_t, d.n_t), ComplexMat(d.n_r, d.n_r), d, whitened.size()};
    // accumulate X X^H per mode; Tx and time are conjugated afterwards
    for (const auto &x : whitened)
    {
        if (x.size() != d.total())
            throw DimensionMismatch("sample_correlations: vector length mismatch");
        for (Mode m : {Mode::rx, Mode::tx, Mode::time})
        {
            const ComplexMat u = unfold(x, d, m);
            ComplexMat &acc = m == Mode::rx ? c.r_rx : m == Mode::tx ? c.r_tx : c.r_t;
            const std::size_t n = u.rows();
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = j; i < n; ++i)
                {
                    cx s{};
                    for (std::size_t f = 0; f < u.cols(); ++f)
                        s += u(i, f) * std::conj(u(j, f));
                    acc(i, j) += s;
                }
        }
    }
    const double inv = 1.0 / double(whitened.size());
    for (ComplexMat *r : {&c.r_rx, &c.r_tx, &c.r_t})
    {
        const bool conjugate = r != &c.r_rx;
        const std::size_t n = r->rows();
        for (std::size_t j = 0; j < n; ++j)
        {
            (*r)(j, j) = (*r)(j, j).real() * inv;
            for (std::size_t i = j + 1; i < n; ++i)
            {
                const cx v = (*r)(i, j) * inv;
                (*r)(i, j) = conjugate ? std::conj(v) : v;
                (*r)(j, i) = std::conj((*r)(i, j));
            }
        }
    }
    return c;
}

struct EigenmodeSet
{
    ComplexMat u_t;  // W x r_T
    ComplexMat u_tx; // N_T x r_Tx
    ComplexMat u_rx; // N_R x r_Rx

    Ranks ranks() const { return {u_tx.cols(), u_rx.cols(), u_t.cols()}; }
    ChannelDims dims() const { return {u_tx.rows(), u_rx.rows(), u_t.rows()}; }
};

inline void check_ranks(const Ranks &r, const ChannelDims &d)
{
    if (r.tx < 1 || r.tx > d.n_t || r.rx < 1 || r.rx > d.n_r || r.t < 1 || r.t > d.w)
        throw InvalidArgument("ranks (" + std::to_string(r.tx) + "," + std::to_string(r.rx) + "," +
                              std::to_string(r.t) + ") outside [1, dim]");
}

inline EigenmodeSet estimate_eigenmodes(const Correlations &c, const Ranks &r)
{
    check_ranks(r, c.dims);
    return {herm_eig_desc(c.r_t).vectors.leading_cols(r.t), herm_eig_desc(c.r_tx).vectors.leading_cols(r.tx),
            herm_eig_desc(c.r_rx).vectors.leading_cols(r.rx)};
}

inline constexpr double kRankThreshold = 2.0;

namespace detail
{
inline double median_of(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
} // namespace detail

// Per-mode order selection on the whitened correlations. With per-entry noise variance v,
// a mode-m eigenvalue is signal energy plus the noise floor v * D_m (D_m = product of the
// other two full dimensions). Keeping a mode adds v * R_m of noise to the projection
// (R_m = product of the other two selected ranks), so an eigenvalue counts when its excess
// over the finite-sample noise edge v * D_m * (1 + sqrt(n_m / (L D_m)))^2 exceeds
// gamma * v * R_m. Ranks are iterated to a fixed point from (1, 1, 1).
//
// v is `noise_floor` when positive, otherwise the median of the trailing half of the Rx
// spectrum divided by N_T W (the Rx mode is the largest and channel ranks stay well below
// N_R / 2). Minimum rank is 1.
inline Ranks select_ranks(const Correlations &c, double noise_floor = 0.0, double gamma = kRankThreshold)
{
    const auto &d = c.dims;
    const auto e_tx = herm_eig_desc(c.r_tx).values;
    const auto e_rx = herm_eig_desc(c.r_rx).values;
    const auto e_t = herm_eig_desc(c.r_t).values;
    double var = noise_floor;
    if (!(var > 0.0))
    {
        std::vector<double> tail(e_rx.begin() + std::ptrdiff_t(e_rx.size() / 2), e_rx.end());
        var = detail::median_of(tail) / double(d.n_t * d.w);
    }
    const double samples = double(std::max<std::size_t>(c.count, 1));
    auto count = [&](const std::vector<double> &ev, std::size_t others, std::size_t kept) {
        const double edge = std::pow(1.0 + std::sqrt(double(ev.size()) / (samples * double(others))), 2.0);
        // the relative floor keeps rounding noise out of the count when var is ~0 (noiseless)
        const double level = std::max(var * (double(others) * edge + gamma * double(kept)), 1e-9 * ev.front());
        std::size_t r = 0;
        for (double v : ev)
            if (v > level)
                ++r;
        return std::clamp<std::size_t>(r, 1, ev.size());
    };
    Ranks r{1, 1, 1};
    for (int it = 0; it < 16; ++it)
    {
        const Ranks next{count(e_tx, d.n_r * d.w, r.rx * r.t), count(e_rx, d.n_t * d.w, r.tx * r.t),
                         count(e_t, d.n_t * d.n_r, r.tx * r.rx)};
        if (next == r)
            break;
        r = next;
    }
    return r;
}

inline ComplexMat composite_basis(const EigenmodeSet &em)
{
    return kron(kron(em.u_t.conj(), em.u_tx.conj()), em.u_rx);
}

// ---- projector ----

inline constexpr std::uint32_t kLearnedProjector = 0xFFFFFFFFu;

struct LrProjector
{
    EigenmodeSet modes;
    LsCovariance cov;
    std::uint32_t position_id = kLearnedProjector;

    ChannelDims dims() const { return cov.dims; }

    // U U^H in factored form on a whitened vector
    void project_whitened(std::span<cx> x) const
    {
        mode_apply(x, cov.dims, Mode::rx, modes.u_rx * modes.u_rx.adjoint());
        mode_apply(x, cov.dims, Mode::tx, (modes.u_tx * modes.u_tx.adjoint()).conj());
        mode_apply(x, cov.dims, Mode::time, (modes.u_t * modes.u_t.adjoint()).conj());
    }

    CVec apply(std::span<const cx> h_ls) const
    {
        CVec x = cov.whiten(h_ls);
        project_whitened(x);
        return cov.unwhiten(x);
    }
};

inline LrProjector make_projector(EigenmodeSet em, LsCovariance cov, std::uint32_t position_id = kLearnedProjector)
{
    if (em.dims() != cov.dims)
        throw DimensionMismatch("make_projector: eigenmode and covariance dims differ");
    return {std::move(em), std::move(cov), position_id};
}

inline CVec lr_apply(const LrProjector &p, const LsEstimate &e)
{
    if (e.dims != p.dims())
        throw DimensionMismatch("lr_apply: estimate dims differ from projector dims");
    return p.apply(e.h_ls);
}

struct FitOptions
{
    std::optional<Ranks> ranks; // auto selection when empty
    double noise_floor = 0.0;   // per-entry whitened noise variance, <= 0 to estimate
    bool noise_from_residuals = false;
};

struct FitResult
{
    LrProjector projector;
    std::vector<LsEstimate> estimates;
    Correlations correlations;
};

inline FitResult fit_position_projector(std::span<const PilotObservation> batch, std::uint32_t position_id,
                                        const FitOptions &opt = {})
{
    if (batch.empty())
        throw InvalidArgument("fit_position_projector: empty batch");
    std::vector<LsEstimate> est;
    est.reserve(batch.size());
    for (const auto &obs : batch)
    {
        est.push_back(ls_estimate(obs, position_id));
        if (est.back().dims != est.front().dims || est.back().pilot_length != est.front().pilot_length)
            throw DimensionMismatch("fit_position_projector: observations differ in shape");
    }
    NoiseModel noise = opt.noise_from_residuals ? estimate_noise_from_residuals(batch, est) : batch[0].noise;
    const LsCovariance cov = ls_covariance(batch[0].sigma_x2, noise, est[0].dims, est[0].pilot_length);

    std::vector<CVec> white;
    white.reserve(est.size());
    for (const auto &e : est)
        white.push_back(cov.whiten(e.h_ls));
    Correlations corr = sample_correlations(white, est[0].dims);
    const Ranks ranks = opt.ranks ? *opt.ranks : select_ranks(corr, opt.noise_floor);
    auto em = estimate_eigenmodes(corr, ranks);
    return {make_projector(std::move(em), cov, position_id), std::move(est), std::move(corr)};
}

// Overload for LS estimates already tagged with their position.
inline FitResult fit_position_projector(std::span<const LsEstimate> est, const FitOptions &opt = {})
{
    if (est.empty())
        throw InvalidArgument("fit_position_projector: empty batch");
    for (const auto &e : est)
        if (e.position_id != est[0].position_id)
            throw InvalidArgument("fit_position_projector: mixed position ids");
        else if (e.dims != est[0].dims)
            throw DimensionMismatch("fit_position_projector: estimates differ in shape");
    const LsCovariance cov = ls_covariance(est[0]);
    std::vector<CVec> white;
    for (const auto &e : est)
        white.push_back(cov.whiten(e.h_ls));
    Correlations corr = sample_correlations(white, est[0].dims);
    const Ranks ranks = opt.ranks ? *opt.ranks : select_ranks(corr, opt.noise_floor);
    auto em = estimate_eigenmodes(corr, ranks);
    return {make_projector(std::move(em), cov, est[0].position_id), {est.begin(), est.end()}, std::move(corr)};
}

// Refit from raw LS vectors under a known error covariance (stored datasets keep h_ls and
// the per-position covariance, not the pilot observations).
inline LrProjector fit_projector(std::span<const CVec> h_ls, const LsCovariance &cov, std::uint32_t position_id,
                                 const FitOptions &opt = {})
{
    if (h_ls.empty())
        throw InvalidArgument("fit_projector: empty batch");
    std::vector<CVec> white;
    white.reserve(h_ls.size());
    for (const auto &h : h_ls)
    {
        if (h.size() != cov.dims.total())
            throw DimensionMismatch("fit_projector: LS vector length differs from the covariance dims");
        white.push_back(cov.whiten(h));
    }
    const Correlations corr = sample_correlations(white, cov.dims);
    const Ranks ranks = opt.ranks ? *opt.ranks : select_ranks(corr, opt.noise_floor);
    return make_projector(estimate_eigenmodes(corr, ranks), cov, position_id);
}

// ---- projector store ----

inline constexpr std::uint16_t kProjectorVersion = 1;

// Layout: "MLRP", u16 version, u32 N_T, u32 N_R, u32 W, u32 count, then per entry:
// u32 position_id, u32 r_T, u32 r_Tx, u32 r_Rx, f64 scale, Q_n (N_R x N_R), U_T, U_Tx, U_Rx,
// matrices column-major as f64 re/im pairs.
inline void write_projectors(const std::string &path, const std::vector<LrProjector> &ps)
{
    if (ps.empty())
        throw InvalidArgument("write_projectors: nothing to write");
    const ChannelDims d = ps[0].dims();
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write projector store: " + path);
    out.write("MLRP", 4);
    detail::put_le(out, kProjectorVersion);
    detail::put_le(out, static_cast<std::uint32_t>(d.n_t));
    detail::put_le(out, static_cast<std::uint32_t>(d.n_r));
    detail::put_le(out, static_cast<std::uint32_t>(d.w));
    detail::put_le(out, static_cast<std::uint32_t>(ps.size()));
    for (const auto &p : ps)
    {
        if (p.dims() != d)
            throw DimensionMismatch("write_projectors: mixed dimensions");
        const Ranks r = p.modes.ranks();
        detail::put_le(out, p.position_id);
        detail::put_le(out, static_cast<std::uint32_t>(r.t));
        detail::put_le(out, static_cast<std::uint32_t>(r.tx));
        detail::put_le(out, static_cast<std::uint32_t>(r.rx));
        detail::put_le(out, p.cov.scale);
        detail::put_cvec(out, p.cov.q_n.data());
        detail::put_cvec(out, p.modes.u_t.data());
        detail::put_cvec(out, p.modes.u_tx.data());
        detail::put_cvec(out, p.modes.u_rx.data());
    }
    if (!out)
        throw IoError("write failed: " + path);
}

inline std::vector<LrProjector> read_projectors(const std::string &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open projector store: " + path);
    detail::expect_magic(in, "MLRP");
    const auto version = detail::get_le<std::uint16_t>(in, "version");
    if (version != kProjectorVersion)
        throw FormatError("unsupported projector store version " + std::to_string(version));
    ChannelDims d;
    d.n_t = detail::get_le<std::uint32_t>(in, "header");
    d.n_r = detail::get_le<std::uint32_t>(in, "header");
    d.w = detail::get_le<std::uint32_t>(in, "header");
    const auto count = detail::get_le<std::uint32_t>(in, "header");
    if (d.n_t == 0 || d.n_r == 0 || d.w == 0)
        throw FormatError("projector store dimensions must be >= 1");
    std::vector<LrProjector> ps;
    for (std::uint32_t k = 0; k < count; ++k)
    {
        const auto id = detail::get_le<std::uint32_t>(in, "entry");
        Ranks r;
        r.t = detail::get_le<std::uint32_t>(in, "entry");
        r.tx = detail::get_le<std::uint32_t>(in, "entry");
        r.rx = detail::get_le<std::uint32_t>(in, "entry");
        try
        {
            check_ranks(r, d);
        }
        catch (const InvalidArgument &e)
        {
            throw FormatError(std::string("projector store: ") + e.what());
        }
        const double scale = detail::get_le<double>(in, "entry");
        ComplexMat q(d.n_r, d.n_r, detail::get_cvec(in, d.n_r * d.n_r, "Q_n"));
        EigenmodeSet em{ComplexMat(d.w, r.t, detail::get_cvec(in, d.w * r.t, "U_T")),
                        ComplexMat(d.n_t, r.tx, detail::get_cvec(in, d.n_t * r.tx, "U_Tx")),
                        ComplexMat(d.n_r, r.rx, detail::get_cvec(in, d.n_r * r.rx, "U_Rx"))};
        for (const ComplexMat *u : {&em.u_t, &em.u_tx, &em.u_rx})
            if (!(orthonormality_error(*u) < 1e-9))
                throw FormatError("projector store: factor of position " + std::to_string(id) + " is not orthonormal");
        if (!(scale > 0.0))
            throw FormatError("projector store: non-positive covariance scale");
        LsCovariance cov;
        cov.dims = d;
        cov.scale = scale;
        cov.q_n = q;
        try
        {
            cov.chol = cholesky_lower(q);
        }
        catch (const Error &e)
        {
            throw FormatError(std::string("projector store: Q_n invalid: ") + e.what());
        }
        ps.push_back({std::move(em), std::move(cov), id});
    }
    return ps;
}

} // namespace mlr

#endif
