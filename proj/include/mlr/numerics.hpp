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

#ifndef MLR_NUMERICS_HPP
#define MLR_NUMERICS_HPP

#include "mlr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mlr
{

using cx = std::complex<double>;
using CVec = std::vector<cx>;

// Dense complex matrix. Logical indexing is (row, col); storage is column-major so that
// vec() is a plain copy and each column is a contiguous span.
class ComplexMat
{
public:
    ComplexMat() = default;

    ComplexMat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols)
    {
        if (rows == 0 || cols == 0)
            throw InvalidArgument("ComplexMat dimensions must be >= 1");
    }

    ComplexMat(std::size_t rows, std::size_t cols, CVec column_major) : ComplexMat(rows, cols)
    {
        if (column_major.size() != rows * cols)
            throw DimensionMismatch("ComplexMat: data length does not match dimensions");
        data_ = std::move(column_major);
    }

    // Row-wise literal, e.g. ComplexMat::from_rows({{1, 3}, {2, 4}}).
    static ComplexMat from_rows(std::initializer_list<std::initializer_list<cx>> rows)
    {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        ComplexMat m(r, c);
        std::size_t i = 0;
        for (const auto &row : rows)
        {
            if (row.size() != c)
                throw DimensionMismatch("from_rows: ragged rows");
            std::size_t j = 0;
            for (const auto &v : row)
                m(i, j++) = v;
            ++i;
        }
        return m;
    }

    static ComplexMat identity(std::size_t n)
    {
        ComplexMat m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            m(i, i) = 1.0;
        return m;
    }

    // First `cols` columns of the n x n identity.
    static ComplexMat truncated_identity(std::size_t n, std::size_t cols)
    {
        ComplexMat m(n, cols);
        for (std::size_t i = 0; i < std::min(n, cols); ++i)
            m(i, i) = 1.0;
        return m;
    }

    static ComplexMat diagonal(std::span<const double> d)
    {
        ComplexMat m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i)
            m(i, i) = d[i];
        return m;
    }

    static ComplexMat column(std::span<const cx> v)
    {
        return ComplexMat(v.size(), 1, CVec(v.begin(), v.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    cx &operator()(std::size_t i, std::size_t j) noexcept { return data_[j * rows_ + i]; }
    const cx &operator()(std::size_t i, std::size_t j) const noexcept { return data_[j * rows_ + i]; }

    std::span<cx> col(std::size_t j) noexcept { return {data_.data() + j * rows_, rows_}; }
    std::span<const cx> col(std::size_t j) const noexcept { return {data_.data() + j * rows_, rows_}; }

    std::span<cx> data() noexcept { return data_; }
    std::span<const cx> data() const noexcept { return data_; }
    const CVec &storage() const noexcept { return data_; }

    ComplexMat adjoint() const
    {
        ComplexMat r(cols_, rows_);
        for (std::size_t j = 0; j < cols_; ++j)
            for (std::size_t i = 0; i < rows_; ++i)
                r(j, i) = std::conj((*this)(i, j));
        return r;
    }

    ComplexMat transpose() const
    {
        ComplexMat r(cols_, rows_);
        for (std::size_t j = 0; j < cols_; ++j)
            for (std::size_t i = 0; i < rows_; ++i)
                r(j, i) = (*this)(i, j);
        return r;
    }

    ComplexMat conj() const
    {
        ComplexMat r = *this;
        for (auto &v : r.data_)
            v = std::conj(v);
        return r;
    }

    // Leading `n` columns.
    ComplexMat leading_cols(std::size_t n) const
    {
        if (n == 0 || n > cols_)
            throw InvalidArgument("leading_cols: requested " + std::to_string(n) + " of " + std::to_string(cols_));
        return ComplexMat(rows_, n, CVec(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(rows_ * n)));
    }

    ComplexMat &operator+=(const ComplexMat &o)
    {
        check_same(o);
        for (std::size_t k = 0; k < data_.size(); ++k)
            data_[k] += o.data_[k];
        return *this;
    }

    ComplexMat &operator-=(const ComplexMat &o)
    {
        check_same(o);
        for (std::size_t k = 0; k < data_.size(); ++k)
            data_[k] -= o.data_[k];
        return *this;
    }

    ComplexMat &operator*=(cx s)
    {
        for (auto &v : data_)
            v *= s;
        return *this;
    }

    bool operator==(const ComplexMat &o) const = default;

private:
    void check_same(const ComplexMat &o) const
    {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw DimensionMismatch("matrix shapes differ");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    CVec data_;
};

inline ComplexMat operator+(ComplexMat a, const ComplexMat &b) { return a += b; }
inline ComplexMat operator-(ComplexMat a, const ComplexMat &b) { return a -= b; }
inline ComplexMat operator*(ComplexMat a, cx s) { return a *= s; }
inline ComplexMat operator*(cx s, ComplexMat a) { return a *= s; }

inline ComplexMat operator*(const ComplexMat &a, const ComplexMat &b)
{
    if (a.cols() != b.rows())
        throw DimensionMismatch("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    ComplexMat c(a.rows(), b.cols());
    for (std::size_t j = 0; j < b.cols(); ++j)
    {
        auto cj = c.col(j);
        for (std::size_t k = 0; k < a.cols(); ++k)
        {
            const cx bkj = b(k, j);
            if (bkj == cx{})
                continue;
            auto ak = a.col(k);
            for (std::size_t i = 0; i < a.rows(); ++i)
                cj[i] += ak[i] * bkj;
        }
    }
    return c;
}

// a^H * b without forming the adjoint.
inline ComplexMat adjoint_times(const ComplexMat &a, const ComplexMat &b)
{
    if (a.rows() != b.rows())
        throw DimensionMismatch("adjoint_times: row counts differ");
    ComplexMat c(a.cols(), b.cols());
    for (std::size_t j = 0; j < b.cols(); ++j)
    {
        auto bj = b.col(j);
        for (std::size_t i = 0; i < a.cols(); ++i)
        {
            auto ai = a.col(i);
            cx s{};
            for (std::size_t k = 0; k < a.rows(); ++k)
                s += std::conj(ai[k]) * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

inline CVec matvec(const ComplexMat &a, std::span<const cx> x)
{
    if (a.cols() != x.size())
        throw DimensionMismatch("matvec: length mismatch");
    CVec y(a.rows());
    for (std::size_t k = 0; k < a.cols(); ++k)
    {
        auto ak = a.col(k);
        for (std::size_t i = 0; i < a.rows(); ++i)
            y[i] += ak[i] * x[k];
    }
    return y;
}

inline double frobenius_norm(const ComplexMat &a)
{
    double s = 0.0;
    for (const auto &v : a.data())
        s += std::norm(v);
    return std::sqrt(s);
}

inline double norm2(std::span<const cx> v)
{
    double s = 0.0;
    for (const auto &x : v)
        s += std::norm(x);
    return s;
}

inline double norm(std::span<const cx> v) { return std::sqrt(norm2(v)); }

inline double max_abs(const ComplexMat &a)
{
    double m = 0.0;
    for (const auto &v : a.data())
        m = std::max(m, std::abs(v));
    return m;
}

inline bool all_finite(const ComplexMat &a)
{
    return std::all_of(a.data().begin(), a.data().end(),
                       [](const cx &v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); });
}

// ||A^H A - I||_F
inline double orthonormality_error(const ComplexMat &u)
{
    ComplexMat g = adjoint_times(u, u);
    g -= ComplexMat::identity(g.rows());
    return frobenius_norm(g);
}

inline double hermitian_defect(const ComplexMat &a)
{
    if (a.rows() != a.cols())
        return std::numeric_limits<double>::infinity();
    double d = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j)
        for (std::size_t i = 0; i <= j; ++i)
            d = std::max(d, std::abs(a(i, j) - std::conj(a(j, i))));
    return d;
}

// ---- Kronecker / vec algebra ----

// result[(i*p + k), (j*q + l)] = a[i,j] * b[k,l]
inline ComplexMat kron(const ComplexMat &a, const ComplexMat &b)
{
    const std::size_t p = b.rows(), q = b.cols();
    ComplexMat r(a.rows() * p, a.cols() * q);
    for (std::size_t j = 0; j < a.cols(); ++j)
        for (std::size_t i = 0; i < a.rows(); ++i)
        {
            const cx aij = a(i, j);
            for (std::size_t l = 0; l < q; ++l)
                for (std::size_t k = 0; k < p; ++k)
                    r(i * p + k, j * q + l) = aij * b(k, l);
        }
    return r;
}

// Stack columns.
inline CVec vec(const ComplexMat &a) { return a.storage(); }

inline ComplexMat unvec(std::span<const cx> v, std::size_t rows, std::size_t cols)
{
    if (v.size() != rows * cols)
        throw DimensionMismatch("unvec: length " + std::to_string(v.size()) + " != " + std::to_string(rows) + "x" +
                                std::to_string(cols));
    return ComplexMat(rows, cols, CVec(v.begin(), v.end()));
}

// ---- factorizations ----

namespace detail
{

inline void require_hermitian(const ComplexMat &a, const char *who)
{
    if (a.rows() != a.cols())
        throw InvalidArgument(std::string(who) + ": matrix is not square");
    const double scale = std::max(1.0, max_abs(a));
    if (hermitian_defect(a) > 1e-10 * scale)
        throw InvalidArgument(std::string(who) + ": matrix is not Hermitian");
}

// Index of the largest-magnitude entry (first one on ties).
inline std::size_t argmax_abs(std::span<const cx> v)
{
    std::size_t best = 0;
    double bm = -1.0;
    for (std::size_t i = 0; i < v.size(); ++i)
    {
        double m = std::abs(v[i]);
        if (m > bm)
        {
            bm = m;
            best = i;
        }
    }
    return best;
}

// Unit-phase factor that rotates the largest-magnitude entry of v onto the positive real axis.
inline cx phase_fix_factor(std::span<const cx> v)
{
    const cx pivot = v[argmax_abs(v)];
    const double m = std::abs(pivot);
    return m > 0.0 ? std::conj(pivot) / m : cx{1.0, 0.0};
}

// Stable descending order. Values equal to ~1e-13 relative count as ties and keep their
// original index order, so rounding noise cannot permute a degenerate spectrum.
inline std::vector<std::size_t> descending_order(std::span<const double> values)
{
    double scale = 0.0;
    for (double v : values)
        scale = std::max(scale, std::abs(v));
    std::vector<long long> key(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        key[i] = scale > 0.0 ? std::llround(values[i] / scale * 1e13) : 0;
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
    return idx;
}

// Jacobi rotation for the Hermitian 2x2 block [[app, apq], [conj(apq), aqq]].
// Returns Q = [[c, s], [-s e^{-i phi}, c e^{-i phi}]] with Q^H A Q diagonal.
struct JacobiRotation
{
    cx qpp, qpq, qqp, qqq;
};

inline JacobiRotation hermitian_jacobi(double app, double aqq, cx apq)
{
    const double mag = std::abs(apq);
    const cx ph = std::conj(apq) / mag; // e^{-i phi}
    const double tau = (aqq - app) / (2.0 * mag);
    const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
    const double c = 1.0 / std::sqrt(1.0 + t * t);
    const double s = t * c;
    return {cx{c, 0.0}, cx{s, 0.0}, -s * ph, c * ph};
}

} // namespace detail

// Lower-triangular L with L L^H = a (a^{H/2} in the Cholesky factor notation).
inline ComplexMat cholesky_lower(const ComplexMat &a)
{
    detail::require_hermitian(a, "cholesky_lower");
    const std::size_t n = a.rows();
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        trace += a(i, i).real();
    const double tol = 1e-12 * std::abs(trace) / static_cast<double>(n);

    ComplexMat l(n, n);
    for (std::size_t j = 0; j < n; ++j)
    {
        double d = a(j, j).real();
        for (std::size_t k = 0; k < j; ++k)
            d -= std::norm(l(j, k));
        if (!(d > tol))
            throw NotPositiveDefinite("cholesky_lower: pivot " + std::to_string(j) + " is not positive");
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i)
        {
            cx s = a(i, j);
            for (std::size_t k = 0; k < j; ++k)
                s -= l(i, k) * std::conj(l(j, k));
            l(i, j) = s / ljj;
        }
    }
    return l;
}

// Solves L x = b in place for lower-triangular L.
inline void forward_substitute(const ComplexMat &l, std::span<cx> b)
{
    const std::size_t n = l.rows();
    for (std::size_t i = 0; i < n; ++i)
    {
        cx s = b[i];
        for (std::size_t k = 0; k < i; ++k)
            s -= l(i, k) * b[k];
        b[i] = s / l(i, i);
    }
}

// Solves L^H x = b in place for lower-triangular L.
inline void backward_substitute_adjoint(const ComplexMat &l, std::span<cx> b)
{
    const std::size_t n = l.rows();
    for (std::size_t ii = n; ii-- > 0;)
    {
        cx s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k)
            s -= std::conj(l(k, ii)) * b[k];
        b[ii] = s / l(ii, ii);
    }
}

inline ComplexMat lower_triangular_inverse(const ComplexMat &l)
{
    const std::size_t n = l.rows();
    ComplexMat inv(n, n);
    for (std::size_t j = 0; j < n; ++j)
    {
        auto c = inv.col(j);
        c[j] = 1.0;
        forward_substitute(l, c);
    }
    return inv;
}

struct HermEig
{
    std::vector<double> values; // descending
    ComplexMat vectors;         // columns matched to values
};

// Cyclic complex Jacobi: deterministic, bit-reproducible across runs.
inline HermEig herm_eig_desc(const ComplexMat &input, int max_sweeps = 100)
{
    detail::require_hermitian(input, "herm_eig_desc");
    const std::size_t n = input.rows();
    ComplexMat a = input;
    for (std::size_t i = 0; i < n; ++i)
        a(i, i) = a(i, i).real();
    ComplexMat v = ComplexMat::identity(n);

    const double total = frobenius_norm(a);
    const double eps = std::numeric_limits<double>::epsilon();
    bool converged = (n == 1) || total == 0.0;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep)
    {
        double off = 0.0;
        for (std::size_t q = 1; q < n; ++q)
            for (std::size_t p = 0; p < q; ++p)
                off += std::norm(a(p, q));
        if (std::sqrt(2.0 * off) <= eps * total)
        {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q)
            {
                const cx apq = a(p, q);
                const double mag = std::abs(apq);
                if (mag == 0.0 || mag <= eps * 1e-3 * std::sqrt(std::abs(a(p, p).real() * a(q, q).real())))
                    continue;
                const auto r = detail::hermitian_jacobi(a(p, p).real(), a(q, q).real(), apq);
                // A <- A Q (columns p, q)
                for (std::size_t k = 0; k < n; ++k)
                {
                    const cx akp = a(k, p), akq = a(k, q);
                    a(k, p) = akp * r.qpp + akq * r.qqp;
                    a(k, q) = akp * r.qpq + akq * r.qqq;
                }
                // A <- Q^H A (rows p, q)
                for (std::size_t k = 0; k < n; ++k)
                {
                    const cx apk = a(p, k), aqk = a(q, k);
                    a(p, k) = std::conj(r.qpp) * apk + std::conj(r.qqp) * aqk;
                    a(q, k) = std::conj(r.qpq) * apk + std::conj(r.qqq) * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                a(p, p) = a(p, p).real();
                a(q, q) = a(q, q).real();
                for (std::size_t k = 0; k < n; ++k)
                {
                    const cx vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = vkp * r.qpp + vkq * r.qqp;
                    v(k, q) = vkp * r.qpq + vkq * r.qqq;
                }
            }
    }
    if (!converged)
    {
        double off = 0.0;
        for (std::size_t q = 1; q < n; ++q)
            for (std::size_t p = 0; p < q; ++p)
                off += std::norm(a(p, q));
        if (std::sqrt(2.0 * off) > 1e3 * eps * total)
            throw ConvergenceFailure("herm_eig_desc: Jacobi sweeps exhausted");
    }

    std::vector<double> raw(n);
    for (std::size_t i = 0; i < n; ++i)
        raw[i] = a(i, i).real();
    const auto order = detail::descending_order(raw);

    HermEig out{std::vector<double>(n), ComplexMat(n, n)};
    for (std::size_t j = 0; j < n; ++j)
    {
        out.values[j] = raw[order[j]];
        auto src = v.col(order[j]);
        // the pivot is chosen once; near-equal magnitudes could select another entry after rotation
        const std::size_t k = detail::argmax_abs(src);
        const cx f = detail::phase_fix_factor(src);
        auto dst = out.vectors.col(j);
        for (std::size_t i = 0; i < n; ++i)
            dst[i] = src[i] * f;
        dst[k] = std::abs(dst[k]);
    }
    if (!all_finite(out.vectors))
        throw ConvergenceFailure("herm_eig_desc: non-finite result");
    return out;
}

struct ThinSvd
{
    ComplexMat u;              // n x r, orthonormal columns
    std::vector<double> s;     // r, descending, >= 0
    ComplexMat v;              // r x r unitary
};

// One-sided (Hestenes) Jacobi SVD of an n x r matrix with n >= r.
inline ThinSvd thin_svd(const ComplexMat &input, int max_sweeps = 100)
{
    const std::size_t n = input.rows(), r = input.cols();
    if (n < r)
        throw InvalidArgument("thin_svd: requires rows >= cols");
    ComplexMat a = input;
    ComplexMat v = ComplexMat::identity(r);
    const double eps = std::numeric_limits<double>::epsilon();
    const double tol = 4.0 * eps;

    bool converged = (r == 1);
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep)
    {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < r; ++p)
            for (std::size_t q = p + 1; q < r; ++q)
            {
                auto ap = a.col(p), aq = a.col(q);
                double alpha = 0.0, beta = 0.0;
                cx gamma{};
                for (std::size_t k = 0; k < n; ++k)
                {
                    alpha += std::norm(ap[k]);
                    beta += std::norm(aq[k]);
                    gamma += std::conj(ap[k]) * aq[k];
                }
                const double mag = std::abs(gamma);
                if (alpha == 0.0 || beta == 0.0 || mag <= tol * std::sqrt(alpha * beta))
                    continue;
                rotated = true;
                const auto rot = detail::hermitian_jacobi(alpha, beta, gamma);
                for (std::size_t k = 0; k < n; ++k)
                {
                    const cx x = ap[k], y = aq[k];
                    ap[k] = x * rot.qpp + y * rot.qqp;
                    aq[k] = x * rot.qpq + y * rot.qqq;
                }
                for (std::size_t k = 0; k < r; ++k)
                {
                    const cx x = v(k, p), y = v(k, q);
                    v(k, p) = x * rot.qpp + y * rot.qqp;
                    v(k, q) = x * rot.qpq + y * rot.qqq;
                }
            }
        if (!rotated)
            converged = true;
    }
    if (!converged)
        throw ConvergenceFailure("thin_svd: Jacobi sweeps exhausted");

    std::vector<double> raw(r);
    for (std::size_t j = 0; j < r; ++j)
        raw[j] = norm(a.col(j));
    const auto order = detail::descending_order(raw);
    const double smax = raw.empty() ? 0.0 : raw[order[0]];
    const double zero_tol = static_cast<double>(std::max(n, r)) * eps * smax;

    ThinSvd out{ComplexMat(n, r), std::vector<double>(r), ComplexMat(r, r)};
    std::vector<bool> needs_completion(r, false);
    for (std::size_t j = 0; j < r; ++j)
    {
        const std::size_t src = order[j];
        out.s[j] = raw[src];
        auto vs = v.col(src);
        auto vd = out.v.col(j);
        std::copy(vs.begin(), vs.end(), vd.begin());
        if (raw[src] > zero_tol && raw[src] > 0.0)
        {
            auto as = a.col(src);
            auto ud = out.u.col(j);
            for (std::size_t k = 0; k < n; ++k)
                ud[k] = as[k] / raw[src];
        }
        else
            needs_completion[j] = true;
    }

    // Null directions: complete U with canonical vectors orthogonalized against the basis so far.
    for (std::size_t j = 0; j < r; ++j)
    {
        if (!needs_completion[j])
            continue;
        for (std::size_t e = 0; e < n; ++e)
        {
            CVec cand(n);
            cand[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t m = 0; m < r; ++m)
                {
                    if (m == j || (needs_completion[m] && m > j))
                        continue;
                    auto um = out.u.col(m);
                    cx dot{};
                    for (std::size_t k = 0; k < n; ++k)
                        dot += std::conj(um[k]) * cand[k];
                    for (std::size_t k = 0; k < n; ++k)
                        cand[k] -= dot * um[k];
                }
            const double nc = norm(cand);
            if (nc > 0.5)
            {
                auto ud = out.u.col(j);
                for (std::size_t k = 0; k < n; ++k)
                    ud[k] = cand[k] / nc;
                break;
            }
        }
    }

    for (std::size_t j = 0; j < r; ++j)
    {
        auto uj = out.u.col(j);
        const std::size_t k = detail::argmax_abs(uj);
        const cx f = detail::phase_fix_factor(uj);
        for (auto &x : uj)
            x *= f;
        uj[k] = std::abs(uj[k]);
        for (auto &x : out.v.col(j))
            x *= f;
    }
    if (!all_finite(out.u) || !all_finite(out.v))
        throw ConvergenceFailure("thin_svd: non-finite result");
    return out;
}

inline ComplexMat svd_reconstruct(const ThinSvd &svd)
{
    ComplexMat us = svd.u;
    for (std::size_t j = 0; j < us.cols(); ++j)
        for (auto &x : us.col(j))
            x *= svd.s[j];
    return us * svd.v.adjoint();
}

// Relative singular-value gap below which the U-adjoint is considered ill-conditioned.
inline constexpr double kSvdGapTolerance = 1e-8;

// Smallest separation the U-adjoint divides by: consecutive singular values, plus the
// last value against zero when the column space has a complement (n > r).
inline double svd_min_gap(const ThinSvd &svd, std::size_t rows)
{
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j + 1 < svd.s.size(); ++j)
        gap = std::min(gap, svd.s[j] - svd.s[j + 1]);
    if (rows > svd.s.size() && !svd.s.empty())
        gap = std::min(gap, svd.s.back());
    return gap;
}

// Adjoint of A for a real scalar loss that depends on A only through the U factor of
// thin_svd(A) (phase convention included). grad_u follows dL = Re tr(grad_u^H dU); the
// result follows dL = Re tr(grad_a^H dA).
inline ComplexMat thin_svd_u_backward(const ComplexMat &a, const ThinSvd &svd, const ComplexMat &grad_u)
{
    const std::size_t n = a.rows(), r = a.cols();
    if (svd.u.rows() != n || svd.u.cols() != r || grad_u.rows() != n || grad_u.cols() != r)
        throw DimensionMismatch("thin_svd_u_backward: shapes do not match");
    const double smax = svd.s.empty() ? 0.0 : svd.s.front();
    if (!(smax > 0.0) || svd_min_gap(svd, n) < kSvdGapTolerance * smax)
        throw DegenerateSpectrum("thin_svd_u_backward: singular values not separated");

    const ComplexMat &u = svd.u;

    // The phase convention pins u[k_j, j] to the real axis; its derivative adds a
    // gauge term that acts like an extra adjoint on those pivot entries.
    ComplexMat g = grad_u;
    for (std::size_t j = 0; j < r; ++j)
    {
        auto uj = u.col(j);
        auto gj = grad_u.col(j);
        const std::size_t k = detail::argmax_abs(uj);
        cx ghu{};
        for (std::size_t i = 0; i < n; ++i)
            ghu += std::conj(gj[i]) * uj[i];
        const double c = -ghu.imag();
        g(k, j) += cx{0.0, -c / std::abs(uj[k])};
    }

    ComplexMat gamma = adjoint_times(u, g); // U^H G'
    ComplexMat kmat(r, r);
    for (std::size_t j = 0; j < r; ++j)
        for (std::size_t i = 0; i < r; ++i)
            if (i != j)
                kmat(i, j) = gamma(i, j) / (svd.s[j] * svd.s[j] - svd.s[i] * svd.s[i]);

    ComplexMat inner(r, r); // (K + K^H) S
    for (std::size_t j = 0; j < r; ++j)
        for (std::size_t i = 0; i < r; ++i)
            inner(i, j) = (kmat(i, j) + std::conj(kmat(j, i))) * svd.s[j];

    ComplexMat vh = svd.v.adjoint();
    ComplexMat grad_a = u * inner * vh;

    if (n > r)
    {
        // (I - U U^H) G' S^{-1} V^H
        ComplexMat proj = g - u * gamma;
        for (std::size_t j = 0; j < r; ++j)
            for (auto &x : proj.col(j))
                x /= svd.s[j];
        grad_a += proj * vh;
    }
    return grad_a;
}

} // namespace mlr

#endif
