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

#include <catch_amalgamated.hpp>

#include "mlr/numerics.hpp"
#include "test_support.hpp"

using namespace mlr;
using mlr::test::random_matrix;
using mlr::test::rel_diff;

TEST_CASE("Numerics - kron identity and dimension law")
{
    CHECK(kron(ComplexMat::identity(2), ComplexMat::identity(3)) == ComplexMat::identity(6));

    Rng rng(1);
    auto k = kron(random_matrix(rng, 2, 3), random_matrix(rng, 4, 5));
    CHECK(k.rows() == 8);
    CHECK(k.cols() == 15);
}

TEST_CASE("Numerics - kron index map")
{
    Rng rng(2);
    auto a = random_matrix(rng, 3, 2);
    auto b = random_matrix(rng, 2, 4);
    auto k = kron(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t p = 0; p < 2; ++p)
                for (std::size_t q = 0; q < 4; ++q)
                    CHECK(k(i * 2 + p, j * 4 + q) == a(i, j) * b(p, q));
}

TEST_CASE("Numerics - vec(AB) = (B^T kron I) vec(A)")
{
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial)
    {
        auto a = random_matrix(rng, 2, 2);
        auto b = random_matrix(rng, 2, 3);
        CVec lhs = vec(mlr::test::naive_mul(a, b));
        CVec rhs = matvec(kron(b.transpose(), ComplexMat::identity(2)), vec(a));
        CHECK(rel_diff(lhs, rhs) < 1e-14);
    }
}

namespace
{

// Gaussian-integer entries: every product is exact, so association order cannot round.
ComplexMat integer_matrix(Rng &rng, std::size_t rows, std::size_t cols)
{
    ComplexMat m(rows, cols);
    for (auto &x : m.data())
        x = cx(static_cast<double>(static_cast<int>(rng() % 17) - 8), static_cast<double>(static_cast<int>(rng() % 17) - 8));
    return m;
}

} // namespace

TEST_CASE("Numerics - kron associativity and mixed product")
{
    Rng rng(4);
    for (int trial = 0; trial < 25; ++trial)
    {
        auto ai = integer_matrix(rng, 2, 3);
        auto bi = integer_matrix(rng, 3, 2);
        auto ci = integer_matrix(rng, 2, 2);
        CHECK(kron(kron(ai, bi), ci) == kron(ai, kron(bi, ci)));

        auto a = random_matrix(rng, 2, 3);
        auto b = random_matrix(rng, 3, 2);
        auto c = random_matrix(rng, 2, 2);
        CHECK(rel_diff(kron(kron(a, b), c), kron(a, kron(b, c))) < 1e-15);

        auto c2 = random_matrix(rng, 2, 3);
        auto d2 = random_matrix(rng, 3, 2);
        CHECK(rel_diff(kron(a, c2) * kron(b, d2), kron(a * b, c2 * d2)) < 1e-12);
    }
}

TEST_CASE("Numerics - vec and unvec")
{
    auto a = ComplexMat::from_rows({{1, 3}, {2, 4}});
    CHECK(vec(a) == CVec{1, 2, 3, 4});
    CHECK(vec(ComplexMat::identity(2)) == CVec{1, 0, 0, 1});

    Rng rng(5);
    auto r = random_matrix(rng, 3, 4);
    CHECK(unvec(vec(r), 3, 4) == r);
    CHECK_THROWS_AS(unvec(vec(r), 4, 4), DimensionMismatch);
}

TEST_CASE("Numerics - cholesky examples")
{
    const double sigma2 = 2.5;
    auto l = cholesky_lower(ComplexMat::identity(4) * cx{sigma2, 0.0});
    CHECK(rel_diff(l, ComplexMat::identity(4) * cx{std::sqrt(sigma2), 0.0}) < 1e-15);

    auto d = cholesky_lower(ComplexMat::from_rows({{4, 0}, {0, 9}}));
    CHECK(d == ComplexMat::from_rows({{2, 0}, {0, 3}}));

    Rng rng(6);
    auto b = random_matrix(rng, 5, 5);
    auto a = b * b.adjoint() + ComplexMat::identity(5);
    auto lr = cholesky_lower(a);
    CHECK(rel_diff(lr * lr.adjoint(), a) < 1e-10);
    for (std::size_t i = 0; i < 5; ++i)
    {
        CHECK(lr(i, i).imag() == 0.0);
        CHECK(lr(i, i).real() > 0.0);
        for (std::size_t j = i + 1; j < 5; ++j)
            CHECK(lr(i, j) == cx{});
    }
}

TEST_CASE("Numerics - cholesky rejects indefinite and non-Hermitian input")
{
    CHECK_THROWS_AS(cholesky_lower(ComplexMat::from_rows({{1, 0}, {0, -1}})), NotPositiveDefinite);
    CHECK_THROWS_AS(cholesky_lower(ComplexMat::from_rows({{1, 2}, {2, 4}})), NotPositiveDefinite);
    CHECK_THROWS_AS(cholesky_lower(ComplexMat::from_rows({{1, 1}, {0, 1}})), InvalidArgument);
}

TEST_CASE("Numerics - herm_eig_desc examples")
{
    auto e = herm_eig_desc(ComplexMat::from_rows({{1, 0, 0}, {0, 5, 0}, {0, 0, 3}}));
    CHECK(e.values == std::vector<double>{5, 3, 1});
    CHECK(e.vectors == ComplexMat::from_rows({{0, 0, 1}, {1, 0, 0}, {0, 1, 0}}));

    Rng rng(7);
    CVec u = mlr::test::random_vector(rng, 4);
    const double nu = norm(u);
    for (auto &x : u)
        x /= nu;
    auto uu = ComplexMat::column(u) * ComplexMat::column(u).adjoint();
    auto e1 = herm_eig_desc(uu);
    CHECK(e1.values[0] == Catch::Approx(1.0).margin(1e-13));
    for (std::size_t k = 1; k < 4; ++k)
        CHECK(std::abs(e1.values[k]) < 1e-13);
    // first vector equals u up to a unit phase
    cx overlap{};
    for (std::size_t i = 0; i < 4; ++i)
        overlap += std::conj(u[i]) * e1.vectors(i, 0);
    CHECK(std::abs(overlap) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("Numerics - herm_eig_desc ties keep index order")
{
    auto e = herm_eig_desc(ComplexMat::identity(3));
    CHECK(e.vectors == ComplexMat::identity(3));
}

TEST_CASE("Numerics - thin_svd examples")
{
    Rng rng(8);
    // orthonormal columns -> u = a up to per-column phase, s = 1
    auto q = herm_eig_desc(mlr::test::random_hermitian(rng, 5)).vectors.leading_cols(3);
    auto svd = thin_svd(q);
    for (double s : svd.s)
        CHECK(s == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t j = 0; j < 3; ++j)
    {
        cx overlap{};
        for (std::size_t i = 0; i < 5; ++i)
            overlap += std::conj(q(i, j)) * svd.u(i, j);
        CHECK(std::abs(overlap) == Catch::Approx(1.0).margin(1e-12));
    }

    ComplexMat a(3, 2);
    a(0, 0) = 2.0;
    auto s2 = thin_svd(a);
    CHECK(s2.s[0] == 2.0);
    CHECK(s2.s[1] == 0.0);
    CHECK(orthonormality_error(s2.u) < 1e-14);
    CHECK(rel_diff(svd_reconstruct(s2), a) < 1e-15);

    auto r = random_matrix(rng, 5, 3);
    auto sr = thin_svd(r);
    CHECK(rel_diff(svd_reconstruct(sr), r) < 1e-10);
    CHECK(std::is_sorted(sr.s.rbegin(), sr.s.rend()));
}

TEST_CASE("Numerics - phase convention: pivot entry real positive")
{
    Rng rng(9);
    auto r = random_matrix(rng, 6, 3);
    auto svd = thin_svd(r);
    for (std::size_t j = 0; j < 3; ++j)
    {
        auto col = svd.u.col(j);
        std::size_t k = 0;
        for (std::size_t i = 1; i < col.size(); ++i)
            if (std::abs(col[i]) > std::abs(col[k]))
                k = i;
        CHECK(col[k].imag() == 0.0);
        CHECK(col[k].real() > 0.0);
    }
}

TEST_CASE("Numerics - phase fix with equal-magnitude entries keeps the eigenvector")
{
    // steering-like vectors: every entry has the same modulus, so the pivot is decided by rounding
    Rng rng(19);
    for (int k = 0; k < 200; ++k)
    {
        ComplexMat u(4, 1);
        for (std::size_t i = 0; i < 4; ++i)
            u(i, 0) = std::polar(0.5, uniform(rng, -3.14, 3.14));
        const ComplexMat r = u * u.adjoint() * cx{1000.0, 0.0};
        const auto eig = herm_eig_desc(r);
        const auto v = eig.vectors.leading_cols(1);
        CHECK(rel_diff(r * v, v * cx{eig.values[0], 0.0}) < 1e-12);
        const auto svd = thin_svd(u * cx{3.0, 0.0});
        CHECK(rel_diff(svd_reconstruct(svd), u * cx{3.0, 0.0}) < 1e-12);
    }
}

TEST_CASE("Numerics - factorization reconstruction over 1000 random seeds")
{
    double worst_eig = 0.0, worst_svd = 0.0, worst_chol = 0.0, worst_orth = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed)
    {
        Rng rng(derive_seed(1234, {seed}));
        const std::size_t n = 1 + static_cast<std::size_t>(rng() % 64);
        const std::size_t r = 1 + static_cast<std::size_t>(rng() % n);

        auto h = mlr::test::random_hermitian(rng, n);
        auto e = herm_eig_desc(h);
        ComplexMat vd = e.vectors;
        for (std::size_t j = 0; j < n; ++j)
            for (auto &x : vd.col(j))
                x *= e.values[j];
        worst_eig = std::max(worst_eig, rel_diff(vd * e.vectors.adjoint(), h));
        worst_orth = std::max(worst_orth, orthonormality_error(e.vectors));
        REQUIRE(std::is_sorted(e.values.rbegin(), e.values.rend()));

        auto a = random_matrix(rng, n, r);
        auto s = thin_svd(a);
        worst_svd = std::max(worst_svd, rel_diff(svd_reconstruct(s), a));
        worst_orth = std::max({worst_orth, orthonormality_error(s.u), orthonormality_error(s.v)});

        auto b = random_matrix(rng, n, n);
        auto pd = b * b.adjoint() + ComplexMat::identity(n);
        auto l = cholesky_lower(pd);
        worst_chol = std::max(worst_chol, rel_diff(l * l.adjoint(), pd));
    }
    CHECK(worst_eig < 1e-9);
    CHECK(worst_svd < 1e-9);
    CHECK(worst_chol < 1e-9);
    CHECK(worst_orth < 1e-10);
}

TEST_CASE("Numerics - eigen decomposition is bit-reproducible")
{
    Rng rng(10);
    auto h = mlr::test::random_hermitian(rng, 12);
    auto e1 = herm_eig_desc(h);
    auto e2 = herm_eig_desc(h);
    CHECK(e1.values == e2.values);
    CHECK(e1.vectors == e2.vectors);
}

namespace
{

// L(A) = Re tr(G^H U(A))
double u_loss(const ComplexMat &a, const ComplexMat &g)
{
    auto u = thin_svd(a).u;
    double s = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k)
        s += (std::conj(g.data()[k]) * u.data()[k]).real();
    return s;
}

double fd_check(Rng &rng, std::size_t n, std::size_t r)
{
    auto a = random_matrix(rng, n, r);
    auto g = random_matrix(rng, n, r);
    auto svd = thin_svd(a);
    auto analytic = thin_svd_u_backward(a, svd, g);
    auto numeric = mlr::test::fd_gradient([&](const ComplexMat &x) { return u_loss(x, g); }, a);
    // floor keeps a zero reference gradient (1x1 case) from dividing by rounding noise
    return frobenius_norm(analytic - numeric) / std::max(frobenius_norm(numeric), 1e-6);
}

} // namespace

TEST_CASE("Numerics - thin_svd_u_backward zero adjoint")
{
    Rng rng(11);
    auto a = random_matrix(rng, 4, 2);
    auto svd = thin_svd(a);
    auto g = thin_svd_u_backward(a, svd, ComplexMat(4, 2));
    CHECK(frobenius_norm(g) == 0.0);
}

TEST_CASE("Numerics - thin_svd_u_backward matches central differences")
{
    Rng rng(12);
    CHECK(fd_check(rng, 3, 2) < 1e-4);
    // shapes used by network heads at desk and toy scale
    for (auto [n, r] : std::vector<std::pair<std::size_t, std::size_t>>{
             {4, 2}, {16, 3}, {8, 2}, {2, 1}, {4, 4}, {8, 8}, {16, 8}, {1, 1}, {22, 5}})
    {
        INFO("shape " << n << "x" << r);
        CHECK(fd_check(rng, n, r) < 1e-4);
    }
}

TEST_CASE("Numerics - thin_svd_u_backward 2x2 perturbation closed form")
{
    // A = diag(2, 1). First-order perturbation of the eigenvectors of A A^H gives
    // dU12 = -(dA12 + 2 conj(dA21)) / 3 and dU21 = (conj(dA12) + 2 dA21) / 3, diagonal
    // fixed by the phase convention. Its adjoint for grad_u = [[0, g12], [g21, 0]] is below.
    const cx g12{0.7, -0.3}, g21{-0.2, 1.1};
    auto a = ComplexMat::from_rows({{2, 0}, {0, 1}});
    auto grad_u = ComplexMat::from_rows({{0, g12}, {g21, 0}});
    auto expected = ComplexMat::from_rows({{0, (-g12 + std::conj(g21)) / 3.0},
                                           {(2.0 * g21 - 2.0 * std::conj(g12)) / 3.0, 0}});
    auto got = thin_svd_u_backward(a, thin_svd(a), grad_u);
    CHECK(rel_diff(got, expected) < 1e-14);
}

TEST_CASE("Numerics - thin_svd_u_backward rejects degenerate spectra")
{
    auto a = ComplexMat::identity(3).leading_cols(2);
    CHECK_THROWS_AS(thin_svd_u_backward(a, thin_svd(a), ComplexMat(3, 2)), DegenerateSpectrum);

    ComplexMat rank1(3, 2);
    rank1(0, 0) = 1.0;
    CHECK_THROWS_AS(thin_svd_u_backward(rank1, thin_svd(rank1), ComplexMat(3, 2)), DegenerateSpectrum);
}
