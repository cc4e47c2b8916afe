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

#include "mlr/dnn.hpp"
#include "test_support.hpp"

#include <filesystem>

using namespace mlr;
using mlr::test::random_matrix;
using mlr::test::random_vector;
using mlr::test::rel_diff;

namespace
{

const ChannelDims kToy{2, 4, 4};

NetworkConfig toy_config()
{
    NetworkConfig c;
    c.dims = kToy;
    c.ranks = {1, 2, 2}; // (Tx, Rx, T)
    c.conv = {{3, 3}};
    c.fc = {6};
    return c;
}

std::shared_ptr<const LsCovariance> colored_cov(Rng &rng, const ChannelDims &d)
{
    auto b = random_matrix(rng, d.n_r, d.n_r);
    NoiseModel q{b * b.adjoint() * cx{0.3, 0.0} + ComplexMat::identity(d.n_r)};
    return std::make_shared<const LsCovariance>(ls_covariance(1.0, q, d, 16));
}

std::vector<TrainSample> random_samples(Rng &rng, const ChannelDims &d, std::size_t n)
{
    auto cov = colored_cov(rng, d);
    std::vector<TrainSample> s;
    for (std::size_t k = 0; k < n; ++k)
        s.push_back({random_vector(rng, d.total()), random_vector(rng, d.total()), {}, cov});
    return s;
}

// Dense oracle: C^{H/2} U U^H C^{-H/2} as an explicit matrix.
ComplexMat dense_projector(const EigenmodeSet &em, const LsCovariance &cov)
{
    const std::size_t n = cov.dims.total();
    ComplexMat half(n, n);
    for (std::size_t j = 0; j < n; ++j)
    {
        CVec e(n);
        e[j] = 1.0;
        auto c = cov.unwhiten(e);
        for (std::size_t i = 0; i < n; ++i)
            half(i, j) = c[i];
    }
    const ComplexMat u = kron(kron(em.u_t.conj(), em.u_tx.conj()), em.u_rx);
    ComplexMat inv(n, n);
    for (std::size_t j = 0; j < n; ++j)
    {
        CVec e(n);
        e[j] = 1.0;
        auto c = cov.whiten(e);
        for (std::size_t i = 0; i < n; ++i)
            inv(i, j) = c[i];
    }
    return half * u * u.adjoint() * inv;
}

double fd_rel_error(NetworkParams &p, std::span<const TrainSample> batch, std::size_t tensor, Phase phase)
{
    std::vector<bool> none;
    Gradients g = zero_gradients(p);
    loss_and_gradient(p, batch, &g, none, phase, false);
    auto &x = p.tensors[tensor].data;
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k)
    {
        const double orig = x[k];
        const double h = 1e-6 * std::max(1.0, std::abs(orig));
        x[k] = orig + h;
        const double fp = loss_and_gradient(p, batch, nullptr, none, phase, false).loss;
        x[k] = orig - h;
        const double fm = loss_and_gradient(p, batch, nullptr, none, phase, false).loss;
        x[k] = orig;
        const double fd = (fp - fm) / (2 * h);
        num += (fd - g[tensor][k]) * (fd - g[tensor][k]);
        den += fd * fd;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
}

// One position with a fixed ray set: noiseless LS, target = truth.
std::vector<TrainSample> noiseless_position(Rng &rng, std::size_t n)
{
    RaySet rs;
    rs.rays = {{0.3, 0.0, 0.2, 0.1, 0.0, 1.0}, {-0.6, 0.0, -0.5, -0.2, 1.6 * 20e-9, 0.7}};
    auto cov = std::make_shared<const LsCovariance>(ls_covariance(1.0, NoiseModel::white(4, 1.0), kToy, 16));
    std::vector<TrainSample> s;
    for (std::size_t k = 0; k < n; ++k)
    {
        auto ch = build_taps(rs, sample_passage(rs, rng), {2, 1}, {2, 2}, PulseShape{}, kToy.w);
        s.push_back({ch.h, ch.h, ch.h, cov});
    }
    return s;
}

// A few noisy positions with position-based LR targets.
std::vector<TrainSample> noisy_positions(Rng &rng, std::size_t per_position, double shift)
{
    std::vector<TrainSample> out;
    for (int pos = 0; pos < 3; ++pos)
    {
        RaySet rs;
        const double a = 0.3 * pos + shift;
        rs.rays = {{a, 0.0, -a, 0.1, 0.0, 1.0}, {-0.5 - a, 0.0, 0.6, -0.2, (1.0 + pos * 0.7) * 20e-9, 0.6}};
        std::vector<ChannelRealization> chans;
        for (std::size_t l = 0; l < per_position; ++l)
            chans.push_back(build_taps(rs, sample_passage(rs, rng), {2, 1}, {2, 2}, PulseShape{}, kToy.w));
        auto noise = calibrate_noise(5.0, chans, 1.0, NoiseModel::white(4, 1.0));
        std::vector<PilotObservation> obs;
        for (auto &ch : chans)
            obs.push_back(transmit(ch, generate_pilot(2, 16, 1.0, rng), 1.0, noise, rng));
        auto fit = fit_position_projector(obs, std::uint32_t(pos), FitOptions{Ranks{2, 2, 2}, 0.0, false});
        auto cov = std::make_shared<const LsCovariance>(fit.projector.cov);
        for (std::size_t l = 0; l < per_position; ++l)
            out.push_back({fit.estimates[l].h_ls, fit.projector.apply(fit.estimates[l].h_ls), chans[l].h, cov});
    }
    return out;
}

double target_nmse_db(NetworkParams &p, std::span<const TrainSample> s)
{
    auto pred = predict_batch(p, s);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k)
        for (std::size_t i = 0; i < pred[k].size(); ++i)
        {
            num += std::norm(pred[k][i] - s[k].target[i]);
            den += std::norm(s[k].target[i]);
        }
    return 10 * std::log10(num / den);
}

} // namespace

TEST_CASE("DNN - config validation")
{
    auto c = toy_config();
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.conv.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    bad = c;
    bad.fc.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    bad = c;
    bad.conv[0].kernel = 2;
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    bad = c;
    bad.ranks.rx = 5;
    CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    TrainConfig tc;
    tc.learning_rate = 0.0;
    CHECK_THROWS_AS(tc.validate(), InvalidConfig);
}

TEST_CASE("DNN - parameter counting")
{
    // hand count for the toy net: conv 3*1*3 + 3, bn 2*3, fc 6*(3*16*4) + 6, out 36*6 + 36
    auto c = toy_config();
    CHECK(c.output_size() == 2 * (2 * 1 + 4 * 2 + 4 * 2));
    CHECK(param_count(c) == 9 + 3 + 6 + 6 * 192 + 6 + 36 * 6 + 36);
    CHECK(init_params(c, 1).param_count() == param_count(c));
    NetworkConfig d;
    CHECK(init_params(d, 1).param_count() == param_count(d));

    // full-size flat network, 16 x 64 antennas: conv 256 + 4288 + 67, fc 2048*50+50, 3*(50*50+50),
    // out 1154*50 + 1154
    NetworkConfig f;
    f.dims = {16, 64, 1};
    f.ranks = {4, 8, 1};
    f.conv = {{64, 1}, {64, 1}, {1, 1}};
    f.fc = {50, 50, 50, 50};
    CHECK(param_count(f) == 4611 + 102450 + 7650 + 58854);
    NetworkConfig s = f;
    s.dims.w = 22;
    s.ranks.t = 5;
    s.conv = {{64, 3}, {64, 3}, {1, 3}};
    s.fc = {100, 100, 100, 100};
    CHECK(param_count(s) == 4687631);
}

TEST_CASE("DNN - preprocess examples")
{
    Rng rng(1);
    const double sx2 = 2.5;
    auto cov = ls_covariance(sx2, NoiseModel::white(4, sx2), kToy, 1);
    const CVec h = random_vector(rng, kToy.total());
    auto s = preprocess(h, cov);
    CHECK(rel_diff(s.whitened, h) < 1e-15);
    double mx = 0.0;
    for (double v : s.input)
        mx = std::max(mx, std::abs(v));
    CHECK(mx == 1.0);
    CHECK(s.input.size() == 2 * 8 * 4);
    // stacking: Re of (t=1, r=2, tap 3) sits in row 1*4+2, Im in row 8+6
    CHECK(s.input[6 * 4 + 3] * s.norm == Catch::Approx(h[3 * 8 + 6].real()));
    CHECK(s.input[14 * 4 + 3] * s.norm == Catch::Approx(h[3 * 8 + 6].imag()));

    auto z = preprocess(CVec(kToy.total()), cov);
    CHECK(z.degenerate);
    CHECK(z.norm == 0.0);
    for (double v : z.input)
        CHECK(v == 0.0);

    auto cq = *colored_cov(rng, kToy);
    auto sq = preprocess(h, cq);
    CHECK(rel_diff(unpreprocess(sq, cq), h) < 1e-12);
}

TEST_CASE("DNN - forward shapes, orthonormality and determinism")
{
    Rng rng(2);
    NetworkConfig c;
    auto p = init_params(c, 3);
    auto cov = *colored_cov(rng, c.dims);
    std::vector<PreprocessedSample> in;
    for (int k = 0; k < 8; ++k)
        in.push_back(preprocess(random_vector(rng, c.dims.total()), cov));
    auto em = forward(p, in, Phase::train);
    for (const auto &e : em)
    {
        CHECK(e.u_t.rows() == 8);
        CHECK(e.u_t.cols() == c.ranks.t);
        CHECK(e.u_tx.rows() == 4);
        CHECK(e.u_tx.cols() == c.ranks.tx);
        CHECK(e.u_rx.rows() == 16);
        CHECK(e.u_rx.cols() == c.ranks.rx);
        for (const auto *u : {&e.u_t, &e.u_tx, &e.u_rx})
            CHECK(orthonormality_error(*u) < 1e-9);
    }
    auto a = forward(p, in[0], Phase::infer);
    auto b = forward(p, in[0], Phase::infer);
    CHECK(a.u_rx == b.u_rx);
    CHECK(a.u_tx == b.u_tx);
    CHECK(a.u_t == b.u_t);
}

TEST_CASE("DNN - predict_lr with identity factors is the identity map")
{
    Rng rng(3);
    auto c = toy_config();
    c.ranks = {2, 4, 4};
    auto p = init_params(c, 4);
    // zero the output weights and put identity matrices in the bias (Re parts only)
    auto &w = p.tensors[p.fc_index(1)].data;
    auto &bias = p.tensors[p.fc_index(1) + 1].data;
    std::fill(w.begin(), w.end(), 0.0);
    std::fill(bias.begin(), bias.end(), 0.0);
    std::size_t off = 0;
    for (std::size_t n : {c.dims.n_t, c.dims.n_r, c.dims.w})
    {
        for (std::size_t i = 0; i < n; ++i)
            bias[off + i * n + i] = 1.0;
        off += 2 * n * n;
    }
    LsEstimate e;
    e.dims = c.dims;
    e.h_ls = random_vector(rng, c.dims.total());
    e.noise = NoiseModel::directional({2, 2}, 0.2, 0.0, 2.0, 0.5);
    e.pilot_length = 16;
    CHECK(rel_diff(predict_lr(p, e), e.h_ls) < 1e-12);
}

TEST_CASE("DNN - predictions contract and are idempotent")
{
    Rng rng(4);
    auto c = toy_config();
    auto p = init_params(c, 5);
    auto samples = random_samples(rng, c.dims, 20);
    for (const auto &s : samples)
    {
        auto pre = preprocess(s.h_ls, *s.cov);
        auto em = forward(p, pre, Phase::infer);
        auto pred = project_with(em, *s.cov, pre.whitened);
        CHECK(norm(s.cov->whiten(pred)) <= norm(pre.whitened) * (1 + 1e-12));
        auto again = project_with(em, *s.cov, s.cov->whiten(pred));
        CHECK(rel_diff(again, pred) < 1e-9);
        // factored projection against the dense operator
        CHECK(rel_diff(pred, matvec(dense_projector(em, *s.cov), s.h_ls)) < 1e-10);
    }
}

TEST_CASE("DNN - loss examples")
{
    Rng rng(5);
    auto c = toy_config();
    auto p = init_params(c, 6);
    auto samples = random_samples(rng, c.dims, 6);
    // infer mode makes samples independent, so the loss is additive over batches
    const double all = loss(p, samples, Phase::infer);
    const double a = loss(p, std::span(samples).first(2), Phase::infer);
    const double b = loss(p, std::span(samples).subspan(2), Phase::infer);
    CHECK(all == Catch::Approx(a + b).epsilon(1e-12));
    CHECK(all > 0.0);

    // dense oracle for one sample
    const auto &s = samples[0];
    auto pre = preprocess(s.h_ls, *s.cov);
    auto em = forward(p, pre, Phase::infer);
    auto dense = matvec(dense_projector(em, *s.cov), s.h_ls);
    double ref = 0.0;
    for (std::size_t i = 0; i < dense.size(); ++i)
        ref += std::norm(s.target[i] - dense[i]);
    CHECK(loss(p, std::span(samples).first(1), Phase::infer) == Catch::Approx(ref).epsilon(1e-10));

    // prediction = target
    auto pred = predict_batch(p, samples);
    for (std::size_t k = 0; k < samples.size(); ++k)
        samples[k].target = pred[k];
    CHECK(loss(p, samples, Phase::infer) < 1e-24 * all);
}

TEST_CASE("DNN - backward matches central differences")
{
    Rng rng(6);
    auto c = toy_config();
    auto p = init_params(c, 7);
    // make batch norm non-trivial
    for (std::size_t l = 0; l < c.conv.size(); ++l)
    {
        for (auto &v : p.tensors[p.conv_index(l) + 2].data)
            v = uniform(rng, 0.5, 1.5);
        for (auto &v : p.tensors[p.conv_index(l) + 3].data)
            v = uniform(rng, -0.3, 0.3);
        for (auto &v : p.tensors[p.conv_index(l) + 4].data)
            v = uniform(rng, -0.1, 0.1);
        for (auto &v : p.tensors[p.conv_index(l) + 5].data)
            v = uniform(rng, 0.5, 1.5);
        for (auto &v : p.tensors[p.conv_index(l) + 1].data)
            v = uniform(rng, -0.1, 0.1);
    }
    for (std::size_t i = 0; i < p.fc_count(); ++i)
        for (auto &v : p.tensors[p.fc_index(i) + 1].data)
            v = uniform(rng, -0.1, 0.1);
    auto batch = random_samples(rng, c.dims, 3);
    for (Phase ph : {Phase::train, Phase::infer})
        for (std::size_t t = 0; t < p.tensors.size(); ++t)
        {
            if (!p.tensors[t].trainable)
                continue;
            INFO(p.tensors[t].name << (ph == Phase::train ? " train" : " infer"));
            CHECK(fd_rel_error(p, batch, t, ph) < 1e-4);
        }
}

TEST_CASE("DNN - zero-loss batch and frozen tensors")
{
    Rng rng(7);
    auto c = toy_config();
    c.ranks = {2, 4, 4};
    auto p = init_params(c, 8);
    // full-rank factors make the projector the identity, so target = h_ls has zero loss
    auto batch = random_samples(rng, c.dims, 4);
    for (auto &s : batch)
        s.target = s.h_ls;
    BackwardStats st;
    auto g = backward(p, batch, {}, &st);
    CHECK(st.loss < 1e-20);
    for (const auto &gi : g)
        for (double v : gi)
            CHECK(std::abs(v) < 1e-8);

    auto q = init_params(toy_config(), 9);
    auto batch2 = random_samples(rng, kToy, 4);
    const auto mask = last_two_fc_mask(q);
    auto g2 = backward(q, batch2, mask);
    bool any_live = false;
    for (std::size_t i = 0; i < q.tensors.size(); ++i)
        if (mask[i])
        {
            for (double v : g2[i])
                CHECK(v == 0.0);
        }
        else
            for (double v : g2[i])
                any_live = any_live || v != 0.0;
    CHECK(any_live);
}

TEST_CASE("DNN - training on a noiseless position converges")
{
    Rng rng(8);
    auto data = noiseless_position(rng, 64);
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    tc.seed = 11;
    auto c = toy_config();
    c.ranks = {2, 2, 2}; // both paths resolvable in every mode
    auto res = train(c, data, {}, tc);
    REQUIRE(res.history.size() == 60);
    const double first = res.history.front().train_loss, last = res.history.back().train_loss;
    INFO("loss " << first << " -> " << last);
    CHECK(last < first / 100);
    // mini-batch Adam is noisy epoch to epoch; the loss averaged over 10-epoch blocks must not rise
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t b0 = 0; b0 < res.history.size(); b0 += 10)
    {
        double m = 0.0;
        for (std::size_t k = b0; k < b0 + 10; ++k)
            m += res.history[k].train_loss / 10;
        CHECK(m <= prev);
        prev = m;
    }
    for (const auto &r : res.history)
        CHECK(r.stiefel_error <= 1e-6);
    CHECK(target_nmse_db(res.params, data) < -20.0);
    CHECK(res.history.back().steps == 60 * 4);
}

TEST_CASE("DNN - zero epochs and determinism")
{
    Rng rng(9);
    auto data = noisy_positions(rng, 20, 0.0);
    TrainConfig tc;
    tc.epochs = 0;
    auto init = init_params(toy_config(), tc.seed);
    // the toy net has Tx rank 1; only shapes matter here
    CHECK(train(init, data, {}, tc).params == init);

    tc.epochs = 2;
    tc.batch_size = 8;
    auto c = toy_config();
    c.ranks = {2, 2, 2};
    auto a = train(c, data, data, tc);
    auto b = train(c, data, data, tc);
    CHECK(a.params == b.params);
    CHECK(a.history.back().val_nmse_db == b.history.back().val_nmse_db);
    CHECK(!(a.params == init));
}

TEST_CASE("DNN - fine-tuning touches only the last two layers")
{
    Rng rng(10);
    auto train_set = noisy_positions(rng, 40, 0.0);
    auto val = noisy_positions(rng, 10, 0.0);
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 8;
    tc.learning_rate = 3e-3;
    auto c = toy_config();
    c.ranks = {2, 2, 2};
    auto base = train(c, train_set, val, tc).params;
    NetworkParams probe = base;
    const double before = validation_nmse_db(val, predict_batch(probe, val));

    tc.epochs = 10;
    auto ft = fine_tune(base, train_set, val, tc);
    const auto mask = last_two_fc_mask(base);
    for (std::size_t i = 0; i < base.tensors.size(); ++i)
        if (mask[i])
            CHECK(ft.params.tensors[i].data == base.tensors[i].data);
    NetworkParams tuned = ft.params;
    const double after = validation_nmse_db(val, predict_batch(tuned, val));
    INFO("self-transfer " << before << " -> " << after << " dB");
    CHECK(std::abs(after - before) <= 0.5);
    CHECK(after <= before);
}

TEST_CASE("DNN - model file round trip")
{
    Rng rng(11);
    auto p = init_params(NetworkConfig{}, 12);
    for (auto &t : p.tensors)
        for (auto &v : t.data)
            v += uniform(rng, -1e-3, 1e-3) + (t.trainable ? 0.0 : 0.5);
    const auto path = (std::filesystem::temp_directory_path() / "mlr_test_model.mlrn").string();
    save_params(p, path);
    auto q = load_params(path);
    CHECK(q == p);

    auto cov = *colored_cov(rng, p.config.dims);
    for (int k = 0; k < 100; ++k)
    {
        auto s = preprocess(random_vector(rng, p.config.dims.total()), cov);
        auto a = forward(p, s, Phase::infer);
        auto b = forward(q, s, Phase::infer);
        REQUIRE(a.u_rx == b.u_rx);
        REQUIRE(a.u_tx == b.u_tx);
        REQUIRE(a.u_t == b.u_t);
    }

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 9);
    CHECK_THROWS_AS(load_params(path), FormatError);
    {
        std::ofstream out(path, std::ios::binary);
        out << "MLRX";
    }
    CHECK_THROWS_AS(load_params(path), FormatError);
    std::filesystem::remove(path);
}
