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

// Eigenmode-inference network: a whitened, max-normalized LS estimate stacked as a real
// 2 N_T N_R x W image goes through 1xk convolutions (LeakyReLU, then batch norm), a
// fully-connected stack and a linear output that is read as the Re/Im parts of three complex
// matrices. The thin-SVD U factor of each matrix is the emitted eigenmode estimate.
//
// Output ordering: Tx-Re, Tx-Im, Rx-Re, Rx-Im, T-Re, T-Im, each column-major.
// Tensor layout in the image: row = part * N_T N_R + t N_R + r (part 0 = Re), column = tap.

#ifndef MLR_DNN_HPP
#define MLR_DNN_HPP

#include "mlr/estimator.hpp"
#include "mlr/random.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <numeric>

namespace mlr
{

inline constexpr double kLeakySlope = 0.01;

struct ConvSpec
{
    std::size_t filters = 8;
    std::size_t kernel = 3; // odd, "same" padding along the tap axis

    bool operator==(const ConvSpec &) const = default;
};

struct NetworkConfig
{
    ChannelDims dims{4, 16, 8};
    Ranks ranks{3, 4, 4};
    std::vector<ConvSpec> conv{{8, 3}, {8, 3}, {1, 3}};
    std::vector<std::size_t> fc{64, 64}; // hidden widths; the linear output layer is appended
    double bn_momentum = 0.9;
    double bn_eps = 1e-5;

    std::size_t input_rows() const { return 2 * dims.n_t * dims.n_r; }
    std::size_t flat_size() const { return conv.back().filters * input_rows() * dims.w; }
    std::size_t output_size() const
    {
        return 2 * (dims.n_t * ranks.tx + dims.n_r * ranks.rx + dims.w * ranks.t);
    }

    void validate() const
    {
        if (dims.n_t == 0 || dims.n_r == 0 || dims.w == 0)
            throw InvalidConfig("network.dims", "dimensions must be >= 1");
        if (conv.empty())
            throw InvalidConfig("network.conv", "at least one convolutional layer is required");
        for (const auto &c : conv)
            if (c.filters == 0 || c.kernel == 0 || c.kernel % 2 == 0)
                throw InvalidConfig("network.conv", "filters >= 1 and odd kernel width required");
        if (fc.empty())
            throw InvalidConfig("network.fc", "at least one hidden fully-connected layer is required");
        for (auto w : fc)
            if (w == 0)
                throw InvalidConfig("network.fc", "layer widths must be >= 1");
        try
        {
            check_ranks(ranks, dims);
        }
        catch (const InvalidArgument &e)
        {
            throw InvalidConfig("network.ranks", e.what());
        }
        if (!(bn_momentum >= 0.0 && bn_momentum < 1.0) || !(bn_eps > 0.0))
            throw InvalidConfig("network.batch_norm", "momentum in [0, 1) and eps > 0 required");
    }

    bool operator==(const NetworkConfig &) const = default;
};

struct TrainConfig
{
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    std::uint64_t seed = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::vector<bool> freeze_mask; // per tensor, empty = nothing frozen
    // fine-tuning stop rule: stop once the best validation NMSE has not improved by
    // plateau_db within plateau_epochs epochs
    double plateau_db = 0.05;
    std::size_t plateau_epochs = 3;

    void validate() const
    {
        if (!(learning_rate > 0.0))
            throw InvalidConfig("train.learning_rate", "must be > 0");
        if (batch_size == 0)
            throw InvalidConfig("train.batch_size", "must be >= 1");
    }
};

// ---- parameters ----

struct Tensor
{
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool trainable = true;

    bool operator==(const Tensor &) const = default;
};

// Tensor table layout: per conv layer {weight [F, C, k], bias [F], bn gamma [F], bn beta [F],
// running mean [F], running var [F]}, then per fc layer {weight [out, in], bias [out]}.
struct NetworkParams
{
    static constexpr std::size_t kConvTensors = 6;

    NetworkConfig config;
    std::vector<Tensor> tensors;

    std::size_t conv_index(std::size_t l) const { return l * kConvTensors; }
    std::size_t fc_index(std::size_t i) const { return config.conv.size() * kConvTensors + 2 * i; }
    std::size_t fc_count() const { return config.fc.size() + 1; }

    std::size_t param_count() const
    {
        std::size_t n = 0;
        for (const auto &t : tensors)
            if (t.trainable)
                n += t.data.size();
        return n;
    }

    bool operator==(const NetworkParams &) const = default;
};

inline std::size_t param_count(const NetworkConfig &c)
{
    std::size_t n = 0, ch = 1;
    for (const auto &l : c.conv)
    {
        n += l.filters * ch * l.kernel + l.filters + 2 * l.filters;
        ch = l.filters;
    }
    std::size_t in = c.flat_size();
    for (auto w : c.fc)
    {
        n += w * in + w;
        in = w;
    }
    return n + c.output_size() * in + c.output_size();
}

// Kaiming-uniform weights (LeakyReLU gain for hidden layers, unit gain for the output layer),
// zero biases, identity batch norm.
inline NetworkParams init_params(const NetworkConfig &cfg, std::uint64_t seed)
{
    cfg.validate();
    NetworkParams p;
    p.config = cfg;
    Rng rng = make_rng(seed, {0x6e657477});
    auto uniform_tensor = [&](std::string name, std::vector<std::size_t> shape, std::size_t fan_in, double gain2) {
        Tensor t{std::move(name), std::move(shape), {}, true};
        const std::size_t n = std::accumulate(t.shape.begin(), t.shape.end(), std::size_t{1}, std::multiplies<>());
        const double bound = std::sqrt(3.0 * gain2 / double(fan_in));
        t.data.resize(n);
        for (auto &x : t.data)
            x = uniform(rng, -bound, bound);
        return t;
    };
    auto filled = [](std::string name, std::size_t n, double v, bool trainable) {
        return Tensor{std::move(name), {n}, std::vector<double>(n, v), trainable};
    };
    const double leaky_gain2 = 2.0 / (1.0 + kLeakySlope * kLeakySlope);
    std::size_t ch = 1;
    for (std::size_t l = 0; l < cfg.conv.size(); ++l)
    {
        const auto &c = cfg.conv[l];
        const std::string pre = "conv" + std::to_string(l);
        p.tensors.push_back(uniform_tensor(pre + ".weight", {c.filters, ch, c.kernel}, ch * c.kernel, leaky_gain2));
        p.tensors.push_back(filled(pre + ".bias", c.filters, 0.0, true));
        p.tensors.push_back(filled(pre + ".bn_gamma", c.filters, 1.0, true));
        p.tensors.push_back(filled(pre + ".bn_beta", c.filters, 0.0, true));
        p.tensors.push_back(filled(pre + ".bn_running_mean", c.filters, 0.0, false));
        p.tensors.push_back(filled(pre + ".bn_running_var", c.filters, 1.0, false));
        ch = c.filters;
    }
    std::size_t in = cfg.flat_size();
    for (std::size_t i = 0; i <= cfg.fc.size(); ++i)
    {
        const bool out_layer = i == cfg.fc.size();
        const std::size_t w = out_layer ? cfg.output_size() : cfg.fc[i];
        const std::string pre = "fc" + std::to_string(i);
        p.tensors.push_back(uniform_tensor(pre + ".weight", {w, in}, in, out_layer ? 1.0 : leaky_gain2));
        p.tensors.push_back(filled(pre + ".bias", w, 0.0, true));
        in = w;
    }
    return p;
}

// Freeze mask that leaves only the last two fully-connected layers trainable.
inline std::vector<bool> last_two_fc_mask(const NetworkParams &p)
{
    std::vector<bool> frozen(p.tensors.size(), true);
    const std::size_t n = p.fc_count();
    for (std::size_t i = n >= 2 ? n - 2 : 0; i < n; ++i)
    {
        frozen[p.fc_index(i)] = false;
        frozen[p.fc_index(i) + 1] = false;
    }
    return frozen;
}

// ---- preprocessing ----

struct PreprocessedSample
{
    std::vector<double> input; // 2 N_T N_R x W, row-major
    double norm = 0.0;         // max |entry| of the stacked real tensor, stop-gradient
    bool degenerate = false;   // all-zero input
    CVec whitened;             // C^{-H/2} h_ls
};

inline PreprocessedSample preprocess(std::span<const cx> h_ls, const LsCovariance &cov)
{
    const ChannelDims &d = cov.dims;
    PreprocessedSample s;
    s.whitened = cov.whiten(h_ls);
    const std::size_t space = d.space(), w = d.w;
    for (const auto &v : s.whitened)
        s.norm = std::max({s.norm, std::abs(v.real()), std::abs(v.imag())});
    s.degenerate = !(s.norm > 0.0);
    s.input.assign(2 * space * w, 0.0);
    if (s.degenerate)
        return s;
    for (std::size_t k = 0; k < w; ++k)
        for (std::size_t i = 0; i < space; ++i)
        {
            const cx v = s.whitened[k * space + i];
            s.input[i * w + k] = v.real() / s.norm;
            s.input[(space + i) * w + k] = v.imag() / s.norm;
        }
    return s;
}

inline PreprocessedSample preprocess(const LsEstimate &e) { return preprocess(e.h_ls, ls_covariance(e)); }

// Inverse pipeline: un-stack, re-scale, un-whiten.
inline CVec unpreprocess(const PreprocessedSample &s, const LsCovariance &cov)
{
    const std::size_t space = cov.dims.space(), w = cov.dims.w;
    CVec y(space * w);
    for (std::size_t k = 0; k < w; ++k)
        for (std::size_t i = 0; i < space; ++i)
            y[k * space + i] = cx{s.input[i * w + k], s.input[(space + i) * w + k]} * s.norm;
    return cov.unwhiten(y);
}

// ---- forward / backward machinery ----

enum class Phase
{
    train,
    infer
};

namespace detail
{

inline double leaky(double x) { return x > 0.0 ? x : kLeakySlope * x; }
inline double leaky_grad(double x) { return x > 0.0 ? 1.0 : kLeakySlope; }

struct ConvCache
{
    std::vector<double> input, pre, act, xhat, out;
    std::vector<double> inv_std;
    bool batch_stats = true;
};

struct FcCache
{
    std::vector<double> input, pre, out;
};

struct BatchCache
{
    std::size_t batch = 0;
    std::vector<ConvCache> conv;
    std::vector<FcCache> fc;
};

// Forward pass over a batch. bn_batch[l] selects batch statistics for conv layer l; when
// update_running is set, those layers also update their running estimates.
inline const std::vector<double> &forward_batch(NetworkParams &p, const std::vector<const std::vector<double> *> &inputs,
                                                const std::vector<bool> &bn_batch, bool update_running, BatchCache &cache)
{
    const auto &cfg = p.config;
    const std::size_t b_n = inputs.size(), rows = cfg.input_rows(), w = cfg.dims.w, plane = rows * w;
    cache.batch = b_n;
    cache.conv.resize(cfg.conv.size());
    cache.fc.resize(p.fc_count());

    std::size_t ch = 1;
    std::vector<double> x(b_n * plane);
    for (std::size_t b = 0; b < b_n; ++b)
    {
        if (inputs[b]->size() != plane)
            throw DimensionMismatch("network input size mismatch");
        std::copy(inputs[b]->begin(), inputs[b]->end(), x.begin() + std::ptrdiff_t(b * plane));
    }

    for (std::size_t l = 0; l < cfg.conv.size(); ++l)
    {
        auto &cc = cache.conv[l];
        const std::size_t f_n = cfg.conv[l].filters, k = cfg.conv[l].kernel, half = k / 2;
        const auto &kw = p.tensors[p.conv_index(l)].data;
        const auto &bias = p.tensors[p.conv_index(l) + 1].data;
        const auto &gamma = p.tensors[p.conv_index(l) + 2].data;
        const auto &beta = p.tensors[p.conv_index(l) + 3].data;
        auto &rmean = p.tensors[p.conv_index(l) + 4].data;
        auto &rvar = p.tensors[p.conv_index(l) + 5].data;

        cc.input = std::move(x);
        cc.pre.assign(b_n * f_n * plane, 0.0);
        for (std::size_t b = 0; b < b_n; ++b)
            for (std::size_t f = 0; f < f_n; ++f)
            {
                double *out = cc.pre.data() + (b * f_n + f) * plane;
                std::fill(out, out + plane, bias[f]);
                for (std::size_t c = 0; c < ch; ++c)
                {
                    const double *in = cc.input.data() + (b * ch + c) * plane;
                    for (std::size_t j = 0; j < k; ++j)
                    {
                        const double kv = kw[(f * ch + c) * k + j];
                        // out[h, t] += kv * in[h, t + j - half] over the valid range of t
                        const std::size_t t0 = j < half ? half - j : 0;
                        const std::size_t t1 = std::min(w, w + half - j);
                        for (std::size_t h = 0; h < rows; ++h)
                        {
                            double *o = out + h * w;
                            const double *s = in + h * w + j - half;
                            for (std::size_t t = t0; t < t1; ++t)
                                o[t] += kv * s[t];
                        }
                    }
                }
            }
        cc.act.resize(cc.pre.size());
        for (std::size_t i = 0; i < cc.pre.size(); ++i)
            cc.act[i] = leaky(cc.pre[i]);

        // batch norm per feature map
        cc.batch_stats = bn_batch[l];
        cc.inv_std.assign(f_n, 0.0);
        cc.xhat.resize(cc.act.size());
        cc.out.resize(cc.act.size());
        const double count = double(b_n * plane);
        for (std::size_t f = 0; f < f_n; ++f)
        {
            double mean, var;
            if (cc.batch_stats)
            {
                double s = 0.0;
                for (std::size_t b = 0; b < b_n; ++b)
                {
                    const double *a = cc.act.data() + (b * f_n + f) * plane;
                    for (std::size_t i = 0; i < plane; ++i)
                        s += a[i];
                }
                mean = s / count;
                double q = 0.0;
                for (std::size_t b = 0; b < b_n; ++b)
                {
                    const double *a = cc.act.data() + (b * f_n + f) * plane;
                    for (std::size_t i = 0; i < plane; ++i)
                        q += (a[i] - mean) * (a[i] - mean);
                }
                var = q / count;
                if (update_running)
                {
                    const double m = cfg.bn_momentum;
                    const double unbiased = count > 1.0 ? q / (count - 1.0) : var;
                    rmean[f] = m * rmean[f] + (1.0 - m) * mean;
                    rvar[f] = m * rvar[f] + (1.0 - m) * unbiased;
                }
            }
            else
            {
                mean = rmean[f];
                var = rvar[f];
            }
            const double is = 1.0 / std::sqrt(var + cfg.bn_eps);
            cc.inv_std[f] = is;
            for (std::size_t b = 0; b < b_n; ++b)
            {
                const std::size_t off = (b * f_n + f) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                {
                    const double xh = (cc.act[off + i] - mean) * is;
                    cc.xhat[off + i] = xh;
                    cc.out[off + i] = gamma[f] * xh + beta[f];
                }
            }
        }
        x = cc.out;
        ch = f_n;
    }

    // fully-connected stack; the flattened conv output is (filter, row, tap) ordered
    std::size_t in_n = cfg.flat_size();
    for (std::size_t i = 0; i < p.fc_count(); ++i)
    {
        auto &fcache = cache.fc[i];
        const bool out_layer = i + 1 == p.fc_count();
        const std::size_t out_n = out_layer ? cfg.output_size() : cfg.fc[i];
        const auto &wt = p.tensors[p.fc_index(i)].data;
        const auto &bias = p.tensors[p.fc_index(i) + 1].data;
        fcache.input = std::move(x);
        fcache.pre.assign(b_n * out_n, 0.0);
        for (std::size_t b = 0; b < b_n; ++b)
        {
            const double *in = fcache.input.data() + b * in_n;
            double *o = fcache.pre.data() + b * out_n;
            for (std::size_t r = 0; r < out_n; ++r)
            {
                const double *row = wt.data() + r * in_n;
                double s = bias[r];
                for (std::size_t c = 0; c < in_n; ++c)
                    s += row[c] * in[c];
                o[r] = s;
            }
        }
        fcache.out.resize(fcache.pre.size());
        for (std::size_t j = 0; j < fcache.pre.size(); ++j)
            fcache.out[j] = out_layer ? fcache.pre[j] : leaky(fcache.pre[j]);
        x = fcache.out;
        in_n = out_n;
    }
    return cache.fc.back().out;
}

// Backward pass from d(loss)/d(network output). Gradients are accumulated into grads
// (same layout as p.tensors); tensors flagged in `frozen` are skipped entirely.
inline void backward_batch(const NetworkParams &p, const BatchCache &cache, std::vector<double> d_out,
                           const std::vector<bool> &frozen, std::vector<std::vector<double>> &grads)
{
    const auto &cfg = p.config;
    const std::size_t b_n = cache.batch, rows = cfg.input_rows(), w = cfg.dims.w, plane = rows * w;
    auto is_frozen = [&](std::size_t idx) { return !frozen.empty() && frozen[idx]; };

    // earliest layer that still needs a gradient; nothing below it has to be propagated
    std::size_t first_live = p.tensors.size();
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        if (p.tensors[i].trainable && !is_frozen(i))
        {
            first_live = i;
            break;
        }

    std::vector<double> d = std::move(d_out);
    for (std::size_t ii = p.fc_count(); ii-- > 0;)
    {
        const auto &fcache = cache.fc[ii];
        const bool out_layer = ii + 1 == p.fc_count();
        const std::size_t out_n = out_layer ? cfg.output_size() : cfg.fc[ii];
        const std::size_t in_n = fcache.input.size() / b_n;
        if (!out_layer)
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] *= leaky_grad(fcache.pre[j]);
        const std::size_t wi = p.fc_index(ii);
        if (!is_frozen(wi))
        {
            auto &gw = grads[wi];
            for (std::size_t b = 0; b < b_n; ++b)
            {
                const double *in = fcache.input.data() + b * in_n;
                for (std::size_t r = 0; r < out_n; ++r)
                {
                    const double dv = d[b * out_n + r];
                    if (dv == 0.0)
                        continue;
                    double *g = gw.data() + r * in_n;
                    for (std::size_t c = 0; c < in_n; ++c)
                        g[c] += dv * in[c];
                }
            }
        }
        if (!is_frozen(wi + 1))
            for (std::size_t b = 0; b < b_n; ++b)
                for (std::size_t r = 0; r < out_n; ++r)
                    grads[wi + 1][r] += d[b * out_n + r];
        if (wi <= first_live)
            return;
        const auto &wt = p.tensors[wi].data;
        std::vector<double> dn(b_n * in_n, 0.0);
        for (std::size_t b = 0; b < b_n; ++b)
            for (std::size_t r = 0; r < out_n; ++r)
            {
                const double dv = d[b * out_n + r];
                if (dv == 0.0)
                    continue;
                const double *row = wt.data() + r * in_n;
                double *o = dn.data() + b * in_n;
                for (std::size_t c = 0; c < in_n; ++c)
                    o[c] += dv * row[c];
            }
        d = std::move(dn);
    }

    for (std::size_t l = cfg.conv.size(); l-- > 0;)
    {
        const auto &cc = cache.conv[l];
        const std::size_t f_n = cfg.conv[l].filters, k = cfg.conv[l].kernel, half = k / 2;
        const std::size_t ch = l == 0 ? 1 : cfg.conv[l - 1].filters;
        const std::size_t ci = p.conv_index(l);
        const auto &gamma = p.tensors[ci + 2].data;
        const double count = double(b_n * plane);

        // batch norm
        std::vector<double> da(d.size());
        for (std::size_t f = 0; f < f_n; ++f)
        {
            double sd = 0.0, sdx = 0.0;
            for (std::size_t b = 0; b < b_n; ++b)
            {
                const std::size_t off = (b * f_n + f) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                {
                    sd += d[off + i];
                    sdx += d[off + i] * cc.xhat[off + i];
                }
            }
            if (!is_frozen(ci + 2))
                grads[ci + 2][f] += sdx;
            if (!is_frozen(ci + 3))
                grads[ci + 3][f] += sd;
            const double g = gamma[f], is = cc.inv_std[f];
            for (std::size_t b = 0; b < b_n; ++b)
            {
                const std::size_t off = (b * f_n + f) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                {
                    double v = g * is * d[off + i];
                    if (cc.batch_stats)
                        v = g * is * (d[off + i] - sd / count - cc.xhat[off + i] * sdx / count);
                    da[off + i] = v * leaky_grad(cc.pre[off + i]);
                }
            }
        }

        if (!is_frozen(ci + 1))
            for (std::size_t b = 0; b < b_n; ++b)
                for (std::size_t f = 0; f < f_n; ++f)
                {
                    const double *dp = da.data() + (b * f_n + f) * plane;
                    double s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i)
                        s += dp[i];
                    grads[ci + 1][f] += s;
                }
        const bool need_input = ci > first_live;
        const auto &kw = p.tensors[ci].data;
        std::vector<double> dn(need_input ? b_n * ch * plane : 0, 0.0);
        for (std::size_t b = 0; b < b_n; ++b)
            for (std::size_t f = 0; f < f_n; ++f)
            {
                const double *dp = da.data() + (b * f_n + f) * plane;
                for (std::size_t c = 0; c < ch; ++c)
                {
                    const double *in = cc.input.data() + (b * ch + c) * plane;
                    for (std::size_t j = 0; j < k; ++j)
                    {
                        const std::size_t t0 = j < half ? half - j : 0;
                        const std::size_t t1 = std::min(w, w + half - j);
                        double gk = 0.0;
                        const double kv = kw[(f * ch + c) * k + j];
                        for (std::size_t h = 0; h < rows; ++h)
                        {
                            const double *g = dp + h * w;
                            const double *s = in + h * w + j - half;
                            for (std::size_t t = t0; t < t1; ++t)
                                gk += g[t] * s[t];
                            if (need_input)
                            {
                                double *o = dn.data() + (b * ch + c) * plane + h * w + j - half;
                                for (std::size_t t = t0; t < t1; ++t)
                                    o[t] += kv * g[t];
                            }
                        }
                        if (!is_frozen(ci))
                            grads[ci][(f * ch + c) * k + j] += gk;
                    }
                }
            }
        if (!need_input)
            return;
        d = std::move(dn);
    }
}

// Reads the three head matrices (Tx, Rx, T) of sample b from the network output.
inline std::array<ComplexMat, 3> head_matrices(const NetworkConfig &cfg, std::span<const double> out)
{
    const std::array<std::pair<std::size_t, std::size_t>, 3> shapes{
        {{cfg.dims.n_t, cfg.ranks.tx}, {cfg.dims.n_r, cfg.ranks.rx}, {cfg.dims.w, cfg.ranks.t}}};
    std::array<ComplexMat, 3> a;
    std::size_t off = 0;
    for (std::size_t h = 0; h < 3; ++h)
    {
        const auto [n, r] = shapes[h];
        a[h] = ComplexMat(n, r);
        for (std::size_t i = 0; i < n * r; ++i)
            a[h].data()[i] = cx{out[off + i], out[off + n * r + i]};
        off += 2 * n * r;
    }
    return a;
}

inline std::vector<bool> all_batch_stats(const NetworkConfig &cfg, Phase phase)
{
    return std::vector<bool>(cfg.conv.size(), phase == Phase::train);
}

// Batch-norm layers whose scale and shift are both frozen run on running statistics.
inline std::vector<bool> bn_modes_for(const NetworkParams &p, const std::vector<bool> &frozen)
{
    std::vector<bool> batch(p.config.conv.size(), true);
    if (!frozen.empty())
        for (std::size_t l = 0; l < batch.size(); ++l)
            batch[l] = !(frozen[p.conv_index(l) + 2] && frozen[p.conv_index(l) + 3]);
    return batch;
}

} // namespace detail

struct HeadOutput
{
    std::array<ComplexMat, 3> a; // pre-SVD matrices (Tx, Rx, T)
    std::array<ThinSvd, 3> svd;
    EigenmodeSet modes;
};

inline HeadOutput heads_from_output(const NetworkConfig &cfg, std::span<const double> out)
{
    HeadOutput h;
    h.a = detail::head_matrices(cfg, out);
    for (std::size_t i = 0; i < 3; ++i)
        h.svd[i] = thin_svd(h.a[i]);
    h.modes = {h.svd[2].u, h.svd[0].u, h.svd[1].u};
    return h;
}

// Forward pass for a batch of preprocessed samples, returning the emitted eigenmodes.
inline std::vector<EigenmodeSet> forward(NetworkParams &p, std::span<const PreprocessedSample> samples, Phase phase)
{
    std::vector<const std::vector<double> *> in;
    for (const auto &s : samples)
        in.push_back(&s.input);
    detail::BatchCache cache;
    const auto &out =
        detail::forward_batch(p, in, detail::all_batch_stats(p.config, phase), phase == Phase::train, cache);
    std::vector<EigenmodeSet> res;
    const std::size_t o = p.config.output_size();
    for (std::size_t b = 0; b < samples.size(); ++b)
        res.push_back(heads_from_output(p.config, std::span(out).subspan(b * o, o)).modes);
    return res;
}

inline EigenmodeSet forward(NetworkParams &p, const PreprocessedSample &s, Phase phase)
{
    return forward(p, std::span(&s, 1), phase).front();
}

// Projects with the emitted basis: C^{H/2} U U^H C^{-H/2} h_ls, no position input anywhere.
inline CVec project_with(const EigenmodeSet &em, const LsCovariance &cov, std::span<const cx> whitened)
{
    const LrProjector proj{em, cov, kLearnedProjector};
    CVec x(whitened.begin(), whitened.end());
    proj.project_whitened(x);
    return cov.unwhiten(x);
}

inline CVec predict_lr(NetworkParams &p, const LsEstimate &e)
{
    const LsCovariance cov = ls_covariance(e);
    const auto s = preprocess(e.h_ls, cov);
    return project_with(forward(p, s, Phase::infer), cov, s.whitened);
}

// ---- training samples, loss and gradients ----

struct TrainSample
{
    CVec h_ls;
    CVec target; // position-based LR estimate
    CVec truth;  // for validation NMSE; may be empty
    std::shared_ptr<const LsCovariance> cov;
};

struct BackwardStats
{
    double loss = 0.0;
    std::size_t skipped = 0;  // samples without gradient (degenerate spectrum after jitter)
    std::size_t jittered = 0; // samples rescued by jitter
    double max_stiefel_error = 0.0;
};

using Gradients = std::vector<std::vector<double>>;

inline Gradients zero_gradients(const NetworkParams &p)
{
    Gradients g;
    for (const auto &t : p.tensors)
        g.emplace_back(t.data.size(), 0.0);
    return g;
}

namespace detail
{

// Per-sample loss ||target - h_pred||^2 and its adjoint with respect to the head outputs.
// Returns false if a head spectrum is degenerate even after jitter (no gradient).
inline bool sample_head_gradient(const NetworkConfig &cfg, std::span<const double> out, const TrainSample &ts,
                                 const CVec &whitened, double &loss, std::span<double> d_out, bool &jittered,
                                 double &stiefel)
{
    const auto &d = cfg.dims;
    auto h = heads_from_output(cfg, out);
    jittered = false;
    bool ok = true;
    for (std::size_t i = 0; i < 3; ++i)
    {
        const auto &svd = h.svd[i];
        const double smax = svd.s.empty() ? 0.0 : svd.s.front();
        if (smax > 0.0 && svd_min_gap(svd, h.a[i].rows()) >= kSvdGapTolerance * smax)
            continue;
        // index-scaled jitter on the leading diagonal
        ComplexMat aj = h.a[i];
        const double base = 1e-9 * (smax > 0.0 ? smax : 1.0);
        for (std::size_t j = 0; j < std::min(aj.rows(), aj.cols()); ++j)
            aj(j, j) += base * double(j + 1);
        auto sj = thin_svd(aj);
        const double sm = sj.s.empty() ? 0.0 : sj.s.front();
        if (sm > 0.0 && svd_min_gap(sj, aj.rows()) >= kSvdGapTolerance * sm)
        {
            h.a[i] = std::move(aj);
            h.svd[i] = std::move(sj);
            jittered = true;
        }
        else
            ok = false;
    }
    h.modes = {h.svd[2].u, h.svd[0].u, h.svd[1].u};
    for (const auto *u : {&h.modes.u_t, &h.modes.u_tx, &h.modes.u_rx})
        stiefel = std::max(stiefel, orthonormality_error(*u));

    const LsCovariance &cov = *ts.cov;
    const ComplexMat prx = h.modes.u_rx * h.modes.u_rx.adjoint();
    const ComplexMat ptx = (h.modes.u_tx * h.modes.u_tx.adjoint()).conj();
    const ComplexMat pt = (h.modes.u_t * h.modes.u_t.adjoint()).conj();

    // z_m: whitened vector projected along the two modes other than m
    CVec z_rx = whitened, z_tx = whitened, z_t = whitened;
    mode_apply(z_rx, d, Mode::tx, ptx);
    mode_apply(z_rx, d, Mode::time, pt);
    mode_apply(z_tx, d, Mode::rx, prx);
    z_t = z_tx;
    mode_apply(z_tx, d, Mode::time, pt);
    mode_apply(z_t, d, Mode::tx, ptx);
    CVec proj = z_rx;
    mode_apply(proj, d, Mode::rx, prx);
    const CVec pred = cov.unwhiten(proj);

    CVec e(pred.size());
    loss = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i)
    {
        e[i] = pred[i] - ts.target[i];
        loss += std::norm(e[i]);
    }
    std::fill(d_out.begin(), d_out.end(), 0.0);
    if (!ok)
        return false;

    // e_tilde = (C^{H/2})^H e
    mode_apply(e, d, Mode::rx, cov.chol.adjoint() * cx{std::sqrt(cov.scale), 0.0});
    const std::array<std::pair<Mode, const CVec *>, 3> modes{
        {{Mode::tx, &z_tx}, {Mode::rx, &z_rx}, {Mode::time, &z_t}}};
    const std::array<const ComplexMat *, 3> us{&h.modes.u_tx, &h.modes.u_rx, &h.modes.u_t};
    std::size_t off = 0;
    for (std::size_t i = 0; i < 3; ++i)
    {
        const auto [m, z] = modes[i];
        ComplexMat pbar = unfold(e, d, m) * unfold(*z, d, m).adjoint() * cx{2.0, 0.0};
        if (m != Mode::rx)
            pbar = pbar.conj();
        const ComplexMat gu = (pbar + pbar.adjoint()) * (*us[i]);
        const ComplexMat ga = thin_svd_u_backward(h.a[i], h.svd[i], gu);
        const std::size_t nr = ga.size();
        for (std::size_t k = 0; k < nr; ++k)
        {
            d_out[off + k] = ga.data()[k].real();
            d_out[off + nr + k] = ga.data()[k].imag();
        }
        off += 2 * nr;
    }
    return true;
}

} // namespace detail

inline void check_sample(const NetworkConfig &cfg, const TrainSample &s, bool need_target = true)
{
    if (!s.cov || s.cov->dims != cfg.dims || s.h_ls.size() != cfg.dims.total() ||
        (need_target && s.target.size() != cfg.dims.total()))
        throw DimensionMismatch("training sample does not match the network dimensions");
}

// Loss sum_m ||h_lr_train - h_lr_pred||^2 and its gradient. Frozen tensors get exactly zero.
// Running batch-norm statistics are updated only when update_running is set.
inline BackwardStats loss_and_gradient(NetworkParams &p, std::span<const TrainSample> batch, Gradients *grads,
                                       const std::vector<bool> &frozen = {}, Phase phase = Phase::train,
                                       bool update_running = false)
{
    const auto &cfg = p.config;
    BackwardStats st;
    if (batch.empty())
        return st;
    std::vector<PreprocessedSample> pre;
    pre.reserve(batch.size());
    std::vector<const std::vector<double> *> in;
    for (const auto &s : batch)
    {
        check_sample(cfg, s);
        pre.push_back(preprocess(s.h_ls, *s.cov));
    }
    for (const auto &s : pre)
        in.push_back(&s.input);
    const auto bn = phase == Phase::train ? detail::bn_modes_for(p, frozen) : detail::all_batch_stats(cfg, phase);
    detail::BatchCache cache;
    const auto out = detail::forward_batch(p, in, bn, update_running, cache);
    const std::size_t o = cfg.output_size();
    std::vector<double> d_out(batch.size() * o, 0.0);
    for (std::size_t b = 0; b < batch.size(); ++b)
    {
        double l = 0.0;
        bool jit = false;
        const bool ok = detail::sample_head_gradient(cfg, std::span(out).subspan(b * o, o), batch[b], pre[b].whitened,
                                                     l, std::span(d_out).subspan(b * o, o), jit, st.max_stiefel_error);
        st.loss += l;
        st.skipped += ok ? 0 : 1;
        st.jittered += jit ? 1 : 0;
    }
    if (grads)
    {
        if (grads->size() != p.tensors.size())
            *grads = zero_gradients(p);
        detail::backward_batch(p, cache, std::move(d_out), frozen, *grads);
    }
    return st;
}

inline double loss(NetworkParams &p, std::span<const TrainSample> batch, Phase phase = Phase::train)
{
    return loss_and_gradient(p, batch, nullptr, {}, phase, false).loss;
}

inline Gradients backward(NetworkParams &p, std::span<const TrainSample> batch, const std::vector<bool> &frozen = {},
                          BackwardStats *stats = nullptr)
{
    Gradients g = zero_gradients(p);
    auto st = loss_and_gradient(p, batch, &g, frozen, Phase::train, false);
    if (stats)
        *stats = st;
    return g;
}

// Predictions for many samples in inference mode (running batch-norm statistics).
inline std::vector<CVec> predict_batch(NetworkParams &p, std::span<const TrainSample> samples,
                                       double *max_stiefel = nullptr, std::size_t chunk = 256)
{
    std::vector<CVec> res;
    res.reserve(samples.size());
    for (std::size_t s0 = 0; s0 < samples.size(); s0 += chunk)
    {
        const auto part = samples.subspan(s0, std::min(chunk, samples.size() - s0));
        std::vector<PreprocessedSample> pre;
        for (const auto &s : part)
        {
            check_sample(p.config, s, false);
            pre.push_back(preprocess(s.h_ls, *s.cov));
        }
        const auto em = forward(p, pre, Phase::infer);
        for (std::size_t b = 0; b < part.size(); ++b)
        {
            if (max_stiefel)
                for (const auto *u : {&em[b].u_t, &em[b].u_tx, &em[b].u_rx})
                    *max_stiefel = std::max(*max_stiefel, orthonormality_error(*u));
            res.push_back(project_with(em[b], *part[b].cov, pre[b].whitened));
        }
    }
    return res;
}

// Ratio of summed squared errors E||h - h_est||^2 / E||h - h_ls||^2 in dB; NaN without a
// usable reference.
inline double validation_nmse_db(std::span<const TrainSample> samples, const std::vector<CVec> &pred)
{
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k)
    {
        const auto &t = samples[k].truth;
        if (t.size() != pred[k].size())
            return std::numeric_limits<double>::quiet_NaN();
        for (std::size_t i = 0; i < t.size(); ++i)
        {
            num += std::norm(t[i] - pred[k][i]);
            den += std::norm(t[i] - samples[k].h_ls[i]);
        }
    }
    if (!(den > 0.0))
        return std::numeric_limits<double>::quiet_NaN();
    return 10.0 * std::log10(std::max(num / den, 1e-10));
}

// ---- optimization ----

struct EpochRecord
{
    std::size_t epoch = 0;
    std::size_t steps = 0; // cumulative optimizer steps
    double train_loss = 0.0; // mean per-sample loss over the epoch
    double val_nmse_db = std::numeric_limits<double>::quiet_NaN();
    std::size_t skipped_degenerate = 0;
    std::size_t jittered = 0;
    double stiefel_error = 0.0; // max ||U^H U - I||_F over the emitted factors seen this epoch
};

struct TrainResult
{
    NetworkParams params;
    std::vector<EpochRecord> history;
};

class Adam
{
public:
    Adam(const NetworkParams &p, const TrainConfig &tc) : tc_(tc), m_(zero_gradients(p)), v_(zero_gradients(p)) {}

    void step(NetworkParams &p, const Gradients &g, const std::vector<bool> &frozen)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(tc_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(tc_.beta2, double(t_));
        for (std::size_t i = 0; i < p.tensors.size(); ++i)
        {
            if (!p.tensors[i].trainable || (!frozen.empty() && frozen[i]))
                continue;
            auto &x = p.tensors[i].data;
            for (std::size_t k = 0; k < x.size(); ++k)
            {
                const double gk = g[i][k];
                m_[i][k] = tc_.beta1 * m_[i][k] + (1.0 - tc_.beta1) * gk;
                v_[i][k] = tc_.beta2 * v_[i][k] + (1.0 - tc_.beta2) * gk * gk;
                x[k] -= tc_.learning_rate * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + tc_.adam_eps);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    TrainConfig tc_;
    Gradients m_, v_;
    std::size_t t_ = 0;
};

namespace detail
{

inline EpochRecord run_epoch(NetworkParams &p, Adam &opt, std::span<const TrainSample> train_set,
                             std::span<const TrainSample> val, const TrainConfig &tc, std::size_t epoch)
{
    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(tc.seed, {0x7472616e, epoch});
    std::shuffle(order.begin(), order.end(), rng);

    Gradients g = zero_gradients(p);
    std::vector<TrainSample> batch;
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t s0 = 0; s0 < order.size(); s0 += tc.batch_size)
    {
        const std::size_t n = std::min(tc.batch_size, order.size() - s0);
        // a single-sample batch has no batch statistics
        if (n < 2 && order.size() > 1)
            break;
        batch.clear();
        for (std::size_t k = 0; k < n; ++k)
            batch.push_back(train_set[order[s0 + k]]);
        for (auto &gi : g)
            std::fill(gi.begin(), gi.end(), 0.0);
        const auto st = loss_and_gradient(p, batch, &g, tc.freeze_mask, Phase::train, true);
        opt.step(p, g, tc.freeze_mask);
        total += st.loss;
        seen += n;
        rec.skipped_degenerate += st.skipped;
        rec.jittered += st.jittered;
        rec.stiefel_error = std::max(rec.stiefel_error, st.max_stiefel_error);
    }
    rec.train_loss = seen ? total / double(seen) : 0.0;
    rec.steps = opt.steps();
    if (!val.empty())
    {
        const auto pred = predict_batch(p, val, &rec.stiefel_error);
        rec.val_nmse_db = validation_nmse_db(val, pred);
    }
    return rec;
}

} // namespace detail

inline TrainResult train(NetworkParams init, std::span<const TrainSample> train_set, std::span<const TrainSample> val,
                         const TrainConfig &tc)
{
    tc.validate();
    if (!tc.freeze_mask.empty() && tc.freeze_mask.size() != init.tensors.size())
        throw InvalidConfig("train.freeze_mask", "mask length differs from the tensor count");
    TrainResult res{std::move(init), {}};
    Adam opt(res.params, tc);
    for (std::size_t ep = 1; ep <= tc.epochs; ++ep)
        res.history.push_back(detail::run_epoch(res.params, opt, train_set, val, tc, ep));
    return res;
}

inline TrainResult train(const NetworkConfig &cfg, std::span<const TrainSample> train_set,
                         std::span<const TrainSample> val, const TrainConfig &tc)
{
    return train(init_params(cfg, tc.seed), train_set, val, tc);
}

// Retrains the last two fully-connected layers. Stops when the best validation NMSE has not
// improved by plateau_db for plateau_epochs epochs and returns the best parameters seen,
// the starting point included. Without validation data all tc.epochs are run.
inline TrainResult fine_tune(const NetworkParams &params, std::span<const TrainSample> train_set,
                             std::span<const TrainSample> val, TrainConfig tc)
{
    tc.validate();
    tc.freeze_mask = last_two_fc_mask(params);
    TrainResult res{params, {}};
    NetworkParams cur = params;
    Adam opt(cur, tc);
    double best = std::numeric_limits<double>::infinity();
    if (!val.empty())
    {
        NetworkParams probe = params;
        best = validation_nmse_db(val, predict_batch(probe, val));
    }
    std::size_t since = 0;
    for (std::size_t ep = 1; ep <= tc.epochs; ++ep)
    {
        auto rec = detail::run_epoch(cur, opt, train_set, val, tc, ep);
        res.history.push_back(rec);
        if (val.empty() || std::isnan(rec.val_nmse_db))
        {
            res.params = cur;
            continue;
        }
        if (rec.val_nmse_db < best)
        {
            const bool significant = rec.val_nmse_db < best - tc.plateau_db;
            best = rec.val_nmse_db;
            res.params = cur;
            since = significant ? 0 : since + 1;
        }
        else
            ++since;
        if (since >= tc.plateau_epochs)
            break;
    }
    return res;
}

inline void write_history_csv(const std::string &path, const std::vector<EpochRecord> &h)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write history: " + path);
    out << "epoch,train_loss,val_nmse_db,skipped_degenerate,steps\n";
    out.precision(10);
    for (const auto &r : h)
        out << r.epoch << ',' << r.train_loss << ',' << r.val_nmse_db << ',' << r.skipped_degenerate << ',' << r.steps
            << '\n';
}

// ---- model file ----

inline constexpr std::uint16_t kModelVersion = 1;

// Layout: "MLRN", u16 version, config {u32 N_T, N_R, W, r_Tx, r_Rx, r_T, u32 n_conv,
// (u32 filters, u32 kernel)*, u32 n_fc, u32 width*, f64 momentum, f64 eps}, u32 tensor count,
// per tensor {string name, u8 trainable, u32 ndim, u32 shape*, f64 payload}.
inline void save_params(const NetworkParams &p, const std::string &path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write model: " + path);
    using detail::put_le;
    const auto &c = p.config;
    out.write("MLRN", 4);
    put_le(out, kModelVersion);
    for (std::size_t v : {c.dims.n_t, c.dims.n_r, c.dims.w, c.ranks.tx, c.ranks.rx, c.ranks.t})
        put_le(out, static_cast<std::uint32_t>(v));
    put_le(out, static_cast<std::uint32_t>(c.conv.size()));
    for (const auto &l : c.conv)
    {
        put_le(out, static_cast<std::uint32_t>(l.filters));
        put_le(out, static_cast<std::uint32_t>(l.kernel));
    }
    put_le(out, static_cast<std::uint32_t>(c.fc.size()));
    for (auto w : c.fc)
        put_le(out, static_cast<std::uint32_t>(w));
    put_le(out, c.bn_momentum);
    put_le(out, c.bn_eps);
    put_le(out, static_cast<std::uint32_t>(p.tensors.size()));
    for (const auto &t : p.tensors)
    {
        detail::put_string(out, t.name);
        put_le(out, static_cast<std::uint8_t>(t.trainable ? 1 : 0));
        put_le(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto s : t.shape)
            put_le(out, static_cast<std::uint32_t>(s));
        for (double v : t.data)
            put_le(out, v);
    }
    if (!out)
        throw IoError("write failed: " + path);
}

inline NetworkParams load_params(const std::string &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open model: " + path);
    using detail::get_le;
    detail::expect_magic(in, "MLRN");
    const auto version = get_le<std::uint16_t>(in, "version");
    if (version != kModelVersion)
        throw FormatError("unsupported model version " + std::to_string(version));
    NetworkConfig c;
    std::array<std::size_t, 6> v{};
    for (auto &x : v)
        x = get_le<std::uint32_t>(in, "config");
    c.dims = {v[0], v[1], v[2]};
    c.ranks = {v[3], v[4], v[5]};
    c.conv.resize(get_le<std::uint32_t>(in, "config"));
    if (c.conv.size() > 1024)
        throw FormatError("model: implausible layer count");
    for (auto &l : c.conv)
    {
        l.filters = get_le<std::uint32_t>(in, "config");
        l.kernel = get_le<std::uint32_t>(in, "config");
    }
    c.fc.resize(get_le<std::uint32_t>(in, "config"));
    if (c.fc.size() > 1024)
        throw FormatError("model: implausible layer count");
    for (auto &w : c.fc)
        w = get_le<std::uint32_t>(in, "config");
    c.bn_momentum = get_le<double>(in, "config");
    c.bn_eps = get_le<double>(in, "config");
    try
    {
        c.validate();
    }
    catch (const ConfigError &e)
    {
        throw FormatError(std::string("model: invalid config: ") + e.what());
    }
    // the stored table must match the layout implied by the config
    const NetworkParams ref = init_params(c, 0);
    NetworkParams p;
    p.config = c;
    const auto count = get_le<std::uint32_t>(in, "tensor table");
    if (count != ref.tensors.size())
        throw FormatError("model: tensor count does not match the config");
    for (std::uint32_t i = 0; i < count; ++i)
    {
        Tensor t;
        t.name = detail::get_string(in, "tensor name");
        t.trainable = get_le<std::uint8_t>(in, "tensor") != 0;
        t.shape.resize(get_le<std::uint32_t>(in, "tensor"));
        if (t.shape.size() > 8)
            throw FormatError("model: implausible tensor rank");
        for (auto &s : t.shape)
            s = get_le<std::uint32_t>(in, "tensor");
        const auto &r = ref.tensors[i];
        if (t.name != r.name || t.shape != r.shape || t.trainable != r.trainable)
            throw FormatError("model: tensor " + t.name + " does not match the config layout");
        t.data.resize(r.data.size());
        for (auto &x : t.data)
            x = get_le<double>(in, "tensor payload");
        p.tensors.push_back(std::move(t));
    }
    for (std::size_t l = 0; l < c.conv.size(); ++l)
        for (double x : p.tensors[p.conv_index(l) + 5].data)
            if (!(x > 0.0))
                throw FormatError("model: running variance must be positive");
    return p;
}

} // namespace mlr

#endif
