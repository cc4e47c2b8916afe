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

// Experiment pipeline: dataset generation along the scenario trajectories, NMSE
// evaluation of the LS, position-based LR and learned LR estimators, transfer runs and
// report files.
//
// Passages of one position are split by realization index into fit | val | test. The
// position projector and the network only ever see the fit part (val for early stopping);
// every NMSE figure comes from the test part.

#ifndef MLR_HARNESS_HPP
#define MLR_HARNESS_HPP

#include "mlr/dnn.hpp"
#include "mlr/scenario.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace mlr
{

using Logger = std::function<void(const std::string &)>;

// ---- configuration ----

enum class Bandwidth
{
    flat,
    selective
};

struct PassageSplit
{
    std::size_t fit = 100;
    std::size_t val = 12;
    std::size_t test = 13;

    std::size_t total() const { return fit + val + test; }
};

struct ExperimentConfig
{
    std::string id = "experiment";
    std::string scenario;          // scenario config path
    std::string transfer_scenario; // optional second scenario for transfer runs
    Bandwidth mode = Bandwidth::selective;
    ArrayGeometry tx{2, 2};
    ArrayGeometry rx{4, 4};
    std::size_t w = 8;
    PulseShape pulse;
    double snr_db = 0.0;
    double sigma_x2 = 1.0;
    std::size_t pilot_length = 0; // 0 selects 2 W N_T
    PassageSplit split;
    std::size_t position_stride = 1;
    std::vector<std::size_t> ablation_passages{1, 4};
    std::size_t finetune_passages = 10;
    std::size_t finetune_epochs = 20;
    double finetune_learning_rate = 1e-3;
    NetworkConfig network;
    TrainConfig train;
    std::uint64_t seed = 1;
    nlohmann::json source; // parsed file content, digest input

    ChannelDims dims() const { return {tx.size(), rx.size(), w}; }
    std::size_t passages() const { return split.total(); }
    std::size_t pilot_symbols() const { return pilot_length ? pilot_length : default_pilot_length(dims()); }

    TrainConfig finetune_config() const
    {
        TrainConfig tc = train;
        tc.epochs = finetune_epochs;
        tc.learning_rate = finetune_learning_rate;
        tc.seed = derive_seed(train.seed, {0x66696e65});
        return tc;
    }

    void validate() const
    {
        if (scenario.empty())
            throw InvalidConfig("scenario", "a scenario config path is required");
        for (const auto *p : {&scenario, &transfer_scenario})
            if (!p->empty() && !std::filesystem::exists(*p))
                throw InvalidConfig(p == &scenario ? "scenario" : "transfer_scenario", "file not found: " + *p);
        if (tx.size() == 0 || rx.size() == 0)
            throw InvalidConfig("array", "arrays need at least one element");
        if (w == 0)
            throw InvalidConfig("taps", "must be >= 1");
        if (mode == Bandwidth::flat && w != 1)
            throw InvalidConfig("taps", "flat mode uses a single tap");
        if (!(pulse.symbol_time > 0.0) || !(pulse.rolloff >= 0.0 && pulse.rolloff <= 1.0))
            throw InvalidConfig("pulse", "symbol time > 0 and roll-off in [0, 1] required");
        if (!std::isfinite(snr_db))
            throw InvalidConfig("snr_db", "must be finite");
        if (!(sigma_x2 > 0.0))
            throw InvalidConfig("sigma_x2", "must be > 0");
        if (split.fit == 0 || split.test == 0)
            throw InvalidConfig("split", "fit and test passages must be >= 1");
        if (position_stride == 0)
            throw InvalidConfig("position_stride", "must be >= 1");
        for (auto l : ablation_passages)
            if (l == 0 || l > split.fit)
                throw InvalidConfig("ablation_passages", "each entry must lie in [1, fit]");
        if (finetune_passages == 0 || finetune_passages > split.fit)
            throw InvalidConfig("finetune_passages", "must lie in [1, fit]");
        if (network.dims != dims())
            throw InvalidConfig("network", "network dims differ from the channel dims");
        network.validate();
        train.validate();
    }
};

namespace detail
{

template <class T>
T json_field(const nlohmann::json &obj, const char *key, T def, const std::string &prefix = "")
{
    if (!obj.contains(key))
        return def;
    try
    {
        return obj.at(key).get<T>();
    }
    catch (const nlohmann::json::exception &e)
    {
        throw InvalidConfig(prefix + key, e.what());
    }
}

inline ArrayGeometry json_array(const nlohmann::json &j, const char *key, ArrayGeometry def)
{
    const auto v = json_field(j, key, std::array<std::size_t, 2>{def.n_az, def.n_el});
    return {v[0], v[1]};
}

} // namespace detail

// Paths inside the file are relative to the file's directory.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json &j, const std::filesystem::path &base = {})
{
    using detail::json_field;
    if (!j.is_object())
        throw InvalidConfig("<root>", "experiment config must be an object");
    ExperimentConfig c;
    c.source = j;
    c.id = json_field(j, "id", c.id);
    auto resolve = [&](const std::string &p) {
        if (p.empty())
            return p;
        const std::filesystem::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
    };
    c.scenario = resolve(json_field(j, "scenario", std::string{}));
    c.transfer_scenario = resolve(json_field(j, "transfer_scenario", std::string{}));

    const auto mode = json_field(j, "mode", std::string{"selective"});
    if (mode == "flat")
    {
        c.mode = Bandwidth::flat;
        c.w = 1;
        c.pulse.symbol_time = 1e-6;
    }
    else if (mode == "selective")
    {
        c.mode = Bandwidth::selective;
        c.w = 8;
        c.pulse.symbol_time = 20e-9;
    }
    else
        throw InvalidConfig("mode", "expected 'flat' or 'selective'");
    c.w = json_field(j, "taps", c.w);
    c.pulse.symbol_time = json_field(j, "symbol_time_s", c.pulse.symbol_time);
    c.pulse.rolloff = json_field(j, "rolloff", c.pulse.rolloff);
    c.tx = detail::json_array(j, "tx_array", c.tx);
    c.rx = detail::json_array(j, "rx_array", c.rx);
    c.snr_db = json_field(j, "snr_db", c.snr_db);
    c.sigma_x2 = json_field(j, "sigma_x2", c.sigma_x2);
    c.pilot_length = json_field(j, "pilot_length", c.pilot_length);
    if (j.contains("split"))
    {
        const auto &s = j["split"];
        c.split.fit = json_field(s, "fit", c.split.fit, "split.");
        c.split.val = json_field(s, "val", c.split.val, "split.");
        c.split.test = json_field(s, "test", c.split.test, "split.");
    }
    c.position_stride = json_field(j, "position_stride", c.position_stride);
    c.ablation_passages = json_field(j, "ablation_passages", c.ablation_passages);
    c.finetune_passages = json_field(j, "finetune_passages", c.finetune_passages);
    c.seed = json_field(j, "seed", c.seed);

    c.network.dims = c.dims();
    if (j.contains("network"))
    {
        const auto &n = j["network"];
        const std::string pre = "network.";
        if (n.contains("ranks"))
        {
            const auto r = json_field(n, "ranks", std::array<std::size_t, 3>{}, pre);
            c.network.ranks = {r[0], r[1], r[2]};
        }
        if (n.contains("conv"))
        {
            c.network.conv.clear();
            for (const auto &l : json_field(n, "conv", std::vector<std::array<std::size_t, 2>>{}, pre))
                c.network.conv.push_back({l[0], l[1]});
        }
        c.network.fc = json_field(n, "fc", c.network.fc, pre);
        c.network.bn_momentum = json_field(n, "bn_momentum", c.network.bn_momentum, pre);
        c.network.bn_eps = json_field(n, "bn_eps", c.network.bn_eps, pre);
    }
    if (j.contains("train"))
    {
        const auto &t = j["train"];
        const std::string pre = "train.";
        c.train.learning_rate = json_field(t, "learning_rate", c.train.learning_rate, pre);
        c.train.batch_size = json_field(t, "batch_size", c.train.batch_size, pre);
        c.train.epochs = json_field(t, "epochs", c.train.epochs, pre);
        c.train.plateau_db = json_field(t, "plateau_db", c.train.plateau_db, pre);
        c.train.plateau_epochs = json_field(t, "plateau_epochs", c.train.plateau_epochs, pre);
        c.finetune_epochs = json_field(t, "finetune_epochs", c.finetune_epochs, pre);
        c.finetune_learning_rate = json_field(t, "finetune_learning_rate", c.finetune_learning_rate, pre);
    }
    c.train.seed = derive_seed(c.seed, {0x7472});
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string &path)
{
    std::ifstream in(path);
    if (!in)
        throw InvalidConfig("config", "cannot open " + path);
    nlohmann::json j;
    try
    {
        in >> j;
    }
    catch (const nlohmann::json::parse_error &e)
    {
        throw InvalidConfig(path, e.what());
    }
    return experiment_config_from_json(j, std::filesystem::path(path).parent_path());
}

// Replaces the root seed and every seed derived from it.
inline void reseed(ExperimentConfig &c, std::uint64_t seed)
{
    c.seed = seed;
    c.train.seed = derive_seed(seed, {0x7472});
}

// FNV-1a over the canonical JSON text and the root seed.
inline std::string config_digest(const ExperimentConfig &c)
{
    const std::string text = c.source.dump() + "#" + std::to_string(c.seed);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text)
    {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Independent streams per scenario role.
inline std::uint64_t geometry_seed(const ExperimentConfig &c, bool transfer) { return derive_seed(c.seed, {0x67656f, transfer}); }
inline std::uint64_t dataset_seed(const ExperimentConfig &c, bool transfer) { return derive_seed(c.seed, {0x64617461, transfer}); }

// ---- NMSE and box statistics ----

inline constexpr double kNmseFloorDb = -100.0;

inline double ratio_db(double num, double den)
{
    if (!(den > 0.0) || !std::isfinite(den))
        throw DegenerateDenominator("nmse: LS error energy is zero");
    if (num == den)
        return 0.0;
    return std::max(10.0 * std::log10(num / den), kNmseFloorDb);
}

// E||h - h_est||^2 / E||h - h_ls||^2 in dB over aligned realizations.
inline double nmse_db(std::span<const CVec> truth, std::span<const CVec> est, std::span<const CVec> ls)
{
    if (truth.size() != est.size() || truth.size() != ls.size())
        throw DimensionMismatch("nmse: ensembles are not aligned");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k)
    {
        if (est[k].size() != truth[k].size() || ls[k].size() != truth[k].size())
            throw DimensionMismatch("nmse: vector lengths differ");
        for (std::size_t i = 0; i < truth[k].size(); ++i)
        {
            num += std::norm(truth[k][i] - est[k][i]);
            den += std::norm(truth[k][i] - ls[k][i]);
        }
    }
    return ratio_db(num, den);
}

struct BoxStats
{
    double median = 0.0, q1 = 0.0, q3 = 0.0, min = 0.0, max = 0.0;
    std::size_t n = 0;
};

// Linear interpolation between order statistics: position (n - 1) p.
inline double quantile_sorted(std::span<const double> s, double p)
{
    if (s.empty())
        throw InvalidArgument("quantile of an empty sample");
    const double h = double(s.size() - 1) * p;
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= s.size())
        return s.back();
    return s[lo] + (h - double(lo)) * (s[lo + 1] - s[lo]);
}

inline BoxStats box_stats(std::vector<double> v)
{
    if (v.empty())
        throw InvalidArgument("box_stats: no values");
    std::sort(v.begin(), v.end());
    return {quantile_sorted(v, 0.5), quantile_sorted(v, 0.25), quantile_sorted(v, 0.75), v.front(), v.back(), v.size()};
}

// ---- records ----

inline const std::string kMethodLs = "LS-baseline";
inline const std::string kMethodLrPosition = "LR-position";
inline const std::string kMethodDl = "LR-DL";
inline const std::string kMethodDlFinetuned = "LR-DL-finetuned";

struct NmseRecord
{
    std::string scenario;
    std::uint32_t position_id = 0;
    std::uint16_t trajectory_id = 0;
    std::string method;
    double nmse_db = 0.0;
    std::size_t realizations = 0;
};

struct CurvePoint
{
    std::string scenario;
    std::uint16_t trajectory_id = 0;
    std::uint32_t position_id = 0;
    std::string method;
    double mean_db = 0.0; // mean and std of per-realization NMSE in dB
    double std_db = 0.0;
    std::size_t realizations = 0;
};

struct AblationRecord
{
    std::size_t passages = 0;
    std::uint32_t position_id = 0;
    std::uint16_t trajectory_id = 0;
    double nmse_db = 0.0;
};

struct EvalOutput
{
    std::vector<NmseRecord> records;
    std::vector<CurvePoint> curves;
};

// ---- dataset generation ----

struct PositionSite
{
    std::uint32_t position_id = 0;
    std::uint16_t trajectory_id = 0;
    RaySet rays;
};

// Every stride-th sample point of every trajectory.
inline std::vector<PositionSite> trajectory_sites(const Scenario &s, std::size_t stride)
{
    std::vector<PositionSite> sites;
    for (const auto &t : s.trajectories)
    {
        const auto pts = sample_trajectory(t, s.ue_height);
        for (std::size_t i = 0; i < pts.size(); i += stride)
        {
            const auto id = make_position_id(t.id, static_cast<std::uint32_t>(i));
            sites.push_back({id, static_cast<std::uint16_t>(t.id), rays_at_position(s, pts[i], id)});
        }
    }
    return sites;
}

inline std::map<std::uint32_t, RaySet> site_rays(const std::vector<PositionSite> &sites)
{
    std::map<std::uint32_t, RaySet> m;
    for (const auto &s : sites)
        m[s.position_id] = s.rays;
    return m;
}

// Synchronized rays that reach the tap window. A ray at tau >= (W + truncation) T has no
// pulse sample inside the window, so dropping it leaves the taps unchanged.
inline RaySet window_rays(const RaySet &rs, std::size_t w, const PulseShape &pulse, std::size_t *dropped = nullptr)
{
    RaySet out = rs.synchronized();
    const double limit = (double(w) + pulse.truncation) * pulse.symbol_time;
    const auto it = std::remove_if(out.rays.begin(), out.rays.end(), [&](const Ray &r) { return r.delay >= limit; });
    if (dropped)
        *dropped += std::size_t(out.rays.end() - it);
    out.rays.erase(it, out.rays.end());
    return out;
}

struct DatasetInfo
{
    std::string scenario_id;
    std::size_t positions = 0;
    std::size_t records = 0;
    double target_snr_db = 0.0;
    double measured_snr_db = 0.0; // mean over positions
    double measured_snr_min_db = 0.0;
    double measured_snr_max_db = 0.0;
    std::size_t dropped_rays = 0;
    std::size_t pilot_redraws = 0;
    std::map<std::string, std::size_t> rank_histogram; // "tx,rx,t" -> positions

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["scenario_id"] = scenario_id;
        j["positions"] = positions;
        j["records"] = records;
        j["target_snr_db"] = target_snr_db;
        j["measured_snr_db"] = measured_snr_db;
        j["measured_snr_min_db"] = measured_snr_min_db;
        j["measured_snr_max_db"] = measured_snr_max_db;
        j["dropped_rays"] = dropped_rays;
        j["pilot_redraws"] = pilot_redraws;
        j["rank_histogram"] = rank_histogram;
        return j;
    }
};

struct GeneratedData
{
    Dataset dataset;
    std::vector<LrProjector> projectors;
    DatasetInfo info;
};

// Rays -> fading -> taps -> pilot -> observation -> LS for every site and passage, plus the
// position projector fitted on the fit passages. Noise is calibrated per position over its
// passage ensemble.
inline GeneratedData generate_data(const ExperimentConfig &cfg, const Scenario &scen, std::uint64_t seed,
                                   const Logger &log = {})
{
    const auto sites = trajectory_sites(scen, cfg.position_stride);
    if (sites.empty())
        throw InvalidConfig("scenario", "no trajectory positions");
    const ChannelDims dims = cfg.dims();
    const std::size_t np = cfg.pilot_symbols();
    const std::size_t n_pass = cfg.passages();

    GeneratedData out;
    out.dataset.dims = dims;
    out.dataset.scenario_id = scen.id;
    out.dataset.records.reserve(sites.size() * n_pass);
    out.info.scenario_id = scen.id;
    out.info.target_snr_db = cfg.snr_db;
    out.info.measured_snr_min_db = std::numeric_limits<double>::infinity();
    out.info.measured_snr_max_db = -std::numeric_limits<double>::infinity();
    double snr_sum = 0.0;

    for (std::size_t si = 0; si < sites.size(); ++si)
    {
        const auto &site = sites[si];
        Rng rng = make_rng(seed, {site.position_id});
        const RaySet rs = window_rays(site.rays, dims.w, cfg.pulse, &out.info.dropped_rays);

        std::vector<ChannelRealization> chans;
        chans.reserve(n_pass);
        for (std::size_t k = 0; k < n_pass; ++k)
            chans.push_back(build_taps(rs, sample_passage(rs, rng), cfg.tx, cfg.rx, cfg.pulse, dims.w));
        const NoiseModel noise = calibrate_noise(cfg.snr_db, chans, cfg.sigma_x2, NoiseModel::white(dims.n_r, 1.0));

        double sig = 0.0, nse = 0.0;
        std::size_t samples = 0;
        std::vector<LsEstimate> fit;
        fit.reserve(cfg.split.fit);
        for (std::size_t k = 0; k < n_pass; ++k)
        {
            LsEstimate est;
            PilotObservation obs;
            ComplexMat clean;
            for (int attempt = 0;; ++attempt)
            {
                const ComplexMat pilot = generate_pilot(dims.n_t, np, cfg.sigma_x2, rng);
                obs = transmit(chans[k], pilot, cfg.sigma_x2, noise, rng);
                try
                {
                    est = ls_estimate(obs, site.position_id);
                    clean = convolve(chans[k], pilot);
                    break;
                }
                catch (const RankDeficientPilot &)
                {
                    if (attempt >= 16)
                        throw;
                    ++out.info.pilot_redraws;
                }
            }
            // SNR re-measured on the actual samples over the fully overlapped window
            for (std::size_t n = dims.w - 1; n < np; ++n)
            {
                const auto s = clean.col(n);
                const auto y = obs.rx.col(n);
                for (std::size_t r = 0; r < dims.n_r; ++r)
                {
                    sig += std::norm(s[r]);
                    nse += std::norm(y[r] - s[r]);
                }
                ++samples;
            }
            out.dataset.records.push_back({site.position_id, site.trajectory_id, chans[k].h, est.h_ls});
            if (k < cfg.split.fit)
                fit.push_back(std::move(est));
        }
        const double snr = to_db(sig / nse);
        snr_sum += snr;
        out.info.measured_snr_min_db = std::min(out.info.measured_snr_min_db, snr);
        out.info.measured_snr_max_db = std::max(out.info.measured_snr_max_db, snr);

        auto fr = fit_position_projector(std::span<const LsEstimate>(fit));
        const Ranks r = fr.projector.modes.ranks();
        ++out.info.rank_histogram[std::to_string(r.tx) + "," + std::to_string(r.rx) + "," + std::to_string(r.t)];
        out.projectors.push_back(std::move(fr.projector));
        if (log && (si + 1) % 20 == 0)
            log("dataset " + scen.id + ": " + std::to_string(si + 1) + "/" + std::to_string(sites.size()) + " positions");
    }
    out.info.positions = sites.size();
    out.info.records = out.dataset.records.size();
    out.info.measured_snr_db = snr_sum / double(sites.size());
    return out;
}

struct DatasetPaths
{
    std::filesystem::path dataset, projectors, info;

    static DatasetPaths in(const std::filesystem::path &dir, const std::string &prefix = "")
    {
        return {dir / (prefix + "dataset.mlrd"), dir / (prefix + "projectors.mlrp"), dir / (prefix + "dataset_info.json")};
    }
};

inline void write_json(const std::filesystem::path &p, const nlohmann::json &j)
{
    std::ofstream out(p);
    if (!out)
        throw IoError("cannot write " + p.string());
    out << j.dump(2) << '\n';
    if (!out)
        throw IoError("write failed: " + p.string());
}

inline nlohmann::json read_json(const std::filesystem::path &p)
{
    std::ifstream in(p);
    if (!in)
        throw IoError("cannot open " + p.string());
    try
    {
        return nlohmann::json::parse(in);
    }
    catch (const nlohmann::json::parse_error &e)
    {
        throw FormatError(p.string() + ": " + e.what());
    }
}

// Writes dataset, projector store and info files; removes whatever was written on failure.
inline DatasetInfo run_dataset(const ExperimentConfig &cfg, bool transfer, const std::filesystem::path &out_dir,
                               const Logger &log = {})
{
    const std::string &path = transfer ? cfg.transfer_scenario : cfg.scenario;
    if (path.empty())
        throw InvalidConfig("transfer_scenario", "no transfer scenario configured");
    const auto paths = DatasetPaths::in(out_dir, transfer ? "transfer_" : "");
    try
    {
        std::filesystem::create_directories(out_dir);
        const Scenario scen = generate_scenario(load_scenario_config(path), geometry_seed(cfg, transfer));
        auto data = generate_data(cfg, scen, dataset_seed(cfg, transfer), log);
        write_dataset(paths.dataset.string(), data.dataset);
        write_projectors(paths.projectors.string(), data.projectors);
        write_json(paths.info, data.info.to_json());
        return data.info;
    }
    catch (...)
    {
        std::error_code ec;
        for (const auto &p : {paths.dataset, paths.projectors, paths.info})
            std::filesystem::remove(p, ec);
        throw;
    }
}

// ---- stored data access ----

struct PositionGroup
{
    std::uint32_t position_id = 0;
    std::uint16_t trajectory_id = 0;
    std::size_t first = 0; // index of the first record
    std::shared_ptr<const LrProjector> projector;
    std::shared_ptr<const LsCovariance> cov;
};

struct StoredData
{
    Dataset dataset;
    std::vector<PositionGroup> groups;
    std::size_t passages = 0;

    const DatasetRecord &record(const PositionGroup &g, std::size_t k) const { return dataset.records[g.first + k]; }
};

// Records of a position must be contiguous, one per passage, with a matching projector.
inline StoredData load_stored_data(const DatasetPaths &paths, std::size_t passages)
{
    StoredData sd;
    sd.dataset = read_dataset(paths.dataset.string());
    sd.passages = passages;
    std::map<std::uint32_t, std::shared_ptr<const LrProjector>> proj;
    for (auto &p : read_projectors(paths.projectors.string()))
    {
        if (p.dims() != sd.dataset.dims)
            throw DimensionMismatch("projector dims differ from the dataset dims");
        const auto id = p.position_id;
        proj[id] = std::make_shared<const LrProjector>(std::move(p));
    }
    const auto &recs = sd.dataset.records;
    if (recs.size() % passages != 0)
        throw FormatError("dataset record count is not a multiple of the passage count");
    std::set<std::uint32_t> seen;
    for (std::size_t i = 0; i < recs.size(); i += passages)
    {
        if (!seen.insert(recs[i].position_id).second)
            throw InvariantViolation(recs[i].position_id, "position records are not contiguous");
        PositionGroup g;
        g.position_id = recs[i].position_id;
        g.trajectory_id = recs[i].trajectory_id;
        g.first = i;
        for (std::size_t k = 1; k < passages; ++k)
            if (recs[i + k].position_id != g.position_id)
                throw InvariantViolation(g.position_id, "position records are not contiguous");
        const auto it = proj.find(g.position_id);
        if (it == proj.end())
            throw FormatError("no stored projector for position " + std::to_string(g.position_id));
        g.projector = it->second;
        g.cov = std::shared_ptr<const LsCovariance>(g.projector, &g.projector->cov);
        sd.groups.push_back(std::move(g));
    }
    return sd;
}

// ---- evaluation ----

namespace detail
{

inline void add_position_result(EvalOutput &out, const std::string &scenario, const PositionGroup &g,
                                const std::string &method, std::span<const CVec> truth, std::span<const CVec> est,
                                std::span<const CVec> ls)
{
    out.records.push_back({scenario, g.position_id, g.trajectory_id, method, nmse_db(truth, est, ls), truth.size()});
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k)
    {
        const double v = nmse_db(truth.subspan(k, 1), est.subspan(k, 1), ls.subspan(k, 1));
        sum += v;
        sum2 += v * v;
    }
    const double n = double(truth.size());
    const double mean = sum / n;
    const double var = n > 1 ? std::max(sum2 - n * mean * mean, 0.0) / (n - 1.0) : 0.0;
    out.curves.push_back({scenario, g.trajectory_id, g.position_id, method, mean, std::sqrt(var), truth.size()});
}

inline std::pair<std::vector<CVec>, std::vector<CVec>> test_split(const StoredData &sd, const PositionGroup &g,
                                                                  const PassageSplit &split)
{
    std::vector<CVec> truth, ls;
    for (std::size_t k = split.fit + split.val; k < split.total(); ++k)
    {
        truth.push_back(sd.record(g, k).h_true);
        ls.push_back(sd.record(g, k).h_ls);
    }
    return {std::move(truth), std::move(ls)};
}

} // namespace detail

// LS baseline and position-based LR on the test passages of every position.
inline EvalOutput run_position_lr_eval(const StoredData &sd, const PassageSplit &split)
{
    EvalOutput out;
    for (const auto &g : sd.groups)
    {
        const auto [truth, ls] = detail::test_split(sd, g, split);
        std::vector<CVec> lr;
        for (const auto &h : ls)
            lr.push_back(g.projector->apply(h));
        detail::add_position_result(out, sd.dataset.scenario_id, g, kMethodLs, truth, ls, ls);
        detail::add_position_result(out, sd.dataset.scenario_id, g, kMethodLrPosition, truth, lr, ls);
    }
    return out;
}

// Position projectors refitted from only the first L fit passages (stored covariance).
inline std::vector<AblationRecord> run_passage_ablation(const StoredData &sd, const PassageSplit &split,
                                                        std::span<const std::size_t> passages)
{
    std::vector<AblationRecord> out;
    for (const std::size_t l : passages)
        for (const auto &g : sd.groups)
        {
            std::vector<CVec> fit;
            for (std::size_t k = 0; k < l; ++k)
                fit.push_back(sd.record(g, k).h_ls);
            const auto proj = fit_projector(fit, *g.cov, g.position_id);
            const auto [truth, ls] = detail::test_split(sd, g, split);
            std::vector<CVec> lr;
            for (const auto &h : ls)
                lr.push_back(proj.apply(h));
            out.push_back({l, g.position_id, g.trajectory_id, nmse_db(truth, lr, ls)});
        }
    return out;
}

// Training samples from passages [begin, end) of every position. Targets are the stored
// position projector applied to h_ls unless `refit` is set, in which case each position's
// projector is refitted from exactly those passages.
inline std::vector<TrainSample> make_train_samples(const StoredData &sd, std::size_t begin, std::size_t end,
                                                   bool refit = false)
{
    std::vector<TrainSample> out;
    out.reserve(sd.groups.size() * (end - begin));
    for (const auto &g : sd.groups)
    {
        std::shared_ptr<const LrProjector> proj = g.projector;
        if (refit)
        {
            std::vector<CVec> fit;
            for (std::size_t k = begin; k < end; ++k)
                fit.push_back(sd.record(g, k).h_ls);
            proj = std::make_shared<const LrProjector>(fit_projector(fit, *g.cov, g.position_id));
        }
        for (std::size_t k = begin; k < end; ++k)
        {
            const auto &r = sd.record(g, k);
            out.push_back({r.h_ls, proj->apply(r.h_ls), r.h_true, g.cov});
        }
    }
    return out;
}

// Learned-projector NMSE on the test passages.
inline EvalOutput evaluate_network(NetworkParams &p, const StoredData &sd, const PassageSplit &split,
                                   const std::string &method, double *max_stiefel = nullptr)
{
    if (p.config.dims != sd.dataset.dims)
        throw DimensionMismatch("network dims differ from the dataset dims");
    EvalOutput out;
    for (const auto &g : sd.groups)
    {
        const auto [truth, ls] = detail::test_split(sd, g, split);
        std::vector<TrainSample> batch;
        for (std::size_t k = 0; k < ls.size(); ++k)
            batch.push_back({ls[k], {}, truth[k], g.cov});
        const auto pred = predict_batch(p, batch, max_stiefel);
        detail::add_position_result(out, sd.dataset.scenario_id, g, method, truth, pred, ls);
    }
    return out;
}

struct TrainEvalOutput
{
    NetworkParams params;
    std::vector<EpochRecord> history;
    EvalOutput eval;
    double max_stiefel_error = 0.0; // training and test factors
};

inline TrainEvalOutput run_train_eval(const ExperimentConfig &cfg, const StoredData &sd, const Logger &log = {})
{
    if (cfg.network.dims != sd.dataset.dims)
        throw DimensionMismatch("network dims differ from the dataset dims");
    const auto &sp = cfg.split;
    const auto train_set = make_train_samples(sd, 0, sp.fit);
    const auto val_set = make_train_samples(sd, sp.fit, sp.fit + sp.val);
    if (train_set.size() < cfg.train.batch_size)
        throw InvalidConfig("train.batch_size", "exceeds the training set size");
    if (log)
        log("train: " + std::to_string(train_set.size()) + " samples, " +
            std::to_string(param_count(cfg.network)) + " parameters");

    TrainEvalOutput out;
    NetworkParams p = init_params(cfg.network, cfg.train.seed);
    Adam opt(p, cfg.train);
    for (std::size_t ep = 1; ep <= cfg.train.epochs; ++ep)
    {
        out.history.push_back(detail::run_epoch(p, opt, train_set, val_set, cfg.train, ep));
        const auto &h = out.history.back();
        out.max_stiefel_error = std::max(out.max_stiefel_error, h.stiefel_error);
        if (log)
        {
            char buf[160];
            std::snprintf(buf, sizeof buf, "epoch %zu: loss %.5g, val %.3f dB, skipped %zu", h.epoch, h.train_loss,
                          h.val_nmse_db, h.skipped_degenerate);
            log(buf);
        }
    }
    out.eval = evaluate_network(p, sd, sp, kMethodDl, &out.max_stiefel_error);
    out.params = std::move(p);
    return out;
}

struct TransferOutput
{
    EvalOutput eval; // target LS / LR-position / direct and fine-tuned network records
    NetworkParams finetuned;
    std::vector<EpochRecord> history;
};

// Source model on the target scenario, directly and after fine-tuning the last two fc
// layers on the first finetune_passages passages of each target position.
inline TransferOutput run_transfer(const ExperimentConfig &cfg, const NetworkParams &model, const StoredData &target,
                                   bool finetune, const Logger &log = {})
{
    if (model.config.dims != target.dataset.dims)
        throw DimensionMismatch("model dims differ from the target dataset dims");
    TransferOutput out;
    out.eval = run_position_lr_eval(target, cfg.split);
    NetworkParams direct = model;
    auto d = evaluate_network(direct, target, cfg.split, kMethodDl);
    out.eval.records.insert(out.eval.records.end(), d.records.begin(), d.records.end());
    out.eval.curves.insert(out.eval.curves.end(), d.curves.begin(), d.curves.end());
    out.finetuned = model;
    if (!finetune)
        return out;

    const auto &sp = cfg.split;
    const auto ft_train = make_train_samples(target, 0, cfg.finetune_passages, true);
    const auto ft_val = make_train_samples(target, sp.fit, sp.fit + sp.val);
    auto res = fine_tune(model, ft_train, ft_val, cfg.finetune_config());
    if (log)
        log("fine-tune: " + std::to_string(res.history.size()) + " epochs on " + std::to_string(ft_train.size()) +
            " samples");
    out.finetuned = std::move(res.params);
    out.history = std::move(res.history);
    auto f = evaluate_network(out.finetuned, target, sp, kMethodDlFinetuned);
    out.eval.records.insert(out.eval.records.end(), f.records.begin(), f.records.end());
    out.eval.curves.insert(out.eval.curves.end(), f.curves.begin(), f.curves.end());
    return out;
}

// ---- report files ----

namespace detail
{

inline std::string fmt(double x)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string &line)
{
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string s;
    while (std::getline(ss, s, ','))
        f.push_back(s);
    if (!line.empty() && line.back() == ',')
        f.emplace_back();
    return f;
}

template <class F>
void read_csv(const std::filesystem::path &p, const std::string &header, F row)
{
    std::ifstream in(p);
    if (!in)
        throw IoError("cannot open " + p.string());
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || line != header)
        throw ParseError(1, p.string() + ": unexpected header");
    while (std::getline(in, line))
    {
        ++lineno;
        if (line.empty())
            continue;
        try
        {
            row(split_csv(line));
        }
        catch (const std::exception &e)
        {
            throw ParseError(lineno, p.string() + ": " + e.what());
        }
    }
}

template <class F>
void write_file(const std::filesystem::path &p, F body)
{
    std::ofstream out(p);
    if (!out)
        throw IoError("cannot write " + p.string());
    body(out);
    if (!out)
        throw IoError("write failed: " + p.string());
}

} // namespace detail

inline const std::string kRecordHeader = "scenario,position_id,trajectory_id,method,nmse_db,realizations";
inline const std::string kCurveHeader = "scenario,trajectory_id,position_id,point_index,method,mean_nmse_db,std_nmse_db,realizations";
inline const std::string kAblationHeader = "passages,position_id,trajectory_id,nmse_db";

inline void write_records_csv(const std::filesystem::path &p, std::span<const NmseRecord> recs)
{
    detail::write_file(p, [&](std::ostream &out) {
        out << kRecordHeader << '\n';
        for (const auto &r : recs)
            out << r.scenario << ',' << r.position_id << ',' << r.trajectory_id << ',' << r.method << ','
                << detail::fmt(r.nmse_db) << ',' << r.realizations << '\n';
    });
}

inline std::vector<NmseRecord> read_records_csv(const std::filesystem::path &p)
{
    std::vector<NmseRecord> out;
    detail::read_csv(p, kRecordHeader, [&](const std::vector<std::string> &f) {
        if (f.size() != 6)
            throw FormatError("expected 6 fields");
        out.push_back({f[0], static_cast<std::uint32_t>(std::stoul(f[1])), static_cast<std::uint16_t>(std::stoul(f[2])),
                       f[3], std::stod(f[4]), std::stoul(f[5])});
    });
    return out;
}

inline void write_curves_csv(const std::filesystem::path &p, std::span<const CurvePoint> pts)
{
    detail::write_file(p, [&](std::ostream &out) {
        out << kCurveHeader << '\n';
        for (const auto &c : pts)
            out << c.scenario << ',' << c.trajectory_id << ',' << c.position_id << ',' << c.position_id % 100000u
                << ',' << c.method << ',' << detail::fmt(c.mean_db) << ',' << detail::fmt(c.std_db) << ','
                << c.realizations << '\n';
    });
}

inline std::vector<CurvePoint> read_curves_csv(const std::filesystem::path &p)
{
    std::vector<CurvePoint> out;
    detail::read_csv(p, kCurveHeader, [&](const std::vector<std::string> &f) {
        if (f.size() != 8)
            throw FormatError("expected 8 fields");
        out.push_back({f[0], static_cast<std::uint16_t>(std::stoul(f[1])), static_cast<std::uint32_t>(std::stoul(f[2])),
                       f[4], std::stod(f[5]), std::stod(f[6]), std::stoul(f[7])});
    });
    return out;
}

inline void write_ablation_csv(const std::filesystem::path &p, std::span<const AblationRecord> recs)
{
    detail::write_file(p, [&](std::ostream &out) {
        out << kAblationHeader << '\n';
        for (const auto &r : recs)
            out << r.passages << ',' << r.position_id << ',' << r.trajectory_id << ',' << detail::fmt(r.nmse_db) << '\n';
    });
}

inline std::vector<AblationRecord> read_ablation_csv(const std::filesystem::path &p)
{
    std::vector<AblationRecord> out;
    detail::read_csv(p, kAblationHeader, [&](const std::vector<std::string> &f) {
        if (f.size() != 4)
            throw FormatError("expected 4 fields");
        out.push_back({std::stoul(f[0]), static_cast<std::uint32_t>(std::stoul(f[1])),
                       static_cast<std::uint16_t>(std::stoul(f[2])), std::stod(f[3])});
    });
    return out;
}

// Box-statistics key: the method name for the primary scenario, "method@scenario" otherwise.
inline std::string method_key(const NmseRecord &r, const std::string &primary)
{
    return r.scenario == primary ? r.method : r.method + "@" + r.scenario;
}

inline std::map<std::string, BoxStats> method_box_stats(std::span<const NmseRecord> recs, const std::string &primary)
{
    std::map<std::string, std::vector<double>> by;
    for (const auto &r : recs)
        by[method_key(r, primary)].push_back(r.nmse_db);
    std::map<std::string, BoxStats> out;
    for (auto &[k, v] : by)
        out[k] = box_stats(std::move(v));
    return out;
}

inline nlohmann::json box_json(const BoxStats &b)
{
    return {{"median_db", b.median}, {"q1_db", b.q1}, {"q3_db", b.q3}, {"min_db", b.min}, {"max_db", b.max}, {"n", b.n}};
}

// nmse_records.csv, box_stats.csv, trajectory_curves.csv and summary.json.
inline void emit_report(const std::filesystem::path &dir, std::span<const NmseRecord> recs,
                        std::span<const CurvePoint> curves, const std::string &primary_scenario,
                        const std::string &digest, double runtime_s)
{
    if (recs.empty())
        throw InvalidArgument("emit_report: no records");
    std::filesystem::create_directories(dir);
    write_records_csv(dir / "nmse_records.csv", recs);
    write_curves_csv(dir / "trajectory_curves.csv", curves);
    const auto stats = method_box_stats(recs, primary_scenario);
    detail::write_file(dir / "box_stats.csv", [&](std::ostream &out) {
        out << "key,median_db,q1_db,q3_db,min_db,max_db,n\n";
        for (const auto &[k, b] : stats)
            out << k << ',' << detail::fmt(b.median) << ',' << detail::fmt(b.q1) << ',' << detail::fmt(b.q3) << ','
                << detail::fmt(b.min) << ',' << detail::fmt(b.max) << ',' << b.n << '\n';
    });
    nlohmann::json j;
    j["config_digest"] = digest;
    j["per_method"] = nlohmann::json::object();
    for (const auto &[k, b] : stats)
        j["per_method"][k] = box_json(b);
    j["runtime_s"] = runtime_s;
    write_json(dir / "summary.json", j);
}

} // namespace mlr

#endif
