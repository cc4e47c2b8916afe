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

// mlr: experiment driver.
//
//   mlr scenario gen --config C --out D   ray files of the configured scenarios
//   mlr dataset gen  --config C --out D   datasets and position projectors
//   mlr lr eval      --config C --out D   LS / position-based LR records, passage ablation
//   mlr train        --config C --out D   network training and test records
//   mlr transfer     --config C --out D   trained model on the transfer scenario
//   mlr report       --config C --out D   merged records, box statistics, summary.json
//
// Exit codes: 0 success, 2 configuration / input error, 3 numerical failure, 1 otherwise.

#include "mlr/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

namespace fs = std::filesystem;
using namespace mlr;

namespace
{

struct Common
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
};

void add_common(CLI::App *app, Common &c)
{
    app->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "root seed, overrides the config");
    app->add_option("--out", c.out, "output directory");
}

ExperimentConfig load(const Common &c)
{
    auto cfg = load_experiment_config(c.config);
    if (c.seed)
        reseed(cfg, *c.seed);
    fs::create_directories(c.out);
    return cfg;
}

void log_line(const std::string &s) { std::cerr << s << std::endl; }

// Stage wall-clock times accumulate in timing.json; report sums them into runtime_s.
void record_time(const fs::path &dir, const std::string &stage, double seconds)
{
    const fs::path p = dir / "timing.json";
    nlohmann::json j = fs::exists(p) ? read_json(p) : nlohmann::json::object();
    j[stage] = seconds;
    write_json(p, j);
}

double total_time(const fs::path &dir)
{
    const fs::path p = dir / "timing.json";
    double t = 0.0;
    if (!fs::exists(p))
        return t;
    const nlohmann::json j = read_json(p);
    for (const auto &[k, v] : j.items())
        t += v.get<double>();
    return t;
}

template <class F>
void timed(const fs::path &dir, const std::string &stage, F f)
{
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_time(dir, stage, s);
}

StoredData stored(const ExperimentConfig &cfg, const fs::path &dir, bool transfer)
{
    const auto paths = DatasetPaths::in(dir, transfer ? "transfer_" : "");
    if (!fs::exists(paths.dataset) || !fs::exists(paths.projectors))
        throw IoError("missing dataset in " + dir.string() + "; run 'dataset gen' first");
    return load_stored_data(paths, cfg.passages());
}

void print_box(const std::string &label, std::span<const NmseRecord> recs, const std::string &method)
{
    std::vector<double> v;
    for (const auto &r : recs)
        if (r.method == method)
            v.push_back(r.nmse_db);
    if (v.empty())
        return;
    const auto b = box_stats(v);
    std::printf("%-28s median %8.3f dB  IQR [%8.3f, %8.3f]  n %zu\n", (label + " " + method).c_str(), b.median, b.q1,
                b.q3, b.n);
}

void cmd_scenario_gen(const Common &c)
{
    const auto cfg = load(c);
    timed(c.out, "scenario_gen", [&] {
        for (bool transfer : {false, true})
        {
            const auto &path = transfer ? cfg.transfer_scenario : cfg.scenario;
            if (path.empty())
                continue;
            const Scenario s = generate_scenario(load_scenario_config(path), geometry_seed(cfg, transfer));
            const auto rays = site_rays(trajectory_sites(s, cfg.position_stride));
            const fs::path out = fs::path(c.out) / (transfer ? "transfer_rays.csv" : "rays.csv");
            write_rays(out.string(), rays);
            std::printf("%s: %zu positions, %zu reflectors -> %s\n", s.id.c_str(), rays.size(), s.reflectors.size(),
                        out.string().c_str());
        }
    });
}

void cmd_dataset_gen(const Common &c, const std::string &which)
{
    const auto cfg = load(c);
    timed(c.out, "dataset_gen", [&] {
        for (bool transfer : {false, true})
        {
            if ((transfer && which == "main") || (!transfer && which == "transfer"))
                continue;
            if (transfer && cfg.transfer_scenario.empty())
            {
                if (which == "transfer")
                    throw InvalidConfig("transfer_scenario", "no transfer scenario configured");
                continue;
            }
            const auto info = run_dataset(cfg, transfer, c.out, log_line);
            std::printf("%s: %zu positions, %zu records, measured SNR %.3f dB (target %.1f dB)\n",
                        info.scenario_id.c_str(), info.positions, info.records, info.measured_snr_db,
                        info.target_snr_db);
        }
    });
}

void cmd_lr_eval(const Common &c)
{
    const auto cfg = load(c);
    timed(c.out, "lr_eval", [&] {
        const auto sd = stored(cfg, c.out, false);
        const auto ev = run_position_lr_eval(sd, cfg.split);
        write_records_csv(fs::path(c.out) / "lr_records.csv", ev.records);
        write_curves_csv(fs::path(c.out) / "lr_curves.csv", ev.curves);
        const auto abl = run_passage_ablation(sd, cfg.split, cfg.ablation_passages);
        write_ablation_csv(fs::path(c.out) / "lr_ablation.csv", abl);
        print_box(sd.dataset.scenario_id, ev.records, kMethodLrPosition);
        for (auto l : cfg.ablation_passages)
        {
            std::vector<double> v;
            for (const auto &a : abl)
                if (a.passages == l)
                    v.push_back(a.nmse_db);
            std::printf("%-28s median %8.3f dB\n", (kMethodLrPosition + " L=" + std::to_string(l)).c_str(),
                        box_stats(v).median);
        }
    });
}

void cmd_train(const Common &c)
{
    const auto cfg = load(c);
    timed(c.out, "train", [&] {
        const auto sd = stored(cfg, c.out, false);
        auto res = run_train_eval(cfg, sd, log_line);
        save_params(res.params, (fs::path(c.out) / "model.mlrn").string());
        write_history_csv((fs::path(c.out) / "history.csv").string(), res.history);
        write_records_csv(fs::path(c.out) / "dl_records.csv", res.eval.records);
        write_curves_csv(fs::path(c.out) / "dl_curves.csv", res.eval.curves);
        print_box(sd.dataset.scenario_id, res.eval.records, kMethodDl);
        std::printf("max Stiefel error %.3g\n", res.max_stiefel_error);
    });
}

void cmd_transfer(const Common &c, bool finetune, bool self)
{
    const auto cfg = load(c);
    timed(c.out, "transfer", [&] {
        const fs::path model = fs::path(c.out) / "model.mlrn";
        if (!fs::exists(model))
            throw IoError("missing " + model.string() + "; run 'train' first");
        const auto params = load_params(model.string());
        const auto target = stored(cfg, c.out, !self);
        auto res = run_transfer(cfg, params, target, finetune, log_line);
        write_records_csv(fs::path(c.out) / "transfer_records.csv", res.eval.records);
        write_curves_csv(fs::path(c.out) / "transfer_curves.csv", res.eval.curves);
        if (finetune)
        {
            save_params(res.finetuned, (fs::path(c.out) / "model_finetuned.mlrn").string());
            write_history_csv((fs::path(c.out) / "finetune_history.csv").string(), res.history);
        }
        for (const auto &m : {kMethodLrPosition, kMethodDl, kMethodDlFinetuned})
            print_box(target.dataset.scenario_id, res.eval.records, m);
    });
}

void cmd_report(const Common &c)
{
    const auto cfg = load(c);
    std::vector<NmseRecord> recs;
    std::vector<CurvePoint> curves;
    std::string primary;
    for (const std::string stage : {"lr", "dl", "transfer"})
    {
        const fs::path rp = fs::path(c.out) / (stage + "_records.csv");
        if (!fs::exists(rp))
            continue;
        auto r = read_records_csv(rp);
        if (primary.empty() && stage != "transfer" && !r.empty())
            primary = r.front().scenario;
        recs.insert(recs.end(), r.begin(), r.end());
        const fs::path cp = fs::path(c.out) / (stage + "_curves.csv");
        if (fs::exists(cp))
        {
            auto cv = read_curves_csv(cp);
            curves.insert(curves.end(), cv.begin(), cv.end());
        }
    }
    if (recs.empty())
        throw IoError("no record files in " + c.out + "; run 'lr eval', 'train' or 'transfer' first");
    if (primary.empty())
        primary = recs.front().scenario;
    emit_report(c.out, recs, curves, primary, config_digest(cfg), total_time(c.out));
    for (const auto &[k, b] : method_box_stats(recs, primary))
        std::printf("%-36s median %8.3f dB  IQR [%8.3f, %8.3f]  n %zu\n", k.c_str(), b.median, b.q1, b.q3, b.n);
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"low-rank MIMO channel estimation experiments"};
    app.require_subcommand(1);

    Common common;
    std::string which = "all";
    bool no_finetune = false, self = false;

    auto *scenario = app.add_subcommand("scenario", "scenario geometry");
    scenario->require_subcommand(1);
    auto *scenario_gen = scenario->add_subcommand("gen", "write the ray files");
    add_common(scenario_gen, common);

    auto *dataset = app.add_subcommand("dataset", "datasets");
    dataset->require_subcommand(1);
    auto *dataset_gen = dataset->add_subcommand("gen", "generate datasets and position projectors");
    add_common(dataset_gen, common);
    dataset_gen->add_option("--which", which, "main, transfer or all")
        ->check(CLI::IsMember({"main", "transfer", "all"}));

    auto *lr = app.add_subcommand("lr", "position-based low-rank estimation");
    lr->require_subcommand(1);
    auto *lr_eval = lr->add_subcommand("eval", "evaluate LS and position-based LR");
    add_common(lr_eval, common);

    auto *train = app.add_subcommand("train", "train and evaluate the network");
    add_common(train, common);

    auto *transfer = app.add_subcommand("transfer", "evaluate the trained model on the transfer scenario");
    add_common(transfer, common);
    transfer->add_flag("--no-finetune", no_finetune, "skip fine-tuning");
    transfer->add_flag("--self", self, "use the training scenario as the target");

    auto *report = app.add_subcommand("report", "merge records into report files");
    add_common(report, common);

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::CallForHelp &e)
    {
        return app.exit(e);
    }
    catch (const CLI::ParseError &e)
    {
        app.exit(e);
        return 2;
    }

    try
    {
        if (scenario_gen->parsed())
            cmd_scenario_gen(common);
        else if (dataset_gen->parsed())
            cmd_dataset_gen(common, which);
        else if (lr_eval->parsed())
            cmd_lr_eval(common);
        else if (train->parsed())
            cmd_train(common);
        else if (transfer->parsed())
            cmd_transfer(common, !no_finetune, self);
        else if (report->parsed())
            cmd_report(common);
    }
    catch (const ConfigError &e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    catch (const NumericalError &e)
    {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    }
    catch (const std::exception &e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
