#pragma once

// Command-line front end. Subcommands: train, eval, attack, transfer,
// ablate, gradcheck. Exit codes: 0 success, 2 configuration or usage error
// (including missing inputs), 3 numeric abort or gradient-check failure,
// 4 I/O, format or data error. Errors print one line `error: <kind>: ...`.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ceat/checkpoint.hpp"
#include "ceat/config.hpp"
#include "ceat/dataset.hpp"
#include "ceat/ensemble.hpp"
#include "ceat/errors.hpp"
#include "ceat/eval.hpp"
#include "ceat/gradcheck.hpp"
#include "ceat/trainer.hpp"

namespace ceat {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumeric = 3, kExitData = 4 };

inline constexpr const char* kEpochLog = "epochs.jsonl";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kAttackLog = "attack.jsonl";
inline constexpr const char* kTransferJson = "transfer.json";
inline constexpr const char* kTransferCsv = "transfer.csv";
inline constexpr const char* kAblationLog = "ablation.jsonl";
inline constexpr const char* kAblationCsv = "ablation.csv";

inline std::string checkpoint_name(std::size_t m) { return "member_" + std::to_string(m) + ".ckpt"; }

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct DataSplit {
    Dataset train;
    Dataset test;
};

inline DataSplit load_data(const RunConfig& cfg) {
    const auto& d = cfg.dataset;
    auto resolve = [&cfg](const std::string& p) {
        std::filesystem::path path(p);
        if (path.is_relative() && !cfg.base_dir.empty()) path = cfg.base_dir / path;
        if (!std::filesystem::exists(path)) throw ConfigError("missing input file " + path.string());
        return path;
    };
    switch (d.kind) {
        case DatasetKind::digits:
            return {synth_digits(d.train_size, d.data_seed, d.side),
                    synth_digits(d.test_size, member_seed(d.data_seed, 1), d.side)};
        case DatasetKind::spirals:
            return {synth_spirals(d.n_per_class, d.classes, d.noise, d.data_seed),
                    synth_spirals(d.test_n_per_class, d.classes, d.noise, member_seed(d.data_seed, 1))};
        case DatasetKind::idx:
            return {load_idx(resolve(d.train_images), resolve(d.train_labels), d.classes),
                    load_idx(resolve(d.test_images), resolve(d.test_labels), d.classes)};
        case DatasetKind::csv:
            return {load_csv(resolve(d.train_csv), d.classes), load_csv(resolve(d.test_csv), d.classes)};
    }
    throw ConfigError("unknown dataset kind");
}

inline Ensemble fresh_ensemble(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed) {
    return make_ensemble(cfg.model.arch, ds.sample_shape, cfg.dataset.classes, cfg.model.members, seed, cfg.model.lr,
                         cfg.model.momentum, proportional_schedule(cfg.train.epochs));
}

inline ReportMeta report_meta(const RunConfig& cfg) {
    ReportMeta meta;
    meta.seed = cfg.model.seed;
    meta.config_hash = cfg.config_hash();
    meta.variant = to_string(cfg.train.variant);
    meta.lambda = cfg.train.lambda;
    meta.mu = cfg.train.mu;
    meta.timestamp = utc_timestamp();
    return meta;
}

inline void save_members(const Ensemble& e, const std::filesystem::path& dir) {
    for (std::size_t m = 0; m < e.size(); ++m) save_checkpoint(e.members[m], dir / checkpoint_name(m));
}

inline Ensemble load_members(const RunConfig& cfg, const std::filesystem::path& dir) {
    Ensemble e;
    for (std::size_t m = 0; m < cfg.model.members; ++m) {
        const auto path = dir / checkpoint_name(m);
        if (!std::filesystem::exists(path)) throw ConfigError("missing checkpoint " + path.string());
        e.members.push_back(load_checkpoint(path));
    }
    e.validate();
    return e;
}

inline void write_reports(const RunConfig& cfg, const EvalReport& report, const std::filesystem::path& dir) {
    if (cfg.output.json) write_report(report, dir / kReportJson, ReportFormat::json);
    if (cfg.output.csv) write_report(report, dir / kReportCsv, ReportFormat::csv);
}

// Clean and white-box accuracy, plus the transfer matrix and black-box
// accuracy when enabled. The first battery entry drives transfer and
// black-box generation.
inline EvalReport full_report(const RunConfig& cfg, const Ensemble& e, const DataSplit& data, std::ostream& log) {
    EvalReport report = evaluate(e, data.test, cfg.eval.battery, cfg.eval.seed);
    report.meta = report_meta(cfg);
    const AttackSpec lead = cfg.eval.battery.empty() ? cfg.eval.pgd : cfg.eval.battery.front();
    if (cfg.eval.transfer) report.transfer = transfer_matrix(e, data.test, lead, cfg.eval.seed);
    if (cfg.eval.blackbox) {
        CeatConfig sc = cfg.train;
        sc.variant = cfg.eval.surrogate_variant;
        sc.seed = cfg.eval.surrogate_seed;
        Ensemble surrogate = fresh_ensemble(cfg, data.train, cfg.eval.surrogate_seed);
        log << "training black-box surrogate (seed " << cfg.eval.surrogate_seed << ")\n";
        train(surrogate, data.train, sc);
        report.blackbox = blackbox_eval(e, surrogate, data.test, lead, cfg.eval.seed);
    }
    return report;
}

inline int cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log) {
    const auto data = load_data(cfg);
    std::filesystem::create_directories(out_dir);
    Ensemble e = fresh_ensemble(cfg, data.train, cfg.model.seed);
    std::ostringstream epochs;
    const auto t0 = std::chrono::steady_clock::now();
    train(e, data.train, cfg.train, [&](const EpochSummary& s) {
        epochs << to_json(s).dump() << "\n";
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << "epoch " << s.epoch << " l_total " << s.members.front().l_total << " elapsed " << secs << "s\n";
    });
    write_text(out_dir / kEpochLog, epochs.str());
    save_members(e, out_dir);
    const auto report = full_report(cfg, e, data, log);
    write_reports(cfg, report, out_dir);
    log << "clean " << report.clean_acc;
    for (const auto& [name, acc] : report.robust) log << " " << name << " " << acc;
    log << "\n";
    return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::filesystem::path& ckpt_dir, const std::filesystem::path& out_dir,
                    std::ostream& log) {
    const Ensemble e = load_members(cfg, ckpt_dir);
    const auto data = load_data(cfg);
    std::filesystem::create_directories(out_dir);
    const auto report = full_report(cfg, e, data, log);
    write_reports(cfg, report, out_dir);
    log << "clean " << report.clean_acc << "\n";
    return kExitOk;
}

// One record per battery attack: ensemble and member success rates plus the
// 0-1 risk decomposition over the whole test set.
inline int cmd_attack(const RunConfig& cfg, const std::filesystem::path& ckpt_dir, const std::filesystem::path& out_dir,
                      std::ostream& log) {
    const Ensemble e = load_members(cfg, ckpt_dir);
    const auto data = load_data(cfg);
    check_eval_inputs(e, data.test);
    std::filesystem::create_directories(out_dir);
    const auto target = AttackTarget::ensemble(e);
    const auto all = sequential_batches(data.test, kEvalBatch);
    std::string lines;
    for (std::size_t a = 0; a < cfg.eval.battery.size(); ++a) {
        const auto& spec = cfg.eval.battery[a];
        std::vector<std::vector<int>> member_pred(e.size());
        std::vector<int> ens_pred, labels;
        for (std::size_t b = 0; b < all.size(); ++b) {
            const auto adv = run_attack(target, all[b].x, all[b].y, spec, batch_seed(member_seed(cfg.eval.seed, a), 0, b));
            for (std::size_t m = 0; m < e.size(); ++m) {
                const auto p = predict(e.members[m], adv.x_adv);
                member_pred[m].insert(member_pred[m].end(), p.begin(), p.end());
            }
            const auto p = ensemble_predict(e, adv.x_adv);
            ens_pred.insert(ens_pred.end(), p.begin(), p.end());
            labels.insert(labels.end(), all[b].y.begin(), all[b].y.end());
        }
        const auto risk = adversarial_risk(member_pred, ens_pred, labels);
        nlohmann::ordered_json j;
        j["attack"] = to_string(spec.kind);
        j["epsilon"] = spec.epsilon;
        j["alpha"] = spec.alpha;
        j["steps"] = spec.steps;
        j["ensemble_success"] = risk.ensemble_risk;
        j["member_success"] = nlohmann::ordered_json::array();
        for (const auto& m : risk.members) j["member_success"].push_back(m.risk);
        j["risk"] = to_json(risk);
        lines += j.dump() + "\n";
        log << to_string(spec.kind) << " ensemble success " << risk.ensemble_risk << "\n";
    }
    write_text(out_dir / kAttackLog, lines);
    return kExitOk;
}

inline int cmd_transfer(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
                        const std::filesystem::path& out_dir, std::ostream& log) {
    const Ensemble e = load_members(cfg, ckpt_dir);
    const auto data = load_data(cfg);
    std::filesystem::create_directories(out_dir);
    const AttackSpec spec = cfg.eval.battery.empty() ? cfg.eval.pgd : cfg.eval.battery.front();
    const auto matrix = transfer_matrix(e, data.test, spec, cfg.eval.seed);
    nlohmann::ordered_json j;
    const auto meta = report_meta(cfg);
    j["meta"] = {{"seed", meta.seed},
                 {"config_hash", meta.config_hash},
                 {"variant", meta.variant},
                 {"lambda", meta.lambda},
                 {"mu", meta.mu},
                 {"transfer_orientation", "row=generator,col=victim"},
                 {"timestamp", meta.timestamp}};
    j["attack"] = to_string(spec.kind);
    j["matrix"] = matrix;
    j["mean_off_diagonal"] = mean_off_diagonal(matrix);
    if (cfg.output.json) write_text(out_dir / kTransferJson, j.dump(2) + "\n");
    if (cfg.output.csv) {
        nlohmann::json fmt;
        std::string csv = "generator";
        for (std::size_t c = 0; c < matrix.size(); ++c) csv += ",victim_" + std::to_string(c);
        csv += "\n";
        for (std::size_t r = 0; r < matrix.size(); ++r) {
            csv += std::to_string(r);
            for (double v : matrix[r]) {
                fmt = v;
                csv += "," + fmt.dump();
            }
            csv += "\n";
        }
        write_text(out_dir / kTransferCsv, csv);
    }
    log << "mean off-diagonal transfer " << mean_off_diagonal(matrix) << "\n";
    return kExitOk;
}

inline int cmd_ablate(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log) {
    const auto data = load_data(cfg);
    std::filesystem::create_directories(out_dir);
    const auto rows = ablation_grid(
        data.train, data.test, cfg.train, [&] { return fresh_ensemble(cfg, data.train, cfg.model.seed); },
        cfg.eval.pgd, cfg.eval.mim, cfg.eval.seed);
    std::string lines;
    std::string csv = "use_eD,use_Ladv,use_Lnat,clean_acc,pgd_acc,mim_acc\n";
    nlohmann::json fmt;
    auto num = [&fmt](double v) {
        fmt = v;
        return fmt.dump();
    };
    for (const auto& r : rows) {
        lines += to_json(r).dump() + "\n";
        csv += std::to_string(int(r.use_disparity)) + "," + std::to_string(int(r.use_adv)) + "," +
               std::to_string(int(r.use_nat)) + "," + num(r.clean_acc) + "," + num(r.pgd_acc) + "," +
               num(r.mim_acc) + "\n";
        log << "ablation row " << to_json(r).dump() << "\n";
    }
    write_text(out_dir / kAblationLog, lines);
    if (cfg.output.csv) write_text(out_dir / kAblationCsv, csv);
    return kExitOk;
}

inline int cmd_gradcheck(std::size_t trials, std::uint64_t seed, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = gradcheck_suite(trials, seed);
    for (const auto& t : result.trials)
        log << t.arch << " seed " << t.seed << " params " << t.parameters << " param_err " << t.param_error
            << " input_err " << t.input_error << "\n";
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "gradcheck " << (result.passed() ? "passed" : "FAILED") << ": " << result.trials.size()
        << " trials, worst relative error " << result.worst << " (tolerance " << result.tolerance << "), " << secs
        << "s\n";
    return result.passed() ? kExitOk : kExitNumeric;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Collaborative ensemble adversarial training lab"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string ckpt_dir;
    std::size_t gc_trials = 10;
    std::uint64_t gc_seed = 0;

    auto add_common = [&](CLI::App* sub, bool needs_checkpoints) {
        sub->add_option("--config", config_path, "run configuration file")->required();
        sub->add_option("--set", sets, "override, section.key=value (repeatable)");
        sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
        sub->add_option("--seed", seed, "run seed (overrides model.seed)");
        if (needs_checkpoints)
            sub->add_option("--checkpoints", ckpt_dir, "directory holding member checkpoints (default: output dir)");
    };
    auto* train_cmd = app.add_subcommand("train", "train an ensemble, save checkpoints and a report");
    add_common(train_cmd, false);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate saved checkpoints");
    add_common(eval_cmd, true);
    auto* attack_cmd = app.add_subcommand("attack", "attack saved checkpoints and log risk diagnostics");
    add_common(attack_cmd, true);
    auto* transfer_cmd = app.add_subcommand("transfer", "member-to-member transfer matrix");
    add_common(transfer_cmd, true);
    auto* ablate_cmd = app.add_subcommand("ablate", "loss-component ablation grid");
    add_common(ablate_cmd, false);
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check suite");
    gc_cmd->add_option("--trials", gc_trials, "instances per architecture")->check(CLI::PositiveNumber);
    gc_cmd->add_option("--seed", gc_seed, "first trial seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_trials, gc_seed, out);

        std::vector<std::string> overrides = sets;
        if (!out_dir.empty()) overrides.push_back("output.dir=" + out_dir);
        if (seed) overrides.push_back("model.seed=" + std::to_string(*seed));
        const RunConfig cfg = parse_config(config_path, overrides);
        const std::filesystem::path dir = cfg.output.dir;
        const std::filesystem::path ckpts = ckpt_dir.empty() ? dir : std::filesystem::path(ckpt_dir);

        if (train_cmd->parsed()) return cmd_train(cfg, dir, out);
        if (eval_cmd->parsed()) return cmd_eval(cfg, ckpts, dir, out);
        if (attack_cmd->parsed()) return cmd_attack(cfg, ckpts, dir, out);
        if (transfer_cmd->parsed()) return cmd_transfer(cfg, ckpts, dir, out);
        if (ablate_cmd->parsed()) return cmd_ablate(cfg, dir, out);
    } catch (const ConfigError& e) {
        err << "error: config: " << e.what() << "\n";
        return kExitConfig;
    } catch (const UsageError& e) {
        err << "error: usage: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        err << "error: numeric: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const FormatError& e) {
        err << "error: format: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        err << "error: io: " << e.what() << "\n";
        return kExitData;
    } catch (const Error& e) {
        err << "error: data: " << e.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: io: " << e.what() << "\n";
        return kExitData;
    }
    return kExitConfig;
}

}  // namespace ceat
