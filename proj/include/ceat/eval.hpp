#pragma once

// Robustness evaluation and machine-readable reports.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ceat/attacks.hpp"
#include "ceat/dataset.hpp"
#include "ceat/ensemble.hpp"
#include "ceat/errors.hpp"
#include "ceat/trainer.hpp"

namespace ceat {

struct ReportMeta {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string variant;
    double lambda = 0.0;
    double mu = 0.0;
    std::string timestamp;
};

struct EvalReport {
    ReportMeta meta;
    double clean_acc = 0.0;
    // Attack name -> ensemble accuracy on examples crafted against the ensemble.
    std::vector<std::pair<std::string, double>> robust;
    // Row = member the examples were generated against, column = member attacked.
    std::vector<std::vector<double>> transfer;
    std::optional<double> blackbox;

    std::optional<double> robust_acc(const std::string& name) const {
        for (const auto& [k, v] : robust)
            if (k == name) return v;
        return std::nullopt;
    }
};

inline constexpr std::size_t kEvalBatch = 250;

inline void check_eval_inputs(const Ensemble& e, const Dataset& ds) {
    e.validate();
    if (ds.sample_shape != e.input_shape())
        throw DimensionError("dataset samples " + shape_str(ds.sample_shape) + " do not match model input " +
                             shape_str(e.input_shape()));
    if (ds.num_classes > e.num_classes()) throw DimensionError("dataset has more classes than the models");
}

inline double accuracy(std::span<const int> pred, std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

inline double clean_accuracy(const Ensemble& e, const Dataset& ds) {
    check_eval_inputs(e, ds);
    std::size_t ok = 0;
    for (const auto& b : sequential_batches(ds, kEvalBatch)) {
        const auto pred = ensemble_predict(e, b.x);
        for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == b.y[i] ? 1 : 0;
    }
    return ds.size() ? static_cast<double>(ok) / static_cast<double>(ds.size()) : 0.0;
}

// Accuracy of `evaluated` on examples crafted against `source`. Counts are
// summed over batches before dividing.
inline double accuracy_under_attack(const AttackTarget& source, const AttackTarget& evaluated, const Dataset& ds,
                                    const AttackSpec& spec, std::uint64_t seed) {
    std::size_t ok = 0;
    const auto all = sequential_batches(ds, kEvalBatch);
    for (std::size_t b = 0; b < all.size(); ++b) {
        const auto adv = run_attack(source, all[b].x, all[b].y, spec, batch_seed(seed, 0, b));
        const auto pred = evaluated.predict(adv.x_adv);
        for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == all[b].y[i] ? 1 : 0;
    }
    return ds.size() ? static_cast<double>(ok) / static_cast<double>(ds.size()) : 0.0;
}

// White-box evaluation: clean accuracy plus ensemble accuracy under every
// attack in the battery, each crafted against the full ensemble.
inline EvalReport evaluate(const Ensemble& e, const Dataset& ds, const std::vector<AttackSpec>& battery,
                           std::uint64_t seed = 0) {
    check_eval_inputs(e, ds);
    EvalReport report;
    report.meta.seed = seed;
    report.clean_acc = clean_accuracy(e, ds);
    const auto target = AttackTarget::ensemble(e);
    for (std::size_t a = 0; a < battery.size(); ++a)
        report.robust.emplace_back(to_string(battery[a].kind),
                                   accuracy_under_attack(target, target, ds, battery[a], member_seed(seed, a)));
    return report;
}

// Entry (i,j): success rate on member j of examples generated against member i.
inline std::vector<std::vector<double>> transfer_matrix(const Ensemble& e, const Dataset& ds, const AttackSpec& spec,
                                                        std::uint64_t seed = 0) {
    check_eval_inputs(e, ds);
    const std::size_t m = e.size();
    std::vector<std::vector<std::size_t>> wrong(m, std::vector<std::size_t>(m, 0));
    const auto all = sequential_batches(ds, kEvalBatch);
    for (std::size_t i = 0; i < m; ++i) {
        const auto source = AttackTarget::single(e.members[i]);
        for (std::size_t b = 0; b < all.size(); ++b) {
            const auto adv = run_attack(source, all[b].x, all[b].y, spec, batch_seed(seed, i, b));
            for (std::size_t j = 0; j < m; ++j) {
                const auto pred = predict(e.members[j], adv.x_adv);
                for (std::size_t s = 0; s < pred.size(); ++s) wrong[i][j] += pred[s] != all[b].y[s] ? 1 : 0;
            }
        }
    }
    std::vector<std::vector<double>> out(m, std::vector<double>(m, 0.0));
    if (ds.size() == 0) return out;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out[i][j] = static_cast<double>(wrong[i][j]) / static_cast<double>(ds.size());
    return out;
}

inline double mean_off_diagonal(const std::vector<std::vector<double>>& matrix) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < matrix.size(); ++i)
        for (std::size_t j = 0; j < matrix[i].size(); ++j)
            if (i != j) {
                total += matrix[i][j];
                ++count;
            }
    return count ? total / static_cast<double>(count) : 0.0;
}

// Defender accuracy on examples crafted against a separately trained surrogate.
inline double blackbox_eval(const Ensemble& defender, const Ensemble& surrogate, const Dataset& ds,
                            const AttackSpec& spec, std::uint64_t seed = 0) {
    if (&defender == &surrogate) throw UsageError("black-box surrogate must be a different ensemble than the defender");
    check_eval_inputs(defender, ds);
    check_eval_inputs(surrogate, ds);
    return accuracy_under_attack(AttackTarget::ensemble(surrogate), AttackTarget::ensemble(defender), ds, spec, seed);
}

// ---------------------------------------------------------------- ablation

struct AblationRow {
    bool use_disparity = false;
    bool use_adv = false;
    bool use_nat = false;
    double clean_acc = 0.0;
    double pgd_acc = 0.0;
    double mim_acc = 0.0;
};

// The five loss-component combinations, in order: baseline, +L_adv,
// +e^D·L_adv, +L_adv+L_nat, full.
inline std::vector<LossTerms> ablation_flags() {
    return {{false, false, false}, {false, true, false}, {true, true, false}, {false, true, true}, {true, true, true}};
}

// Trains one fresh ensemble per flag combination (same seed for all) and
// evaluates each under the PGD and MIM specs.
inline std::vector<AblationRow> ablation_grid(const Dataset& train_ds, const Dataset& test_ds, const CeatConfig& base,
                                              const std::function<Ensemble()>& make, const AttackSpec& pgd_spec,
                                              const AttackSpec& mim_spec, std::uint64_t eval_seed = 0) {
    std::vector<AblationRow> rows;
    for (const auto& flags : ablation_flags()) {
        CeatConfig cfg = base;
        cfg.variant = Variant::ceat;
        cfg.terms = flags;
        Ensemble e = make();
        train(e, train_ds, cfg);
        const auto report = evaluate(e, test_ds, {pgd_spec, mim_spec}, eval_seed);
        rows.push_back(AblationRow{flags.disparity, flags.adv, flags.nat, report.clean_acc, report.robust[0].second,
                                   report.robust[1].second});
    }
    return rows;
}

// ---------------------------------------------------------------- serialization

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["meta"] = {{"seed", r.meta.seed},
                 {"config_hash", r.meta.config_hash},
                 {"variant", r.meta.variant},
                 {"lambda", r.meta.lambda},
                 {"mu", r.meta.mu},
                 {"transfer_orientation", "row=generator,col=victim"},
                 {"timestamp", r.meta.timestamp}};
    j["clean_acc"] = r.clean_acc;
    j["robust"] = nlohmann::ordered_json::object();
    for (const auto& [name, acc] : r.robust) j["robust"][name] = acc;
    j["transfer"] = r.transfer;
    j["blackbox"] = r.blackbox ? nlohmann::ordered_json(*r.blackbox) : nlohmann::ordered_json(nullptr);
    return j;
}

inline EvalReport report_from_json(const nlohmann::ordered_json& j) {
    EvalReport r;
    const auto& m = j.at("meta");
    r.meta.seed = m.at("seed").get<std::uint64_t>();
    r.meta.config_hash = m.at("config_hash").get<std::string>();
    r.meta.variant = m.at("variant").get<std::string>();
    r.meta.lambda = m.at("lambda").get<double>();
    r.meta.mu = m.at("mu").get<double>();
    r.meta.timestamp = m.at("timestamp").get<std::string>();
    r.clean_acc = j.at("clean_acc").get<double>();
    for (const auto& [k, v] : j.at("robust").items()) r.robust.emplace_back(k, v.get<double>());
    r.transfer = j.at("transfer").get<std::vector<std::vector<double>>>();
    if (!j.at("blackbox").is_null()) r.blackbox = j.at("blackbox").get<double>();
    return r;
}

inline constexpr const char* kReportCsvHeader = "metric,accuracy";

// CSV rows: clean, one per attack, then blackbox when present.
inline std::string to_csv(const EvalReport& r) {
    nlohmann::json fmt;  // shortest round-trip formatting for doubles
    auto num = [&fmt](double v) {
        fmt = v;
        return fmt.dump();
    };
    std::string out = std::string(kReportCsvHeader) + "\n";
    out += "clean," + num(r.clean_acc) + "\n";
    for (const auto& [name, acc] : r.robust) out += name + "," + num(acc) + "\n";
    if (r.blackbox) out += "blackbox," + num(*r.blackbox) + "\n";
    return out;
}

enum class ReportFormat { json, csv };

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

inline void write_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
    write_text(path, format == ReportFormat::json ? to_json(report).dump(2) + "\n" : to_csv(report));
}

inline nlohmann::ordered_json to_json(const RiskReport& r) {
    nlohmann::ordered_json j;
    j["members"] = nlohmann::ordered_json::array();
    for (const auto& m : r.members)
        j["members"].push_back({{"risk", m.risk},
                                {"boundary_mass", m.boundary_mass},
                                {"interior_mass", m.interior_mass},
                                {"boundary_risk", m.boundary_risk},
                                {"interior_risk", m.interior_risk},
                                {"combined", m.combined}});
    j["ensemble_risk"] = r.ensemble_risk;
    j["majority_risk"] = r.majority_risk;
    return j;
}

inline nlohmann::ordered_json to_json(const EpochSummary& s) {
    nlohmann::ordered_json j;
    j["epoch"] = s.epoch;
    j["members"] = nlohmann::ordered_json::array();
    for (const auto& m : s.members)
        j["members"].push_back({{"l_ce", m.l_ce},
                                {"l_nat_d", m.l_nat_d},
                                {"l_adv_d", m.l_adv_d},
                                {"l_total", m.l_total},
                                {"partition", m.partition}});
    j["weights_adv"] = {{"mean", s.weights_adv.mean}, {"max", s.weights_adv.max}};
    j["weights_nat"] = {{"mean", s.weights_nat.mean}, {"max", s.weights_nat.max}};
    j["risk"] = to_json(s.risk);
    return j;
}

inline nlohmann::ordered_json to_json(const AblationRow& r) {
    return {{"use_eD", r.use_disparity}, {"use_Ladv", r.use_adv}, {"use_Lnat", r.use_nat},
            {"clean_acc", r.clean_acc},  {"pgd_acc", r.pgd_acc},  {"mim_acc", r.mim_acc}};
}

}  // namespace ceat
