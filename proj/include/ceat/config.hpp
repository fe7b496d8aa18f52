#pragma once

// Run configuration: an INI-style file of [section] headers and key = value
// lines ('#' starts a comment), with `section.key=value` overrides applied
// last. Every key is known in advance; unknown keys are rejected.

#include <zlib.h>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ceat/attacks.hpp"
#include "ceat/errors.hpp"
#include "ceat/model.hpp"
#include "ceat/trainer.hpp"

namespace ceat {

enum class DatasetKind { digits, spirals, idx, csv };

struct DatasetSection {
    DatasetKind kind = DatasetKind::digits;
    std::string train_images, train_labels, test_images, test_labels;
    std::string train_csv, test_csv;
    std::size_t classes = 10;
    std::size_t train_size = 2000;
    std::size_t test_size = 1000;
    std::size_t side = 10;
    std::size_t n_per_class = 100;
    std::size_t test_n_per_class = 100;
    double noise = 0.1;
    std::uint64_t data_seed = 1;
};

struct ModelSection {
    ArchSpec arch = ArchSpec::reference(Arch::mlp);
    std::size_t members = 3;
    std::uint64_t seed = 0;
    double lr = 0.01;
    double momentum = 0.9;
};

struct EvalSection {
    std::vector<AttackSpec> battery;
    // PGD and MIM at the evaluation budget, used by ablation runs whatever
    // the battery lists.
    AttackSpec pgd;
    AttackSpec mim;
    bool transfer = true;
    bool blackbox = false;
    std::uint64_t surrogate_seed = 1000;
    Variant surrogate_variant = Variant::vanilla_eat;
    std::uint64_t seed = 0;
};

struct OutputSection {
    std::string dir = "out";
    bool json = true;
    bool csv = true;
};

struct RunConfig {
    DatasetSection dataset;
    ModelSection model;
    CeatConfig train;
    EvalSection eval;
    OutputSection output;
    // Relative dataset paths resolve against this directory.
    std::filesystem::path base_dir;
    // Sorted `section.key=value` lines of every experiment-defining setting
    // (the output section excluded); hashed into report metadata.
    std::string canonical;

    std::string config_hash() const {
        char buf[9];
        const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(canonical.data()), static_cast<uInt>(canonical.size()));
        std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
        return buf;
    }
};

namespace detail {

enum class ValueType { text, real, count, boolean, list };

inline const std::map<std::string, ValueType>& config_schema() {
    static const std::map<std::string, ValueType> schema{
        {"dataset.kind", ValueType::text},
        {"dataset.train_images", ValueType::text},
        {"dataset.train_labels", ValueType::text},
        {"dataset.test_images", ValueType::text},
        {"dataset.test_labels", ValueType::text},
        {"dataset.train_csv", ValueType::text},
        {"dataset.test_csv", ValueType::text},
        {"dataset.classes", ValueType::count},
        {"dataset.train_size", ValueType::count},
        {"dataset.test_size", ValueType::count},
        {"dataset.side", ValueType::count},
        {"dataset.n_per_class", ValueType::count},
        {"dataset.test_n_per_class", ValueType::count},
        {"dataset.noise", ValueType::real},
        {"dataset.data_seed", ValueType::count},
        {"model.arch", ValueType::text},
        {"model.widths", ValueType::list},
        {"model.members", ValueType::count},
        {"model.seed", ValueType::count},
        {"model.lr", ValueType::real},
        {"model.momentum", ValueType::real},
        {"train.variant", ValueType::text},
        {"train.subset", ValueType::text},
        {"train.lambda", ValueType::real},
        {"train.mu", ValueType::real},
        {"train.epochs", ValueType::count},
        {"train.batch_size", ValueType::count},
        {"train.attack", ValueType::text},
        {"train.epsilon", ValueType::real},
        {"train.alpha", ValueType::real},
        {"train.steps", ValueType::count},
        {"train.random_start", ValueType::boolean},
        {"train.use_disparity", ValueType::boolean},
        {"train.use_adv", ValueType::boolean},
        {"train.use_nat", ValueType::boolean},
        {"eval.attacks", ValueType::list},
        {"eval.epsilon", ValueType::real},
        {"eval.alpha", ValueType::real},
        {"eval.steps", ValueType::count},
        {"eval.random_start", ValueType::boolean},
        {"eval.mim_decay", ValueType::real},
        {"eval.cw_kappa", ValueType::real},
        {"eval.transfer", ValueType::boolean},
        {"eval.blackbox", ValueType::boolean},
        {"eval.surrogate_seed", ValueType::count},
        {"eval.surrogate_variant", ValueType::text},
        {"eval.seed", ValueType::count},
        {"output.dir", ValueType::text},
        {"output.formats", ValueType::list},
    };
    return schema;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Entry {
    std::string value;
    std::string where;  // "file:line" or "--set"
};

class Settings {
public:
    void put(const std::string& key, const std::string& value, const std::string& where) {
        const auto& schema = config_schema();
        if (!schema.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
        entries_[key] = Entry{value, where};
        check_type(key);
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string text(const std::string& key, const std::string& fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : it->second.value;
    }

    double real(const std::string& key, double fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : parse_real(it->first, it->second);
    }

    std::uint64_t count(const std::string& key, std::uint64_t fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : parse_count(it->first, it->second);
    }

    bool boolean(const std::string& key, bool fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : parse_bool(it->first, it->second);
    }

    std::vector<std::string> list(const std::string& key, std::vector<std::string> fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        std::vector<std::string> out;
        std::stringstream ss(it->second.value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::string where(const std::string& key) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? std::string("config") : it->second.where;
    }

    std::string canonical() const {
        std::string out;
        for (const auto& [k, e] : entries_)
            if (k.rfind("output.", 0) != 0) out += k + "=" + e.value + "\n";
        return out;
    }

private:
    static double parse_real(const std::string& key, const Entry& e) {
        double v = 0.0;
        const char* b = e.value.data();
        const char* end = b + e.value.size();
        auto [p, ec] = std::from_chars(b, end, v);
        if (ec != std::errc{} || p != end || e.value.empty())
            throw ConfigError(e.where + ": key '" + key + "' expects a number, got '" + e.value + "'");
        return v;
    }
    static std::uint64_t parse_count(const std::string& key, const Entry& e) {
        std::uint64_t v = 0;
        const char* b = e.value.data();
        const char* end = b + e.value.size();
        auto [p, ec] = std::from_chars(b, end, v);
        if (ec != std::errc{} || p != end || e.value.empty())
            throw ConfigError(e.where + ": key '" + key + "' expects a non-negative integer, got '" + e.value + "'");
        return v;
    }
    static bool parse_bool(const std::string& key, const Entry& e) {
        if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
        if (e.value == "false" || e.value == "0" || e.value == "no") return false;
        throw ConfigError(e.where + ": key '" + key + "' expects true/false, got '" + e.value + "'");
    }
    void check_type(const std::string& key) const {
        const auto& e = entries_.at(key);
        switch (config_schema().at(key)) {
            case ValueType::real: parse_real(key, e); break;
            case ValueType::count: parse_count(key, e); break;
            case ValueType::boolean: parse_bool(key, e); break;
            default: break;
        }
    }

    std::map<std::string, Entry> entries_;
};

inline Settings read_settings(const std::string& text, const std::string& source) {
    Settings settings;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = source + ":" + std::to_string(lineno);
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            static const std::set<std::string> known{"dataset", "model", "train", "eval", "output"};
            if (!known.count(section)) throw ConfigError(where + ": unknown section '" + section + "'");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside of any section");
        settings.put(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
    return settings;
}

}  // namespace detail

inline RunConfig build_config(const detail::Settings& s) {
    RunConfig c;

    if (!s.has("dataset.kind")) throw ConfigError("config: missing required key 'dataset.kind'");
    const auto kind = s.text("dataset.kind", "");
    auto& d = c.dataset;
    if (kind == "digits") d.kind = DatasetKind::digits;
    else if (kind == "spirals") d.kind = DatasetKind::spirals;
    else if (kind == "idx") d.kind = DatasetKind::idx;
    else if (kind == "csv") d.kind = DatasetKind::csv;
    else throw ConfigError(s.where("dataset.kind") + ": unknown dataset kind '" + kind + "'");
    auto require = [&s](const char* key) {
        if (!s.has(key)) throw ConfigError(std::string("config: missing required key '") + key + "'");
        return s.text(key, "");
    };
    if (d.kind == DatasetKind::idx) {
        d.train_images = require("dataset.train_images");
        d.train_labels = require("dataset.train_labels");
        d.test_images = require("dataset.test_images");
        d.test_labels = require("dataset.test_labels");
    }
    if (d.kind == DatasetKind::csv) {
        d.train_csv = require("dataset.train_csv");
        d.test_csv = require("dataset.test_csv");
        require("dataset.classes");
    }
    d.classes = s.count("dataset.classes", d.kind == DatasetKind::spirals ? 3 : 10);
    d.train_size = s.count("dataset.train_size", d.train_size);
    d.test_size = s.count("dataset.test_size", d.test_size);
    d.side = s.count("dataset.side", d.side);
    d.n_per_class = s.count("dataset.n_per_class", d.n_per_class);
    d.test_n_per_class = s.count("dataset.test_n_per_class", d.test_n_per_class);
    d.noise = s.real("dataset.noise", d.noise);
    d.data_seed = s.count("dataset.data_seed", d.data_seed);
    if (d.kind == DatasetKind::spirals && d.classes != 2 && d.classes != 3)
        throw ConfigError(s.where("dataset.classes") + ": spirals support 2 or 3 classes");
    if (d.noise < 0.0) throw ConfigError(s.where("dataset.noise") + ": noise must be >= 0");

    auto& m = c.model;
    m.arch = ArchSpec::reference(parse_arch(s.text("model.arch", "mlp")));
    if (s.has("model.widths")) {
        m.arch.widths.clear();
        for (const auto& w : s.list("model.widths", {})) {
            std::size_t v = 0;
            auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), v);
            if (ec != std::errc{} || p != w.data() + w.size() || v == 0)
                throw ConfigError(s.where("model.widths") + ": widths must be positive integers, got '" + w + "'");
            m.arch.widths.push_back(v);
        }
    }
    m.members = s.count("model.members", m.members);
    m.seed = s.count("model.seed", m.seed);
    m.lr = s.real("model.lr", m.lr);
    m.momentum = s.real("model.momentum", m.momentum);
    if (m.members < 2) throw ConfigError(s.where("model.members") + ": ensemble needs at least 2 members");
    if (!(m.lr > 0.0)) throw ConfigError(s.where("model.lr") + ": learning rate must be > 0");
    if (!(m.momentum >= 0.0 && m.momentum < 1.0)) throw ConfigError(s.where("model.momentum") + ": momentum must be in [0,1)");

    auto& t = c.train;
    t.variant = parse_variant(s.text("train.variant", "ceat"));
    t.subset = parse_subset(s.text("train.subset", "F12"));
    t.lambda = s.real("train.lambda", t.lambda);
    t.mu = s.real("train.mu", t.mu);
    if (!(t.lambda >= 0.0) || !std::isfinite(t.lambda)) throw ConfigError(s.where("train.lambda") + ": lambda must be >= 0");
    if (!(t.mu >= 0.0) || !std::isfinite(t.mu)) throw ConfigError(s.where("train.mu") + ": mu must be >= 0");
    t.epochs = s.count("train.epochs", t.epochs);
    t.batch_size = s.count("train.batch_size", t.batch_size);
    t.seed = m.seed;
    t.train_attack.kind = parse_attack_kind(s.text("train.attack", "pgd"));
    t.train_attack.epsilon = s.real("train.epsilon", t.train_attack.epsilon);
    t.train_attack.alpha = s.real("train.alpha", t.train_attack.alpha);
    t.train_attack.steps = s.count("train.steps", t.train_attack.steps);
    t.train_attack.random_start = s.boolean("train.random_start", t.train_attack.random_start);
    t.terms.disparity = s.boolean("train.use_disparity", true);
    t.terms.adv = s.boolean("train.use_adv", true);
    t.terms.nat = s.boolean("train.use_nat", true);
    t.validate();

    auto& e = c.eval;
    const double eps = s.real("eval.epsilon", 0.031);
    const double alpha = s.real("eval.alpha", 0.007);
    const std::size_t steps = s.count("eval.steps", 20);
    for (const auto& name : s.list("eval.attacks", {"pgd", "mim", "cw"})) {
        AttackSpec a;
        a.kind = parse_attack_kind(name);
        a.epsilon = eps;
        a.alpha = alpha;
        a.steps = steps;
        a.random_start = a.kind == AttackKind::pgd ? s.boolean("eval.random_start", true) : false;
        a.mim_decay = s.real("eval.mim_decay", 1.0);
        a.cw_kappa = s.real("eval.cw_kappa", 0.0);
        a.validate();
        e.battery.push_back(a.normalized());
    }
    e.pgd = AttackSpec::pgd(eps, alpha, steps, s.boolean("eval.random_start", true));
    e.mim = AttackSpec::mim(eps, alpha, steps, s.real("eval.mim_decay", 1.0));
    e.pgd.validate();
    e.mim.validate();
    e.transfer = s.boolean("eval.transfer", e.transfer);
    e.blackbox = s.boolean("eval.blackbox", e.blackbox);
    e.surrogate_seed = s.count("eval.surrogate_seed", e.surrogate_seed);
    e.surrogate_variant = parse_variant(s.text("eval.surrogate_variant", "vanilla_eat"));
    e.seed = s.count("eval.seed", e.seed);
    if (e.blackbox && e.surrogate_seed == m.seed)
        throw ConfigError(s.where("eval.surrogate_seed") + ": surrogate seed must differ from model seed");

    c.output.dir = s.text("output.dir", c.output.dir);
    if (s.has("output.formats")) {
        c.output.json = c.output.csv = false;
        for (const auto& f : s.list("output.formats", {})) {
            if (f == "json") c.output.json = true;
            else if (f == "csv") c.output.csv = true;
            else throw ConfigError(s.where("output.formats") + ": unknown format '" + f + "'");
        }
    }
    c.canonical = s.canonical();
    return c;
}

// Parses config text; overrides are `section.key=value` strings.
inline RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides,
                                   const std::string& source = "config") {
    auto settings = detail::read_settings(text, source);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set " + o + ": expected section.key=value");
        settings.put(detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)), "--set " + o);
    }
    return build_config(settings);
}

inline RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    auto cfg = parse_config_text(ss.str(), overrides, path.filename().string());
    cfg.base_dir = path.parent_path();
    return cfg;
}

}  // namespace ceat
