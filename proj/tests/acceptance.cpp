// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; exit status is non-zero if any run fails.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "ceat/cli.hpp"

using namespace ceat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

fs::path work_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "ceat_acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

Tensor uniform_batch(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = u(rng);
    return t;
}

std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, k - 1);
    std::vector<int> y(n);
    for (auto& v : y) v = u(rng);
    return y;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.values().data(), b.values().data(), a.values().size() * sizeof(double)) == 0;
}

bool same_parameters(Ensemble& a, Ensemble& b) {
    for (std::size_t m = 0; m < a.size(); ++m) {
        auto pa = a.members[m].parameters();
        auto pb = b.members[m].parameters();
        for (std::size_t i = 0; i < pa.size(); ++i)
            if (!bitwise_equal(*pa[i], *pb[i])) return false;
    }
    return true;
}

std::string without_timestamps(const std::string& s) {
    std::istringstream in(s);
    std::string line, out;
    while (std::getline(in, line))
        if (line.find("\"timestamp\"") == std::string::npos) out += line + "\n";
    return out;
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "ceat");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) std::cerr << err.str();
    return code;
}

// ---------------------------------------------------------------- 1

Outcome gradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = gradcheck_suite(10, 0);
    const double secs = seconds_since(t0);
    std::size_t max_params = 0;
    for (const auto& t : r.trials) max_params = std::max(max_params, t.parameters);
    const bool ok = r.trials.size() >= 20 && max_params <= 5000 && r.passed() && secs < 60.0;
    return {ok, std::to_string(r.trials.size()) + " MLP/CNN instances, <= " + std::to_string(max_params) +
                    " params, worst rel err " + fmt(r.worst, 3) + ", " + fmt(secs, 3) + "s"};
}

// ---------------------------------------------------------------- 2

Outcome attack_invariants() {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> steps(1, 20);
    const Ensemble e = make_ensemble(ArchSpec{Arch::mlp, {16}}, {1, 5, 5}, 4, 3, 2);
    const Ensemble cnn = make_ensemble(ArchSpec{Arch::cnn, {2}}, {1, 5, 5}, 4, 2, 3);
    std::size_t violations = 0;
    for (std::size_t trial = 0; trial < 1000; ++trial) {
        AttackSpec spec;
        spec.kind = static_cast<AttackKind>(trial % 4);
        spec.epsilon = 0.1 * u(rng);
        spec.alpha = 0.001 + 0.05 * u(rng);
        spec.steps = steps(rng);
        spec.random_start = u(rng) < 0.5;
        const Ensemble& ens = trial % 5 == 0 ? cnn : e;
        const auto target = trial % 2 ? AttackTarget::ensemble(ens) : AttackTarget::single(ens.members[trial % ens.size()]);
        const Tensor x = uniform_batch({4, 1, 5, 5}, 10000 + trial);
        const auto y = random_labels(4, 4, 20000 + trial);
        const Tensor adv = run_attack(target, x, y, spec, trial).x_adv;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (std::fabs(adv[i] - x[i]) > spec.epsilon + 1e-12 || adv[i] < 0.0 || adv[i] > 1.0) {
                ++violations;
                break;
            }
    }
    std::size_t mismatches = 0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const double eps = 0.1 * u(rng);
        const Tensor x = uniform_batch({6, 1, 5, 5}, 30000 + trial);
        const auto y = random_labels(6, 4, 40000 + trial);
        const auto target = AttackTarget::ensemble(e);
        const Tensor a = run_attack(target, x, y, AttackSpec::fgsm(eps), trial).x_adv;
        const Tensor b = run_attack(target, x, y, AttackSpec::pgd(eps, eps, 1, false), trial).x_adv;
        mismatches += bitwise_equal(a, b) ? 0 : 1;
    }
    return {violations == 0 && mismatches == 0, "1000 fuzzed attacks, " + std::to_string(violations) +
                                                     " invariant violations; FGSM vs PGD(1, alpha=eps) " +
                                                     std::to_string(100 - mismatches) + "/100 bitwise equal"};
}

// ---------------------------------------------------------------- 3

Outcome partition_and_weights() {
    std::mt19937_64 rng(3);
    std::size_t wrong_tables = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t peers = 2 + static_cast<std::size_t>(trial % 3);
        const std::size_t n = 1 + static_cast<std::size_t>(trial % 23);
        std::uniform_int_distribution<int> cls(0, 2);
        std::vector<std::vector<int>> preds(peers, std::vector<int>(n));
        std::vector<int> y(n);
        for (auto& row : preds)
            for (auto& v : row) v = cls(rng);
        for (auto& v : y) v = cls(rng);
        std::vector<std::vector<bool>> correct;
        for (const auto& p : preds) correct.push_back(correctness(p, y));
        const auto part = partition_by_correctness(correct);

        std::vector<int> where(n, -1);
        bool ok = part.total() == n;
        const std::vector<const std::vector<std::size_t>*> sets{&part.f1, &part.f2, &part.f3, &part.f4};
        for (int f = 0; f < 4; ++f)
            for (auto i : *sets[static_cast<std::size_t>(f)]) {
                ok = ok && where[i] == -1;
                where[i] = f;
            }
        for (std::size_t i = 0; i < n; ++i) {
            bool all_right = true, all_wrong = true;
            for (std::size_t p = 0; p < peers; ++p) {
                all_right = all_right && preds[p][i] == y[i];
                all_wrong = all_wrong && preds[p][i] != y[i];
            }
            const int expect = all_right ? 2 : all_wrong ? 3 : preds[0][i] == y[i] ? 0 : 1;
            ok = ok && where[i] == expect;
        }
        wrong_tables += ok ? 0 : 1;
    }

    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t out_of_range = 0, not_one = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const double amp = 10.0 * u(rng);
        const std::size_t peers = 2 + static_cast<std::size_t>(trial % 3);
        std::vector<std::vector<double>> h(peers, std::vector<double>(8));
        for (auto& row : h)
            for (auto& v : row) v = u(rng);
        for (double w : disparity_weight(h, amp))
            out_of_range += w >= 1.0 && w <= std::exp(amp) ? 0 : 1;
        const std::vector<std::vector<double>> equal(peers, h[0]);
        for (double w : disparity_weight(equal, amp)) not_one += w == 1.0 ? 0 : 1;
    }
    const double e5 = disparity_weight({{1.0}, {0.0}}, 5.0)[0];
    const bool closed_form = std::fabs(e5 - 148.4131591025766) <= 1e-9;
    return {wrong_tables == 0 && out_of_range == 0 && not_one == 0 && closed_form,
            std::to_string(10000 - wrong_tables) + "/10000 tables match the oracle; " + std::to_string(out_of_range) +
                " weights outside [1, e^amp]; " + std::to_string(not_one) + " equal-peer weights != 1; e^5 = " +
                fmt(e5, 12)};
}

// ---------------------------------------------------------------- 4

Outcome baseline_recovery() {
    const Dataset ds = synth_digits(256, 4);
    auto run = [&](Variant v, double lambda, double mu) {
        Ensemble e = make_ensemble(ArchSpec::reference(Arch::mlp), ds.sample_shape, 10, 3, 4);
        CeatConfig cfg;
        cfg.variant = v;
        cfg.lambda = lambda;
        cfg.mu = mu;
        cfg.epochs = 3;
        cfg.batch_size = 64;
        cfg.seed = 4;
        cfg.train_attack = AttackSpec::pgd(0.031, 0.0078, 3);
        std::string log;
        train(e, ds, cfg, [&](const EpochSummary& s) { log += to_json(s).dump() + "\n"; });
        return std::make_pair(std::move(e), log);
    };
    auto [vanilla, vlog] = run(Variant::vanilla_eat, 1.0, 5.0);
    auto [zero, zlog] = run(Variant::ceat, 0.0, 0.0);
    const bool params = same_parameters(vanilla, zero);
    const bool logs = vlog == zlog;
    return {params && logs, std::string("3 epochs: parameters ") + (params ? "bitwise equal" : "DIFFER") +
                                ", epoch logs " + (logs ? "identical" : "DIFFER")};
}

// ---------------------------------------------------------------- 5

Outcome loss_bookkeeping() {
    const Dataset ds = synth_spirals(64, 3, 0.1, 5);
    Ensemble e = make_ensemble(ArchSpec{Arch::mlp, {32, 32}}, ds.sample_shape, 3, 3, 5, 0.05);
    CeatConfig cfg;
    cfg.lambda = 1.3;
    cfg.mu = 4.2;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.seed = 5;
    cfg.train_attack = AttackSpec::pgd(0.05, 0.02, 3);
    std::size_t records = 0, bad = 0;
    double worst = 0.0;
    train(e, ds, cfg, {}, [&](const BatchRecord& r) {
        ++records;
        const auto& l = r.loss;
        const double gap = std::fabs(l.l_total - (l.l_ce + cfg.lambda * l.l_nat_d + cfg.mu * l.l_adv_d));
        worst = std::max(worst, gap);
        bad += gap <= 1e-12 ? 0 : 1;
    });
    return {records > 0 && bad == 0,
            std::to_string(records) + " batch records, worst |l_total - recomputed| " + fmt(worst, 3)};
}

// ---------------------------------------------------------------- 6-8

struct DeskRun {
    double clean = 0.0, pgd = 0.0, transfer = 0.0;
};

struct DeskResults {
    std::vector<DeskRun> vanilla, ceat15, ceat51;
    double seconds = 0.0;
    bool ok = false;
    std::string error;
};

const char* kDeskConfig = R"([dataset]
kind = idx
train_images = train-images.idx3-ubyte
train_labels = train-labels.idx1-ubyte
test_images = test-images.idx3-ubyte
test_labels = test-labels.idx1-ubyte
classes = 10

[model]
arch = mlp
members = 3
lr = 0.01
momentum = 0.9

[train]
epochs = 20
batch_size = 128
attack = pgd
epsilon = 0.031
alpha = 0.0078
steps = 10

[eval]
attacks = pgd
epsilon = 0.031
alpha = 0.007
steps = 20
)";

const DeskResults& desk_results() {
    static const DeskResults results = [] {
        DeskResults r;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                const auto dir = work_dir("desk_" + std::to_string(seed));
                write_idx(synth_digits(2000, 1000 + seed), dir / "train-images.idx3-ubyte", dir / "train-labels.idx1-ubyte");
                write_idx(synth_digits(1000, 5000 + seed), dir / "test-images.idx3-ubyte", dir / "test-labels.idx1-ubyte");
                write_file(dir / "desk.ini", kDeskConfig);
                auto run = [&](const std::string& variant, const std::string& lambda, const std::string& mu) {
                    const RunConfig cfg = parse_config(dir / "desk.ini", {"model.seed=" + std::to_string(seed),
                                                                          "eval.seed=" + std::to_string(seed),
                                                                          "train.variant=" + variant,
                                                                          "train.lambda=" + lambda, "train.mu=" + mu});
                    const auto data = load_data(cfg);
                    Ensemble e = fresh_ensemble(cfg, data.train, cfg.model.seed);
                    train(e, data.train, cfg.train);
                    const auto report = evaluate(e, data.test, cfg.eval.battery, cfg.eval.seed);
                    DeskRun d;
                    d.clean = report.clean_acc;
                    d.pgd = report.robust.at(0).second;
                    d.transfer = mean_off_diagonal(transfer_matrix(e, data.test, cfg.eval.battery.at(0), cfg.eval.seed));
                    std::cout << "  seed " << seed << " " << variant << "(" << lambda << "," << mu << "): clean "
                              << d.clean << " pgd20 " << d.pgd << " transfer " << fmt(d.transfer) << " ["
                              << fmt(seconds_since(t0), 4) << "s]" << std::endl;
                    return d;
                };
                r.vanilla.push_back(run("vanilla_eat", "0", "0"));
                r.ceat15.push_back(run("ceat", "1", "5"));
                r.ceat51.push_back(run("ceat", "5", "1"));
            }
            r.ok = true;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        r.seconds = seconds_since(t0);
        return r;
    }();
    return results;
}

double mean_of(const std::vector<DeskRun>& runs, double DeskRun::*field) {
    double s = 0.0;
    for (const auto& r : runs) s += r.*field;
    return s / static_cast<double>(runs.size());
}

Outcome desk_direction() {
    const auto& d = desk_results();
    if (!d.ok) return {false, "desk runs failed: " + d.error};
    const double dv = mean_of(d.vanilla, &DeskRun::pgd), dc = mean_of(d.ceat15, &DeskRun::pgd);
    const double cv = mean_of(d.vanilla, &DeskRun::clean), cc = mean_of(d.ceat15, &DeskRun::clean);
    const bool ok = dc >= dv + 0.02 && std::fabs(cc - cv) <= 0.03 && d.seconds <= 1800.0;
    return {ok, "mean PGD-20 CEAT(1,5) " + fmt(dc) + " vs vanilla " + fmt(dv) + " (need +0.02); mean clean " +
                    fmt(cc) + " vs " + fmt(cv) + " (need within 0.03); 9 runs in " + fmt(d.seconds, 4) + "s"};
}

Outcome tradeoff_direction() {
    const auto& d = desk_results();
    if (!d.ok) return {false, "desk runs failed: " + d.error};
    int clean_wins = 0, robust_wins = 0;
    std::string per_seed;
    for (std::size_t s = 0; s < 3; ++s) {
        clean_wins += d.ceat51[s].clean >= d.ceat15[s].clean ? 1 : 0;
        robust_wins += d.ceat15[s].pgd >= d.ceat51[s].pgd ? 1 : 0;
        per_seed += " seed " + std::to_string(s) + ": clean " + fmt(d.ceat51[s].clean) + "/" + fmt(d.ceat15[s].clean) +
                    ", pgd " + fmt(d.ceat51[s].pgd) + "/" + fmt(d.ceat15[s].pgd) + ";";
    }
    return {clean_wins >= 2 && robust_wins >= 2,
            "(5,1) clean >= (1,5) on " + std::to_string(clean_wins) + "/3 seeds, (1,5) PGD >= (5,1) on " +
                std::to_string(robust_wins) + "/3 [(5,1)/(1,5)]" + per_seed};
}

Outcome transfer_direction() {
    const auto& d = desk_results();
    if (!d.ok) return {false, "desk runs failed: " + d.error};
    int wins = 0;
    std::string per_seed;
    for (std::size_t s = 0; s < 3; ++s) {
        wins += d.ceat15[s].transfer <= d.vanilla[s].transfer ? 1 : 0;
        per_seed += " " + fmt(d.ceat15[s].transfer) + "/" + fmt(d.vanilla[s].transfer);
    }
    return {wins >= 2, "CEAT(1,5) off-diagonal transfer <= vanilla on " + std::to_string(wins) +
                           "/3 seeds [ceat/vanilla]:" + per_seed};
}

// ---------------------------------------------------------------- 9

const char* kSpiralConfig = R"([dataset]
kind = spirals
classes = 3
n_per_class = 40
test_n_per_class = 20

[model]
widths = 32, 32
members = 3
seed = 9
lr = 0.05

[train]
epochs = 3
batch_size = 30
epsilon = 0.05
alpha = 0.02
steps = 3

[eval]
attacks = pgd, mim
epsilon = 0.05
alpha = 0.02
steps = 5
seed = 9
)";

Outcome ablation_harness() {
    const auto dir = work_dir("ablate");
    write_file(dir / "spirals.ini", kSpiralConfig);
    const std::string config = (dir / "spirals.ini").string();
    if (cli({"ablate", "--config", config, "--out", (dir / "grid").string()}) != 0) return {false, "ablate failed"};
    if (cli({"train", "--config", config, "--out", (dir / "vanilla").string(), "--set", "train.variant=vanilla_eat",
             "--set", "eval.transfer=false"}) != 0)
        return {false, "vanilla train failed"};

    std::vector<nlohmann::json> rows;
    std::istringstream lines(slurp(dir / "grid" / kAblationLog));
    for (std::string line; std::getline(lines, line);) rows.push_back(nlohmann::json::parse(line));
    const std::vector<std::array<bool, 3>> flags{
        {false, false, false}, {false, true, false}, {true, true, false}, {false, true, true}, {true, true, true}};
    bool structure = rows.size() == 5;
    for (std::size_t r = 0; structure && r < 5; ++r)
        structure = rows[r]["use_eD"] == flags[r][0] && rows[r]["use_Ladv"] == flags[r][1] &&
                    rows[r]["use_Lnat"] == flags[r][2];
    const auto report = nlohmann::json::parse(slurp(dir / "vanilla" / kReportJson));
    const bool equal = structure && rows[0]["clean_acc"] == report["clean_acc"] &&
                       rows[0]["pgd_acc"] == report["robust"]["pgd"] && rows[0]["mim_acc"] == report["robust"]["mim"];
    return {structure && equal, std::to_string(rows.size()) + " rows, flag structure " +
                                    (structure ? "correct" : "WRONG") + ", row 1 " +
                                    (equal ? "equals" : "DIFFERS FROM") + " the vanilla run (clean " +
                                    report["clean_acc"].dump() + ", pgd " + report["robust"]["pgd"].dump() + ")"};
}

// ---------------------------------------------------------------- 10

Outcome determinism() {
    const auto dir = work_dir("determinism");
    write_file(dir / "spirals.ini", kSpiralConfig);
    const std::string config = (dir / "spirals.ini").string();
    std::vector<std::string> files;
    for (const char* run : {"a", "b"}) {
        // The second run advertises more threads; results must not depend on it.
        if (std::string(run) == "b") {
            ::setenv("OMP_NUM_THREADS", "4", 1);
            ::setenv("EIGEN_NUM_THREADS", "4", 1);
        }
        const std::string out = (dir / run).string();
        for (const char* sub : {"train", "attack", "transfer"})
            if (cli({sub, "--config", config, "--out", out, "--set", "eval.attacks=pgd,mim,cw"}) != 0)
                return {false, std::string(sub) + " failed"};
    }
    for (const auto& entry : fs::directory_iterator(dir / "a")) files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());
    std::size_t differing = 0;
    for (const auto& f : files)
        differing += without_timestamps(slurp(dir / "a" / f)) == without_timestamps(slurp(dir / "b" / f)) ? 0 : 1;
    std::size_t files_b = 0;
    for ([[maybe_unused]] const auto& entry : fs::directory_iterator(dir / "b")) ++files_b;
    std::string names;
    for (const auto& f : files) names += " " + f;
    return {differing == 0 && files_b == files.size(),
            std::to_string(files.size() - differing) + "/" + std::to_string(files.size()) +
                " output files byte-identical apart from timestamps:" + names};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::function<Outcome()>> criteria{
        gradient_oracle, attack_invariants, partition_and_weights, baseline_recovery, loss_bookkeeping,
        desk_direction,  tradeoff_direction, transfer_direction,  ablation_harness,  determinism};
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) {
        const int n = std::atoi(argv[i]);
        if (n < 1 || n > static_cast<int>(criteria.size())) {
            std::cerr << "usage: acceptance [criterion numbers 1-10]\n";
            return 2;
        }
        selected.insert(static_cast<std::size_t>(n));
    }
    if (selected.empty())
        for (std::size_t n = 1; n <= criteria.size(); ++n) selected.insert(n);

    int failures = 0;
    for (std::size_t n : selected) {
        Outcome o;
        try {
            o = criteria[n - 1]();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
