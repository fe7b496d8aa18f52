#pragma once

// Collaborative ensemble adversarial training.
//
// Each batch: adversarial examples are generated against the whole ensemble,
// every member's true-class confidence is snapshotted on the clean and the
// adversarial batch, then members are updated one after another, each by its
// own optimizer. Member m's loss is
//
//   L_ce(x̃) + λ · mean(exp(λ·D(x))  · |p_m(x) - onehot(y)|²)
//           + μ · mean(exp(μ·D(x̃)) · |p_m(x̃) - p_m(x)|²)
//
// where D is the largest pairwise gap between peer confidences. The
// exponential weights come from the snapshot and carry no gradient.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ceat/attacks.hpp"
#include "ceat/dataset.hpp"
#include "ceat/ensemble.hpp"
#include "ceat/errors.hpp"
#include "ceat/model.hpp"
#include "ceat/tensor.hpp"

namespace ceat {

enum class Variant { ceat, vanilla_eat, hard_filter };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::ceat: return "ceat";
        case Variant::vanilla_eat: return "vanilla_eat";
        case Variant::hard_filter: return "hard_filter";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "ceat") return Variant::ceat;
    if (s == "vanilla_eat" || s == "vanilla") return Variant::vanilla_eat;
    if (s == "hard_filter") return Variant::hard_filter;
    throw ConfigError("unknown training variant '" + s + "' (expected ceat, vanilla_eat or hard_filter)");
}

// Peer-correctness subsets that receive the unweighted distance term in the
// hard-filter variant.
enum class FilterSubset { F12, F34, F3, F4, all };

inline std::string to_string(FilterSubset s) {
    switch (s) {
        case FilterSubset::F12: return "F12";
        case FilterSubset::F34: return "F34";
        case FilterSubset::F3: return "F3";
        case FilterSubset::F4: return "F4";
        case FilterSubset::all: return "all";
    }
    return "?";
}

inline FilterSubset parse_subset(const std::string& s) {
    if (s == "F12") return FilterSubset::F12;
    if (s == "F34") return FilterSubset::F34;
    if (s == "F3") return FilterSubset::F3;
    if (s == "F4") return FilterSubset::F4;
    if (s == "all") return FilterSubset::all;
    throw ConfigError("unknown filter subset '" + s + "' (expected F12, F34, F3, F4 or all)");
}

// Which parts of the regularizer are active; all on is full CEAT.
struct LossTerms {
    bool disparity = true;  // exponential peer-disparity weights
    bool adv = true;        // adversarial distance term
    bool nat = true;        // clean distance term
};

struct CeatConfig {
    double lambda = 1.0;
    double mu = 5.0;
    AttackSpec train_attack = AttackSpec::pgd(0.031, 0.0078, 10, true);
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    Variant variant = Variant::ceat;
    FilterSubset subset = FilterSubset::F12;
    LossTerms terms;

    void validate() const {
        if (!std::isfinite(lambda) || lambda < 0.0) throw ConfigError("lambda must be finite and >= 0");
        if (!std::isfinite(mu) || mu < 0.0) throw ConfigError("mu must be finite and >= 0");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        train_attack.validate();
        if (train_attack.member) throw ConfigError("training attacks must target the ensemble");
    }

    // Coefficients actually applied to the two distance terms.
    double effective_lambda() const {
        if (variant != Variant::ceat || !terms.nat) return 0.0;
        return lambda;
    }
    double effective_mu() const {
        if (variant == Variant::hard_filter) return 1.0;
        if (variant != Variant::ceat || !terms.adv) return 0.0;
        return mu;
    }
};

struct LossBreakdown {
    double l_ce = 0.0;
    double l_nat_d = 0.0;
    double l_adv_d = 0.0;
    double l_total = 0.0;
    double lambda = 0.0;  // coefficient applied to l_nat_d
    double mu = 0.0;      // coefficient applied to l_adv_d
    std::vector<double> weights_adv;
    std::vector<double> weights_nat;
};

// ---------------------------------------------------------------- building blocks

inline std::vector<double> true_class_confidence(const Tensor& probs, std::span<const int> labels) {
    const std::size_t k = probs.dim(1);
    if (labels.size() != probs.dim(0)) throw DimensionError("true_class_confidence: label count mismatch");
    std::vector<double> out(labels.size());
    for (std::size_t r = 0; r < labels.size(); ++r) out[r] = probs[r * k + static_cast<std::size_t>(labels[r])];
    return out;
}

inline std::vector<double> true_class_confidence(const Model& model, const Tensor& x, std::span<const int> labels) {
    return true_class_confidence(member_probs(model, x), labels);
}

// exp(amplifier · max_{i<j} |h_i - h_j|) per sample over the given peers.
// Two peers give exp(amplifier · |h_b - h_c|); a single peer gives 1.
inline std::vector<double> disparity_weight(const std::vector<std::vector<double>>& peer_confidences,
                                            double amplifier) {
    if (!(amplifier >= 0.0)) throw InputError("disparity amplifier must be >= 0");
    if (peer_confidences.empty()) throw InputError("disparity_weight needs at least one peer");
    const std::size_t n = peer_confidences.front().size();
    for (const auto& h : peer_confidences) {
        if (h.size() != n) throw DimensionError("disparity_weight: peers disagree on batch size");
        for (double v : h)
            if (!(v >= 0.0 && v <= 1.0)) throw InputError("disparity_weight: confidence outside [0,1]");
    }
    std::vector<double> out(n);
    for (std::size_t s = 0; s < n; ++s) {
        double gap = 0.0;
        for (std::size_t i = 0; i < peer_confidences.size(); ++i)
            for (std::size_t j = i + 1; j < peer_confidences.size(); ++j)
                gap = std::max(gap, std::fabs(peer_confidences[i][s] - peer_confidences[j][s]));
        out[s] = std::exp(amplifier * gap);
    }
    return out;
}

// Per-sample squared distance between two probability batches [N×K] -> [N].
inline Var squared_distance(const Var& p, const Var& q) { return sum(square(sub(p, q)), 1); }

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor out({labels.size(), num_classes});
    for (std::size_t r = 0; r < labels.size(); ++r) out[r * num_classes + static_cast<std::size_t>(labels[r])] = 1.0;
    return out;
}

// |softmax(f(x̃)) - softmax(f(x))|² per sample.
inline std::vector<double> loss_adv(const Model& model, const Tensor& x_tilde, const Tensor& x) {
    Tape tape;
    auto bound = bind(tape, model, false);
    auto d = squared_distance(softmax(forward(bound, tape.constant(x_tilde))), softmax(forward(bound, tape.constant(x))));
    return d.value().data();
}

// |softmax(f(x)) - onehot(y)|² per sample.
inline std::vector<double> loss_nat(const Model& model, const Tensor& x, std::span<const int> labels) {
    Tape tape;
    auto bound = bind(tape, model, false);
    auto p = softmax(forward(bound, tape.constant(x)));
    auto d = squared_distance(p, tape.constant(one_hot(labels, model.num_classes())));
    return d.value().data();
}

// Per-sample weights for one member. Weights equal one when the disparity
// term is disabled; hard filtering replaces the adversarial weights by a
// 0/1 subset mask.
struct MemberWeights {
    std::vector<double> adv;
    std::vector<double> nat;
};

struct MemberObjective {
    Var total;
    LossBreakdown breakdown;
};

// Builds member m's total loss on `tape`. x̃ and the weights are constants.
inline MemberObjective member_objective(Tape& tape, const BoundModel& bound, const Tensor& x, const Tensor& x_tilde,
                                        std::span<const int> labels, const MemberWeights& weights, double lambda,
                                        double mu) {
    const std::size_t n = labels.size();
    Var logits_adv = forward(bound, tape.constant(x_tilde));
    Var logits_clean = forward(bound, tape.constant(x));
    Var ce = cross_entropy(logits_adv, labels);
    Var p_adv = softmax(logits_adv);
    Var p_clean = softmax(logits_clean);
    Var adv_d = mean(mul(tape.constant(Tensor({n}, weights.adv)), squared_distance(p_adv, p_clean)));
    Var nat_d = mean(mul(tape.constant(Tensor({n}, weights.nat)),
                         squared_distance(p_clean, tape.constant(one_hot(labels, bound.model->num_classes())))));

    // Zero-coefficient terms stay off the graph so they cannot touch any
    // gradient; their values are still reported.
    Var total = ce;
    if (lambda != 0.0) total = add(total, scale(nat_d, lambda));
    if (mu != 0.0 && std::any_of(weights.adv.begin(), weights.adv.end(), [](double w) { return w != 0.0; }))
        total = add(total, scale(adv_d, mu));

    LossBreakdown b;
    b.l_ce = ce.value().item();
    b.l_nat_d = nat_d.value().item();
    b.l_adv_d = adv_d.value().item();
    b.l_total = total.value().item();
    b.lambda = lambda;
    b.mu = mu;
    b.weights_adv = weights.adv;
    b.weights_nat = weights.nat;
    return {total, std::move(b)};
}

// Confidences and predictions of every member, taken before any update.
struct Snapshot {
    std::vector<std::vector<double>> conf_adv;
    std::vector<std::vector<double>> conf_clean;
    std::vector<std::vector<int>> pred_adv;
    std::vector<int> ensemble_pred_adv;
};

inline Snapshot snapshot(const Ensemble& e, const Tensor& x, const Tensor& x_tilde, std::span<const int> labels) {
    Snapshot s;
    Tensor mean_adv;
    for (std::size_t m = 0; m < e.size(); ++m) {
        const Tensor pa = member_probs(e.members[m], x_tilde);
        s.conf_adv.push_back(true_class_confidence(pa, labels));
        s.conf_clean.push_back(true_class_confidence(member_probs(e.members[m], x), labels));
        s.pred_adv.push_back(argmax_rows(pa));
        if (m == 0) {
            mean_adv = pa;
        } else {
            const double count = static_cast<double>(m + 1);
            for (std::size_t i = 0; i < mean_adv.size(); ++i) mean_adv[i] += (pa[i] - mean_adv[i]) / count;
        }
    }
    s.ensemble_pred_adv = argmax_rows(mean_adv);
    return s;
}

inline std::vector<std::vector<double>> peers_of(const std::vector<std::vector<double>>& all, std::size_t m) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (i != m) out.push_back(all[i]);
    return out;
}

inline std::vector<double> subset_mask(const FilterPartition& part, FilterSubset subset, std::size_t n) {
    std::vector<double> mask(n, 0.0);
    auto mark = [&mask](const std::vector<std::size_t>& idx) {
        for (auto i : idx) mask[i] = 1.0;
    };
    switch (subset) {
        case FilterSubset::F12: mark(part.f1); mark(part.f2); break;
        case FilterSubset::F34: mark(part.f3); mark(part.f4); break;
        case FilterSubset::F3: mark(part.f3); break;
        case FilterSubset::F4: mark(part.f4); break;
        case FilterSubset::all: std::fill(mask.begin(), mask.end(), 1.0); break;
    }
    return mask;
}

inline MemberWeights member_weights(const CeatConfig& cfg, const Snapshot& snap, std::size_t m,
                                    std::span<const int> labels) {
    const std::size_t n = labels.size();
    MemberWeights w{std::vector<double>(n, 1.0), std::vector<double>(n, 1.0)};
    if (cfg.variant == Variant::hard_filter) {
        w.adv = subset_mask(peer_partition(snap.pred_adv, m, labels), cfg.subset, n);
    } else if (cfg.variant == Variant::ceat && cfg.terms.disparity) {
        w.adv = disparity_weight(peers_of(snap.conf_adv, m), cfg.mu);
        w.nat = disparity_weight(peers_of(snap.conf_clean, m), cfg.lambda);
    }
    return w;
}

// Loss breakdown for member m against the current (frozen) peers, without
// updating anything.
inline LossBreakdown loss_total(const Ensemble& e, std::size_t m, const Tensor& x, const Tensor& x_tilde,
                                std::span<const int> labels, const CeatConfig& cfg) {
    const auto snap = snapshot(e, x, x_tilde, labels);
    Tape tape;
    auto bound = bind(tape, e.members.at(m), false);
    return member_objective(tape, bound, x, x_tilde, labels, member_weights(cfg, snap, m, labels),
                            cfg.effective_lambda(), cfg.effective_mu())
        .breakdown;
}

// ---------------------------------------------------------------- training loop

struct BatchRecord {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    std::size_t member = 0;
    std::size_t size = 0;
    LossBreakdown loss;
    FilterPartition partition;
};

struct MemberEpochStats {
    double l_ce = 0.0;
    double l_nat_d = 0.0;
    double l_adv_d = 0.0;
    double l_total = 0.0;
    std::array<double, 4> partition{};  // |F1..F4| / N over the epoch
};

struct WeightStats {
    double mean = 0.0;
    double max = 0.0;
};

struct EpochSummary {
    std::size_t epoch = 0;
    std::vector<MemberEpochStats> members;
    WeightStats weights_adv;
    WeightStats weights_nat;
    // 0-1 risk on the epoch's training adversarial examples, measured before
    // each batch's updates.
    RiskReport risk;
};

using BatchObserver = std::function<void(const BatchRecord&)>;

inline std::uint64_t batch_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
    return member_seed(member_seed(seed, epoch), batch);
}

inline void check_trainable(const Ensemble& e, const Dataset& ds, const CeatConfig& cfg) {
    cfg.validate();
    e.validate();
    if (e.size() < 2) throw ConfigError("ensemble training needs at least 2 members");
    if (e.optimizers.size() != e.size()) throw ConfigError("every member needs its own optimizer");
    if (ds.sample_shape != e.input_shape())
        throw DimensionError("dataset samples " + shape_str(ds.sample_shape) + " do not match model input " +
                             shape_str(e.input_shape()));
    if (ds.num_classes > e.num_classes()) throw DimensionError("dataset has more classes than the models");
    if (ds.size() == 0) throw ConfigError("training set is empty");
}

// One pass over the data. Members are updated in index order.
inline EpochSummary train_epoch(Ensemble& e, const Dataset& ds, const CeatConfig& cfg, std::size_t epoch,
                                const BatchObserver& observer = {}) {
    check_trainable(e, ds, cfg);
    const std::size_t m_count = e.size();
    EpochSummary summary;
    summary.epoch = epoch;
    summary.members.resize(m_count);
    summary.risk.members.resize(m_count);
    double wsum_adv = 0.0, wsum_nat = 0.0;
    std::size_t wcount = 0;

    const auto plan = BatchPlan{cfg.batch_size, cfg.seed};
    const auto all = batches(ds, plan, epoch);
    for (std::size_t b = 0; b < all.size(); ++b) {
        const auto& batch = all[b];
        const std::size_t n = batch.y.size();
        const Tensor x_tilde =
            run_attack(AttackTarget::ensemble(e), batch.x, batch.y, cfg.train_attack, batch_seed(cfg.seed, epoch, b))
                .x_adv;
        const auto snap = snapshot(e, batch.x, x_tilde, batch.y);
        for (std::size_t m = 0; m < m_count; ++m)
            for (std::size_t s = 0; s < n; ++s)
                if (!std::isfinite(snap.conf_adv[m][s]) || !std::isfinite(snap.conf_clean[m][s]))
                    throw NumericError("non-finite output at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(b) + ", member " + std::to_string(m));
        {
            const auto r = adversarial_risk(snap.pred_adv, snap.ensemble_pred_adv, batch.y);
            const double share = static_cast<double>(n) / static_cast<double>(ds.size());
            for (std::size_t m = 0; m < m_count; ++m) {
                auto& acc = summary.risk.members[m];
                const auto& cur = r.members[m];
                acc.risk += cur.risk * share;
                acc.boundary_mass += cur.boundary_mass * share;
                acc.interior_mass += cur.interior_mass * share;
                acc.boundary_risk += cur.boundary_risk * share;
                acc.interior_risk += cur.interior_risk * share;
                acc.combined += cur.combined * share;
            }
            summary.risk.ensemble_risk += r.ensemble_risk * share;
            summary.risk.majority_risk += r.majority_risk * share;
        }

        for (std::size_t m = 0; m < m_count; ++m) {
            const auto weights = member_weights(cfg, snap, m, batch.y);
            Tape tape;
            auto bound = bind(tape, e.members[m], true);
            auto obj = member_objective(tape, bound, batch.x, x_tilde, batch.y, weights, cfg.effective_lambda(),
                                        cfg.effective_mu());
            const auto& lb = obj.breakdown;
            if (!std::isfinite(lb.l_total) || !std::isfinite(lb.l_ce) || !std::isfinite(lb.l_adv_d) ||
                !std::isfinite(lb.l_nat_d))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                   ", member " + std::to_string(m));
            backward(obj.total);
            collect_gradients(e.members[m], bound);
            e.optimizers[m].epoch = epoch;
            sgd_step(e.optimizers[m], e.members[m]);

            const auto part = peer_partition(snap.pred_adv, m, batch.y);
            auto& st = summary.members[m];
            const double share = static_cast<double>(n) / static_cast<double>(ds.size());
            st.l_ce += lb.l_ce * share;
            st.l_nat_d += lb.l_nat_d * share;
            st.l_adv_d += lb.l_adv_d * share;
            st.l_total += lb.l_total * share;
            st.partition[0] += static_cast<double>(part.f1.size()) / static_cast<double>(ds.size());
            st.partition[1] += static_cast<double>(part.f2.size()) / static_cast<double>(ds.size());
            st.partition[2] += static_cast<double>(part.f3.size()) / static_cast<double>(ds.size());
            st.partition[3] += static_cast<double>(part.f4.size()) / static_cast<double>(ds.size());
            for (std::size_t s = 0; s < n; ++s) {
                wsum_adv += weights.adv[s];
                wsum_nat += weights.nat[s];
                summary.weights_adv.max = std::max(summary.weights_adv.max, weights.adv[s]);
                summary.weights_nat.max = std::max(summary.weights_nat.max, weights.nat[s]);
            }
            wcount += n;
            if (observer) observer(BatchRecord{epoch, b, m, n, lb, part});
        }
    }
    summary.weights_adv.mean = wsum_adv / static_cast<double>(wcount);
    summary.weights_nat.mean = wsum_nat / static_cast<double>(wcount);
    return summary;
}

// Hard-filter variant: cross-entropy on every sample plus the unweighted
// distance term on the chosen peer-correctness subset only.
inline EpochSummary train_hard_filter_epoch(Ensemble& e, const Dataset& ds, const CeatConfig& cfg, std::size_t epoch,
                                            const BatchObserver& observer = {}) {
    if (cfg.variant != Variant::hard_filter) throw UsageError("train_hard_filter_epoch needs the hard_filter variant");
    return train_epoch(e, ds, cfg, epoch, observer);
}

using EpochObserver = std::function<void(const EpochSummary&)>;

inline std::vector<EpochSummary> train(Ensemble& e, const Dataset& ds, const CeatConfig& cfg,
                                       const EpochObserver& on_epoch = {}, const BatchObserver& on_batch = {}) {
    std::vector<EpochSummary> out;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        out.push_back(cfg.variant == Variant::hard_filter ? train_hard_filter_epoch(e, ds, cfg, epoch, on_batch)
                                                          : train_epoch(e, ds, cfg, epoch, on_batch));
        if (on_epoch) on_epoch(out.back());
    }
    return out;
}

}  // namespace ceat
