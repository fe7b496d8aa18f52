#pragma once

// L∞ sign-gradient attacks (FGSM, PGD, MIM, CW-margin) against one model or
// an averaged-softmax ensemble. Every iterate is projected back onto the
// ε-ball around the clean input and onto [0,1].

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ceat/ensemble.hpp"
#include "ceat/errors.hpp"
#include "ceat/model.hpp"
#include "ceat/tensor.hpp"

namespace ceat {

enum class AttackKind { fgsm, pgd, mim, cw };

inline std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::pgd: return "pgd";
        case AttackKind::mim: return "mim";
        case AttackKind::cw: return "cw";
    }
    return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "pgd") return AttackKind::pgd;
    if (s == "mim") return AttackKind::mim;
    if (s == "cw") return AttackKind::cw;
    throw ConfigError("unknown attack '" + s + "' (expected fgsm, pgd, mim or cw)");
}

struct AttackSpec {
    AttackKind kind = AttackKind::pgd;
    double epsilon = 0.031;
    double alpha = 0.007;
    std::size_t steps = 20;
    bool random_start = true;
    double mim_decay = 1.0;
    double cw_kappa = 0.0;
    // Single-member target; the whole ensemble when empty.
    std::optional<std::size_t> member;

    static AttackSpec fgsm(double eps) { return AttackSpec{AttackKind::fgsm, eps, eps, 1, false}; }
    static AttackSpec pgd(double eps, double alpha, std::size_t steps, bool random_start = true) {
        return AttackSpec{AttackKind::pgd, eps, alpha, steps, random_start};
    }
    static AttackSpec mim(double eps, double alpha, std::size_t steps, double decay = 1.0) {
        return AttackSpec{AttackKind::mim, eps, alpha, steps, false, decay};
    }
    static AttackSpec cw(double eps, double alpha, std::size_t steps, double kappa = 0.0) {
        return AttackSpec{AttackKind::cw, eps, alpha, steps, false, 1.0, kappa};
    }

    // FGSM is a single ε-sized step from the clean input.
    AttackSpec normalized() const {
        AttackSpec s = *this;
        if (s.kind == AttackKind::fgsm) {
            s.steps = 1;
            s.alpha = s.epsilon;
            s.random_start = false;
        }
        return s;
    }

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
        if (kind != AttackKind::fgsm) {
            if (steps < 1) throw ConfigError("attack steps must be >= 1");
            if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("attack alpha must be > 0");
        }
        if (!(mim_decay >= 0.0)) throw ConfigError("mim decay must be >= 0");
        if (!(cw_kappa >= 0.0)) throw ConfigError("cw kappa must be >= 0");
    }
};

// Frozen models an attack differentiates through. One model means plain
// cross-entropy on its logits; several mean the averaged-softmax ensemble.
class AttackTarget {
public:
    static AttackTarget single(const Model& m) { return AttackTarget({&m}, false); }
    static AttackTarget ensemble(const Ensemble& e) {
        e.validate();
        return AttackTarget(member_pointers(e), true);
    }
    static AttackTarget resolve(const Ensemble& e, const AttackSpec& spec) {
        if (!spec.member) return ensemble(e);
        if (*spec.member >= e.size())
            throw ConfigError("attack member " + std::to_string(*spec.member) + " outside ensemble of " +
                              std::to_string(e.size()));
        return single(e.members[*spec.member]);
    }

    const std::vector<const Model*>& models() const noexcept { return models_; }
    bool is_ensemble() const noexcept { return ensemble_; }
    std::size_t num_classes() const { return models_.front()->num_classes(); }

    // Per-sample class scores on the tape: logits for a single model,
    // log of the averaged member probabilities for an ensemble.
    Var scores(Tape& tape, const Var& x) const {
        if (!ensemble_) return forward(bind(tape, *models_.front(), false), x);
        std::vector<Var> logps;
        for (const auto* m : models_) logps.push_back(log_softmax(forward(bind(tape, *m, false), x)));
        return log_mean_exp(logps);
    }

    std::vector<int> predict(const Tensor& x) const {
        if (!ensemble_) return ceat::predict(*models_.front(), x);
        return argmax_rows(ensemble_probs(models_, x));
    }

private:
    AttackTarget(std::vector<const Model*> models, bool ensemble) : models_(std::move(models)), ensemble_(ensemble) {}

    std::vector<const Model*> models_;
    bool ensemble_;
};

namespace detail {

enum class Objective { nll, margin };

inline Tensor objective_gradient(const AttackTarget& target, const Tensor& x, std::span<const int> labels,
                                 Objective objective, double kappa) {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var scores = target.scores(tape, xv);
    Var loss;
    if (objective == Objective::margin) {
        loss = sum(margin_loss(scores, labels, kappa));
    } else if (target.is_ensemble()) {
        loss = scale(mean(select_rows(scores, labels)), -1.0);
    } else {
        loss = cross_entropy(scores, labels);
    }
    backward(loss);
    return xv.grad();
}

}  // namespace detail

// ∇_x of the attack loss: mean cross-entropy for a single model, mean NLL of
// the averaged probabilities for an ensemble. Parameters are constants.
inline Tensor loss_grad_wrt_input(const AttackTarget& target, const Tensor& x, std::span<const int> labels) {
    return detail::objective_gradient(target, x, labels, detail::Objective::nll, 0.0);
}

struct AdvBatch {
    Tensor x_adv;
    AttackSpec spec;
    const Tensor* source = nullptr;
};

// Runs any attack family. `seed` drives the random start only.
inline AdvBatch run_attack(const AttackTarget& target, const Tensor& x, std::span<const int> labels,
                           const AttackSpec& requested, std::uint64_t seed = 0) {
    requested.validate();
    const AttackSpec spec = requested.normalized();
    if (spec.kind == AttackKind::cw && target.num_classes() < 2) throw InputError("cw attack needs K >= 2");
    if (x.rank() < 1 || x.dim(0) != labels.size())
        throw DimensionError("attack: " + std::to_string(labels.size()) + " labels for batch " + shape_str(x.shape()));

    const double eps = spec.epsilon;
    Tensor adv = x;
    if (eps == 0.0) return {adv, spec, &x};

    auto project = [&](Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double v = std::min(std::max(t[i], x[i] - eps), x[i] + eps);
            t[i] = std::clamp(v, 0.0, 1.0);
        }
    };

    if (spec.random_start) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> offset(-eps, eps);
        for (auto& v : adv.values()) v += offset(rng);
        project(adv);
    }

    const std::size_t n = x.dim(0);
    const std::size_t per = x.size() / n;
    Tensor momentum(x.shape());
    const auto objective = spec.kind == AttackKind::cw ? detail::Objective::margin : detail::Objective::nll;
    // Margin is minimized, everything else ascended.
    const double direction = spec.kind == AttackKind::cw ? -1.0 : 1.0;

    for (std::size_t step = 0; step < spec.steps; ++step) {
        Tensor g = detail::objective_gradient(target, adv, labels, objective, spec.cw_kappa);
        if (spec.kind == AttackKind::mim) {
            for (std::size_t s = 0; s < n; ++s) {
                double l1 = 0.0;
                for (std::size_t i = s * per; i < (s + 1) * per; ++i) l1 += std::fabs(g[i]);
                for (std::size_t i = s * per; i < (s + 1) * per; ++i)
                    momentum[i] = spec.mim_decay * momentum[i] + (l1 > 0.0 ? g[i] / l1 : 0.0);
            }
            g = momentum;
        }
        for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += spec.alpha * direction * detail::sign(g[i]);
        project(adv);
    }
    return {std::move(adv), spec, &x};
}

inline AdvBatch fgsm(const AttackTarget& target, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
    if (spec.kind != AttackKind::fgsm) throw UsageError("fgsm called with a " + to_string(spec.kind) + " spec");
    return run_attack(target, x, labels, spec);
}

inline AdvBatch pgd(const AttackTarget& target, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                    std::uint64_t seed = 0) {
    if (spec.kind != AttackKind::pgd) throw UsageError("pgd called with a " + to_string(spec.kind) + " spec");
    return run_attack(target, x, labels, spec, seed);
}

inline AdvBatch mim(const AttackTarget& target, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                    std::uint64_t seed = 0) {
    if (spec.kind != AttackKind::mim) throw UsageError("mim called with a " + to_string(spec.kind) + " spec");
    return run_attack(target, x, labels, spec, seed);
}

inline AdvBatch cw_attack(const AttackTarget& target, const Tensor& x, std::span<const int> labels,
                          const AttackSpec& spec, std::uint64_t seed = 0) {
    if (spec.kind != AttackKind::cw) throw UsageError("cw_attack called with a " + to_string(spec.kind) + " spec");
    return run_attack(target, x, labels, spec, seed);
}

// Fraction of samples the evaluated target gets wrong on the adversarial batch.
inline double attack_success_rate(const AttackTarget& evaluated, const AdvBatch& adv, std::span<const int> labels) {
    const auto pred = evaluated.predict(adv.x_adv);
    if (pred.empty()) return 0.0;
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i] ? 1 : 0;
    return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

}  // namespace ceat
