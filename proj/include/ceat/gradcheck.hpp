#pragma once

// Finite-difference check of backward() on small seeded MLP and CNN
// instances, covering parameter gradients of the member training objective
// and input gradients of the attack losses.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ceat/attacks.hpp"
#include "ceat/ensemble.hpp"
#include "ceat/model.hpp"
#include "ceat/tensor.hpp"
#include "ceat/trainer.hpp"

namespace ceat {

struct GradcheckTrial {
    std::string arch;
    std::uint64_t seed = 0;
    std::size_t parameters = 0;
    double param_error = 0.0;  // member objective wrt all parameters
    double input_error = 0.0;  // ensemble NLL and margin loss wrt the input
    double worst() const { return std::max(param_error, input_error); }
};

struct GradcheckResult {
    std::vector<GradcheckTrial> trials;
    double tolerance = 1e-4;
    double worst = 0.0;
    bool passed() const { return worst < tolerance; }
};

// Flat copy of every parameter, in parameters() order.
inline Tensor flat_parameters(const Model& model) {
    std::vector<double> v;
    for (const auto* p : model.parameters()) v.insert(v.end(), p->values().begin(), p->values().end());
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

inline void set_flat_parameters(Model& model, const Tensor& flat) {
    if (flat.size() != model.parameter_count()) throw DimensionError("set_flat_parameters: size mismatch");
    std::size_t at = 0;
    for (auto* p : model.parameters())
        for (auto& v : p->values()) v = flat[at++];
}

namespace detail {

inline Model random_gradcheck_model(Arch arch, std::mt19937_64& rng, std::uint64_t seed, Shape& input_shape,
                                    std::size_t& classes) {
    std::uniform_int_distribution<std::size_t> pick(2, 4);
    classes = pick(rng) + 1;
    ArchSpec spec{arch, {}};
    if (arch == Arch::mlp) {
        input_shape = {1, 4, pick(rng) + 1};
        spec.widths = {pick(rng) + 4, pick(rng) + 2};
    } else {
        input_shape = {pick(rng) - 1, 4, 4};
        spec.widths = {pick(rng), pick(rng)};
    }
    return init_model(spec, input_shape, classes, seed);
}

inline Tensor random_batch(std::mt19937_64& rng, std::size_t n, const Shape& sample) {
    std::uniform_real_distribution<double> pixel(0.05, 0.95);
    Shape shape{n};
    shape.insert(shape.end(), sample.begin(), sample.end());
    Tensor x(shape);
    for (auto& v : x.values()) v = pixel(rng);
    return x;
}

}  // namespace detail

inline GradcheckTrial gradcheck_trial(Arch arch, std::uint64_t seed, double h = 1e-5) {
    std::mt19937_64 rng(seed);
    Shape sample;
    std::size_t k = 0;
    Model model = detail::random_gradcheck_model(arch, rng, seed, sample, k);
    const std::size_t n = 3;
    const Tensor x = detail::random_batch(rng, n, sample);
    Tensor x_tilde = x;
    std::uniform_real_distribution<double> jitter(-0.03, 0.03);
    for (auto& v : x_tilde.values()) v += jitter(rng);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> label(0, static_cast<int>(k) - 1);
    for (auto& y : labels) y = label(rng);
    std::uniform_real_distribution<double> weight(1.0, 3.0);
    MemberWeights w{std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t s = 0; s < n; ++s) {
        w.adv[s] = weight(rng);
        w.nat[s] = weight(rng);
    }
    const double lambda = 0.7, mu = 1.3;

    GradcheckTrial trial;
    trial.arch = to_string(arch);
    trial.seed = seed;
    trial.parameters = model.parameter_count();

    // Parameter gradients of the full member objective.
    {
        Tape tape;
        auto bound = bind(tape, model, true);
        backward(member_objective(tape, bound, x, x_tilde, labels, w, lambda, mu).total);
        collect_gradients(model, bound);
        std::vector<double> analytic;
        for (const auto& g : model.gradients()) analytic.insert(analytic.end(), g.values().begin(), g.values().end());
        model.clear_gradients();
        Model probe = model;
        auto objective = [&](const Tensor& flat) {
            set_flat_parameters(probe, flat);
            Tape t;
            auto b = bind(t, probe, false);
            return member_objective(t, b, x, x_tilde, labels, w, lambda, mu).breakdown.l_total;
        };
        const Tensor numeric = finite_difference_gradient(objective, flat_parameters(model), h);
        trial.param_error = max_relative_error(Tensor({analytic.size()}, analytic), numeric);
    }

    // Input gradients: averaged-softmax NLL over a two-member ensemble, and
    // the margin loss of a single member.
    {
        Ensemble e;
        const ArchSpec peer{arch, arch == Arch::mlp ? std::vector<std::size_t>{5, 4} : std::vector<std::size_t>{2, 2}};
        e.members = {model, init_model(peer, sample, k, seed + 1)};
        const auto target = AttackTarget::ensemble(e);
        auto nll = [&](const Tensor& xi) {
            Tape t;
            return -mean(select_rows(target.scores(t, t.constant(xi)), labels)).value().item();
        };
        double err = max_relative_error(loss_grad_wrt_input(target, x, labels), finite_difference_gradient(nll, x, h));

        const auto single = AttackTarget::single(model);
        auto margin = [&](const Tensor& xi) {
            Tape t;
            return sum(margin_loss(single.scores(t, t.constant(xi)), labels, 0.0)).value().item();
        };
        Tape tape;
        Var xv = tape.leaf(x, true);
        backward(sum(margin_loss(single.scores(tape, xv), labels, 0.0)));
        err = std::max(err, max_relative_error(xv.grad(), finite_difference_gradient(margin, x, h)));
        trial.input_error = err;
    }
    return trial;
}

// `trials` instances of each architecture with seeds base_seed, base_seed+1, ...
inline GradcheckResult gradcheck_suite(std::size_t trials = 10, std::uint64_t base_seed = 0, double h = 1e-5,
                                       double tolerance = 1e-4) {
    GradcheckResult result;
    result.tolerance = tolerance;
    for (Arch arch : {Arch::mlp, Arch::cnn})
        for (std::size_t i = 0; i < trials; ++i) {
            result.trials.push_back(gradcheck_trial(arch, base_seed + i, h));
            result.worst = std::max(result.worst, result.trials.back().worst());
        }
    return result;
}

}  // namespace ceat
