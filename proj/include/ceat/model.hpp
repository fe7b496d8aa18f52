#pragma once

// Small feed-forward classifiers and their per-model SGD optimizer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ceat/errors.hpp"
#include "ceat/tensor.hpp"

namespace ceat {

// Weight is [in×out] so a layer computes x·W + b on row-major batches.
struct Dense {
    Tensor weight;
    Tensor bias;
};

// Kernel is [F×C×3×3]; stride 1, padding 1, no bias.
struct Conv {
    Tensor kernel;
};

struct Relu {};

// Records the per-sample shape it flattens so a checkpoint can recover the
// model's input shape.
struct Flatten {
    Shape input;
};

using Layer = std::variant<Dense, Conv, Relu, Flatten>;

enum class Arch { mlp, cnn };

inline std::string to_string(Arch a) { return a == Arch::mlp ? "mlp" : "cnn"; }

inline Arch parse_arch(const std::string& name) {
    if (name == "mlp") return Arch::mlp;
    if (name == "cnn") return Arch::cnn;
    throw ConfigError("unsupported architecture '" + name + "' (expected mlp or cnn)");
}

// Widths are hidden units for mlp and channel counts for cnn.
struct ArchSpec {
    Arch kind = Arch::mlp;
    std::vector<std::size_t> widths;

    static ArchSpec reference(Arch kind) {
        return kind == Arch::mlp ? ArchSpec{Arch::mlp, {256, 128}} : ArchSpec{Arch::cnn, {16, 16}};
    }
};

class Model {
public:
    Model() = default;

    Model(Shape input_shape, std::vector<Layer> layers)
        : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
        validate();
    }

    const Shape& input_shape() const noexcept { return input_shape_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    // Parameters in layer order: Dense contributes (weight, bias), Conv its kernel.
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (auto& layer : layers_) {
            if (auto* d = std::get_if<Dense>(&layer)) {
                out.push_back(&d->weight);
                out.push_back(&d->bias);
            } else if (auto* c = std::get_if<Conv>(&layer)) {
                out.push_back(&c->kernel);
            }
        }
        return out;
    }

    std::vector<const Tensor*> parameters() const {
        std::vector<const Tensor*> out;
        for (auto* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->size();
        return n;
    }

    bool has_gradients() const noexcept { return !grads_.empty(); }
    const std::vector<Tensor>& gradients() const noexcept { return grads_; }
    void set_gradients(std::vector<Tensor> grads) {
        auto params = parameters();
        if (grads.size() != params.size())
            throw UsageError("set_gradients: expected " + std::to_string(params.size()) + " tensors");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (grads[i].shape() != params[i]->shape())
                throw DimensionError("set_gradients: gradient " + shape_str(grads[i].shape()) +
                                     " for parameter " + shape_str(params[i]->shape()));
        grads_ = std::move(grads);
    }
    void clear_gradients() noexcept { grads_.clear(); }

    bool all_finite() const {
        for (const auto* p : parameters())
            for (double v : p->values())
                if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Model& other) const {
        if (input_shape_ != other.input_shape_ || layers_.size() != other.layers_.size()) return false;
        auto a = parameters();
        auto b = other.parameters();
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(*a[i] == *b[i])) return false;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].index() != other.layers_[i].index()) return false;
        return true;
    }

private:
    void validate() {
        Shape cur = input_shape_;
        for (const auto& layer : layers_) {
            if (const auto* d = std::get_if<Dense>(&layer)) {
                const auto& w = d->weight;
                if (cur.size() != 1 || w.rank() != 2 || w.dim(0) != cur[0] || d->bias.rank() != 1 ||
                    d->bias.dim(0) != w.dim(1))
                    throw DimensionError("dense layer " + shape_str(w.shape()) + " cannot follow " +
                                         shape_str(cur));
                cur = {w.dim(1)};
            } else if (const auto* c = std::get_if<Conv>(&layer)) {
                const auto& k = c->kernel;
                if (cur.size() != 3 || k.rank() != 4 || k.dim(1) != cur[0] || k.dim(2) != 3 || k.dim(3) != 3)
                    throw DimensionError("conv kernel " + shape_str(k.shape()) + " cannot follow " +
                                         shape_str(cur));
                cur = {k.dim(0), cur[1], cur[2]};
            } else if (const auto* f = std::get_if<Flatten>(&layer)) {
                if (f->input != cur)
                    throw DimensionError("flatten expects " + shape_str(f->input) + ", got " + shape_str(cur));
                cur = {shape_size(cur)};
            }
        }
        if (cur.size() != 1 || cur[0] < 2)
            throw DimensionError("model output must be a class vector of width >= 2, got " + shape_str(cur));
        num_classes_ = cur[0];
    }

    Shape input_shape_;
    std::vector<Layer> layers_;
    std::size_t num_classes_ = 0;
    std::vector<Tensor> grads_;
};

// He-normal initialization (std = sqrt(2 / fan_in)), zero biases.
inline Model init_model(const ArchSpec& arch, const Shape& input_shape, std::size_t num_classes,
                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto he = [&rng](Shape shape, std::size_t fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        Tensor t(std::move(shape));
        for (auto& v : t.values()) v = dist(rng);
        return t;
    };

    std::vector<Layer> layers;
    Shape cur = input_shape;
    if (arch.kind == Arch::cnn) {
        if (cur.size() != 3)
            throw ConfigError("cnn needs CxHxW inputs, got " + shape_str(input_shape));
        for (auto channels : arch.widths) {
            layers.emplace_back(Conv{he({channels, cur[0], 3, 3}, cur[0] * 9)});
            layers.emplace_back(Relu{});
            cur = {channels, cur[1], cur[2]};
        }
        layers.emplace_back(Flatten{cur});
        const std::size_t flat = shape_size(cur);
        layers.emplace_back(Dense{he({flat, num_classes}, flat), Tensor({num_classes})});
    } else {
        layers.emplace_back(Flatten{cur});
        std::size_t width = shape_size(cur);
        for (auto hidden : arch.widths) {
            layers.emplace_back(Dense{he({width, hidden}, width), Tensor({hidden})});
            layers.emplace_back(Relu{});
            width = hidden;
        }
        layers.emplace_back(Dense{he({width, num_classes}, width), Tensor({num_classes})});
    }
    return Model(input_shape, std::move(layers));
}

// A model's parameters placed on a tape.
struct BoundModel {
    const Model* model = nullptr;
    std::vector<Var> params;
};

inline BoundModel bind(Tape& tape, const Model& model, bool trainable) {
    BoundModel bound{&model, {}};
    for (const auto* p : model.parameters()) bound.params.push_back(tape.leaf(*p, trainable));
    return bound;
}

inline void check_input(const Model& model, const Tensor& x) {
    const auto& s = x.shape();
    const auto& in = model.input_shape();
    if (s.size() != in.size() + 1 || !std::equal(in.begin(), in.end(), s.begin() + 1))
        throw DimensionError("input " + shape_str(s) + " does not match model input N x " + shape_str(in));
}

// Logits [N×K] for a batch already on the tape.
inline Var forward(const BoundModel& bound, const Var& x) {
    check_input(*bound.model, x.value());
    const std::size_t n = x.value().dim(0);
    Var h = x;
    std::size_t p = 0;
    for (const auto& layer : bound.model->layers()) {
        if (std::holds_alternative<Dense>(layer)) {
            h = add_rowwise(matmul(h, bound.params[p]), bound.params[p + 1]);
            p += 2;
        } else if (std::holds_alternative<Conv>(layer)) {
            h = conv2d(h, bound.params[p++]);
        } else if (std::holds_alternative<Relu>(layer)) {
            h = relu(h);
        } else {
            h = reshape(h, {n, shape_size(std::get<Flatten>(layer).input)});
        }
    }
    return h;
}

// Inference-only forward pass.
inline Tensor forward(const Model& model, const Tensor& x) {
    Tape tape;
    auto bound = bind(tape, model, false);
    return forward(bound, tape.constant(x)).value();
}

// Copies parameter gradients from the tape onto the model after backward().
inline void collect_gradients(Model& model, const BoundModel& bound) {
    if (bound.model != &model) throw UsageError("collect_gradients: binding belongs to another model");
    std::vector<Tensor> grads;
    grads.reserve(bound.params.size());
    for (const auto& v : bound.params) grads.push_back(v.grad());
    model.set_gradients(std::move(grads));
}

struct Milestone {
    std::size_t epoch;
    double factor;
};

struct SgdState {
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::vector<Milestone> schedule;
    std::vector<Tensor> velocity;
    std::size_t epoch = 0;
};

inline SgdState make_sgd(const Model& model, double learning_rate, double momentum,
                         std::vector<Milestone> schedule) {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    SgdState s{learning_rate, momentum, std::move(schedule), {}, 0};
    for (const auto* p : model.parameters()) s.velocity.emplace_back(p->shape());
    return s;
}

// Tenfold decays at the same fractions of training (75/120 and 95/120) used
// by the reference 120-epoch ResNet schedule.
inline std::vector<Milestone> proportional_schedule(std::size_t total_epochs) {
    return {{total_epochs * 75 / 120, 0.1}, {total_epochs * 95 / 120, 0.1}};
}

inline double lr_at_epoch(const SgdState& state, std::size_t epoch) {
    double lr = state.learning_rate;
    for (const auto& m : state.schedule)
        if (m.epoch <= epoch) lr *= m.factor;
    return lr;
}

// v <- momentum*v + g; w <- w - lr*v. Consumes the model's gradients.
inline void sgd_step(SgdState& state, Model& model) {
    if (!model.has_gradients()) throw UsageError("sgd_step: model has no gradients");
    auto params = model.parameters();
    if (state.velocity.size() != params.size())
        throw UsageError("sgd_step: optimizer state does not belong to this model");
    const double lr = lr_at_epoch(state, state.epoch);
    const auto& grads = model.gradients();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i]->values();
        auto v = state.velocity[i].values();
        auto g = grads[i].values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = state.momentum * v[j] + g[j];
            w[j] -= lr * v[j];
        }
    }
    model.clear_gradients();
}

}  // namespace ceat
